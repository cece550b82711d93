//! The constrained-backpropagation optimizer.
//!
//! Weights descend on the Lagrangian `L = C + sum_i lambda_i cs_i(w_i)` every
//! mini-batch (SGD with momentum, clipped to the grid range). Multipliers
//! ascend on `L` and the window variable `g` grows only at epoch boundaries,
//! and only when the epoch's summed Lagrangian failed to decrease or the
//! patience `p_max` ran out.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{cfs, constraint_cs, constraint_grad, make_grid, QuantGrid};
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::ndcore::Matrix;
use crate::network::{loss, ForwardMode, Gradients, Network};
use crate::quantizer::{clip_in_place, scale_factor, ScalePolicy};

/// Which post-training procedure runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainingMode {
    /// Full method with the gradually vanishing window.
    #[default]
    Cbp,
    /// Multipliers and constraint, but `ucs = 1` everywhere from the start.
    CbpNoWindow,
    /// Quantized forward with straight-through backward, no constraint term.
    SteOnly,
    /// Plain backprop on real weights (used for pre-training).
    FullPrecision,
}

impl TrainingMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Cbp => "cbp",
            TrainingMode::CbpNoWindow => "cbp-no-window",
            TrainingMode::SteOnly => "ste-only",
            TrainingMode::FullPrecision => "full-precision",
        }
    }

    pub fn uses_multipliers(self) -> bool {
        matches!(self, TrainingMode::Cbp | TrainingMode::CbpNoWindow)
    }

    pub fn quantized_forward(self) -> bool {
        !matches!(self, TrainingMode::FullPrecision)
    }
}

impl std::str::FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cbp" => Ok(TrainingMode::Cbp),
            "cbp-no-window" => Ok(TrainingMode::CbpNoWindow),
            "ste-only" => Ok(TrainingMode::SteOnly),
            "full-precision" => Ok(TrainingMode::FullPrecision),
            other => Err(Error::Domain(format!("unknown training mode {other:?}"))),
        }
    }
}

/// Ascent rule for the multipliers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MultiplierOptimizer {
    /// Adaptive-moment ascent.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// `lambda += eta * cs`.
    RawAscent,
}

impl Default for MultiplierOptimizer {
    fn default() -> Self {
        MultiplierOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Increment rule for `g`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GSchedule {
    /// +1 below 10, +10 below 100, +100 otherwise.
    #[default]
    ThreeTier,
    /// +1 below 10, +10 otherwise.
    TwoTier,
}

impl GSchedule {
    pub fn increment(self, g: f64) -> f64 {
        match self {
            GSchedule::ThreeTier if g < 10.0 => 1.0,
            GSchedule::ThreeTier if g < 100.0 => 10.0,
            GSchedule::ThreeTier => 100.0,
            GSchedule::TwoTier if g < 10.0 => 1.0,
            GSchedule::TwoTier => 10.0,
        }
    }
}

impl std::str::FromStr for GSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "three-tier" => Ok(GSchedule::ThreeTier),
            "two-tier" => Ok(GSchedule::TwoTier),
            other => Err(Error::Domain(format!("unknown g schedule {other:?}"))),
        }
    }
}

/// Everything that shapes a training trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbpConfig {
    pub mode: TrainingMode,
    pub lr_w: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Total epoch budget; training stops when `TrainState::epoch` reaches it.
    pub epochs: usize,
    pub lr_lambda: f64,
    pub p_max: usize,
    pub multiplier_optimizer: MultiplierOptimizer,
    pub g_schedule: GSchedule,
    /// The weight-learning rate is multiplied by `lr_decay_factor` the first
    /// time `g` reaches this value.
    pub lr_decay_trigger: f64,
    pub lr_decay_factor: f64,
    pub scale_policy: ScalePolicy,
    pub seed: u64,
}

impl Default for CbpConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Cbp,
            lr_w: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 200,
            lr_lambda: 1e-4,
            p_max: 20,
            multiplier_optimizer: MultiplierOptimizer::default(),
            g_schedule: GSchedule::ThreeTier,
            lr_decay_trigger: 20.0,
            lr_decay_factor: 0.1,
            scale_policy: ScalePolicy::FrozenAtStart,
            seed: 0,
        }
    }
}

impl CbpConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_w", self.lr_w),
            ("lr_lambda", self.lr_lambda),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (name, v) in rates {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Domain("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be at least 1".into()));
        }
        if self.p_max == 0 {
            return Err(Error::Domain("p_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// Lagrange multipliers with their ascent moments and the epoch-level
/// scheduling state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplierState {
    /// One multiplier per constrained weight, layer-major.
    pub lambda: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub steps: u64,
    pub eta_lambda: f64,
    pub optimizer: MultiplierOptimizer,
    /// Epochs since the last update.
    pub p: usize,
    pub p_max: usize,
    pub l_sum_prev: f64,
}

impl MultiplierState {
    pub fn new(n: usize, eta_lambda: f64, optimizer: MultiplierOptimizer, p_max: usize) -> Self {
        Self {
            lambda: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            steps: 0,
            eta_lambda,
            optimizer,
            p: 0,
            p_max,
            l_sum_prev: f64::INFINITY,
        }
    }

    /// One ascent step `lambda += eta * grad_lambda L` with `grad_lambda L = cs`.
    pub fn ascend(&mut self, cs: &[f64]) -> Result<()> {
        if cs.len() != self.lambda.len() {
            return Err(Error::Contract(format!(
                "{} constraint values for {} multipliers",
                cs.len(),
                self.lambda.len()
            )));
        }
        self.steps += 1;
        match self.optimizer {
            MultiplierOptimizer::RawAscent => {
                for (l, &c) in self.lambda.iter_mut().zip(cs) {
                    *l += self.eta_lambda * c;
                }
            }
            MultiplierOptimizer::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for i in 0..cs.len() {
                    let c = cs[i];
                    let m = beta1 * self.first_moment[i] + (1.0 - beta1) * c;
                    let v = beta2 * self.second_moment[i] + (1.0 - beta2) * c * c;
                    self.first_moment[i] = m;
                    self.second_moment[i] = v;
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    self.lambda[i] += self.eta_lambda * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    pub fn l1(&self) -> f64 {
        self.lambda.iter().fold(0.0, |acc, x| acc + x.abs())
    }
}

/// Momentum buffers and the weight-learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightOptimizerState {
    pub velocity_w: Vec<Matrix>,
    pub velocity_b: Vec<Vec<f64>>,
    pub eta_w: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_trigger: f64,
    pub decay_factor: f64,
    pub decayed: bool,
}

/// The checkpointable unit of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub network: Network,
    /// One grid per layer; `None` for exempt layers.
    pub grids: Vec<Option<QuantGrid>>,
    /// Multipliers and scheduling state. In modes without a constraint term
    /// the multiplier arrays are left empty.
    pub multipliers: MultiplierState,
    pub optimizer: WeightOptimizerState,
    /// Nominal window variable following the schedule. In no-window mode the
    /// grids carry `g = inf` while this still drives learning-rate decay.
    pub g: f64,
    pub epoch: usize,
    pub config: CbpConfig,
    /// Whether the initial multiplier update has run.
    pub initialized: bool,
    pub mid_epoch: bool,
}

/// The three parts of the Lagrangian for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LagrangianValue {
    pub total: f64,
    pub loss: f64,
    pub constraint: f64,
}

/// One row of per-epoch metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub lagrangian_sum: f64,
    pub cfs: f64,
    pub eval_top1: f64,
    pub eval_top1_full_precision: f64,
    pub g: f64,
    pub lambda_l1: f64,
    pub multiplier_updated: bool,
}

/// Grids for every constrained layer, scaled by the layer's current weights.
pub fn grids_from_weights(net: &Network, g: f64) -> Result<Vec<Option<QuantGrid>>> {
    net.layers()
        .iter()
        .map(|l| {
            if l.quant.exempt {
                Ok(None)
            } else {
                let grid = make_grid(&l.quant.kind, scale_factor(&l.weights)?)?;
                Ok(Some(grid.with_window(g)?))
            }
        })
        .collect()
}

/// Number of weights that carry a constraint.
pub fn constrained_count(net: &Network) -> usize {
    net.layers()
        .iter()
        .filter(|l| !l.quant.exempt)
        .map(|l| l.weights.len())
        .sum()
}

/// `cs_i(w_i)` for every constrained weight, layer-major.
pub fn constraint_values(net: &Network, grids: &[Option<QuantGrid>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(constrained_count(net));
    for (l, g) in net.layers().iter().zip(grids) {
        if let (false, Some(g)) = (l.quant.exempt, g) {
            out.extend(l.weights.as_slice().iter().map(|&w| constraint_cs(w, g)));
        }
    }
    out
}

/// `C + lambda^T cs(W)`. The loss runs through `mode`; the constraint term
/// always uses the real-valued weights.
pub fn lagrangian(
    net: &Network,
    batch: &Matrix,
    labels: &[usize],
    multipliers: Option<&[f64]>,
    grids: &[Option<QuantGrid>],
    mode: ForwardMode<'_>,
) -> Result<LagrangianValue> {
    let (logits, _) = net.forward(batch, mode)?;
    let c = loss(&logits, labels)?;
    let constraint = match multipliers {
        None => 0.0,
        Some(lambda) => {
            let cs = constraint_values(net, grids);
            if cs.len() != lambda.len() {
                return Err(Error::Contract(format!(
                    "{} multipliers for {} constrained weights",
                    lambda.len(),
                    cs.len()
                )));
            }
            lambda.iter().zip(&cs).map(|(l, c)| l * c).sum()
        }
    };
    Ok(LagrangianValue {
        total: c + constraint,
        loss: c,
        constraint,
    })
}

/// Lagrangian and its gradient `dC/dW + lambda * d(cs)/dW` (loss part via the
/// straight-through estimator in quantized mode; biases get the loss
/// gradient only). No momentum or weight decay.
pub fn lagrangian_grad(
    net: &Network,
    batch: &Matrix,
    labels: &[usize],
    multipliers: Option<&[f64]>,
    grids: &[Option<QuantGrid>],
    mode: ForwardMode<'_>,
) -> Result<(LagrangianValue, Gradients)> {
    let (logits, trace) = net.forward(batch, mode)?;
    let c = loss(&logits, labels)?;
    let mut grads = net.backward(&trace, &logits, labels)?;
    let mut constraint = 0.0;
    if let Some(lambda) = multipliers {
        let n = constrained_count(net);
        if lambda.len() != n {
            return Err(Error::Contract(format!(
                "{} multipliers for {n} constrained weights",
                lambda.len()
            )));
        }
        let mut offset = 0;
        for (i, (layer, grid)) in net.layers().iter().zip(grids).enumerate() {
            let (false, Some(grid)) = (layer.quant.exempt, grid) else {
                continue;
            };
            let w = layer.weights.as_slice();
            let lam = &lambda[offset..offset + w.len()];
            let gw = grads.weights[i].as_mut_slice();
            for j in 0..w.len() {
                constraint += lam[j] * constraint_cs(w[j], grid);
                gw[j] += lam[j] * constraint_grad(w[j], grid);
            }
            offset += w.len();
        }
    }
    let value = LagrangianValue {
        total: c + constraint,
        loss: c,
        constraint,
    };
    Ok((value, grads))
}

impl TrainState {
    /// Fresh state around `network` with `lambda = 0`, `p = 0`, `g = 1`.
    pub fn new(network: Network, config: CbpConfig) -> Result<Self> {
        config.validate()?;
        let g = 1.0;
        let window = if config.mode == TrainingMode::CbpNoWindow {
            f64::INFINITY
        } else {
            g
        };
        let mut network = network;
        for l in network.layers_mut() {
            l.quant.scale_policy = config.scale_policy;
        }
        let grids = grids_from_weights(&network, window)?;
        let n_lambda = if config.mode.uses_multipliers() {
            constrained_count(&network)
        } else {
            0
        };
        let multipliers = MultiplierState::new(
            n_lambda,
            config.lr_lambda,
            config.multiplier_optimizer,
            config.p_max,
        );
        let optimizer = WeightOptimizerState {
            velocity_w: network
                .layers()
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            velocity_b: network.layers().iter().map(|l| vec![0.0; l.out_dim()]).collect(),
            eta_w: config.lr_w,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            decay_trigger: config.lr_decay_trigger,
            decay_factor: config.lr_decay_factor,
            decayed: false,
        };
        Ok(Self {
            network,
            grids,
            multipliers,
            optimizer,
            g,
            epoch: 0,
            config,
            initialized: false,
            mid_epoch: false,
        })
    }

    /// Window value the grids actually use.
    pub fn effective_window(&self) -> f64 {
        if self.config.mode == TrainingMode::CbpNoWindow {
            f64::INFINITY
        } else {
            self.g
        }
    }

    fn forward_mode(&self) -> ForwardMode<'_> {
        if self.config.mode.quantized_forward() {
            ForwardMode::Quantized(&self.grids)
        } else {
            ForwardMode::FullPrecision
        }
    }

    /// Multipliers, when the mode has a constraint term.
    pub fn lambda(&self) -> Option<&[f64]> {
        self.config
            .mode
            .uses_multipliers()
            .then_some(self.multipliers.lambda.as_slice())
    }

    pub fn lagrangian(&self, batch: &Matrix, labels: &[usize]) -> Result<LagrangianValue> {
        lagrangian(
            &self.network,
            batch,
            labels,
            self.lambda(),
            &self.grids,
            self.forward_mode(),
        )
    }

    /// Constraint-failure score over the constrained layers.
    pub fn cfs(&self) -> Result<f64> {
        cfs(self
            .network
            .layers()
            .iter()
            .zip(&self.grids)
            .filter_map(|(l, g)| g.as_ref().map(|g| (l.weights.as_slice(), g))))
    }

    /// One mini-batch descent step on the Lagrangian. Returns the Lagrangian
    /// evaluated before the step.
    pub fn weight_step(&mut self, batch: &Matrix, labels: &[usize]) -> Result<LagrangianValue> {
        self.mid_epoch = true;
        let mode = self.config.mode;
        let (logits, trace) = self.network.forward(batch, self.forward_mode())?;
        let c = loss(&logits, labels)?;
        let grads = self.network.backward(&trace, &logits, labels)?;
        drop(trace);

        let lambda = self
            .config
            .mode
            .uses_multipliers()
            .then_some(self.multipliers.lambda.as_slice());
        let mut constraint = 0.0;
        let opt = &mut self.optimizer;
        let grids = &self.grids;
        let mut offset = 0;
        for (i, layer) in self.network.layers_mut().iter_mut().enumerate() {
            let gw = &grads.weights[i];
            let gb = &grads.biases[i];
            if !gw.is_finite() || gb.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: i });
            }
            let grid = if layer.quant.exempt { None } else { grids[i].as_ref() };
            let vel = opt.velocity_w[i].as_mut_slice();
            let w = layer.weights.as_mut_slice();
            match (grid, lambda) {
                (Some(grid), Some(lambda)) => {
                    let lam = &lambda[offset..offset + w.len()];
                    for j in 0..w.len() {
                        constraint += lam[j] * constraint_cs(w[j], grid);
                        let g_loss = gw.as_slice()[j] + opt.weight_decay * w[j];
                        vel[j] = opt.momentum * vel[j] + g_loss;
                        let g_cs = lam[j] * constraint_grad(w[j], grid);
                        if !g_cs.is_finite() {
                            return Err(Error::NonFiniteGradient { layer: i });
                        }
                        w[j] -= opt.eta_w * (vel[j] + g_cs);
                    }
                    offset += w.len();
                }
                _ => {
                    for j in 0..w.len() {
                        let g_loss = gw.as_slice()[j] + opt.weight_decay * w[j];
                        vel[j] = opt.momentum * vel[j] + g_loss;
                        w[j] -= opt.eta_w * vel[j];
                    }
                }
            }
            if let (Some(grid), true) = (grid, mode.quantized_forward()) {
                clip_in_place(&mut layer.weights, grid);
            }
            let vb = &mut opt.velocity_b[i];
            for ((b, v), &g) in layer.bias.iter_mut().zip(vb.iter_mut()).zip(gb) {
                *v = opt.momentum * *v + g;
                *b -= opt.eta_w * *v;
            }
        }
        Ok(LagrangianValue {
            total: c + constraint,
            loss: c,
            constraint,
        })
    }

    /// Marks the end of an epoch's mini-batches.
    pub fn end_epoch(&mut self) {
        self.mid_epoch = false;
    }

    /// Ascent step on the multipliers using `cs` at the current window.
    /// Only valid at an epoch boundary.
    pub fn multiplier_step(&mut self) -> Result<()> {
        if self.mid_epoch {
            return Err(Error::Contract(
                "multipliers may only be updated at an epoch boundary".into(),
            ));
        }
        if !self.config.mode.uses_multipliers() {
            return Ok(());
        }
        let cs = constraint_values(&self.network, &self.grids);
        self.multipliers.ascend(&cs)
    }

    pub fn set_window(&mut self, g: f64) -> Result<()> {
        self.g = g;
        let window = self.effective_window();
        for grid in self.grids.iter_mut().flatten() {
            grid.set_window(window)?;
        }
        Ok(())
    }

    /// Epoch-boundary update of `p`, `g`, and the multipliers. Returns whether
    /// the update fired.
    pub fn epoch_scheduler(&mut self, l_sum: f64) -> Result<bool> {
        if self.mid_epoch {
            return Err(Error::Contract("scheduler called mid-epoch".into()));
        }
        if self.config.mode == TrainingMode::FullPrecision {
            return Ok(false);
        }
        self.multipliers.p += 1;
        let fire = l_sum >= self.multipliers.l_sum_prev || self.multipliers.p >= self.multipliers.p_max;
        if fire {
            let g = self.g + self.config.g_schedule.increment(self.g);
            self.set_window(g)?;
            self.multiplier_step()?;
            if !self.optimizer.decayed && self.g >= self.optimizer.decay_trigger {
                self.optimizer.eta_w *= self.optimizer.decay_factor;
                self.optimizer.decayed = true;
            }
        }
        if fire {
            self.multipliers.p = 0;
        }
        self.multipliers.l_sum_prev = l_sum;
        Ok(fire)
    }
}

/// Quantized-forward and full-precision top-1 accuracy.
pub fn evaluate(state: &TrainState, data: &Dataset) -> Result<(f64, f64)> {
    let q = state
        .network
        .accuracy(&data.features, &data.labels, ForwardMode::Quantized(&state.grids))?;
    let f = state
        .network
        .accuracy(&data.features, &data.labels, ForwardMode::FullPrecision)?;
    Ok((q, f))
}

/// Mini-batch index order for `epoch`; depends only on the seed and the
/// epoch number so a resumed run replays the same batches.
pub fn batch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Runs one epoch of weight steps followed by the epoch-boundary scheduler.
pub fn run_epoch(state: &mut TrainState, train: &Dataset, eval: Option<&Dataset>) -> Result<EpochMetrics> {
    if state.config.scale_policy == ScalePolicy::RecomputeEachEpoch {
        state.grids = grids_from_weights(&state.network, state.effective_window())?;
    }
    let order = batch_order(train.len(), state.config.seed, state.epoch);
    let mut l_sum = 0.0;
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(state.config.batch_size) {
        let x = train.features.select_rows(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
        let l = state.weight_step(&x, &y)?;
        if !l.total.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite Lagrangian in epoch {}",
                state.epoch + 1
            )));
        }
        l_sum += l.total;
        loss_sum += l.loss;
        batches += 1;
    }
    state.end_epoch();
    let updated = state.epoch_scheduler(l_sum)?;
    state.epoch += 1;
    let cfs = if state.grids.iter().any(Option::is_some) {
        state.cfs()?
    } else {
        0.0
    };
    let (eval_top1, eval_top1_full_precision) = match eval {
        Some(d) => evaluate(state, d)?,
        None => (f64::NAN, f64::NAN),
    };
    Ok(EpochMetrics {
        epoch: state.epoch,
        train_loss: loss_sum / batches.max(1) as f64,
        lagrangian_sum: l_sum,
        cfs,
        eval_top1,
        eval_top1_full_precision,
        g: state.g,
        lambda_l1: state.multipliers.l1(),
        multiplier_updated: updated,
    })
}

/// Runs training until `state.epoch` reaches the configured budget, calling
/// `on_epoch` after every epoch.
///
/// On a fresh state the multipliers first receive one ascent step from the
/// starting weights at `g = 1`. If the Lagrangian turns non-finite the run
/// aborts with [`Error::Diverged`] holding the state from the start of the
/// failing epoch.
pub fn run_cbp_with<F>(
    state: &mut TrainState,
    train: &Dataset,
    eval: Option<&Dataset>,
    mut on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&TrainState, &EpochMetrics) -> Result<()>,
{
    if train.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    if state.epoch >= state.config.epochs {
        return Ok(Vec::new());
    }
    if !state.initialized {
        state.multiplier_step()?;
        state.initialized = true;
    }
    let mut rows = Vec::with_capacity(state.config.epochs - state.epoch);
    while state.epoch < state.config.epochs {
        let snapshot = state.clone();
        match run_epoch(state, train, eval) {
            Ok(row) => {
                on_epoch(state, &row)?;
                rows.push(row);
            }
            Err(e @ (Error::Domain(_) | Error::NonFiniteGradient { .. })) => {
                let epoch = snapshot.epoch + 1;
                *state = snapshot.clone();
                return Err(Error::Diverged {
                    epoch,
                    reason: e.to_string(),
                    last_finite: Box::new(snapshot),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

pub fn run_cbp(state: &mut TrainState, train: &Dataset, eval: Option<&Dataset>) -> Result<Vec<EpochMetrics>> {
    run_cbp_with(state, train, eval, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::ConstraintKind;
    use crate::network::{Activation, Layer};
    use crate::quantizer::LayerQuantConfig;

    fn tiny_state(mode: TrainingMode) -> TrainState {
        let net = Network::mlp(&[2, 4, 4, 2], ConstraintKind::Ternary, 3).unwrap();
        TrainState::new(
            net,
            CbpConfig {
                mode,
                ..CbpConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn g_schedule_increments() {
        let s = GSchedule::ThreeTier;
        assert_eq!(9.0 + s.increment(9.0), 10.0);
        assert_eq!(10.0 + s.increment(10.0), 20.0);
        assert_eq!(100.0 + s.increment(100.0), 200.0);
        assert_eq!(90.0 + s.increment(90.0), 100.0);
        let t = GSchedule::TwoTier;
        assert_eq!(100.0 + t.increment(100.0), 110.0);
    }

    #[test]
    fn raw_ascent_by_hand() {
        let mut m = MultiplierState::new(1, 1e-4, MultiplierOptimizer::RawAscent, 20);
        m.ascend(&[0.4]).unwrap();
        assert!((m.lambda[0] - 4e-5).abs() < 1e-18);
        for _ in 0..999 {
            m.ascend(&[0.4]).unwrap();
        }
        assert!((m.lambda[0] - 0.04).abs() < 1e-12);
    }

    #[test]
    fn zero_constraint_leaves_multipliers() {
        let mut m = MultiplierState::new(3, 1e-4, MultiplierOptimizer::default(), 20);
        m.ascend(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.lambda, vec![0.0; 3]);
        assert!(m.ascend(&[0.0]).is_err());
    }

    #[test]
    fn adam_first_step_is_eta() {
        let mut m = MultiplierState::new(2, 1e-3, MultiplierOptimizer::default(), 20);
        m.ascend(&[0.4, 2.0]).unwrap();
        for &l in &m.lambda {
            assert!((l - 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn multiplier_step_rejected_mid_epoch() {
        let mut s = tiny_state(TrainingMode::Cbp);
        let x = Matrix::from_rows(&[vec![0.5, -0.5]]).unwrap();
        s.weight_step(&x, &[1]).unwrap();
        assert!(matches!(s.multiplier_step(), Err(Error::Contract(_))));
        assert!(matches!(s.epoch_scheduler(1.0), Err(Error::Contract(_))));
        s.end_epoch();
        s.multiplier_step().unwrap();
    }

    #[test]
    fn patience_controls_updates() {
        let mut s = tiny_state(TrainingMode::Cbp);
        let p_max = s.config.p_max;
        let mut fired_at = None;
        for k in 0..p_max {
            let fired = s.epoch_scheduler(100.0 - k as f64).unwrap();
            if fired {
                fired_at = Some(k + 1);
                break;
            }
        }
        assert_eq!(fired_at, Some(p_max));
        assert_eq!(s.g, 2.0);
        assert_eq!(s.multipliers.p, 0);
    }

    #[test]
    fn non_decreasing_sum_fires() {
        let mut s = tiny_state(TrainingMode::Cbp);
        assert!(!s.epoch_scheduler(5.0).unwrap());
        assert!(s.epoch_scheduler(5.0).unwrap());
        assert_eq!(s.g, 2.0);
        assert!(!s.epoch_scheduler(4.0).unwrap());
        assert!(s.epoch_scheduler(4.5).unwrap());
        assert_eq!(s.g, 3.0);
    }

    #[test]
    fn lr_decays_once_when_g_reaches_trigger() {
        let mut s = tiny_state(TrainingMode::Cbp);
        let eta = s.optimizer.eta_w;
        s.g = 10.0;
        s.epoch_scheduler(1.0).unwrap();
        s.epoch_scheduler(1.0).unwrap();
        assert_eq!(s.g, 20.0);
        assert!((s.optimizer.eta_w - eta * 0.1).abs() < 1e-18);
        s.epoch_scheduler(1.0).unwrap();
        assert_eq!(s.g, 30.0);
        assert!((s.optimizer.eta_w - eta * 0.1).abs() < 1e-18);
    }

    #[test]
    fn ste_only_allocates_no_multipliers() {
        let s = tiny_state(TrainingMode::SteOnly);
        assert!(s.multipliers.lambda.is_empty());
        assert!(s.lambda().is_none());
        let w = tiny_state(TrainingMode::CbpNoWindow);
        assert!(w.grids.iter().flatten().all(|g| g.g().is_infinite()));
    }

    /// One constrained weight under a constant loss: a single layer whose
    /// input is zero, so dC/dw = 0 and only the constraint moves it.
    #[test]
    fn constraint_gradient_step_by_hand() {
        let layer = Layer {
            weights: Matrix::from_rows(&[vec![0.2], vec![1.0]]).unwrap(),
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
            quant: LayerQuantConfig::constrained(ConstraintKind::Ternary),
        };
        let net = Network::from_layers(vec![layer]).unwrap();
        let mut s = TrainState::new(
            net,
            CbpConfig {
                lr_w: 0.05,
                momentum: 0.0,
                weight_decay: 0.0,
                ..CbpConfig::default()
            },
        )
        .unwrap();
        // a = mean(|0.2|, |1.0|) = 0.6; pin the grid to unit scale instead
        s.grids[0] = Some(make_grid(&ConstraintKind::Ternary, 1.0).unwrap().with_window(f64::INFINITY).unwrap());
        s.multipliers.lambda = vec![1.0, 1.0];
        let x = Matrix::zeros(1, 1);
        s.weight_step(&x, &[0]).unwrap();
        let w = s.network.layers()[0].weights.as_slice();
        assert!((w[0] - 0.1).abs() < 1e-15);
        assert_eq!(w[1], 1.0);
    }
}
