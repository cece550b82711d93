//! Continuous-time counterpart of CBP training.
//!
//! Weights follow `dW/dt = -grad_W L / tau_w`, multipliers follow
//! `dlambda/dt = cs(W) / tau_lambda`, and with a vanishing window the window
//! variable grows as `dg/dt = g0(g) / tau_lambda`. Along such a trajectory
//!
//! ```text
//! dL/dt = -1/tau_w * sum_i (dC/dw_i + lambda_i ucs_i dY_i/dw_i)^2
//!         + 1/tau_lambda * sum_i (ucs_i Y_i)^2
//! ```
//!
//! ignoring the measure-zero instants when a weight sits exactly on a window
//! edge. This module integrates the system, reports the two terms, tracks
//! populations near grid values, and estimates FLOPs.

use std::io::Write;
use std::path::Path;

use crate::cbp::GSchedule;
use crate::constraint::{partial_sum_y, partial_sum_y_grad, window_ucs, QuantGrid};
use crate::error::{Error, Result};
use crate::ndcore::{dot, Matrix};

/// Built-in differentiable losses over an `n`-dimensional weight vector.
#[derive(Clone, Debug, PartialEq)]
pub enum KineticsLoss {
    /// `(w - center)^T A (w - center) / 2` with symmetric `A`.
    Quadratic { center: Vec<f64>, hessian: Matrix },
    /// Mean logistic loss `log(1 + exp(-y_k x_k . w))` with `y_k` in `{-1, 1}`.
    Logistic { features: Matrix, targets: Vec<f64> },
}

impl KineticsLoss {
    /// Isotropic quadratic `|w - center|^2 / 2`.
    pub fn quadratic(center: Vec<f64>) -> Self {
        let n = center.len();
        let mut h = Matrix::zeros(n, n);
        for i in 0..n {
            h.set(i, i, 1.0);
        }
        KineticsLoss::Quadratic { center, hessian: h }
    }

    /// Four points in two dimensions, linearly separable through the origin.
    pub fn tiny_logistic() -> Self {
        let features = Matrix::from_rows(&[
            vec![1.0, 0.2],
            vec![0.6, -0.4],
            vec![-0.8, 0.1],
            vec![-0.3, -0.9],
        ])
        .expect("fixed data");
        KineticsLoss::Logistic {
            features,
            targets: vec![1.0, 1.0, -1.0, -1.0],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            KineticsLoss::Quadratic { center, .. } => center.len(),
            KineticsLoss::Logistic { features, .. } => features.cols(),
        }
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        match self {
            KineticsLoss::Quadratic { center, hessian } => {
                let d: Vec<f64> = w.iter().zip(center).map(|(a, b)| a - b).collect();
                let mut s = 0.0;
                for i in 0..d.len() {
                    s += d[i] * dot(hessian.row(i), &d);
                }
                0.5 * s
            }
            KineticsLoss::Logistic { features, targets } => {
                let n = targets.len() as f64;
                targets
                    .iter()
                    .enumerate()
                    .map(|(k, &y)| softplus(-y * dot(features.row(k), w)))
                    .sum::<f64>()
                    / n
            }
        }
    }

    pub fn grad(&self, w: &[f64], out: &mut [f64]) {
        match self {
            KineticsLoss::Quadratic { center, hessian } => {
                let d: Vec<f64> = w.iter().zip(center).map(|(a, b)| a - b).collect();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = dot(hessian.row(i), &d);
                }
            }
            KineticsLoss::Logistic { features, targets } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let n = targets.len() as f64;
                for (k, &y) in targets.iter().enumerate() {
                    let x = features.row(k);
                    let z = -y * dot(x, w);
                    let s = sigmoid(z);
                    for (o, &xi) in out.iter_mut().zip(x) {
                        *o += -y * xi * s / n;
                    }
                }
            }
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    /// `ucs = 1` everywhere.
    None,
    /// Window shrinks continuously as `g` grows.
    Vanishing,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

impl std::str::FromStr for Integrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Integrator::Euler),
            "rk4" => Ok(Integrator::Rk4),
            other => Err(Error::Domain(format!("unknown integrator {other:?}"))),
        }
    }
}

/// A low-dimensional loss plus constraint, simulated in continuous time.
#[derive(Clone, Debug, PartialEq)]
pub struct KineticsSystem {
    pub loss: KineticsLoss,
    pub grid: QuantGrid,
    pub tau_w: f64,
    pub tau_lambda: f64,
    /// Sawtooth slope; 2 reproduces the training constraint exactly.
    pub slope: f64,
    pub window_mode: WindowMode,
    /// Rate schedule for `g`; the continuous model uses two tiers.
    pub g_schedule: GSchedule,
}

/// Simulation state.
#[derive(Clone, Debug, PartialEq)]
pub struct KineticsState {
    pub w: Vec<f64>,
    pub lambda: Vec<f64>,
    pub g: f64,
}

/// `dL/dt` and its parts at one state.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LyapunovTerms {
    pub dl_dt: f64,
    /// `-1/tau_w * |grad_W L|^2`
    pub descent: f64,
    /// `1/tau_lambda * |cs|^2`
    pub ascent: f64,
    /// Descent contributed by weights inside a window: `-1/tau_w * sum (dC/dw)^2`.
    pub in_window: f64,
    /// Net contribution of the weights outside every window.
    pub out_of_window: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LyapunovResidual {
    pub t: f64,
    pub reported: f64,
    pub finite_difference: f64,
}

impl LyapunovResidual {
    /// `|reported - fd| / max(|reported|, |fd|, floor)`
    pub fn relative_error(&self, floor: f64) -> f64 {
        let d = (self.reported - self.finite_difference).abs();
        d / self.reported.abs().max(self.finite_difference.abs()).max(floor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub w: Vec<f64>,
    pub lambda: Vec<f64>,
    pub g: f64,
    pub lagrangian: f64,
    pub terms: LyapunovTerms,
    pub cs: Vec<f64>,
    /// Max-norm of `dW/dt`.
    pub w_speed: f64,
    /// Max-norm of `dlambda/dt`.
    pub lambda_speed: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    /// Times a weight landed exactly on a window edge, where the ignored
    /// `dL/dg` term would be nonzero.
    pub boundary_hits: usize,
}

impl KineticsSystem {
    pub fn new(loss: KineticsLoss, grid: QuantGrid, tau_w: f64, tau_lambda: f64) -> Result<Self> {
        let sys = Self {
            loss,
            grid,
            tau_w,
            tau_lambda,
            slope: 2.0,
            window_mode: WindowMode::None,
            g_schedule: GSchedule::TwoTier,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn with_window(mut self, mode: WindowMode) -> Self {
        self.window_mode = mode;
        self
    }

    pub fn with_slope(mut self, s: f64) -> Result<Self> {
        self.slope = s;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_w", self.tau_w), ("tau_lambda", self.tau_lambda), ("slope", self.slope)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn grid_at(&self, g: f64) -> QuantGrid {
        let window = match self.window_mode {
            WindowMode::None => f64::INFINITY,
            WindowMode::Vanishing => g.max(1.0),
        };
        self.grid.clone().with_window(window).expect("g >= 1")
    }

    /// Per-weight `(ucs, Y, dY/dw)` scaled to the configured slope.
    fn constraint_parts(&self, w: &[f64], g: f64) -> Vec<(f64, f64, f64)> {
        let grid = self.grid_at(g);
        let k = self.slope / 2.0;
        w.iter()
            .map(|&x| (window_ucs(x, &grid), k * partial_sum_y(x, &grid), k * partial_sum_y_grad(x, &grid)))
            .collect()
    }

    pub fn lagrangian(&self, s: &KineticsState) -> f64 {
        let parts = self.constraint_parts(&s.w, s.g);
        self.loss.value(&s.w)
            + s.lambda
                .iter()
                .zip(&parts)
                .map(|(l, (u, y, _))| l * u * y)
                .sum::<f64>()
    }

    /// Time derivatives `(dW/dt, dlambda/dt, dg/dt)`.
    pub fn derivatives(&self, s: &KineticsState) -> (Vec<f64>, Vec<f64>, f64) {
        let n = s.w.len();
        let mut dc = vec![0.0; n];
        self.loss.grad(&s.w, &mut dc);
        let parts = self.constraint_parts(&s.w, s.g);
        let dw = (0..n)
            .map(|i| {
                let (u, _, dy) = parts[i];
                -(dc[i] + s.lambda[i] * u * dy) / self.tau_w
            })
            .collect();
        let dl = parts.iter().map(|(u, y, _)| u * y / self.tau_lambda).collect();
        let dg = match self.window_mode {
            WindowMode::None => 0.0,
            WindowMode::Vanishing => self.g_schedule.increment(s.g) / self.tau_lambda,
        };
        (dw, dl, dg)
    }

    fn step(&self, s: &KineticsState, dt: f64, method: Integrator) -> KineticsState {
        let axpy = |s: &KineticsState, k: &(Vec<f64>, Vec<f64>, f64), h: f64| KineticsState {
            w: s.w.iter().zip(&k.0).map(|(a, b)| a + h * b).collect(),
            lambda: s.lambda.iter().zip(&k.1).map(|(a, b)| a + h * b).collect(),
            g: s.g + h * k.2,
        };
        match method {
            Integrator::Euler => axpy(s, &self.derivatives(s), dt),
            Integrator::Rk4 => {
                let k1 = self.derivatives(s);
                let k2 = self.derivatives(&axpy(s, &k1, dt / 2.0));
                let k3 = self.derivatives(&axpy(s, &k2, dt / 2.0));
                let k4 = self.derivatives(&axpy(s, &k3, dt));
                let comb = |a: &[f64], b: &[f64], c: &[f64], d: &[f64]| -> Vec<f64> {
                    (0..a.len())
                        .map(|i| (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i]) / 6.0)
                        .collect()
                };
                let k = (
                    comb(&k1.0, &k2.0, &k3.0, &k4.0),
                    comb(&k1.1, &k2.1, &k3.1, &k4.1),
                    (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2) / 6.0,
                );
                axpy(s, &k, dt)
            }
        }
    }

    fn sample(&self, t: f64, s: &KineticsState) -> Sample {
        let terms = self.lyapunov_decomposition(s);
        let (dw, dl, _) = self.derivatives(s);
        let parts = self.constraint_parts(&s.w, s.g);
        Sample {
            t,
            w: s.w.clone(),
            lambda: s.lambda.clone(),
            g: s.g,
            lagrangian: self.lagrangian(s),
            terms,
            cs: parts.iter().map(|(u, y, _)| u * y).collect(),
            w_speed: dw.iter().fold(0.0, |m, x| f64::max(m, x.abs())),
            lambda_speed: dl.iter().fold(0.0, |m, x| f64::max(m, x.abs())),
        }
    }

    fn count_boundary_hits(&self, s: &KineticsState) -> usize {
        if self.window_mode == WindowMode::None {
            return 0;
        }
        let grid = self.grid_at(s.g);
        s.w.iter()
            .filter(|&&x| {
                (0..grid.medians().len()).any(|i| {
                    let (lo, hi) = grid.window_bounds(i);
                    x == lo || x == hi
                })
            })
            .count()
    }

    /// `dL/dt` split into descent and ascent terms, and into in-window and
    /// out-of-window contributions.
    pub fn lyapunov_decomposition(&self, s: &KineticsState) -> LyapunovTerms {
        let n = s.w.len();
        let mut dc = vec![0.0; n];
        self.loss.grad(&s.w, &mut dc);
        let parts = self.constraint_parts(&s.w, s.g);
        let mut t = LyapunovTerms::default();
        for i in 0..n {
            let (u, y, dy) = parts[i];
            let gw = dc[i] + s.lambda[i] * u * dy;
            let desc = -gw * gw / self.tau_w;
            let asc = (u * y) * (u * y) / self.tau_lambda;
            t.descent += desc;
            t.ascent += asc;
            if u == 0.0 {
                t.in_window += -dc[i] * dc[i] / self.tau_w;
            } else {
                let gy = dc[i] + s.lambda[i] * dy;
                t.out_of_window += -(gy * gy / self.tau_w - y * y / self.tau_lambda);
            }
        }
        t.dl_dt = t.descent + t.ascent;
        t
    }

    /// Compares the reported `dL/dt` with five-point central differences of
    /// the recorded `L(t)` (uniformly spaced samples assumed). Samples whose
    /// stencil leaves one smooth piece of the constraint are skipped: every
    /// weight must keep its window status and sawtooth slope and stay clear
    /// of kinks by the distance it could travel across the stencil.
    pub fn lyapunov_residuals(&self, traj: &Trajectory) -> Vec<LyapunovResidual> {
        let regime = |s: &Sample| -> Vec<(f64, f64)> {
            self.constraint_parts(&s.w, s.g)
                .into_iter()
                .map(|(u, _, dy)| (u, dy))
                .collect()
        };
        let smp = &traj.samples;
        let mut out = Vec::new();
        for k in 2..smp.len().saturating_sub(2) {
            let b = &smp[k];
            let rb = regime(b);
            if smp[k - 2..=k + 2].iter().any(|s| regime(s) != rb) {
                continue;
            }
            // Intermediate integrator stages can cross a kink even when the
            // recorded samples do not (a weight chattering on a grid value).
            let span = (smp[k + 2].t - smp[k - 2].t).abs();
            let (dw, _, _) = self.derivatives(&KineticsState {
                w: b.w.clone(),
                lambda: b.lambda.clone(),
                g: b.g,
            });
            let grid = self.grid_at(b.g);
            let near_kink = b
                .w
                .iter()
                .zip(&dw)
                .any(|(&x, &v)| kink_distance(x, &grid) <= span * v.abs());
            if near_kink {
                continue;
            }
            let h = (smp[k + 1].t - smp[k - 1].t) / 2.0;
            let fd = (-smp[k + 2].lagrangian + 8.0 * smp[k + 1].lagrangian - 8.0 * smp[k - 1].lagrangian
                + smp[k - 2].lagrangian)
                / (12.0 * h);
            out.push(LyapunovResidual {
                t: b.t,
                reported: b.terms.dl_dt,
                finite_difference: fd,
            });
        }
        out
    }

    fn check_inputs(&self, w0: &[f64], lambda0: &[f64], dt: f64) -> Result<()> {
        if w0.len() != self.loss.dim() || lambda0.len() != w0.len() {
            return Err(Error::Shape(format!(
                "loss takes {} weights; got {} weights and {} multipliers",
                self.loss.dim(),
                w0.len(),
                lambda0.len()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        Ok(())
    }

    fn run<F>(
        &self,
        w0: &[f64],
        lambda0: &[f64],
        dt: f64,
        t_max: f64,
        method: Integrator,
        mut stop: F,
    ) -> Result<Trajectory>
    where
        F: FnMut(&Sample) -> bool,
    {
        self.check_inputs(w0, lambda0, dt)?;
        if !(t_max > 0.0) {
            return Err(Error::Domain(format!("t_end must be positive, got {t_max}")));
        }
        let mut s = KineticsState {
            w: w0.to_vec(),
            lambda: lambda0.to_vec(),
            g: 1.0,
        };
        let mut traj = Trajectory::default();
        let steps = (t_max / dt).round() as usize;
        let first = self.sample(0.0, &s);
        let done = stop(&first);
        traj.samples.push(first);
        if done {
            return Ok(traj);
        }
        for k in 1..=steps {
            s = self.step(&s, dt, method);
            let t = k as f64 * dt;
            if s.w.iter().chain(&s.lambda).any(|x| !x.is_finite()) || !s.g.is_finite() {
                return Err(Error::NonFiniteState {
                    t,
                    partial: Box::new(traj),
                });
            }
            traj.boundary_hits += self.count_boundary_hits(&s);
            let sample = self.sample(t, &s);
            let done = stop(&sample);
            traj.samples.push(sample);
            if done {
                break;
            }
        }
        Ok(traj)
    }

    /// Integrates from `(w0, lambda0, g = 1)` to `t_end` with step `dt`,
    /// recording every step.
    pub fn integrate(
        &self,
        w0: &[f64],
        lambda0: &[f64],
        t_end: f64,
        dt: f64,
        method: Integrator,
    ) -> Result<Trajectory> {
        self.run(w0, lambda0, dt, t_end, method, |_| false)
    }

    /// Integrates until both `max |dW/dt|` and `max |dlambda/dt|` fall below
    /// `tol`, or `t_max` is reached.
    pub fn integrate_until_still(
        &self,
        w0: &[f64],
        lambda0: &[f64],
        tol: f64,
        dt: f64,
        t_max: f64,
        method: Integrator,
    ) -> Result<Trajectory> {
        self.run(w0, lambda0, dt, t_max, method, |s| s.w_speed < tol && s.lambda_speed < tol)
    }
}

/// Distance from `w` to the nearest point where the constraint or its slope
/// jumps: grid values, medians, and window edges.
fn kink_distance(w: f64, grid: &QuantGrid) -> f64 {
    let mut d = f64::INFINITY;
    for &q in grid.levels().iter().chain(grid.medians()) {
        d = d.min((w - q).abs());
    }
    for i in 0..grid.medians().len() {
        let (lo, hi) = grid.window_bounds(i);
        if lo < hi {
            d = d.min((w - lo).abs()).min((w - hi).abs());
        }
    }
    d
}

impl Trajectory {
    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }

    /// Trapezoidal integral of each recorded `cs_i(t)`.
    pub fn integrated_cs(&self) -> Vec<f64> {
        let n = self.samples.first().map_or(0, |s| s.cs.len());
        let mut acc = vec![0.0; n];
        for pair in self.samples.windows(2) {
            let h = pair[1].t - pair[0].t;
            for i in 0..n {
                acc[i] += 0.5 * h * (pair[0].cs[i] + pair[1].cs[i]);
            }
        }
        acc
    }

    /// Writes `t, w_0.., lambda_0.., g, L, descent_term, ascent_term`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let n = self.samples.first().map_or(0, |s| s.w.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("w_{i}")));
        header.extend((0..n).map(|i| format!("lambda_{i}")));
        header.extend(["g", "L", "descent_term", "ascent_term"].map(String::from));
        let io = |e| Error::io(path, e);
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for s in &self.samples {
            let mut row = vec![s.t.to_string()];
            row.extend(s.w.iter().map(|x| x.to_string()));
            row.extend(s.lambda.iter().map(|x| x.to_string()));
            row.push(s.g.to_string());
            row.push(s.lagrangian.to_string());
            row.push(s.terms.descent.to_string());
            row.push(s.terms.ascent.to_string());
            writeln!(out, "{}", row.join(",")).map_err(io)?;
        }
        out.flush().map_err(io)?;
        Ok(())
    }

    /// Weight snapshots with an event flag wherever `g` crossed an integer
    /// step of the schedule, for [`population_track`].
    pub fn snapshots(&self) -> Vec<Snapshot> {
        let mut prev_floor = None;
        self.samples
            .iter()
            .map(|s| {
                let fl = s.g.floor();
                let event = prev_floor.is_some_and(|p: f64| fl > p);
                prev_floor = Some(fl);
                Snapshot {
                    time: s.t,
                    weights: s.w.clone(),
                    g_update: event,
                }
            })
            .collect()
    }
}

/// Weights at one time (or epoch), flagged when `g` was just updated.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub weights: Vec<f64>,
    pub g_update: bool,
}

/// Fraction of weights within `delta` of each grid value over time.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationSeries {
    pub times: Vec<f64>,
    /// `fractions[k][j]`: share of weights near level `j` at time `k`.
    pub fractions: Vec<Vec<f64>>,
    /// Indices into `times` where `g` was updated.
    pub events: Vec<usize>,
}

impl PopulationSeries {
    /// Share of weights near any grid value at each time.
    pub fn tracked(&self) -> Vec<f64> {
        self.fractions.iter().map(|f| f.iter().sum()).collect()
    }
}

pub fn population_track(snapshots: &[Snapshot], grid: &QuantGrid, delta: f64) -> Result<PopulationSeries> {
    if !(delta > 0.0) || delta >= grid.min_gap() / 2.0 {
        return Err(Error::Domain(format!(
            "delta must lie in (0, {}), got {delta}",
            grid.min_gap() / 2.0
        )));
    }
    let levels = grid.levels();
    let mut series = PopulationSeries {
        times: Vec::with_capacity(snapshots.len()),
        fractions: Vec::with_capacity(snapshots.len()),
        events: Vec::new(),
    };
    for (k, snap) in snapshots.iter().enumerate() {
        let n = snap.weights.len().max(1) as f64;
        let mut counts = vec![0usize; levels.len()];
        for &w in &snap.weights {
            if let Some(j) = levels.iter().position(|&q| (w - q).abs() <= delta) {
                counts[j] += 1;
            }
        }
        series.times.push(snap.time);
        series.fractions.push(counts.iter().map(|&c| c as f64 / n).collect());
        if snap.g_update {
            series.events.push(k);
        }
    }
    Ok(series)
}

/// Backprop cost model: forward plus a backward pass of equal cost.
pub fn backprop_flops(forward_flops: f64) -> f64 {
    2.0 * forward_flops
}

/// CBP cost per iteration: `2 * forward + 2 (p + 3) n_w`, where `p` is the
/// fraction of epochs with a multiplier update.
pub fn flop_estimate(n_w: f64, forward_flops: f64, p: f64) -> Result<f64> {
    if n_w < 0.0 || forward_flops < 0.0 || !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "flop_estimate needs nonnegative counts and p in [0, 1]; got n_w={n_w}, forward={forward_flops}, p={p}"
        )));
    }
    Ok(2.0 * forward_flops + 2.0 * (p + 3.0) * n_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::{make_grid, ConstraintKind};

    fn ternary() -> QuantGrid {
        make_grid(&ConstraintKind::Ternary, 1.0).unwrap()
    }

    #[test]
    fn flops() {
        assert_eq!(flop_estimate(0.0, 5.0, 0.2).unwrap(), 10.0);
        assert!((flop_estimate(10.0, 7.0, 0.2).unwrap() - (14.0 + 64.0)).abs() < 1e-12);
        assert!(flop_estimate(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn stationary_at_grid_minimum() {
        let sys = KineticsSystem::new(KineticsLoss::quadratic(vec![0.0, 1.0]), ternary(), 1.0, 10.0).unwrap();
        let traj = sys
            .integrate(&[0.0, 1.0], &[0.0, 0.0], 5.0, 0.01, Integrator::Euler)
            .unwrap();
        for s in &traj.samples {
            assert_eq!(s.w, vec![0.0, 1.0]);
            assert_eq!(s.lambda, vec![0.0, 0.0]);
            assert_eq!(s.terms, LyapunovTerms::default());
        }
    }

    #[test]
    fn in_window_weights_only_descend() {
        // w = 0.5 sits on the median, inside the g = 2 window
        let sys = KineticsSystem::new(KineticsLoss::quadratic(vec![0.3, 0.3]), ternary(), 2.0, 5.0)
            .unwrap()
            .with_window(WindowMode::Vanishing);
        let s = KineticsState {
            w: vec![0.5, 0.1],
            lambda: vec![0.7, 0.4],
            g: 2.0,
        };
        let t = sys.lyapunov_decomposition(&s);
        let (dc0, dc1) = (0.5 - 0.3, 0.1 - 0.3);
        assert!((t.in_window - (-dc0 * dc0 / 2.0)).abs() < 1e-15);
        let y1 = 0.2;
        let expected_out = -((dc1 + 0.4 * 2.0f64).powi(2) / 2.0 - y1 * y1 / 5.0);
        assert!((t.out_of_window - expected_out).abs() < 1e-15);
        assert!((t.in_window + t.out_of_window - t.dl_dt).abs() < 1e-15);
    }

    #[test]
    fn lambda_integrates_cs() {
        let sys = KineticsSystem::new(KineticsLoss::quadratic(vec![0.3]), ternary(), 1.0, 50.0).unwrap();
        let traj = sys.integrate(&[0.3], &[0.0], 20.0, 1e-3, Integrator::Rk4).unwrap();
        let last = traj.last().unwrap();
        let want = traj.integrated_cs()[0] / 50.0;
        assert!((last.lambda[0] - want).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(KineticsSystem::new(KineticsLoss::quadratic(vec![0.0]), ternary(), 0.0, 1.0).is_err());
        let sys = KineticsSystem::new(KineticsLoss::quadratic(vec![0.0]), ternary(), 1.0, 1.0).unwrap();
        assert!(sys.integrate(&[0.0, 1.0], &[0.0], 1.0, 0.1, Integrator::Euler).is_err());
        assert!(sys.integrate(&[0.0], &[0.0], 1.0, 0.0, Integrator::Euler).is_err());
    }

    #[test]
    fn diverging_state_aborts_with_partial_trajectory() {
        let loss = KineticsLoss::Quadratic {
            center: vec![0.0],
            hessian: Matrix::filled(1, 1, -10.0),
        };
        let sys = KineticsSystem::new(loss, ternary(), 1.0, 1.0).unwrap();
        match sys.integrate(&[5.0], &[0.0], 1e5, 1.0, Integrator::Euler) {
            Err(Error::NonFiniteState { partial, .. }) => assert!(!partial.samples.is_empty()),
            Err(e) => panic!("unexpected error {e}"),
            Ok(t) => panic!("finished with {} samples", t.samples.len()),
        }
    }

    #[test]
    fn population_fractions() {
        let grid = ternary();
        let snaps = vec![
            Snapshot { time: 0.0, weights: vec![-1.0, 0.0, 1.0, 0.0], g_update: false },
            Snapshot { time: 1.0, weights: vec![-0.5, 0.01, 0.3, 0.99], g_update: true },
        ];
        let p = population_track(&snaps, &grid, 0.02).unwrap();
        assert_eq!(p.fractions[0], vec![0.25, 0.5, 0.25]);
        assert_eq!(p.tracked(), vec![1.0, 0.5]);
        assert_eq!(p.events, vec![1]);
        assert!(population_track(&snaps, &grid, 0.6).is_err());
    }

    #[test]
    fn logistic_gradient_matches_differences() {
        let l = KineticsLoss::tiny_logistic();
        let w = [0.3, -0.7];
        let mut g = [0.0; 2];
        l.grad(&w, &mut g);
        for i in 0..2 {
            let h = 1e-6;
            let mut a = w;
            let mut b = w;
            a[i] += h;
            b[i] -= h;
            let fd = (l.value(&a) - l.value(&b)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
