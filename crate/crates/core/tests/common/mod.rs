//! Independent scalar oracles and shared fixtures for the integration tests.
#![allow(dead_code)]

use constrained_backprop::cbp::{run_cbp_with, EpochMetrics, TrainState};
use constrained_backprop::constraint::QuantGrid;
use constrained_backprop::harness::config::ExperimentConfig;
use constrained_backprop::harness::dataset::{load_dataset, Dataset};
use constrained_backprop::harness::experiment::pretrain_state;
use constrained_backprop::network::{Activation, Network};
use constrained_backprop::TrainingMode;

/// Sawtooth from its definition: distance-to-edge form outside the grid,
/// tent over each interval inside.
pub fn oracle_y(w: f64, q: &[f64]) -> f64 {
    let n = q.len();
    if w < q[0] {
        return 2.0 * (q[0] - w);
    }
    if w >= q[n - 1] {
        return 2.0 * (w - q[n - 1]);
    }
    for i in 0..n - 1 {
        if q[i] <= w && w < q[i + 1] {
            let m = 0.5 * (q[i] + q[i + 1]);
            return (q[i + 1] - q[i]) - 2.0 * (w - m).abs();
        }
    }
    unreachable!("w inside [q_1, q_n) belongs to some interval")
}

/// Window indicator by scanning every interval.
pub fn oracle_ucs(w: f64, q: &[f64], g: f64) -> f64 {
    for i in 0..q.len() - 1 {
        if !(q[i] <= w && w < q[i + 1]) {
            continue;
        }
        if g.is_infinite() {
            return 1.0;
        }
        if g == 1.0 {
            return 0.0;
        }
        let half = (q[i + 1] - q[i]) / (2.0 * g);
        let m = 0.5 * (q[i] + q[i + 1]);
        return if m - half <= w && w < m + half { 0.0 } else { 1.0 };
    }
    1.0
}

pub fn oracle_cs(w: f64, q: &[f64], g: f64) -> f64 {
    oracle_ucs(w, q, g) * oracle_y(w, q)
}

/// Nearest grid value: the largest `q_j` whose lower midpoint
/// `(q_{j-1} + q_j) / 2` does not exceed `w` (a weight exactly on a midpoint
/// goes up).
pub fn oracle_ste(w: f64, q: &[f64]) -> f64 {
    let mut out = q[0];
    for j in 1..q.len() {
        if w >= 0.5 * (q[j - 1] + q[j]) {
            out = out.max(q[j]);
        }
    }
    out
}

pub fn oracle_cfs(ws: &[f64], q: &[f64]) -> f64 {
    ws.iter().map(|&w| oracle_y(w, q)).sum::<f64>() / ws.len() as f64
}

/// Distance from `w` to the nearest grid value, median, or window edge.
pub fn kink_distance(w: f64, grid: &QuantGrid) -> f64 {
    let q = grid.levels();
    let mut d = f64::INFINITY;
    for i in 0..q.len() {
        d = d.min((w - q[i]).abs());
    }
    for i in 0..q.len() - 1 {
        let m = 0.5 * (q[i] + q[i + 1]);
        d = d.min((w - m).abs());
        let g = grid.g();
        if g.is_finite() {
            let h = (q[i + 1] - q[i]) / (2.0 * g);
            d = d.min((w - (m - h)).abs()).min((w - (m + h)).abs());
        }
    }
    d
}

/// Logits by explicit loops over the given per-layer weights.
pub fn oracle_logits(net: &Network, weights: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let mut a = row.clone();
            for (l, w) in net.layers().iter().zip(weights) {
                let (out, inp) = (l.out_dim(), l.in_dim());
                let mut z = vec![0.0; out];
                for o in 0..out {
                    let mut s = l.bias[o];
                    for i in 0..inp {
                        s += w[o * inp + i] * a[i];
                    }
                    z[o] = match l.activation {
                        Activation::Relu => s.max(0.0),
                        Activation::Identity => s,
                    };
                }
                a = z;
            }
            a
        })
        .collect()
}

/// Mean cross-entropy through log-sum-exp.
pub fn oracle_loss(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    total / labels.len() as f64
}

pub fn toy_config(seed: u64, mode: TrainingMode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.mode = mode;
    cfg
}

pub fn toy_data(cfg: &ExperimentConfig) -> (Dataset, Dataset) {
    load_dataset(&cfg.data_spec().unwrap()).unwrap()
}

/// Outcome of pre-training plus one post-training run on the toy problem.
pub struct ToyRun {
    pub pretrained_accuracy: f64,
    pub metrics: Vec<EpochMetrics>,
    /// Constrained weights after every epoch, with the epoch-0 state first.
    pub snapshots: Vec<Vec<Vec<f64>>>,
    pub state: TrainState,
}

pub fn toy_run(seed: u64, mode: TrainingMode) -> ToyRun {
    let cfg = toy_config(seed, mode);
    let (train, eval) = toy_data(&cfg);
    let pre = pretrain_state(&cfg, &train).unwrap();
    let pretrained_accuracy = pre
        .network
        .accuracy(&eval.features, &eval.labels, constrained_backprop::ForwardMode::FullPrecision)
        .unwrap();
    let mut state = TrainState::new(pre.network, cfg.cbp_config()).unwrap();
    let constrained = |s: &TrainState| -> Vec<Vec<f64>> {
        s.network
            .layers()
            .iter()
            .filter(|l| !l.quant.exempt)
            .map(|l| l.weights.as_slice().to_vec())
            .collect()
    };
    let mut snapshots = vec![constrained(&state)];
    let metrics = run_cbp_with(&mut state, &train, Some(&eval), |s, _| {
        snapshots.push(constrained(s));
        Ok(())
    })
    .unwrap();
    ToyRun {
        pretrained_accuracy,
        metrics,
        snapshots,
        state,
    }
}
