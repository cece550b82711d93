//! Experiment drivers: pre-training, post-training in any ablation mode, and
//! the artifacts written to disk.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::cbp::{
    evaluate, grids_from_weights, run_cbp, run_cbp_with, EpochMetrics, TrainState, TrainingMode,
};
use crate::constraint::QuantGrid;
use crate::error::{Error, Result};
use crate::harness::checkpoint::{self, Checkpoint};
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::{load_dataset, Dataset};
use crate::network::Network;

/// Number of histogram bins per layer.
pub const HISTOGRAM_BINS: usize = 201;

pub const METRICS_FILE: &str = "metrics.csv";
pub const HISTOGRAM_FILE: &str = "histograms.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const PRETRAIN_FILE: &str = "pretrain.ckpt";
pub const DIVERGED_FILE: &str = "diverged.ckpt";

/// Final numbers of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mode: String,
    pub epochs: usize,
    pub final_eval_top1: f64,
    pub final_eval_top1_full_precision: f64,
    pub final_cfs: f64,
    pub final_g: f64,
    pub final_lambda_l1: f64,
    pub wall_time_s: f64,
}

/// Paths written by [`run_experiment`] and the in-memory results.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub metrics: PathBuf,
    pub histograms: PathBuf,
    pub summary_path: PathBuf,
    pub checkpoint: PathBuf,
    pub rows: Vec<EpochMetrics>,
    pub summary: Summary,
    pub state: TrainState,
}

fn check_dims(config: &ExperimentConfig, train: &Dataset) -> Result<()> {
    config.validate()?;
    if config.layers[0] != train.dim() {
        return Err(Error::Shape(format!(
            "layers start with {} inputs but the data has {} features",
            config.layers[0],
            train.dim()
        )));
    }
    let classes = *config.layers.last().expect("validated");
    if classes < train.n_classes {
        return Err(Error::Shape(format!(
            "output width {classes} is smaller than the {} classes in the data",
            train.n_classes
        )));
    }
    Ok(())
}

/// Full-precision momentum-SGD training from a seeded initialization. The
/// returned state has no multipliers and `g = 1`.
pub fn pretrain_state(config: &ExperimentConfig, train: &Dataset) -> Result<TrainState> {
    check_dims(config, train)?;
    let net = Network::mlp(&config.layers, config.constraint.clone(), config.seed)?;
    let mut state = TrainState::new(net, config.pretrain_config())?;
    run_cbp(&mut state, train, None)?;
    state.grids = grids_from_weights(&state.network, 1.0)?;
    Ok(state)
}

pub fn pretrain(config: &ExperimentConfig, train: &Dataset) -> Result<Network> {
    Ok(pretrain_state(config, train)?.network)
}

/// Bin edges shared by all histograms of `grid`.
pub fn histogram_range(grid: &QuantGrid) -> (f64, f64) {
    let pad = 0.1 * grid.span();
    (grid.min() - pad, grid.max() + pad)
}

/// Counts of `weights` in [`HISTOGRAM_BINS`] uniform bins over the padded
/// grid range; values outside the range land in the end bins.
pub fn histogram(weights: &[f64], grid: &QuantGrid) -> Vec<u64> {
    let (lo, hi) = histogram_range(grid);
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &w in weights {
        let b = ((w - lo) / width).floor();
        let b = if b < 0.0 { 0 } else { (b as usize).min(HISTOGRAM_BINS - 1) };
        counts[b] += 1;
    }
    counts
}

/// Starting state for post-training: resumes a CBP checkpoint, starts CBP
/// from a pre-training checkpoint, or pre-trains first.
pub fn initial_state(config: &ExperimentConfig, train: &Dataset) -> Result<TrainState> {
    check_dims(config, train)?;
    let cbp = config.cbp_config();
    let Some(path) = &config.checkpoint else {
        let net = if config.from_scratch || config.mode == TrainingMode::FullPrecision {
            Network::mlp(&config.layers, config.constraint.clone(), config.seed)?
        } else {
            pretrain(config, train)?
        };
        return TrainState::new(net, cbp);
    };
    let ck = checkpoint::load(path)?;
    let mut state = ck.state;
    if state.network.input_dim() != train.dim() {
        return Err(Error::Shape(format!(
            "{} expects {} features, data has {}",
            path.display(),
            state.network.input_dim(),
            train.dim()
        )));
    }
    if state.config.mode == TrainingMode::FullPrecision && config.mode != TrainingMode::FullPrecision {
        let mut net = state.network;
        net.set_constraint_kind(&config.constraint);
        return TrainState::new(net, cbp);
    }
    if state.config.mode != config.mode {
        return Err(Error::Usage(format!(
            "checkpoint was trained in mode {} but mode = {}",
            state.config.mode.name(),
            config.mode.name()
        )));
    }
    state.config.epochs = config.epochs;
    Ok(state)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

struct Recorder {
    metrics: csv::Writer<File>,
    metrics_path: PathBuf,
    histograms: BufWriter<File>,
    histograms_path: PathBuf,
}

impl Recorder {
    fn new(dir: &Path) -> Result<Self> {
        let metrics_path = dir.join(METRICS_FILE);
        let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let mut metrics = csv::Writer::from_writer(file);
        metrics.write_record([
            "epoch",
            "train_loss",
            "lagrangian_sum",
            "cfs",
            "eval_top1",
            "g",
            "lambda_l1",
            "multiplier_updated",
        ])?;
        let histograms_path = dir.join(HISTOGRAM_FILE);
        let mut histograms = create(&histograms_path)?;
        let mut header = String::from("epoch,layer,lo,hi");
        for b in 0..HISTOGRAM_BINS {
            header.push_str(&format!(",b{b}"));
        }
        writeln!(histograms, "{header}").map_err(|e| Error::io(&histograms_path, e))?;
        Ok(Self {
            metrics,
            metrics_path,
            histograms,
            histograms_path,
        })
    }

    fn row(&mut self, m: &EpochMetrics) -> Result<()> {
        self.metrics.write_record([
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.lagrangian_sum.to_string(),
            m.cfs.to_string(),
            m.eval_top1.to_string(),
            m.g.to_string(),
            m.lambda_l1.to_string(),
            (m.multiplier_updated as u8).to_string(),
        ])?;
        self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))
    }

    fn histograms(&mut self, state: &TrainState) -> Result<()> {
        let io = |e| Error::io(&self.histograms_path, e);
        for (i, (layer, grid)) in state.network.layers().iter().zip(&state.grids).enumerate() {
            let Some(grid) = grid else { continue };
            let (lo, hi) = histogram_range(grid);
            let counts = histogram(layer.weights.as_slice(), grid);
            let mut line = format!("{},{i},{lo},{hi}", state.epoch);
            for c in counts {
                line.push_str(&format!(",{c}"));
            }
            writeln!(self.histograms, "{line}").map_err(io)?;
        }
        self.histograms.flush().map_err(io)
    }
}

/// Runs post-training as configured and writes `metrics.csv`,
/// `histograms.csv`, `final.ckpt` and `summary.json` into the output
/// directory. If training diverges, the last finite state is saved as
/// `diverged.ckpt` before the error is returned.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Artifacts> {
    let started = Instant::now();
    config.validate()?;
    let (train, eval) = load_dataset(&config.data_spec()?)?;
    let mut state = initial_state(config, &train)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rec = Recorder::new(dir)?;
    rec.histograms(&state)?;
    let eval_ref = (!eval.is_empty()).then_some(&eval);
    let result = run_cbp_with(&mut state, &train, eval_ref, |s, m| {
        rec.row(m)?;
        rec.histograms(s)
    });
    let rows = match result {
        Ok(rows) => rows,
        Err(Error::Diverged {
            epoch,
            reason,
            last_finite,
        }) => {
            checkpoint::save(
                &dir.join(DIVERGED_FILE),
                &Checkpoint {
                    config_echo: config.to_text(),
                    state: (*last_finite).clone(),
                },
            )?;
            return Err(Error::Diverged {
                epoch,
                reason,
                last_finite,
            });
        }
        Err(e) => return Err(e),
    };

    let ckpt = dir.join(CHECKPOINT_FILE);
    checkpoint::save(
        &ckpt,
        &Checkpoint {
            config_echo: config.to_text(),
            state: state.clone(),
        },
    )?;
    let (q, fp) = if eval.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        evaluate(&state, &eval)?
    };
    let final_cfs = if state.grids.iter().any(Option::is_some) {
        state.cfs()?
    } else {
        0.0
    };
    let summary = Summary {
        mode: state.config.mode.name().into(),
        epochs: state.epoch,
        final_eval_top1: q,
        final_eval_top1_full_precision: fp,
        final_cfs,
        final_g: state.g,
        final_lambda_l1: state.multipliers.l1(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let summary_path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("plain struct");
    std::fs::write(&summary_path, text + "\n").map_err(|e| Error::io(&summary_path, e))?;
    Ok(Artifacts {
        metrics: rec.metrics_path,
        histograms: rec.histograms_path,
        summary_path,
        checkpoint: ckpt,
        rows,
        summary,
        state,
    })
}

/// Pre-trains as configured and writes `pretrain.ckpt` into the output
/// directory. Returns the checkpoint path and the state.
pub fn run_pretrain(config: &ExperimentConfig) -> Result<(PathBuf, TrainState)> {
    let (train, _) = load_dataset(&config.data_spec()?)?;
    let state = pretrain_state(config, &train)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(PRETRAIN_FILE);
    checkpoint::save(
        &path,
        &Checkpoint {
            config_echo: config.to_text(),
            state: state.clone(),
        },
    )?;
    Ok((path, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::{make_grid, ConstraintKind};

    #[test]
    fn histogram_bins() {
        let grid = make_grid(&ConstraintKind::Ternary, 1.0).unwrap();
        assert_eq!(histogram_range(&grid), (-1.2, 1.2));
        let h = histogram(&[-5.0, -1.0, 0.0, 0.0, 1.0, 5.0], &grid);
        assert_eq!(h.len(), HISTOGRAM_BINS);
        assert_eq!(h.iter().sum::<u64>(), 6);
        assert_eq!(h[0], 1);
        assert_eq!(h[100], 2);
        assert_eq!(h[HISTOGRAM_BINS - 1], 1);
    }
}
