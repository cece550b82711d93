//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key can be overridden on
//! the command line with `--set key=value`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cbp::{CbpConfig, GSchedule, MultiplierOptimizer, TrainingMode};
use crate::constraint::ConstraintKind;
use crate::error::{Error, Result};
use crate::harness::dataset::{DataSource, DataSpec};
use crate::quantizer::ScalePolicy;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub train_path: Option<PathBuf>,
    pub train_labels_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub eval_labels_path: Option<PathBuf>,
    pub n_train: usize,
    pub n_eval: usize,
    pub noise: f64,
    pub blob_centers: usize,
    pub blob_dim: usize,
    pub blob_std: f64,
    pub data_seed: u64,
    pub layers: Vec<usize>,
    pub constraint: ConstraintKind,
    pub scale_policy: ScalePolicy,
    pub mode: TrainingMode,
    pub lr_w: f64,
    pub lr_lambda: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub p_max: usize,
    pub g_schedule: GSchedule,
    pub lr_decay_g: f64,
    pub lr_decay_factor: f64,
    pub multiplier_optimizer: String,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_momentum: f64,
    pub pretrain_weight_decay: f64,
    pub from_scratch: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub kinetics_scenario: String,
    pub kinetics_method: String,
    pub kinetics_dt: f64,
    pub kinetics_t_end: f64,
    pub tau_w: f64,
    pub tau_lambda: f64,
}

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("dataset", "two-moons | blobs | csv | idx"),
    ("train_path", "csv file, or idx image file, for training"),
    ("train_labels_path", "idx label file for training"),
    ("eval_path", "csv file, or idx image file, for evaluation (optional)"),
    ("eval_labels_path", "idx label file for evaluation (optional)"),
    ("n_train", "training samples (synthetic) [2000]"),
    ("n_eval", "evaluation samples; file sources hold out this many when no eval file [500]"),
    ("noise", "two-moons noise standard deviation [0.1]"),
    ("blob_centers", "number of blob classes [3]"),
    ("blob_dim", "blob feature dimension [2]"),
    ("blob_std", "blob standard deviation [1.0]"),
    ("data_seed", "seed for synthetic data [7]"),
    ("layers", "comma-separated layer widths, input first [2,16,16,2]"),
    ("constraint", "binary | ternary | one-bit-shift | two-bit-shift | custom:<levels> [ternary]"),
    ("scale_policy", "frozen | recompute [frozen]"),
    ("mode", "cbp | cbp-no-window | ste-only | full-precision [cbp]"),
    ("lr_w", "weight learning rate during CBP [0.03]"),
    ("lr_lambda", "multiplier learning rate [1e-4]"),
    ("momentum", "SGD momentum [0.9]"),
    ("weight_decay", "L2 weight decay on the loss term [1e-4]"),
    ("batch_size", "mini-batch size [32]"),
    ("epochs", "total CBP epoch budget [200]"),
    ("p_max", "patience before a forced multiplier update [20]"),
    ("g_schedule", "three-tier | two-tier [three-tier]"),
    ("lr_decay_g", "g at which the weight learning rate decays once [20]"),
    ("lr_decay_factor", "factor applied at that point [0.1]"),
    ("multiplier_optimizer", "adam | raw [adam]"),
    ("pretrain_epochs", "full-precision pre-training epochs [100]"),
    ("pretrain_lr", "pre-training learning rate [0.05]"),
    ("pretrain_momentum", "pre-training momentum [0.9]"),
    ("pretrain_weight_decay", "pre-training weight decay [0]"),
    ("from_scratch", "allow CBP on an untrained network [false]"),
    ("seed", "seed for initialization and batch order [0]"),
    ("output_dir", "directory for artifacts [runs/default]"),
    ("checkpoint", "checkpoint to read (train, eval, inspect)"),
    ("kinetics_scenario", "equilibrium | lyapunov | window | zero-cost [equilibrium]"),
    ("kinetics_method", "euler | rk4 [euler]"),
    ("kinetics_dt", "integration step [0.01]"),
    ("kinetics_t_end", "integration horizon [400]"),
    ("tau_w", "weight time constant [1]"),
    ("tau_lambda", "multiplier time constant [50]"),
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "two-moons".into(),
            train_path: None,
            train_labels_path: None,
            eval_path: None,
            eval_labels_path: None,
            n_train: 2000,
            n_eval: 500,
            noise: 0.1,
            blob_centers: 3,
            blob_dim: 2,
            blob_std: 1.0,
            data_seed: 7,
            layers: vec![2, 16, 16, 2],
            constraint: ConstraintKind::Ternary,
            scale_policy: ScalePolicy::FrozenAtStart,
            mode: TrainingMode::Cbp,
            lr_w: 0.03,
            lr_lambda: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 200,
            p_max: 20,
            g_schedule: GSchedule::ThreeTier,
            lr_decay_g: 20.0,
            lr_decay_factor: 0.1,
            multiplier_optimizer: "adam".into(),
            pretrain_epochs: 100,
            pretrain_lr: 0.05,
            pretrain_momentum: 0.9,
            pretrain_weight_decay: 0.0,
            from_scratch: false,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            kinetics_scenario: "equilibrium".into(),
            kinetics_method: "euler".into(),
            kinetics_dt: 0.01,
            kinetics_t_end: 400.0,
            tau_w: 1.0,
            tau_lambda: 50.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Usage(format!("{key} = {value:?}: {e}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn fmt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    /// Reads a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {kv:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => {
                if !matches!(value, "two-moons" | "blobs" | "csv" | "idx") {
                    return Err(Error::Usage(format!("unknown dataset {value:?}")));
                }
                self.dataset = value.into();
            }
            "train_path" => self.train_path = opt_path(value),
            "train_labels_path" => self.train_labels_path = opt_path(value),
            "eval_path" => self.eval_path = opt_path(value),
            "eval_labels_path" => self.eval_labels_path = opt_path(value),
            "n_train" => self.n_train = parse(key, value)?,
            "n_eval" => self.n_eval = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "blob_centers" => self.blob_centers = parse(key, value)?,
            "blob_dim" => self.blob_dim = parse(key, value)?,
            "blob_std" => self.blob_std = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "layers" => {
                self.layers = value
                    .split(',')
                    .map(|t| parse::<usize>(key, t.trim()))
                    .collect::<Result<_>>()?;
            }
            "constraint" => self.constraint = parse(key, value)?,
            "scale_policy" => self.scale_policy = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "lr_w" => self.lr_w = parse(key, value)?,
            "lr_lambda" => self.lr_lambda = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "p_max" => self.p_max = parse(key, value)?,
            "g_schedule" => self.g_schedule = parse(key, value)?,
            "lr_decay_g" => self.lr_decay_g = parse(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "multiplier_optimizer" => {
                if !matches!(value, "adam" | "raw") {
                    return Err(Error::Usage(format!("unknown multiplier optimizer {value:?}")));
                }
                self.multiplier_optimizer = value.into();
            }
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "pretrain_momentum" => self.pretrain_momentum = parse(key, value)?,
            "pretrain_weight_decay" => self.pretrain_weight_decay = parse(key, value)?,
            "from_scratch" => self.from_scratch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = opt_path(value),
            "kinetics_scenario" => self.kinetics_scenario = value.into(),
            "kinetics_method" => self.kinetics_method = value.into(),
            "kinetics_dt" => self.kinetics_dt = parse(key, value)?,
            "kinetics_t_end" => self.kinetics_t_end = parse(key, value)?,
            "tau_w" => self.tau_w = parse(key, value)?,
            "tau_lambda" => self.tau_lambda = parse(key, value)?,
            other => {
                let valid: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
                return Err(Error::Usage(format!(
                    "unknown key {other:?}; valid keys: {}",
                    valid.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; reading it back yields an equal config.
    pub fn to_text(&self) -> String {
        let custom_levels = |k: &ConstraintKind| match k {
            ConstraintKind::Custom(v) => format!(
                "custom:{}",
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            ),
            other => other.name().to_string(),
        };
        let values: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.clone()),
            ("train_path", fmt_path(&self.train_path)),
            ("train_labels_path", fmt_path(&self.train_labels_path)),
            ("eval_path", fmt_path(&self.eval_path)),
            ("eval_labels_path", fmt_path(&self.eval_labels_path)),
            ("n_train", self.n_train.to_string()),
            ("n_eval", self.n_eval.to_string()),
            ("noise", self.noise.to_string()),
            ("blob_centers", self.blob_centers.to_string()),
            ("blob_dim", self.blob_dim.to_string()),
            ("blob_std", self.blob_std.to_string()),
            ("data_seed", self.data_seed.to_string()),
            (
                "layers",
                self.layers.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("constraint", custom_levels(&self.constraint)),
            (
                "scale_policy",
                match self.scale_policy {
                    ScalePolicy::FrozenAtStart => "frozen",
                    ScalePolicy::RecomputeEachEpoch => "recompute",
                }
                .into(),
            ),
            ("mode", self.mode.name().into()),
            ("lr_w", self.lr_w.to_string()),
            ("lr_lambda", self.lr_lambda.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("p_max", self.p_max.to_string()),
            (
                "g_schedule",
                match self.g_schedule {
                    GSchedule::ThreeTier => "three-tier",
                    GSchedule::TwoTier => "two-tier",
                }
                .into(),
            ),
            ("lr_decay_g", self.lr_decay_g.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("multiplier_optimizer", self.multiplier_optimizer.clone()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("pretrain_momentum", self.pretrain_momentum.to_string()),
            ("pretrain_weight_decay", self.pretrain_weight_decay.to_string()),
            ("from_scratch", self.from_scratch.to_string()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("checkpoint", fmt_path(&self.checkpoint)),
            ("kinetics_scenario", self.kinetics_scenario.clone()),
            ("kinetics_method", self.kinetics_method.clone()),
            ("kinetics_dt", self.kinetics_dt.to_string()),
            ("kinetics_t_end", self.kinetics_t_end.to_string()),
            ("tau_w", self.tau_w.to_string()),
            ("tau_lambda", self.tau_lambda.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn help_text() -> String {
        let mut out = String::from("configuration keys (flat key = value, # comments):\n");
        for (k, doc) in KEYS {
            let _ = writeln!(out, "  {k:<24} {doc}");
        }
        out
    }

    pub fn data_spec(&self) -> Result<DataSpec> {
        let need = |p: &Option<PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| Error::Usage(format!("dataset = {} requires {key}", self.dataset)))
        };
        let source = match self.dataset.as_str() {
            "two-moons" => DataSource::TwoMoons { noise: self.noise },
            "blobs" => DataSource::Blobs {
                centers: self.blob_centers,
                dim: self.blob_dim,
                std: self.blob_std,
            },
            "csv" => DataSource::Csv {
                train: need(&self.train_path, "train_path")?,
                eval: self.eval_path.clone(),
            },
            "idx" => DataSource::Idx {
                train_images: need(&self.train_path, "train_path")?,
                train_labels: need(&self.train_labels_path, "train_labels_path")?,
                eval_images: self.eval_path.clone(),
                eval_labels: self.eval_labels_path.clone(),
            },
            other => return Err(Error::Usage(format!("unknown dataset {other:?}"))),
        };
        Ok(DataSpec {
            source,
            n_train: self.n_train,
            n_eval: self.n_eval,
            seed: self.data_seed,
        })
    }

    fn multiplier_opt(&self) -> MultiplierOptimizer {
        match self.multiplier_optimizer.as_str() {
            "raw" => MultiplierOptimizer::RawAscent,
            _ => MultiplierOptimizer::default(),
        }
    }

    /// Optimizer settings for the post-training phase.
    pub fn cbp_config(&self) -> CbpConfig {
        CbpConfig {
            mode: self.mode,
            lr_w: self.lr_w,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_lambda: self.lr_lambda,
            p_max: self.p_max,
            multiplier_optimizer: self.multiplier_opt(),
            g_schedule: self.g_schedule,
            lr_decay_trigger: self.lr_decay_g,
            lr_decay_factor: self.lr_decay_factor,
            scale_policy: self.scale_policy,
            seed: self.seed,
        }
    }

    /// Optimizer settings for full-precision pre-training.
    pub fn pretrain_config(&self) -> CbpConfig {
        CbpConfig {
            mode: TrainingMode::FullPrecision,
            lr_w: self.pretrain_lr,
            momentum: self.pretrain_momentum,
            weight_decay: self.pretrain_weight_decay,
            epochs: self.pretrain_epochs,
            ..self.cbp_config()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::Usage("layers needs at least input and output widths".into()));
        }
        self.cbp_config().validate()?;
        self.pretrain_config().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("# comment\nconstraint = custom:-1,0.5,1\nlr_w = 0.003 # inline\nlayers=4,8,3\n\ncheckpoint = a/b.ckpt\n")
            .unwrap();
        assert_eq!(cfg.layers, vec![4, 8, 3]);
        assert_eq!(cfg.lr_w, 0.003);
        let mut back = ExperimentConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_is_settable_and_documented() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        let rendered: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let documented: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        assert_eq!(rendered, documented);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let mut cfg = ExperimentConfig::default();
        match cfg.apply_override("learning_rate=1") {
            Err(Error::Usage(msg)) => assert!(msg.contains("lr_w") && msg.contains("tau_lambda")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(cfg.apply_override("lr_w"), Err(Error::Usage(_))));
        assert!(matches!(cfg.apply_override("epochs=-3"), Err(Error::Usage(_))));
    }

    #[test]
    fn invalid_rates_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("lr_w", "0").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.set("batch_size", "0").unwrap();
        assert!(cfg.validate().is_err());
    }
}
