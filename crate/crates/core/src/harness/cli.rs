//! The `cbp` command line.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::cbp::{evaluate, grids_from_weights, TrainState, TrainingMode};
use crate::constraint::cfs;
use crate::error::{Error, Result};
use crate::harness::checkpoint;
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset::load_dataset;
use crate::harness::experiment::{histogram, histogram_range, run_experiment, run_pretrain};
use crate::harness::scenarios::run_kinetics;

#[derive(Parser, Debug)]
#[command(name = "cbp", about = "Train networks under weight-precision constraints")]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full-precision pre-training; writes pretrain.ckpt.
    Pretrain,
    /// Post-training (cbp, cbp-no-window, ste-only or full-precision).
    Train,
    /// Quantized and full-precision accuracy of a checkpoint.
    Eval {
        /// Checkpoint to evaluate (defaults to the `checkpoint` key).
        path: Option<PathBuf>,
    },
    /// Integrate a continuous-time scenario; writes kinetics.csv.
    Kinetics,
    /// Summarize a checkpoint.
    Inspect {
        /// Checkpoint to inspect (defaults to the `checkpoint` key).
        path: Option<PathBuf>,
        /// List every configuration key and exit.
        #[arg(long)]
        help_config: bool,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code: 0 on success, 1 for usage errors, 2 for runtime failures.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Usage(_) => 1,
                _ => 2,
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    for s in &cli.set {
        cfg.apply_override(s)?;
    }
    Ok(cfg)
}

fn checkpoint_path(arg: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    arg.or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| Error::Usage("no checkpoint given (pass a path or --set checkpoint=...)".into()))
}

fn wr(out: &mut dyn Write, text: std::fmt::Arguments) -> Result<()> {
    out.write_fmt(text).map_err(|e| Error::io("<stdout>", e))
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    if let Command::Inspect { help_config: true, .. } = cli.command {
        return wr(out, format_args!("{}", ExperimentConfig::help_text()));
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Pretrain => {
            let (path, state) = run_pretrain(&cfg)?;
            let (_, eval) = load_dataset(&cfg.data_spec()?)?;
            let (_, fp) = evaluate(&state, &eval)?;
            wr(
                out,
                format_args!(
                    "pretrained {} epochs, eval top-1 {:.4}\ncheckpoint {}\n",
                    state.epoch,
                    fp,
                    path.display()
                ),
            )
        }
        Command::Train => {
            let a = run_experiment(&cfg)?;
            let s = &a.summary;
            wr(
                out,
                format_args!(
                    "mode {} epochs {} g {} cfs {:.3e} eval top-1 quantized {:.4} full-precision {:.4}\ncheckpoint {}\n",
                    s.mode,
                    s.epochs,
                    s.final_g,
                    s.final_cfs,
                    s.final_eval_top1,
                    s.final_eval_top1_full_precision,
                    a.checkpoint.display()
                ),
            )
        }
        Command::Eval { path } => {
            let path = checkpoint_path(path, &cfg)?;
            let state = inspectable(checkpoint::load(&path)?.state)?;
            let (_, eval) = load_dataset(&cfg.data_spec()?)?;
            if eval.is_empty() {
                return Err(Error::Usage("evaluation set is empty".into()));
            }
            let (q, fp) = evaluate(&state, &eval)?;
            wr(
                out,
                format_args!("eval top-1 quantized {q:.4} full-precision {fp:.4} ({} samples)\n", eval.len()),
            )
        }
        Command::Kinetics => {
            let (path, sc, traj) = run_kinetics(&cfg)?;
            let last = traj.last().expect("at least the initial sample");
            wr(
                out,
                format_args!(
                    "scenario {} t {} steps {} boundary hits {}\n",
                    sc.name,
                    last.t,
                    traj.samples.len() - 1,
                    traj.boundary_hits
                ),
            )?;
            wr(out, format_args!("w {:?}\nlambda {:?}\ng {}\n", last.w, last.lambda, last.g))?;
            if sc.name == "equilibrium" {
                let mut dc = vec![0.0; last.w.len()];
                sc.system.loss.grad(&last.w, &mut dc);
                let integral = traj.integrated_cs();
                wr(
                    out,
                    format_args!(
                        "|dC/dw|/slope {:.6}  integrated cs / tau_lambda {:.6}\n",
                        dc[0].abs() / sc.system.slope,
                        integral[0] / sc.system.tau_lambda
                    ),
                )?;
            } else {
                let res = sc.system.lyapunov_residuals(&traj);
                let scale = res.iter().map(|r| r.reported.abs()).fold(0.0, f64::max);
                let worst = res
                    .iter()
                    .map(|r| r.relative_error(1e-3 * scale))
                    .fold(0.0, f64::max);
                wr(
                    out,
                    format_args!(
                        "dL/dt checked at {} samples, max relative residual {worst:.3e}\n",
                        res.len()
                    ),
                )?;
            }
            wr(out, format_args!("trajectory {}\n", path.display()))
        }
        Command::Inspect { path, .. } => {
            let path = checkpoint_path(path, &cfg)?;
            let ck = checkpoint::load(&path)?;
            let state = inspectable(ck.state)?;
            inspect(&state, out)
        }
    }
}

/// Pre-training checkpoints hold grids from the initial weights; refresh them.
fn inspectable(mut state: TrainState) -> Result<TrainState> {
    if state.config.mode == TrainingMode::FullPrecision {
        state.grids = grids_from_weights(&state.network, state.effective_window())?;
    }
    Ok(state)
}

fn inspect(state: &TrainState, out: &mut dyn Write) -> Result<()> {
    let m = &state.multipliers;
    let lmax = m.lambda.iter().fold(0.0, |a: f64, x| a.max(x.abs()));
    let lmean = if m.lambda.is_empty() {
        0.0
    } else {
        m.l1() / m.lambda.len() as f64
    };
    wr(
        out,
        format_args!(
            "mode {}\nepoch {}\ng {}\nlambda_l1 {}\nlambda count {} mean |lambda| {lmean:.6e} max |lambda| {lmax:.6e}\nupdates {} p {} eta_w {}\n",
            state.config.mode.name(),
            state.epoch,
            state.g,
            m.l1(),
            m.lambda.len(),
            m.steps,
            m.p,
            state.optimizer.eta_w
        ),
    )?;
    for (i, (layer, grid)) in state.network.layers().iter().zip(&state.grids).enumerate() {
        let shape = format!("{}x{}", layer.out_dim(), layer.in_dim());
        let Some(grid) = grid.as_ref().filter(|_| !layer.quant.exempt) else {
            wr(out, format_args!("layer {i} {shape} exempt\n"))?;
            continue;
        };
        let layer_cfs = cfs(std::iter::once((layer.weights.as_slice(), grid)))?;
        wr(
            out,
            format_args!(
                "layer {i} {shape} {} {} levels {:?} cfs {layer_cfs:.6e}\n",
                layer.quant.kind.name(),
                grid.n_levels(),
                grid.levels()
            ),
        )?;
        let (lo, hi) = histogram_range(grid);
        let counts = histogram(layer.weights.as_slice(), grid);
        let width = (hi - lo) / counts.len() as f64;
        let bins: Vec<String> = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(b, c)| format!("{:.4}:{c}", lo + (b as f64 + 0.5) * width))
            .collect();
        wr(out, format_args!("  histogram [{lo:.4}, {hi:.4}) {}\n", bins.join(" ")))?;
    }
    Ok(())
}
