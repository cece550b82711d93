//! Trains for a while, checkpoints, resumes, and confirms the resumed run
//! matches an uninterrupted one exactly.

use constrained_backprop::harness::checkpoint::{self, Checkpoint};
use constrained_backprop::harness::config::ExperimentConfig;
use constrained_backprop::harness::dataset::load_dataset;
use constrained_backprop::harness::experiment::pretrain;
use constrained_backprop::{run_cbp, Result, TrainState};

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.epochs = 30;
    let (train, eval) = load_dataset(&cfg.data_spec()?)?;
    let start = TrainState::new(pretrain(&cfg, &train)?, cfg.cbp_config())?;

    let mut straight = start.clone();
    run_cbp(&mut straight, &train, Some(&eval))?;

    let mut first = start;
    first.config.epochs = 15;
    run_cbp(&mut first, &train, Some(&eval))?;
    let path = std::env::temp_dir().join("cbp-resume-example.ckpt");
    checkpoint::save(&path, &Checkpoint { config_echo: cfg.to_text(), state: first })?;

    let mut resumed = checkpoint::load(&path)?.state;
    resumed.config.epochs = 30;
    run_cbp(&mut resumed, &train, Some(&eval))?;

    let same = resumed.network.layers() == straight.network.layers()
        && resumed.multipliers == straight.multipliers;
    println!("checkpoint {}", path.display());
    println!("resumed run identical to uninterrupted run: {same}");
    Ok(())
}
