//! Compares the full method against the no-window and STE-only variants
//! from the same pre-trained network.

use constrained_backprop::cbp::evaluate;
use constrained_backprop::harness::config::ExperimentConfig;
use constrained_backprop::harness::dataset::load_dataset;
use constrained_backprop::harness::experiment::pretrain;
use constrained_backprop::{run_cbp, Result, TrainState, TrainingMode};

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.epochs = 100;
    let (train, eval) = load_dataset(&cfg.data_spec()?)?;
    let net = pretrain(&cfg, &train)?;
    for mode in [TrainingMode::Cbp, TrainingMode::CbpNoWindow, TrainingMode::SteOnly] {
        cfg.mode = mode;
        let mut state = TrainState::new(net.clone(), cfg.cbp_config())?;
        run_cbp(&mut state, &train, Some(&eval))?;
        let (q, _) = evaluate(&state, &eval)?;
        println!("{:<14} top-1 {q:.4} cfs {:.3e}", mode.name(), state.cfs()?);
    }
    Ok(())
}
