//! Post-trains a pre-trained network toward ternary weights and prints the
//! per-epoch metrics whenever the multipliers move.

use constrained_backprop::harness::config::ExperimentConfig;
use constrained_backprop::harness::dataset::load_dataset;
use constrained_backprop::harness::experiment::pretrain;
use constrained_backprop::{run_cbp, Result, TrainState};

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    for kv in std::env::args().skip(1) {
        cfg.apply_override(&kv)?;
    }
    let (train, eval) = load_dataset(&cfg.data_spec()?)?;
    let mut state = TrainState::new(pretrain(&cfg, &train)?, cfg.cbp_config())?;
    let rows = run_cbp(&mut state, &train, Some(&eval))?;
    println!("{:>5} {:>9} {:>10} {:>6} {:>7} {:>9}", "epoch", "loss", "cfs", "top1", "g", "|lambda|");
    for r in rows.iter().filter(|r| r.multiplier_updated || r.epoch + 1 == rows.len()) {
        println!(
            "{:>5} {:>9.4} {:>10.3e} {:>6.3} {:>7} {:>9.4}",
            r.epoch, r.train_loss, r.cfs, r.eval_top1, r.g, r.lambda_l1
        );
    }
    Ok(())
}
