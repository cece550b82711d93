//! Trains a full-precision network on two moons and reports accuracy with
//! real and with naively ternarized weights.

use constrained_backprop::cbp::evaluate;
use constrained_backprop::harness::config::ExperimentConfig;
use constrained_backprop::harness::dataset::load_dataset;
use constrained_backprop::harness::experiment::pretrain;
use constrained_backprop::{Result, TrainState};

fn main() -> Result<()> {
    let cfg = ExperimentConfig::default();
    let (train, eval) = load_dataset(&cfg.data_spec()?)?;
    let net = pretrain(&cfg, &train)?;
    let state = TrainState::new(net, cfg.cbp_config())?;
    let (q, f) = evaluate(&state, &eval)?;
    println!("layers {:?}", state.network.sizes());
    println!("full-precision top-1 {f:.4}");
    println!("ternarized top-1     {q:.4}");
    println!("cfs                  {:.4}", state.cfs()?);
    Ok(())
}
