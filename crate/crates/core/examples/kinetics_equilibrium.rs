//! A single weight whose cost minimum sits between two grid values is pulled
//! onto the grid; the multiplier settles where the constraint force balances
//! the cost gradient.

use constrained_backprop::harness::scenarios::scenario;
use constrained_backprop::kinetics::Integrator;
use constrained_backprop::Result;

fn main() -> Result<()> {
    let sc = scenario("equilibrium", 1.0, 50.0)?;
    let traj = sc
        .system
        .integrate_until_still(&sc.w0, &sc.lambda0, 1e-8, 0.01, 5000.0, Integrator::Rk4)?;
    for s in traj.samples.iter().step_by(2000) {
        println!("t {:>8.2} w {:.6} lambda {:.6} L {:.6}", s.t, s.w[0], s.lambda[0], s.lagrangian);
    }
    let last = traj.last().expect("at least one sample");
    println!("settled at t {:.2}: w {:.6} lambda {:.6}", last.t, last.w[0], last.lambda[0]);
    Ok(())
}
