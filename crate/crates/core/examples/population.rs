//! Tracks what fraction of weights sits near each grid value as the
//! constraint alone drives them onto the grid.

use constrained_backprop::harness::scenarios::scenario;
use constrained_backprop::kinetics::{population_track, Integrator};
use constrained_backprop::Result;

fn main() -> Result<()> {
    let sc = scenario("zero-cost", 1.0, 50.0)?;
    let traj = sc.system.integrate(&sc.w0, &sc.lambda0, 60.0, 0.01, Integrator::Euler)?;
    let grid = &sc.system.grid;
    let series = population_track(&traj.snapshots(), grid, 0.02 * grid.span())?;
    println!("levels {:?}", grid.levels());
    for (k, (t, f)) in series.times.iter().zip(&series.fractions).enumerate().step_by(600) {
        println!("t {t:>6.2} fractions {f:?} tracked {:.2}", series.tracked()[k]);
    }
    Ok(())
}
