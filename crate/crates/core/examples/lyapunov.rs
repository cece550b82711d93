//! Splits dL/dt into descent and ascent parts along a trajectory and checks
//! it against finite differences of the recorded Lagrangian.

use constrained_backprop::harness::scenarios::scenario;
use constrained_backprop::kinetics::Integrator;
use constrained_backprop::Result;

fn main() -> Result<()> {
    let sc = scenario("lyapunov", 1.0, 20.0)?;
    let traj = sc.system.integrate(&sc.w0, &sc.lambda0, 40.0, 1e-3, Integrator::Rk4)?;
    for s in traj.samples.iter().take_while(|s| s.t <= 10.0).step_by(1000) {
        println!(
            "t {:>6.2} L {:>9.5} dL/dt {:>10.3e} descent {:>10.3e} ascent {:>10.3e}",
            s.t, s.lagrangian, s.terms.dl_dt, s.terms.descent, s.terms.ascent
        );
    }
    let residuals = sc.system.lyapunov_residuals(&traj);
    let scale = residuals.iter().map(|r| r.reported.abs()).fold(0.0, f64::max);
    let worst = residuals.iter().map(|r| r.relative_error(1e-3 * scale)).fold(0.0, f64::max);
    println!("{} checked samples, worst relative error {worst:.2e}", residuals.len());
    Ok(())
}
