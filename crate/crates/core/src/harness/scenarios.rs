//! Named kinetics scenarios runnable from the command line.

use std::path::PathBuf;

use crate::cbp::GSchedule;
use crate::constraint::{make_grid, ConstraintKind};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::kinetics::{Integrator, KineticsLoss, KineticsSystem, Trajectory, WindowMode};
use crate::ndcore::Matrix;

pub const SCENARIOS: &[&str] = &["equilibrium", "lyapunov", "window", "zero-cost"];

/// A system with its starting point.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub system: KineticsSystem,
    pub w0: Vec<f64>,
    pub lambda0: Vec<f64>,
}

/// Builds one of [`SCENARIOS`] on a unit ternary grid.
///
/// - `equilibrium`: `C = (w - 0.3)^2 / 2`, no window, starting at `w = 0.3`.
/// - `lyapunov`: four-point logistic regression in two weights, no window.
/// - `window`: the same loss with the vanishing window.
/// - `zero-cost`: `C = 0`; only the constraint moves four weights.
pub fn scenario(name: &str, tau_w: f64, tau_lambda: f64) -> Result<Scenario> {
    let grid = make_grid(&ConstraintKind::Ternary, 1.0)?;
    let (loss, w0, window) = match name {
        "equilibrium" => (KineticsLoss::quadratic(vec![0.3]), vec![0.3], WindowMode::None),
        "lyapunov" => (KineticsLoss::tiny_logistic(), vec![0.3, -0.7], WindowMode::None),
        "window" => (KineticsLoss::tiny_logistic(), vec![0.3, -0.7], WindowMode::Vanishing),
        "zero-cost" => (
            KineticsLoss::Quadratic {
                center: vec![0.0; 4],
                hessian: Matrix::zeros(4, 4),
            },
            vec![0.35, -0.6, 0.1, 0.8],
            WindowMode::None,
        ),
        other => {
            return Err(Error::Usage(format!(
                "unknown kinetics scenario {other:?}; expected one of {}",
                SCENARIOS.join(", ")
            )))
        }
    };
    let mut system = KineticsSystem::new(loss, grid, tau_w, tau_lambda)?.with_window(window);
    system.g_schedule = GSchedule::TwoTier;
    let n = w0.len();
    Ok(Scenario {
        name: name.into(),
        system,
        w0,
        lambda0: vec![0.0; n],
    })
}

/// Integrates the configured scenario and writes `kinetics.csv` into the
/// output directory. The equilibrium scenario stops once the weights are
/// still.
pub fn run_kinetics(config: &ExperimentConfig) -> Result<(PathBuf, Scenario, Trajectory)> {
    let sc = scenario(&config.kinetics_scenario, config.tau_w, config.tau_lambda)?;
    let method: Integrator = config.kinetics_method.parse()?;
    let traj = if sc.name == "equilibrium" {
        sc.system
            .integrate_until_still(&sc.w0, &sc.lambda0, 1e-8, config.kinetics_dt, config.kinetics_t_end, method)?
    } else {
        sc.system
            .integrate(&sc.w0, &sc.lambda0, config.kinetics_t_end, config.kinetics_dt, method)?
    };
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("kinetics.csv");
    traj.write_csv(&path)?;
    Ok((path, sc, traj))
}
