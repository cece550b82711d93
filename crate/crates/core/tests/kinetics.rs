use constrained_backprop::constraint::{make_grid, ConstraintKind};
use constrained_backprop::harness::scenarios::scenario;
use constrained_backprop::kinetics::{
    population_track, Integrator, KineticsLoss, KineticsState, KineticsSystem, LyapunovTerms, WindowMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quad_system(center: f64) -> KineticsSystem {
    let grid = make_grid(&ConstraintKind::Ternary, 1.0).unwrap();
    KineticsSystem::new(KineticsLoss::quadratic(vec![center]), grid, 1.0, 50.0).unwrap()
}

#[test]
fn integrator_convergence_order() {
    let sys = quad_system(0.3);
    let end = |dt: f64, m: Integrator| sys.integrate(&[0.3], &[0.0], 2.0, dt, m).unwrap().last().unwrap().w[0];
    let exact = end(1e-4, Integrator::Rk4);
    let err = |dt: f64, m: Integrator| (end(dt, m) - exact).abs();
    let euler = err(0.02, Integrator::Euler) / err(0.01, Integrator::Euler);
    assert!((1.8..2.2).contains(&euler), "euler ratio {euler}");
    let rk4 = err(0.2, Integrator::Rk4) / err(0.1, Integrator::Rk4);
    assert!((12.0..20.0).contains(&rk4), "rk4 ratio {rk4}");
}

#[test]
fn multipliers_integrate_the_constraint() {
    let sys = quad_system(0.8);
    for method in [Integrator::Euler, Integrator::Rk4] {
        let traj = sys.integrate(&[0.1], &[0.05], 40.0, 1e-3, method).unwrap();
        let last = traj.last().unwrap();
        let want = 0.05 + traj.integrated_cs()[0] / 50.0;
        assert!((last.lambda[0] - want).abs() < 1e-5, "{method:?}: {} vs {want}", last.lambda[0]);
    }
}

#[test]
fn zero_cost_when_loss_minimum_is_on_the_grid() {
    let grid = make_grid(&ConstraintKind::TwoBitShift, 0.7).unwrap();
    let center = vec![0.7, -0.175, 0.0];
    for window in [WindowMode::None, WindowMode::Vanishing] {
        let sys = KineticsSystem::new(KineticsLoss::quadratic(center.clone()), grid.clone(), 1.0, 5.0)
            .unwrap()
            .with_window(window);
        let traj = sys.integrate(&center, &[0.0; 3], 10.0, 0.01, Integrator::Euler).unwrap();
        for s in &traj.samples {
            assert_eq!(s.w, center);
            assert_eq!(s.lambda, vec![0.0; 3]);
        }
    }
}

#[test]
fn decomposition_vanishes_at_the_constrained_minimum() {
    let sys = quad_system(0.0);
    let t = sys.lyapunov_decomposition(&KineticsState {
        w: vec![0.0],
        lambda: vec![0.0],
        g: 1.0,
    });
    assert_eq!(t, LyapunovTerms::default());
}

#[test]
fn window_edges_are_never_hit_from_random_starts() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut hits = 0;
    for _ in 0..20 {
        let sc = scenario("window", rng.random_range(0.5..2.0), rng.random_range(5.0..50.0)).unwrap();
        let w0: Vec<f64> = (0..2).map(|_| rng.random_range(-1.2..1.2)).collect();
        let traj = sc.system.integrate(&w0, &[0.0, 0.0], 20.0, 0.01, Integrator::Euler).unwrap();
        hits += traj.boundary_hits;
    }
    assert_eq!(hits, 0);
}

#[test]
fn constraint_alone_drives_weights_onto_the_grid() {
    let sc = scenario("zero-cost", 1.0, 50.0).unwrap();
    let traj = sc.system.integrate(&sc.w0, &sc.lambda0, 60.0, 0.01, Integrator::Euler).unwrap();
    let grid = sc.system.grid.clone();
    let series = population_track(&traj.snapshots(), &grid, 0.02 * grid.span()).unwrap();
    let tracked = series.tracked();
    assert!(tracked[0] < 0.5);
    assert!(*tracked.last().unwrap() > 0.99);
    for f in &series.fractions {
        assert!(f.iter().sum::<f64>() <= 1.0 + 1e-12);
    }
}

#[test]
fn vanishing_window_grows_g_at_the_multiplier_rate() {
    let sc = scenario("window", 1.0, 4.0).unwrap();
    let traj = sc.system.integrate(&sc.w0, &sc.lambda0, 60.0, 0.01, Integrator::Rk4).unwrap();
    // +1 per tau_lambda below 10, +10 per tau_lambda after
    let at = |t: f64| traj.samples.iter().find(|s| s.t >= t).unwrap().g;
    assert!((at(20.0) - 6.0).abs() < 0.05);
    assert!(at(60.0) > 10.0);
    let events = traj.snapshots().iter().filter(|s| s.g_update).count();
    assert!(events >= 9);
}

#[test]
fn trajectory_csv_layout() {
    let sc = scenario("lyapunov", 1.0, 50.0).unwrap();
    let traj = sc.system.integrate(&sc.w0, &sc.lambda0, 1.0, 0.1, Integrator::Euler).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    traj.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,w_0,w_1,lambda_0,lambda_1,g,L,descent_term,ascent_term"
    );
    assert_eq!(lines.count(), 11);
    let times: Vec<f64> = traj.samples.iter().map(|s| s.t).collect();
    assert!(times.windows(2).all(|p| p[1] > p[0]));
}
