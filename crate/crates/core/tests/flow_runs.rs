use std::f64::consts::{FRAC_PI_3, FRAC_PI_4};

use capflow::curvature;
use capflow::diagnostics::{self, cap_ode_oracle};
use capflow::flow::{
    self, FlowConfig, FlowProblem, InitialSpec, PhiSpec, RunStatus, Stepper, J_TOLERANCE,
};
use capflow::orlicz::make_power;

fn cap_config(n: usize, n_rho: usize, p: f64, scale: f64) -> FlowConfig {
    let theta = if n == 1 { FRAC_PI_4 } else { FRAC_PI_3 };
    let mut cfg = FlowConfig::new(theta, n, n_rho, 2 * n_rho, PhiSpec::Power { p }, "1");
    cfg.h0.scale = scale;
    cfg
}

#[test]
fn stationary_cap_barely_moves_and_dt_grows_to_the_cap() {
    // coarser grids drift enough to trip the functional guard
    let cfg = cap_config(2, 64, 3.0, 1.0);
    let p = FlowProblem::from_config(&cfg).unwrap();
    let mut stepper = Stepper::new(&p, &cfg).unwrap();
    let mut state = stepper.initial_state(p.ell.clone()).unwrap();
    for _ in 0..12 {
        state = stepper.step(&state, 100.0).unwrap();
    }
    let drift = state
        .h
        .values()
        .iter()
        .zip(p.ell.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(drift < 1e-4, "drift {drift}");
    assert_eq!(stepper.dt(), cfg.dt_max);
    assert_eq!(state.rejects, 0);
}

#[test]
fn cap_family_tracks_the_ode_oracle_at_second_order() {
    // φ = s^{-5/2}, n = 2: u' = u(1 − √u)
    let (p, u0, t) = (3.5, 0.6, 1.5);
    let exact = cap_ode_oracle(u0, 1.0, &make_power(p).unwrap(), 2, t).unwrap();
    let err = |n_rho: usize| {
        let mut cfg = cap_config(2, n_rho, p, u0);
        cfg.t_max = t;
        cfg.tol_residual = 1e-12;
        let r = flow::run(&cfg).unwrap();
        assert_eq!(r.t_final, t);
        let last = r.rows.last().unwrap();
        assert!((last.max_u - last.min_u) / last.min_u < 1e-4);
        (0.5 * (last.min_u + last.max_u) - exact).abs()
    };
    let (coarse, fine) = (err(16), err(32));
    assert!(fine < 2e-4, "error {fine}");
    assert!(coarse / fine > 3.0, "{coarse} -> {fine}");
}

#[test]
fn unit_weight_in_one_dimension_follows_the_unstable_ode() {
    // p = 1, n = 1: u' = u − 1, so caps above u = 1 grow without bound and
    // caps below reach zero at t = ln(1/(1 − u0))
    let phi = make_power(1.0).unwrap();
    let mut cfg = cap_config(1, 200, 1.0, 1.2);
    cfg.n_phi = 1;
    cfg.t_max = 3.0;
    let r = flow::run(&cfg).unwrap();
    assert_eq!(r.status, RunStatus::Horizon);
    assert!(r
        .warnings
        .iter()
        .any(|w| w.contains("barrier condition fails")));
    let want = cap_ode_oracle(1.2, 1.0, &phi, 1, 3.0).unwrap();
    let got = r.rows.last().unwrap().max_u;
    assert!((got - want).abs() / want < 1e-4, "{got} vs {want}");

    cfg.h0.scale = 0.8;
    let r = flow::run(&cfg).unwrap();
    assert_eq!(r.status, RunStatus::Breakdown);
    assert!(
        (r.t_final - 5f64.ln()).abs() < 1e-2,
        "breakdown at {}",
        r.t_final
    );
}

#[test]
fn nonconstant_data_converges_when_the_barrier_condition_holds() {
    let mut cfg = FlowConfig::new(
        FRAC_PI_3,
        2,
        64,
        128,
        PhiSpec::Power { p: 4.0 },
        "1 + 0.3*x3",
    );
    cfg.t_max = 20.0;
    cfg.tol_residual = 1e-3;
    let p = FlowProblem::from_config(&cfg).unwrap();
    assert!(p.condition_report(&cfg.barrier).passes);
    let r = flow::run_problem(&p, p.ell.clone(), &cfg).unwrap();
    assert_eq!(r.status, RunStatus::Converged);
    assert!(r.residual_inf <= 1e-3);
    let bundle = curvature::curvature_bundle(&p.grid, &r.final_h).unwrap();
    assert!(bundle.convex);
    assert!(diagnostics::boundary_robin_defect(&p.grid, &r.final_h) <= p.grid.d_rho().powi(2));
    for w in r.history.windows(2) {
        assert!(w[1].j <= w[0].j + J_TOLERANCE * (1.0 + w[0].j.abs()));
    }
    assert!(r
        .monitors
        .iter()
        .all(|m| m.grad_slack >= 0.0 && m.min_radius > 0.0));
}

#[test]
fn perturbed_cap_relaxes_back_to_the_unit_cap() {
    let mut cfg = cap_config(2, 16, 4.0, 1.0);
    cfg.h0 = InitialSpec {
        scale: 0.9,
        amplitude: 0.2,
        mode: Some("random".into()),
    };
    cfg.seed = 11;
    cfg.t_max = 40.0;
    cfg.tol_residual = 1e-6;
    let r = flow::run(&cfg).unwrap();
    assert_eq!(r.status, RunStatus::Converged, "{:?}", r.warnings);
    let last = r.rows.last().unwrap();
    assert!((last.min_u - 1.0).abs() < 1e-3 && (last.max_u - 1.0).abs() < 1e-3);
    for w in r.history.windows(2) {
        assert!(w[1].j <= w[0].j + J_TOLERANCE * (1.0 + w[0].j.abs()));
    }
}

#[test]
fn random_initial_data_depends_only_on_the_seed() {
    let cfg = cap_config(2, 12, 4.0, 1.0);
    let p = FlowProblem::from_config(&cfg).unwrap();
    let spec = InitialSpec {
        scale: 1.0,
        amplitude: 0.2,
        mode: Some("random".into()),
    };
    let a = p.initial_h(&spec, 3).unwrap();
    let b = p.initial_h(&spec, 3).unwrap();
    let c = p.initial_h(&spec, 4).unwrap();
    assert_eq!(a.values(), b.values());
    assert_ne!(a.values(), c.values());
    let too_big = InitialSpec {
        amplitude: 50.0,
        ..spec
    };
    assert!(matches!(
        p.initial_h(&too_big, 3),
        Err(flow::FlowError::InvalidInitial(_))
    ));
}
