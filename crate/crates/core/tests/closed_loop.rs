mod common;

use common::scenario_path;
use ellipsoid_mpc::collision::ConstraintKind;
use ellipsoid_mpc::scenario::{load_scenario, LoadedScenario};
use ellipsoid_mpc::sim::{compare_formulations, run_closed_loop, CompareSettings, RunLog, GOAL_TOLERANCE};
use ellipsoid_mpc::sqp::{SqpSettings, SqpStatus};

fn open() -> LoadedScenario {
    load_scenario(&scenario_path("open_straight")).unwrap()
}

/// Everything in the log except wall-clock time.
fn fingerprint(log: &RunLog) -> Vec<String> {
    log.steps
        .iter()
        .map(|s| {
            format!(
                "{} {:?} {:?} {:?} {} {} {} {} {:?} {:?}",
                s.step,
                s.state.as_slice(),
                s.input.as_slice(),
                s.clearances,
                s.objective,
                s.kkt_residual,
                s.sqp_iterations,
                s.qp_iterations,
                s.status,
                s.fixed_params
            )
        })
        .collect()
}

#[test]
fn obstacle_free_run_tracks_the_straight_path() {
    let l = open();
    let log = run_closed_loop(&l.scenario, &l.sim).unwrap();
    assert!(log.goal_reached);
    let last = log.steps.last().unwrap().state;
    let goal = l.scenario.goal;
    assert!((last[0] - goal.px).hypot(last[1] - goal.py) <= GOAL_TOLERANCE);
    let max_lateral = log.steps.iter().map(|s| s.state[1].abs()).fold(0.0, f64::max);
    assert!(max_lateral <= 0.01, "lateral error {max_lateral}");
}

#[test]
fn steady_tracking_needs_at_most_two_iterations() {
    let l = open();
    let log = run_closed_loop(&l.scenario, &l.sim).unwrap();
    for s in &log.steps {
        assert_eq!(s.status, SqpStatus::Converged, "step {}", s.step);
        assert!(s.sqp_iterations <= 2, "step {} took {} iterations", s.step, s.sqp_iterations);
    }
}

#[test]
fn early_terminated_loop_still_reaches_the_goal() {
    let mut l = open();
    l.sim.solver = SqpSettings::real_time(2);
    let log = run_closed_loop(&l.scenario, &l.sim).unwrap();
    assert!(log.goal_reached);
}

#[test]
fn runs_are_deterministic_per_seed() {
    let mut l = open();
    l.sim.steps = 30;
    l.sim.disturbance = Some([2e-3, 2e-3, 1e-3, 1e-3, 1e-3]);
    l.sim.seed = 11;
    let a = run_closed_loop(&l.scenario, &l.sim).unwrap();
    let b = run_closed_loop(&l.scenario, &l.sim).unwrap();
    assert_eq!(fingerprint(&a), fingerprint(&b));
    l.sim.seed = 12;
    let c = run_closed_loop(&l.scenario, &l.sim).unwrap();
    assert_ne!(fingerprint(&a), fingerprint(&c));
}

#[test]
fn all_formulations_coincide_without_obstacles() {
    let mut l = open();
    l.sim.steps = 15;
    let settings = CompareSettings {
        timing_repeats: 1,
        ..CompareSettings::default()
    };
    let run = compare_formulations(&l.scenario, &l.sim, &settings).unwrap();
    assert_eq!(run.records.len(), 15);
    for r in &run.records {
        assert!(r.valid());
        for o in &r.objectives[1..] {
            assert!((o - r.objectives[0]).abs() <= 1e-8, "step {}: {:?}", r.step, r.objectives);
        }
        for rel in [r.rel_fixed_gamma, r.rel_fixed_eta, r.rel_fixed_eta_vs_gamma] {
            assert!(rel.abs() <= 1e-8);
        }
        assert!(r.timed_seconds.iter().all(|t| *t > 0.0));
    }
}

#[test]
fn fixed_modes_drive_obstacle_free_scenario_to_goal() {
    for kind in [ConstraintKind::MinkowskiFixedGamma, ConstraintKind::HyperplaneFixedEta] {
        let l = open();
        let log = run_closed_loop(&l.scenario.with_kind(kind), &l.sim).unwrap();
        assert!(log.goal_reached, "{kind}");
        assert_eq!(log.mode, kind);
    }
}
