mod support;

use std::collections::{BTreeMap, BTreeSet};

use gridreduce::case_io::write_report;
use gridreduce::pipeline::{
    dispatch_error, flow_error, sweep, verify_scenarios, HourStatus, MetricError, PipelineError, Stage, StageSet, SweepParameter,
    VerifyError,
};
use gridreduce::{
    run_pipeline, solve_grid, BranchId, BusMapping, GenId, Grid, LoadProfile, OpfSolution, OpfStatus,
    PipelineConfig,
};
use proptest::prelude::*;
use support::{random_grid, Shape};

fn solution(dispatch: &[f64], flow: &[f64]) -> OpfSolution {
    OpfSolution {
        dispatch: dispatch.iter().enumerate().map(|(i, p)| (GenId(i as u32 + 1), *p)).collect(),
        flow: flow.iter().enumerate().map(|(i, p)| (BranchId(i as u32 + 1), *p)).collect(),
        lmp: BTreeMap::new(),
        objective: 0.0,
        status: OpfStatus::Optimal,
    }
}

fn profile(factors: &[f64]) -> LoadProfile {
    LoadProfile {
        name: "test".into(),
        scale_factors: factors.to_vec(),
    }
}

/// Meshed grid with congestion so that prices differ.
fn random_testbed(seed: u64, buses: usize) -> Grid {
    let mut grid = random_grid(
        seed,
        Shape {
            buses,
            extra: buses / 3,
            generators: 4,
            rated: 0.3,
            conventional: 0.25,
            ..Shape::default()
        },
    );
    for br in grid.branches.iter_mut() {
        if let Some(r) = br.rating.as_mut() {
            *r /= 2.0;
        }
    }
    grid
}

/// First feasible testbed at or after `seed`.
fn testbed(seed: u64, buses: usize) -> Grid {
    (seed..)
        .map(|s| random_testbed(s, buses))
        .find(|g| solve_grid(g, 1e-6).is_ok_and(|s| s.is_optimal()))
        .unwrap()
}

/// Collapsing every retained branch leaves no flow to compare.
fn undefined(e: &PipelineError) -> bool {
    e.is_infeasible() || matches!(e, PipelineError::Metric { source: MetricError::DegenerateFlow, .. })
}

#[test]
fn metric_hand_values() {
    let a = solution(&[100.0, 100.0], &[50.0, 50.0]);
    let b = solution(&[90.0, 110.0], &[40.0, -55.0]);
    assert_eq!(dispatch_error(&a, &b).unwrap(), 0.10);
    let retained = BTreeSet::from([BranchId(1), BranchId(2)]);
    assert_eq!(flow_error(&a, &b, &retained).unwrap(), 0.15);
    assert_eq!(dispatch_error(&a, &a).unwrap(), 0.0);
    assert_eq!(flow_error(&a, &a, &retained).unwrap(), 0.0);
}

#[test]
fn metric_degenerate_denominators() {
    let zero = solution(&[0.0, 0.0], &[0.0, 0.0]);
    assert_eq!(dispatch_error(&zero, &zero), Err(MetricError::DegenerateDispatch));
    let retained = BTreeSet::from([BranchId(1)]);
    assert_eq!(flow_error(&zero, &zero, &retained), Err(MetricError::DegenerateFlow));
    let short = solution(&[1.0], &[]);
    assert!(matches!(dispatch_error(&solution(&[1.0, 2.0], &[]), &short), Err(MetricError::MissingGenerator(_))));
}

#[test]
fn stage_toggles() {
    let grid = testbed(7, 30);
    let none = PipelineConfig { stages: StageSet::NONE, ..PipelineConfig::default() };
    let (same, report) = run_pipeline(&grid, &none).unwrap();
    assert_eq!(same, grid);
    assert!(report.stages.is_empty());
    assert_eq!((report.eps_disp, report.eps_flow), (0.0, 0.0));
    assert_eq!(report.mapping, BusMapping::identity(grid.bus_ids()));

    let topo = PipelineConfig { stages: StageSet { topology: true, ..StageSet::NONE }, ..PipelineConfig::default() };
    let (_, report) = run_pipeline(&grid, &topo).unwrap();
    assert_eq!(report.stages.len(), 1);
    assert_eq!(report.stages[0].stage, Stage::Topology);
    let (_, full) = run_pipeline(&grid, &PipelineConfig::default()).unwrap();
    assert_eq!(full.stages[0], report.stages[0]);

    let idle = PipelineConfig { tau: 0.0, delta: 1e-9, ..PipelineConfig::default() };
    let (_, report) = run_pipeline(&grid, &idle).unwrap();
    let first = &report.stages[0];
    assert_eq!(report.stages[1].buses_removed, 0);
    // Exact price ties still cluster at any positive delta.
    for later in &report.stages[1..] {
        assert!((later.eps_disp - first.eps_disp).abs() < 1e-6 && (later.eps_flow - first.eps_flow).abs() < 1e-6);
    }
}

#[test]
fn single_value_sweep_matches_pipeline() {
    let grid = testbed(11, 30);
    let config = PipelineConfig::default();
    let (_, report) = run_pipeline(&grid, &config).unwrap();
    let rows = sweep(&grid, &config, SweepParameter::Tau, &[config.tau]).unwrap();
    let c = rows[0].outcome.clone().unwrap();
    assert_eq!(
        (c.buses_removed, c.branches_removed, c.cycles_removed, c.eps_disp, c.eps_flow),
        (
            report.buses_removed(),
            report.branches_removed(),
            report.cycles_removed(),
            report.eps_disp,
            report.eps_flow
        )
    );
}

#[test]
fn sweep_rejects_out_of_domain_values() {
    let grid = testbed(3, 10);
    assert!(sweep(&grid, &PipelineConfig::default(), SweepParameter::Tau, &[0.5, 1.5]).is_err());
    assert!(sweep(&grid, &PipelineConfig::default(), SweepParameter::Delta, &[0.0]).is_err());
    assert!(sweep(&grid, &PipelineConfig::default(), SweepParameter::Theta, &[1.5]).is_err());
}

#[test]
fn scenario_identity_and_zero_hours() {
    let grid = testbed(5, 30);
    let (reduced, report) = run_pipeline(&grid, &PipelineConfig::default()).unwrap();
    let rows = verify_scenarios(&grid, &reduced, &report.mapping, &profile(&[1.0, 0.0]), 1e-6).unwrap();
    assert_eq!(rows[0].status, HourStatus::Ok);
    assert_eq!(rows[0].eps_disp, Some(report.eps_disp));
    assert_eq!(rows[0].eps_flow, Some(report.eps_flow));
    assert_eq!(rows[1].status, HourStatus::Degenerate);
    assert_eq!(rows[1].eps_disp, None);
}

#[test]
fn scenario_rejects_foreign_mapping() {
    let grid = testbed(5, 20);
    let (reduced, _) = run_pipeline(&grid, &PipelineConfig::default()).unwrap();
    let wrong = BusMapping::identity(grid.bus_ids());
    let err = verify_scenarios(&grid, &reduced, &wrong, &profile(&[1.0]), 1e-6);
    if reduced.buses.len() < grid.buses.len() {
        assert!(matches!(err, Err(VerifyError::InconsistentMapping(_))));
    }
    let mut other = reduced.clone();
    other.generators.pop();
    let (_, report) = run_pipeline(&grid, &PipelineConfig::default()).unwrap();
    assert!(verify_scenarios(&grid, &other, &report.mapping, &profile(&[1.0]), 1e-6).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let grid = testbed(1, 10);
    for c in [
        PipelineConfig { tau: 1.5, ..PipelineConfig::default() },
        PipelineConfig { delta: 0.0, ..PipelineConfig::default() },
        PipelineConfig { small_fraction: 0.0, ..PipelineConfig::default() },
        PipelineConfig { max_refinement_rounds: 0, ..PipelineConfig::default() },
        PipelineConfig { tolerance: 0.0, ..PipelineConfig::default() },
    ] {
        assert!(run_pipeline(&grid, &c).is_err(), "{c:?}");
    }
}

fn random_config(seed: u64) -> PipelineConfig {
    let pick = |k: u64, n: u64| (seed / k) % n;
    PipelineConfig {
        tau: [0.0, 0.02, 0.05, 0.1, 0.3][pick(1, 5) as usize],
        delta: [0.01, 0.08, 0.5, 5.0][pick(5, 4) as usize],
        theta: pick(20, 4) as usize,
        critical_limit_mw: [1.0, 10.0][pick(80, 2) as usize],
        small_fraction: [0.05, 0.2][pick(160, 2) as usize],
        ..PipelineConfig::default()
    }
}

proptest! {
    #![proptest_config(support::cases(200))]

    #[test]
    fn pipeline_invariants(seed in any::<u64>(), buses in 8usize..30) {
        let grid = random_testbed(seed, buses);
        let config = random_config(seed);
        let outcome = run_pipeline(&grid, &config);
        prop_assume!(!matches!(&outcome, Err(e) if undefined(e)));
        let (reduced, report) = outcome.unwrap();

        prop_assert!(reduced.bus_ids().is_subset(&grid.bus_ids()));
        prop_assert!(reduced.branch_ids().is_subset(&grid.branch_ids()));
        prop_assert_eq!(reduced.generator_ids(), grid.generator_ids());

        prop_assert!(report.features.feature_buses().is_subset(&reduced.bus_ids()));
        prop_assert!(report.features.feature_branches().is_subset(&reduced.branch_ids()));

        prop_assert_eq!(reduced.total_load(), grid.total_load());
        prop_assert_eq!(reduced.total_capacity(), grid.total_capacity());
        prop_assert_eq!(reduced.total_shunt_susceptance(), grid.total_shunt_susceptance());

        let m = &report.mapping;
        prop_assert_eq!(m.originals(), grid.bus_ids());
        prop_assert_eq!(m.retained(), reduced.bus_ids());
        prop_assert!(m.is_idempotent());
        for br in &reduced.branches {
            let before = grid.branch(br.id).unwrap();
            prop_assert_eq!(m.get(before.src_bus), Some(br.src_bus));
            prop_assert_eq!(m.get(before.dst_bus), Some(br.dst_bus));
        }

        let sum = |f: fn(&gridreduce::pipeline::StageEntry) -> usize| report.stages.iter().map(f).sum::<usize>();
        prop_assert_eq!(sum(|s| s.buses_removed), report.initial.buses - report.final_counts.buses);
        prop_assert_eq!(sum(|s| s.branches_removed), report.initial.branches - report.final_counts.branches);
        prop_assert_eq!(report.final_counts.buses, reduced.buses.len());
        prop_assert!(report.eps_disp >= 0.0 && report.eps_flow >= 0.0);
    }

    #[test]
    fn pipeline_is_deterministic(seed in any::<u64>()) {
        let grid = random_testbed(seed, 20);
        let config = random_config(seed);
        let a = run_pipeline(&grid, &config);
        let b = run_pipeline(&grid, &config);
        match (a, b) {
            (Ok((ga, ra)), Ok((gb, rb))) => {
                prop_assert_eq!(gridreduce::write_case(&ga), gridreduce::write_case(&gb));
                prop_assert_eq!(write_report(&ra), write_report(&rb));
            }
            (Err(ea), Err(eb)) => prop_assert_eq!(ea, eb),
            (a, b) => prop_assert!(false, "runs disagree: {:?} vs {:?}", a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn self_comparison_has_zero_error(seed in any::<u64>()) {
        let grid = random_testbed(seed, 15);
        let s = solve_grid(&grid, 1e-6).unwrap();
        prop_assume!(s.is_optimal());
        prop_assert_eq!(dispatch_error(&s, &s).unwrap(), 0.0);
        if let Ok(f) = flow_error(&s, &s, &grid.branch_ids()) {
            prop_assert_eq!(f, 0.0);
        }
    }

    #[test]
    fn electrical_sweep_is_monotone_in_tau(seed in any::<u64>()) {
        let grid = random_grid(seed, Shape { buses: 100, extra: 30, generators: 8, rated: 0.3, ..Shape::default() });
        let config = PipelineConfig {
            stages: StageSet { refinement: false, market: false, ..StageSet::ALL },
            ..PipelineConfig::default()
        };
        let taus = [0.0, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0];
        let rows = sweep(&grid, &config, SweepParameter::Tau, &taus);
        prop_assume!(!matches!(&rows, Err(e) if e.is_infeasible()));
        let rows = rows.unwrap();
        let removed: Vec<usize> = rows.iter().filter_map(|r| r.outcome.as_ref().ok()).map(|c| c.buses_removed).collect();
        prop_assume!(removed.len() == taus.len());
        prop_assert!(removed.windows(2).all(|w| w[0] <= w[1]), "{:?}", removed);
    }

    #[test]
    fn market_sweep_is_monotone_in_delta(seed in any::<u64>()) {
        let grid = random_grid(seed, Shape { buses: 100, extra: 30, generators: 8, rated: 0.3, ..Shape::default() });
        let config = PipelineConfig {
            stages: StageSet { electrical: false, refinement: false, ..StageSet::ALL },
            ..PipelineConfig::default()
        };
        let deltas = [0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 50.0];
        let rows = sweep(&grid, &config, SweepParameter::Delta, &deltas);
        prop_assume!(!matches!(&rows, Err(e) if e.is_infeasible()));
        let rows = rows.unwrap();
        let removed: Vec<usize> = rows.iter().filter_map(|r| r.outcome.as_ref().ok()).map(|c| c.buses_removed).collect();
        prop_assume!(removed.len() == deltas.len());
        prop_assert!(removed.windows(2).all(|w| w[0] <= w[1]), "{:?}", removed);
    }
}

#[test]
fn scenario_rows_follow_profile() {
    let grid = testbed(9, 25);
    let (reduced, report) = run_pipeline(&grid, &PipelineConfig::default()).unwrap();
    let factors: Vec<f64> = (0..24).map(|h| 0.6 + 0.4 * (h as f64 / 23.0)).collect();
    let rows = verify_scenarios(&grid, &reduced, &report.mapping, &profile(&factors), 1e-6).unwrap();
    assert_eq!(rows.len(), 24);
    assert!(rows.iter().enumerate().all(|(i, r)| r.hour == i + 1 && r.factor == factors[i]));
    assert!(rows.iter().all(|r| r.status != HourStatus::OriginalInfeasible || r.eps_disp.is_none()));
}

