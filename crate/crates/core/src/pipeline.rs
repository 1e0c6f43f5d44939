//! Combined reduction: topology, electrical coupling with feature
//! refinement, then market clustering, each measured against the reference
//! OPF with the dispatch and flow error metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_io::LoadProfile;
use crate::dcopf::{solve_grid, OpfError, OpfSolution, OpfStatus, DEFAULT_TOLERANCE};
use crate::features::{add_refinement_features, identify, FeatureConfig, FeatureSet};
use crate::grid_model::{cycle_count, BranchId, BusId, GenId, Grid};
use crate::reduction::{apply_all, BusMapping, MappingError, ReductionError};
use crate::selection::{
    find_critical_generators, max_corridor_impedance, select_electrical_below, select_market,
    select_topological, SelectionConfig, SelectionError,
};

/// Denominators at or below this many MW count as zero; interior-point
/// solutions leave residues of this order on idle generators.
pub const DEGENERATE_MW: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("degenerate reference dispatch")]
    DegenerateDispatch,
    #[error("degenerate reference flow")]
    DegenerateFlow,
    #[error("generator {0} missing from one solution")]
    MissingGenerator(GenId),
    #[error("branch {0} missing from one solution")]
    MissingBranch(BranchId),
}

/// Σ|P̃ᵢ − Pᵢ| / Σ|Pᵢ| over the shared generator set.
pub fn dispatch_error(original: &OpfSolution, reduced: &OpfSolution) -> Result<f64, MetricError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (g, p) in &original.dispatch {
        let q = reduced.dispatch.get(g).ok_or(MetricError::MissingGenerator(*g))?;
        num += (q - p).abs();
        den += p.abs();
    }
    if let Some(g) = reduced.dispatch.keys().find(|g| !original.dispatch.contains_key(g)) {
        return Err(MetricError::MissingGenerator(*g));
    }
    if den <= DEGENERATE_MW {
        return Err(MetricError::DegenerateDispatch);
    }
    Ok(num / den)
}

/// Σ|p̃ₖ − pₖ| / Σ pₖ over the retained branches, with flow magnitudes.
pub fn flow_error(
    original: &OpfSolution,
    reduced: &OpfSolution,
    retained: &BTreeSet<BranchId>,
) -> Result<f64, MetricError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for k in retained {
        let p = original.flow.get(k).ok_or(MetricError::MissingBranch(*k))?.abs();
        let q = reduced.flow.get(k).ok_or(MetricError::MissingBranch(*k))?.abs();
        num += (q - p).abs();
        den += p;
    }
    if den <= DEGENERATE_MW {
        return Err(MetricError::DegenerateFlow);
    }
    Ok(num / den)
}

/// Which stages run. Refinement only acts inside the electrical stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSet {
    pub topology: bool,
    pub electrical: bool,
    pub refinement: bool,
    pub market: bool,
}

impl StageSet {
    pub const ALL: StageSet = StageSet {
        topology: true,
        electrical: true,
        refinement: true,
        market: true,
    };
    pub const NONE: StageSet = StageSet {
        topology: false,
        electrical: false,
        refinement: false,
        market: false,
    };
}

impl Default for StageSet {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tau: f64,
    pub delta: f64,
    pub theta: usize,
    pub critical_limit_mw: f64,
    pub small_fraction: f64,
    pub loading_threshold: f64,
    pub length_threshold_km: f64,
    pub max_refinement_rounds: usize,
    pub tolerance: f64,
    pub stages: StageSet,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            delta: 0.08,
            theta: 4,
            critical_limit_mw: 10.0,
            small_fraction: 0.01,
            loading_threshold: 0.95,
            length_threshold_km: 50.0,
            max_refinement_rounds: 5,
            tolerance: DEFAULT_TOLERANCE,
            stages: StageSet::ALL,
        }
    }
}

impl PipelineConfig {
    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            small_fraction: self.small_fraction,
            tau: self.tau,
            delta: self.delta,
        }
    }

    pub fn features(&self) -> FeatureConfig {
        FeatureConfig {
            loading_threshold: self.loading_threshold,
            length_threshold_km: self.length_threshold_km,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        self.selection()
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        if !(self.critical_limit_mw >= 0.0) {
            return bad(format!("critical limit must be nonnegative, got {}", self.critical_limit_mw));
        }
        if !(self.loading_threshold > 0.0 && self.loading_threshold.is_finite()) {
            return bad(format!("loading threshold must be positive, got {}", self.loading_threshold));
        }
        if !(self.length_threshold_km >= 0.0) {
            return bad(format!("length threshold must be nonnegative, got {}", self.length_threshold_km));
        }
        if self.max_refinement_rounds == 0 {
            return bad("max refinement rounds must be positive".into());
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return bad(format!("tolerance must lie in (0, 1), got {}", self.tolerance));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Reference,
    Topology,
    Electrical,
    Market,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Reference => "reference",
            Stage::Topology => "topology",
            Stage::Electrical => "electrical",
            Stage::Market => "market",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{stage} stage: {source}")]
    Opf { stage: Stage, source: OpfError },
    #[error("{stage} stage: OPF {status}")]
    Infeasible { stage: Stage, status: OpfStatus },
    #[error("{stage} stage: {source}")]
    Reduction { stage: Stage, source: ReductionError },
    #[error("{stage} stage: {source}")]
    Selection { stage: Stage, source: SelectionError },
    #[error("{stage} stage: {source}")]
    Metric { stage: Stage, source: MetricError },
    #[error("{stage} stage: {source}")]
    Mapping { stage: Stage, source: MappingError },
}

impl PipelineError {
    pub fn is_infeasible(&self) -> bool {
        matches!(self, PipelineError::Infeasible { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub buses: usize,
    pub branches: usize,
    pub cycles: usize,
}

impl Counts {
    pub fn of(grid: &Grid) -> Self {
        Self {
            buses: grid.buses.len(),
            branches: grid.branches.len(),
            cycles: cycle_count(grid),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: Stage,
    pub buses_removed: usize,
    pub branches_removed: usize,
    pub cycles_removed: usize,
    pub eps_disp: f64,
    pub eps_flow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRound {
    pub round: usize,
    pub critical_generators: Vec<GenId>,
    /// Feature count after the round's augmentation.
    pub feature_count: usize,
    pub eps_disp: f64,
    pub eps_flow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub case: String,
    pub config: PipelineConfig,
    pub initial: Counts,
    pub final_counts: Counts,
    pub stages: Vec<StageEntry>,
    pub refinement_rounds: Vec<RefinementRound>,
    pub eps_disp: f64,
    pub eps_flow: f64,
    pub features: FeatureSet,
    /// LMPs the market stage clustered on.
    pub market_lmps: BTreeMap<BusId, f64>,
    pub mapping: BusMapping,
}

impl ReductionReport {
    pub fn buses_removed(&self) -> usize {
        self.initial.buses - self.final_counts.buses
    }

    pub fn branches_removed(&self) -> usize {
        self.initial.branches - self.final_counts.branches
    }

    pub fn cycles_removed(&self) -> usize {
        self.initial.cycles - self.final_counts.cycles
    }

    pub fn bus_reduction(&self) -> f64 {
        self.buses_removed() as f64 / self.initial.buses as f64
    }
}

/// Reference solution and features shared by every run on one grid.
#[derive(Debug, Clone)]
pub struct Reference {
    pub solution: OpfSolution,
    pub features: FeatureSet,
}

fn optimal(grid: &Grid, stage: Stage, tolerance: f64) -> Result<OpfSolution, PipelineError> {
    let sol = solve_grid(grid, tolerance).map_err(|source| PipelineError::Opf { stage, source })?;
    if !sol.is_optimal() {
        return Err(PipelineError::Infeasible {
            stage,
            status: sol.status,
        });
    }
    Ok(sol)
}

pub fn reference(grid: &Grid, config: &PipelineConfig) -> Result<Reference, PipelineError> {
    let solution = optimal(grid, Stage::Reference, config.tolerance)?;
    let features = identify(grid, &solution, &config.features());
    Ok(Reference { solution, features })
}

pub fn run_pipeline(grid: &Grid, config: &PipelineConfig) -> Result<(Grid, ReductionReport), PipelineError> {
    config.validate()?;
    let reference = reference(grid, config)?;
    run_with_reference(grid, config, &reference)
}

struct Runner<'a> {
    original: &'a Grid,
    reference: &'a OpfSolution,
}

impl Runner<'_> {
    fn errors(&self, grid: &Grid, sol: &OpfSolution, stage: Stage) -> Result<(f64, f64), PipelineError> {
        let metric = |source| PipelineError::Metric { stage, source };
        let d = dispatch_error(self.reference, sol).map_err(metric)?;
        let f = flow_error(self.reference, sol, &grid.branch_ids()).map_err(metric)?;
        Ok((d, f))
    }

    /// Electrical reduction to a fixed point under an absolute threshold.
    fn electrical(
        &self,
        start: &Grid,
        features: &FeatureSet,
        threshold: f64,
    ) -> Result<(Grid, BusMapping), PipelineError> {
        let stage = Stage::Electrical;
        let mut grid = start.clone();
        let mut mapping = BusMapping::identity(start.bus_ids());
        loop {
            let picked = select_electrical_below(&grid, features, threshold);
            if picked.is_empty() {
                return Ok((grid, mapping));
            }
            let (next, step) =
                apply_all(&grid, &picked, features).map_err(|source| PipelineError::Reduction { stage, source })?;
            if next.buses.len() == grid.buses.len() {
                return Ok((grid, mapping));
            }
            mapping = mapping
                .compose(&step)
                .map_err(|source| PipelineError::Mapping { stage, source })?;
            grid = next;
        }
    }
}

fn log_selection(stage: Stage, picked: &[crate::reduction::Subgrid]) {
    let largest = picked.iter().map(|s| s.buses.len()).max().unwrap_or(0);
    log::info!("{stage}: {} subgrids selected, largest has {largest} buses", picked.len());
}

fn entry(stage: Stage, before: &Grid, after: &Grid, errors: (f64, f64)) -> StageEntry {
    let (b, a) = (Counts::of(before), Counts::of(after));
    log::info!(
        "{stage}: {} -> {} buses, eps_disp {:.6}, eps_flow {:.6}",
        b.buses,
        a.buses,
        errors.0,
        errors.1
    );
    StageEntry {
        stage,
        buses_removed: b.buses - a.buses,
        branches_removed: b.branches - a.branches,
        cycles_removed: b.cycles.saturating_sub(a.cycles),
        eps_disp: errors.0,
        eps_flow: errors.1,
    }
}

/// Runs the stages against an already computed reference.
pub fn run_with_reference(
    grid: &Grid,
    config: &PipelineConfig,
    reference: &Reference,
) -> Result<(Grid, ReductionReport), PipelineError> {
    config.validate()?;
    let runner = Runner {
        original: grid,
        reference: &reference.solution,
    };
    let mut features = reference.features.clone();
    let mut current = grid.clone();
    let mut mapping = BusMapping::identity(grid.bus_ids());
    let mut stages = Vec::new();
    let mut rounds = Vec::new();
    let mut last = reference.solution.clone();
    let mut market_lmps = BTreeMap::new();
    let compose = |m: &BusMapping, step: &BusMapping, stage| {
        m.compose(step).map_err(|source| PipelineError::Mapping { stage, source })
    };

    if config.stages.topology {
        let stage = Stage::Topology;
        let limit = config.selection().small_limit(current.buses.len());
        let picked = select_topological(&current, &features, limit);
        log_selection(stage, &picked);
        let (next, step) =
            apply_all(&current, &picked, &features).map_err(|source| PipelineError::Reduction { stage, source })?;
        last = optimal(&next, stage, config.tolerance)?;
        stages.push(entry(stage, &current, &next, runner.errors(&next, &last, stage)?));
        mapping = compose(&mapping, &step, stage)?;
        current = next;
    }

    if config.stages.electrical {
        let stage = Stage::Electrical;
        let base = current.clone();
        let threshold = config.tau * max_corridor_impedance(&base);
        let (mut reduced, mut step) = runner.electrical(&base, &features, threshold)?;
        last = optimal(&reduced, stage, config.tolerance)?;
        if config.stages.refinement {
            for round in 1..=config.max_refinement_rounds {
                let critical = find_critical_generators(&reference.solution, &last, config.critical_limit_mw)
                    .map_err(|source| PipelineError::Selection { stage, source })?;
                if critical.is_empty() {
                    break;
                }
                // Hops count on the original model; buses gone after topology reduction are dropped.
                let grown =
                    add_refinement_features(runner.original, &features, &critical, config.theta).restricted_to(&base);
                let grew = grown.len() > features.len();
                features = grown;
                if grew {
                    (reduced, step) = runner.electrical(&base, &features, threshold)?;
                    last = optimal(&reduced, stage, config.tolerance)?;
                }
                let (d, f) = runner.errors(&reduced, &last, stage)?;
                rounds.push(RefinementRound {
                    round,
                    critical_generators: critical.into_iter().collect(),
                    feature_count: features.len(),
                    eps_disp: d,
                    eps_flow: f,
                });
                if !grew {
                    break;
                }
            }
        }
        stages.push(entry(stage, &base, &reduced, runner.errors(&reduced, &last, stage)?));
        mapping = compose(&mapping, &step, stage)?;
        current = reduced;
    }

    if config.stages.market {
        let stage = Stage::Market;
        let picked = select_market(&current, &features, &last, config.delta);
        log_selection(stage, &picked);
        market_lmps = last.lmp.clone();
        let (next, step) =
            apply_all(&current, &picked, &features).map_err(|source| PipelineError::Reduction { stage, source })?;
        last = optimal(&next, stage, config.tolerance)?;
        stages.push(entry(stage, &current, &next, runner.errors(&next, &last, stage)?));
        mapping = compose(&mapping, &step, stage)?;
        current = next;
    }

    let (eps_disp, eps_flow) = stages.last().map_or((0.0, 0.0), |s| (s.eps_disp, s.eps_flow));
    let report = ReductionReport {
        case: grid.name.clone(),
        config: *config,
        initial: Counts::of(grid),
        final_counts: Counts::of(&current),
        stages,
        refinement_rounds: rounds,
        eps_disp,
        eps_flow,
        features,
        market_lmps,
        mapping,
    };
    Ok((current, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    Tau,
    Delta,
    Theta,
}

impl SweepParameter {
    /// Checks `value` against the parameter's domain.
    pub fn check(self, value: f64) -> Result<(), String> {
        let ok = match self {
            SweepParameter::Tau => (0.0..=1.0).contains(&value),
            SweepParameter::Delta => value > 0.0 && value.is_finite(),
            SweepParameter::Theta => value >= 0.0 && value.fract() == 0.0 && value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{value} is outside the domain of {self:?}"))
        }
    }

    fn apply(self, config: &PipelineConfig, value: f64) -> PipelineConfig {
        let mut c = *config;
        match self {
            SweepParameter::Tau => c.tau = value,
            SweepParameter::Delta => c.delta = value,
            SweepParameter::Theta => c.theta = value as usize,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub outcome: Result<SweepCounts, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCounts {
    pub buses_removed: usize,
    pub branches_removed: usize,
    pub cycles_removed: usize,
    pub eps_disp: f64,
    pub eps_flow: f64,
}

impl From<&ReductionReport> for SweepCounts {
    fn from(r: &ReductionReport) -> Self {
        Self {
            buses_removed: r.buses_removed(),
            branches_removed: r.branches_removed(),
            cycles_removed: r.cycles_removed(),
            eps_disp: r.eps_disp,
            eps_flow: r.eps_flow,
        }
    }
}

/// One pipeline run per value, rows in input order. A failing row records
/// its error and the sweep continues.
pub fn sweep(
    grid: &Grid,
    config: &PipelineConfig,
    parameter: SweepParameter,
    values: &[f64],
) -> Result<Vec<SweepRow>, PipelineError> {
    config.validate()?;
    for v in values {
        parameter.check(*v).map_err(PipelineError::InvalidConfig)?;
    }
    let reference = reference(grid, config)?;
    Ok(values
        .par_iter()
        .map(|&value| {
            let c = parameter.apply(config, value);
            let outcome = run_with_reference(grid, &c, &reference)
                .map(|(_, r)| SweepCounts::from(&r))
                .map_err(|e| e.to_string());
            SweepRow { value, outcome }
        })
        .collect())
}

/// CSV `value,buses_removed,branches_removed,cycles_removed,eps_disp,eps_flow`;
/// failed rows leave the measured fields empty.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,buses_removed,branches_removed,cycles_removed,eps_disp,eps_flow\n");
    for row in rows {
        match &row.outcome {
            Ok(c) => out.push_str(&format!(
                "{:?},{},{},{},{:?},{:?}\n",
                row.value, c.buses_removed, c.branches_removed, c.cycles_removed, c.eps_disp, c.eps_flow
            )),
            Err(_) => out.push_str(&format!("{:?},,,,,\n", row.value)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HourStatus {
    Ok,
    OriginalInfeasible,
    ReducedInfeasible,
    Degenerate,
}

impl fmt::Display for HourStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HourStatus::Ok => "ok",
            HourStatus::OriginalInfeasible => "original_infeasible",
            HourStatus::ReducedInfeasible => "reduced_infeasible",
            HourStatus::Degenerate => "degenerate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    /// One-based position in the profile.
    pub hour: usize,
    pub factor: f64,
    pub status: HourStatus,
    pub eps_disp: Option<f64>,
    pub eps_flow: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("mapping does not match the cases: {0}")]
    InconsistentMapping(String),
    #[error("reduced case is not derived from the original: {0}")]
    NotDerived(String),
}

fn check_derivation(original: &Grid, reduced: &Grid, mapping: &BusMapping) -> Result<(), VerifyError> {
    let bad = |m: String| Err(VerifyError::InconsistentMapping(m));
    if mapping.originals() != original.bus_ids() {
        return bad("mapped buses differ from the original case's buses".into());
    }
    if mapping.retained() != reduced.bus_ids() {
        return bad("retained buses differ from the reduced case's buses".into());
    }
    if !mapping.is_idempotent() {
        return bad("a retained bus does not map to itself".into());
    }
    if !reduced.branch_ids().is_subset(&original.branch_ids()) {
        return Err(VerifyError::NotDerived("reduced case has branches the original lacks".into()));
    }
    if reduced.generator_ids() != original.generator_ids() {
        return Err(VerifyError::NotDerived("generator sets differ".into()));
    }
    Ok(())
}

/// Scales every load by each profile factor in both models and compares
/// their OPFs. Failing hours are flagged in their row.
pub fn verify_scenarios(
    original: &Grid,
    reduced: &Grid,
    mapping: &BusMapping,
    profile: &LoadProfile,
    tolerance: f64,
) -> Result<Vec<ScenarioRow>, VerifyError> {
    check_derivation(original, reduced, mapping)?;
    let retained = reduced.branch_ids();
    Ok(profile
        .scale_factors
        .par_iter()
        .enumerate()
        .map(|(i, &factor)| {
            let row = |status, d, f| ScenarioRow {
                hour: i + 1,
                factor,
                status,
                eps_disp: d,
                eps_flow: f,
            };
            let solve = |g: &Grid| solve_grid(&g.with_scaled_loads(factor), tolerance).ok().filter(|s| s.is_optimal());
            let Some(a) = solve(original) else {
                return row(HourStatus::OriginalInfeasible, None, None);
            };
            let Some(b) = solve(reduced) else {
                return row(HourStatus::ReducedInfeasible, None, None);
            };
            match (dispatch_error(&a, &b), flow_error(&a, &b, &retained)) {
                (Ok(d), Ok(f)) => row(HourStatus::Ok, Some(d), Some(f)),
                (d, f) => row(HourStatus::Degenerate, d.ok(), f.ok()),
            }
        })
        .collect())
}

/// CSV `hour,status,eps_disp,eps_flow`; unavailable errors are empty.
pub fn scenarios_to_csv(rows: &[ScenarioRow]) -> String {
    let mut out = String::from("hour,status,eps_disp,eps_flow\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.hour, r.status, cell(r.eps_disp), cell(r.eps_flow)));
    }
    out
}
