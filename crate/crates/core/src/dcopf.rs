//! DC optimal power flow.
//!
//! Lossless active-power model: bus angles `θ` and generator outputs `P`
//! are the variables, branch flow is `b_k (θ_src − θ_dst)` with
//! `b_k = x_k / (r_k² + x_k²)` expressed in MW/rad at the source-side base
//! voltage, and the objective is the linear generation cost. Tap ratios and
//! phase shifts are ignored. Shunt conductance is served as constant demand
//! at nominal voltage.
//!
//! The LP is handed to Clarabel's interior-point method. Nodal prices are
//! the duals of the balance rows; under degenerate costs the returned
//! dispatch is the interior-point limit, which is deterministic for a given
//! problem.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid_model::{BranchId, BranchKind, BusId, GenId, Grid};

pub const DEFAULT_TOLERANCE: f64 = 1e-6;

/// Internal power unit for conditioning, in MW.
const POWER_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OpfError {
    #[error("zero-reactance branch {0}")]
    ZeroReactance(BranchId),
    #[error("converter branch {0} has no DC model")]
    Converter(BranchId),
    #[error("grid has no reference bus")]
    NoReference,
    #[error("grid has {0} reference buses")]
    MultipleReference(usize),
    #[error("branch {branch} refers to unknown bus {bus}")]
    UnknownBus { branch: BranchId, bus: BusId },
    #[error("generator {gen} refers to unknown bus {bus}")]
    UnknownGeneratorBus { gen: GenId, bus: BusId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpfStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

impl fmt::Display for OpfStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpfStatus::Optimal => "optimal",
            OpfStatus::Infeasible => "infeasible",
            OpfStatus::Unbounded => "unbounded",
            OpfStatus::NumericalFailure => "numerical_failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSolution {
    /// Generator output in MW.
    pub dispatch: BTreeMap<GenId, f64>,
    /// Signed flow from source to destination terminal in MW. The lossless
    /// model carries the same flow at both terminals, so the branch flow
    /// magnitude used by the error metrics is `flow.abs()`.
    pub flow: BTreeMap<BranchId, f64>,
    /// Dual of the bus balance row, currency per MWh.
    pub lmp: BTreeMap<BusId, f64>,
    /// Currency per hour, including constant cost terms.
    pub objective: f64,
    pub status: OpfStatus,
}

impl OpfSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == OpfStatus::Optimal
    }

    fn failed(status: OpfStatus) -> Self {
        Self {
            dispatch: BTreeMap::new(),
            flow: BTreeMap::new(),
            lmp: BTreeMap::new(),
            objective: f64::NAN,
            status,
        }
    }
}

#[derive(Debug, Clone)]
struct FlowTerm {
    id: BranchId,
    src: usize,
    dst: usize,
    /// MW per radian.
    susceptance: f64,
    rating: Option<f64>,
}

#[derive(Debug, Clone)]
struct GenTerm {
    id: GenId,
    bus: usize,
    p_min: f64,
    p_max: f64,
    cost: f64,
}

/// Structured LP: one angle variable per bus (the reference angle pinned to
/// zero), one output variable per generator, one balance row per bus and a
/// pair of limit rows per rated branch.
#[derive(Debug, Clone)]
pub struct OpfProblem {
    bus_ids: Vec<BusId>,
    reference: usize,
    demand: Vec<f64>,
    gens: Vec<GenTerm>,
    flows: Vec<FlowTerm>,
    constant_cost: f64,
}

impl OpfProblem {
    pub fn num_angle_vars(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn num_generator_vars(&self) -> usize {
        self.gens.len()
    }

    pub fn num_vars(&self) -> usize {
        self.num_angle_vars() + self.num_generator_vars()
    }

    pub fn num_balance_rows(&self) -> usize {
        self.bus_ids.len()
    }

    /// Rated branches; each contributes an upper and a lower limit row.
    pub fn num_flow_limit_pairs(&self) -> usize {
        self.flows.iter().filter(|f| f.rating.is_some()).count()
    }

    pub fn reference_bus(&self) -> BusId {
        self.bus_ids[self.reference]
    }
}

pub fn build_problem(grid: &Grid) -> Result<OpfProblem, OpfError> {
    let refs = grid.reference_buses();
    let reference_id = match refs.len() {
        0 => return Err(OpfError::NoReference),
        1 => refs[0],
        n => return Err(OpfError::MultipleReference(n)),
    };
    let index = grid.bus_index();
    let bus_ids: Vec<BusId> = grid.buses.iter().map(|b| b.id).collect();
    let reference = index[&reference_id];

    let mut demand: Vec<f64> = grid
        .buses
        .iter()
        .map(|b| b.shunt_conductance * b.base_kv * b.base_kv)
        .collect();
    for load in &grid.loads {
        if let Some(&i) = index.get(&load.bus) {
            demand[i] += load.p_demand;
        }
    }

    let mut flows = Vec::with_capacity(grid.branches.len());
    for br in &grid.branches {
        if br.kind == BranchKind::Converter {
            return Err(OpfError::Converter(br.id));
        }
        let lookup = |bus: BusId| {
            index
                .get(&bus)
                .copied()
                .ok_or(OpfError::UnknownBus { branch: br.id, bus })
        };
        let (src, dst) = (lookup(br.src_bus)?, lookup(br.dst_bus)?);
        let (r, x) = (br.series_resistance, br.series_reactance);
        if x == 0.0 && (br.kind == BranchKind::Line || r == 0.0) {
            return Err(OpfError::ZeroReactance(br.id));
        }
        let kv = grid.buses[src].base_kv;
        flows.push(FlowTerm {
            id: br.id,
            src,
            dst,
            susceptance: kv * kv * x / (r * r + x * x),
            rating: br.rating,
        });
    }

    let mut gens = Vec::with_capacity(grid.generators.len());
    for g in &grid.generators {
        let bus = *index
            .get(&g.bus)
            .ok_or(OpfError::UnknownGeneratorBus { gen: g.id, bus: g.bus })?;
        gens.push(GenTerm {
            id: g.id,
            bus,
            p_min: g.p_min,
            p_max: g.p_max,
            cost: g.cost_linear,
        });
    }

    Ok(OpfProblem {
        bus_ids,
        reference,
        demand,
        gens,
        flows,
        constant_cost: grid.generators.iter().map(|g| g.cost_constant).sum(),
    })
}

/// Sparse constraint rows and cones in Clarabel's `Ax + s = b` form.
struct Assembly {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    rhs: Vec<f64>,
    num_zero: usize,
}

impl Assembly {
    fn push_row(&mut self, entries: &[(usize, f64)], rhs: f64) {
        let row = self.rhs.len();
        for &(col, val) in entries {
            if val != 0.0 {
                self.rows.push(row);
                self.cols.push(col);
                self.vals.push(val);
            }
        }
        self.rhs.push(rhs);
    }
}

fn is_fixed(g: &GenTerm) -> bool {
    g.p_max - g.p_min <= 1e-9 * g.p_max.abs().max(1.0)
}

fn assemble(problem: &OpfProblem) -> Assembly {
    let n = problem.bus_ids.len();
    let mut asm = Assembly {
        rows: Vec::new(),
        cols: Vec::new(),
        vals: Vec::new(),
        rhs: Vec::new(),
        num_zero: 0,
    };

    // balance rows: Σ P − Σ outflow = demand
    let mut balance: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, g) in problem.gens.iter().enumerate() {
        balance[g.bus].push((n + i, 1.0));
    }
    for f in &problem.flows {
        let b = f.susceptance / POWER_SCALE;
        balance[f.src].push((f.src, -b));
        balance[f.src].push((f.dst, b));
        balance[f.dst].push((f.src, b));
        balance[f.dst].push((f.dst, -b));
    }
    for (bus, mut entries) in balance.into_iter().enumerate() {
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (col, val) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == col => last.1 += val,
                _ => merged.push((col, val)),
            }
        }
        asm.push_row(&merged, problem.demand[bus] / POWER_SCALE);
    }
    asm.push_row(&[(problem.reference, 1.0)], 0.0);
    for (i, g) in problem.gens.iter().enumerate() {
        if is_fixed(g) {
            asm.push_row(&[(n + i, 1.0)], g.p_max / POWER_SCALE);
        }
    }
    asm.num_zero = asm.rhs.len();

    for f in &problem.flows {
        if let Some(rating) = f.rating {
            let b = f.susceptance / POWER_SCALE;
            asm.push_row(&[(f.src, b), (f.dst, -b)], rating / POWER_SCALE);
            asm.push_row(&[(f.src, -b), (f.dst, b)], rating / POWER_SCALE);
        }
    }
    for (i, g) in problem.gens.iter().enumerate() {
        if !is_fixed(g) {
            asm.push_row(&[(n + i, 1.0)], g.p_max / POWER_SCALE);
            asm.push_row(&[(n + i, -1.0)], -g.p_min / POWER_SCALE);
        }
    }
    asm
}

/// One Clarabel solve of `min ½xᵀPx + qᵀx` with the first `zero_cone` rows
/// as equalities and the rest as `≤`. Returns the primal point and the duals.
fn interior_point(
    p: &CscMatrix<f64>,
    q: &[f64],
    a: &CscMatrix<f64>,
    b: &[f64],
    zero_cone: usize,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>), OpfStatus> {
    let cones = [
        SupportedConeT::ZeroConeT(zero_cone),
        SupportedConeT::NonnegativeConeT(b.len() - zero_cone),
    ];
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(500)
        .tol_gap_abs(tol)
        .tol_gap_rel(tol)
        .tol_feas(tol)
        .presolve_enable(false)
        .build()
        .expect("valid solver settings");
    let mut solver = DefaultSolver::new(p, q, a, b, &cones, settings).map_err(|e| {
        log::error!("solver setup failed: {e}");
        OpfStatus::NumericalFailure
    })?;
    solver.solve();
    match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            Ok((solver.solution.x.clone(), solver.solution.z.clone()))
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Err(OpfStatus::Infeasible),
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => Err(OpfStatus::Unbounded),
        other => {
            log::warn!("solver stopped with status {other:?}");
            Err(OpfStatus::NumericalFailure)
        }
    }
}

/// Solves the LP. `tolerance` is relative; solver gap and feasibility
/// tolerances are set two orders tighter, and the returned point is checked
/// for balance and limit violations at `tolerance` scaled by the largest
/// power quantity in the problem.
pub fn solve(problem: &OpfProblem, tolerance: f64) -> OpfSolution {
    let n = problem.bus_ids.len();
    let num_vars = problem.num_vars();
    let asm = assemble(problem);
    let m = asm.rhs.len();

    let cost_scale = problem
        .gens
        .iter()
        .map(|g| g.cost.abs())
        .fold(0.0, f64::max)
        .max(1.0);
    let mut q = vec![0.0; num_vars];
    for (i, g) in problem.gens.iter().enumerate() {
        q[n + i] = g.cost * POWER_SCALE / cost_scale;
    }

    let inner_tol = (tolerance * 1e-2).clamp(1e-12, 1e-4);
    let zero_cone = asm.num_zero;
    let a = CscMatrix::new_from_triplets(m, num_vars, asm.rows.clone(), asm.cols.clone(), asm.vals.clone());
    let (x1, z) = match interior_point(&CscMatrix::zeros((num_vars, num_vars)), &q, &a, &asm.rhs, zero_cone, inner_tol) {
        Ok(sol) => sol,
        Err(status) => return OpfSolution::failed(status),
    };

    // The LP optimum is rarely unique: equal costs leave a whole face of
    // optimal dispatches. The returned dispatch is the one of least
    // Euclidean norm on that face, found by a second solve that bounds the
    // cost by the LP optimum plus a slack. A thin slab can stall the solver,
    // so the slack widens on retry; the LP point itself is the last resort.
    let optimum: f64 = q.iter().zip(&x1).map(|(c, v)| c * v).sum();
    let mut rows = asm.rows;
    let mut cols = asm.cols;
    let mut vals = asm.vals;
    for (j, c) in q.iter().enumerate().filter(|(_, c)| **c != 0.0) {
        rows.push(m);
        cols.push(j);
        vals.push(*c);
    }
    let a2 = CscMatrix::new_from_triplets(m + 1, num_vars, rows, cols, vals);
    let gens: Vec<usize> = (n..num_vars).collect();
    let p2 = CscMatrix::new_from_triplets(num_vars, num_vars, gens.clone(), gens, vec![1.0; num_vars - n]);
    let zeros = vec![0.0; num_vars];
    for widen in [1.0, 1e2, 1e4] {
        let mut rhs = asm.rhs.clone();
        rhs.push(optimum + widen * inner_tol * optimum.abs().max(1.0));
        match interior_point(&p2, &zeros, &a2, &rhs, zero_cone, inner_tol) {
            Ok((x, _)) => match extract(problem, &x, &z, cost_scale, tolerance) {
                Ok(solution) => return solution,
                Err(violation) => log::debug!("least-norm point rejected: {violation}"),
            },
            Err(status) => log::debug!("least-norm solve stopped with status {status}"),
        }
    }
    match extract(problem, &x1, &z, cost_scale, tolerance) {
        Ok(solution) => solution,
        Err(violation) => {
            log::warn!("solver point rejected: {violation}");
            OpfSolution::failed(OpfStatus::NumericalFailure)
        }
    }
}

/// Builds the solution from a primal point and the LP duals, then checks it.
fn extract(
    problem: &OpfProblem,
    x: &[f64],
    z: &[f64],
    cost_scale: f64,
    tolerance: f64,
) -> Result<OpfSolution, String> {
    let n = problem.bus_ids.len();
    let theta = &x[..n];
    let dispatch: BTreeMap<GenId, f64> = problem
        .gens
        .iter()
        .enumerate()
        .map(|(i, g)| (g.id, x[n + i] * POWER_SCALE))
        .collect();
    let flow: BTreeMap<BranchId, f64> = problem
        .flows
        .iter()
        .map(|f| (f.id, f.susceptance * (theta[f.src] - theta[f.dst])))
        .collect();
    let lmp: BTreeMap<BusId, f64> = problem
        .bus_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, -z[i] * cost_scale / POWER_SCALE))
        .collect();
    let objective = problem
        .gens
        .iter()
        .map(|g| g.cost * dispatch[&g.id])
        .sum::<f64>()
        + problem.constant_cost;
    let solution = OpfSolution {
        dispatch,
        flow,
        lmp,
        objective,
        status: OpfStatus::Optimal,
    };
    match check_feasibility(problem, &solution, tolerance) {
        Some(violation) => Err(violation),
        None => Ok(solution),
    }
}

/// Convenience wrapper: build and solve.
pub fn solve_grid(grid: &Grid, tolerance: f64) -> Result<OpfSolution, OpfError> {
    Ok(solve(&build_problem(grid)?, tolerance))
}

fn check_feasibility(problem: &OpfProblem, sol: &OpfSolution, tolerance: f64) -> Option<String> {
    let scale = problem
        .demand
        .iter()
        .map(|d| d.abs())
        .chain(problem.gens.iter().map(|g| g.p_max.abs()))
        .chain(problem.flows.iter().filter_map(|f| f.rating))
        .fold(1.0, f64::max);
    let tol = tolerance * scale;

    let mut residual = problem.demand.iter().map(|d| -d).collect::<Vec<f64>>();
    for g in &problem.gens {
        residual[g.bus] += sol.dispatch[&g.id];
    }
    for f in &problem.flows {
        let p = sol.flow[&f.id];
        residual[f.src] -= p;
        residual[f.dst] += p;
    }
    if let Some((i, r)) = residual.iter().enumerate().find(|(_, r)| r.abs() > tol) {
        return Some(format!("balance residual {r} at bus {}", problem.bus_ids[i]));
    }
    for g in &problem.gens {
        let p = sol.dispatch[&g.id];
        if p < g.p_min - tol || p > g.p_max + tol {
            return Some(format!("generator {} output {p} outside limits", g.id));
        }
    }
    for f in &problem.flows {
        if let Some(rating) = f.rating {
            if sol.flow[&f.id].abs() > rating + tol {
                return Some(format!("branch {} flow exceeds rating", f.id));
            }
        }
    }
    None
}

/// Branches whose flow magnitude is at or above `loading_threshold` of
/// their rating. Unrated branches and branches without flow never qualify.
pub fn flows_at_limit(
    solution: &OpfSolution,
    grid: &Grid,
    loading_threshold: f64,
) -> BTreeSet<BranchId> {
    const NO_FLOW_MW: f64 = 1e-6;
    grid.branches
        .iter()
        .filter_map(|br| {
            let rating = br.rating?;
            let p = solution.flow.get(&br.id)?.abs();
            (p > NO_FLOW_MW && p >= loading_threshold * rating).then_some(br.id)
        })
        .collect()
}
