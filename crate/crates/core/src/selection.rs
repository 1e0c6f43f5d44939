//! Subgrid selection: single-corridor appendages, strongly coupled corridors
//! and LMP clusters, plus detection of generators whose dispatch a reduction
//! distorted.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dcopf::OpfSolution;
use crate::features::FeatureSet;
use crate::grid_model::{BranchKind, BusId, CorridorGraph, GenId, Grid};
use crate::reduction::{choose_representative, contains_feature, merge_overlapping, Strategy, Subgrid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("invalid selection parameter: {0}")]
    InvalidConfig(String),
    #[error("generator sets differ: {0}")]
    GeneratorMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub small_fraction: f64,
    pub tau: f64,
    pub delta: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            small_fraction: 0.01,
            tau: 0.05,
            delta: 0.08,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        let bad = |m: String| Err(SelectionError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.small_fraction > 0.0 && self.small_fraction <= 1.0) {
            return bad(format!("small_fraction must lie in (0, 1], got {}", self.small_fraction));
        }
        Ok(())
    }

    /// Largest appendage size for the topology stage.
    pub fn small_limit(&self, bus_count: usize) -> usize {
        (self.small_fraction * bus_count as f64).ceil() as usize
    }
}

/// Bridges of the corridor graph as `(parent, child)` bus indices of a DFS
/// forest, with the preorder, entry times and subtree sizes needed to list
/// the child side.
struct BridgeForest {
    bridges: Vec<(usize, usize)>,
    preorder: Vec<usize>,
    entry: Vec<usize>,
    size: Vec<usize>,
    component: Vec<usize>,
}

fn bridge_forest(graph: &CorridorGraph) -> BridgeForest {
    let n = graph.len();
    let mut entry = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut size = vec![1; n];
    let mut component = vec![usize::MAX; n];
    let mut preorder = Vec::with_capacity(n);
    let mut bridges = Vec::new();
    // (bus, corridor used to enter it, next adjacency slot)
    let mut stack: Vec<(usize, usize, usize)> = Vec::new();
    let mut comp = 0;
    for root in 0..n {
        if entry[root] != usize::MAX {
            continue;
        }
        entry[root] = preorder.len();
        low[root] = entry[root];
        component[root] = comp;
        preorder.push(root);
        stack.push((root, usize::MAX, 0));
        while let Some(&mut (u, via, ref mut slot)) = stack.last_mut() {
            if let Some(&(v, c)) = graph.adjacency[u].get(*slot) {
                *slot += 1;
                if c == via {
                    continue;
                }
                if entry[v] == usize::MAX {
                    entry[v] = preorder.len();
                    low[v] = entry[v];
                    component[v] = comp;
                    preorder.push(v);
                    stack.push((v, c, 0));
                } else {
                    low[u] = low[u].min(entry[v]);
                }
            } else {
                stack.pop();
                if let Some(&(p, _, _)) = stack.last() {
                    low[p] = low[p].min(low[u]);
                    size[p] += size[u];
                    if low[u] > entry[p] {
                        bridges.push((p, u));
                    }
                }
            }
        }
        comp += 1;
    }
    BridgeForest {
        bridges,
        preorder,
        entry,
        size,
        component,
    }
}

/// Every maximal bus set of at most `small_limit` buses tied to the rest of
/// its component by exactly one corridor, returned together with the bus on
/// the other end of that corridor, which is the representative. Sets whose
/// subgrid would contain a feature are discarded before maximality is
/// decided.
pub fn select_topological(grid: &Grid, features: &FeatureSet, small_limit: usize) -> Vec<Subgrid> {
    let graph = CorridorGraph::new(grid);
    let forest = bridge_forest(&graph);
    let mut members_of: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in forest.component.iter().enumerate() {
        members_of.entry(c).or_default().push(i);
    }
    let reference: BTreeSet<usize> = grid
        .reference_buses()
        .iter()
        .filter_map(|b| graph.index.get(b).copied())
        .collect();

    let mut candidates: Vec<Subgrid> = Vec::new();
    for &(parent, child) in &forest.bridges {
        let total = members_of[&forest.component[child]].len();
        let outer_size = total - forest.size[child];
        if forest.size[child].min(outer_size) > small_limit {
            continue;
        }
        let start = forest.entry[child];
        let inner: BTreeSet<usize> = forest.preorder[start..start + forest.size[child]].iter().copied().collect();
        let child_is_small = match inner.len().cmp(&outer_size) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => {
                let inner_ref = inner.iter().any(|i| reference.contains(i));
                let outer_ref = members_of[&forest.component[child]]
                    .iter()
                    .any(|i| !inner.contains(i) && reference.contains(i));
                if inner_ref != outer_ref {
                    outer_ref
                } else {
                    let lowest = |it: &mut dyn Iterator<Item = usize>| it.map(|i| graph.bus_ids[i]).min();
                    let inner_low = lowest(&mut inner.iter().copied());
                    let outer_low = lowest(
                        &mut members_of[&forest.component[child]].iter().copied().filter(|i| !inner.contains(i)),
                    );
                    outer_low < inner_low
                }
            }
        };
        let (small, attachment): (BTreeSet<usize>, usize) = if child_is_small {
            (inner, parent)
        } else {
            let outer = members_of[&forest.component[child]]
                .iter()
                .copied()
                .filter(|i| !inner.contains(i))
                .collect();
            (outer, child)
        };
        let mut buses: BTreeSet<BusId> = small.iter().map(|&i| graph.bus_ids[i]).collect();
        let representative = graph.bus_ids[attachment];
        buses.insert(representative);
        let subgrid = Subgrid::new(buses, representative, Strategy::Topology);
        if !contains_feature(&subgrid, grid, features) {
            candidates.push(subgrid);
        }
    }

    // Appendage sets form a laminar family, so a candidate is maximal iff no
    // larger accepted candidate already covers its removed buses.
    candidates.sort_by(|a, b| b.buses.len().cmp(&a.buses.len()).then_with(|| a.buses.cmp(&b.buses)));
    let mut covered = BTreeSet::new();
    let mut out = Vec::new();
    for sg in candidates {
        let removed: Vec<BusId> = sg.removed().collect();
        if removed.iter().any(|b| covered.contains(b)) {
            continue;
        }
        covered.extend(removed);
        out.push(sg);
    }
    out.sort_by(|a, b| (a.representative, &a.buses).cmp(&(b.representative, &b.buses)));
    out
}

/// Corridors whose equivalent impedance magnitude is at most `tau` times the
/// largest corridor magnitude, as two-bus subgrids in ascending magnitude.
/// Corridors with a feature, transformer or converter branch are skipped, as
/// are those whose non-representative terminal is a feature bus.
pub fn select_electrical(grid: &Grid, features: &FeatureSet, tau: f64) -> Vec<Subgrid> {
    select_electrical_below(grid, features, tau * max_corridor_impedance(grid))
}

/// Largest corridor equivalent impedance magnitude in ohms.
pub fn max_corridor_impedance(grid: &Grid) -> f64 {
    CorridorGraph::new(grid)
        .corridors
        .iter()
        .map(|c| c.equivalent_series_impedance.norm())
        .fold(0.0, f64::max)
}

/// Same as [`select_electrical`] with an absolute threshold in ohms.
pub fn select_electrical_below(grid: &Grid, features: &FeatureSet, threshold: f64) -> Vec<Subgrid> {
    let graph = CorridorGraph::new(grid);
    let kinds: BTreeMap<_, _> = grid.branches.iter().map(|b| (b.id, b.kind)).collect();
    let mut picked: Vec<(f64, Subgrid)> = graph
        .corridors
        .iter()
        .filter(|c| c.equivalent_series_impedance.norm() <= threshold)
        .filter(|c| {
            c.branch_ids
                .iter()
                .all(|id| !features.has_branch(*id) && kinds[id] == BranchKind::Line)
        })
        .filter_map(|c| {
            let (a, b) = c.bus_pair;
            let rep = choose_representative(&BTreeSet::from([a, b]), &graph, features);
            let other = if rep == a { b } else { a };
            (!features.has_bus(other))
                .then(|| (c.equivalent_series_impedance.norm(), Subgrid::new([a, b], rep, Strategy::Electrical)))
        })
        .collect();
    picked.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.buses.cmp(&y.1.buses)));
    picked.into_iter().map(|(_, s)| s).collect()
}

/// One LMP cluster per bus of corridor degree at least two, in ascending id.
/// A cluster grows breadth first from its seed and admits a neighbour whose
/// LMP lies within `delta` of the seed's. Feature buses and endpoints of
/// feature branches neither seed nor join a cluster, so no cluster or union
/// of clusters holds a feature. Single-bus clusters are dropped and clusters
/// may overlap.
pub fn market_clusters(grid: &Grid, features: &FeatureSet, solution: &OpfSolution, delta: f64) -> Vec<Subgrid> {
    let graph = CorridorGraph::new(grid);
    let mut closed: Vec<bool> = graph.bus_ids.iter().map(|b| features.has_bus(*b)).collect();
    for br in grid.branches.iter().filter(|b| features.has_branch(b.id)) {
        for bus in [br.src_bus, br.dst_bus] {
            if let Some(&i) = graph.index.get(&bus) {
                closed[i] = true;
            }
        }
    }
    let lmp: Vec<Option<f64>> = graph.bus_ids.iter().map(|b| solution.lmp.get(b).copied()).collect();

    let mut seeds: Vec<usize> = (0..graph.len()).filter(|&i| graph.adjacency[i].len() >= 2 && !closed[i]).collect();
    seeds.sort_by_key(|&i| graph.bus_ids[i]);

    let mut clusters = Vec::new();
    let mut seen = vec![usize::MAX; graph.len()];
    for seed in seeds {
        let Some(reference) = lmp[seed] else { continue };
        let mut members = vec![seed];
        seen[seed] = seed;
        let mut queue = VecDeque::from([seed]);
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &graph.adjacency[u] {
                if seen[v] == seed || closed[v] {
                    continue;
                }
                if lmp[v].is_some_and(|l| (l - reference).abs() <= delta) {
                    seen[v] = seed;
                    members.push(v);
                    queue.push_back(v);
                }
            }
        }
        if members.len() >= 2 {
            let rep = graph.bus_ids[seed];
            clusters.push(Subgrid::new(members.iter().map(|&i| graph.bus_ids[i]), rep, Strategy::Market));
        }
    }
    clusters
}

/// LMP clusters with overlaps merged.
pub fn select_market(grid: &Grid, features: &FeatureSet, solution: &OpfSolution, delta: f64) -> Vec<Subgrid> {
    merge_overlapping(grid, &market_clusters(grid, features, solution, delta), features)
}

/// Generators whose dispatch moved by more than `limit_mw`.
pub fn find_critical_generators(
    original: &OpfSolution,
    reduced: &OpfSolution,
    limit_mw: f64,
) -> Result<BTreeSet<GenId>, SelectionError> {
    let a: BTreeSet<GenId> = original.dispatch.keys().copied().collect();
    let b: BTreeSet<GenId> = reduced.dispatch.keys().copied().collect();
    if a != b {
        let diff: Vec<String> = a.symmetric_difference(&b).map(|g| g.to_string()).collect();
        return Err(SelectionError::GeneratorMismatch(diff.join(", ")));
    }
    Ok(original
        .dispatch
        .iter()
        .filter(|(g, p)| (reduced.dispatch[g] - **p).abs() > limit_mw)
        .map(|(g, _)| *g)
        .collect())
}

/// CSV `strategy,representative,member_buses` with members joined by `;`.
pub fn subgrids_to_csv(subgrids: &[Subgrid]) -> String {
    let mut out = String::from("strategy,representative,member_buses\n");
    for sg in subgrids {
        let members: Vec<String> = sg.buses.iter().map(|b| b.0.to_string()).collect();
        out.push_str(&format!("{},{},{}\n", sg.origin, sg.representative.0, members.join(";")));
    }
    out
}
