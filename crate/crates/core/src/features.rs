//! Feature identification.
//!
//! Features are buses and branches that must survive reduction untouched:
//! transformers, converters, congested or long branches, terminal buses of
//! conventional generators and the reference bus. Refinement features are
//! added afterwards around generators whose dispatch a reduction distorted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dcopf::{flows_at_limit, OpfSolution};
use crate::grid_model::{BranchId, BranchKind, BusId, CorridorGraph, GenId, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Transformer,
    Converter,
    Congested,
    LongLine,
    GeneratorTerminal,
    ReferenceBus,
    Refinement,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::Transformer => "transformer",
            Reason::Converter => "converter",
            Reason::Congested => "congested",
            Reason::LongLine => "long_line",
            Reason::GeneratorTerminal => "generator_terminal",
            Reason::ReferenceBus => "reference_bus",
            Reason::Refinement => "refinement",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Feature buses and branches, each with a nonempty reason set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    buses: BTreeMap<BusId, BTreeSet<Reason>>,
    branches: BTreeMap<BranchId, BTreeSet<Reason>>,
}

impl FeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_bus(&mut self, bus: BusId, reason: Reason) {
        self.buses.entry(bus).or_default().insert(reason);
    }

    pub fn add_branch(&mut self, branch: BranchId, reason: Reason) {
        self.branches.entry(branch).or_default().insert(reason);
    }

    pub fn has_bus(&self, bus: BusId) -> bool {
        self.buses.contains_key(&bus)
    }

    pub fn has_branch(&self, branch: BranchId) -> bool {
        self.branches.contains_key(&branch)
    }

    pub fn feature_buses(&self) -> BTreeSet<BusId> {
        self.buses.keys().copied().collect()
    }

    pub fn feature_branches(&self) -> BTreeSet<BranchId> {
        self.branches.keys().copied().collect()
    }

    pub fn bus_reasons(&self, bus: BusId) -> Option<&BTreeSet<Reason>> {
        self.buses.get(&bus)
    }

    pub fn branch_reasons(&self, branch: BranchId) -> Option<&BTreeSet<Reason>> {
        self.branches.get(&branch)
    }

    /// Total number of feature entities.
    pub fn len(&self) -> usize {
        self.buses.len() + self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops entities that `grid` no longer contains.
    pub fn restricted_to(&self, grid: &Grid) -> FeatureSet {
        let (buses, branches) = (grid.bus_ids(), grid.branch_ids());
        FeatureSet {
            buses: self.buses.iter().filter(|(b, _)| buses.contains(b)).map(|(b, r)| (*b, r.clone())).collect(),
            branches: self
                .branches
                .iter()
                .filter(|(b, _)| branches.contains(b))
                .map(|(b, r)| (*b, r.clone()))
                .collect(),
        }
    }

    /// True when `other` has every entity and reason of `self`.
    pub fn is_subset(&self, other: &FeatureSet) -> bool {
        fn sub<K: Ord>(a: &BTreeMap<K, BTreeSet<Reason>>, b: &BTreeMap<K, BTreeSet<Reason>>) -> bool {
            a.iter().all(|(k, r)| b.get(k).is_some_and(|rb| r.is_subset(rb)))
        }
        sub(&self.buses, &other.buses) && sub(&self.branches, &other.branches)
    }

    /// CSV `entity_kind,id,reasons` with reasons joined by `;`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("entity_kind,id,reasons\n");
        let join = |r: &BTreeSet<Reason>| r.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(";");
        for (id, r) in &self.buses {
            out.push_str(&format!("bus,{},{}\n", id.0, join(r)));
        }
        for (id, r) in &self.branches {
            out.push_str(&format!("branch,{},{}\n", id.0, join(r)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Fraction of the rating from which a branch counts as congested.
    pub loading_threshold: f64,
    /// Branches at least this long are long-line features; unknown lengths
    /// never are.
    pub length_threshold_km: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            loading_threshold: 0.95,
            length_threshold_km: 50.0,
        }
    }
}

pub fn identify(grid: &Grid, solution: &OpfSolution, config: &FeatureConfig) -> FeatureSet {
    let mut set = FeatureSet::new();
    for br in &grid.branches {
        match br.kind {
            BranchKind::Transformer => set.add_branch(br.id, Reason::Transformer),
            BranchKind::Converter => set.add_branch(br.id, Reason::Converter),
            BranchKind::Line => {}
        }
        if br.length_km.is_some_and(|l| l >= config.length_threshold_km) {
            set.add_branch(br.id, Reason::LongLine);
        }
    }
    for id in star_windings(grid) {
        set.add_branch(id, Reason::Transformer);
    }
    for id in flows_at_limit(solution, grid, config.loading_threshold) {
        set.add_branch(id, Reason::Congested);
    }
    for g in grid.generators.iter().filter(|g| g.is_conventional) {
        set.add_bus(g.bus, Reason::GeneratorTerminal);
    }
    for bus in grid.buses.iter().filter(|b| b.is_reference) {
        set.add_bus(bus.id, Reason::ReferenceBus);
    }
    set
}

/// Branches of three-winding transformer equivalents: every negative
/// reactance branch and, at each of its terminals that carries neither load
/// nor generation (the star point), every other branch there. A star point
/// merged with a neighbour would leave the negative winding on its own.
pub fn star_windings(grid: &Grid) -> BTreeSet<BranchId> {
    let injected: BTreeSet<BusId> = grid
        .loads
        .iter()
        .map(|l| l.bus)
        .chain(grid.generators.iter().map(|g| g.bus))
        .collect();
    let stars: BTreeSet<BusId> = grid
        .branches
        .iter()
        .filter(|b| b.series_reactance < 0.0)
        .flat_map(|b| [b.src_bus, b.dst_bus])
        .filter(|bus| !injected.contains(bus))
        .collect();
    grid.branches
        .iter()
        .filter(|b| b.series_reactance < 0.0 || stars.contains(&b.src_bus) || stars.contains(&b.dst_bus))
        .map(|b| b.id)
        .collect()
}

/// Adds every bus within `depth` corridor hops of a critical generator's
/// terminal bus, measured on `grid` (the original, unreduced model).
pub fn add_refinement_features(
    grid: &Grid,
    base: &FeatureSet,
    critical_generators: &BTreeSet<GenId>,
    depth: usize,
) -> FeatureSet {
    let graph = CorridorGraph::new(grid);
    let sources: Vec<usize> = grid
        .generators
        .iter()
        .filter(|g| critical_generators.contains(&g.id))
        .filter_map(|g| graph.index.get(&g.bus).copied())
        .collect();
    let mut set = base.clone();
    for (i, d) in graph.hop_distances(&sources, depth).into_iter().enumerate() {
        if d.is_some() {
            set.add_bus(graph.bus_ids[i], Reason::Refinement);
        }
    }
    set
}
