//! Subgrid reduction.
//!
//! A subgrid collapses onto its representative bus: injections and boundary
//! branches are re-terminated there, shunts and the charging of internal
//! branches are absorbed into its shunt, and the other buses disappear.
//! Nothing is ever created, so every retained entity keeps its identity.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureSet;
use crate::grid_model::{BranchId, BusId, CorridorGraph, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Topology,
    Electrical,
    Market,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Topology => "topology",
            Strategy::Electrical => "electrical",
            Strategy::Market => "market",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgrid {
    pub buses: BTreeSet<BusId>,
    pub representative: BusId,
    pub origin: Strategy,
}

impl Subgrid {
    pub fn new(buses: impl IntoIterator<Item = BusId>, representative: BusId, origin: Strategy) -> Self {
        Self {
            buses: buses.into_iter().collect(),
            representative,
            origin,
        }
    }

    /// Buses that disappear when the subgrid is reduced.
    pub fn removed(&self) -> impl Iterator<Item = BusId> + '_ {
        self.buses.iter().copied().filter(move |b| *b != self.representative)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MappingError {
    #[error("bus {0} is mapped twice")]
    Duplicate(BusId),
    #[error("bus {0} is a retained target but does not map to itself")]
    NotIdempotent(BusId),
    #[error("bus {0} has no image in the later mapping")]
    Missing(BusId),
}

/// Original bus to retained bus. Total over the original buses and
/// idempotent: every retained bus maps to itself.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusMapping(BTreeMap<BusId, BusId>);

impl BusMapping {
    pub fn identity(buses: impl IntoIterator<Item = BusId>) -> Self {
        Self(buses.into_iter().map(|b| (b, b)).collect())
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (BusId, BusId)>) -> Result<Self, MappingError> {
        let mut map = BTreeMap::new();
        for (from, to) in pairs {
            if map.insert(from, to).is_some() {
                return Err(MappingError::Duplicate(from));
            }
        }
        if let Some(bad) = map.values().find(|to| map.get(to) != Some(to)) {
            return Err(MappingError::NotIdempotent(*bad));
        }
        Ok(Self(map))
    }

    pub fn get(&self, bus: BusId) -> Option<BusId> {
        self.0.get(&bus).copied()
    }

    /// Pairs sorted by original bus.
    pub fn iter(&self) -> impl Iterator<Item = (BusId, BusId)> + '_ {
        self.0.iter().map(|(a, b)| (*a, *b))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn originals(&self) -> BTreeSet<BusId> {
        self.0.keys().copied().collect()
    }

    pub fn retained(&self) -> BTreeSet<BusId> {
        self.0.values().copied().collect()
    }

    /// Rows whose bus was removed.
    pub fn removed_count(&self) -> usize {
        self.0.iter().filter(|(a, b)| a != b).count()
    }

    pub fn is_idempotent(&self) -> bool {
        self.0.values().all(|to| self.0.get(to) == Some(to))
    }

    /// `later ∘ self`: first this mapping, then `later`, whose domain must
    /// cover every bus this one retains.
    pub fn compose(&self, later: &BusMapping) -> Result<BusMapping, MappingError> {
        self.0
            .iter()
            .map(|(from, mid)| {
                later
                    .get(*mid)
                    .map(|to| (*from, to))
                    .ok_or(MappingError::Missing(*mid))
            })
            .collect::<Result<BTreeMap<_, _>, _>>()
            .map(BusMapping)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReductionError {
    #[error("subgrid is empty")]
    Empty,
    #[error("representative {0} is not a member of its subgrid")]
    RepresentativeNotMember(BusId),
    #[error("subgrid bus {0} is not in the grid")]
    UnknownBus(BusId),
    #[error("subgrid represented by {0} is not connected")]
    Disconnected(BusId),
    #[error("subgrid contains feature bus {0}")]
    FeatureBus(BusId),
    #[error("subgrid contains feature branch {0}")]
    FeatureBranch(BranchId),
    #[error("subgrids overlap at bus {0}")]
    Overlap(BusId),
}

/// First feature inside the subgrid: a non-representative feature bus, or a
/// feature branch with both terminals in the subgrid.
fn first_feature(subgrid: &Subgrid, grid: &Grid, features: &FeatureSet) -> Option<ReductionError> {
    if let Some(bus) = subgrid.removed().find(|b| features.has_bus(*b)) {
        return Some(ReductionError::FeatureBus(bus));
    }
    grid.branches
        .iter()
        .filter(|br| subgrid.buses.contains(&br.src_bus) && subgrid.buses.contains(&br.dst_bus))
        .find(|br| features.has_branch(br.id))
        .map(|br| ReductionError::FeatureBranch(br.id))
}

pub fn contains_feature(subgrid: &Subgrid, grid: &Grid, features: &FeatureSet) -> bool {
    first_feature(subgrid, grid, features).is_some()
}

fn check_subgrid(
    subgrid: &Subgrid,
    grid: &Grid,
    graph: &CorridorGraph,
    features: &FeatureSet,
) -> Result<(), ReductionError> {
    if subgrid.buses.is_empty() {
        return Err(ReductionError::Empty);
    }
    if !subgrid.buses.contains(&subgrid.representative) {
        return Err(ReductionError::RepresentativeNotMember(subgrid.representative));
    }
    if let Some(bus) = subgrid.buses.iter().find(|b| !graph.index.contains_key(b)) {
        return Err(ReductionError::UnknownBus(*bus));
    }
    if !graph.induces_connected(&subgrid.buses) {
        return Err(ReductionError::Disconnected(subgrid.representative));
    }
    match first_feature(subgrid, grid, features) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Collapses pairwise disjoint, prevalidated subgrids in one pass.
fn collapse(grid: &Grid, subgrids: &[Subgrid]) -> (Grid, BusMapping) {
    let mut target: HashMap<BusId, BusId> = HashMap::new();
    for sg in subgrids {
        for bus in sg.removed() {
            target.insert(bus, sg.representative);
        }
    }
    let image = |b: BusId| target.get(&b).copied().unwrap_or(b);

    let mut out = Grid {
        name: grid.name.clone(),
        ..Grid::default()
    };
    let kv: HashMap<BusId, f64> = grid.buses.iter().map(|b| (b.id, b.base_kv)).collect();
    let mut absorbed: BTreeMap<BusId, (f64, f64, bool)> = BTreeMap::new();
    for bus in &grid.buses {
        if let Some(rep) = target.get(&bus.id) {
            let acc = absorbed.entry(*rep).or_insert((0.0, 0.0, false));
            // Conductance demand G·kV² is what moves, so G rescales to the representative's voltage.
            let ratio = bus.base_kv / kv[rep];
            acc.0 += if ratio == 1.0 { bus.shunt_conductance } else { bus.shunt_conductance * ratio * ratio };
            acc.1 += bus.shunt_susceptance;
            acc.2 |= bus.is_reference;
        }
    }
    for br in &grid.branches {
        let (s, d) = (image(br.src_bus), image(br.dst_bus));
        if s == d {
            absorbed.entry(s).or_insert((0.0, 0.0, false)).1 += br.total_charging_susceptance;
        } else {
            let mut br = br.clone();
            br.src_bus = s;
            br.dst_bus = d;
            out.branches.push(br);
        }
    }
    for bus in grid.buses.iter().filter(|b| !target.contains_key(&b.id)) {
        let mut bus = bus.clone();
        if let Some((g, b, r)) = absorbed.get(&bus.id) {
            bus.shunt_conductance += g;
            bus.shunt_susceptance += b;
            bus.is_reference |= r;
        }
        out.buses.push(bus);
    }
    out.generators = grid
        .generators
        .iter()
        .map(|g| {
            let mut g = g.clone();
            g.bus = image(g.bus);
            g
        })
        .collect();
    out.loads = grid
        .loads
        .iter()
        .map(|l| {
            let mut l = l.clone();
            l.bus = image(l.bus);
            l
        })
        .collect();
    let mapping = BusMapping(grid.buses.iter().map(|b| (b.id, image(b.id))).collect());
    (out, mapping)
}

/// Reduces one subgrid to its representative. The mapping covers every bus
/// of `grid`.
pub fn reduce_subgrid(
    grid: &Grid,
    subgrid: &Subgrid,
    features: &FeatureSet,
) -> Result<(Grid, BusMapping), ReductionError> {
    let graph = CorridorGraph::new(grid);
    check_subgrid(subgrid, grid, &graph, features)?;
    Ok(collapse(grid, std::slice::from_ref(subgrid)))
}

/// A feature bus if exactly one candidate is a feature bus, else the highest
/// corridor degree, else the lowest id.
pub fn choose_representative(
    candidates: &BTreeSet<BusId>,
    graph: &CorridorGraph,
    features: &FeatureSet,
) -> BusId {
    let featured: Vec<BusId> = candidates.iter().copied().filter(|b| features.has_bus(*b)).collect();
    if let [only] = featured[..] {
        return only;
    }
    *candidates
        .iter()
        .min_by_key(|b| (std::cmp::Reverse(graph.degree(**b)), **b))
        .expect("nonempty candidate set")
}

/// Merges overlapping subgrids in order. A union is accepted when it stays
/// feature free under the tie-break representative; otherwise the incoming
/// subgrid keeps only its unclaimed buses connected to its anchor, and is
/// dropped when fewer than two remain or a feature is still inside.
/// The result is pairwise disjoint.
pub fn merge_overlapping(
    grid: &Grid,
    subgrids: &[Subgrid],
    features: &FeatureSet,
) -> Vec<Subgrid> {
    let graph = CorridorGraph::new(grid);
    let mut groups: Vec<Option<Subgrid>> = Vec::new();
    let mut owner: HashMap<BusId, usize> = HashMap::new();

    for incoming in subgrids {
        let hits: BTreeSet<usize> = incoming.buses.iter().filter_map(|b| owner.get(b).copied()).collect();
        if hits.is_empty() {
            if incoming.buses.len() >= 2 && !contains_feature(incoming, grid, features) {
                for b in &incoming.buses {
                    owner.insert(*b, groups.len());
                }
                groups.push(Some(incoming.clone()));
            }
            continue;
        }

        let mut union = incoming.buses.clone();
        let mut reps = BTreeSet::from([incoming.representative]);
        for &g in &hits {
            let group = groups[g].as_ref().expect("owned group is live");
            union.extend(group.buses.iter().copied());
            reps.insert(group.representative);
        }
        let first = *hits.iter().next().expect("nonempty hits");
        let merged = Subgrid {
            representative: choose_representative(&reps, &graph, features),
            buses: union,
            origin: groups[first].as_ref().expect("owned group is live").origin,
        };
        if !contains_feature(&merged, grid, features) {
            for &g in &hits {
                groups[g] = None;
            }
            for b in &merged.buses {
                owner.insert(*b, first);
            }
            groups[first] = Some(merged);
            continue;
        }

        let free: BTreeSet<BusId> = incoming.buses.iter().copied().filter(|b| !owner.contains_key(b)).collect();
        let Some(anchor) = (if free.contains(&incoming.representative) {
            Some(incoming.representative)
        } else {
            free.iter().next().copied()
        }) else {
            continue;
        };
        let component = component_within(&graph, &free, anchor);
        if component.len() < 2 {
            continue;
        }
        let representative = if component.contains(&incoming.representative) {
            incoming.representative
        } else {
            choose_representative(&component, &graph, features)
        };
        let trimmed = Subgrid {
            buses: component,
            representative,
            origin: incoming.origin,
        };
        if contains_feature(&trimmed, grid, features) {
            continue;
        }
        for b in &trimmed.buses {
            owner.insert(*b, groups.len());
        }
        groups.push(Some(trimmed));
    }
    groups.into_iter().flatten().collect()
}

/// Buses of `within` reachable from `start` without leaving `within`.
fn component_within(graph: &CorridorGraph, within: &BTreeSet<BusId>, start: BusId) -> BTreeSet<BusId> {
    let mut seen = BTreeSet::from([start]);
    let mut stack = vec![start];
    while let Some(u) = stack.pop() {
        for &(v, _) in &graph.adjacency[graph.index[&u]] {
            let vb = graph.bus_ids[v];
            if within.contains(&vb) && seen.insert(vb) {
                stack.push(vb);
            }
        }
    }
    seen
}

/// Merges overlaps, then reduces every subgrid. The mapping covers every
/// bus of `grid`.
pub fn apply_all(
    grid: &Grid,
    subgrids: &[Subgrid],
    features: &FeatureSet,
) -> Result<(Grid, BusMapping), ReductionError> {
    let merged = merge_overlapping(grid, subgrids, features);
    apply_disjoint(grid, &merged, features)
}

/// Reduces pairwise disjoint subgrids; the result does not depend on their
/// order.
pub fn apply_disjoint(
    grid: &Grid,
    subgrids: &[Subgrid],
    features: &FeatureSet,
) -> Result<(Grid, BusMapping), ReductionError> {
    let graph = CorridorGraph::new(grid);
    let mut seen = BTreeSet::new();
    for sg in subgrids {
        if let Some(b) = sg.buses.iter().find(|b| !seen.insert(**b)) {
            return Err(ReductionError::Overlap(*b));
        }
        check_subgrid(sg, grid, &graph, features)?;
    }
    Ok(collapse(grid, subgrids))
}
