//! Grid data model, corridor aggregation and cycle counting.
//!
//! A [`Grid`] is a plain container of buses, branches, generators and loads.
//! Electrical quantities are stored in physical units (ohms, siemens, MW,
//! kV); case ingestion is responsible for converting from per-unit.
//!
//! Parallel branches between the same unordered bus pair form a
//! [`Corridor`]. Most topological reasoning in this crate (bridges, degrees,
//! cycles, hop distances) happens on the corridor graph, where a corridor is
//! a single undirected edge.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

macro_rules! entity_id {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

entity_id!(
    /// Bus identifier, unique within a grid.
    BusId,
    "n"
);
entity_id!(
    /// Branch identifier, unique within a grid.
    BranchId,
    "k"
);
entity_id!(
    /// Generator identifier, unique within a grid.
    GenId,
    "g"
);
entity_id!(
    /// Load identifier, unique within a grid.
    LoadId,
    "l"
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub base_kv: f64,
    /// Shunt conductance in siemens.
    pub shunt_conductance: f64,
    /// Shunt susceptance in siemens.
    pub shunt_susceptance: f64,
    pub is_reference: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Line,
    Transformer,
    /// Carries no electrical model; present so that converters can be
    /// flagged as features and block reduction.
    Converter,
}

impl BranchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchKind::Line => "line",
            BranchKind::Transformer => "transformer",
            BranchKind::Converter => "converter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: BranchId,
    pub src_bus: BusId,
    pub dst_bus: BusId,
    /// Series resistance in ohms.
    pub series_resistance: f64,
    /// Series reactance in ohms.
    pub series_reactance: f64,
    /// Total line charging susceptance in siemens; may be negative.
    pub total_charging_susceptance: f64,
    /// Thermal rating in MW; `None` is unlimited.
    pub rating: Option<f64>,
    pub kind: BranchKind,
    /// Route length; `None` when unknown.
    pub length_km: Option<f64>,
}

impl Branch {
    pub fn series_impedance(&self) -> Complex64 {
        Complex64::new(self.series_resistance, self.series_reactance)
    }

    /// The terminal pair as an ordered tuple, smallest id first.
    pub fn bus_pair(&self) -> (BusId, BusId) {
        if self.src_bus <= self.dst_bus {
            (self.src_bus, self.dst_bus)
        } else {
            (self.dst_bus, self.src_bus)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub id: GenId,
    pub bus: BusId,
    pub p_min: f64,
    pub p_max: f64,
    /// Marginal cost in currency per MWh.
    pub cost_linear: f64,
    /// Fixed cost in currency per hour.
    pub cost_constant: f64,
    pub is_conventional: bool,
}

/// Fixed active power demand. Negative demand models a fixed injection
/// (boundary equivalents in public cases use this).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub id: LoadId,
    pub bus: BusId,
    pub p_demand: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Grid {
    pub name: String,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
}

impl Grid {
    pub fn bus_index(&self) -> HashMap<BusId, usize> {
        self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect()
    }

    pub fn bus(&self, id: BusId) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn branch(&self, id: BranchId) -> Option<&Branch> {
        self.branches.iter().find(|b| b.id == id)
    }

    pub fn bus_ids(&self) -> BTreeSet<BusId> {
        self.buses.iter().map(|b| b.id).collect()
    }

    pub fn branch_ids(&self) -> BTreeSet<BranchId> {
        self.branches.iter().map(|b| b.id).collect()
    }

    pub fn generator_ids(&self) -> BTreeSet<GenId> {
        self.generators.iter().map(|g| g.id).collect()
    }

    pub fn reference_buses(&self) -> Vec<BusId> {
        self.buses.iter().filter(|b| b.is_reference).map(|b| b.id).collect()
    }

    pub fn total_load(&self) -> f64 {
        self.loads.iter().map(|l| l.p_demand).sum()
    }

    pub fn total_capacity(&self) -> f64 {
        self.generators.iter().map(|g| g.p_max).sum()
    }

    /// Bus shunt susceptance plus the charging susceptance of every branch.
    pub fn total_shunt_susceptance(&self) -> f64 {
        self.buses.iter().map(|b| b.shunt_susceptance).sum::<f64>()
            + self
                .branches
                .iter()
                .map(|b| b.total_charging_susceptance)
                .sum::<f64>()
    }

    /// Copy of the grid with every load multiplied by `factor`.
    pub fn with_scaled_loads(&self, factor: f64) -> Grid {
        let mut grid = self.clone();
        for load in &mut grid.loads {
            load.p_demand *= factor;
        }
        grid
    }
}

/// Incremental constructor, mostly for tests and hand-built examples.
#[derive(Debug, Default)]
pub struct GridBuilder {
    grid: Grid,
}

impl GridBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            grid: Grid {
                name: name.into(),
                ..Grid::default()
            },
        }
    }

    pub fn bus(mut self, id: u32, base_kv: f64) -> Self {
        self.grid.buses.push(Bus {
            id: BusId(id),
            base_kv,
            shunt_conductance: 0.0,
            shunt_susceptance: 0.0,
            is_reference: false,
        });
        self
    }

    pub fn reference(mut self, id: u32) -> Self {
        for bus in &mut self.grid.buses {
            bus.is_reference = bus.id == BusId(id);
        }
        self
    }

    pub fn shunt(mut self, id: u32, conductance: f64, susceptance: f64) -> Self {
        if let Some(bus) = self.grid.buses.iter_mut().find(|b| b.id == BusId(id)) {
            bus.shunt_conductance = conductance;
            bus.shunt_susceptance = susceptance;
        }
        self
    }

    pub fn line(self, id: u32, src: u32, dst: u32, r: f64, x: f64, rating: Option<f64>) -> Self {
        self.branch(Branch {
            id: BranchId(id),
            src_bus: BusId(src),
            dst_bus: BusId(dst),
            series_resistance: r,
            series_reactance: x,
            total_charging_susceptance: 0.0,
            rating,
            kind: BranchKind::Line,
            length_km: None,
        })
    }

    pub fn branch(mut self, branch: Branch) -> Self {
        self.grid.branches.push(branch);
        self
    }

    pub fn generator(mut self, id: u32, bus: u32, p_min: f64, p_max: f64, cost: f64) -> Self {
        self.grid.generators.push(Generator {
            id: GenId(id),
            bus: BusId(bus),
            p_min,
            p_max,
            cost_linear: cost,
            cost_constant: 0.0,
            is_conventional: true,
        });
        self
    }

    pub fn load(mut self, id: u32, bus: u32, p_demand: f64) -> Self {
        self.grid.loads.push(Load {
            id: LoadId(id),
            bus: BusId(bus),
            p_demand,
        });
        self
    }

    pub fn build(self) -> Grid {
        self.grid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateId { entity: &'static str, id: u32 },
    DanglingReference { entity: String, bus: BusId },
    SelfLoop { branch: BranchId },
    NonPositiveImpedance { branch: BranchId },
    TransformerKindMismatch { branch: BranchId },
    InvalidValue { entity: String, field: &'static str, value: f64 },
    MissingReference,
    MultipleReference { buses: Vec<BusId> },
    Disconnected { component_sizes: Vec<usize> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { entity, id } => write!(f, "duplicate {entity} id {id}"),
            Violation::DanglingReference { entity, bus } => {
                write!(f, "dangling reference: {entity} refers to unknown bus {}", bus.0)
            }
            Violation::SelfLoop { branch } => write!(f, "branch {} is a self-loop", branch.0),
            Violation::NonPositiveImpedance { branch } => {
                write!(f, "line {} has zero series impedance", branch.0)
            }
            Violation::TransformerKindMismatch { branch } => write!(
                f,
                "branch {} joins different base voltages but is not a transformer",
                branch.0
            ),
            Violation::InvalidValue { entity, field, value } => {
                write!(f, "{entity}: invalid {field} = {value}")
            }
            Violation::MissingReference => write!(f, "no reference bus"),
            Violation::MultipleReference { buses } => {
                let ids: Vec<String> = buses.iter().map(|b| b.0.to_string()).collect();
                write!(f, "multiple reference buses: {}", ids.join(", "))
            }
            Violation::Disconnected { component_sizes } => {
                let sizes: Vec<String> = component_sizes.iter().map(|s| s.to_string()).collect();
                write!(f, "disconnected: component sizes {}", sizes.join(", "))
            }
        }
    }
}

/// Result of [`validate`]; empty means valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn duplicates<I: IntoIterator<Item = u32>>(ids: I) -> Vec<u32> {
    let mut seen = HashSet::new();
    let mut dup = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            dup.insert(id);
        }
    }
    dup.into_iter().collect()
}

fn check_finite(
    out: &mut Vec<Violation>,
    entity: impl Fn() -> String,
    field: &'static str,
    value: f64,
    ok: bool,
) {
    if !value.is_finite() || !ok {
        out.push(Violation::InvalidValue {
            entity: entity(),
            field,
            value,
        });
    }
}

pub fn validate(grid: &Grid) -> ValidationReport {
    let mut out = Vec::new();

    for id in duplicates(grid.buses.iter().map(|b| b.id.0)) {
        out.push(Violation::DuplicateId { entity: "bus", id });
    }
    for id in duplicates(grid.branches.iter().map(|b| b.id.0)) {
        out.push(Violation::DuplicateId { entity: "branch", id });
    }
    for id in duplicates(grid.generators.iter().map(|g| g.id.0)) {
        out.push(Violation::DuplicateId { entity: "generator", id });
    }
    for id in duplicates(grid.loads.iter().map(|l| l.id.0)) {
        out.push(Violation::DuplicateId { entity: "load", id });
    }

    let kv: HashMap<BusId, f64> = grid.buses.iter().map(|b| (b.id, b.base_kv)).collect();

    for bus in &grid.buses {
        let name = || format!("bus {}", bus.id.0);
        check_finite(&mut out, name, "base_kv", bus.base_kv, bus.base_kv > 0.0);
        check_finite(&mut out, name, "shunt_conductance", bus.shunt_conductance, true);
        check_finite(&mut out, name, "shunt_susceptance", bus.shunt_susceptance, true);
    }

    for br in &grid.branches {
        let name = || format!("branch {}", br.id.0);
        let mut dangling = false;
        for bus in [br.src_bus, br.dst_bus] {
            if !kv.contains_key(&bus) {
                out.push(Violation::DanglingReference { entity: name(), bus });
                dangling = true;
            }
        }
        if br.src_bus == br.dst_bus {
            out.push(Violation::SelfLoop { branch: br.id });
        }
        check_finite(
            &mut out,
            name,
            "series_resistance",
            br.series_resistance,
            br.series_resistance >= 0.0,
        );
        check_finite(&mut out, name, "series_reactance", br.series_reactance, true);
        check_finite(
            &mut out,
            name,
            "total_charging_susceptance",
            br.total_charging_susceptance,
            true,
        );
        if let Some(rating) = br.rating {
            check_finite(&mut out, name, "rating", rating, rating > 0.0);
        }
        if let Some(len) = br.length_km {
            check_finite(&mut out, name, "length_km", len, len >= 0.0);
        }
        if br.kind == BranchKind::Line && br.series_impedance().norm() == 0.0 {
            out.push(Violation::NonPositiveImpedance { branch: br.id });
        }
        if !dangling && br.kind == BranchKind::Line && kv[&br.src_bus] != kv[&br.dst_bus] {
            out.push(Violation::TransformerKindMismatch { branch: br.id });
        }
    }

    for g in &grid.generators {
        let name = || format!("generator {}", g.id.0);
        if !kv.contains_key(&g.bus) {
            out.push(Violation::DanglingReference { entity: name(), bus: g.bus });
        }
        check_finite(&mut out, name, "p_min", g.p_min, true);
        check_finite(&mut out, name, "p_max", g.p_max, g.p_max >= g.p_min);
        check_finite(&mut out, name, "cost_linear", g.cost_linear, g.cost_linear >= 0.0);
        check_finite(&mut out, name, "cost_constant", g.cost_constant, true);
    }

    for l in &grid.loads {
        let name = || format!("load {}", l.id.0);
        if !kv.contains_key(&l.bus) {
            out.push(Violation::DanglingReference { entity: name(), bus: l.bus });
        }
        check_finite(&mut out, name, "p_demand", l.p_demand, true);
    }

    let refs = grid.reference_buses();
    match refs.len() {
        0 if !grid.buses.is_empty() => out.push(Violation::MissingReference),
        0 | 1 => {}
        _ => out.push(Violation::MultipleReference { buses: refs }),
    }

    let sizes = CorridorGraph::new(grid).component_sizes();
    if sizes.len() > 1 {
        out.push(Violation::Disconnected {
            component_sizes: sizes,
        });
    }

    ValidationReport { violations: out }
}

/// All parallel branches between one unordered bus pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Corridor {
    /// Smallest id first.
    pub bus_pair: (BusId, BusId),
    /// Sorted, nonempty.
    pub branch_ids: Vec<BranchId>,
    /// Parallel combination of the member impedances; zero if any member is
    /// a short circuit.
    pub equivalent_series_impedance: Complex64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImpedanceError {
    #[error("short-circuit branch: member {0} has zero series impedance")]
    ShortCircuit(usize),
    #[error("no member impedances")]
    Empty,
}

/// Parallel combination `1 / Σ (1 / z_i)`.
pub fn equivalent_series_impedance(impedances: &[Complex64]) -> Result<Complex64, ImpedanceError> {
    if impedances.is_empty() {
        return Err(ImpedanceError::Empty);
    }
    let mut admittance = Complex64::new(0.0, 0.0);
    for (i, z) in impedances.iter().enumerate() {
        if z.norm() == 0.0 {
            return Err(ImpedanceError::ShortCircuit(i));
        }
        admittance += z.inv();
    }
    Ok(admittance.inv())
}

/// Corridor set of the grid, sorted by bus pair. Branches with a dangling
/// terminal are skipped.
pub fn corridors(grid: &Grid) -> Vec<Corridor> {
    CorridorGraph::new(grid).corridors
}

/// Independent cycles of the corridor graph:
/// `|corridors| - |buses| + components`.
pub fn cycle_count(grid: &Grid) -> usize {
    let graph = CorridorGraph::new(grid);
    graph.corridors.len() + graph.component_sizes().len() - grid.buses.len()
}

/// Undirected simple graph over bus indices whose edges are corridors.
#[derive(Debug, Clone)]
pub struct CorridorGraph {
    pub bus_ids: Vec<BusId>,
    pub index: HashMap<BusId, usize>,
    pub corridors: Vec<Corridor>,
    /// Per bus index: `(neighbor index, corridor index)`, sorted by neighbor.
    pub adjacency: Vec<Vec<(usize, usize)>>,
    corridor_of_branch: HashMap<BranchId, usize>,
}

impl CorridorGraph {
    pub fn new(grid: &Grid) -> Self {
        let bus_ids: Vec<BusId> = grid.buses.iter().map(|b| b.id).collect();
        let index: HashMap<BusId, usize> =
            bus_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();

        let mut groups: BTreeMap<(BusId, BusId), Vec<&Branch>> = BTreeMap::new();
        for br in &grid.branches {
            if br.src_bus == br.dst_bus
                || !index.contains_key(&br.src_bus)
                || !index.contains_key(&br.dst_bus)
            {
                continue;
            }
            groups.entry(br.bus_pair()).or_default().push(br);
        }

        let mut corridors = Vec::with_capacity(groups.len());
        let mut adjacency = vec![Vec::new(); bus_ids.len()];
        let mut corridor_of_branch = HashMap::with_capacity(grid.branches.len());
        for (pair, mut members) in groups {
            members.sort_by_key(|b| b.id);
            let impedances: Vec<Complex64> = members.iter().map(|b| b.series_impedance()).collect();
            let equivalent =
                equivalent_series_impedance(&impedances).unwrap_or(Complex64::new(0.0, 0.0));
            let ci = corridors.len();
            for b in &members {
                corridor_of_branch.insert(b.id, ci);
            }
            let (a, b) = (index[&pair.0], index[&pair.1]);
            adjacency[a].push((b, ci));
            adjacency[b].push((a, ci));
            corridors.push(Corridor {
                bus_pair: pair,
                branch_ids: members.iter().map(|b| b.id).collect(),
                equivalent_series_impedance: equivalent,
            });
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }

        Self {
            bus_ids,
            index,
            corridors,
            adjacency,
            corridor_of_branch,
        }
    }

    pub fn len(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bus_ids.is_empty()
    }

    /// Number of distinct neighbouring buses.
    pub fn degree(&self, bus: BusId) -> usize {
        self.index.get(&bus).map_or(0, |&i| self.adjacency[i].len())
    }

    pub fn corridor_of(&self, branch: BranchId) -> Option<&Corridor> {
        self.corridor_of_branch.get(&branch).map(|&ci| &self.corridors[ci])
    }

    /// Connected component label per bus index, labels in order of first
    /// appearance.
    pub fn components(&self) -> Vec<usize> {
        let mut label = vec![usize::MAX; self.len()];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..self.len() {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = next;
            stack.push(start);
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adjacency[u] {
                    if label[v] == usize::MAX {
                        label[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn component_sizes(&self) -> Vec<usize> {
        let label = self.components();
        let count = label.iter().map(|&l| l + 1).max().unwrap_or(0);
        let mut sizes = vec![0; count];
        for l in label {
            sizes[l] += 1;
        }
        sizes
    }

    /// Hop distance (in corridors) from the source set, `None` past `max_depth`.
    pub fn hop_distances(&self, sources: &[usize], max_depth: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        let mut frontier = Vec::new();
        for &s in sources {
            if dist[s].is_none() {
                dist[s] = Some(0);
                frontier.push(s);
            }
        }
        let mut depth = 0;
        while !frontier.is_empty() && depth < max_depth {
            depth += 1;
            let mut next = Vec::new();
            for u in frontier {
                for &(v, _) in &self.adjacency[u] {
                    if dist[v].is_none() {
                        dist[v] = Some(depth);
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        dist
    }

    /// Whether the buses induce a connected subgraph.
    pub fn induces_connected(&self, buses: &BTreeSet<BusId>) -> bool {
        let Some(first) = buses.iter().next() else {
            return false;
        };
        let members: HashSet<usize> = match buses.iter().map(|b| self.index.get(b).copied()).collect()
        {
            Some(m) => m,
            None => return false,
        };
        let mut seen = HashSet::from([self.index[first]]);
        let mut stack = vec![self.index[first]];
        while let Some(u) = stack.pop() {
            for &(v, _) in &self.adjacency[u] {
                if members.contains(&v) && seen.insert(v) {
                    stack.push(v);
                }
            }
        }
        seen.len() == members.len()
    }
}
