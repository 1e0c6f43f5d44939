//! Random grids and brute-force oracles shared by the integration tests.
//!
//! Every generated quantity is a dyadic rational of small magnitude, so sums
//! over any order are exact in `f64` and conservation can be checked with
//! `==`.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use gridreduce::{Branch, BranchId, BranchKind, Bus, BusId, FeatureSet, GenId, Generator, Grid, Load, LoadId};
use num_complex::Complex64;
use proptest::test_runner::Config;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Property runs use at least 200 instances.
pub fn cases(n: u32) -> Config {
    Config {
        cases: std::env::var("PROPTEST_CASES").ok().and_then(|v| v.parse().ok()).unwrap_or(0).max(n).max(200),
        ..Config::default()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub buses: usize,
    /// Corridors added on top of the spanning tree.
    pub extra: usize,
    /// Chance that a corridor gets a parallel twin.
    pub parallel: f64,
    pub generators: usize,
    /// Chance that a branch gets a finite rating.
    pub rated: f64,
    /// Chance that a branch is a transformer (tap changer, same voltage).
    pub transformers: f64,
    /// Chance that a generator is conventional.
    pub conventional: f64,
}

impl Default for Shape {
    fn default() -> Self {
        Self {
            buses: 12,
            extra: 4,
            parallel: 0.1,
            generators: 3,
            rated: 0.2,
            transformers: 0.05,
            conventional: 0.3,
        }
    }
}

fn dyadic(rng: &mut ChaCha8Rng, lo: u32, hi: u32, denom: f64) -> f64 {
    rng.gen_range(lo..=hi) as f64 / denom
}

/// Connected grid: a random spanning tree plus `extra` chords, bus 1 is the
/// reference. Total capacity is at least twice the total demand.
pub fn random_grid(seed: u64, shape: Shape) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.buses.max(2);
    let buses: Vec<Bus> = (1..=n as u32)
        .map(|id| Bus {
            id: BusId(id),
            base_kv: 110.0,
            shunt_conductance: 0.0,
            shunt_susceptance: if rng.gen_bool(0.2) { dyadic(&mut rng, 1, 64, 1024.0) } else { 0.0 },
            is_reference: id == 1,
        })
        .collect();

    let mut pairs: Vec<(u32, u32)> = (2..=n as u32).map(|i| (rng.gen_range(1..i), i)).collect();
    let mut tries = 0;
    while pairs.len() < n - 1 + shape.extra && tries < 50 * (shape.extra + 1) {
        tries += 1;
        let a = rng.gen_range(1..=n as u32);
        let b = rng.gen_range(1..=n as u32);
        let p = (a.min(b), a.max(b));
        if a != b && !pairs.iter().any(|q| (q.0.min(q.1), q.0.max(q.1)) == p) {
            pairs.push(p);
        }
    }
    let mut all = Vec::new();
    for &(a, b) in &pairs {
        all.push((a, b));
        if rng.gen_bool(shape.parallel) {
            all.push((b, a));
        }
    }

    let mut branches = Vec::new();
    for (k, &(a, b)) in all.iter().enumerate() {
        let x = dyadic(&mut rng, 1, 256, 4.0);
        let kind = if rng.gen_bool(shape.transformers) {
            BranchKind::Transformer
        } else {
            BranchKind::Line
        };
        branches.push(Branch {
            id: BranchId(k as u32 + 1),
            src_bus: BusId(a),
            dst_bus: BusId(b),
            series_resistance: x / 8.0,
            series_reactance: x,
            total_charging_susceptance: if rng.gen_bool(0.3) {
                dyadic(&mut rng, 0, 64, 1024.0) - 1.0 / 64.0
            } else {
                0.0
            },
            rating: rng.gen_bool(shape.rated).then(|| dyadic(&mut rng, 40, 400, 1.0)),
            kind,
            length_km: rng.gen_bool(0.2).then(|| dyadic(&mut rng, 1, 400, 4.0)),
        });
    }
    let mut loads = Vec::new();
    let load_buses: Vec<u32> = (1..=n as u32).filter(|_| rng.gen_bool(0.6)).collect();
    for (i, bus) in load_buses.into_iter().enumerate() {
        loads.push(Load {
            id: LoadId(i as u32 + 1),
            bus: BusId(bus),
            p_demand: dyadic(&mut rng, 4, 400, 4.0),
        });
    }
    let demand: f64 = loads.iter().map(|l| l.p_demand).sum();
    let g = shape.generators.max(1);
    let share = ((2.0 * demand / g as f64).ceil() + 1.0).max(8.0);
    let generators = (0..g)
        .map(|i| Generator {
            id: GenId(i as u32 + 1),
            bus: BusId(rng.gen_range(1..=n as u32)),
            p_min: 0.0,
            p_max: share + dyadic(&mut rng, 0, 64, 2.0),
            cost_linear: dyadic(&mut rng, 8, 400, 4.0),
            cost_constant: dyadic(&mut rng, 0, 64, 4.0),
            is_conventional: rng.gen_bool(shape.conventional),
        })
        .collect();

    Grid {
        name: format!("random{seed}"),
        buses,
        branches,
        generators,
        loads,
    }
}

/// Random connected bus subsets of size 2..=max grown from random roots,
/// each with a random member as representative.
pub fn random_subsets(grid: &Grid, seed: u64, count: usize, max: usize) -> Vec<(BTreeSet<BusId>, BusId)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let adj = adjacency(grid);
    let ids: Vec<BusId> = grid.buses.iter().map(|b| b.id).collect();
    let mut out = Vec::new();
    for _ in 0..count {
        let root = *ids.choose(&mut rng).expect("nonempty grid");
        let target = rng.gen_range(2..=max.max(2));
        let mut set = BTreeSet::from([root]);
        let mut frontier: Vec<BusId> = adj[&root].iter().copied().collect();
        while set.len() < target && !frontier.is_empty() {
            let k = rng.gen_range(0..frontier.len());
            let v = frontier.swap_remove(k);
            if set.insert(v) {
                frontier.extend(adj[&v].iter().copied().filter(|w| !set.contains(w)));
            }
        }
        if set.len() >= 2 {
            let members: Vec<BusId> = set.iter().copied().collect();
            let rep = *members.choose(&mut rng).expect("nonempty");
            out.push((set, rep));
        }
    }
    out
}

pub fn adjacency(grid: &Grid) -> BTreeMap<BusId, BTreeSet<BusId>> {
    let mut adj: BTreeMap<BusId, BTreeSet<BusId>> = grid.buses.iter().map(|b| (b.id, BTreeSet::new())).collect();
    for br in &grid.branches {
        adj.entry(br.src_bus).or_default().insert(br.dst_bus);
        adj.entry(br.dst_bus).or_default().insert(br.src_bus);
    }
    adj
}

pub struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut y = x;
        while self.parent[y] != r {
            let next = self.parent[y];
            self.parent[y] = r;
            y = next;
        }
        r
    }

    /// False when already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        self.parent[ra] = rb;
        ra != rb
    }
}

fn positions(grid: &Grid) -> BTreeMap<BusId, usize> {
    grid.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect()
}

/// Branch lists and parallel equivalent impedance per unordered bus pair.
pub fn corridor_oracle(grid: &Grid) -> BTreeMap<(BusId, BusId), (BTreeSet<BranchId>, Complex64)> {
    let mut acc: BTreeMap<(BusId, BusId), (BTreeSet<BranchId>, Complex64)> = BTreeMap::new();
    for br in &grid.branches {
        let key = (br.src_bus.min(br.dst_bus), br.src_bus.max(br.dst_bus));
        let e = acc.entry(key).or_insert((BTreeSet::new(), Complex64::new(0.0, 0.0)));
        e.0.insert(br.id);
        e.1 += Complex64::new(1.0, 0.0) / Complex64::new(br.series_resistance, br.series_reactance);
    }
    acc.into_iter()
        .map(|(k, (ids, y))| (k, (ids, Complex64::new(1.0, 0.0) / y)))
        .collect()
}

/// Component sizes by union-find over branch endpoints, sorted descending.
pub fn component_sizes(grid: &Grid) -> Vec<usize> {
    let pos = positions(grid);
    let mut uf = UnionFind::new(grid.buses.len());
    for br in &grid.branches {
        uf.union(pos[&br.src_bus], pos[&br.dst_bus]);
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..grid.buses.len() {
        *counts.entry(uf.find(i)).or_default() += 1;
    }
    let mut sizes: Vec<usize> = counts.into_values().collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

/// Chords of a spanning forest of the corridor graph.
pub fn cycle_oracle(grid: &Grid) -> usize {
    let pos = positions(grid);
    let mut uf = UnionFind::new(grid.buses.len());
    corridor_oracle(grid)
        .keys()
        .filter(|(a, b)| !uf.union(pos[a], pos[b]))
        .count()
}

/// All-pairs hop distances over corridors.
pub fn floyd_warshall(grid: &Grid) -> (Vec<BusId>, Vec<Vec<Option<usize>>>) {
    let ids: Vec<BusId> = grid.buses.iter().map(|b| b.id).collect();
    let pos = positions(grid);
    let n = ids.len();
    let mut d = vec![vec![None; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = Some(0);
    }
    for br in &grid.branches {
        let (a, b) = (pos[&br.src_bus], pos[&br.dst_bus]);
        d[a][b] = Some(1);
        d[b][a] = Some(1);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(x), Some(y)) = (d[i][k], d[k][j]) {
                    if d[i][j].map_or(true, |cur| x + y < cur) {
                        d[i][j] = Some(x + y);
                    }
                }
            }
        }
    }
    (ids, d)
}

fn contains_feature(grid: &Grid, features: &FeatureSet, buses: &BTreeSet<BusId>, rep: BusId) -> bool {
    buses.iter().any(|b| *b != rep && features.has_bus(*b))
        || grid
            .branches
            .iter()
            .any(|br| buses.contains(&br.src_bus) && buses.contains(&br.dst_bus) && features.has_branch(br.id))
}

/// Topology selection by deleting each corridor in turn and checking
/// connectivity, with the small-side, feature and maximality rules applied
/// directly. Returns `(buses, representative)` sorted by representative.
pub fn bridge_oracle(grid: &Grid, features: &FeatureSet, small_limit: usize) -> Vec<(BTreeSet<BusId>, BusId)> {
    let corridors: Vec<(BusId, BusId)> = corridor_oracle(grid).into_keys().collect();
    let reference: BTreeSet<BusId> = grid.buses.iter().filter(|b| b.is_reference).map(|b| b.id).collect();
    let reach = |start: BusId, skip: Option<usize>| -> BTreeSet<BusId> {
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for (k, &(a, b)) in corridors.iter().enumerate() {
                if Some(k) == skip {
                    continue;
                }
                let v = if a == u {
                    b
                } else if b == u {
                    a
                } else {
                    continue;
                };
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        seen
    };

    let mut candidates: Vec<(BTreeSet<BusId>, BusId)> = Vec::new();
    for (k, &(a, b)) in corridors.iter().enumerate() {
        let side_a = reach(a, Some(k));
        if side_a.contains(&b) {
            continue;
        }
        let side_b = reach(b, Some(k));
        if side_a.len().min(side_b.len()) > small_limit {
            continue;
        }
        let a_small = match side_a.len().cmp(&side_b.len()) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => {
                let ra = side_a.iter().any(|x| reference.contains(x));
                let rb = side_b.iter().any(|x| reference.contains(x));
                if ra != rb {
                    rb
                } else {
                    side_a.first() > side_b.first()
                }
            }
        };
        let (small, attach) = if a_small { (side_a, b) } else { (side_b, a) };
        let mut buses = small;
        buses.insert(attach);
        if !contains_feature(grid, features, &buses, attach) {
            candidates.push((buses, attach));
        }
    }
    let removed = |c: &(BTreeSet<BusId>, BusId)| -> BTreeSet<BusId> {
        c.0.iter().copied().filter(|x| *x != c.1).collect()
    };
    let mut out: Vec<(BTreeSet<BusId>, BusId)> = candidates
        .iter()
        .filter(|c| {
            let rc = removed(c);
            !candidates.iter().any(|d| {
                let rd = removed(d);
                rc.len() < rd.len() && rc.is_subset(&rd)
            })
        })
        .cloned()
        .collect();
    out.sort_by(|x, y| (x.1, &x.0).cmp(&(y.1, &y.0)));
    out
}

/// Market clusters as connected components of each seed in the subgraph of
/// non-feature buses priced within `delta` of the seed, joined by corridors
/// free of feature branches. Seeds are buses of corridor degree at least two
/// in ascending id.
pub fn market_oracle(
    grid: &Grid,
    features: &FeatureSet,
    lmp: &BTreeMap<BusId, f64>,
    delta: f64,
) -> Vec<(BusId, BTreeSet<BusId>)> {
    let corridors = corridor_oracle(grid);
    let mut degree: BTreeMap<BusId, usize> = BTreeMap::new();
    for (a, b) in corridors.keys() {
        *degree.entry(*a).or_default() += 1;
        *degree.entry(*b).or_default() += 1;
    }
    let open: Vec<(BusId, BusId)> = corridors.keys().copied().collect();
    let closed: BTreeSet<BusId> = grid
        .branches
        .iter()
        .filter(|b| features.has_branch(b.id))
        .flat_map(|b| [b.src_bus, b.dst_bus])
        .chain(features.feature_buses())
        .collect();
    let mut out = Vec::new();
    for (&seed, _) in degree.iter().filter(|(b, d)| **d >= 2 && !closed.contains(b)) {
        let Some(&price) = lmp.get(&seed) else { continue };
        let ok = |b: BusId| !closed.contains(&b) && lmp.get(&b).is_some_and(|l| (l - price).abs() <= delta);
        let mut members = BTreeSet::from([seed]);
        let mut changed = true;
        while changed {
            changed = false;
            for &(a, b) in &open {
                for (u, v) in [(a, b), (b, a)] {
                    if members.contains(&u) && !members.contains(&v) && ok(v) {
                        members.insert(v);
                        changed = true;
                    }
                }
            }
        }
        if members.len() >= 2 {
            out.push((seed, members));
        }
    }
    out
}

/// DC-OPF optimum by enumerating vertices of the dispatch polytope after
/// eliminating angles with the injection shift factors. `None` when
/// infeasible. Intended for a handful of generators.
pub fn lp_vertex_oracle(grid: &Grid) -> Option<f64> {
    let pos = positions(grid);
    let n = grid.buses.len();
    let reference = grid.buses.iter().position(|b| b.is_reference).expect("reference bus");
    let mut demand = vec![0.0; n];
    for l in &grid.loads {
        demand[pos[&l.bus]] += l.p_demand;
    }
    for (i, b) in grid.buses.iter().enumerate() {
        demand[i] += b.shunt_conductance * b.base_kv * b.base_kv;
    }
    let lines: Vec<(usize, usize, f64, Option<f64>)> = grid
        .branches
        .iter()
        .map(|br| {
            let (s, d) = (pos[&br.src_bus], pos[&br.dst_bus]);
            let kv = grid.buses[s].base_kv;
            let (r, x) = (br.series_resistance, br.series_reactance);
            (s, d, kv * kv * x / (r * r + x * x), br.rating)
        })
        .collect();

    // Angles from injections: B θ = p with θ_ref = 0.
    let mut bmat = vec![vec![0.0; n]; n];
    for &(s, d, b, _) in &lines {
        bmat[s][s] += b;
        bmat[d][d] += b;
        bmat[s][d] -= b;
        bmat[d][s] -= b;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| i != reference).collect();
    let reduced: Vec<Vec<f64>> = keep.iter().map(|&i| keep.iter().map(|&j| bmat[i][j]).collect()).collect();
    let inverse = invert(&reduced)?;
    // Flow on line k per MW injected at bus j (withdrawn at the reference).
    let shift: Vec<Vec<f64>> = lines
        .iter()
        .map(|&(s, d, b, _)| {
            (0..n)
                .map(|j| {
                    let Some(col) = keep.iter().position(|&x| x == j) else { return 0.0 };
                    let theta = |bus: usize| keep.iter().position(|&x| x == bus).map_or(0.0, |r| inverse[r][col]);
                    b * (theta(s) - theta(d))
                })
                .collect()
        })
        .collect();

    let gens = &grid.generators;
    let g = gens.len();
    let total: f64 = demand.iter().sum();
    let base_flow: Vec<f64> = shift.iter().map(|row| -row.iter().zip(&demand).map(|(a, d)| a * d).sum::<f64>()).collect();
    // Inequalities a·P ≤ c.
    let mut ineq: Vec<(Vec<f64>, f64)> = Vec::new();
    for (i, gen) in gens.iter().enumerate() {
        let mut e = vec![0.0; g];
        e[i] = 1.0;
        ineq.push((e.clone(), gen.p_max));
        e[i] = -1.0;
        ineq.push((e, -gen.p_min));
    }
    for (k, &(_, _, _, rating)) in lines.iter().enumerate() {
        if let Some(r) = rating {
            let row: Vec<f64> = gens.iter().map(|gen| shift[k][pos[&gen.bus]]).collect();
            ineq.push((row.clone(), r - base_flow[k]));
            ineq.push((row.iter().map(|v| -v).collect(), r + base_flow[k]));
        }
    }

    let scale = 1.0 + total.abs() + gens.iter().map(|x| x.p_max).sum::<f64>();
    let feasible = |p: &[f64]| {
        (p.iter().sum::<f64>() - total).abs() <= 1e-7 * scale
            && ineq
                .iter()
                .all(|(a, c)| a.iter().zip(p).map(|(x, y)| x * y).sum::<f64>() <= c + 1e-7 * scale)
    };
    let constant: f64 = gens.iter().map(|x| x.cost_constant).sum();
    let mut best: Option<f64> = None;
    let mut choose = vec![0usize; g.saturating_sub(1)];
    let mut visit = |active: &[usize]| {
        let mut rows: Vec<Vec<f64>> = vec![vec![1.0; g]];
        let mut rhs = vec![total];
        for &k in active {
            rows.push(ineq[k].0.clone());
            rhs.push(ineq[k].1);
        }
        if let Some(p) = solve_square(&rows, &rhs) {
            if feasible(&p) {
                let cost = gens.iter().zip(&p).map(|(x, v)| x.cost_linear * v).sum::<f64>() + constant;
                best = Some(best.map_or(cost, |b: f64| b.min(cost)));
            }
        }
    };
    combinations(ineq.len(), g.saturating_sub(1), &mut choose, 0, 0, &mut visit);
    best
}

fn combinations(n: usize, k: usize, buf: &mut Vec<usize>, depth: usize, start: usize, f: &mut impl FnMut(&[usize])) {
    if depth == k {
        f(&buf[..k]);
        return;
    }
    for i in start..n {
        buf[depth] = i;
        combinations(n, k, buf, depth + 1, i + 1, f);
    }
}

/// Gaussian elimination with partial pivoting; `None` when singular.
pub fn solve_square(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(row, v)| row.iter().copied().chain([*v]).collect()).collect();
    let norm = a.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() <= 1e-10 * norm {
            return None;
        }
        m.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let f = m[row][col] / m[col][col];
                if f != 0.0 {
                    for c in col..=n {
                        m[row][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    Some((0..n).map(|i| m[i][n] / m[i][i]).collect())
}

fn invert(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cols.push(solve_square(a, &e)?);
    }
    Some((0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect())
}
