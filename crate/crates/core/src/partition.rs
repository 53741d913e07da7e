//! Balanced two-way min-cut partitioning.
//!
//! [`kl_partition`] is a constrained Kernighan-Lin heuristic: pair swaps are
//! picked by gain, locked once tried, and any tentative swap that would break
//! a balance constraint is skipped rather than repaired. Each pass keeps the
//! best prefix of its swap sequence. [`brute_force_min_cut`] enumerates all
//! bipartitions of small graphs and is the reference the heuristic is tested
//! against.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalized_cut_capacity, CompetitionGraph};
use crate::types::{derive_seed, ItemId};

/// Upper bounds on relative imbalance `|x_A - x_B| / (x_A + x_B)`. A split is
/// feasible only when every imbalance is strictly below its bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceConstraints {
    pub delta_n: f64,
    pub delta_p: f64,
    pub delta_g: f64,
}

impl Default for BalanceConstraints {
    fn default() -> Self {
        BalanceConstraints { delta_n: 0.05, delta_p: 0.15, delta_g: 0.20 }
    }
}

impl BalanceConstraints {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("delta_n", self.delta_n), ("delta_p", self.delta_p), ("delta_g", self.delta_g)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn admits(&self, report: &BalanceReport) -> bool {
        report.node < self.delta_n && report.order < self.delta_p && report.gmv < self.delta_g
    }
}

/// Relative node, order and GMV imbalance between the two sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub node: f64,
    pub order: f64,
    pub gmv: f64,
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let total = a + b;
    if total == 0.0 {
        0.0
    } else {
        (a - b).abs() / total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub side_a: BTreeSet<ItemId>,
    pub side_b: BTreeSet<ItemId>,
    pub cut_weight: f64,
    pub balance_report: BalanceReport,
}

impl Partition {
    /// Builds the partition whose side A is `side_a` and side B is every other
    /// node; cut weight and balance are recomputed from the graph.
    pub fn from_side_a(graph: &CompetitionGraph, side_a: BTreeSet<ItemId>) -> Result<Partition> {
        if let Some(unknown) = side_a.iter().find(|id| !graph.nodes.contains_key(*id)) {
            return Err(Error::InvalidPartition(format!("{unknown} is not a graph node")));
        }
        let side_b: BTreeSet<ItemId> = graph.nodes.keys().filter(|id| !side_a.contains(*id)).cloned().collect();
        let sum = |set: &BTreeSet<ItemId>, f: &dyn Fn(&crate::graph::NodeMetrics) -> f64| -> f64 {
            set.iter().map(|id| f(&graph.nodes[id])).sum()
        };
        let balance_report = BalanceReport {
            node: relative_gap(side_a.len() as f64, side_b.len() as f64),
            order: relative_gap(sum(&side_a, &|m| m.orders as f64), sum(&side_b, &|m| m.orders as f64)),
            gmv: relative_gap(sum(&side_a, &|m| m.gmv), sum(&side_b, &|m| m.gmv)),
        };
        let cut_weight = graph.cut_weight(&side_a);
        Ok(Partition { side_a, side_b, cut_weight, balance_report })
    }

    pub fn side_of(&self, id: &ItemId) -> Option<Side> {
        if self.side_a.contains(id) {
            Some(Side::A)
        } else if self.side_b.contains(id) {
            Some(Side::B)
        } else {
            None
        }
    }

    pub fn side(&self, side: Side) -> &BTreeSet<ItemId> {
        match side {
            Side::A => &self.side_a,
            Side::B => &self.side_b,
        }
    }

    /// Sides are disjoint and together cover exactly the graph's nodes.
    pub fn check_covers(&self, graph: &CompetitionGraph) -> Result<()> {
        if let Some(id) = self.side_a.intersection(&self.side_b).next() {
            return Err(Error::InvalidPartition(format!("{id} is on both sides")));
        }
        if let Some(id) = graph.nodes.keys().find(|id| !self.side_a.contains(*id) && !self.side_b.contains(*id)) {
            return Err(Error::InvalidPartition(format!("{id} is on neither side")));
        }
        if let Some(id) = self.side_a.iter().chain(&self.side_b).find(|id| !graph.nodes.contains_key(*id)) {
            return Err(Error::InvalidPartition(format!("{id} is not a graph node")));
        }
        Ok(())
    }
}

/// Dense index view of a graph; index order equals item-id order.
struct Indexed<'g> {
    ids: Vec<&'g ItemId>,
    adj: Vec<Vec<(usize, f64)>>,
    orders: Vec<f64>,
    gmv: Vec<f64>,
    total_orders: f64,
    total_gmv: f64,
}

impl<'g> Indexed<'g> {
    fn new(graph: &'g CompetitionGraph) -> Self {
        let ids: Vec<&ItemId> = graph.nodes.keys().collect();
        let index: HashMap<&ItemId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut adj = vec![Vec::new(); ids.len()];
        for (u, v, w) in graph.edges() {
            let (iu, iv) = (index[u], index[v]);
            adj[iu].push((iv, w));
            adj[iv].push((iu, w));
        }
        for list in &mut adj {
            list.sort_by_key(|&(j, _)| j);
        }
        let orders: Vec<f64> = graph.nodes.values().map(|m| m.orders as f64).collect();
        let gmv: Vec<f64> = graph.nodes.values().map(|m| m.gmv).collect();
        Indexed { total_orders: orders.iter().sum(), total_gmv: gmv.iter().sum(), ids, adj, orders, gmv }
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn weight(&self, u: usize, v: usize) -> f64 {
        match self.adj[u].binary_search_by_key(&v, |&(j, _)| j) {
            Ok(k) => self.adj[u][k].1,
            Err(_) => 0.0,
        }
    }

    fn cut(&self, in_a: &[bool]) -> f64 {
        let mut cut = 0.0;
        for u in 0..self.len() {
            for &(v, w) in &self.adj[u] {
                if u < v && in_a[u] != in_a[v] {
                    cut += w;
                }
            }
        }
        cut
    }

    fn side_a_ids(&self, in_a: &[bool]) -> BTreeSet<ItemId> {
        (0..self.len()).filter(|&i| in_a[i]).map(|i| self.ids[i].clone()).collect()
    }
}

/// Running side-A totals for O(1) balance checks.
#[derive(Debug, Clone, Copy)]
struct SideTotals {
    nodes: f64,
    orders: f64,
    gmv: f64,
}

impl SideTotals {
    fn of(ix: &Indexed, in_a: &[bool]) -> Self {
        let mut t = SideTotals { nodes: 0.0, orders: 0.0, gmv: 0.0 };
        for i in (0..ix.len()).filter(|&i| in_a[i]) {
            t.nodes += 1.0;
            t.orders += ix.orders[i];
            t.gmv += ix.gmv[i];
        }
        t
    }

    /// Totals after moving `a` from A to B and `b` from B to A.
    fn swapped(&self, ix: &Indexed, a: usize, b: usize) -> Self {
        SideTotals {
            nodes: self.nodes,
            orders: self.orders - ix.orders[a] + ix.orders[b],
            gmv: self.gmv - ix.gmv[a] + ix.gmv[b],
        }
    }

    fn feasible(&self, ix: &Indexed, c: &BalanceConstraints) -> bool {
        let n = ix.len() as f64;
        relative_gap(self.nodes, n - self.nodes) < c.delta_n
            && relative_gap(self.orders, ix.total_orders - self.orders) < c.delta_p
            && relative_gap(self.gmv, ix.total_gmv - self.gmv) < c.delta_g
    }
}

/// Cut weight before and after each completed improvement pass.
#[derive(Debug, Clone, PartialEq)]
pub struct KlTrace {
    pub initial_cut: f64,
    pub pass_cuts: Vec<f64>,
}

pub const DEFAULT_INIT_RETRIES: usize = 50;

pub fn kl_partition(graph: &CompetitionGraph, constraints: &BalanceConstraints, seed: u64, max_passes: usize) -> Result<Partition> {
    kl_partition_traced(graph, constraints, seed, max_passes).map(|(p, _)| p)
}

pub fn kl_partition_traced(
    graph: &CompetitionGraph,
    constraints: &BalanceConstraints,
    seed: u64,
    max_passes: usize,
) -> Result<(Partition, KlTrace)> {
    constraints.validate()?;
    let ix = Indexed::new(graph);
    let n = ix.len();
    if n < 2 {
        return Err(Error::InfeasibleConstraints(format!("a graph with {n} node(s) cannot be split")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6b1]));
    let mut order: Vec<usize> = (0..n).collect();
    let mut in_a = vec![false; n];
    let mut found = false;
    for _ in 0..DEFAULT_INIT_RETRIES {
        order.shuffle(&mut rng);
        in_a.iter_mut().for_each(|v| *v = false);
        for &i in &order[..n / 2] {
            in_a[i] = true;
        }
        if SideTotals::of(&ix, &in_a).feasible(&ix, constraints) {
            found = true;
            break;
        }
    }
    if !found {
        return Err(Error::InfeasibleConstraints(format!(
            "no random balanced split of {n} nodes met the constraints after {DEFAULT_INIT_RETRIES} attempts"
        )));
    }

    let initial_cut = ix.cut(&in_a);
    let mut trace = KlTrace { initial_cut, pass_cuts: Vec::new() };
    for _ in 0..max_passes {
        if !kl_pass(&ix, constraints, &mut in_a) {
            break;
        }
        trace.pass_cuts.push(ix.cut(&in_a));
    }

    let partition = Partition::from_side_a(graph, ix.side_a_ids(&in_a))?;
    debug_assert!(constraints.admits(&partition.balance_report));
    Ok((partition, trace))
}

/// One Kernighan-Lin pass. Returns false when no improving prefix exists,
/// leaving `in_a` unchanged.
fn kl_pass(ix: &Indexed, constraints: &BalanceConstraints, in_a: &mut [bool]) -> bool {
    let n = ix.len();
    let mut d: Vec<f64> = (0..n)
        .map(|u| {
            ix.adj[u].iter().map(|&(v, w)| if in_a[u] == in_a[v] { -w } else { w }).sum()
        })
        .collect();
    let mut locked = vec![false; n];
    let mut totals = SideTotals::of(ix, in_a);
    let mut swaps: Vec<(usize, usize)> = Vec::new();
    let mut cumulative = 0.0;
    let mut best_gain = 0.0;
    let mut best_len = 0;

    loop {
        let mut side_a: Vec<usize> = (0..n).filter(|&i| !locked[i] && in_a[i]).collect();
        let mut side_b: Vec<usize> = (0..n).filter(|&i| !locked[i] && !in_a[i]).collect();
        if side_a.is_empty() || side_b.is_empty() {
            break;
        }
        let by_d = |x: &usize, y: &usize| d[*y].total_cmp(&d[*x]).then(x.cmp(y));
        side_a.sort_by(by_d);
        side_b.sort_by(by_d);

        // Edge weights are nonnegative, so D_a + D_b bounds the gain of (a, b).
        let mut best: Option<(f64, usize, usize)> = None;
        for &a in &side_a {
            if let Some((g, _, _)) = best {
                if d[a] + d[side_b[0]] < g {
                    break;
                }
            }
            for &b in &side_b {
                if let Some((g, _, _)) = best {
                    if d[a] + d[b] < g {
                        break;
                    }
                }
                if !totals.swapped(ix, a, b).feasible(ix, constraints) {
                    continue;
                }
                let gain = d[a] + d[b] - 2.0 * ix.weight(a, b);
                let better = match best {
                    None => true,
                    Some((g, ba, bb)) => gain > g || (gain == g && (a, b) < (ba, bb)),
                };
                if better {
                    best = Some((gain, a, b));
                }
            }
        }
        let Some((gain, a, b)) = best else { break };

        locked[a] = true;
        locked[b] = true;
        totals = totals.swapped(ix, a, b);
        in_a[a] = false;
        in_a[b] = true;
        for (moved, old_side_a) in [(a, true), (b, false)] {
            for &(x, w) in &ix.adj[moved] {
                if locked[x] {
                    continue;
                }
                if in_a[x] == old_side_a {
                    d[x] += 2.0 * w;
                } else {
                    d[x] -= 2.0 * w;
                }
            }
        }
        swaps.push((a, b));
        cumulative += gain;
        if cumulative > best_gain {
            best_gain = cumulative;
            best_len = swaps.len();
        }
    }

    for &(a, b) in swaps[best_len..].iter().rev() {
        in_a[a] = true;
        in_a[b] = false;
    }
    best_len > 0
}

/// Runs [`kl_partition`] from `restarts` derived seeds in parallel and keeps
/// the lowest cut (ties: lexicographically smallest side A).
pub fn kl_partition_best_of(
    graph: &CompetitionGraph,
    constraints: &BalanceConstraints,
    seed: u64,
    max_passes: usize,
    restarts: usize,
) -> Result<Partition> {
    let results: Vec<Result<Partition>> = (0..restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| kl_partition(graph, constraints, derive_seed(seed, &[r]), max_passes))
        .collect();
    let mut best: Option<Partition> = None;
    let mut last_err = None;
    for r in results {
        match r {
            Ok(p) => {
                let better = best.as_ref().is_none_or(|b| {
                    p.cut_weight < b.cut_weight || (p.cut_weight == b.cut_weight && p.side_a.iter().lt(b.side_a.iter()))
                });
                if better {
                    best = Some(p);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one restart ran"))
}

pub const BRUTE_FORCE_LIMIT: usize = 20;

/// Exhaustive constrained min cut; ties go to the lexicographically smallest
/// side A.
pub fn brute_force_min_cut(graph: &CompetitionGraph, constraints: &BalanceConstraints) -> Result<Partition> {
    constraints.validate()?;
    let ix = Indexed::new(graph);
    let n = ix.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge { nodes: n, limit: BRUTE_FORCE_LIMIT });
    }
    let edges: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|u| ix.adj[u].iter().filter(move |&&(v, _)| u < v).map(move |&(v, w)| (u, v, w)))
        .collect();

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut in_a = vec![false; n];
    for mask in 0u32..(1u32 << n) {
        for (i, slot) in in_a.iter_mut().enumerate() {
            *slot = mask & (1 << i) != 0;
        }
        if !SideTotals::of(&ix, &in_a).feasible(&ix, constraints) {
            continue;
        }
        let cut: f64 = edges.iter().filter(|(u, v, _)| in_a[*u] != in_a[*v]).map(|(_, _, w)| w).sum();
        let better = match &best {
            None => true,
            Some((c, _)) if cut < *c => true,
            Some((c, members)) if cut == *c => {
                let mine: Vec<usize> = (0..n).filter(|&i| in_a[i]).collect();
                mine < *members
            }
            _ => false,
        };
        if better {
            best = Some((cut, (0..n).filter(|&i| in_a[i]).collect()));
        }
    }
    let (_, members) = best.ok_or_else(|| {
        Error::InfeasibleConstraints(format!("none of the bipartitions of {n} nodes meets the constraints"))
    })?;
    Partition::from_side_a(graph, members.iter().map(|&i| ix.ids[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingEdge {
    pub u: ItemId,
    pub v: ItemId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutualExclusionReport {
    pub passed: bool,
    pub capacity: f64,
    pub epsilon: f64,
    pub cut_weight: f64,
    pub total_weight: f64,
    /// Heaviest crossing edges, at most [`TOP_CROSSING_EDGES`].
    pub top_crossing: Vec<CrossingEdge>,
}

pub const TOP_CROSSING_EDGES: usize = 10;

/// Passes when the normalized cut capacity is at most `epsilon_mutual`.
pub fn validate_mutual_exclusion(
    graph: &CompetitionGraph,
    partition: &Partition,
    epsilon_mutual: f64,
) -> Result<MutualExclusionReport> {
    let capacity = normalized_cut_capacity(graph, partition)?;
    let top_crossing = graph
        .crossing_edges(&partition.side_a)
        .into_iter()
        .take(TOP_CROSSING_EDGES)
        .map(|(u, v, weight)| CrossingEdge { u, v, weight })
        .collect();
    Ok(MutualExclusionReport {
        passed: capacity <= epsilon_mutual,
        capacity,
        epsilon: epsilon_mutual,
        cut_weight: graph.cut_weight(&partition.side_a),
        total_weight: graph.total_weight(),
        top_crossing,
    })
}
