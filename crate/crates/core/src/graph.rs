//! Item competition graph built from request-level co-exposure.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{DailyPanel, ItemSpec};
use crate::partition::Partition;
use crate::types::{CategoryPath, DayWindow, ItemId, Metric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub pv: u64,
    pub orders: u64,
    pub gmv: f64,
    pub price: f64,
    pub category_path: CategoryPath,
}

impl NodeMetrics {
    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Orders => self.orders as f64,
            Metric::Gmv => self.gmv,
        }
    }
}

/// Undirected weighted graph. Edges are stored once under `(min, max)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompetitionGraph {
    pub nodes: BTreeMap<ItemId, NodeMetrics>,
    edges: BTreeMap<(ItemId, ItemId), f64>,
}

impl CompetitionGraph {
    pub fn new(nodes: BTreeMap<ItemId, NodeMetrics>) -> Self {
        CompetitionGraph { nodes, edges: BTreeMap::new() }
    }

    /// Adds `weight` to edge `{u, v}`. Zero weights are not stored.
    pub fn add_weight(&mut self, u: &ItemId, v: &ItemId, weight: f64) -> Result<()> {
        if u == v {
            return Err(Error::InvalidInput(format!("self-loop on {u}")));
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::InvalidInput(format!("edge {u}-{v}: weight must be >= 0")));
        }
        for id in [u, v] {
            if !self.nodes.contains_key(id) {
                return Err(Error::UnknownItem(id.clone()));
            }
        }
        if weight == 0.0 {
            return Ok(());
        }
        *self.edges.entry(canonical(u, v)).or_insert(0.0) += weight;
        Ok(())
    }

    pub fn weight(&self, u: &ItemId, v: &ItemId) -> f64 {
        self.edges.get(&canonical(u, v)).copied().unwrap_or(0.0)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&ItemId, &ItemId, f64)> {
        self.edges.iter().map(|((u, v), w)| (u, v, *w))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.values().fold(0.0, |acc, w| acc + w)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Crossing weight of a side assignment.
    pub fn cut_weight(&self, side_a: &BTreeSet<ItemId>) -> f64 {
        self.edges()
            .filter(|(u, v, _)| side_a.contains(*u) != side_a.contains(*v))
            .fold(0.0, |acc, (_, _, w)| acc + w)
    }

    /// Crossing edges ordered by descending weight, then by endpoints.
    pub fn crossing_edges(&self, side_a: &BTreeSet<ItemId>) -> Vec<(ItemId, ItemId, f64)> {
        let mut out: Vec<_> = self
            .edges()
            .filter(|(u, v, _)| side_a.contains(*u) != side_a.contains(*v))
            .map(|(u, v, w)| (u.clone(), v.clone(), w))
            .collect();
        out.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| (&a.0, &a.1).cmp(&(&b.0, &b.1))));
        out
    }
}

fn canonical(u: &ItemId, v: &ItemId) -> (ItemId, ItemId) {
    if u < v {
        (u.clone(), v.clone())
    } else {
        (v.clone(), u.clone())
    }
}

fn check_window(panel: &DailyPanel, window: DayWindow) -> Result<()> {
    if window.is_empty() {
        return Err(Error::InvalidWindow { start: window.start, end: window.end, reason: "window is empty".into() });
    }
    if window.end > panel.days {
        return Err(Error::InvalidWindow {
            start: window.start,
            end: window.end,
            reason: format!("panel covers days 0..{}", panel.days),
        });
    }
    Ok(())
}

/// Per-item pv/orders/gmv summed over `window`, for every catalog item.
pub fn node_metrics(panel: &DailyPanel, catalog: &[ItemSpec], window: DayWindow) -> Result<BTreeMap<ItemId, NodeMetrics>> {
    check_window(panel, window)?;
    let mut nodes: BTreeMap<ItemId, NodeMetrics> = catalog
        .iter()
        .map(|s| {
            let m = NodeMetrics { pv: 0, orders: 0, gmv: 0.0, price: s.price, category_path: s.category_path.clone() };
            (s.item_id.clone(), m)
        })
        .collect();
    for row in panel.rows.iter().filter(|r| window.contains(r.day)) {
        let node = nodes.get_mut(&row.item_id).ok_or_else(|| Error::UnknownItem(row.item_id.clone()))?;
        node.pv += row.impressions;
        node.orders += row.transactions;
        node.gmv += row.gmv;
    }
    Ok(nodes)
}

/// Nodes are all catalog items with metrics aggregated over `window`; the
/// weight of `{u, v}` is the number of logged requests in `window` that
/// showed both.
pub fn build_graph(panel: &DailyPanel, catalog: &[ItemSpec], window: DayWindow) -> Result<CompetitionGraph> {
    let nodes = node_metrics(panel, catalog, window)?;
    let log = panel.request_log.as_ref().ok_or(Error::MissingRequestLog)?;

    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    for req in log.requests().filter(|r| window.contains(r.day)) {
        for (i, &u) in req.shown.iter().enumerate() {
            for &v in &req.shown[i + 1..] {
                *counts.entry((u.min(v), u.max(v))).or_insert(0) += 1;
            }
        }
    }
    let mut graph = CompetitionGraph::new(nodes);
    for ((u, v), c) in counts {
        graph.add_weight(&log.items[u as usize], &log.items[v as usize], c as f64)?;
    }
    Ok(graph)
}

/// Severed weight over total weight; 0 for an edgeless graph.
pub fn normalized_cut_capacity(graph: &CompetitionGraph, partition: &Partition) -> Result<f64> {
    partition.check_covers(graph)?;
    let total = graph.total_weight();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(graph.cut_weight(&partition.side_a) / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{simulate_with, MarketConfig, RequestLog, SimOptions, SinkingPlan};

    fn catalog(ids: &[&str]) -> Vec<ItemSpec> {
        ids.iter()
            .map(|id| ItemSpec {
                item_id: ItemId::from(*id),
                category_path: CategoryPath::new("d", "g", "l").unwrap(),
                base_quality: 0.0,
                price: 10.0,
                base_demand_weight: 1.0,
            })
            .collect()
    }

    fn log(requests: &[(u32, &[&str])]) -> RequestLog {
        let items: Vec<ItemId> = ["a", "b", "c"].iter().map(|s| ItemId::from(*s)).collect();
        let mut log = RequestLog::new(items.clone(), vec!["all".into()]);
        for (r, (day, shown)) in requests.iter().enumerate() {
            let idx: Vec<u32> = shown.iter().map(|s| items.iter().position(|i| i.as_str() == *s).unwrap() as u32).collect();
            log.push(*day, 0, r as u64, &idx, None);
        }
        log
    }

    #[test]
    fn co_exposure_counts() {
        let panel = DailyPanel {
            days: 2,
            request_log: Some(log(&[(0, &["a", "b"]), (0, &["a", "b"]), (1, &["a", "b"]), (0, &["c"])])),
            ..Default::default()
        };
        let g = build_graph(&panel, &catalog(&["a", "b", "c"]), DayWindow::new(0, 2)).unwrap();
        assert_eq!(g.weight(&"a".into(), &"b".into()), 3.0);
        assert_eq!(g.weight(&"b".into(), &"a".into()), 3.0);
        assert_eq!(g.weight(&"a".into(), &"c".into()), 0.0);
        assert_eq!(g.edge_count(), 1);
        let g0 = build_graph(&panel, &catalog(&["a", "b", "c"]), DayWindow::new(0, 1)).unwrap();
        assert_eq!(g0.weight(&"a".into(), &"b".into()), 2.0);
    }

    #[test]
    fn window_errors() {
        let panel = DailyPanel { days: 2, request_log: Some(RequestLog::default()), ..Default::default() };
        let cat = catalog(&["a"]);
        assert!(matches!(build_graph(&panel, &cat, DayWindow::new(1, 1)), Err(Error::InvalidWindow { .. })));
        assert!(matches!(build_graph(&panel, &cat, DayWindow::new(0, 3)), Err(Error::InvalidWindow { .. })));
        let no_log = DailyPanel { days: 2, ..Default::default() };
        assert!(matches!(build_graph(&no_log, &cat, DayWindow::new(0, 2)), Err(Error::MissingRequestLog)));
    }

    #[test]
    fn rejects_self_loops_and_negative_weights() {
        let mut g = CompetitionGraph::new(node_metrics(&DailyPanel { days: 1, ..Default::default() }, &catalog(&["a", "b"]), DayWindow::new(0, 1)).unwrap());
        assert!(g.add_weight(&"a".into(), &"a".into(), 1.0).is_err());
        assert!(g.add_weight(&"a".into(), &"b".into(), -1.0).is_err());
        g.add_weight(&"a".into(), &"b".into(), 0.0).unwrap();
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn three_item_leaf_with_two_slots_has_one_pair_per_request() {
        let cfg = MarketConfig {
            items: catalog(&["a", "b", "c"]),
            requests_per_day: 300,
            days_pre: 1,
            days_post: 1,
            price_sensitivity_beta: 0.0,
            outside_option_utility: 0.0,
            visible_slots: 2,
            rng_seed: 3,
            ranking_noise: 1.0,
        };
        let opts = SimOptions { request_log: Some(DayWindow::new(0, 2)) };
        let panel = simulate_with(&cfg, &SinkingPlan::full_market(), None, &opts).unwrap();
        let g = build_graph(&panel, &cfg.items, DayWindow::new(0, 2)).unwrap();
        assert_eq!(g.total_weight(), 600.0);
        assert_eq!(g.edge_count(), 3);
        // node aggregation equals the panel sums
        let all = DayWindow::new(0, 2);
        for (id, m) in &g.nodes {
            let set = BTreeSet::from([id.clone()]);
            assert_eq!(m.pv, panel.impressions(all, None, &set));
            assert_eq!(m.orders as f64, panel.metric_total(Metric::Orders, all, None, Some(&set)));
        }
    }
}
