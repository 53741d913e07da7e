//! File formats: JSONL catalogs, CSV panels, graphs, partitions and match
//! sets, JSON configs and reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CompetitionGraph, NodeMetrics};
use crate::market::{DailyPanel, ItemSpec, MarketConfig, PanelRow, RequestLog, SinkingPlan, TrafficRow, TreatmentPlan};
use crate::matching::{MatchOutcome, MatchSet};
use crate::partition::{Partition, Side};
use crate::pipeline::PipelineOptions;
use crate::types::{CategoryPath, ItemId, Metric};

fn schema(path: &Path, message: impl Into<String>) -> Error {
    Error::Schema { path: path.display().to_string(), message: message.into() }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| schema(path, format!("cannot open: {e}")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Deserializes JSON, reporting the dotted path of the offending field.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> std::result::Result<T, String> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        if field == "." {
            e.inner().to_string()
        } else {
            format!("field `{field}`: {}", e.inner())
        }
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text)?;
    parse_json(&text).map_err(|m| schema(path, m))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

// ---- catalog ----------------------------------------------------------------

pub fn write_catalog<W: Write>(mut w: W, items: &[ItemSpec]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_catalog<R: BufRead>(r: R, source: &Path) -> Result<Vec<ItemSpec>> {
    let mut items = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: ItemSpec = parse_json(&line).map_err(|m| schema(source, format!("line {}: {m}", n + 1)))?;
        item.validate().map_err(|e| schema(source, format!("line {}: {e}", n + 1)))?;
        items.push(item);
    }
    Ok(items)
}

pub fn save_catalog(path: &Path, items: &[ItemSpec]) -> Result<()> {
    write_catalog(create(path)?, items)
}

pub fn load_catalog(path: &Path) -> Result<Vec<ItemSpec>> {
    read_catalog(open(path)?, path)
}

// ---- panels -----------------------------------------------------------------

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn read_rows<T: DeserializeOwned, R: Read>(r: R, source: &Path, expected: &[&str]) -> Result<Vec<T>> {
    let mut reader = csv_reader(r);
    let headers = reader.headers()?.clone();
    let missing: Vec<&str> = expected.iter().copied().filter(|h| !headers.iter().any(|x| x == *h)).collect();
    if !missing.is_empty() {
        return Err(schema(source, format!("missing column(s) {}", missing.join(", "))));
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(n, row)| row.map_err(|e| schema(source, format!("row {}: {e}", n + 2))))
        .collect()
}

fn write_rows<T: Serialize, W: Write>(w: W, rows: &[T], header: &[&str]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    writer.write_record(header)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub const PANEL_HEADER: [&str; 6] = ["day", "bucket", "item_id", "impressions", "transactions", "gmv"];
pub const TRAFFIC_HEADER: [&str; 3] = ["day", "bucket", "requests"];
pub const REQUEST_HEADER: [&str; 7] = ["day", "bucket", "item_id", "impressions", "transactions", "gmv", "request_id"];

pub fn write_panel_rows<W: Write>(w: W, rows: &[PanelRow]) -> Result<()> {
    write_rows(w, rows, &PANEL_HEADER)
}

pub fn read_panel_rows<R: Read>(r: R, source: &Path) -> Result<Vec<PanelRow>> {
    read_rows(r, source, &PANEL_HEADER)
}

pub fn write_traffic<W: Write>(w: W, rows: &[TrafficRow]) -> Result<()> {
    write_rows(w, rows, &TRAFFIC_HEADER)
}

pub fn read_traffic<R: Read>(r: R, source: &Path) -> Result<Vec<TrafficRow>> {
    read_rows(r, source, &TRAFFIC_HEADER)
}

#[derive(Debug, Serialize, Deserialize)]
struct RequestRow {
    day: u32,
    bucket: String,
    item_id: ItemId,
    impressions: u64,
    transactions: u64,
    gmv: f64,
    request_id: u64,
}

/// Request-level panel: one row per shown item per request, in display
/// order. `price` gives the effective price used for the GMV column.
pub fn write_request_log<W: Write>(w: W, log: &RequestLog, price: impl Fn(u32, &ItemId) -> f64) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    writer.write_record(REQUEST_HEADER)?;
    for req in log.requests() {
        for id in req.shown_ids() {
            let bought = req.purchased == Some(id);
            writer.serialize(RequestRow {
                day: req.day,
                bucket: req.bucket.to_string(),
                item_id: id.clone(),
                impressions: 1,
                transactions: u64::from(bought),
                gmv: if bought { price(req.day, id) } else { 0.0 },
                request_id: req.request_id,
            })?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Rows with the same `request_id` must be contiguous.
pub fn read_request_log<R: Read>(r: R, source: &Path) -> Result<RequestLog> {
    let rows: Vec<RequestRow> = read_rows(r, source, &REQUEST_HEADER)?;
    let mut log = RequestLog::default();
    let mut item_index: HashMap<ItemId, u32> = HashMap::new();
    let mut bucket_index: HashMap<String, u16> = HashMap::new();
    let mut seen: BTreeSet<u64> = BTreeSet::new();
    let mut i = 0;
    while i < rows.len() {
        let first = &rows[i];
        if !seen.insert(first.request_id) {
            return Err(schema(source, format!("rows of request {} are not contiguous", first.request_id)));
        }
        let mut shown = Vec::new();
        let mut purchased = None;
        let mut j = i;
        while j < rows.len() && rows[j].request_id == first.request_id {
            let row = &rows[j];
            if row.day != first.day || row.bucket != first.bucket {
                return Err(schema(source, format!("request {} spans several days or buckets", row.request_id)));
            }
            if row.impressions != 1 || row.transactions > 1 {
                return Err(schema(source, format!("row {}: request-level rows need impressions = 1, transactions <= 1", j + 2)));
            }
            let next = item_index.len() as u32;
            let idx = *item_index.entry(row.item_id.clone()).or_insert_with(|| {
                log.items.push(row.item_id.clone());
                next
            });
            if row.transactions == 1 {
                if purchased.is_some() {
                    return Err(schema(source, format!("request {} has more than one purchase", row.request_id)));
                }
                purchased = Some(idx);
            }
            shown.push(idx);
            j += 1;
        }
        let next = bucket_index.len() as u16;
        let bucket = *bucket_index.entry(first.bucket.clone()).or_insert_with(|| {
            log.buckets.push(first.bucket.clone());
            next
        });
        log.push(first.day, bucket, first.request_id, &shown, purchased);
        i = j;
    }
    Ok(log)
}

/// File names of a saved panel inside its directory.
pub const PANEL_FILE: &str = "panel.csv";
pub const TRAFFIC_FILE: &str = "traffic.csv";
pub const REQUESTS_FILE: &str = "requests.csv";

/// Writes `panel.csv`, `traffic.csv` and, when the panel has a request log,
/// `requests.csv` into `dir`.
pub fn save_panel(dir: &Path, panel: &DailyPanel, config: &MarketConfig, treatment: Option<&TreatmentPlan>) -> Result<()> {
    write_panel_rows(create(&dir.join(PANEL_FILE))?, &panel.rows)?;
    write_traffic(create(&dir.join(TRAFFIC_FILE))?, &panel.traffic)?;
    if let Some(log) = &panel.request_log {
        let catalog = config.catalog();
        let price = |day: u32, id: &ItemId| {
            catalog
                .get(id)
                .map(|spec| crate::market::effective_price(spec, day, config.days_pre, treatment))
                .unwrap_or(0.0)
        };
        write_request_log(create(&dir.join(REQUESTS_FILE))?, log, price)?;
    }
    Ok(())
}

/// Reads a panel saved by [`save_panel`]. The day count is one past the
/// last day present in the traffic file.
pub fn load_panel(dir: &Path) -> Result<DailyPanel> {
    let panel_path = dir.join(PANEL_FILE);
    let traffic_path = dir.join(TRAFFIC_FILE);
    let requests_path = dir.join(REQUESTS_FILE);
    let rows = read_panel_rows(open(&panel_path)?, &panel_path)?;
    let traffic = read_traffic(open(&traffic_path)?, &traffic_path)?;
    let request_log = if requests_path.exists() {
        Some(read_request_log(open(&requests_path)?, &requests_path)?)
    } else {
        None
    };
    let days = traffic.iter().map(|t| t.day + 1).chain(rows.iter().map(|r| r.day + 1)).max().unwrap_or(0);
    let panel = DailyPanel { days, rows, traffic, request_log };
    panel.validate().map_err(|e| schema(&panel_path, e.to_string()))?;
    Ok(panel)
}

// ---- graph ------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRow {
    u: ItemId,
    v: ItemId,
    weight: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRow {
    item_id: ItemId,
    pv: u64,
    orders: u64,
    gmv: f64,
    price: f64,
    category: String,
}

pub const EDGE_HEADER: [&str; 3] = ["u", "v", "weight"];
pub const NODE_HEADER: [&str; 6] = ["item_id", "pv", "orders", "gmv", "price", "category"];

pub fn write_edges<W: Write>(w: W, graph: &CompetitionGraph) -> Result<()> {
    let rows: Vec<EdgeRow> =
        graph.edges().map(|(u, v, weight)| EdgeRow { u: u.clone(), v: v.clone(), weight }).collect();
    write_rows(w, &rows, &EDGE_HEADER)
}

pub fn write_nodes<W: Write>(w: W, nodes: &BTreeMap<ItemId, NodeMetrics>) -> Result<()> {
    let rows: Vec<NodeRow> = nodes
        .iter()
        .map(|(id, m)| NodeRow {
            item_id: id.clone(),
            pv: m.pv,
            orders: m.orders,
            gmv: m.gmv,
            price: m.price,
            category: m.category_path.to_string(),
        })
        .collect();
    write_rows(w, &rows, &NODE_HEADER)
}

pub fn read_nodes<R: Read>(r: R, source: &Path) -> Result<BTreeMap<ItemId, NodeMetrics>> {
    let rows: Vec<NodeRow> = read_rows(r, source, &NODE_HEADER)?;
    let mut nodes = BTreeMap::new();
    for (n, row) in rows.into_iter().enumerate() {
        let category_path: CategoryPath =
            row.category.parse().map_err(|e| schema(source, format!("row {}: {e}", n + 2)))?;
        let metrics = NodeMetrics { pv: row.pv, orders: row.orders, gmv: row.gmv, price: row.price, category_path };
        if nodes.insert(row.item_id.clone(), metrics).is_some() {
            return Err(schema(source, format!("duplicate item_id {}", row.item_id)));
        }
    }
    Ok(nodes)
}

pub fn read_edges<R: Read>(r: R, source: &Path, nodes: BTreeMap<ItemId, NodeMetrics>) -> Result<CompetitionGraph> {
    let rows: Vec<EdgeRow> = read_rows(r, source, &EDGE_HEADER)?;
    let mut graph = CompetitionGraph::new(nodes);
    for (n, row) in rows.into_iter().enumerate() {
        graph.add_weight(&row.u, &row.v, row.weight).map_err(|e| schema(source, format!("row {}: {e}", n + 2)))?;
    }
    Ok(graph)
}

pub const EDGES_FILE: &str = "edges.csv";
pub const NODES_FILE: &str = "nodes.csv";

pub fn save_graph(dir: &Path, graph: &CompetitionGraph) -> Result<()> {
    write_edges(create(&dir.join(EDGES_FILE))?, graph)?;
    write_nodes(create(&dir.join(NODES_FILE))?, &graph.nodes)
}

pub fn load_graph(dir: &Path) -> Result<CompetitionGraph> {
    let (edges, nodes) = (dir.join(EDGES_FILE), dir.join(NODES_FILE));
    let metrics = read_nodes(open(&nodes)?, &nodes)?;
    read_edges(open(&edges)?, &edges, metrics)
}

// ---- partition --------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SideRow {
    item_id: ItemId,
    side: Side,
}

pub const PARTITION_HEADER: [&str; 2] = ["item_id", "side"];

pub fn write_partition<W: Write>(w: W, partition: &Partition) -> Result<()> {
    let mut rows: Vec<SideRow> = partition
        .side_a
        .iter()
        .map(|id| SideRow { item_id: id.clone(), side: Side::A })
        .chain(partition.side_b.iter().map(|id| SideRow { item_id: id.clone(), side: Side::B }))
        .collect();
    rows.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    write_rows(w, &rows, &PARTITION_HEADER)
}

/// Reads side labels and recomputes cut weight and balance against `graph`.
pub fn read_partition<R: Read>(r: R, source: &Path, graph: &CompetitionGraph) -> Result<Partition> {
    let rows: Vec<SideRow> = read_rows(r, source, &PARTITION_HEADER)?;
    let mut seen = BTreeSet::new();
    let mut side_a = BTreeSet::new();
    for row in rows {
        if !seen.insert(row.item_id.clone()) {
            return Err(schema(source, format!("item {} listed twice", row.item_id)));
        }
        if row.side == Side::A {
            side_a.insert(row.item_id);
        }
    }
    let partition = Partition::from_side_a(graph, side_a)?;
    if seen.len() != graph.node_count() {
        return Err(Error::InvalidPartition(format!(
            "{} lists {} items but the graph has {} nodes",
            source.display(),
            seen.len(),
            graph.node_count()
        )));
    }
    partition.check_covers(graph)?;
    Ok(partition)
}

pub fn save_partition(path: &Path, partition: &Partition) -> Result<()> {
    write_partition(create(path)?, partition)
}

pub fn load_partition(path: &Path, graph: &CompetitionGraph) -> Result<Partition> {
    read_partition(open(path)?, path, graph)
}

// ---- matches ----------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MatchRow {
    target_id: ItemId,
    member_id: ItemId,
    rank: usize,
    k: usize,
    pre_gap: f64,
    pre_gap_relative: Option<f64>,
}

pub const MATCH_HEADER: [&str; 6] = ["target_id", "member_id", "rank", "k", "pre_gap", "pre_gap_relative"];

pub fn write_matches<W: Write>(w: W, matches: &BTreeMap<ItemId, MatchSet>) -> Result<()> {
    let rows: Vec<MatchRow> = matches
        .values()
        .flat_map(|m| {
            m.members.iter().enumerate().map(|(i, member)| MatchRow {
                target_id: m.target.clone(),
                member_id: member.clone(),
                rank: i + 1,
                k: m.k,
                pre_gap: m.pre_gap,
                pre_gap_relative: m.pre_gap_relative,
            })
        })
        .collect();
    write_rows(w, &rows, &MATCH_HEADER)
}

/// Reads match sets; target totals and member means are recomputed from
/// `history`.
pub fn read_matches<R: Read>(
    r: R,
    source: &Path,
    history: &BTreeMap<ItemId, NodeMetrics>,
    metric: Metric,
) -> Result<BTreeMap<ItemId, MatchSet>> {
    let rows: Vec<MatchRow> = read_rows(r, source, &MATCH_HEADER)?;
    let mut out: BTreeMap<ItemId, MatchSet> = BTreeMap::new();
    let total = |id: &ItemId| history.get(id).map(|m| m.metric(metric)).ok_or_else(|| Error::UnknownItem(id.clone()));
    for row in rows {
        let target_total = total(&row.target_id)?;
        let set = out.entry(row.target_id.clone()).or_insert_with(|| MatchSet {
            target: row.target_id.clone(),
            members: Vec::new(),
            k: row.k,
            pre_gap: row.pre_gap,
            pre_gap_relative: row.pre_gap_relative,
            target_total,
            member_mean: 0.0,
        });
        if row.rank != set.members.len() + 1 || row.k != set.k {
            return Err(schema(source, format!("target {}: ranks must run 1..=k in order", row.target_id)));
        }
        set.members.push(row.member_id);
    }
    for set in out.values_mut() {
        if set.members.len() != set.k {
            return Err(schema(source, format!("target {}: {} members but k = {}", set.target, set.members.len(), set.k)));
        }
        let sum = set.members.iter().map(&total).sum::<Result<f64>>()?;
        set.member_mean = sum / set.k as f64;
    }
    Ok(out)
}

pub fn save_matches(path: &Path, outcome: &MatchOutcome) -> Result<()> {
    write_matches(create(path)?, &outcome.matches)
}

pub fn load_matches(path: &Path, history: &BTreeMap<ItemId, NodeMetrics>, metric: Metric) -> Result<MatchOutcome> {
    Ok(MatchOutcome { matches: read_matches(open(path)?, path, history, metric)?, unmatched: BTreeMap::new() })
}

// ---- run config ---------------------------------------------------------------

/// Everything one simulated run needs, as read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub market: MarketConfig,
    pub treatment: TreatmentPlan,
    /// Used by `simulate` only; the pipeline builds its own sinking plans.
    #[serde(default)]
    pub sinking: Option<SinkingPlan>,
    #[serde(default)]
    pub pipeline: PipelineOptions,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        let ids = self.market.item_ids();
        self.treatment.validate(&ids)?;
        if let Some(plan) = &self.sinking {
            plan.validate(&ids)?;
        }
        self.pipeline.validate()
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let config: RunConfig = read_json(path)?;
        config.validate().map_err(|e| schema(path, e.to_string()))?;
        Ok(config)
    }
}
