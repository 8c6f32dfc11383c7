//! Directed cross-predictability networks.
//!
//! An edge `x -> y` means adding firm `x`'s features to a forest predicting
//! firm `y`'s measure raises the test AUC significantly, after
//! Benjamini-Hochberg adjustment across all ordered pairs of one run.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{bootstrap_auc_test, fit_predict, make_splits, SplitPlan, SplitSpec};
use crate::features::{FeatureDiagnostics, FeatureFrame};
use crate::forest::ForestParams;
use crate::measures::{assemble, FirmData, MeasureKind, MeasureSeries};
use crate::rng;

/// Benjamini-Hochberg step-up adjusted p-values, in input order.
pub fn bh_adjust(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        let q = p_values[i] / ((rank + 1) as f64 / m as f64);
        running = running.min(q);
        adjusted[i] = running.min(1.0);
    }
    adjusted
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeResult {
    pub source: String,
    pub target: String,
    pub measure: MeasureKind,
    pub auc1: f64,
    pub auc2: f64,
    pub diff: f64,
    pub s: f64,
    pub d: Option<f64>,
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub n_test: usize,
    pub split: SplitSpec,
}

/// Test-set scores behind one pair test, kept for ROC reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPredictions {
    pub source: String,
    pub target: String,
    pub bar_index: Vec<usize>,
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub labels: Vec<i8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeOptions {
    pub measure: MeasureKind,
    pub horizon: usize,
    pub split: SplitSpec,
    pub forest: ForestParams,
    pub boot: usize,
    pub seed: u64,
    pub min_rows: usize,
}

#[derive(Clone, Debug, Default)]
pub struct EdgeRun {
    /// Sorted by `(source, target)`, BH-adjusted jointly.
    pub results: Vec<EdgeResult>,
    pub predictions: Vec<PairPredictions>,
    /// Firms dropped before pairing, with the reason.
    pub excluded: Vec<(String, String)>,
    /// Pairs whose test could not be run: `(source, target, reason)`.
    pub skipped: Vec<(String, String, String)>,
}

struct BaseModel {
    plan: SplitPlan,
    scores: HashMap<usize, f64>,
}

fn base_model(firm: &FirmData, opts: &EdgeOptions) -> Result<BaseModel> {
    let ds = assemble(firm, None, opts.measure, opts.horizon, opts.min_rows)?;
    let plan = make_splits(&ds.timestamps, &opts.split)?;
    let params = ForestParams {
        seed: rng::derive_seed(opts.seed, &[rng::tag("own"), rng::tag(&firm.symbol)]),
        ..opts.forest.clone()
    };
    let (preds, _) = fit_predict(&ds, &plan, &params)?;
    let scores = preds.rows.iter().zip(&preds.scores).map(|(&r, &s)| (ds.bar_index[r], s)).collect();
    Ok(BaseModel { plan, scores })
}

fn pair_test(
    source: &FirmData,
    target: &FirmData,
    base: &BaseModel,
    opts: &EdgeOptions,
) -> Result<(EdgeResult, PairPredictions)> {
    let ds = assemble(target, Some(&source.frame), opts.measure, opts.horizon, opts.min_rows)?;
    let plan = base.plan.reassign(&ds.timestamps)?;
    let pair_tag = [rng::tag(&source.symbol), rng::tag(&target.symbol)];
    let params = ForestParams {
        seed: rng::derive_seed(opts.seed, &[rng::tag("cross"), pair_tag[0], pair_tag[1]]),
        ..opts.forest.clone()
    };
    let (preds, _) = fit_predict(&ds, &plan, &params)?;
    let mut out = PairPredictions {
        source: source.symbol.clone(),
        target: target.symbol.clone(),
        bar_index: Vec::with_capacity(preds.rows.len()),
        p1: Vec::with_capacity(preds.rows.len()),
        p2: Vec::with_capacity(preds.rows.len()),
        labels: Vec::with_capacity(preds.rows.len()),
    };
    for (&row, &score) in preds.rows.iter().zip(&preds.scores) {
        let bar = ds.bar_index[row];
        let own = *base.scores.get(&bar).ok_or_else(|| {
            Error::data(format!("bar {bar} of {} has no own-feature prediction", target.symbol))
        })?;
        out.bar_index.push(bar);
        out.p1.push(own);
        out.p2.push(score);
        out.labels.push(ds.labels[row]);
    }
    let boot_seed = rng::derive_seed(opts.seed, &[rng::tag("boot"), pair_tag[0], pair_tag[1]]);
    let test = bootstrap_auc_test(&out.p1, &out.p2, &out.labels, opts.boot, boot_seed)?;
    let result = EdgeResult {
        source: source.symbol.clone(),
        target: target.symbol.clone(),
        measure: opts.measure,
        auc1: test.auc1,
        auc2: test.auc2,
        diff: test.diff,
        s: test.s,
        d: test.d_stat,
        p_raw: test.p_value,
        p_adjusted: test.p_value,
        n_test: out.labels.len(),
        split: opts.split,
    };
    Ok((result, out))
}

/// Runs the own-features vs. cross-features comparison for every ordered
/// pair of firms. The own-features model of each target is fitted once and
/// shared by all pairs with that target.
pub fn pairwise_edges(firms: &[FirmData], opts: &EdgeOptions) -> Result<EdgeRun> {
    let mut seen = BTreeSet::new();
    for f in firms {
        if !seen.insert(f.symbol.as_str()) {
            return Err(Error::data(format!("duplicate firm {}", f.symbol)));
        }
    }
    let bases: Vec<Result<BaseModel>> = firms.par_iter().map(|f| base_model(f, opts)).collect();
    let mut run = EdgeRun::default();
    let usable: Vec<(usize, &BaseModel)> = bases
        .iter()
        .enumerate()
        .filter_map(|(i, b)| match b {
            Ok(base) => Some((i, base)),
            Err(e) => {
                warn!("excluding {}: {e}", firms[i].symbol);
                run.excluded.push((firms[i].symbol.clone(), e.to_string()));
                None
            }
        })
        .collect();
    if usable.len() < 2 {
        return Err(Error::degenerate(format!("only {} firm(s) have usable datasets", usable.len())));
    }
    let pairs: Vec<(usize, usize, &BaseModel)> = usable
        .iter()
        .flat_map(|&(y, base)| usable.iter().filter(move |&&(x, _)| x != y).map(move |&(x, _)| (x, y, base)))
        .collect();
    let outcomes: Vec<(usize, usize, Result<(EdgeResult, PairPredictions)>)> = pairs
        .into_par_iter()
        .map(|(x, y, base)| {
            debug!("testing {} -> {}", firms[x].symbol, firms[y].symbol);
            (x, y, pair_test(&firms[x], &firms[y], base, opts))
        })
        .collect();
    let mut tested = Vec::new();
    for (x, y, outcome) in outcomes {
        match outcome {
            Ok(pair) => tested.push(pair),
            Err(e) => {
                warn!("skipping {} -> {}: {e}", firms[x].symbol, firms[y].symbol);
                run.skipped.push((firms[x].symbol.clone(), firms[y].symbol.clone(), e.to_string()));
            }
        }
    }
    tested.sort_by(|a, b| (&a.0.source, &a.0.target).cmp(&(&b.0.source, &b.0.target)));
    let raw: Vec<f64> = tested.iter().map(|(r, _)| r.p_raw).collect();
    for ((result, _), adj) in tested.iter_mut().zip(bh_adjust(&raw)) {
        result.p_adjusted = adj.max(result.p_raw);
    }
    run.skipped.sort();
    run.excluded.sort();
    (run.results, run.predictions) = tested.into_iter().unzip();
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mcap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sector: Option<String>,
}

impl NodeInfo {
    pub fn bare(id: impl Into<String>) -> Self {
        NodeInfo { id: id.into(), mcap: None, sector: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub auc1: f64,
    pub auc2: f64,
    /// AUC increase; also the edge weight.
    pub diff: f64,
    pub p: f64,
    pub p_adj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub nodes: Vec<NodeInfo>,
    pub edges: Vec<Edge>,
    pub alpha: f64,
    pub seed: u64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub measure: Option<MeasureKind>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub manifest_id: Option<String>,
}

/// Keeps results with `p_adjusted <= alpha` as weighted edges.
pub fn build_network(
    nodes: Vec<NodeInfo>,
    results: &[EdgeResult],
    alpha: f64,
    seed: u64,
    config_hash: impl Into<String>,
) -> Network {
    let known: BTreeSet<&str> = nodes.iter().map(|n| n.id.as_str()).collect();
    let mut edges: Vec<Edge> = results
        .iter()
        .filter(|r| r.p_adjusted <= alpha)
        .map(|r| {
            assert!(r.source != r.target, "self-loop {}", r.source);
            assert!(
                known.contains(r.source.as_str()) && known.contains(r.target.as_str()),
                "edge {} -> {} references an unknown node",
                r.source,
                r.target
            );
            assert!(r.diff > 0.0, "accepted edge {} -> {} has non-positive AUC increase", r.source, r.target);
            Edge {
                src: r.source.clone(),
                dst: r.target.clone(),
                auc1: r.auc1,
                auc2: r.auc2,
                diff: r.diff,
                p: r.p_raw,
                p_adj: r.p_adjusted,
            }
        })
        .collect();
    edges.sort_by(|a, b| (&a.src, &a.dst).cmp(&(&b.src, &b.dst)));
    Network {
        nodes,
        edges,
        alpha,
        seed,
        config_hash: config_hash.into(),
        measure: results.first().map(|r| r.measure),
        manifest_id: None,
    }
}

/// Realized edges over `N (N - 1)` possible directed edges.
pub fn density(network: &Network) -> f64 {
    let n = network.nodes.len();
    if n < 2 {
        return 0.0;
    }
    network.edges.len() as f64 / (n * (n - 1)) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDegree {
    pub id: String,
    pub in_degree: usize,
    pub out_degree: usize,
    pub std_in: f64,
    pub std_out: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeReport {
    pub nodes: Vec<NodeDegree>,
    /// Set when every node has the same in-degree (z-scores forced to 0).
    pub in_degenerate: bool,
    pub out_degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

fn zscores(values: &[usize]) -> (Vec<f64>, bool) {
    let xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    match crate::stats::sample_sd(&xs) {
        Some(sd) if sd > 0.0 => {
            let m = crate::stats::mean(&xs);
            (xs.iter().map(|x| (x - m) / sd).collect(), false)
        }
        _ => (vec![0.0; xs.len()], true),
    }
}

/// In/out degrees and their z-scores against this network's own degree
/// distribution (sample standard deviation over nodes).
pub fn degrees(network: &Network) -> DegreeReport {
    let index: HashMap<&str, usize> = network.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let n = network.nodes.len();
    let mut ins = vec![0usize; n];
    let mut outs = vec![0usize; n];
    for e in &network.edges {
        outs[index[e.src.as_str()]] += 1;
        ins[index[e.dst.as_str()]] += 1;
    }
    let (std_in, in_degenerate) = zscores(&ins);
    let (std_out, out_degenerate) = zscores(&outs);
    DegreeReport {
        nodes: network
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| NodeDegree {
                id: node.id.clone(),
                in_degree: ins[i],
                out_degree: outs[i],
                std_in: std_in[i],
                std_out: std_out[i],
            })
            .collect(),
        in_degenerate,
        out_degenerate,
    }
}

impl DegreeReport {
    /// The `k` nodes with the highest standardized degree; ties by id.
    pub fn top(&self, direction: Direction, k: usize) -> Vec<&NodeDegree> {
        let mut ranked: Vec<&NodeDegree> = self.nodes.iter().collect();
        let key = |d: &NodeDegree| match direction {
            Direction::In => d.std_in,
            Direction::Out => d.std_out,
        };
        ranked.sort_by(|a, b| key(b).total_cmp(&key(a)).then_with(|| a.id.cmp(&b.id)));
        ranked.truncate(k);
        ranked
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["id", "in_degree", "out_degree", "std_in", "std_out"])?;
        for d in &self.nodes {
            wtr.write_record([
                d.id.clone(),
                d.in_degree.to_string(),
                d.out_degree.to_string(),
                d.std_in.to_string(),
                d.std_out.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Induced subgraph on `ids`; node attributes and edge weights are kept.
pub fn subnetwork(network: &Network, ids: &[&str]) -> Network {
    let keep: BTreeSet<&str> = ids.iter().copied().collect();
    Network {
        nodes: network.nodes.iter().filter(|n| keep.contains(n.id.as_str())).cloned().collect(),
        edges: network
            .edges
            .iter()
            .filter(|e| keep.contains(e.src.as_str()) && keep.contains(e.dst.as_str()))
            .cloned()
            .collect(),
        ..network.clone()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl Network {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Graphviz export. Node `size` is proportional to market cap, scaled so
    /// the largest node has size 1.
    pub fn to_dot(&self) -> String {
        let max_cap = self.nodes.iter().filter_map(|n| n.mcap).fold(0.0, f64::max);
        let mut out = String::from("digraph hftnet {\n");
        for n in &self.nodes {
            let mut attrs = Vec::new();
            if let (Some(cap), true) = (n.mcap, max_cap > 0.0) {
                attrs.push(format!("size={}", cap / max_cap));
            }
            if let Some(sector) = &n.sector {
                attrs.push(format!("sector=\"{}\"", sector.replace('"', "\\\"")));
            }
            let attrs = if attrs.is_empty() { String::new() } else { format!(" [{}]", attrs.join(", ")) };
            out.push_str(&format!("  \"{}\"{attrs};\n", n.id.replace('"', "\\\"")));
        }
        for e in &self.edges {
            out.push_str(&format!(
                "  \"{}\" -> \"{}\" [weight={}, p_adj={}];\n",
                e.src.replace('"', "\\\""),
                e.dst.replace('"', "\\\""),
                e.diff,
                e.p_adj
            ));
        }
        out.push_str("}\n");
        out
    }

    pub fn to_graphml(&self) -> String {
        let max_cap = self.nodes.iter().filter_map(|n| n.mcap).fold(0.0, f64::max);
        let mut out = String::from(concat!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n",
            "<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n",
            "  <key id=\"size\" for=\"node\" attr.name=\"size\" attr.type=\"double\"/>\n",
            "  <key id=\"sector\" for=\"node\" attr.name=\"sector\" attr.type=\"string\"/>\n",
            "  <key id=\"weight\" for=\"edge\" attr.name=\"weight\" attr.type=\"double\"/>\n",
            "  <key id=\"p_adj\" for=\"edge\" attr.name=\"p_adj\" attr.type=\"double\"/>\n",
            "  <graph id=\"hftnet\" edgedefault=\"directed\">\n",
        ));
        for n in &self.nodes {
            out.push_str(&format!("    <node id=\"{}\">", xml_escape(&n.id)));
            if let (Some(cap), true) = (n.mcap, max_cap > 0.0) {
                out.push_str(&format!("<data key=\"size\">{}</data>", cap / max_cap));
            }
            if let Some(sector) = &n.sector {
                out.push_str(&format!("<data key=\"sector\">{}</data>", xml_escape(sector)));
            }
            out.push_str("</node>\n");
        }
        for (i, e) in self.edges.iter().enumerate() {
            out.push_str(&format!(
                "    <edge id=\"e{i}\" source=\"{}\" target=\"{}\"><data key=\"weight\">{}</data><data key=\"p_adj\">{}</data></edge>\n",
                xml_escape(&e.src),
                xml_escape(&e.dst),
                e.diff,
                e.p_adj
            ));
        }
        out.push_str("  </graph>\n</graphml>\n");
        out
    }
}

/// Reads `id,mcap,sector` firm metadata; blank cells are allowed.
pub fn read_firm_metadata<R: Read>(reader: R) -> Result<BTreeMap<String, NodeInfo>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = record.get(0).unwrap_or("").to_owned();
        if id.is_empty() {
            return Err(Error::Ingest { line, message: "missing firm id".into() });
        }
        let mcap = match record.get(1).unwrap_or("") {
            "" => None,
            v => {
                let cap: f64 = v.parse().map_err(|_| Error::Ingest { line, message: format!("invalid mcap '{v}'") })?;
                if !(cap > 0.0) {
                    return Err(Error::Ingest { line, message: format!("mcap must be positive, got {v}") });
                }
                Some(cap)
            }
        };
        let sector = record.get(2).filter(|s| !s.is_empty()).map(str::to_owned);
        out.insert(id.clone(), NodeInfo { id, mcap, sector });
    }
    Ok(out)
}

/// Market-cap weighted mean across members at each bar. Weights are
/// renormalized over the members present at that bar; a bar with no member
/// present is missing.
pub fn value_weighted_series(members: &[(&[Option<f64>], f64)]) -> Result<Vec<Option<f64>>> {
    let Some(&(first, _)) = members.first() else {
        return Err(Error::data("a size group needs at least one member"));
    };
    if members.iter().any(|&(_, w)| !(w > 0.0)) {
        return Err(Error::data("size-group weights must be positive"));
    }
    if members.iter().any(|(s, _)| s.len() != first.len()) {
        return Err(Error::data("size-group members are not on a shared grid"));
    }
    Ok((0..first.len())
        .map(|t| {
            let (num, den) = members
                .iter()
                .filter_map(|&(s, w)| s[t].map(|v| (w * v, w)))
                .fold((0.0, 0.0), |(n, d), (wv, w)| (n + wv, d + w));
            (den > 0.0).then(|| num / den)
        })
        .collect())
}

/// Features aggregated for size-group studies.
pub const SIZE_GROUP_FEATURES: [&str; 3] = ["roll", "amihud", "vpin"];

/// Value-weighted aggregate of several firms, usable as a synthetic firm.
#[derive(Clone, Debug)]
pub struct SizeGroupSeries {
    pub group: String,
    pub weights: Vec<(String, f64)>,
    pub firm: FirmData,
}

impl SizeGroupSeries {
    pub fn build(group: &str, members: &[(&FirmData, f64)], features: &[&str]) -> Result<Self> {
        let (head, _) = members.first().ok_or_else(|| Error::data("a size group needs at least one member"))?;
        if members.iter().any(|(f, _)| f.frame.timestamps != head.frame.timestamps) {
            return Err(Error::data(format!("members of group {group} are not on a shared grid")));
        }
        let columns = features
            .iter()
            .map(|&name| {
                let series = members
                    .iter()
                    .map(|(f, w)| {
                        f.frame
                            .column(name)
                            .map(|c| (c, *w))
                            .ok_or_else(|| Error::config(format!("{} has no feature '{name}'", f.symbol)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                value_weighted_series(&series)
            })
            .collect::<Result<Vec<_>>>()?;
        let measure = |kind: MeasureKind| {
            let series: Vec<(&[Option<f64>], f64)> = members.iter().map(|(f, w)| (f.measures.get(kind), *w)).collect();
            value_weighted_series(&series)
        };
        let firm = FirmData {
            symbol: group.to_owned(),
            frame: FeatureFrame {
                symbol: group.to_owned(),
                timestamps: head.frame.timestamps.clone(),
                names: features.iter().map(|s| s.to_string()).collect(),
                columns,
                diagnostics: FeatureDiagnostics {
                    bvc_sigma_mode: head.frame.diagnostics.bvc_sigma_mode,
                    ..FeatureDiagnostics::default()
                },
            },
            measures: MeasureSeries {
                symbol: group.to_owned(),
                lookback: head.measures.lookback,
                sigma: measure(MeasureKind::Volatility)?,
                kurt: measure(MeasureKind::Kurtosis)?,
            },
        };
        Ok(SizeGroupSeries {
            group: group.to_owned(),
            weights: members.iter().map(|(f, w)| (f.symbol.clone(), *w)).collect(),
            firm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(src: &str, dst: &str, p: f64, diff: f64) -> EdgeResult {
        EdgeResult {
            source: src.into(),
            target: dst.into(),
            measure: MeasureKind::Volatility,
            auc1: 0.5,
            auc2: 0.5 + diff,
            diff,
            s: 0.01,
            d: Some(diff / 0.01),
            p_raw: p,
            p_adjusted: p,
            n_test: 100,
            split: SplitSpec::default(),
        }
    }

    fn nodes(ids: &[&str]) -> Vec<NodeInfo> {
        ids.iter().map(|&i| NodeInfo::bare(i)).collect()
    }

    #[test]
    fn bh_examples() {
        assert_eq!(bh_adjust(&[0.3]), [0.3]);
        assert_eq!(bh_adjust(&[0.2, 0.2, 0.2]), [0.2, 0.2, 0.2]);
        assert_eq!(bh_adjust(&[0.01, 0.02, 0.03, 0.04]), [0.04; 4]);
        assert_eq!(bh_adjust(&[0.9, 0.95]), [0.95, 0.95]);
        assert!(bh_adjust(&[]).is_empty());
    }

    #[test]
    fn density_examples() {
        let empty = build_network(nodes(&["a", "b"]), &[], 0.05, 1, "h");
        assert_eq!(density(&empty), 0.0);
        let full = build_network(
            nodes(&["a", "b"]),
            &[result("a", "b", 0.001, 0.1), result("b", "a", 0.001, 0.1)],
            0.05,
            1,
            "h",
        );
        assert_eq!(density(&full), 1.0);
        let ids = ["a", "b", "c", "d", "e"];
        let six: Vec<EdgeResult> =
            [("a", "b"), ("a", "c"), ("b", "c"), ("c", "d"), ("d", "e"), ("e", "a")].iter().map(|(s, d)| result(s, d, 0.0, 0.1)).collect();
        assert_eq!(density(&build_network(nodes(&ids), &six, 0.05, 1, "h")), 0.3);
    }

    #[test]
    fn star_degrees() {
        let results: Vec<EdgeResult> = ["b", "c", "d", "e"].iter().map(|t| result("a", t, 0.0, 0.1)).collect();
        let net = build_network(nodes(&["a", "b", "c", "d", "e"]), &results, 0.05, 1, "h");
        let deg = degrees(&net);
        assert_eq!(deg.nodes[0].out_degree, 4);
        assert!(deg.nodes[1..].iter().all(|d| d.out_degree == 0 && d.in_degree == 1));
        assert_eq!(deg.top(Direction::Out, 1)[0].id, "a");
        assert!(!deg.in_degenerate);
        // Out-degrees {4,0,0,0,0}: mean 0.8, sd sqrt(3.2).
        assert!((deg.nodes[0].std_out - 3.2 / 3.2_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn equal_degrees_are_degenerate() {
        let net = build_network(
            nodes(&["a", "b"]),
            &[result("a", "b", 0.0, 0.1), result("b", "a", 0.0, 0.1)],
            0.05,
            1,
            "h",
        );
        let deg = degrees(&net);
        assert!(deg.in_degenerate && deg.out_degenerate);
        assert!(deg.nodes.iter().all(|d| d.std_in == 0.0 && d.std_out == 0.0));
    }

    #[test]
    fn subnetwork_keeps_induced_edges() {
        let results = vec![result("a", "b", 0.0, 0.1), result("b", "c", 0.0, 0.2), result("c", "a", 0.0, 0.3)];
        let net = build_network(nodes(&["a", "b", "c"]), &results, 0.05, 1, "h");
        assert_eq!(subnetwork(&net, &["a", "b", "c"]), net);
        let sub = subnetwork(&net, &["b", "c"]);
        assert_eq!(sub.edges.len(), 1);
        assert_eq!((sub.edges[0].src.as_str(), sub.edges[0].diff), ("b", 0.2));
        assert!(subnetwork(&net, &["a"]).edges.is_empty());
    }

    #[test]
    fn weighted_series_examples() {
        let a = [Some(2.0), None];
        let b = [Some(4.0), Some(5.0)];
        assert_eq!(value_weighted_series(&[(&a, 1.0)]).unwrap(), [Some(2.0), None]);
        assert_eq!(value_weighted_series(&[(&a, 2.0), (&b, 2.0)]).unwrap()[0], Some(3.0));
        let v = value_weighted_series(&[(&a, 1.0), (&b, 3.0)]).unwrap();
        assert_eq!(v, [Some(3.5), Some(5.0)]);
        assert!(value_weighted_series(&[(&a, 0.0)]).is_err());
    }

    #[test]
    fn exports_carry_weights() {
        let mut n = nodes(&["a", "b"]);
        n[0].mcap = Some(10.0);
        n[1].mcap = Some(5.0);
        n[1].sector = Some("bank".into());
        let net = build_network(n, &[result("a", "b", 0.0, 0.25)], 0.05, 1, "h");
        let dot = net.to_dot();
        assert!(dot.contains("\"a\" -> \"b\" [weight=0.25"), "{dot}");
        assert!(dot.contains("\"b\" [size=0.5, sector=\"bank\"]"), "{dot}");
        let gml = net.to_graphml();
        assert!(gml.contains("source=\"a\" target=\"b\"><data key=\"weight\">0.25</data>"), "{gml}");
        let json = net.to_json().unwrap();
        assert_eq!(Network::from_json(&json).unwrap(), net);
        assert!(json.contains("\"p_adj\""));
    }

    #[test]
    fn metadata_csv() {
        let text = "id,mcap,sector\nJPM,300,bank\nAIG,,insurance\n";
        let meta = read_firm_metadata(text.as_bytes()).unwrap();
        assert_eq!(meta["JPM"].mcap, Some(300.0));
        assert_eq!(meta["AIG"].mcap, None);
        assert!(read_firm_metadata("id,mcap\nX,-3\n".as_bytes()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn p_values() -> impl Strategy<Value = Vec<f64>> {
            // Values on a coarse grid so ties are common.
            prop::collection::vec(prop_oneof![(0u32..=100).prop_map(|k| f64::from(k) / 100.0), 0.0..=1.0f64], 1..60)
        }

        proptest! {
            #[test]
            fn adjusted_values_bound_raw(ps in p_values()) {
                for (p, q) in ps.iter().zip(bh_adjust(&ps)) {
                    prop_assert!(q >= *p && q <= 1.0);
                }
            }

            #[test]
            fn adjustment_preserves_order(ps in p_values()) {
                let q = bh_adjust(&ps);
                for i in 0..ps.len() {
                    for j in 0..ps.len() {
                        if ps[i] <= ps[j] {
                            prop_assert!(q[i] <= q[j]);
                        }
                    }
                }
            }

            #[test]
            fn permutation_equivariant(ps in p_values(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                let mut perm: Vec<usize> = (0..ps.len()).collect();
                perm.shuffle(&mut rng::stream(seed, &[]));
                let shuffled: Vec<f64> = perm.iter().map(|&i| ps[i]).collect();
                let q = bh_adjust(&ps);
                let q_shuffled = bh_adjust(&shuffled);
                for (k, &i) in perm.iter().enumerate() {
                    prop_assert_eq!(q_shuffled[k], q[i]);
                }
            }

            #[test]
            fn subnetwork_is_induced(
                edges in prop::collection::btree_set((0usize..8, 0usize..8), 0..40),
                keep in prop::collection::btree_set(0usize..8, 0..8),
            ) {
                let ids: Vec<String> = (0..8).map(|i| format!("F{i}")).collect();
                let results: Vec<EdgeResult> = edges
                    .iter()
                    .filter(|(a, b)| a != b)
                    .map(|&(a, b)| result(&ids[a], &ids[b], 0.001, 0.01))
                    .collect();
                let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
                let net = build_network(nodes(&refs), &results, 0.05, 0, "h");
                let kept: Vec<&str> = keep.iter().map(|&i| ids[i].as_str()).collect();
                let sub = subnetwork(&net, &kept);
                let induced = edges.iter().filter(|(a, b)| a != b && keep.contains(a) && keep.contains(b)).count();
                prop_assert_eq!(sub.nodes.len(), keep.len());
                prop_assert_eq!(sub.edges.len(), induced);
                let n = keep.len();
                let expected = if n < 2 { 0.0 } else { induced as f64 / (n * (n - 1)) as f64 };
                prop_assert!((density(&sub) - expected).abs() < 1e-15);
            }

            #[test]
            fn weighted_series_stays_within_members(
                rows in prop::collection::vec(prop::collection::vec(prop::option::of(-5.0..5.0f64), 3), 1..30),
                weights in prop::collection::vec(0.1..10.0f64, 3),
            ) {
                let columns: Vec<Vec<Option<f64>>> = (0..3).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
                let members: Vec<(&[Option<f64>], f64)> =
                    columns.iter().zip(&weights).map(|(c, &w)| (c.as_slice(), w)).collect();
                let series = value_weighted_series(&members).unwrap();
                for (t, v) in series.iter().enumerate() {
                    let present: Vec<f64> = rows[t].iter().flatten().copied().collect();
                    match v {
                        None => prop_assert!(present.is_empty()),
                        Some(v) => {
                            let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
                            let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                        }
                    }
                }
            }
        }
    }
}
