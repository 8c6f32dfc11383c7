//! Run configuration and the window-by-window orchestration from raw trades
//! to per-window networks.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use chrono::{NaiveDate, NaiveTime, TimeDelta};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bars::{
    aggregate, fill_policy, filter_trades, group_by_symbol, screen, FillPolicy, FilterReport, FilterRules,
    Screening, SessionGrid, Trade,
};
use crate::error::{Error, Result};
use crate::eval::SplitSpec;
use crate::features::{compute_frame, FeatureConfig};
use crate::forest::{ForestParams, SplitCriterion};
use crate::measures::{FirmData, MeasureKind, MeasureSeries, DEFAULT_MIN_ROWS};
use crate::network::{build_network, degrees, density, pairwise_edges, DegreeReport, EdgeOptions, EdgeRun, Network, NodeInfo};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct BarsConfig {
    pub session_open: NaiveTime,
    pub session_close: NaiveTime,
    pub bar_minutes: i64,
    pub drop_first_bar: bool,
    pub positive_price_volume: bool,
    pub market_hours: bool,
    pub common_shares: bool,
    pub uncorrected: bool,
    pub fill: FillPolicy,
    /// Bars with fewer trades than this count as sparse.
    pub min_trades: u32,
    /// A firm is dropped when its share of sparse bars reaches this value.
    pub max_sparse_fraction: f64,
    /// Timezone applied to timestamps without an offset.
    pub timezone: String,
}

impl Default for BarsConfig {
    fn default() -> Self {
        let rules = FilterRules::default();
        BarsConfig {
            session_open: rules.session_open,
            session_close: rules.session_close,
            bar_minutes: 30,
            drop_first_bar: true,
            positive_price_volume: rules.positive_price_volume,
            market_hours: rules.market_hours,
            common_shares: rules.common_shares,
            uncorrected: rules.uncorrected,
            fill: FillPolicy::default(),
            min_trades: 1,
            max_sparse_fraction: 0.25,
            timezone: "America/New_York".into(),
        }
    }
}

impl BarsConfig {
    pub fn filter_rules(&self) -> FilterRules {
        FilterRules {
            positive_price_volume: self.positive_price_volume,
            market_hours: self.market_hours,
            common_shares: self.common_shares,
            uncorrected: self.uncorrected,
            session_open: self.session_open,
            session_close: self.session_close,
        }
    }

    pub fn grid(&self, days: impl IntoIterator<Item = NaiveDate>) -> Result<SessionGrid> {
        SessionGrid::new(
            self.session_open,
            self.session_close,
            TimeDelta::minutes(self.bar_minutes),
            self.drop_first_bar,
            days,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct DatasetConfig {
    pub horizon: usize,
    pub min_rows: usize,
    pub measures: Vec<MeasureKind>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { horizon: 50, min_rows: DEFAULT_MIN_ROWS, measures: vec![MeasureKind::Volatility] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ForestConfig {
    pub trees: usize,
    /// Candidates per split; absent means `floor(sqrt(p))`.
    pub m: Option<usize>,
    pub criterion: SplitCriterion,
}

impl Default for ForestConfig {
    fn default() -> Self {
        let p = ForestParams::default();
        ForestConfig { trees: p.trees, m: p.m, criterion: p.criterion }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TestConfig {
    pub boot: usize,
    pub alpha: f64,
    pub split: SplitSpec,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig { boot: 2000, alpha: 0.05, split: SplitSpec::default() }
    }
}

/// One estimation window; `end` is inclusive. An empty firm list means every
/// firm with data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub start: NaiveDate,
    pub end: NaiveDate,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub firms: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct PipelineConfig {
    pub seed: u64,
    pub bars: BarsConfig,
    pub features: FeatureConfig,
    pub dataset: DatasetConfig,
    pub forest: ForestConfig,
    pub test: TestConfig,
    pub windows: Vec<WindowSpec>,
}

impl PipelineConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.bars.grid([])?;
        if !(0.0..=1.0).contains(&self.bars.max_sparse_fraction) {
            return Err(Error::config("max-sparse-fraction must lie in [0,1]"));
        }
        self.bars
            .timezone
            .parse::<crate::bars::TzSpec>()
            .map_err(|e| Error::config(format!("timezone: {e}")))?;
        self.features.validate()?;
        if self.dataset.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if self.dataset.measures.is_empty() {
            return Err(Error::config("at least one measure is required"));
        }
        if self.forest.trees == 0 || self.forest.m == Some(0) {
            return Err(Error::config("trees and m must be positive"));
        }
        if self.test.boot < crate::eval::MIN_BOOTSTRAP {
            return Err(Error::config(format!("boot must be at least {}", crate::eval::MIN_BOOTSTRAP)));
        }
        if !(self.test.alpha > 0.0 && self.test.alpha < 1.0) {
            return Err(Error::config("alpha must lie strictly between 0 and 1"));
        }
        self.test.split.validate()?;
        for w in &self.windows {
            if w.end < w.start {
                return Err(Error::config(format!("window {} .. {} ends before it starts", w.start, w.end)));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn forest_params(&self) -> ForestParams {
        ForestParams { trees: self.forest.trees, m: self.forest.m, criterion: self.forest.criterion, seed: self.seed }
    }

    pub fn edge_options(&self, measure: MeasureKind) -> EdgeOptions {
        EdgeOptions {
            measure,
            horizon: self.dataset.horizon,
            split: self.test.split,
            forest: self.forest_params(),
            boot: self.test.boot,
            seed: self.seed,
            min_rows: self.dataset.min_rows,
        }
    }
}

/// Runs `f` on a dedicated pool of `jobs` workers, or on the global pool.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(Error::config("jobs must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Filtered trades grouped per symbol, with per-symbol filter counts.
#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub trades: BTreeMap<String, Vec<Trade>>,
    pub filter: BTreeMap<String, FilterReport>,
}

pub fn ingest(trades: Vec<Trade>, cfg: &BarsConfig) -> Ingested {
    let rules = cfg.filter_rules();
    let mut out = Ingested::default();
    for (symbol, group) in group_by_symbol(trades) {
        let (kept, report) = filter_trades(group, &rules);
        out.filter.insert(symbol.clone(), report);
        if !kept.is_empty() {
            out.trades.insert(symbol, kept);
        }
    }
    out
}

/// Exchange-local dates carrying at least one trade, ascending.
pub fn trading_days<'a>(trades: impl IntoIterator<Item = &'a Vec<Trade>>) -> Vec<NaiveDate> {
    let mut days: Vec<NaiveDate> =
        trades.into_iter().flat_map(|g| g.iter().map(|t| t.timestamp.local().date())).collect();
    days.sort_unstable();
    days.dedup();
    days
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirmReport {
    pub symbol: String,
    pub bars: usize,
    pub empty_bars: usize,
    pub screening: Screening,
    pub kyle_zero_denominator: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excluded: Option<String>,
}

/// Bars, screening, features and measures for one firm over `grid`.
pub fn prepare_firm(
    symbol: &str,
    trades: &[Trade],
    grid: &Arc<SessionGrid>,
    cfg: &PipelineConfig,
) -> (Option<FirmData>, FirmReport) {
    let mut report = FirmReport {
        symbol: symbol.to_owned(),
        bars: grid.len(),
        empty_bars: 0,
        screening: Screening { sparse_fraction: 1.0, passes: false },
        kyle_zero_denominator: 0,
        excluded: None,
    };
    let series = match aggregate(symbol, trades, grid) {
        Ok(s) => s,
        Err(e) => {
            report.excluded = Some(e.to_string());
            return (None, report);
        }
    };
    report.empty_bars = series.bars.iter().filter(|b| b.is_empty()).count();
    report.screening = screen(&series, cfg.bars.min_trades, cfg.bars.max_sparse_fraction);
    if !report.screening.passes {
        report.excluded = Some(format!(
            "sparse bar share {:.3} reaches the {} limit",
            report.screening.sparse_fraction, cfg.bars.max_sparse_fraction
        ));
        return (None, report);
    }
    let filled = fill_policy(&series, cfg.bars.fill);
    let frame = match compute_frame(&filled, &cfg.features) {
        Ok(f) => f,
        Err(e) => {
            report.excluded = Some(e.to_string());
            return (None, report);
        }
    };
    report.kyle_zero_denominator = frame.diagnostics.kyle_zero_denominator;
    let measures = MeasureSeries::compute(&filled, cfg.features.lookback);
    (Some(FirmData { symbol: symbol.to_owned(), frame, measures }), report)
}

pub fn prepare_firms(
    trades: &BTreeMap<String, Vec<Trade>>,
    grid: &Arc<SessionGrid>,
    cfg: &PipelineConfig,
) -> (Vec<FirmData>, Vec<FirmReport>) {
    let prepared: Vec<(Option<FirmData>, FirmReport)> =
        trades.par_iter().map(|(sym, t)| prepare_firm(sym, t, grid, cfg)).collect();
    let mut firms = Vec::new();
    let mut reports = Vec::new();
    for (firm, report) in prepared {
        if let Some(reason) = &report.excluded {
            warn!("excluding {}: {reason}", report.symbol);
        }
        firms.extend(firm);
        reports.push(report);
    }
    (firms, reports)
}

#[derive(Clone, Debug)]
pub struct MeasureNetwork {
    pub measure: MeasureKind,
    pub network: Network,
    pub degrees: DegreeReport,
    pub density: f64,
    pub edges: EdgeRun,
}

#[derive(Clone, Debug)]
pub struct WindowOutcome {
    pub window: WindowSpec,
    pub days: usize,
    pub firms: Vec<FirmReport>,
    pub networks: Vec<MeasureNetwork>,
    /// Why the window produced no network.
    pub skipped: Option<String>,
    pub seconds: f64,
}

fn node_for(symbol: &str, metadata: &BTreeMap<String, NodeInfo>) -> NodeInfo {
    metadata.get(symbol).cloned().unwrap_or_else(|| NodeInfo::bare(symbol))
}

/// Estimates one network per configured measure over a single window.
pub fn run_window(
    trades: &BTreeMap<String, Vec<Trade>>,
    window: &WindowSpec,
    cfg: &PipelineConfig,
    metadata: &BTreeMap<String, NodeInfo>,
) -> Result<WindowOutcome> {
    let started = Instant::now();
    let in_window = |d: NaiveDate| d >= window.start && d <= window.end;
    let mut selected = BTreeMap::new();
    for (symbol, group) in trades {
        if !window.firms.is_empty() && !window.firms.contains(symbol) {
            continue;
        }
        let kept: Vec<Trade> = group.iter().filter(|t| in_window(t.timestamp.local().date())).cloned().collect();
        if !kept.is_empty() {
            selected.insert(symbol.clone(), kept);
        }
    }
    for wanted in &window.firms {
        if !selected.contains_key(wanted) {
            warn!("{wanted} has no trades in window {} .. {}", window.start, window.end);
        }
    }
    let days = trading_days(selected.values());
    let grid = Arc::new(cfg.bars.grid(days.iter().copied())?);
    let (firms, mut reports) = prepare_firms(&selected, &grid, cfg);
    let mut outcome = WindowOutcome {
        window: window.clone(),
        days: days.len(),
        firms: Vec::new(),
        networks: Vec::new(),
        skipped: None,
        seconds: 0.0,
    };
    if firms.len() < 2 {
        let reason = format!("only {} usable firm(s)", firms.len());
        warn!("skipping window {} .. {}: {reason}", window.start, window.end);
        outcome.firms = reports;
        outcome.skipped = Some(reason);
        outcome.seconds = started.elapsed().as_secs_f64();
        return Ok(outcome);
    }
    let config_hash = cfg.hash();
    for &measure in &cfg.dataset.measures {
        info!("window {} .. {}: {} firms, measure {measure}", window.start, window.end, firms.len());
        let run = match pairwise_edges(&firms, &cfg.edge_options(measure)) {
            Ok(run) => run,
            Err(Error::Degenerate(reason)) => {
                warn!("skipping measure {measure} in window {} .. {}: {reason}", window.start, window.end);
                outcome.skipped.get_or_insert(reason);
                continue;
            }
            Err(e) => return Err(e),
        };
        for (symbol, reason) in &run.excluded {
            if let Some(r) = reports.iter_mut().find(|r| &r.symbol == symbol) {
                r.excluded.get_or_insert_with(|| format!("{measure}: {reason}"));
            }
        }
        let nodes: Vec<NodeInfo> = firms
            .iter()
            .filter(|f| !run.excluded.iter().any(|(s, _)| s == &f.symbol))
            .map(|f| node_for(&f.symbol, metadata))
            .collect();
        let network = build_network(nodes, &run.results, cfg.test.alpha, cfg.seed, config_hash.clone());
        outcome.networks.push(MeasureNetwork {
            measure,
            degrees: degrees(&network),
            density: density(&network),
            network,
            edges: run,
        });
    }
    outcome.firms = reports;
    outcome.seconds = started.elapsed().as_secs_f64();
    Ok(outcome)
}

/// Processes windows in order. Without configured windows a single window
/// spans every trading day in the data.
pub fn run_windows(
    trades: &BTreeMap<String, Vec<Trade>>,
    cfg: &PipelineConfig,
    metadata: &BTreeMap<String, NodeInfo>,
) -> Result<Vec<WindowOutcome>> {
    let windows = if cfg.windows.is_empty() {
        let days = trading_days(trades.values());
        match (days.first(), days.last()) {
            (Some(&start), Some(&end)) => vec![WindowSpec { start, end, firms: Vec::new() }],
            _ => return Err(Error::data("no trades to analyse")),
        }
    } else {
        cfg.windows.clone()
    };
    windows.iter().map(|w| run_window(trades, w, cfg, metadata)).collect()
}

/// Writes `window_start,window_end,density,n_firms,n_edges` for one measure.
pub fn write_density_csv<W: std::io::Write>(writer: W, outcomes: &[WindowOutcome], measure: MeasureKind) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["window_start", "window_end", "density", "n_firms", "n_edges"])?;
    for o in outcomes {
        if let Some(net) = o.networks.iter().find(|n| n.measure == measure) {
            wtr.write_record([
                o.window.start.to_string(),
                o.window.end.to_string(),
                net.density.to_string(),
                net.network.nodes.len().to_string(),
                net.network.edges.len().to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of_bytes(path: impl Into<String>, bytes: &[u8]) -> Self {
        FileDigest { path: path.into(), sha256: hex::encode(Sha256::digest(bytes)) }
    }

    pub fn of_file(path: &Path) -> Result<Self> {
        Ok(Self::of_bytes(path.display().to_string(), &std::fs::read(path)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub seconds: f64,
    pub days: usize,
    pub firms: Vec<FirmReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
    /// `(measure, source, target, reason)` for pair tests that could not run.
    pub skipped_pairs: Vec<(MeasureKind, String, String, String)>,
}

impl WindowRecord {
    pub fn from_outcome(o: &WindowOutcome) -> Self {
        WindowRecord {
            start: o.window.start,
            end: o.window.end,
            seconds: o.seconds,
            days: o.days,
            firms: o.firms.clone(),
            skipped: o.skipped.clone(),
            skipped_pairs: o
                .networks
                .iter()
                .flat_map(|n| n.edges.skipped.iter().map(move |(s, t, r)| (n.measure, s.clone(), t.clone(), r.clone())))
                .collect(),
        }
    }
}

/// Provenance of one run. The id depends only on the configuration, the
/// inputs and the crate version, so reruns share it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub filter: BTreeMap<String, FilterReport>,
    pub windows: Vec<WindowRecord>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(cfg: &PipelineConfig, inputs: Vec<FileDigest>) -> Self {
        let config_hash = cfg.hash();
        let version = env!("CARGO_PKG_VERSION").to_owned();
        let mut hasher = Sha256::new();
        hasher.update(config_hash.as_bytes());
        hasher.update(version.as_bytes());
        for input in &inputs {
            hasher.update(input.sha256.as_bytes());
        }
        let manifest_id = hex::encode(&hasher.finalize()[..8]);
        RunManifest {
            manifest_id,
            config_hash,
            seed: cfg.seed,
            versions: BTreeMap::from([("hftnet-core".to_owned(), version)]),
            inputs,
            filter: BTreeMap::new(),
            windows: Vec::new(),
            outputs: Vec::new(),
        }
    }
}
