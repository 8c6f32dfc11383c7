use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use hftnet_core::bars::{aggregate, fill_policy, screen, write_bars};
use hftnet_core::eval::{cv_mda, make_splits};
use hftnet_core::features::write_features;
use hftnet_core::measures::{assemble, FirmData};
use hftnet_core::network::read_firm_metadata;
use hftnet_core::pipeline::{
    prepare_firms, run_windows, trading_days, with_jobs, write_density_csv, FileDigest, PipelineConfig,
    RunManifest, WindowOutcome, WindowRecord, WindowSpec,
};
use hftnet_core::synth::{generate, write_outputs, SynthConfig};
use hftnet_core::Error;
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::args::{Cli, Command, GlobalOpts, InputArgs, TaskArgs};
use crate::events::EventLog;
use crate::inputs::{create_dir, load, Loaded};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let events = EventLog::open(cli.global.events.as_deref())?;
    let global = &cli.global;
    match cli.command {
        Command::Synth { out, synth_config, firms, days } => synth(global, &out, synth_config.as_deref(), firms, days),
        Command::Report { run, out, subset, top } => {
            let out = out.unwrap_or_else(|| run.join("report"));
            crate::report::report(&run, &out, &subset, top)
        }
        command => {
            let cfg = effective_config(global)?;
            with_jobs(global.jobs, || dispatch(command, &cfg, &events))?
        }
    }
}

fn dispatch(command: Command, cfg: &PipelineConfig, events: &EventLog) -> anyhow::Result<()> {
    match command {
        Command::Bars(io) => bars(&io, cfg),
        Command::Features(io) => features(&io, cfg),
        Command::Dataset { io, task } => dataset(&io, &task, cfg),
        Command::Mda { io, task, mda_repeats } => mda(&io, &task, mda_repeats, cfg),
        Command::Edges(io) => pipeline(&io, None, false, cfg, events),
        Command::Network { io, metadata } => pipeline(&io, metadata.as_deref(), true, cfg, events),
        Command::Synth { .. } | Command::Report { .. } => unreachable!("handled before configuration"),
    }
}

/// Configuration file (or defaults) with command-line overrides applied.
pub fn effective_config(g: &GlobalOpts) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = g.seed {
        cfg.seed = v;
    }
    if let Some(v) = g.alpha {
        cfg.test.alpha = v;
    }
    if let Some(v) = g.trees {
        cfg.forest.trees = v;
    }
    if g.m.is_some() {
        cfg.forest.m = g.m;
    }
    if let Some(v) = g.boot {
        cfg.test.boot = v;
    }
    if let Some(v) = g.lookback {
        cfg.features.lookback = v;
    }
    if let Some(v) = g.horizon {
        cfg.dataset.horizon = v;
    }
    if let Some(v) = g.split {
        cfg.test.split = v;
    }
    if !g.measure.is_empty() {
        cfg.dataset.measures = g.measure.clone();
    }
    if let Some(tz) = &g.tz {
        cfg.bars.timezone = tz.clone();
    }
    if !g.windows.is_empty() {
        cfg.windows = g.windows.iter().map(|&(start, end)| WindowSpec { start, end, firms: Vec::new() }).collect();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dump_config(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let text = toml::to_string(cfg).context("serializing the effective configuration")?;
    log::debug!("effective configuration:\n{text}");
    std::fs::write(out.join("effective_config.toml"), text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn writer(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Starts a manifest for `loaded`, writes the effective config next to it.
fn begin(cfg: &PipelineConfig, loaded: &Loaded, out: &Path) -> anyhow::Result<RunManifest> {
    create_dir(out)?;
    dump_config(cfg, out)?;
    let mut manifest = RunManifest::new(cfg, loaded.digests.clone());
    manifest.versions.insert("hftnet-cli".into(), env!("CARGO_PKG_VERSION").into());
    manifest.filter = loaded.ingested.filter.clone();
    Ok(manifest)
}

/// Digests every output, relative to `out`, and writes `manifest.json`.
fn finish(mut manifest: RunManifest, out: &Path, outputs: &[PathBuf]) -> anyhow::Result<()> {
    for path in outputs {
        let bytes = std::fs::read(path)?;
        let rel = path.strip_prefix(out).unwrap_or(path);
        manifest.outputs.push(FileDigest::of_bytes(rel.display().to_string(), &bytes));
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    info!("manifest {} written to {}", manifest.manifest_id, out.display());
    Ok(())
}

fn synth(
    g: &GlobalOpts,
    out: &Path,
    config: Option<&Path>,
    firms: Option<usize>,
    days: Option<usize>,
) -> anyhow::Result<()> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            if text.trim_start().starts_with('{') {
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
            } else {
                toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
            }
        }
        None => SynthConfig::default(),
    };
    if let Some(n) = firms {
        cfg.n_firms = n;
    }
    if let Some(d) = days {
        cfg.days = d;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let output = with_jobs(g.jobs, || generate(&cfg))??;
    let written = write_outputs(&cfg, &output, out)?;
    write_json(&out.join("synth_config.json"), &cfg)?;
    info!("wrote {} files to {}", written.len() + 1, out.display());
    Ok(())
}

fn bars(io: &InputArgs, cfg: &PipelineConfig) -> anyhow::Result<()> {
    let loaded = load(&io.input, cfg)?;
    let manifest = begin(cfg, &loaded, &io.out)?;
    let grid = Arc::new(cfg.bars.grid(trading_days(loaded.trades().values()))?);
    let mut series = Vec::new();
    let mut screening = serde_json::Map::new();
    for (symbol, trades) in loaded.trades() {
        let raw = aggregate(symbol, trades, &grid)?;
        let s = screen(&raw, cfg.bars.min_trades, cfg.bars.max_sparse_fraction);
        screening.insert(symbol.clone(), serde_json::to_value(&s)?);
        series.push(fill_policy(&raw, cfg.bars.fill));
    }
    let bars_path = io.out.join("bars.csv");
    write_bars(writer(&bars_path)?, &series)?;
    let report_path = io.out.join("filter_report.json");
    write_json(
        &report_path,
        &json!({
            "manifest_id": manifest.manifest_id,
            "filter": loaded.ingested.filter,
            "screening": screening,
        }),
    )?;
    finish(manifest, &io.out, &[bars_path, report_path])
}

fn firms(loaded: &Loaded, cfg: &PipelineConfig) -> anyhow::Result<Vec<FirmData>> {
    let grid = Arc::new(cfg.bars.grid(trading_days(loaded.trades().values()))?);
    let (firms, reports) = prepare_firms(loaded.trades(), &grid, cfg);
    if firms.is_empty() {
        let reasons: Vec<String> =
            reports.iter().map(|r| format!("{}: {}", r.symbol, r.excluded.as_deref().unwrap_or("?"))).collect();
        return Err(Error::Data(format!("no usable firms ({})", reasons.join("; "))).into());
    }
    Ok(firms)
}

fn features(io: &InputArgs, cfg: &PipelineConfig) -> anyhow::Result<()> {
    let loaded = load(&io.input, cfg)?;
    let manifest = begin(cfg, &loaded, &io.out)?;
    let firms = firms(&loaded, cfg)?;
    let frames: Vec<_> = firms.iter().map(|f| f.frame.clone()).collect();
    let path = io.out.join("features.csv");
    write_features(writer(&path)?, &frames)?;
    finish(manifest, &io.out, &[path])
}

fn find<'a>(firms: &'a [FirmData], symbol: &str) -> anyhow::Result<&'a FirmData> {
    firms
        .iter()
        .find(|f| f.symbol == symbol)
        .ok_or_else(|| Error::Data(format!("firm {symbol} is not among the usable firms")).into())
}

fn dataset(io: &InputArgs, task: &TaskArgs, cfg: &PipelineConfig) -> anyhow::Result<()> {
    let loaded = load(&io.input, cfg)?;
    let manifest = begin(cfg, &loaded, &io.out)?;
    let firms = firms(&loaded, cfg)?;
    let target = find(&firms, &task.target)?;
    let cross = task.cross.as_deref().map(|c| find(&firms, c)).transpose()?;
    let mut outputs = Vec::new();
    for &measure in &cfg.dataset.measures {
        let ds = assemble(target, cross.map(|c| &c.frame), measure, cfg.dataset.horizon, cfg.dataset.min_rows)?;
        info!("{measure}: {} rows, {} features", ds.len(), ds.width());
        let csv_path = io.out.join(format!("dataset_{measure}.csv"));
        ds.write_csv(writer(&csv_path)?)?;
        let task_path = io.out.join(format!("task_{measure}.json"));
        write_json(&task_path, &json!({ "manifest_id": manifest.manifest_id, "task": ds.task }))?;
        outputs.extend([csv_path, task_path]);
    }
    finish(manifest, &io.out, &outputs)
}

fn mda(io: &InputArgs, task: &TaskArgs, repeats: usize, cfg: &PipelineConfig) -> anyhow::Result<()> {
    let loaded = load(&io.input, cfg)?;
    let manifest = begin(cfg, &loaded, &io.out)?;
    let firms = firms(&loaded, cfg)?;
    let target = find(&firms, &task.target)?;
    let cross = task.cross.as_deref().map(|c| find(&firms, c)).transpose()?;
    let mut outputs = Vec::new();
    for &measure in &cfg.dataset.measures {
        let ds = assemble(target, cross.map(|c| &c.frame), measure, cfg.dataset.horizon, cfg.dataset.min_rows)?;
        let plan = make_splits(&ds.timestamps, &cfg.test.split)?;
        let report = cv_mda(&ds, &plan, &cfg.forest_params(), cfg.seed, repeats)?;
        let csv_path = io.out.join(format!("mda_{measure}.csv"));
        report.write_csv(writer(&csv_path)?)?;
        let json_path = io.out.join(format!("mda_{measure}.json"));
        write_json(&json_path, &json!({ "manifest_id": manifest.manifest_id, "task": ds.task, "mda": report }))?;
        outputs.extend([csv_path, json_path]);
    }
    finish(manifest, &io.out, &outputs)
}

pub fn window_dir_name(w: &WindowSpec) -> String {
    format!("{}_{}", w.start, w.end)
}

fn pipeline(
    io: &InputArgs,
    metadata: Option<&Path>,
    full: bool,
    cfg: &PipelineConfig,
    events: &EventLog,
) -> anyhow::Result<()> {
    let loaded = load(&io.input, cfg)?;
    let mut manifest = begin(cfg, &loaded, &io.out)?;
    let metadata = match metadata {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            read_firm_metadata(std::io::BufReader::new(file))?
        }
        None => Default::default(),
    };
    events.emit(
        "run_start",
        json!({ "manifest_id": manifest.manifest_id, "config_hash": manifest.config_hash, "windows": cfg.windows.len() }),
    );
    let outcomes = run_windows(loaded.trades(), cfg, &metadata)?;
    let mut outputs = Vec::new();
    for outcome in &outcomes {
        outputs.extend(write_window(outcome, &io.out, &manifest.manifest_id, full)?);
        events.emit(
            "window_done",
            json!({
                "start": outcome.window.start,
                "end": outcome.window.end,
                "seconds": outcome.seconds,
                "skipped": outcome.skipped,
                "networks": outcome.networks.iter().map(|n| json!({
                    "measure": n.measure,
                    "density": n.density,
                    "edges": n.network.edges.len(),
                    "tests": n.edges.results.len(),
                })).collect::<Vec<_>>(),
            }),
        );
    }
    if full {
        for &measure in &cfg.dataset.measures {
            let path = io.out.join(format!("density_{measure}.csv"));
            write_density_csv(writer(&path)?, &outcomes, measure)?;
            outputs.push(path);
        }
    }
    manifest.windows = outcomes.iter().map(WindowRecord::from_outcome).collect();
    finish(manifest, &io.out, &outputs)?;
    let networks: usize = outcomes.iter().map(|o| o.networks.len()).sum();
    events.emit("run_end", json!({ "windows": outcomes.len(), "networks": networks }));
    if networks == 0 {
        return Err(Error::Degenerate("no window produced a network".into()).into());
    }
    Ok(())
}

fn write_window(outcome: &WindowOutcome, out: &Path, manifest_id: &str, full: bool) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let base = out.join("windows").join(window_dir_name(&outcome.window));
    for net in &outcome.networks {
        let dir = base.join(net.measure.to_string());
        create_dir(&dir)?;
        let edges = dir.join("edges.json");
        write_json(
            &edges,
            &json!({
                "manifest_id": manifest_id,
                "window": { "start": outcome.window.start, "end": outcome.window.end },
                "measure": net.measure,
                "excluded": net.edges.excluded,
                "skipped": net.edges.skipped,
                "results": net.edges.results,
            }),
        )?;
        let predictions = dir.join("predictions.json");
        write_json(
            &predictions,
            &json!({ "manifest_id": manifest_id, "measure": net.measure, "pairs": net.edges.predictions }),
        )?;
        written.extend([edges, predictions]);
        if !full {
            continue;
        }
        let mut network = net.network.clone();
        network.manifest_id = Some(manifest_id.to_owned());
        let paths = [dir.join("network.json"), dir.join("network.dot"), dir.join("network.graphml")];
        std::fs::write(&paths[0], network.to_json()? + "\n")?;
        std::fs::write(&paths[1], network.to_dot())?;
        std::fs::write(&paths[2], network.to_graphml())?;
        let degrees = dir.join("degrees.csv");
        net.degrees.write_csv(writer(&degrees)?)?;
        written.extend(paths);
        written.push(degrees);
        info!(
            "window {} {}: {} edges, density {:.3}",
            window_dir_name(&outcome.window),
            net.measure,
            network.edges.len(),
            net.density
        );
    }
    Ok(written)
}
