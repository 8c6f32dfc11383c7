use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::Context;
use hftnet_core::bars::{read_trades, Trade, TzSpec};
use hftnet_core::pipeline::{ingest, FileDigest, Ingested, PipelineConfig};
use log::info;

/// Expands directories into their `.csv` files, sorted by name.
pub fn csv_files(paths: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(path)
                .with_context(|| format!("listing {}", path.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(path.clone());
        }
    }
    if files.is_empty() {
        return Err(hftnet_core::Error::Data("no trade CSV files found".into()).into());
    }
    Ok(files)
}

pub struct Loaded {
    pub ingested: Ingested,
    pub digests: Vec<FileDigest>,
}

impl Loaded {
    pub fn trades(&self) -> &BTreeMap<String, Vec<Trade>> {
        &self.ingested.trades
    }
}

/// Reads, filters and groups all trades, recording a digest per file.
pub fn load(paths: &[PathBuf], cfg: &PipelineConfig) -> anyhow::Result<Loaded> {
    let tz: TzSpec = cfg.bars.timezone.parse()?;
    let mut all = Vec::new();
    let mut digests = Vec::new();
    for file in csv_files(paths)? {
        digests.push(FileDigest::of_file(&file).with_context(|| format!("reading {}", file.display()))?);
        let reader = BufReader::new(File::open(&file).with_context(|| format!("opening {}", file.display()))?);
        let trades = read_trades(reader, Some(&tz)).with_context(|| format!("reading {}", file.display()))?;
        info!("{}: {} trades", file.display(), trades.len());
        all.extend(trades);
    }
    let ingested = ingest(all, &cfg.bars);
    let dropped: usize = ingested.filter.values().map(|r| r.dropped()).sum();
    info!("{} symbols after filtering, {dropped} trades dropped", ingested.trades.len());
    Ok(Loaded { ingested, digests })
}

pub fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
