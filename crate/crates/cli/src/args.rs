use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use hftnet_core::eval::SplitSpec;
use hftnet_core::measures::MeasureKind;

#[derive(Debug, Parser)]
#[command(name = "hftnet", version, about = "Cross-predictability networks from high-frequency trades")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand. Flags override values from `--config`.
#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Pipeline configuration (TOML, or JSON starting with `{`).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// FDR level for accepting edges.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Trees per forest.
    #[arg(long, global = true)]
    pub trees: Option<usize>,
    /// Candidate features per split (default floor(sqrt(p))).
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Bootstrap replicates for the AUC test.
    #[arg(long, global = true)]
    pub boot: Option<usize>,
    /// Lookback window W in bars.
    #[arg(long, global = true)]
    pub lookback: Option<usize>,
    /// Forecast horizon h in bars.
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// `purged:G=6,purge=5d` or `chrono:frac=0.5,purge=5d`.
    #[arg(long, global = true, value_parser = parse_split)]
    pub split: Option<SplitSpec>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Target measure; repeat for both.
    #[arg(long, global = true, value_parser = parse_measure)]
    pub measure: Vec<MeasureKind>,
    /// Timezone for timestamps without an offset.
    #[arg(long, global = true)]
    pub tz: Option<String>,
    /// Estimation window `START:END` (inclusive dates); repeatable.
    #[arg(long = "window", global = true, value_parser = parse_window)]
    pub windows: Vec<(NaiveDate, NaiveDate)>,
    /// Append machine-readable progress events to this JSONL file.
    #[arg(long, global = true, value_name = "FILE")]
    pub events: Option<PathBuf>,
    /// More logging (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

fn parse_split(s: &str) -> Result<SplitSpec, String> {
    s.parse().map_err(|e: hftnet_core::Error| e.to_string())
}

fn parse_measure(s: &str) -> Result<MeasureKind, String> {
    s.parse().map_err(|e: hftnet_core::Error| e.to_string())
}

fn parse_window(s: &str) -> Result<(NaiveDate, NaiveDate), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected START:END, got '{s}'"))?;
    let parse = |d: &str| NaiveDate::parse_from_str(d, "%Y-%m-%d").map_err(|e| format!("'{d}': {e}"));
    Ok((parse(a)?, parse(b)?))
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Trade CSV files or directories of them.
    #[arg(long, short, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    /// Firm whose measure is predicted.
    #[arg(long)]
    pub target: String,
    /// Firm whose features are appended.
    #[arg(long)]
    pub cross: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic trade files with planted influences.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        /// Generator settings (TOML or JSON).
        #[arg(long, value_name = "FILE")]
        synth_config: Option<PathBuf>,
        #[arg(long)]
        firms: Option<usize>,
        #[arg(long)]
        days: Option<usize>,
    },
    /// Filter trades and aggregate them into time bars.
    Bars(InputArgs),
    /// Compute microstructure features per firm and bar.
    Features(InputArgs),
    /// Assemble the labelled dataset for one prediction task.
    Dataset {
        #[command(flatten)]
        io: InputArgs,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Permutation importance per feature across the configured folds.
    Mda {
        #[command(flatten)]
        io: InputArgs,
        #[command(flatten)]
        task: TaskArgs,
        /// Permutations per feature and fold.
        #[arg(long, default_value_t = 1)]
        mda_repeats: usize,
    },
    /// Run all pairwise tests and write per-pair results.
    Edges(InputArgs),
    /// Full run: pair tests, FDR, networks, metrics and manifest.
    Network {
        #[command(flatten)]
        io: InputArgs,
        /// Firm metadata CSV with `id,mcap,sector`.
        #[arg(long, value_name = "FILE")]
        metadata: Option<PathBuf>,
    },
    /// Rebuild density, degree and ROC tables from a stored run.
    Report {
        /// Output directory of a previous `network` or `edges` run.
        #[arg(long)]
        run: PathBuf,
        /// Where to write tables (default `<run>/report`).
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Restrict networks to these firms (comma separated).
        #[arg(long, value_delimiter = ',')]
        subset: Vec<String>,
        /// Rows in the top in/out degree tables.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
}
