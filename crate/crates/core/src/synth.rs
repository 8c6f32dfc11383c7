//! Synthetic multi-firm trade streams with planted cross-firm effects.
//!
//! Every firm carries a two-state volatility regime. While a firm sits in its
//! high regime it also carries a persistent signed order-flow imbalance that
//! tilts its returns and its buy/sell mix. An influence `x -> y` raises firm
//! `y`'s low-to-high switching hazard in proportion to the magnitude of `x`'s
//! imbalance `lag` bars earlier, so `x`'s flow features lead `y`'s
//! volatility.
//!
//! The latent processes advance once per retained bar. Trades in the
//! discarded opening slot print around the previous close, so the first
//! retained bar of a day carries a single bar's worth of innovation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, TimeDelta, TimeZone, Weekday};
use chrono_tz::America::New_York;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bars::{write_trades, SessionGrid, Timestamp, Trade};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeParams {
    /// Per-slot log-return standard deviation in the low regime.
    pub sigma_low: f64,
    pub sigma_high: f64,
    /// Baseline per-slot probability of switching low -> high.
    pub p_up: f64,
    /// Per-slot probability of switching high -> low.
    pub p_down: f64,
}

impl Default for RegimeParams {
    fn default() -> Self {
        RegimeParams { sigma_low: 0.002, sigma_high: 0.008, p_up: 0.03, p_down: 0.06 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Influence {
    pub source: usize,
    pub target: usize,
    /// Delay in bars between the source's imbalance and the target's hazard.
    pub lag: usize,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_firms: usize,
    /// Optional symbols; missing entries become `F00`, `F01`, ...
    pub symbols: Vec<String>,
    pub days: usize,
    pub start_date: NaiveDate,
    /// Poisson mean of trades per slot.
    pub trades_per_bar: f64,
    /// Starting price per firm; firms beyond the list start at 50.
    pub base_price: Vec<f64>,
    pub regime: RegimeParams,
    pub influence: Vec<Influence>,
    /// Hazard added per unit of `strength * |imbalance|`.
    pub influence_gain: f64,
    /// Imbalance magnitude while a firm is in its high regime.
    pub imbalance_level: f64,
    /// Per-slot probability that the imbalance direction flips.
    pub imbalance_flip: f64,
    /// Loading of the imbalance on the standardized slot return.
    pub drift_loading: f64,
    /// Per-slot pull of the log price back towards its starting level. Keeps
    /// price-denominated features comparable across a long sample.
    pub price_reversion: f64,
    /// Quoted spread as a fraction of price; trades print at bid or ask.
    pub spread: f64,
    /// Mean trade size in round lots of 100 shares.
    pub mean_lots: f64,
    /// Allow slots with no trades.
    pub sparse: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_firms: 4,
            symbols: Vec::new(),
            days: 260,
            start_date: NaiveDate::from_ymd_opt(2007, 1, 3).expect("valid date"),
            trades_per_bar: 20.0,
            base_price: Vec::new(),
            regime: RegimeParams::default(),
            influence: Vec::new(),
            influence_gain: 0.25,
            imbalance_level: 0.6,
            imbalance_flip: 0.05,
            drift_loading: 0.5,
            price_reversion: 0.01,
            spread: 0.0005,
            mean_lots: 5.0,
            sparse: false,
            seed: 0,
        }
    }
}

fn unit_interval(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.n_firms == 0 {
            return bad("n_firms must be positive".into());
        }
        if self.days == 0 {
            return bad("days must be positive".into());
        }
        if self.symbols.len() > self.n_firms {
            return bad(format!("{} symbols given for {} firms", self.symbols.len(), self.n_firms));
        }
        if !(self.trades_per_bar > 0.0) || !(self.mean_lots >= 1.0) {
            return bad("trades_per_bar must be positive and mean_lots at least 1".into());
        }
        if self.base_price.iter().any(|&p| !(p > 0.0)) {
            return bad("base prices must be positive".into());
        }
        let r = &self.regime;
        if !(r.sigma_low > 0.0 && r.sigma_high > 0.0) || !unit_interval(r.p_up) || !unit_interval(r.p_down) {
            return bad("regime volatilities must be positive and switch probabilities in [0,1]".into());
        }
        if !unit_interval(self.imbalance_level) || !unit_interval(self.imbalance_flip) {
            return bad("imbalance_level and imbalance_flip must lie in [0,1]".into());
        }
        if !unit_interval(self.price_reversion) {
            return bad("price_reversion must lie in [0,1]".into());
        }
        if !(self.influence_gain >= 0.0) || !(self.spread >= 0.0 && self.spread < 0.5) {
            return bad("influence_gain must be non-negative and spread in [0, 0.5)".into());
        }
        if self.drift_loading.abs() * self.imbalance_level >= 1.0 {
            return bad("drift_loading * imbalance_level must be below 1".into());
        }
        for inf in &self.influence {
            if inf.source >= self.n_firms || inf.target >= self.n_firms {
                return bad(format!("influence {} -> {} references a missing firm", inf.source, inf.target));
            }
            if inf.source == inf.target {
                return bad(format!("influence on the diagonal for firm {}", inf.source));
            }
            if inf.lag == 0 {
                return bad(format!("influence {} -> {} needs lag >= 1", inf.source, inf.target));
            }
            if !unit_interval(inf.strength) {
                return bad(format!("influence {} -> {} strength must be in [0,1]", inf.source, inf.target));
            }
        }
        let mut pairs: Vec<(usize, usize)> = self.influence.iter().map(|i| (i.source, i.target)).collect();
        pairs.sort_unstable();
        if pairs.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate influence entry".into());
        }
        Ok(())
    }

    pub fn symbols(&self) -> Vec<String> {
        (0..self.n_firms)
            .map(|i| self.symbols.get(i).cloned().unwrap_or_else(|| format!("F{i:02}")))
            .collect()
    }

    /// Weekdays from `start_date` onwards; exchange holidays are not modelled.
    pub fn trading_days(&self) -> Vec<NaiveDate> {
        self.start_date
            .iter_days()
            .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
            .take(self.days)
            .collect()
    }

    pub fn grid(&self) -> SessionGrid {
        SessionGrid::regular(self.trading_days())
    }
}

/// Latent state paths, one entry per retained bar.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPaths {
    pub high: Vec<Vec<bool>>,
    pub imbalance: Vec<Vec<f64>>,
    /// Regime-driven log-return innovation of each slot.
    pub innovations: Vec<Vec<f64>>,
    /// Log mid price at the end of each slot.
    pub log_mid: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub symbols: Vec<String>,
    pub grid: SessionGrid,
    pub trades: BTreeMap<String, Vec<Trade>>,
    pub latent: LatentPaths,
}

fn simulate_latent(cfg: &SynthConfig, slots: usize) -> LatentPaths {
    let n = cfg.n_firms;
    let r = &cfg.regime;
    let mut rngs: Vec<_> = (0..n).map(|f| rng::stream(cfg.seed, &[rng::tag("latent"), f as u64])).collect();
    let mut high = vec![vec![false; slots]; n];
    let mut imbalance = vec![vec![0.0f64; slots]; n];
    let mut innovations = vec![vec![0.0; slots]; n];
    let mut log_mid = vec![vec![0.0; slots]; n];
    let anchor: Vec<f64> = (0..n).map(|f| cfg.base_price.get(f).copied().unwrap_or(50.0).ln()).collect();
    let mut price = anchor.clone();
    let stationary_high = if r.p_up + r.p_down > 0.0 { r.p_up / (r.p_up + r.p_down) } else { 0.0 };
    let mut state: Vec<bool> = rngs.iter_mut().map(|g| g.random::<f64>() < stationary_high).collect();
    let mut direction: Vec<f64> = rngs.iter_mut().map(|g| if g.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let level = cfg.imbalance_level;
    let scale_low = 1.0;
    let scale_high = (1.0 - (cfg.drift_loading * level).powi(2)).sqrt();

    for t in 0..slots {
        for f in 0..n {
            let g = &mut rngs[f];
            // Hazards for slot t use the previous state and lagged imbalances.
            let (u, flip, z): (f64, f64, f64) = (g.random(), g.random(), g.sample(StandardNormal));
            if t > 0 {
                let hazard = if state[f] {
                    r.p_down
                } else {
                    let push: f64 = cfg
                        .influence
                        .iter()
                        .filter(|inf| inf.target == f && inf.lag <= t)
                        .map(|inf| inf.strength * imbalance[inf.source][t - inf.lag].abs())
                        .sum();
                    (r.p_up + cfg.influence_gain * push).min(1.0)
                };
                if u < hazard {
                    state[f] = !state[f];
                }
                if flip < cfg.imbalance_flip {
                    direction[f] = -direction[f];
                }
            }
            let oi = if state[f] { direction[f] * level } else { 0.0 };
            let (sigma, scale) = if state[f] { (r.sigma_high, scale_high) } else { (r.sigma_low, scale_low) };
            high[f][t] = state[f];
            imbalance[f][t] = oi;
            innovations[f][t] = sigma * (cfg.drift_loading * oi + scale * z);
            price[f] += innovations[f][t] - cfg.price_reversion * (price[f] - anchor[f]);
            log_mid[f][t] = price[f];
        }
    }
    LatentPaths { high, imbalance, innovations, log_mid }
}

fn firm_trades(
    cfg: &SynthConfig,
    firm: usize,
    symbol: &str,
    grid: &SessionGrid,
    latent: &LatentPaths,
) -> Result<Vec<Trade>> {
    let mut g = rng::stream(cfg.seed, &[rng::tag("trades"), firm as u64]);
    let count = Poisson::new(cfg.trades_per_bar).map_err(|e| Error::config(e.to_string()))?;
    let lots = if cfg.mean_lots > 1.0 {
        Some(Poisson::new(cfg.mean_lots - 1.0).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };
    let width = grid.bar_width();
    let width_us = width.num_microseconds().expect("bar width fits in microseconds");
    let raw = grid.raw_slots_per_day();
    let kept = grid.slots_per_day();
    let skipped = raw - kept;
    let mut log_mid = cfg.base_price.get(firm).copied().unwrap_or(50.0).ln();
    let mut out = Vec::new();
    let mut times = Vec::new();

    for (d, day) in grid.trading_days().iter().enumerate() {
        for s in 0..raw {
            // Discarded opening slots print around the previous close.
            let bar = s.checked_sub(skipped).map(|b| d * kept + b);
            let (sigma, end, imbalance) = match bar {
                Some(t) => (
                    if latent.high[firm][t] { cfg.regime.sigma_high } else { cfg.regime.sigma_low },
                    latent.log_mid[firm][t],
                    latent.imbalance[firm][t],
                ),
                None => (cfg.regime.sigma_low, log_mid, 0.0),
            };
            let mut k = count.sample(&mut g) as usize;
            if !cfg.sparse {
                k = k.max(1);
            }
            times.clear();
            times.extend((0..k).map(|_| g.random_range(0..width_us)));
            times.sort_unstable();

            let buy_prob = 0.5 * (1.0 + imbalance);
            let slot_start = day.and_time(grid.session_open()) + width * s as i32;
            let (mut u_prev, mut level): (f64, f64) = (0.0, log_mid);
            for &us in &times {
                let u = us as f64 / width_us as f64;
                // Brownian bridge from the slot's opening mid to its closing mid.
                let remaining = 1.0 - u_prev;
                let mean = level + (end - level) * (u - u_prev) / remaining;
                let var = sigma * sigma * (u - u_prev) * (1.0 - u) / remaining;
                let z: f64 = g.sample(StandardNormal);
                level = mean + var.max(0.0).sqrt() * z;
                u_prev = u;
                let side = if g.random::<f64>() < buy_prob { 1.0 } else { -1.0 };
                let price = level.exp() * (1.0 + side * cfg.spread / 2.0);
                let shares = 100.0 * (1.0 + lots.map_or(0.0, |p| p.sample(&mut g)));
                let local = slot_start + TimeDelta::microseconds(us);
                let stamped = New_York
                    .from_local_datetime(&local)
                    .earliest()
                    .ok_or_else(|| Error::data(format!("{local} does not exist in America/New_York")))?;
                out.push(Trade {
                    symbol: symbol.to_owned(),
                    timestamp: Timestamp::from_datetime(&stamped),
                    price: (price * 1e4).round() / 1e4,
                    volume: shares,
                    correction: None,
                    suffix: None,
                });
            }
            log_mid = end;
        }
    }
    Ok(out)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let symbols = cfg.symbols();
    let grid = cfg.grid();
    let slots = grid.len();
    let latent = simulate_latent(cfg, slots);
    let trades = symbols
        .par_iter()
        .enumerate()
        .map(|(f, sym)| Ok((sym.clone(), firm_trades(cfg, f, sym, &grid, &latent)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(SynthOutput { symbols, grid, trades, latent })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEdge {
    pub src: String,
    pub dst: String,
    pub lag: usize,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub symbols: Vec<String>,
    pub edges: Vec<GroundTruthEdge>,
    pub seed: u64,
    pub config: SynthConfig,
}

impl GroundTruth {
    pub fn from_config(cfg: &SynthConfig) -> Self {
        let symbols = cfg.symbols();
        let mut edges: Vec<GroundTruthEdge> = cfg
            .influence
            .iter()
            .filter(|i| i.strength > 0.0)
            .map(|i| GroundTruthEdge {
                src: symbols[i.source].clone(),
                dst: symbols[i.target].clone(),
                lag: i.lag,
                strength: i.strength,
            })
            .collect();
        edges.sort_by(|a, b| (&a.src, &a.dst).cmp(&(&b.src, &b.dst)));
        GroundTruth { symbols, edges, seed: cfg.seed, config: cfg.clone() }
    }

    pub fn contains(&self, src: &str, dst: &str) -> bool {
        self.edges.iter().any(|e| e.src == src && e.dst == dst)
    }
}

/// Writes `<SYMBOL>.csv` per firm plus `ground_truth.json` into `dir`.
pub fn write_outputs(cfg: &SynthConfig, output: &SynthOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (symbol, trades) in &output.trades {
        let path = dir.join(format!("{symbol}.csv"));
        write_trades(BufWriter::new(File::create(&path)?), trades)?;
        written.push(path);
    }
    let path = dir.join("ground_truth.json");
    std::fs::write(&path, serde_json::to_string_pretty(&GroundTruth::from_config(cfg))?)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bars::{aggregate, filter_trades, read_trades, FilterRules};
    use std::sync::Arc;

    fn small() -> SynthConfig {
        SynthConfig { n_firms: 2, days: 20, seed: 7, ..SynthConfig::default() }
    }

    #[test]
    fn validation_rejects_bad_influence() {
        let mut cfg = small();
        cfg.influence = vec![Influence { source: 0, target: 0, lag: 1, strength: 0.5 }];
        assert!(cfg.validate().is_err());
        cfg.influence = vec![Influence { source: 0, target: 1, lag: 0, strength: 0.5 }];
        assert!(cfg.validate().is_err());
        cfg.influence = vec![Influence { source: 0, target: 1, lag: 3, strength: 1.5 }];
        assert!(cfg.validate().is_err());
        cfg.influence = vec![Influence { source: 0, target: 1, lag: 3, strength: 0.5 }];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn output_is_deterministic_and_passes_filters() {
        let cfg = small();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.trades, b.trades);
        for trades in a.trades.values() {
            let (kept, report) = filter_trades(trades.iter().cloned(), &FilterRules::default());
            assert_eq!(report.dropped(), 0);
            assert_eq!(kept.len(), trades.len());
        }
    }

    #[test]
    fn csv_round_trip_preserves_trades() {
        let cfg = small();
        let out = generate(&cfg).unwrap();
        let trades = &out.trades["F00"];
        let mut buf = Vec::new();
        write_trades(&mut buf, trades).unwrap();
        let back = read_trades(buf.as_slice(), None).unwrap();
        assert_eq!(&back, trades);
    }

    #[test]
    fn every_bar_has_trades_unless_sparse() {
        let cfg = SynthConfig { trades_per_bar: 0.5, ..small() };
        let out = generate(&cfg).unwrap();
        let grid = Arc::new(out.grid.clone());
        let series = aggregate("F00", &out.trades["F00"], &grid).unwrap();
        assert!(series.bars.iter().all(|b| !b.is_empty()));
        let sparse = generate(&SynthConfig { sparse: true, ..cfg }).unwrap();
        let series = aggregate("F00", &sparse.trades["F00"], &grid).unwrap();
        assert!(series.bars.iter().any(|b| b.is_empty()));
    }

    #[test]
    fn regime_volatility_ratio() {
        let cfg = SynthConfig { n_firms: 1, days: 200, seed: 3, ..SynthConfig::default() };
        let latent = simulate_latent(&cfg, 200 * 12);
        let pick = |hi: bool| -> Vec<f64> {
            latent.innovations[0].iter().zip(&latent.high[0]).filter(|(_, &h)| h == hi).map(|(&r, _)| r).collect()
        };
        let (hi, lo) = (pick(true), pick(false));
        assert!(hi.len() >= 500 && lo.len() >= 500);
        let ratio = crate::stats::sample_sd(&hi).unwrap() / crate::stats::sample_sd(&lo).unwrap();
        let target = cfg.regime.sigma_high / cfg.regime.sigma_low;
        assert!((ratio / target - 1.0).abs() < 0.2, "ratio {ratio} vs {target}");
    }

    #[test]
    fn ground_truth_lists_planted_edges() {
        let mut cfg = small();
        cfg.influence = vec![Influence { source: 1, target: 0, lag: 10, strength: 0.9 }];
        let gt = GroundTruth::from_config(&cfg);
        assert!(gt.contains("F01", "F00"));
        assert!(!gt.contains("F00", "F01"));
    }
}
