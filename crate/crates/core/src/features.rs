//! Microstructure variables computed over a trailing window of `W` bars.
//!
//! The window functions operate on plain slices so they can be checked in
//! isolation; [`compute_frame`] slides them over a [`BarSeries`] and turns
//! any missing input into a missing cell.

use std::io::Write;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::bars::BarSeries;
use crate::error::{Error, Result};
use crate::stats::{normal_cdf, sample_sd};

pub const FEATURE_NAMES: [&str; 5] = ["roll", "roll_impact", "kyle", "amihud", "vpin"];

/// Source of the price-change scale used by bulk volume classification.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// One standard deviation over every price change in the series.
    #[default]
    Global,
    /// Standard deviation over the `W` price changes ending at each bar.
    Trailing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct FeatureConfig {
    pub lookback: usize,
    pub bvc_sigma_mode: SigmaMode,
    pub epsilon_sigma: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { lookback: 50, bvc_sigma_mode: SigmaMode::Global, epsilon_sigma: 1e-12 }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback < 2 {
            return Err(Error::config("lookback must be at least 2"));
        }
        if !(self.epsilon_sigma > 0.0) {
            return Err(Error::config("epsilon-sigma must be positive"));
        }
        Ok(())
    }
}

/// Roll's spread estimator from `W + 1` closes: twice the square root of the
/// absolute population lag-1 autocovariance of the `W` price changes.
pub fn roll_measure(closes: &[f64]) -> f64 {
    let dp: Vec<f64> = closes.windows(2).map(|w| w[1] - w[0]).collect();
    if dp.len() < 2 {
        return 0.0;
    }
    let current = &dp[1..];
    let lagged = &dp[..dp.len() - 1];
    let n = current.len() as f64;
    let mean_c = current.iter().sum::<f64>() / n;
    let mean_l = lagged.iter().sum::<f64>() / n;
    let cov = current
        .iter()
        .zip(lagged)
        .map(|(c, l)| (c - mean_c) * (l - mean_l))
        .sum::<f64>()
        / n;
    2.0 * cov.abs().sqrt()
}

/// Roll measure per unit of dollar volume traded in the bar.
pub fn roll_impact(roll: f64, dollar_volume: f64) -> Option<f64> {
    (dollar_volume > 0.0).then(|| roll / dollar_volume)
}

/// Kyle's lambda at bar `t`.
///
/// `closes` holds `p[t-W-1..=t]` (`W + 2` values) and `volumes` holds
/// `V[t-W..=t]` (`W + 1` values). Returns `None` when the signed volume sums
/// to zero.
pub fn kyle_lambda(closes: &[f64], volumes: &[f64]) -> Option<f64> {
    assert_eq!(closes.len(), volumes.len() + 1, "kyle window shape");
    let numerator = closes[closes.len() - 1] - closes[1];
    let signed_volume: f64 = closes
        .windows(2)
        .zip(volumes)
        .map(|(w, v)| sign(w[1] - w[0]) * v)
        .sum();
    (signed_volume != 0.0).then(|| numerator / signed_volume)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Amihud's lambda: mean of `|r| / dollar volume` over the window.
pub fn amihud_lambda(abs_returns: &[f64], dollar_volumes: &[f64]) -> Option<f64> {
    assert_eq!(abs_returns.len(), dollar_volumes.len(), "amihud window shape");
    if dollar_volumes.iter().any(|&dv| dv <= 0.0) {
        return None;
    }
    let total: f64 = abs_returns.iter().zip(dollar_volumes).map(|(r, dv)| r / dv).sum();
    Some(total / abs_returns.len() as f64)
}

/// Bulk volume classification of a bar's buyer-initiated volume.
pub fn bvc_buy_volume(delta_p: f64, sigma: f64, volume: f64, epsilon_sigma: f64) -> f64 {
    if sigma <= epsilon_sigma && delta_p == 0.0 {
        return volume / 2.0;
    }
    volume * normal_cdf(delta_p / sigma.max(epsilon_sigma))
}

/// Mean absolute order imbalance `|V_sell - V_buy| / V` over the window.
pub fn vpin(volumes: &[f64], buy_volumes: &[f64]) -> Option<f64> {
    assert_eq!(volumes.len(), buy_volumes.len(), "vpin window shape");
    if volumes.iter().any(|&v| v <= 0.0) {
        return None;
    }
    let total: f64 = volumes
        .iter()
        .zip(buy_volumes)
        .map(|(v, b)| ((v - b) - b).abs() / v)
        .sum();
    Some(total / volumes.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureDiagnostics {
    /// Bars where Kyle's signed volume summed to zero.
    pub kyle_zero_denominator: usize,
    /// Scale used for BVC in global mode.
    pub bvc_sigma: Option<f64>,
    pub bvc_sigma_mode: SigmaMode,
}

/// Per-bar feature columns for one firm, aligned on `bar_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFrame {
    pub symbol: String,
    pub timestamps: Vec<NaiveDateTime>,
    pub names: Vec<String>,
    pub columns: Vec<Vec<Option<f64>>>,
    pub diagnostics: FeatureDiagnostics,
}

impl FeatureFrame {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, name: &str) -> Option<&[Option<f64>]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    /// All features at bar `t`, or `None` if any is missing.
    pub fn row(&self, t: usize) -> Option<Vec<f64>> {
        self.columns.iter().map(|c| c[t]).collect()
    }
}

fn window(values: &[Option<f64>]) -> Option<Vec<f64>> {
    values.iter().copied().collect()
}

pub fn compute_frame(series: &BarSeries, cfg: &FeatureConfig) -> Result<FeatureFrame> {
    cfg.validate()?;
    let w = cfg.lookback;
    let n = series.len();
    if n < w + 1 {
        return Err(Error::data(format!(
            "{}: series has {n} bars, at least {} (lookback + 1) are required",
            series.symbol,
            w + 1
        )));
    }
    let closes = series.closes();
    let volumes = series.volumes();
    let dollar = series.dollar_volumes();

    let delta: Vec<Option<f64>> = (0..n)
        .map(|t| match (t.checked_sub(1).and_then(|s| closes[s]), closes[t]) {
            (Some(prev), Some(cur)) => Some(cur - prev),
            _ => None,
        })
        .collect();

    let global_sigma = match cfg.bvc_sigma_mode {
        SigmaMode::Global => {
            let defined: Vec<f64> = delta.iter().flatten().copied().collect();
            Some(sample_sd(&defined).unwrap_or(0.0))
        }
        SigmaMode::Trailing => None,
    };
    let buy: Vec<Option<f64>> = (0..n)
        .map(|t| {
            let dp = delta[t]?;
            let sigma = match global_sigma {
                Some(s) => s,
                None => {
                    let start = (t + 1).checked_sub(w)?;
                    sample_sd(&window(&delta[start..=t])?)?
                }
            };
            Some(bvc_buy_volume(dp, sigma, volumes[t], cfg.epsilon_sigma))
        })
        .collect();

    let mut roll = vec![None; n];
    let mut impact = vec![None; n];
    let mut kyle = vec![None; n];
    let mut amihud = vec![None; n];
    let mut vpin_col = vec![None; n];
    let mut kyle_zero = 0;

    for t in w..n {
        if let Some(win) = window(&closes[t - w..=t]) {
            let r = roll_measure(&win);
            roll[t] = Some(r);
            impact[t] = roll_impact(r, dollar[t]);
            let abs_returns: Vec<f64> = win.windows(2).map(|p| (p[1] / p[0] - 1.0).abs()).collect();
            amihud[t] = amihud_lambda(&abs_returns, &dollar[t + 1 - w..=t]);
        }
        if t > w {
            if let Some(win) = window(&closes[t - w - 1..=t]) {
                kyle[t] = kyle_lambda(&win, &volumes[t - w..=t]);
                if kyle[t].is_none() {
                    kyle_zero += 1;
                }
            }
        }
        if let Some(b) = window(&buy[t + 1 - w..=t]) {
            vpin_col[t] = vpin(&volumes[t + 1 - w..=t], &b);
        }
    }

    Ok(FeatureFrame {
        symbol: series.symbol.clone(),
        timestamps: series.timestamps(),
        names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        columns: vec![roll, impact, kyle, amihud, vpin_col],
        diagnostics: FeatureDiagnostics {
            kyle_zero_denominator: kyle_zero,
            bvc_sigma: global_sigma,
            bvc_sigma_mode: cfg.bvc_sigma_mode,
        },
    })
}

/// `symbol,bar_index,<feature columns>` with blank cells for missing values.
pub fn write_features<W: Write>(writer: W, frames: &[FeatureFrame]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    if let Some(first) = frames.first() {
        let mut header = vec!["symbol".to_owned(), "bar_index".to_owned()];
        header.extend(first.names.iter().cloned());
        wtr.write_record(&header)?;
    }
    for frame in frames {
        for t in 0..frame.len() {
            let mut record = vec![frame.symbol.clone(), t.to_string()];
            record.extend(frame.columns.iter().map(|c| c[t].map(|v| v.to_string()).unwrap_or_default()));
            wtr.write_record(&record)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roll_of_constant_prices_is_zero() {
        assert_eq!(roll_measure(&[5.0; 11]), 0.0);
    }

    #[test]
    fn roll_impact_quotient() {
        assert_eq!(roll_impact(0.0, 123.0), Some(0.0));
        assert_eq!(roll_impact(2.0, 50.0), Some(0.04));
        assert_eq!(roll_impact(2.0, 0.0), None);
    }

    #[test]
    fn kyle_on_a_unit_ramp() {
        // p[t-5..=t] = 0..=5, so every b is +1.
        let closes: Vec<f64> = (0..6).map(f64::from).collect();
        assert_eq!(kyle_lambda(&closes, &[1.0; 5]), Some(0.8));
        assert_eq!(kyle_lambda(&[3.0; 6], &[1.0; 5]), None);
    }

    #[test]
    fn amihud_hand_values() {
        assert_eq!(amihud_lambda(&[0.0, 0.0], &[10.0, 20.0]), Some(0.0));
        let v = amihud_lambda(&[0.01, 0.03], &[100.0, 300.0]).unwrap();
        assert!((v - 0.0001).abs() < 1e-18);
        assert_eq!(amihud_lambda(&[0.01, 0.03], &[100.0, 0.0]), None);
    }

    #[test]
    fn bvc_limits() {
        assert_eq!(bvc_buy_volume(0.0, 0.3, 1000.0, 1e-12), 500.0);
        assert_eq!(bvc_buy_volume(0.0, 0.0, 1000.0, 1e-12), 500.0);
        assert!((bvc_buy_volume(6.0, 1.0, 1000.0, 1e-12) - 1000.0).abs() < 1e-8 * 1000.0);
        assert!(bvc_buy_volume(-6.0, 1.0, 1000.0, 1e-12) < 1e-5);
    }

    #[test]
    fn vpin_balanced_and_one_sided() {
        assert_eq!(vpin(&[10.0, 20.0], &[5.0, 10.0]), Some(0.0));
        assert_eq!(vpin(&[10.0, 20.0], &[10.0, 0.0]), Some(1.0));
        assert_eq!(vpin(&[10.0, 0.0], &[5.0, 0.0]), None);
    }

    #[test]
    fn config_validation() {
        assert!(FeatureConfig { lookback: 1, ..Default::default() }.validate().is_err());
        assert!(FeatureConfig { epsilon_sigma: 0.0, ..Default::default() }.validate().is_err());
        assert!(FeatureConfig::default().validate().is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn roll_is_non_negative(closes in prop::collection::vec(1.0..200.0f64, 0..80)) {
                prop_assert!(roll_measure(&closes) >= 0.0);
            }

            #[test]
            fn vpin_is_a_fraction(bars in prop::collection::vec((0.0..1e6f64, 0.0..=1.0f64), 1..60)) {
                let volumes: Vec<f64> = bars.iter().map(|b| b.0).collect();
                let buys: Vec<f64> = bars.iter().map(|b| b.0 * b.1).collect();
                if let Some(v) = vpin(&volumes, &buys) {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }

            #[test]
            fn bvc_splits_within_volume(dp in -5.0..5.0f64, sigma in 0.0..2.0f64, volume in 0.0..1e6f64) {
                let buy = bvc_buy_volume(dp, sigma, volume, 1e-12);
                prop_assert!(buy >= 0.0 && buy <= volume);
            }
        }
    }
}
