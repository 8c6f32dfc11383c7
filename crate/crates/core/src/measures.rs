//! Market measures (realized volatility, excess kurtosis), their sign-of-change
//! labels, and assembly of the feature/label datasets fed to the forest.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::bars::BarSeries;
use crate::error::{Error, Result};
use crate::features::{FeatureFrame, SigmaMode};
use crate::forest::FeatureMatrix;
use crate::stats::sample_sd;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MeasureKind {
    #[serde(rename = "vol")]
    Volatility,
    #[serde(rename = "kurt")]
    Kurtosis,
}

impl FromStr for MeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vol" | "volatility" => Ok(MeasureKind::Volatility),
            "kurt" | "kurtosis" => Ok(MeasureKind::Kurtosis),
            other => Err(Error::config(format!("unknown measure '{other}' (expected vol or kurt)"))),
        }
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MeasureKind::Volatility => "vol",
            MeasureKind::Kurtosis => "kurt",
        })
    }
}

/// Simple returns of bar closes; `r[0]` is always missing.
pub fn bar_returns(closes: &[Option<f64>]) -> Vec<Option<f64>> {
    (0..closes.len())
        .map(|t| match (t.checked_sub(1).and_then(|s| closes[s]), closes[t]) {
            (Some(prev), Some(cur)) => Some(cur / prev - 1.0),
            _ => None,
        })
        .collect()
}

/// Sample standard deviation of the window.
pub fn realized_volatility(returns: &[f64]) -> f64 {
    sample_sd(returns).unwrap_or(0.0)
}

/// Excess kurtosis with population moments; `None` for a constant window.
pub fn excess_kurtosis(returns: &[f64]) -> Option<f64> {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let (m2, m4) = returns.iter().fold((0.0, 0.0), |(m2, m4), r| {
        let d = (r - mean) * (r - mean);
        (m2 + d, m4 + d * d)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    (m2 > 0.0).then(|| m4 / (m2 * m2) - 3.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasureSeries {
    pub symbol: String,
    pub lookback: usize,
    pub sigma: Vec<Option<f64>>,
    pub kurt: Vec<Option<f64>>,
}

impl MeasureSeries {
    pub fn compute(series: &BarSeries, lookback: usize) -> Self {
        let returns = bar_returns(&series.closes());
        let n = returns.len();
        let mut sigma = vec![None; n];
        let mut kurt = vec![None; n];
        for t in lookback..n {
            let window: Option<Vec<f64>> = returns[t + 1 - lookback..=t].iter().copied().collect();
            if let Some(w) = window {
                sigma[t] = Some(realized_volatility(&w));
                kurt[t] = excess_kurtosis(&w);
            }
        }
        MeasureSeries { symbol: series.symbol.clone(), lookback, sigma, kurt }
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn get(&self, kind: MeasureKind) -> &[Option<f64>] {
        match kind {
            MeasureKind::Volatility => &self.sigma,
            MeasureKind::Kurtosis => &self.kurt,
        }
    }
}

/// `+1` when the measure rises over `h` bars, `-1` otherwise (ties included).
pub fn sign_label(measure: &[Option<f64>], t: usize, h: usize) -> Option<i8> {
    let now = (*measure.get(t)?)?;
    let later = (*measure.get(t + h)?)?;
    Some(if later - now > 0.0 { 1 } else { -1 })
}

/// Everything the network stage needs about one firm.
#[derive(Clone, Debug)]
pub struct FirmData {
    pub symbol: String,
    pub frame: FeatureFrame,
    pub measures: MeasureSeries,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    /// Bars with a label bar inside the series.
    pub candidates: usize,
    pub missing_features: usize,
    pub missing_label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub target: String,
    pub cross: Option<String>,
    pub measure: MeasureKind,
    pub lookback: usize,
    pub horizon: usize,
    pub bvc_sigma_mode: SigmaMode,
    pub rows: usize,
    pub drops: DropCounts,
}

/// Feature matrix (row-major) plus `±1` labels for one prediction task.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskDescriptor,
    pub feature_names: Vec<String>,
    pub bar_index: Vec<usize>,
    pub timestamps: Vec<NaiveDateTime>,
    pub values: Vec<f64>,
    pub labels: Vec<i8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.width();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn matrix(&self) -> FeatureMatrix<'_> {
        FeatureMatrix::new(&self.values, self.width())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["bar_index".to_owned(), "timestamp".to_owned(), "label".to_owned()];
        header.extend(self.feature_names.iter().cloned());
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut record = vec![
                self.bar_index[i].to_string(),
                self.timestamps[i].format("%Y-%m-%dT%H:%M:%S").to_string(),
                self.labels[i].to_string(),
            ];
            record.extend(self.row(i).iter().map(|v| v.to_string()));
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub const DEFAULT_MIN_ROWS: usize = 200;

/// Builds the dataset for predicting `target`'s measure, optionally with a
/// second firm's features appended (suffixed `.x`).
pub fn assemble(
    target: &FirmData,
    cross: Option<&FeatureFrame>,
    kind: MeasureKind,
    horizon: usize,
    min_rows: usize,
) -> Result<Dataset> {
    let frame = &target.frame;
    if let Some(c) = cross {
        if c.symbol == target.symbol {
            return Err(Error::data(format!("cannot pair {} with itself", target.symbol)));
        }
        if c.timestamps != frame.timestamps {
            return Err(Error::data(format!(
                "{} and {} are not on the same bar grid",
                target.symbol, c.symbol
            )));
        }
    }
    let measure = target.measures.get(kind);
    if measure.len() != frame.len() {
        return Err(Error::data(format!("{}: measures and features differ in length", target.symbol)));
    }

    let mut names = frame.names.clone();
    if let Some(c) = cross {
        names.extend(c.names.iter().map(|n| format!("{n}.x")));
    }
    let mut drops = DropCounts::default();
    let mut bar_index = Vec::new();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for t in 0..frame.len().saturating_sub(horizon) {
        drops.candidates += 1;
        let own = frame.row(t);
        let other = match cross {
            Some(c) => c.row(t).map(Some),
            None => Some(None),
        };
        let (Some(own), Some(other)) = (own, other) else {
            drops.missing_features += 1;
            continue;
        };
        let Some(label) = sign_label(measure, t, horizon) else {
            drops.missing_label += 1;
            continue;
        };
        bar_index.push(t);
        timestamps.push(frame.timestamps[t]);
        values.extend(own);
        values.extend(other.into_iter().flatten());
        labels.push(label);
    }
    if labels.len() < min_rows {
        return Err(Error::data(format!(
            "{}: only {} usable rows, at least {min_rows} required",
            target.symbol,
            labels.len()
        )));
    }
    Ok(Dataset {
        task: TaskDescriptor {
            target: target.symbol.clone(),
            cross: cross.map(|c| c.symbol.clone()),
            measure: kind,
            lookback: target.measures.lookback,
            horizon,
            bvc_sigma_mode: frame.diagnostics.bvc_sigma_mode,
            rows: labels.len(),
            drops,
        },
        feature_names: names,
        bar_index,
        timestamps,
        values,
        labels,
    })
}
