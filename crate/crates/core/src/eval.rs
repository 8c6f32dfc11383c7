//! Model evaluation: ROC curves and AUC, the paired bootstrap test for an
//! AUC increase, time-based train/test splitting with purging, accuracy,
//! and permutation importances (mean decrease in accuracy).

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use chrono::{NaiveDateTime, TimeDelta};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::forest::{fit_forest, FeatureMatrix, ForestModel, ForestParams};
use crate::measures::Dataset;
use crate::rng;
use crate::stats::{normal_cdf, sample_sd};

fn class_counts(labels: &[i8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l > 0).count();
    (pos, labels.len() - pos)
}

fn check_scores(scores: &[f64], labels: &[i8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::degenerate("AUC needs both classes among the labels"));
    }
    Ok((pos, neg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Rows scoring at or above this value are called positive. The first
    /// point uses `+inf`.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocResult {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl RocResult {
    pub fn trapezoidal_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["fpr", "tpr", "threshold"])?;
        for p in &self.points {
            wtr.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Scores replaced by their dense rank among distinct values, so AUC on any
/// resample reduces to counting per rank level.
struct RankedScores {
    levels: Vec<u32>,
    n_levels: usize,
}

impl RankedScores {
    fn new(scores: &[f64]) -> Self {
        let mut distinct: Vec<f64> = scores.to_vec();
        distinct.sort_unstable_by(f64::total_cmp);
        distinct.dedup();
        let levels = scores
            .iter()
            .map(|s| distinct.binary_search_by(|d| d.total_cmp(s)).expect("score present") as u32)
            .collect();
        RankedScores { levels, n_levels: distinct.len() }
    }

    /// AUC over the rows in `sample` (duplicates allowed). `None` when the
    /// sample holds a single class. `pos`/`neg` are caller-provided buffers.
    fn auc(&self, labels: &[i8], sample: &[usize], pos: &mut Vec<u64>, neg: &mut Vec<u64>) -> Option<f64> {
        pos.clear();
        pos.resize(self.n_levels, 0);
        neg.clear();
        neg.resize(self.n_levels, 0);
        for &i in sample {
            let level = self.levels[i] as usize;
            if labels[i] > 0 {
                pos[level] += 1;
            } else {
                neg[level] += 1;
            }
        }
        let mut neg_below = 0u64;
        let mut twice_concordant = 0u64;
        for (p, n) in pos.iter().zip(neg.iter()) {
            twice_concordant += 2 * p * neg_below + p * n;
            neg_below += n;
        }
        let n_pos: u64 = pos.iter().sum();
        let n_neg = neg_below;
        (n_pos > 0 && n_neg > 0).then(|| twice_concordant as f64 / (2.0 * n_pos as f64 * n_neg as f64))
    }
}

/// Rank-statistic AUC: share of positive/negative pairs ordered correctly,
/// ties counting one half.
pub fn auc(scores: &[f64], labels: &[i8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let ranked = RankedScores::new(scores);
    let all: Vec<usize> = (0..scores.len()).collect();
    Ok(ranked.auc(labels, &all, &mut Vec::new(), &mut Vec::new()).expect("both classes checked"))
}

pub fn roc_auc(scores: &[f64], labels: &[i8]) -> Result<RocResult> {
    let (n_pos, n_neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] > 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { fpr: fp as f64 / n_neg as f64, tpr: tp as f64 / n_pos as f64, threshold });
    }
    Ok(RocResult { points, auc: auc(scores, labels)?, n_pos, n_neg })
}

/// Outcome of the one-sided test `H0: AUC2 = AUC1` against `AUC2 > AUC1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucTestResult {
    pub auc1: f64,
    pub auc2: f64,
    pub diff: f64,
    /// Standard deviation of the bootstrap AUC differences.
    pub s: f64,
    /// `diff / s`; absent when `s = 0`.
    #[serde(rename = "d")]
    pub d_stat: Option<f64>,
    #[serde(rename = "p")]
    pub p_value: f64,
    #[serde(rename = "B")]
    pub boot: usize,
    pub seed: u64,
    /// Set when `s = 0` and the p-value is assigned by convention.
    pub degenerate: bool,
    #[serde(skip)]
    pub replicate_diffs: Vec<f64>,
}

impl AucTestResult {
    /// Counts of bootstrap differences in `bins` equal-width bins over their range.
    pub fn histogram(&self, bins: usize) -> Vec<(f64, f64, usize)> {
        let diffs = &self.replicate_diffs;
        if diffs.is_empty() || bins == 0 {
            return Vec::new();
        }
        let lo = diffs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for d in diffs {
            let b = (((d - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
            .collect()
    }
}

pub const MIN_BOOTSTRAP: usize = 100;
const MAX_REDRAWS: usize = 1000;

/// Paired bootstrap: resamples `(p1_i, p2_i, label_i)` triples jointly `boot`
/// times and converts the observed difference into a one-sided normal
/// p-value. Replicate `b` draws from stream `(seed, b)`.
pub fn bootstrap_auc_test(p1: &[f64], p2: &[f64], labels: &[i8], boot: usize, seed: u64) -> Result<AucTestResult> {
    if p1.len() != p2.len() {
        return Err(Error::data("model score vectors differ in length"));
    }
    check_scores(p1, labels)?;
    if boot < MIN_BOOTSTRAP {
        return Err(Error::config(format!("bootstrap replicates must be at least {MIN_BOOTSTRAP}")));
    }
    let r1 = RankedScores::new(p1);
    let r2 = RankedScores::new(p2);
    let all: Vec<usize> = (0..labels.len()).collect();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    let auc1 = r1.auc(labels, &all, &mut pos, &mut neg).expect("both classes checked");
    let auc2 = r2.auc(labels, &all, &mut pos, &mut neg).expect("both classes checked");
    let diff = auc2 - auc1;

    let n = labels.len();
    let replicate_diffs = (0..boot)
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(n), Vec::new(), Vec::new()),
            |(sample, pos, neg), b| {
                let mut rng = rng::stream(seed, &[b as u64]);
                for _ in 0..MAX_REDRAWS {
                    sample.clear();
                    sample.extend((0..n).map(|_| rng.random_range(0..n)));
                    if let Some(a1) = r1.auc(labels, sample, pos, neg) {
                        let a2 = r2.auc(labels, sample, pos, neg).expect("same sample");
                        return Ok(a2 - a1);
                    }
                }
                Err(Error::degenerate(format!(
                    "bootstrap replicate {b} drew a single class {MAX_REDRAWS} times"
                )))
            },
        )
        .collect::<Result<Vec<f64>>>()?;

    let s = sample_sd(&replicate_diffs).unwrap_or(0.0);
    let (d_stat, p_value, degenerate) = if s > 0.0 {
        let d = diff / s;
        (Some(d), normal_cdf(-d), false)
    } else {
        (None, if diff > 0.0 { 0.0 } else { 1.0 }, true)
    };
    Ok(AucTestResult { auc1, auc2, diff, s, d_stat, p_value, boot, seed, degenerate, replicate_diffs })
}

/// Share of rows classified correctly, calling `+1` when `score >= threshold`.
pub fn accuracy(scores: &[f64], labels: &[i8], threshold: f64) -> f64 {
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l > 0))
        .count();
    correct as f64 / labels.len() as f64
}

/// How to carve a sample into train/test folds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitSpec {
    /// `groups` equal-length time intervals, each the test set once.
    PurgedCv { groups: usize, purge_days: i64 },
    /// Train on the first `train_fraction` of the time span, test on the rest.
    Chronological { train_fraction: f64, purge_days: i64 },
}

impl SplitSpec {
    pub fn purge_days(&self) -> i64 {
        match *self {
            SplitSpec::PurgedCv { purge_days, .. } | SplitSpec::Chronological { purge_days, .. } => purge_days,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SplitSpec::PurgedCv { groups, purge_days } => {
                if groups < 2 {
                    return Err(Error::config("purged cross-validation needs G >= 2"));
                }
                if purge_days < 0 {
                    return Err(Error::config("purge must be non-negative"));
                }
            }
            SplitSpec::Chronological { train_fraction, purge_days } => {
                if !(train_fraction > 0.0 && train_fraction < 1.0) {
                    return Err(Error::config("train fraction must lie strictly between 0 and 1"));
                }
                if purge_days < 0 {
                    return Err(Error::config("purge must be non-negative"));
                }
            }
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Chronological { train_fraction: 0.5, purge_days: 5 }
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitSpec::PurgedCv { groups, purge_days } => write!(f, "purged:G={groups},purge={purge_days}d"),
            SplitSpec::Chronological { train_fraction, purge_days } => {
                write!(f, "chrono:frac={train_fraction},purge={purge_days}d")
            }
        }
    }
}

impl FromStr for SplitSpec {
    type Err = Error;

    /// `purged:G=6,purge=5d` or `chrono:frac=0.5,purge=5d`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("invalid split '{s}'"));
        let (mode, args) = s.split_once(':').unwrap_or((s, ""));
        let mut groups = 6usize;
        let mut frac = 0.5f64;
        let mut purge = 5i64;
        for arg in args.split(',').filter(|a| !a.is_empty()) {
            let (key, value) = arg.split_once('=').ok_or_else(bad)?;
            match key.trim() {
                "G" | "g" => groups = value.trim().parse().map_err(|_| bad())?,
                "frac" => frac = value.trim().parse().map_err(|_| bad())?,
                "purge" => {
                    purge = value.trim().trim_end_matches('d').parse().map_err(|_| bad())?;
                }
                _ => return Err(bad()),
            }
        }
        let spec = match mode.trim() {
            "purged" => SplitSpec::PurgedCv { groups, purge_days: purge },
            "chrono" => SplitSpec::Chronological { train_fraction: frac, purge_days: purge },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for SplitSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SplitSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub index: usize,
    /// Test interval; `test_end` is exclusive unless `end_inclusive`.
    pub test_start: NaiveDateTime,
    pub test_end: NaiveDateTime,
    pub end_inclusive: bool,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Fold {
    pub fn in_test(&self, ts: NaiveDateTime) -> bool {
        ts >= self.test_start && (ts < self.test_end || (self.end_inclusive && ts == self.test_end))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub spec: SplitSpec,
    pub folds: Vec<Fold>,
}

fn lerp(start: NaiveDateTime, end: NaiveDateTime, num: i128, den: i128) -> NaiveDateTime {
    let span = (end - start).num_nanoseconds().expect("span fits in i64 nanoseconds") as i128;
    start + TimeDelta::nanoseconds((span * num / den) as i64)
}

/// Builds folds over sorted row timestamps. Train rows closer than
/// `purge_days` calendar days to a fold's test interval are removed.
pub fn make_splits(timestamps: &[NaiveDateTime], spec: &SplitSpec) -> Result<SplitPlan> {
    spec.validate()?;
    if timestamps.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::data("split timestamps must be sorted"));
    }
    let (Some(&first), Some(&last)) = (timestamps.first(), timestamps.last()) else {
        return Err(Error::degenerate("cannot split an empty sample"));
    };
    let intervals: Vec<(NaiveDateTime, NaiveDateTime, bool)> = match *spec {
        SplitSpec::PurgedCv { groups, .. } => {
            let g = groups as i128;
            (0..g)
                .map(|i| (lerp(first, last, i, g), lerp(first, last, i + 1, g), i + 1 == g))
                .collect()
        }
        SplitSpec::Chronological { train_fraction, .. } => {
            let cut = lerp(first, last, (train_fraction * 1e9).round() as i128, 1_000_000_000);
            vec![(cut, last, true)]
        }
    };
    let template = SplitPlan {
        spec: *spec,
        folds: intervals
            .into_iter()
            .enumerate()
            .map(|(index, (test_start, test_end, end_inclusive))| Fold {
                index,
                test_start,
                test_end,
                end_inclusive,
                train: Vec::new(),
                test: Vec::new(),
            })
            .collect(),
    };
    template.reassign(timestamps)
}

impl SplitPlan {
    /// Applies this plan's test intervals and purge to another set of rows.
    pub fn reassign(&self, timestamps: &[NaiveDateTime]) -> Result<SplitPlan> {
        let purge = TimeDelta::days(self.spec.purge_days());
        let chronological = matches!(self.spec, SplitSpec::Chronological { .. });
        let mut folds = Vec::with_capacity(self.folds.len());
        for fold in &self.folds {
            let mut out = Fold { train: Vec::new(), test: Vec::new(), ..fold.clone() };
            for (i, &ts) in timestamps.iter().enumerate() {
                if out.in_test(ts) {
                    out.test.push(i);
                } else if ts < fold.test_start - purge || (!chronological && ts > fold.test_end + purge) {
                    out.train.push(i);
                }
            }
            if out.test.is_empty() {
                return Err(Error::degenerate(format!("fold {} has an empty test set", fold.index)));
            }
            if out.train.is_empty() {
                return Err(Error::degenerate(format!("fold {} has an empty training set", fold.index)));
            }
            folds.push(out);
        }
        Ok(SplitPlan { spec: self.spec, folds })
    }
}

/// Test-set scores pooled across folds, in dataset row order.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub rows: Vec<usize>,
    pub fold: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Fits one forest per fold and scores that fold's test rows. Fold `g`
/// trains with seed `(params.seed, g)`.
pub fn fit_predict(ds: &Dataset, plan: &SplitPlan, params: &ForestParams) -> Result<(Predictions, Vec<ForestModel>)> {
    let x = ds.matrix();
    let mut scored: Vec<(usize, usize, f64)> = Vec::new();
    let mut models = Vec::with_capacity(plan.folds.len());
    for fold in &plan.folds {
        let fold_params = ForestParams { seed: rng::derive_seed(params.seed, &[fold.index as u64]), ..params.clone() };
        let model = fit_forest(&x, &ds.labels, &fold.train, &ds.feature_names, &fold_params)?;
        let scores = model.predict_proba_rows(&x, &fold.test)?;
        scored.extend(fold.test.iter().zip(scores).map(|(&r, s)| (r, fold.index, s)));
        models.push(model);
    }
    scored.sort_by_key(|&(r, f, _)| (r, f));
    Ok((
        Predictions {
            rows: scored.iter().map(|s| s.0).collect(),
            fold: scored.iter().map(|s| s.1).collect(),
            scores: scored.iter().map(|s| s.2).collect(),
        },
        models,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMda {
    pub fold: usize,
    pub baseline_accuracy: f64,
    pub mda: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdaReport {
    pub feature_names: Vec<String>,
    pub folds: Vec<FoldMda>,
    pub mean: Vec<f64>,
}

impl MdaReport {
    pub fn from_folds(feature_names: Vec<String>, folds: Vec<FoldMda>) -> Self {
        let p = feature_names.len();
        let mean = (0..p)
            .map(|f| folds.iter().map(|fold| fold.mda[f]).sum::<f64>() / folds.len().max(1) as f64)
            .collect();
        MdaReport { feature_names, folds, mean }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["fold", "feature", "mda"])?;
        for fold in &self.folds {
            for (name, v) in self.feature_names.iter().zip(&fold.mda) {
                wtr.write_record([fold.fold.to_string(), name.clone(), v.to_string()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Permutation importance of every feature on one test set.
///
/// Feature `f`, repeat `k` shuffles with stream `(seed, f, k)`.
pub fn mda(
    model: &ForestModel,
    x: &FeatureMatrix<'_>,
    labels: &[i8],
    rows: &[usize],
    seed: u64,
    repeats: usize,
) -> Result<FoldMda> {
    if repeats == 0 {
        return Err(Error::config("MDA needs at least one permutation"));
    }
    let p = x.width();
    let test_labels: Vec<i8> = rows.iter().map(|&r| labels[r]).collect();
    let mut test_values = Vec::with_capacity(rows.len() * p);
    for &r in rows {
        test_values.extend_from_slice(x.row(r));
    }
    let test = FeatureMatrix::new(&test_values, p);
    let baseline = accuracy(&model.predict_proba(&test)?, &test_labels, 0.5);
    if baseline == 0.0 {
        return Err(Error::degenerate("baseline accuracy is zero, MDA is undefined"));
    }
    let values = (0..p)
        .into_par_iter()
        .map(|f| {
            let mut total = 0.0;
            for k in 0..repeats {
                let mut rng = rng::stream(seed, &[f as u64, k as u64]);
                let mut column: Vec<f64> = (0..rows.len()).map(|i| test_values[i * p + f]).collect();
                column.shuffle(&mut rng);
                let mut permuted = test_values.clone();
                for (i, v) in column.into_iter().enumerate() {
                    permuted[i * p + f] = v;
                }
                let scores = model.predict_proba(&FeatureMatrix::new(&permuted, p))?;
                total += (baseline - accuracy(&scores, &test_labels, 0.5)) / baseline;
            }
            Ok(total / repeats as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(FoldMda { fold: 0, baseline_accuracy: baseline, mda: values })
}

/// Fits each fold of `plan` and collects per-fold MDA.
pub fn cv_mda(ds: &Dataset, plan: &SplitPlan, params: &ForestParams, seed: u64, repeats: usize) -> Result<MdaReport> {
    let (_, models) = fit_predict(ds, plan, params)?;
    let x = ds.matrix();
    let folds = plan
        .folds
        .iter()
        .zip(&models)
        .map(|(fold, model)| {
            let mut report = mda(model, &x, &ds.labels, &fold.test, rng::derive_seed(seed, &[fold.index as u64]), repeats)?;
            report.fold = fold.index;
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MdaReport::from_folds(ds.feature_names.clone(), folds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedMda {
    pub groups: Vec<String>,
    /// `per_fold[fold][group]`.
    pub per_fold: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Averages member MDAs within each named feature group, fold by fold.
pub fn grouped_mda(report: &MdaReport, groups: &[(String, Vec<String>)]) -> Result<GroupedMda> {
    let mut seen = HashSet::new();
    let mut members = Vec::with_capacity(groups.len());
    for (group, names) in groups {
        if names.is_empty() {
            return Err(Error::config(format!("group '{group}' has no features")));
        }
        let idx = names
            .iter()
            .map(|name| {
                if !seen.insert(name.as_str()) {
                    return Err(Error::config(format!("feature '{name}' appears in more than one group")));
                }
                report
                    .feature_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::config(format!("unknown feature '{name}'")))
            })
            .collect::<Result<Vec<usize>>>()?;
        members.push(idx);
    }
    let per_fold: Vec<Vec<f64>> = report
        .folds
        .iter()
        .map(|fold| {
            members
                .iter()
                .map(|idx| idx.iter().map(|&i| fold.mda[i]).sum::<f64>() / idx.len() as f64)
                .collect()
        })
        .collect();
    let mean = (0..groups.len())
        .map(|g| per_fold.iter().map(|row| row[g]).sum::<f64>() / per_fold.len().max(1) as f64)
        .collect();
    Ok(GroupedMda { groups: groups.iter().map(|(g, _)| g.clone()).collect(), per_fold, mean })
}
