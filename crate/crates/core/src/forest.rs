//! Binary classification trees and a class-balanced random forest.
//!
//! Trees grow until nodes are pure, hold a single row, or no candidate
//! feature offers a strictly positive impurity decrease. Each split draws a
//! fresh set of `m` candidate features. Bootstrap samples draw rows with
//! probability proportional to `1 / n_class`, so both classes carry equal
//! total weight.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Gains at or below this are treated as zero.
const GAIN_EPS: f64 = 1e-12;
/// Gains within this distance are ties, resolved by feature then threshold order.
const TIE_EPS: f64 = 1e-12;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Borrowed row-major matrix.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMatrix<'a> {
    values: &'a [f64],
    width: usize,
}

impl<'a> FeatureMatrix<'a> {
    pub fn new(values: &'a [f64], width: usize) -> Self {
        assert!(width > 0 && values.len().is_multiple_of(width), "matrix shape");
        FeatureMatrix { values, width }
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, feature: usize) -> f64 {
        self.values[row * self.width + feature]
    }

    pub fn row(&self, row: usize) -> &'a [f64] {
        &self.values[row * self.width..(row + 1) * self.width]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitCriterion {
    #[default]
    Entropy,
    Gini,
}

impl SplitCriterion {
    /// Impurity of a node with `pos` positives out of `n`, in bits for entropy.
    fn impurity(self, pos: usize, n: usize) -> f64 {
        if n == 0 || pos == 0 || pos == n {
            return 0.0;
        }
        let p = pos as f64 / n as f64;
        let q = 1.0 - p;
        match self {
            SplitCriterion::Entropy => -(p * p.log2() + q * q.log2()),
            SplitCriterion::Gini => 1.0 - p * p - q * q,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        votes_neg: u32,
        votes_pos: u32,
        prediction: i8,
    },
}

impl TreeNode {
    fn leaf(pos: usize, neg: usize) -> Self {
        TreeNode::Leaf {
            votes_neg: neg as u32,
            votes_pos: pos as u32,
            prediction: if pos > neg { 1 } else { -1 },
        }
    }

    pub fn predict(&self, row: &[f64]) -> i8 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { prediction, .. } => return *prediction,
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.leaves() + right.leaves(),
        }
    }

    /// Marks every feature used by a split in this subtree.
    pub fn mark_features(&self, used: &mut [bool]) {
        if let TreeNode::Split { feature, left, right, .. } = self {
            used[*feature] = true;
            left.mark_features(used);
            right.mark_features(used);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Reusable buffers for split search.
#[derive(Default)]
struct Splitter {
    scratch: Vec<(f64, bool)>,
}

impl Splitter {
    fn best_split(
        &mut self,
        x: &FeatureMatrix<'_>,
        labels: &[i8],
        rows: &[usize],
        candidates: &[usize],
        criterion: SplitCriterion,
    ) -> Option<SplitCandidate> {
        let n = rows.len();
        let total_pos = rows.iter().filter(|&&r| labels[r] > 0).count();
        let parent = criterion.impurity(total_pos, n);
        if parent == 0.0 || n < 2 {
            return None;
        }
        let mut best: Option<SplitCandidate> = None;
        for &feature in candidates {
            self.scratch.clear();
            self.scratch.extend(rows.iter().map(|&r| (x.get(r, feature), labels[r] > 0)));
            self.scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for i in 0..n - 1 {
                let (value, positive) = self.scratch[i];
                left_pos += usize::from(positive);
                let next = self.scratch[i + 1].0;
                if next <= value {
                    continue;
                }
                let left_n = i + 1;
                let right_n = n - left_n;
                let children = (left_n as f64 * criterion.impurity(left_pos, left_n)
                    + right_n as f64 * criterion.impurity(total_pos - left_pos, right_n))
                    / n as f64;
                let gain = parent - children;
                let improves = match best {
                    None => gain > GAIN_EPS,
                    Some(b) => gain > b.gain + TIE_EPS,
                };
                if improves {
                    let mut threshold = value + (next - value) / 2.0;
                    if threshold >= next {
                        threshold = value;
                    }
                    best = Some(SplitCandidate { feature, threshold, gain });
                }
            }
        }
        best
    }
}

/// Highest-gain split over the candidate features, thresholds at midpoints
/// between consecutive distinct values. Near-ties go to the lowest feature
/// index, then the lowest threshold.
pub fn best_split(
    x: &FeatureMatrix<'_>,
    labels: &[i8],
    rows: &[usize],
    candidates: &[usize],
    criterion: SplitCriterion,
) -> Option<SplitCandidate> {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    Splitter::default().best_split(x, labels, rows, &sorted, criterion)
}

struct TreeGrower<'a, R> {
    x: FeatureMatrix<'a>,
    labels: &'a [i8],
    m: usize,
    criterion: SplitCriterion,
    rng: &'a mut R,
    splitter: Splitter,
}

impl<R: Rng> TreeGrower<'_, R> {
    fn grow(&mut self, rows: Vec<usize>) -> TreeNode {
        let pos = rows.iter().filter(|&&r| self.labels[r] > 0).count();
        let neg = rows.len() - pos;
        if pos == 0 || neg == 0 || rows.len() <= 1 {
            return TreeNode::leaf(pos, neg);
        }
        let mut candidates = sample(self.rng, self.x.width(), self.m).into_vec();
        candidates.sort_unstable();
        let Some(split) = self.splitter.best_split(&self.x, self.labels, &rows, &candidates, self.criterion)
        else {
            return TreeNode::leaf(pos, neg);
        };
        let (left, right): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| self.x.get(r, split.feature) <= split.threshold);
        let left = self.grow(left);
        let right = self.grow(right);
        TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

/// Grows one unpruned tree on `rows` (duplicates allowed).
pub fn fit_tree<R: Rng>(
    x: &FeatureMatrix<'_>,
    labels: &[i8],
    rows: Vec<usize>,
    m: usize,
    criterion: SplitCriterion,
    rng: &mut R,
) -> TreeNode {
    assert!(!rows.is_empty(), "cannot grow a tree on no rows");
    assert!((1..=x.width()).contains(&m), "m must lie in 1..=p");
    let mut grower = TreeGrower { x: *x, labels, m, criterion, rng, splitter: Splitter::default() };
    grower.grow(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub trees: usize,
    /// Candidates per split; `None` means `floor(sqrt(p))`.
    pub m: Option<usize>,
    pub criterion: SplitCriterion,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { trees: 1000, m: None, criterion: SplitCriterion::Entropy, seed: 0 }
    }
}

/// `floor(sqrt(p))`, at least 1.
pub fn default_m(p: usize) -> usize {
    ((p as f64).sqrt().floor() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub positive: f64,
    pub negative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format_version: u32,
    pub feature_names: Vec<String>,
    pub m: usize,
    pub seed: u64,
    pub criterion: SplitCriterion,
    pub class_weights: ClassWeights,
    pub trees: Vec<TreeNode>,
}

/// Draws the class-weighted bootstrap sample for one tree.
pub fn weighted_bootstrap<R: Rng>(labels: &[i8], rows: &[usize], rng: &mut R) -> Result<Vec<usize>> {
    let n_pos = rows.iter().filter(|&&r| labels[r] > 0).count();
    let n_neg = rows.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::degenerate("class-weighted bootstrap needs both classes"));
    }
    let weights: Vec<f64> = rows
        .iter()
        .map(|&r| if labels[r] > 0 { 1.0 / n_pos as f64 } else { 1.0 / n_neg as f64 })
        .collect();
    let alias = WeightedAliasIndex::new(weights).map_err(|e| Error::degenerate(e.to_string()))?;
    Ok((0..rows.len()).map(|_| rows[alias.sample(rng)]).collect())
}

/// Fits a forest on the given training rows. Tree `k` uses its own stream
/// derived from `(seed, k)`, so results do not depend on the thread count.
pub fn fit_forest(
    x: &FeatureMatrix<'_>,
    labels: &[i8],
    rows: &[usize],
    feature_names: &[String],
    params: &ForestParams,
) -> Result<ForestModel> {
    let p = x.width();
    if feature_names.len() != p {
        return Err(Error::data(format!("{} feature names for {p} columns", feature_names.len())));
    }
    if params.trees == 0 {
        return Err(Error::config("a forest needs at least one tree"));
    }
    let m = params.m.unwrap_or_else(|| default_m(p));
    if !(1..=p).contains(&m) {
        return Err(Error::config(format!("m = {m} outside 1..={p}")));
    }
    let n_pos = rows.iter().filter(|&&r| labels[r] > 0).count();
    let n_neg = rows.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::degenerate(format!(
            "training rows contain a single class ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let trees = (0..params.trees)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::stream(params.seed, &[k as u64]);
            let sample = weighted_bootstrap(labels, rows, &mut rng)?;
            Ok(fit_tree(x, labels, sample, m, params.criterion, &mut rng))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForestModel {
        format_version: MODEL_FORMAT_VERSION,
        feature_names: feature_names.to_vec(),
        m,
        seed: params.seed,
        criterion: params.criterion,
        class_weights: ClassWeights { positive: 1.0 / n_pos as f64, negative: 1.0 / n_neg as f64 },
        trees,
    })
}

impl ForestModel {
    /// Share of trees voting `+1` for each row of `x`.
    pub fn predict_proba(&self, x: &FeatureMatrix<'_>) -> Result<Vec<f64>> {
        let rows: Vec<usize> = (0..x.rows()).collect();
        self.predict_proba_rows(x, &rows)
    }

    pub fn predict_proba_rows(&self, x: &FeatureMatrix<'_>, rows: &[usize]) -> Result<Vec<f64>> {
        if x.width() != self.feature_names.len() {
            return Err(Error::data(format!(
                "model expects {} features, got {}",
                self.feature_names.len(),
                x.width()
            )));
        }
        let k = self.trees.len() as f64;
        Ok(rows
            .iter()
            .map(|&r| {
                let row = x.row(r);
                let votes = self.trees.iter().filter(|t| t.predict(row) > 0).count();
                votes as f64 / k
            })
            .collect())
    }

    /// Which features appear in at least one split.
    pub fn used_features(&self) -> Vec<bool> {
        let mut used = vec![false; self.feature_names.len()];
        for tree in &self.trees {
            tree.mark_features(&mut used);
        }
        used
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ForestModel = serde_json::from_str(text)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::data(format!("unsupported model format version {}", model.format_version)));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_dim(xs: &[f64]) -> FeatureMatrix<'_> {
        FeatureMatrix::new(xs, 1)
    }

    #[test]
    fn pure_node_has_no_split() {
        let xs = [1.0, 2.0, 3.0];
        assert_eq!(best_split(&one_dim(&xs), &[1, 1, 1], &[0, 1, 2], &[0], SplitCriterion::Entropy), None);
    }

    #[test]
    fn clean_threshold_gains_one_bit() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let s = best_split(&one_dim(&xs), &[-1, -1, 1, 1], &[0, 1, 2, 3], &[0], SplitCriterion::Entropy).unwrap();
        assert_eq!(s.feature, 0);
        assert_eq!(s.threshold, 2.5);
        assert!((s.gain - 1.0).abs() < 1e-15);
    }

    #[test]
    fn xor_root_has_no_positive_gain() {
        let xs = [0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let x = FeatureMatrix::new(&xs, 2);
        let labels = [-1, 1, 1, -1];
        assert_eq!(best_split(&x, &labels, &[0, 1, 2, 3], &[0, 1], SplitCriterion::Entropy), None);
        let mut rng = rng::stream(1, &[]);
        let tree = fit_tree(&x, &labels, vec![0, 1, 2, 3], 2, SplitCriterion::Entropy, &mut rng);
        assert_eq!(tree, TreeNode::Leaf { votes_neg: 2, votes_pos: 2, prediction: -1 });
    }

    #[test]
    fn ties_prefer_lowest_feature() {
        // Both columns separate the labels equally well.
        let xs = [1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0];
        let x = FeatureMatrix::new(&xs, 2);
        let s = best_split(&x, &[-1, -1, 1, 1], &[0, 1, 2, 3], &[1, 0], SplitCriterion::Gini).unwrap();
        assert_eq!((s.feature, s.threshold), (0, 2.5));
    }

    #[test]
    fn single_class_forest_is_rejected() {
        let xs = [1.0, 2.0];
        let err = fit_forest(&one_dim(&xs), &[1, 1], &[0, 1], &["a".into()], &ForestParams::default());
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn default_m_is_floor_sqrt() {
        assert_eq!(default_m(5), 2);
        assert_eq!(default_m(10), 3);
        assert_eq!(default_m(1), 1);
    }

    #[test]
    fn separable_data_fits_perfectly() {
        let xs: Vec<f64> = (0..40).map(f64::from).collect();
        let labels: Vec<i8> = (0..40).map(|i| if i < 17 { -1 } else { 1 }).collect();
        let rows: Vec<usize> = (0..40).collect();
        let mut rng = rng::stream(3, &[]);
        let tree = fit_tree(&one_dim(&xs), &labels, rows, 1, SplitCriterion::Entropy, &mut rng);
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(tree.predict(&[xs[i]]), l);
        }
    }

    #[test]
    fn feature_count_mismatch() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let model = fit_forest(
            &one_dim(&xs),
            &[-1, -1, 1, 1],
            &[0, 1, 2, 3],
            &["a".into()],
            &ForestParams { trees: 3, ..Default::default() },
        )
        .unwrap();
        let wide = FeatureMatrix::new(&xs, 2);
        assert!(model.predict_proba(&wide).is_err());
    }

    #[test]
    fn single_tree_probability_is_its_vote() {
        let model = ForestModel {
            format_version: MODEL_FORMAT_VERSION,
            feature_names: vec!["a".into()],
            m: 1,
            seed: 0,
            criterion: SplitCriterion::Entropy,
            class_weights: ClassWeights { positive: 0.5, negative: 0.5 },
            trees: vec![TreeNode::Leaf { votes_neg: 0, votes_pos: 3, prediction: 1 }],
        };
        assert_eq!(model.predict_proba(&one_dim(&[0.0])).unwrap(), [1.0]);
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let model = fit_forest(
            &one_dim(&xs),
            &[-1, 1, -1, 1],
            &[0, 1, 2, 3],
            &["a".into()],
            &ForestParams { trees: 4, seed: 9, ..Default::default() },
        )
        .unwrap();
        let text = model.to_json().unwrap();
        assert_eq!(ForestModel::from_json(&text).unwrap(), model);
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":99", 1);
        assert!(ForestModel::from_json(&bumped).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn data() -> impl Strategy<Value = (Vec<f64>, Vec<i8>)> {
            prop::collection::vec((prop::collection::vec(-3.0..3.0f64, 3), any::<bool>()), 4..40).prop_map(|rows| {
                let xs = rows.iter().flat_map(|r| r.0.clone()).collect();
                let mut labels: Vec<i8> = rows.iter().map(|r| if r.1 { 1 } else { -1 }).collect();
                labels[0] = 1;
                labels[1] = -1;
                (xs, labels)
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn probabilities_are_fractions_and_models_round_trip((xs, labels) in data(), seed in any::<u64>()) {
                let x = FeatureMatrix::new(&xs, 3);
                let rows: Vec<usize> = (0..labels.len()).collect();
                let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
                let params = ForestParams { trees: 8, seed, ..Default::default() };
                let model = fit_forest(&x, &labels, &rows, &names, &params).unwrap();
                for p in model.predict_proba(&x).unwrap() {
                    prop_assert!((0.0..=1.0).contains(&p));
                }
                let back = ForestModel::from_json(&model.to_json().unwrap()).unwrap();
                prop_assert_eq!(back.predict_proba(&x).unwrap(), model.predict_proba(&x).unwrap());
                prop_assert_eq!(back, model);
            }
        }
    }
}
