//! Accuracy metrics, evaluation protocols, distortion against random trees
//! and common-substructure mining over repeated runs.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ball::{raw, BallPoint, Curvature};
use crate::cluster::{self, ClusterError, ClusterTree, DecodedTree, SimilaritySource};
use crate::data::Dataset;
use crate::model::{Model, ModelError, Space};
use crate::optim::{self, TrainConfig, TrainError};

/// Leave-one-out retrains once per trial; larger datasets are refused.
pub const MAX_LOO_TRIALS: usize = 2000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("leave-one-out over {trials} trials exceeds the limit of {limit}")]
    ProtocolInfeasible { trials: usize, limit: usize },
    #[error("top-n value {n} outside 1..={k}")]
    TopNOutOfRange { n: usize, k: usize },
    #[error("need at least 10 random trees, got {0}")]
    TooFewRuns(usize),
    #[error("leaves all belong to one class")]
    SingleClass,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("need at least one dataset and one run")]
    NothingToMine,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Protocol {
    /// Retrain without each trial in turn and predict it.
    LeaveOneOut,
    /// Stratified split; `test_fraction` of each class is held out.
    Holdout { test_fraction: f64, seed: u64 },
}

impl Protocol {
    fn name(&self) -> &'static str {
        match self {
            Protocol::LeaveOneOut => "leave_one_out",
            Protocol::Holdout { .. } => "holdout",
        }
    }
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { counts: vec![vec![0; k]; k] }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.trace() as f64 / t as f64
        }
    }

    /// `None` for classes without trials.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let n: u64 = r.iter().sum();
                (n > 0).then(|| r[i] as f64 / n as f64)
            })
            .collect()
    }

    /// Header row of predicted class names, one row per true class.
    pub fn to_csv(&self, names: &[String]) -> String {
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let mut s = String::from("true\\predicted");
        for j in 0..self.counts.len() {
            s.push(',');
            s.push_str(&name(j));
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(&name(i));
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Class probabilities for a set of trials with their true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
}

/// Position of `label` when classes are ordered by probability, highest
/// first, ties broken by lower class index.
pub fn rank_of(probs: &[f64], label: usize) -> usize {
    let p = probs[label];
    probs.iter().enumerate().filter(|&(j, q)| *q > p || (*q == p && j < label)).count()
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn predicted(&self) -> Vec<usize> {
        self.probs.iter().map(|p| crate::model::argmax(p)).collect()
    }

    pub fn confusion(&self, k: usize) -> ConfusionMatrix {
        let mut m = ConfusionMatrix::new(k);
        for (t, p) in self.labels.iter().zip(self.predicted()) {
            m.record(*t, p);
        }
        m
    }

    pub fn accuracy(&self) -> f64 {
        let hits = self.labels.iter().zip(self.predicted()).filter(|(t, p)| **t == *p).count();
        hits as f64 / self.len().max(1) as f64
    }

    pub fn top_n(&self, ns: &[usize]) -> Result<BTreeMap<usize, f64>, EvalError> {
        let k = self.probs.first().map_or(0, Vec::len);
        let mut out = BTreeMap::new();
        for &n in ns {
            if n == 0 || n > k {
                return Err(EvalError::TopNOutOfRange { n, k });
            }
            let hits = self.labels.iter().zip(&self.probs).filter(|(t, p)| rank_of(p, **t) < n).count();
            out.insert(n, hits as f64 / self.len().max(1) as f64);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub protocol: String,
    pub seed: u64,
    pub trials: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub top_n: BTreeMap<usize, f64>,
    pub confusion: ConfusionMatrix,
}

impl Metrics {
    pub fn from_predictions(p: &Predictions, k: usize, protocol: &str, seed: u64) -> Result<Self, EvalError> {
        let ns: Vec<usize> = [1, 3, 5].into_iter().filter(|n| *n <= k).collect();
        let confusion = p.confusion(k);
        Ok(Self {
            protocol: protocol.to_string(),
            seed,
            trials: p.len(),
            accuracy: confusion.accuracy(),
            per_class_accuracy: confusion.per_class_accuracy(),
            top_n: p.top_n(&ns)?,
            confusion,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

pub fn predict_all(model: &Model, dataset: &Dataset) -> Result<Predictions, EvalError> {
    let mut probs = Vec::with_capacity(dataset.len());
    for t in &dataset.trials {
        probs.push(model.predict(&t.flattened())?.1);
    }
    Ok(Predictions { labels: dataset.labels(), probs })
}

/// Metrics of a trained model on every trial of `dataset`.
pub fn evaluate_model(model: &Model, dataset: &Dataset, seed: u64) -> Result<Metrics, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let p = predict_all(model, dataset)?;
    Metrics::from_predictions(&p, model.config.num_classes, "pretrained", seed)
}

pub fn top_n_accuracy(model: &Model, dataset: &Dataset, ns: &[usize]) -> Result<BTreeMap<usize, f64>, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    predict_all(model, dataset)?.top_n(ns)
}

/// Stratified split into (train, test) trial indices.
pub fn holdout_split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(EvalError::InvalidSplit(format!("test fraction {test_fraction} not in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let labels = dataset.labels();
    for k in 0..dataset.num_classes() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64) * test_fraction).round() as usize;
        let n_test = if idx.len() >= 2 { n_test.clamp(1, idx.len() - 1) } else { 0 };
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::InvalidSplit("split leaves an empty side".into()));
    }
    Ok((train, test))
}

/// Held-out predictions under `protocol`, retraining from `config` for each fold.
pub fn protocol_predictions(dataset: &Dataset, config: &TrainConfig, protocol: Protocol) -> Result<Predictions, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    match protocol {
        Protocol::LeaveOneOut => {
            if dataset.len() > MAX_LOO_TRIALS {
                return Err(EvalError::ProtocolInfeasible { trials: dataset.len(), limit: MAX_LOO_TRIALS });
            }
            let n = dataset.len();
            let folds: Vec<Result<Vec<f64>, EvalError>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                    let st = optim::train(&dataset.subset(&keep), config)?;
                    Ok(st.model.predict(&dataset.trials[i].flattened())?.1)
                })
                .collect();
            let probs = folds.into_iter().collect::<Result<Vec<_>, _>>()?;
            Ok(Predictions { labels: dataset.labels(), probs })
        }
        Protocol::Holdout { test_fraction, seed } => {
            let (train, test) = holdout_split(dataset, test_fraction, seed)?;
            let st = optim::train(&dataset.subset(&train), config)?;
            predict_all(&st.model, &dataset.subset(&test))
        }
    }
}

pub fn evaluate(dataset: &Dataset, config: &TrainConfig, protocol: Protocol) -> Result<Metrics, EvalError> {
    let p = protocol_predictions(dataset, config, protocol)?;
    Metrics::from_predictions(&p, dataset.num_classes(), protocol.name(), config.seed)
}

/// Hyperbolic and Euclidean variants trained on the same data, seed and folds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceComparison {
    pub protocol: String,
    pub seed: u64,
    pub hyperbolic: Metrics,
    pub euclidean: Metrics,
}

pub fn compare_spaces(dataset: &Dataset, config: &TrainConfig, protocol: Protocol) -> Result<SpaceComparison, EvalError> {
    let hyperbolic = evaluate(dataset, &TrainConfig { space: Space::Hyperbolic, ..config.clone() }, protocol)?;
    let euclidean = evaluate(dataset, &TrainConfig { space: Space::Euclidean, ..config.clone() }, protocol)?;
    Ok(SpaceComparison { protocol: protocol.name().into(), seed: config.seed, hyperbolic, euclidean })
}

impl SpaceComparison {
    pub fn to_table(&self) -> String {
        let mut s = String::from("metric\thyperbolic\teuclidean\n");
        s.push_str(&format!("accuracy\t{:.4}\t{:.4}\n", self.hyperbolic.accuracy, self.euclidean.accuracy));
        for (n, h) in &self.hyperbolic.top_n {
            let e = self.euclidean.top_n.get(n).copied().unwrap_or(f64::NAN);
            s.push_str(&format!("top{n}\t{h:.4}\t{e:.4}\n"));
        }
        s
    }
}

/// Percentage of `samples` below `value`, counting ties as half.
pub fn mid_rank_percentile(value: f64, samples: &[f64]) -> f64 {
    let below = samples.iter().filter(|s| **s < value).count() as f64;
    let ties = samples.iter().filter(|s| **s == value).count() as f64;
    100.0 * (below + 0.5 * ties) / samples.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistortionComparison {
    pub value: f64,
    pub percentile: f64,
    pub random: Vec<f64>,
    pub seed: u64,
}

/// Distortion of `tree` and of `runs` random trees over the same leaves.
/// `classes[item]` is the class of leaf `item`.
pub fn distortion_vs_random(tree: &ClusterTree, classes: &[usize], runs: usize, seed: u64) -> Result<DistortionComparison, EvalError> {
    if runs < 10 {
        return Err(EvalError::TooFewRuns(runs));
    }
    let items = tree.leaves();
    let distinct: BTreeSet<usize> = items.iter().map(|&i| classes[i]).collect();
    if distinct.len() < 2 {
        return Err(EvalError::SingleClass);
    }
    let value = cluster::distortion(tree, |i| classes[i])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = cluster::random_tree(&items, &mut rng);
        random.push(cluster::distortion(&t, |i| classes[i])?);
    }
    Ok(DistortionComparison { value, percentile: mid_rank_percentile(value, &random), random, seed })
}

/// Points used for tree decoding: the similarity source of each trial, on the
/// ball. Euclidean vectors are mapped with `exp0`, which keeps directions.
pub fn tree_points(model: &Model, dataset: &Dataset, source: SimilaritySource) -> Result<Vec<BallPoint>, EvalError> {
    let c = model.curvature();
    let curv = Curvature::new(c).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let hyper = model.config.space == Space::Hyperbolic;
    let mut out = Vec::with_capacity(dataset.len());
    for t in &dataset.trials {
        let x = t.flattened();
        let (v, on_ball) = match source {
            SimilaritySource::Logits => (model.logits(&x)?, false),
            SimilaritySource::Latent => (model.latent(&x)?, hyper),
            SimilaritySource::Input => (x, false),
        };
        let mut p = if on_ball { v } else { raw::exp0(c, &v) };
        raw::project(c, &mut p);
        out.push(BallPoint::new(p, curv).expect("projected point is inside the ball"));
    }
    Ok(out)
}

/// Tree over class labels decoded from a trained model.
pub fn decode_model_tree(model: &Model, dataset: &Dataset, source: SimilaritySource) -> Result<DecodedTree, EvalError> {
    let pts = tree_points(model, dataset, source)?;
    Ok(cluster::decode_tree(&pts, &dataset.labels())?)
}

/// Occurrences of sibling class pairs (cherries) over a number of trees.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SubstructureCounts {
    pub runs: usize,
    pub counts: BTreeMap<(usize, usize), usize>,
}

impl SubstructureCounts {
    pub fn from_trees(trees: &[ClusterTree]) -> Self {
        let mut counts = BTreeMap::new();
        for t in trees {
            for (a, b) in t.cherries() {
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        Self { runs: trees.len(), counts }
    }

    pub fn frequency(&self, a: usize, b: usize) -> f64 {
        let n = self.counts.get(&(a.min(b), a.max(b))).copied().unwrap_or(0);
        n as f64 / self.runs.max(1) as f64
    }

    /// Pairs whose frequency exceeds `threshold`.
    pub fn above(&self, threshold: f64) -> BTreeSet<(usize, usize)> {
        self.counts.keys().copied().filter(|&(a, b)| self.frequency(a, b) > threshold).collect()
    }

    pub fn to_json(&self, names: &[String]) -> serde_json::Value {
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let pairs: Vec<serde_json::Value> = self
            .counts
            .iter()
            .map(|(&(a, b), &n)| serde_json::json!({"pair": [name(a), name(b)], "count": n}))
            .collect();
        serde_json::json!({"runs": self.runs, "pairs": pairs})
    }
}

/// Connected components of `pairs` with at least two members, sorted.
pub fn consensus_groups(pairs: &BTreeSet<(usize, usize)>) -> Vec<Vec<usize>> {
    let mut parent: BTreeMap<usize, usize> = BTreeMap::new();
    fn find(p: &mut BTreeMap<usize, usize>, x: usize) -> usize {
        let mut r = x;
        while p[&r] != r {
            r = p[&r];
        }
        let mut y = x;
        while p[&y] != r {
            let next = p[&y];
            p.insert(y, r);
            y = next;
        }
        r
    }
    for &(a, b) in pairs {
        parent.entry(a).or_insert(a);
        parent.entry(b).or_insert(b);
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent.insert(ra.max(rb), ra.min(rb));
        }
    }
    let keys: Vec<usize> = parent.keys().copied().collect();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for k in keys {
        let r = find(&mut parent, k);
        groups.entry(r).or_default().push(k);
    }
    groups.into_values().filter(|g| g.len() >= 2).collect()
}

/// Group id per class; classes outside every group get their own id.
pub fn group_assignment(groups: &[Vec<usize>], num_classes: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..num_classes).map(|k| groups.len() + k).collect();
    for (g, members) in groups.iter().enumerate() {
        for &m in members {
            out[m] = g;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedSubstructures {
    pub per_dataset: Vec<SubstructureCounts>,
    /// Pairs above threshold in every dataset.
    pub kept: BTreeSet<(usize, usize)>,
    pub groups: Vec<Vec<usize>>,
}

impl MinedSubstructures {
    pub fn from_counts(per_dataset: Vec<SubstructureCounts>, threshold: f64) -> Self {
        let mut kept = per_dataset.first().map(|c| c.above(threshold)).unwrap_or_default();
        for c in &per_dataset[1.min(per_dataset.len())..] {
            let other = c.above(threshold);
            kept.retain(|p| other.contains(p));
        }
        let groups = consensus_groups(&kept);
        Self { per_dataset, kept, groups }
    }

    /// One flat Newick fragment per consensus group.
    pub fn newick_fragments(&self, names: &[String]) -> Vec<String> {
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| i.to_string());
        self.groups.iter().map(|g| format!("({});", g.iter().map(|&i| name(i)).collect::<Vec<_>>().join(","))).collect()
    }

    pub fn constraint_groups(&self, num_classes: usize) -> Vec<usize> {
        group_assignment(&self.groups, num_classes)
    }
}

/// Trees decoded from `runs` trainings on `dataset` with seeds
/// `config.seed, config.seed + 1, ...`.
pub fn decoded_trees(dataset: &Dataset, config: &TrainConfig, runs: usize) -> Result<Vec<ClusterTree>, EvalError> {
    (0..runs)
        .into_par_iter()
        .map(|r| {
            let cfg = TrainConfig { seed: config.seed.wrapping_add(r as u64), ..config.clone() };
            let st = optim::train(dataset, &cfg)?;
            Ok(decode_model_tree(&st.model, dataset, cfg.similarity.source)?.tree)
        })
        .collect()
}

pub fn mine_substructures(
    datasets: &[Dataset],
    runs_per_dataset: usize,
    threshold: f64,
    config: &TrainConfig,
) -> Result<MinedSubstructures, EvalError> {
    if datasets.is_empty() || runs_per_dataset == 0 {
        return Err(EvalError::NothingToMine);
    }
    let mut per = Vec::with_capacity(datasets.len());
    for ds in datasets {
        per.push(SubstructureCounts::from_trees(&decoded_trees(ds, config, runs_per_dataset)?));
    }
    Ok(MinedSubstructures::from_counts(per, threshold))
}

/// Holdout accuracy of constrained training for several constraint structures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintResult {
    pub name: String,
    pub accuracy: f64,
}

/// Trains once per named constraint (`None` = no constraint) on the same
/// split and seed and reports held-out accuracy.
pub fn constraint_experiment(
    dataset: &Dataset,
    config: &TrainConfig,
    constraints: &[(String, Option<Vec<usize>>)],
    test_fraction: f64,
) -> Result<Vec<ConstraintResult>, EvalError> {
    let (train, test) = holdout_split(dataset, test_fraction, config.seed)?;
    let (train_ds, test_ds) = (dataset.subset(&train), dataset.subset(&test));
    constraints
        .iter()
        .map(|(name, groups)| {
            let st = match groups {
                Some(g) => optim::train_with_constraint(&train_ds, config, g)?,
                None => optim::train_with_constraint(&train_ds, &TrainConfig { mu: 0.0, ..config.clone() }, &vec![0; dataset.num_classes()])?,
            };
            Ok(ConstraintResult { name: name.clone(), accuracy: predict_all(&st.model, &test_ds)?.accuracy() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(i: usize) -> ClusterTree {
        ClusterTree::single(i)
    }

    fn j(a: &ClusterTree, b: &ClusterTree) -> ClusterTree {
        ClusterTree::join(a, b)
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let labels = vec![0, 1, 2, 0, 1, 2];
        let onehot = |k: usize| (0..3).map(|j| if j == k { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let perfect = Predictions { labels: labels.clone(), probs: labels.iter().map(|&k| onehot(k)).collect() };
        let m = perfect.confusion(3);
        assert_eq!(m.accuracy(), 1.0);
        assert!((0..3).all(|i| (0..3).all(|j| (i == j) == (m.counts[i][j] > 0))));
        let constant = Predictions { labels: labels.clone(), probs: vec![onehot(1); 6] };
        assert!((constant.accuracy() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(constant.top_n(&[3]).unwrap()[&3], 1.0);
        assert!(matches!(constant.top_n(&[4]), Err(EvalError::TopNOutOfRange { .. })));
    }

    #[test]
    fn rank_ties_follow_argmax() {
        assert_eq!(rank_of(&[0.5, 0.5, 0.0], 0), 0);
        assert_eq!(rank_of(&[0.5, 0.5, 0.0], 1), 1);
        assert_eq!(crate::model::argmax(&[0.5, 0.5, 0.0]), 0);
    }

    #[test]
    fn aligned_four_leaf_tree_is_extreme() {
        let t = j(&j(&leaf(0), &leaf(1)), &j(&leaf(2), &leaf(3)));
        let r = distortion_vs_random(&t, &[0, 0, 1, 1], 100, 3).unwrap();
        assert!((r.value - 0.25).abs() < 1e-12);
        assert!(r.percentile <= 5.0, "{}", r.percentile);
        let again = distortion_vs_random(&t, &[0, 0, 1, 1], 10, 7).unwrap();
        assert_eq!(again, distortion_vs_random(&t, &[0, 0, 1, 1], 10, 7).unwrap());
        assert!(matches!(distortion_vs_random(&t, &[0, 0, 0, 0], 100, 0), Err(EvalError::SingleClass)));
        assert!(matches!(distortion_vs_random(&t, &[0, 0, 1, 1], 5, 0), Err(EvalError::TooFewRuns(5))));
    }

    #[test]
    fn mining_thresholds_and_groups() {
        let a = j(&j(&leaf(0), &leaf(1)), &j(&leaf(2), &leaf(3)));
        let b = j(&j(&j(&leaf(0), &leaf(1)), &leaf(2)), &leaf(3));
        let counts = SubstructureCounts::from_trees(&[a.clone(), b.clone(), a.clone()]);
        assert_eq!(counts.frequency(0, 1), 1.0);
        assert!((counts.frequency(2, 3) - 2.0 / 3.0).abs() < 1e-12);
        let mined = MinedSubstructures::from_counts(vec![counts.clone()], 0.0);
        assert_eq!(mined.kept, counts.counts.keys().copied().collect());
        let mined = MinedSubstructures::from_counts(vec![counts], 0.5);
        assert_eq!(mined.groups, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(mined.constraint_groups(5), vec![0, 0, 1, 1, 6]);
        let names: Vec<String> = ["g", "k", "b", "p"].iter().map(|s| s.to_string()).collect();
        assert_eq!(mined.newick_fragments(&names), vec!["(g,k);", "(b,p);"]);
    }

    #[test]
    fn overlapping_pairs_merge() {
        let pairs: BTreeSet<(usize, usize)> = [(0, 1), (1, 4), (2, 3)].into_iter().collect();
        assert_eq!(consensus_groups(&pairs), vec![vec![0, 1, 4], vec![2, 3]]);
    }

    #[test]
    fn confusion_csv_layout() {
        let mut m = ConfusionMatrix::new(2);
        m.record(0, 0);
        m.record(1, 0);
        let names = vec!["a".to_string(), "b".to_string()];
        assert_eq!(m.to_csv(&names), "true\\predicted,a,b\na,1,0\nb,1,0\n");
        assert_eq!(m.row_sums(), vec![1, 1]);
    }
}
