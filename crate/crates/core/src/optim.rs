//! Riemannian SGD, the joint classification + clustering objective, loss
//! weight schedules and the training loops.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ball::{raw, BallPoint, Curvature};
use crate::cluster::{self, ClusterError, Geometry, PairWeights, SimilarityConfig, SimilaritySource, TreeLayer, Triplet};
use crate::data::Dataset;
use crate::model::{Activation, Model, ModelConfig, ModelError, ParamKind, Space};
use crate::tape::{Bindings, Graph, NodeId, SimilaritySign, TapeError};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch of {0} samples is too small for the clustering loss")]
    BatchTooSmall(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(lambda: f64, gamma: f64) -> Result<Self, TrainError> {
        if !(lambda >= 0.0 && gamma >= 0.0 && lambda + gamma > 0.0 && (lambda + gamma).is_finite()) {
            return Err(TrainError::InvalidConfig(format!("invalid loss weights ({lambda}, {gamma})")));
        }
        Ok(Self { lambda, gamma })
    }

    pub const CLASSIFY: LossWeights = LossWeights { lambda: 1.0, gamma: 0.0 };
    pub const CLUSTER: LossWeights = LossWeights { lambda: 0.0, gamma: 1.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    /// `(0, 1)` until `switch_epoch`, then `(0.5, 0.5)`.
    Joint,
    /// Switches between `(0, 1)` and `(1, 0)` every `k_steps` batches.
    Alternating,
    /// Constant `(lambda, gamma)` from the config.
    Fixed,
}

impl std::str::FromStr for ScheduleMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "joint" => Ok(Self::Joint),
            "alternating" => Ok(Self::Alternating),
            "fixed" => Ok(Self::Fixed),
            _ => Err(format!("unknown schedule mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub mode: ScheduleMode,
    pub switch_epoch: usize,
    pub k_steps: usize,
    /// Start with `(1, 0)` instead of `(0, 1)`.
    pub classify_first: bool,
    /// Weights used by [`ScheduleMode::Fixed`].
    pub fixed: LossWeights,
    /// When false the clustering weight is forced to zero while the
    /// classification weight follows the schedule unchanged.
    pub clustering: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { mode: ScheduleMode::Joint, switch_epoch: 100, k_steps: 5, classify_first: false, fixed: LossWeights::CLASSIFY, clustering: true }
    }
}

impl Schedule {
    pub fn fixed(weights: LossWeights) -> Self {
        Self { mode: ScheduleMode::Fixed, fixed: weights, ..Self::default() }
    }

    /// Weights for a batch at `epoch` with global batch counter `step`.
    pub fn weights(&self, epoch: usize, step: usize) -> LossWeights {
        let w = self.scheduled(epoch, step);
        if self.clustering {
            w
        } else {
            LossWeights { gamma: 0.0, ..w }
        }
    }

    fn scheduled(&self, epoch: usize, step: usize) -> LossWeights {
        let (first, second) = if self.classify_first {
            (LossWeights::CLASSIFY, LossWeights::CLUSTER)
        } else {
            (LossWeights::CLUSTER, LossWeights::CLASSIFY)
        };
        match self.mode {
            ScheduleMode::Joint => {
                if epoch < self.switch_epoch {
                    first
                } else {
                    LossWeights { lambda: 0.5, gamma: 0.5 }
                }
            }
            ScheduleMode::Alternating => {
                if (step / self.k_steps.max(1)) % 2 == 0 {
                    first
                } else {
                    second
                }
            }
            ScheduleMode::Fixed => self.fixed,
        }
    }
}

/// `euclid_grad / λ_x² = ((1 - c‖x‖²)/2)² · euclid_grad`.
pub fn riemannian_grad(x: &BallPoint, euclid_grad: &[f64]) -> Vec<f64> {
    let s = metric_scale(x.curvature().get(), x.coords());
    euclid_grad.iter().map(|g| g * s).collect()
}

fn metric_scale(c: f64, x: &[f64]) -> f64 {
    let h = (1.0 - c * raw::norm_sq(x)) / 2.0;
    h * h
}

/// Retraction `x ⊕ exp0(-lr · grad_R)` followed by projection, in place.
pub fn rsgd_step_raw(c: f64, x: &mut [f64], euclid_grad: &[f64], lr: f64) -> Result<(), TrainError> {
    if euclid_grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient("ball parameter".into()));
    }
    let s = -lr * metric_scale(c, x);
    let v: Vec<f64> = euclid_grad.iter().map(|g| s * g).collect();
    let mut y = raw::mobius_add(c, x, &raw::exp0(c, &v));
    raw::project(c, &mut y);
    x.copy_from_slice(&y);
    Ok(())
}

pub fn rsgd_step(x: &BallPoint, euclid_grad: &[f64], lr: f64) -> Result<BallPoint, TrainError> {
    if !(lr > 0.0) {
        return Err(TrainError::InvalidConfig("learning rate must be positive".into()));
    }
    if euclid_grad.len() != x.dim() {
        return Err(ModelError::DimensionMismatch { expected: x.dim(), got: euclid_grad.len() }.into());
    }
    let mut y = x.coords().to_vec();
    rsgd_step_raw(x.curvature().get(), &mut y, euclid_grad, lr)?;
    Ok(BallPoint::new(y, x.curvature()).expect("projected point is inside the ball"))
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub space: Space,
    pub curvature: f64,
    pub latent_dim: usize,
    pub activation: Activation,
    pub depth: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub similarity: SimilarityConfig,
    pub schedule: Schedule,
    pub triplets_per_item: usize,
    /// Weight of the distance constraint in constrained training.
    pub mu: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            space: Space::Hyperbolic,
            curvature: 2.0,
            latent_dim: 256,
            activation: Activation::Relu,
            depth: 1,
            lr: 0.001,
            epochs: 300,
            batch_size: 32,
            similarity: SimilarityConfig::default(),
            schedule: Schedule::default(),
            triplets_per_item: 50,
            mu: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("key `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: i + 1, message: "expected `key = value`".into() })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, message: "empty key".into() });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), message: e.to_string() })
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "space" => self.space = parse_value(key, v)?,
            "curvature" => self.curvature = parse_value(key, v)?,
            "latent_dim" => self.latent_dim = parse_value(key, v)?,
            "activation" => self.activation = parse_value(key, v)?,
            "depth" => self.depth = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "tau" => self.similarity.tau = parse_value(key, v)?,
            "similarity_source" => self.similarity.source = parse_value(key, v)?,
            "tree_layer" => self.similarity.layer = parse_value(key, v)?,
            "similarity_sign" => {
                self.similarity.sign = match v {
                    "negative" => SimilaritySign::Negative,
                    "literal" => SimilaritySign::Literal,
                    _ => return Err(ConfigError::Value { key: key.into(), message: format!("unknown sign `{v}`") }),
                }
            }
            "lambda" => self.schedule.fixed.lambda = parse_value(key, v)?,
            "gamma" => self.schedule.fixed.gamma = parse_value(key, v)?,
            "schedule.mode" => self.schedule.mode = parse_value(key, v)?,
            "schedule.k" => self.schedule.k_steps = parse_value(key, v)?,
            "schedule.switch_epoch" => self.schedule.switch_epoch = parse_value(key, v)?,
            "schedule.classify_first" => self.schedule.classify_first = parse_value(key, v)?,
            "schedule.clustering" => self.schedule.clustering = parse_value(key, v)?,
            "triplets_per_item" => self.triplets_per_item = parse_value(key, v)?,
            "mu" => self.mu = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in parse_config(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate().map_err(|m| ConfigError::Value { key: "config".into(), message: m })?;
        Ok(cfg)
    }

    /// All settings as `key = value` text that [`TrainConfig::from_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut m = BTreeMap::new();
        let space = match self.space {
            Space::Hyperbolic => "hyperbolic",
            Space::Euclidean => "euclidean",
        };
        m.insert("space", space.to_string());
        m.insert("curvature", self.curvature.to_string());
        m.insert("latent_dim", self.latent_dim.to_string());
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        };
        m.insert("activation", act.to_string());
        m.insert("depth", self.depth.to_string());
        m.insert("lr", self.lr.to_string());
        m.insert("epochs", self.epochs.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("tau", self.similarity.tau.to_string());
        let src = match self.similarity.source {
            SimilaritySource::Logits => "logits",
            SimilaritySource::Latent => "latent",
            SimilaritySource::Input => "input",
        };
        m.insert("similarity_source", src.to_string());
        let layer = match self.similarity.layer {
            TreeLayer::Logits => "logits",
            TreeLayer::Latent => "latent",
        };
        m.insert("tree_layer", layer.to_string());
        let sign = match self.similarity.sign {
            SimilaritySign::Negative => "negative",
            SimilaritySign::Literal => "literal",
        };
        m.insert("similarity_sign", sign.to_string());
        m.insert("lambda", self.schedule.fixed.lambda.to_string());
        m.insert("gamma", self.schedule.fixed.gamma.to_string());
        let mode = match self.schedule.mode {
            ScheduleMode::Joint => "joint",
            ScheduleMode::Alternating => "alternating",
            ScheduleMode::Fixed => "fixed",
        };
        m.insert("schedule.mode", mode.to_string());
        m.insert("schedule.k", self.schedule.k_steps.to_string());
        m.insert("schedule.switch_epoch", self.schedule.switch_epoch.to_string());
        m.insert("schedule.classify_first", self.schedule.classify_first.to_string());
        m.insert("schedule.clustering", self.schedule.clustering.to_string());
        m.insert("triplets_per_item", self.triplets_per_item.to_string());
        m.insert("mu", self.mu.to_string());
        m.insert("seed", self.seed.to_string());
        m.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err("lr must be non-negative".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return Err("epochs must be at least 1".into());
        }
        if !(self.similarity.tau > 0.0) {
            return Err("tau must be positive".into());
        }
        if self.schedule.k_steps == 0 {
            return Err("schedule.k must be at least 1".into());
        }
        if self.schedule.mode == ScheduleMode::Fixed {
            LossWeights::new(self.schedule.fixed.lambda, self.schedule.fixed.gamma).map_err(|e| e.to_string())?;
        }
        if !(self.mu >= 0.0) {
            return Err("mu must be non-negative".into());
        }
        if !(self.curvature > 0.0 && self.curvature.is_finite()) {
            return Err("curvature must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            latent_dim: self.latent_dim,
            num_classes,
            curvature: self.curvature,
            space: self.space,
            activation: self.activation,
            depth: self.depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub model: Model,
    /// Mean batch loss per epoch.
    pub history: Vec<f64>,
}

impl TrainState {
    pub fn history_json(&self) -> String {
        serde_json::to_string(&self.history).expect("finite history serializes")
    }
}

/// A minibatch of prepared inputs with labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    /// Rows from [`Model::prepare_inputs`].
    pub inputs: &'a [f64],
    /// Raw feature rows, used when similarities come from the inputs.
    pub raw: &'a [f64],
    pub labels: &'a [usize],
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Extra pairwise distance penalty: weight and in-batch row pairs.
#[derive(Debug, Clone, Default)]
pub struct Constraint {
    pub mu: f64,
    pub pairs: Vec<(usize, usize)>,
}

/// Builds `λ·mean CE + γ·tree_loss (+ μ·mean constrained distance)` for one batch.
pub fn build_objective(
    model: &Model,
    batch: Batch<'_>,
    weights: LossWeights,
    similarity: &SimilarityConfig,
    triplets: &[Triplet],
    constraint: Option<&Constraint>,
) -> Result<(Graph, NodeId), TrainError> {
    let n = batch.len();
    let d = model.config.input_dim;
    let mut g = Graph::new();
    let x = g.constant(n, d, batch.inputs);
    let fwd = model.build(&mut g, x);
    let mut terms: Vec<NodeId> = Vec::new();
    if weights.lambda > 0.0 {
        let ce = g.cross_entropy(fwd.logits, batch.labels.to_vec());
        let m = g.mean(ce);
        terms.push(g.scale(m, weights.lambda));
    }
    let geometry = match model.config.space {
        Space::Hyperbolic => Geometry::Hyperbolic { c: model.curvature() },
        Space::Euclidean => Geometry::Euclidean,
    };
    let needs_tree = weights.gamma > 0.0 || constraint.is_some_and(|c| c.mu > 0.0 && !c.pairs.is_empty());
    let tree_points = needs_tree.then(|| match (similarity.layer, geometry) {
        (TreeLayer::Latent, _) => fwd.latent,
        (TreeLayer::Logits, Geometry::Hyperbolic { c }) => g.exp0(fwd.logits, c),
        (TreeLayer::Logits, Geometry::Euclidean) => fwd.logits,
    });
    if weights.gamma > 0.0 {
        if n < 3 {
            return Err(TrainError::BatchTooSmall(n));
        }
        let points = tree_points.expect("tree embedding built");
        let pair_weights = match (similarity.source, similarity.layer) {
            (SimilaritySource::Logits, TreeLayer::Logits) | (SimilaritySource::Latent, TreeLayer::Latent) => {
                PairWeights::Learned(similarity.sign)
            }
            (source, _) => PairWeights::LearnedFrom(similarity_embedding(model, &mut g, batch, fwd, source), similarity.sign),
        };
        let t = cluster::add_tree_loss(&mut g, points, triplets, similarity.tau, geometry, pair_weights)?;
        terms.push(g.scale(t, weights.gamma));
    }
    if let Some(c) = constraint.filter(|c| c.mu > 0.0 && !c.pairs.is_empty()) {
        let emb = tree_points.expect("tree embedding built");
        let xi = g.gather(emb, c.pairs.iter().map(|p| p.0).collect());
        let xj = g.gather(emb, c.pairs.iter().map(|p| p.1).collect());
        let dist = match geometry {
            Geometry::Hyperbolic { c } => g.dist(xi, xj, c),
            Geometry::Euclidean => {
                let diff = g.sub(xi, xj);
                g.row_norm(diff)
            }
        };
        let m = g.mean(dist);
        terms.push(g.scale(m, c.mu));
    }
    let mut total = *terms.first().ok_or_else(|| TrainError::InvalidConfig("all loss weights are zero".into()))?;
    for t in &terms[1..] {
        total = g.add(total, *t);
    }
    g.set_output(total);
    Ok((g, total))
}

/// Rows the pair similarities are measured on when they do not come from
/// the tree embedding itself.
fn similarity_embedding(
    model: &Model,
    g: &mut Graph,
    batch: Batch<'_>,
    fwd: crate::model::ForwardNodes,
    source: SimilaritySource,
) -> NodeId {
    let c = model.curvature();
    let hyper = model.config.space == Space::Hyperbolic;
    match source {
        SimilaritySource::Logits if hyper => g.exp0(fwd.logits, c),
        SimilaritySource::Logits => fwd.logits,
        SimilaritySource::Latent => fwd.latent,
        SimilaritySource::Input => {
            let x = g.constant(batch.len(), model.config.input_dim, batch.raw);
            if hyper {
                g.exp0(x, c)
            } else {
                x
            }
        }
    }
}

/// Value of the joint objective on one batch.
pub fn joint_loss(
    model: &Model,
    batch: Batch<'_>,
    weights: LossWeights,
    similarity: &SimilarityConfig,
    triplets: &[Triplet],
) -> Result<f64, TrainError> {
    if weights.gamma > 0.0 && batch.len() < 3 {
        return Err(TrainError::BatchTooSmall(batch.len()));
    }
    let (mut g, _) = build_objective(model, batch, weights, similarity, triplets, None)?;
    let mut b = Bindings::new();
    model.bind_params(&mut b);
    Ok(g.forward(&b)?)
}

/// Applies gradients: RSGD on ball parameters, plain SGD elsewhere.
pub fn apply_gradients(model: &mut Model, grads: &crate::tape::GradientMap, lr: f64) -> Result<(), TrainError> {
    let c = model.curvature();
    for (name, info) in model.param_specs() {
        let Some(g) = grads.get(&name) else { continue };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name));
        }
        if lr == 0.0 {
            continue;
        }
        let p = model.param_mut(&name).expect("spec names resolve");
        match info.kind {
            ParamKind::Euclidean => p.iter_mut().zip(g).for_each(|(x, gi)| *x -= lr * gi),
            ParamKind::Ball => {
                for (row, grow) in p.chunks_exact_mut(info.cols).zip(g.chunks_exact(info.cols)) {
                    rsgd_step_raw(c, row, grow, lr)?;
                }
            }
        }
    }
    Ok(())
}

/// Rows of the dataset with labels, prepared for `model`.
struct Prepared {
    inputs: Vec<f64>,
    raw: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Prepared {
    fn new(model: &Model, ds: &Dataset) -> Self {
        let raw = ds.features();
        Self { inputs: model.prepare_inputs(&raw), raw, labels: ds.labels(), dim: ds.dim() }
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
        let mut inputs = Vec::with_capacity(idx.len() * self.dim);
        let mut raw = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            inputs.extend_from_slice(&self.inputs[i * self.dim..(i + 1) * self.dim]);
            raw.extend_from_slice(&self.raw[i * self.dim..(i + 1) * self.dim]);
        }
        (inputs, raw, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Distinct RNG streams derived from one seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_TRIPLETS: u64 = 2;

/// Minibatch training under the configured schedule.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainState, TrainError> {
    run_training(dataset, config, None)
}

/// Trains `λ·CE + μ·(mean distance between in-batch samples whose classes
/// share a constraint group but differ)`; the clustering loss is disabled.
/// `groups[class]` is the constraint group of each class.
pub fn train_with_constraint(dataset: &Dataset, config: &TrainConfig, groups: &[usize]) -> Result<TrainState, TrainError> {
    if groups.len() != dataset.num_classes() {
        return Err(TrainError::InvalidConfig(format!(
            "constraint covers {} classes, dataset has {}",
            groups.len(),
            dataset.num_classes()
        )));
    }
    let mut cfg = config.clone();
    cfg.schedule = Schedule::fixed(LossWeights { lambda: config.schedule.fixed.lambda.max(0.0), gamma: 0.0 });
    if cfg.schedule.fixed.lambda == 0.0 && cfg.mu == 0.0 {
        return Err(TrainError::InvalidConfig("lambda and mu are both zero".into()));
    }
    run_training(dataset, &cfg, Some(groups))
}

fn run_training(dataset: &Dataset, config: &TrainConfig, groups: Option<&[usize]>) -> Result<TrainState, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    config.validate().map_err(TrainError::InvalidConfig)?;
    let mut model = Model::init(config.model_config(dataset.dim(), dataset.num_classes()), config.seed)?;
    let prep = Prepared::new(&model, dataset);
    let mut shuffle_rng = stream(config.seed, STREAM_SHUFFLE);
    let mut triplet_rng = stream(config.seed, STREAM_TRIPLETS);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut bindings = Bindings::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut weights = config.schedule.weights(epoch, step);
            step += 1;
            // A short final batch cannot hold a triplet; it keeps only the classification term.
            if weights.gamma > 0.0 && chunk.len() < 3 {
                if weights.lambda == 0.0 {
                    continue;
                }
                weights.gamma = 0.0;
            }
            let (inputs, raw, labels) = prep.gather(chunk);
            let batch = Batch { inputs: &inputs, raw: &raw, labels: &labels };
            let triplets = if weights.gamma > 0.0 {
                cluster::sample_triplets(chunk.len(), config.triplets_per_item * chunk.len(), &mut triplet_rng)?
            } else {
                Vec::new()
            };
            let constraint = groups.map(|gr| Constraint { mu: config.mu, pairs: constraint_pairs(&labels, gr) });
            if weights.lambda == 0.0 && weights.gamma == 0.0 && constraint.as_ref().is_none_or(|c| c.pairs.is_empty() || c.mu == 0.0) {
                continue;
            }
            let (mut g, _) = build_objective(&model, batch, weights, &config.similarity, &triplets, constraint.as_ref())?;
            model.bind_params(&mut bindings);
            let loss = g.forward(&bindings)?;
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                return Err(TrainError::Diverged { epoch, loss });
            }
            let grads = g.backward()?;
            apply_gradients(&mut model, &grads, config.lr)?;
            total += loss;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { 0.0 };
        if !mean.is_finite() || mean > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged { epoch, loss: mean });
        }
        history.push(mean);
    }
    Ok(TrainState { epoch: config.epochs, seed: config.seed, learning_rate: config.lr, model, history })
}

/// In-batch row pairs whose classes differ but share a constraint group.
pub fn constraint_pairs(labels: &[usize], groups: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 0..labels.len() {
        for b in a + 1..labels.len() {
            if labels[a] != labels[b] && groups[labels[a]] == groups[labels[b]] {
                out.push((a, b));
            }
        }
    }
    out
}

/// Options for fitting free ball points to a fixed similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingFit {
    pub dim: usize,
    pub curvature: f64,
    pub tau: f64,
    pub lr: f64,
    pub steps: usize,
    pub init_radius: f64,
    /// Independent initialisations; the fit with the lowest final loss wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for EmbeddingFit {
    fn default() -> Self {
        Self { dim: 2, curvature: 1.0, tau: 0.3, lr: 0.1, steps: 1000, init_radius: 0.05, restarts: 4, seed: 0 }
    }
}

/// Minimises the fixed-similarity tree loss over all triplets of `n` items by
/// RSGD on free ball points; returns the fitted points.
pub fn fit_similarity_embedding(w: &[Vec<f64>], opts: &EmbeddingFit) -> Result<Vec<BallPoint>, TrainError> {
    let n = w.len();
    if n < 3 {
        return Err(TrainError::BatchTooSmall(n));
    }
    let c = opts.curvature;
    let curv = Curvature::new(c).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let triplets = cluster::all_triplets(n);
    let mut g = Graph::new();
    let x = g.input("x", n, opts.dim);
    let out = cluster::add_tree_loss(&mut g, x, &triplets, opts.tau, Geometry::Hyperbolic { c }, PairWeights::Matrix(w))?;
    g.set_output(out);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..opts.restarts.max(1) {
        let mut pts: Vec<f64> = (0..n * opts.dim).map(|_| rng.random_range(-opts.init_radius..opts.init_radius)).collect();
        for step in 0..opts.steps {
            let loss = g.forward(&Bindings::new().with("x", pts.clone()))?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch: step, loss });
            }
            let grads = g.backward()?;
            let gx = grads.get("x").expect("input gradient");
            for (row, grow) in pts.chunks_exact_mut(opts.dim).zip(gx.chunks_exact(opts.dim)) {
                rsgd_step_raw(c, row, grow, opts.lr)?;
            }
        }
        let loss = g.forward(&Bindings::new().with("x", pts.clone()))?;
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, pts));
        }
    }
    let (_, pts) = best.expect("at least one restart");
    Ok(pts.chunks_exact(opts.dim).map(|r| BallPoint::new(r.to_vec(), curv).expect("inside ball")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(v: &[f64]) -> BallPoint {
        BallPoint::new(v.to_vec(), Curvature::new(1.0).unwrap()).unwrap()
    }

    #[test]
    fn riemannian_grad_examples() {
        assert_eq!(riemannian_grad(&pt(&[0.0, 0.0]), &[4.0, -8.0]), vec![1.0, -2.0]);
        let near = riemannian_grad(&pt(&[0.99999, 0.0]), &[1.0, 1.0]);
        assert!(near[0] < 1e-9);
        assert_eq!(riemannian_grad(&pt(&[0.3, 0.1]), &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn rsgd_basic_steps() {
        let x = pt(&[0.2, -0.1]);
        assert_eq!(rsgd_step(&x, &[0.0, 0.0], 0.1).unwrap().coords(), x.coords());
        let y = rsgd_step(&pt(&[0.0, 0.0]), &[1.0, -2.0], 0.1).unwrap();
        assert!(y.coords()[0] < 0.0 && y.coords()[1] > 0.0);
        assert!(matches!(rsgd_step(&x, &[f64::NAN, 0.0], 0.1), Err(TrainError::NonFiniteGradient(_))));
    }

    #[test]
    fn alternating_schedule_sequence() {
        let s = Schedule { mode: ScheduleMode::Alternating, k_steps: 5, ..Schedule::default() };
        let seq: Vec<(f64, f64)> = (0..20).map(|i| s.weights(0, i)).map(|w| (w.lambda, w.gamma)).collect();
        let mut expected = Vec::new();
        for block in 0..4 {
            let w = if block % 2 == 0 { (0.0, 1.0) } else { (1.0, 0.0) };
            expected.extend(std::iter::repeat_n(w, 5));
        }
        assert_eq!(seq, expected);
    }

    #[test]
    fn joint_schedule_switch() {
        let s = Schedule::default();
        assert_eq!(s.weights(99, 0), LossWeights::CLUSTER);
        assert_eq!(s.weights(100, 0), LossWeights { lambda: 0.5, gamma: 0.5 });
        let s = Schedule { classify_first: true, ..Schedule::default() };
        assert_eq!(s.weights(0, 0), LossWeights::CLASSIFY);
    }

    #[test]
    fn config_text_round_trip() {
        let text = "# comment\nspace = euclidean\nlr = 0.01  # inline\nschedule.mode = alternating\nschedule.k = 3\n\nseed = 9\n";
        let cfg = TrainConfig::from_text(text).unwrap();
        assert_eq!(cfg.space, Space::Euclidean);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.schedule.k_steps, 3);
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(matches!(TrainConfig::from_text("bogus = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(TrainConfig::from_text("lr 0.1"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(TrainConfig::from_text("lr = fast"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
        assert!(LossWeights::new(0.5, 0.5).is_ok());
    }

    #[test]
    fn constraint_pairs_skip_same_label_and_other_groups() {
        let pairs = constraint_pairs(&[0, 1, 0, 2], &[0, 0, 1]);
        assert_eq!(pairs, vec![(0, 1), (1, 2)]);
        assert!(constraint_pairs(&[0, 1, 2], &[0, 1, 2]).is_empty());
    }
}
