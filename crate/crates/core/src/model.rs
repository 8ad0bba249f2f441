//! The classifier: tangent-space feed-forward layers between exp/log maps,
//! followed by a hyperbolic multiclass logistic regression head. The
//! Euclidean variant swaps every ball map for the identity and uses an
//! affine head.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ball::{self, raw, BallError, BallPoint};
use crate::tape::{self, Graph, NodeId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ball(#[from] BallError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    fn node(self, g: &mut Graph, n: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(n),
            Activation::Tanh => g.tanh(n),
            Activation::Identity => n,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            _ => Err(format!("unknown activation `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    #[default]
    Hyperbolic,
    Euclidean,
}

impl std::str::FromStr for Space {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hyperbolic" => Ok(Self::Hyperbolic),
            "euclidean" => Ok(Self::Euclidean),
            _ => Err(format!("unknown space `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub curvature: f64,
    pub space: Space,
    pub activation: Activation,
    /// Number of affine+activation layers inside the tangent-space map.
    pub depth: usize,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            latent_dim: 256,
            num_classes,
            curvature: 2.0,
            space: Space::Hyperbolic,
            activation: Activation::Relu,
            depth: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.input_dim == 0 || self.latent_dim == 0 {
            return bad("dimensions must be at least 1");
        }
        if self.num_classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if !(self.curvature.is_finite() && self.curvature > 0.0) {
            return bad("curvature must be positive and finite");
        }
        Ok(())
    }
}

/// One affine layer, `weight` stored row-major as `rows × cols` (out × in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        let weight = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { rows, cols, weight, bias: vec![0.0; rows] }
    }

    fn apply(&self, x: &[f64], act: Activation) -> Vec<f64> {
        self.weight
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(w, b)| act.apply(raw::dot(w, x) + b))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnnParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl FfnnParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").rows
    }

    /// The Euclidean map `f` applied in the tangent space.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.apply(&h, self.activation);
        }
        h
    }
}

/// Hyperplane normals `a` and offsets `p`, both `K × l` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlrParams {
    pub num_classes: usize,
    pub dim: usize,
    pub curvature: f64,
    pub a: Vec<f64>,
    pub p: Vec<f64>,
}

impl MlrParams {
    pub fn a_k(&self, k: usize) -> &[f64] {
        &self.a[k * self.dim..(k + 1) * self.dim]
    }

    pub fn p_k(&self, k: usize) -> &[f64] {
        &self.p[k * self.dim..(k + 1) * self.dim]
    }
}

/// Affine classifier head of the Euclidean variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub num_classes: usize,
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Head {
    Hyperbolic(MlrParams),
    Euclidean(LinearHead),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub ffnn: FfnnParams,
    pub head: Head,
}

/// Whether a parameter tensor lives on the ball or in Euclidean space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Euclidean,
    Ball,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamInfo {
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

/// Nodes produced by [`Model::build`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    /// Output of the feature extractor (ball points or Euclidean vectors).
    pub latent: NodeId,
    pub logits: NodeId,
}

impl Model {
    /// Weights uniform in `[-1/√d, 1/√d]`, biases and offsets zero,
    /// normals standard normal scaled by `1/√l`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.depth);
        let mut cols = config.input_dim;
        for _ in 0..config.depth {
            layers.push(Layer::init(config.latent_dim, cols, &mut rng));
            cols = config.latent_dim;
        }
        let (k, l) = (config.num_classes, config.latent_dim);
        let scale = 1.0 / (l as f64).sqrt();
        let normals: Vec<f64> = (0..k * l).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
        let head = match config.space {
            Space::Hyperbolic => Head::Hyperbolic(MlrParams {
                num_classes: k,
                dim: l,
                curvature: config.curvature,
                a: normals,
                p: vec![0.0; k * l],
            }),
            Space::Euclidean => Head::Euclidean(LinearHead { num_classes: k, dim: l, weight: normals, bias: vec![0.0; k] }),
        };
        Ok(Self { ffnn: FfnnParams { layers, activation: config.activation }, head, seed, config })
    }

    pub fn curvature(&self) -> f64 {
        self.config.curvature
    }

    /// Parameter names in a fixed order, with shapes and manifold kind.
    pub fn param_specs(&self) -> Vec<(String, ParamInfo)> {
        let mut out = Vec::new();
        for (i, layer) in self.ffnn.layers.iter().enumerate() {
            out.push((
                format!("ffnn.{i}.weight"),
                ParamInfo { rows: layer.rows, cols: layer.cols, kind: ParamKind::Euclidean },
            ));
            out.push((format!("ffnn.{i}.bias"), ParamInfo { rows: 1, cols: layer.rows, kind: ParamKind::Euclidean }));
        }
        match &self.head {
            Head::Hyperbolic(m) => {
                out.push(("mlr.a".into(), ParamInfo { rows: m.num_classes, cols: m.dim, kind: ParamKind::Euclidean }));
                out.push(("mlr.p".into(), ParamInfo { rows: m.num_classes, cols: m.dim, kind: ParamKind::Ball }));
            }
            Head::Euclidean(h) => {
                out.push(("head.weight".into(), ParamInfo { rows: h.num_classes, cols: h.dim, kind: ParamKind::Euclidean }));
                out.push(("head.bias".into(), ParamInfo { rows: 1, cols: h.num_classes, kind: ParamKind::Euclidean }));
            }
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<&Vec<f64>> {
        self.param_ref(name)
    }

    fn param_ref(&self, name: &str) -> Option<&Vec<f64>> {
        if let Some(rest) = name.strip_prefix("ffnn.") {
            let (idx, field) = rest.split_once('.')?;
            let layer = self.ffnn.layers.get(idx.parse::<usize>().ok()?)?;
            return match field {
                "weight" => Some(&layer.weight),
                "bias" => Some(&layer.bias),
                _ => None,
            };
        }
        match (&self.head, name) {
            (Head::Hyperbolic(m), "mlr.a") => Some(&m.a),
            (Head::Hyperbolic(m), "mlr.p") => Some(&m.p),
            (Head::Euclidean(h), "head.weight") => Some(&h.weight),
            (Head::Euclidean(h), "head.bias") => Some(&h.bias),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        if let Some(rest) = name.strip_prefix("ffnn.") {
            let (idx, field) = rest.split_once('.')?;
            let layer = self.ffnn.layers.get_mut(idx.parse::<usize>().ok()?)?;
            return match field {
                "weight" => Some(&mut layer.weight),
                "bias" => Some(&mut layer.bias),
                _ => None,
            };
        }
        match (&mut self.head, name) {
            (Head::Hyperbolic(m), "mlr.a") => Some(&mut m.a),
            (Head::Hyperbolic(m), "mlr.p") => Some(&mut m.p),
            (Head::Euclidean(h), "head.weight") => Some(&mut h.weight),
            (Head::Euclidean(h), "head.bias") => Some(&mut h.bias),
            _ => None,
        }
    }

    /// Binds every parameter by name for a graph built with [`Model::build`].
    pub fn bind_params(&self, b: &mut tape::Bindings) {
        for (name, _) in self.param_specs() {
            let v = self.param_ref(&name).expect("spec names resolve").clone();
            b.bind(name, v);
        }
    }

    /// Maps raw feature rows to the input of the tangent-space map:
    /// `log0(exp0(x))` for the hyperbolic model, the identity otherwise.
    pub fn prepare_inputs(&self, x: &[f64]) -> Vec<f64> {
        match self.config.space {
            Space::Euclidean => x.to_vec(),
            Space::Hyperbolic => {
                let c = self.curvature();
                let mut out = Vec::with_capacity(x.len());
                for row in x.chunks_exact(self.config.input_dim) {
                    let mut h = raw::exp0(c, row);
                    raw::project(c, &mut h);
                    out.extend(raw::log0(c, &h).expect("projected point is inside the ball"));
                }
                out
            }
        }
    }

    /// Adds the network to `g` with parameter inputs named as in
    /// [`Model::param_specs`]. `x` must hold rows from [`Model::prepare_inputs`].
    pub fn build(&self, g: &mut Graph, x: NodeId) -> ForwardNodes {
        let mut h = x;
        for (i, layer) in self.ffnn.layers.iter().enumerate() {
            let w = g.input(&format!("ffnn.{i}.weight"), layer.rows, layer.cols);
            let b = g.input(&format!("ffnn.{i}.bias"), 1, layer.rows);
            let lin = g.linear(h, w);
            let aff = g.add_bias(lin, b);
            h = self.ffnn.activation.node(g, aff);
        }
        match &self.head {
            Head::Hyperbolic(m) => {
                let c = self.curvature();
                let latent = g.exp0(h, c);
                let a = g.input("mlr.a", m.num_classes, m.dim);
                let p = g.input("mlr.p", m.num_classes, m.dim);
                let logits = g.hyp_mlr(latent, a, p, c);
                ForwardNodes { latent, logits }
            }
            Head::Euclidean(hd) => {
                let w = g.input("head.weight", hd.num_classes, hd.dim);
                let b = g.input("head.bias", 1, hd.num_classes);
                let lin = g.linear(h, w);
                let logits = g.add_bias(lin, b);
                ForwardNodes { latent: h, logits }
            }
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.config.input_dim {
            return Err(ModelError::DimensionMismatch { expected: self.config.input_dim, got: x.len() });
        }
        Ok(())
    }

    /// Latent representation of one raw feature vector.
    pub fn latent(&self, x_e: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(x_e)?;
        let u = self.prepare_inputs(x_e);
        let h = self.ffnn.apply(&u);
        Ok(match self.config.space {
            Space::Euclidean => h,
            Space::Hyperbolic => {
                let c = self.curvature();
                let mut z = raw::exp0(c, &h);
                raw::project(c, &mut z);
                z
            }
        })
    }

    pub fn logits(&self, x_e: &[f64]) -> Result<Vec<f64>, ModelError> {
        let z = self.latent(x_e)?;
        Ok(match &self.head {
            Head::Hyperbolic(m) => (0..m.num_classes).map(|k| mlr_logit(m.curvature, &z, m.a_k(k), m.p_k(k))).collect(),
            Head::Euclidean(h) => h
                .weight
                .chunks_exact(h.dim)
                .zip(&h.bias)
                .map(|(w, b)| raw::dot(w, &z) + b)
                .collect(),
        })
    }

    /// Predicted class and softmax probabilities.
    pub fn predict(&self, x_e: &[f64]) -> Result<(usize, Vec<f64>), ModelError> {
        let logits = self.logits(x_e)?;
        let probs = softmax(&logits);
        Ok((argmax(&probs), probs))
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let m: Model = serde_json::from_str(s)?;
        m.config.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `exp0(f(log0(x_h)))`.
pub fn ffnn_forward(x_h: &BallPoint, params: &FfnnParams) -> Result<BallPoint, ModelError> {
    if x_h.dim() != params.input_dim() {
        return Err(ModelError::DimensionMismatch { expected: params.input_dim(), got: x_h.dim() });
    }
    let c = x_h.curvature();
    let u = ball::log0(x_h);
    let h = params.apply(u.coords());
    Ok(ball::exp0(&ball::TangentVector(h), c))
}

/// One hyperbolic MLR logit, evaluated directly from the Möbius sum.
pub fn mlr_logit(c: f64, x: &[f64], a: &[f64], p: &[f64]) -> f64 {
    let na = raw::norm(a);
    if na < 1e-12 {
        return 0.0;
    }
    let neg_p: Vec<f64> = p.iter().map(|v| -v).collect();
    let z = raw::mobius_add(c, &neg_p, x);
    let q = (1.0 - c * raw::norm_sq(&z)).max(1e-15);
    let sc = c.sqrt();
    let lam = 2.0 / (1.0 - c * raw::norm_sq(p));
    lam * na / sc * (2.0 * sc * raw::dot(&z, a) / (q * na)).asinh()
}

pub fn mlr_logits(x_l: &BallPoint, params: &MlrParams) -> Result<Vec<f64>, ModelError> {
    if x_l.dim() != params.dim {
        return Err(ModelError::DimensionMismatch { expected: params.dim, got: x_l.dim() });
    }
    Ok((0..params.num_classes)
        .map(|k| mlr_logit(params.curvature, x_l.coords(), params.a_k(k), params.p_k(k)))
        .collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    tape::softmax_into(logits, 1.0, &mut out);
    out
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64, ModelError> {
    if label >= logits.len() {
        return Err(ModelError::LabelOutOfRange { label, classes: logits.len() });
    }
    Ok(tape::log_sum_exp(logits) - logits[label])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ball::Curvature;

    fn point(v: &[f64], c: f64) -> BallPoint {
        BallPoint::new(v.to_vec(), Curvature::new(c).unwrap()).unwrap()
    }

    fn identity_ffnn(d: usize, scale: f64) -> FfnnParams {
        let mut weight = vec![0.0; d * d];
        for i in 0..d {
            weight[i * d + i] = scale;
        }
        FfnnParams { layers: vec![Layer { rows: d, cols: d, weight, bias: vec![0.0; d] }], activation: Activation::Identity }
    }

    #[test]
    fn ffnn_identity_and_doubling() {
        let x = point(&[0.3, -0.2], 1.0);
        let y = ffnn_forward(&x, &identity_ffnn(2, 1.0)).unwrap();
        assert!(y.coords().iter().zip(x.coords()).all(|(a, b)| (a - b).abs() < 1e-12));
        let y = ffnn_forward(&point(&[0.5, 0.0], 1.0), &identity_ffnn(2, 2.0)).unwrap();
        assert!((y.coords()[0] - 0.8).abs() < 1e-12 && y.coords()[1].abs() < 1e-15);
        let z = ffnn_forward(&point(&[0.0, 0.0], 1.0), &identity_ffnn(2, 3.0)).unwrap();
        assert_eq!(z.coords(), &[0.0, 0.0]);
    }

    #[test]
    fn ffnn_rejects_wrong_dim() {
        let err = ffnn_forward(&point(&[0.1, 0.1, 0.1], 1.0), &identity_ffnn(2, 1.0)).unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { expected: 2, got: 3 }));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0; 21], 4).unwrap() - 21f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[1000.0, 0.0], 0).unwrap() < 1e-9);
        assert!((cross_entropy(&[0.0, 0.0, 3f64.ln()], 2).unwrap() + (0.6f64).ln()).abs() < 1e-12);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn mlr_symmetries() {
        let c = 2.0;
        let x = [0.2, -0.1, 0.3];
        let a = [0.5, 1.0, -0.2];
        let p = [0.1, 0.05, -0.2];
        let l = mlr_logit(c, &x, &a, &p);
        let na: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(mlr_logit(c, &x, &na, &p), -l);
        assert_eq!(mlr_logit(c, &x, &[0.0; 3], &p), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(4, 3);
        assert!(cfg.validate().is_ok());
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(4, 3);
        cfg.curvature = 0.0;
        assert!(Model::init(cfg, 0).is_err());
    }

    #[test]
    fn init_follows_scheme() {
        let mut cfg = ModelConfig::new(9, 3);
        cfg.latent_dim = 4;
        let m = Model::init(cfg, 7).unwrap();
        let w = &m.ffnn.layers[0].weight;
        assert!(w.iter().all(|v| v.abs() <= 1.0 / 3.0));
        assert!(m.ffnn.layers[0].bias.iter().all(|v| *v == 0.0));
        match &m.head {
            Head::Hyperbolic(h) => {
                assert!(h.p.iter().all(|v| *v == 0.0));
                assert!((0..3).all(|k| raw::norm(h.a_k(k)) > 0.0));
            }
            Head::Euclidean(_) => unreachable!(),
        }
    }
}
