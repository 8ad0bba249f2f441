//! Central-difference checks of every differentiable primitive and of the
//! full joint objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::{self, SimilarityConfig};
use crate::model::{Model, ModelConfig, Space};
use crate::optim::{self, Batch, LossWeights, TrainError};
use crate::tape::{check_gradient, Bindings, Graph, NodeId, SimilaritySign, TripletWeights};

pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const OBJECTIVE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn ball_points(rng: &mut ChaCha8Rng, rows: usize, cols: usize, c: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let v = uniform(rng, cols, -1.0, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let r = rng.random_range(0.05..0.85) / c.sqrt();
        out.extend(v.iter().map(|x| x / n * r));
    }
    out
}

fn readout(g: &mut Graph, n: NodeId, rng: &mut ChaCha8Rng) {
    let s = g.shape(n);
    let w = uniform(rng, s.len(), -1.0, 1.0);
    let wn = g.constant(s.rows, s.cols, &w);
    let m = g.mul(n, wn);
    let out = g.sum(m);
    g.set_output(out);
}

type Build = Box<dyn Fn(&mut Graph, NodeId, NodeId, NodeId) -> NodeId>;

fn primitive_cases(c: f64) -> Vec<(&'static str, Build)> {
    vec![
        ("add", Box::new(|g, x, y, _| g.add(x, y))),
        ("sub", Box::new(|g, x, y, _| g.sub(x, y))),
        ("mul", Box::new(|g, x, y, _| g.mul(x, y))),
        ("scale", Box::new(|g, x, _, _| g.scale(x, -1.7))),
        ("tanh", Box::new(|g, _, _, v| g.tanh(v))),
        ("atanh", Box::new(|g, x, _, _| g.atanh(x))),
        ("asinh", Box::new(|g, _, _, v| g.asinh(v))),
        ("exp", Box::new(|g, _, _, v| g.exp(v))),
        ("softmax", Box::new(|g, _, _, v| g.softmax(v))),
        ("row_norm", Box::new(|g, _, _, v| g.row_norm(v))),
        ("linear", Box::new(|g, x, y, _| g.linear(x, y))),
        ("mobius_add", Box::new(move |g, x, y, _| g.mobius_add(x, y, c, true))),
        ("mobius_scalar", Box::new(move |g, x, _, _| g.mobius_scalar(x, 0.7, c))),
        ("exp0", Box::new(move |g, _, _, v| g.exp0(v, c))),
        ("log0", Box::new(move |g, x, _, _| g.log0(x, c))),
        ("dist", Box::new(move |g, x, y, _| g.dist(x, y, c))),
        ("dist_to_origin", Box::new(move |g, x, _, _| g.dist_to_origin(x, c))),
        ("lca_depth", Box::new(move |g, x, y, _| g.lca_depth(x, y, c))),
        ("segment_min_norm", Box::new(|g, x, y, _| g.segment_min_norm(x, y))),
        ("hyp_mlr", Box::new(move |g, x, y, v| g.hyp_mlr(x, v, y, c))),
        (
            "triplet_loss",
            Box::new(move |g, x, y, _| {
                let d = g.dist(x, y, c);
                let l = g.lca_depth(x, y, c);
                g.triplet_loss(d, l, vec![[0, 1, 2], [2, 1, 0]], 0.5, TripletWeights::Softmax(SimilaritySign::Negative))
            }),
        ),
    ]
}

/// Worst relative error per primitive over `trials` random instances.
pub fn primitive_suite(seed: u64, trials: usize) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<GradCheck> = Vec::new();
    for &c in &[0.5, 1.0, 2.0] {
        for (name, build) in primitive_cases(c) {
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                let (rows, dim) = (3, rng.random_range(2..5));
                let mut g = Graph::new();
                let x = g.input("x", rows, dim);
                let y = g.input("y", rows, dim);
                let v = g.input("v", rows, dim);
                let n = build(&mut g, x, y, v);
                readout(&mut g, n, &mut rng);
                let b = Bindings::new()
                    .with("x", ball_points(&mut rng, rows, dim, c))
                    .with("y", ball_points(&mut rng, rows, dim, c))
                    .with("v", uniform(&mut rng, rows * dim, -1.5, 1.5));
                let err = check_gradient(&mut g, &b, &["x", "y", "v"], STEP).unwrap_or(f64::INFINITY);
                worst = worst.max(err);
            }
            let label = format!("{name} c={c}");
            out.push(GradCheck { name: label, max_rel_error: worst, tolerance: PRIMITIVE_TOL });
        }
    }
    out
}

/// Relative error of the joint objective with respect to all model
/// parameters on a small random batch, at randomly perturbed parameters.
pub fn objective_check(space: Space, seed: u64) -> Result<GradCheck, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, k) = (10, 5, 3);
    let config = ModelConfig { latent_dim: 4, space, ..ModelConfig::new(d, k) };
    let mut model = Model::init(config, seed)?;
    // Zero biases and offsets at initialisation can put a sample's tree point
    // exactly at the origin, where the LCA depth has a kink.
    for (name, _) in model.param_specs() {
        let p = model.param_mut(&name).expect("spec names resolve");
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let raw = uniform(&mut rng, n * d, -1.0, 1.0);
    let inputs = model.prepare_inputs(&raw);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let triplets = cluster::sample_triplets(n, 20, &mut rng)?;
    let sim = SimilarityConfig { tau: 0.5, ..SimilarityConfig::default() };
    let batch = Batch { inputs: &inputs, raw: &raw, labels: &labels };
    let (mut g, _) = optim::build_objective(&model, batch, LossWeights { lambda: 0.5, gamma: 0.5 }, &sim, &triplets, None)?;
    let mut b = Bindings::new();
    model.bind_params(&mut b);
    let names: Vec<String> = model.param_specs().into_iter().map(|(name, _)| name).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let err = check_gradient(&mut g, &b, &refs, STEP)?;
    let name = match space {
        Space::Hyperbolic => "joint objective (hyperbolic)",
        Space::Euclidean => "joint objective (euclidean)",
    };
    Ok(GradCheck { name: name.into(), max_rel_error: err, tolerance: OBJECTIVE_TOL })
}

/// Primitive checks followed by both end-to-end objective checks.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheck>, TrainError> {
    let mut out = primitive_suite(seed, 10);
    out.push(objective_check(Space::Hyperbolic, seed)?);
    out.push(objective_check(Space::Euclidean, seed)?);
    Ok(out)
}
