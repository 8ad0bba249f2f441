use hyrep::ball::{raw, BallPoint, Curvature};
use hyrep::cluster::{self, SimilarityConfig};
use hyrep::data::{builtin_taxonomy, generate_synthetic, Dataset, DatasetMeta, SyntheticSpec, TaxonomyKind, Trial, TrialValues};
use hyrep::eval;
use hyrep::model::{self, Model, Space};
use hyrep::optim::{self, Batch, LossWeights, Schedule, TrainConfig, TrainError};
use hyrep::tape::{Bindings, Graph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn small_dataset(seed: u64) -> Dataset {
    let spec = SyntheticSpec { trials_per_class: 4, feature_dim: 10, ..SyntheticSpec::new(builtin_taxonomy(TaxonomyKind::Consonant21), seed) };
    generate_synthetic(&spec).unwrap()
}

fn quick_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { lr: 0.01, epochs: 4, latent_dim: 8, triplets_per_item: 5, batch_size: 16, seed, ..TrainConfig::default() };
    cfg.schedule.switch_epoch = 2;
    cfg
}

#[test]
fn rsgd_converges_on_squared_distance() {
    let target = [0.4, 0.3];
    let curv = Curvature::new(1.0).unwrap();
    let mut g = Graph::new();
    let x = g.input("x", 1, 2);
    let t = g.constant(1, 2, &target);
    let d = g.dist(x, t, 1.0);
    let d2 = g.mul(d, d);
    let out = g.sum(d2);
    g.set_output(out);
    let mut p = BallPoint::origin(2, curv);
    for _ in 0..2000 {
        g.forward(&Bindings::new().with("x", p.coords().to_vec())).unwrap();
        let grads = g.backward().unwrap();
        p = optim::rsgd_step(&p, grads.get("x").unwrap(), 0.01).unwrap();
    }
    let err = raw::norm(&[p.coords()[0] - target[0], p.coords()[1] - target[1]]);
    assert!(err < 1e-3, "ended at {:?}", p.coords());
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let ds = small_dataset(1);
    let cfg = TrainConfig { lr: 0.0, epochs: 1, ..quick_config(1) };
    let st = optim::train(&ds, &cfg).unwrap();
    let init = Model::init(cfg.model_config(ds.dim(), ds.num_classes()), cfg.seed).unwrap();
    assert_eq!(st.model, init);
    assert_eq!(st.history.len(), 1);
}

#[test]
fn same_seed_same_trajectory() {
    let ds = small_dataset(2);
    let cfg = quick_config(2);
    let a = optim::train(&ds, &cfg).unwrap();
    let b = optim::train(&ds, &cfg).unwrap();
    assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
    assert_eq!(a.history.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.history.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let other = optim::train(&ds, &TrainConfig { seed: 3, ..cfg }).unwrap();
    assert_ne!(a.model, other.model);
}

fn classification_only(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig { schedule: Schedule::fixed(LossWeights::CLASSIFY), ..cfg.clone() }
}

#[test]
fn zero_mu_matches_plain_classification() {
    let ds = small_dataset(4);
    let cfg = TrainConfig { mu: 0.0, ..quick_config(4) };
    let groups: Vec<usize> = builtin_taxonomy(TaxonomyKind::Consonant21).groups_at_level(1);
    let constrained = optim::train_with_constraint(&ds, &cfg, &groups).unwrap();
    let plain = optim::train(&ds, &classification_only(&cfg)).unwrap();
    assert_eq!(constrained.model, plain.model);
    assert_eq!(constrained.history, plain.history);
}

#[test]
fn singleton_groups_reduce_to_classification() {
    let ds = small_dataset(5);
    let cfg = TrainConfig { mu: 1.0, ..quick_config(5) };
    let singletons: Vec<usize> = (0..ds.num_classes()).collect();
    let constrained = optim::train_with_constraint(&ds, &cfg, &singletons).unwrap();
    let plain = optim::train(&ds, &classification_only(&cfg)).unwrap();
    assert_eq!(constrained.model, plain.model);
}

#[test]
fn constraint_changes_training_when_active() {
    let ds = small_dataset(6);
    let cfg = TrainConfig { mu: 1.0, ..quick_config(6) };
    let groups: Vec<usize> = builtin_taxonomy(TaxonomyKind::Consonant21).groups_at_level(1);
    let constrained = optim::train_with_constraint(&ds, &cfg, &groups).unwrap();
    let plain = optim::train(&ds, &classification_only(&cfg)).unwrap();
    assert_ne!(constrained.model, plain.model);
    assert!(matches!(optim::train_with_constraint(&ds, &cfg, &groups[..5]), Err(TrainError::InvalidConfig(_))));
}

#[test]
fn joint_loss_is_linear_in_the_weights() {
    let ds = small_dataset(7);
    let cfg = quick_config(7);
    let model = Model::init(cfg.model_config(ds.dim(), ds.num_classes()), 7).unwrap();
    let sub: Vec<usize> = (0..8).map(|i| i * 9).collect();
    let part = ds.subset(&sub);
    let raw_x = part.features();
    let inputs = model.prepare_inputs(&raw_x);
    let labels = part.labels();
    let batch = Batch { inputs: &inputs, raw: &raw_x, labels: &labels };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let triplets = cluster::sample_triplets(8, 40, &mut rng).unwrap();
    let sim = SimilarityConfig::default();
    let loss = |l: f64, g: f64| optim::joint_loss(&model, batch, LossWeights { lambda: l, gamma: g }, &sim, &triplets).unwrap();

    let ce: f64 = part
        .trials
        .iter()
        .map(|t| model::cross_entropy(&model.logits(&t.flattened()).unwrap(), t.label).unwrap())
        .sum::<f64>()
        / 8.0;
    let c = model.curvature();
    let curv = Curvature::new(c).unwrap();
    let points: Vec<BallPoint> = part
        .trials
        .iter()
        .map(|t| {
            let mut p = raw::exp0(c, &model.logits(&t.flattened()).unwrap());
            raw::project(c, &mut p);
            BallPoint::new(p, curv).unwrap()
        })
        .collect();
    let tree = cluster::tree_loss(&points, &triplets, &sim).unwrap();

    assert!((loss(1.0, 0.0) - ce).abs() < 1e-9 * ce);
    assert!((loss(0.0, 1.0) - tree).abs() < 1e-9 * tree);
    assert!((loss(0.5, 0.5) - 0.5 * (ce + tree)).abs() < 1e-9 * (ce + tree));
    let tiny = Batch { inputs: &inputs[..2 * ds.dim()], raw: &raw_x[..2 * ds.dim()], labels: &labels[..2] };
    assert!(matches!(
        optim::joint_loss(&model, tiny, LossWeights::CLUSTER, &sim, &triplets),
        Err(TrainError::BatchTooSmall(2))
    ));
}

fn two_gaussians(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let trials = (0..n)
        .map(|i| {
            let label = i % 2;
            let centre = if label == 0 { [-1.0, 0.5] } else { [1.0, -0.5] };
            let f = centre.iter().map(|m| m + noise.sample(&mut rng)).collect();
            Trial { label, values: TrialValues::Features(f) }
        })
        .collect();
    Dataset { meta: DatasetMeta { n_units: 2, n_bins: 1, classes: vec!["a".into(), "b".into()], taxonomy: None }, trials }
}

#[test]
fn separable_toy_problem_is_learned_in_both_spaces() {
    let ds = two_gaussians(200, 9);
    for space in [Space::Hyperbolic, Space::Euclidean] {
        let cfg = TrainConfig {
            space,
            latent_dim: 8,
            epochs: 500,
            lr: 0.001,
            schedule: Schedule::fixed(LossWeights::CLASSIFY),
            ..TrainConfig::default()
        };
        let st = optim::train(&ds, &cfg).unwrap();
        let acc = eval::predict_all(&st.model, &ds).unwrap().accuracy();
        assert!(acc >= 0.99, "{space:?}: {acc}");
    }
}

#[test]
fn full_batch_descent_is_monotone() {
    let ds = small_dataset(8);
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 50,
        batch_size: ds.len(),
        schedule: Schedule::fixed(LossWeights::CLASSIFY),
        ..quick_config(8)
    };
    let st = optim::train(&ds, &cfg).unwrap();
    assert!(st.history.windows(2).all(|w| w[1] <= w[0]), "{:?}", st.history);
}

#[test]
fn training_errors() {
    let ds = small_dataset(10);
    let empty = ds.subset(&[]);
    assert!(matches!(optim::train(&empty, &quick_config(0)), Err(TrainError::EmptyDataset)));
    assert!(matches!(optim::train(&ds, &TrainConfig { epochs: 0, ..quick_config(0) }), Err(TrainError::InvalidConfig(_))));
    let wild = TrainConfig { lr: 1e6, schedule: Schedule::fixed(LossWeights::CLASSIFY), ..quick_config(0) };
    assert!(matches!(optim::train(&ds, &wild), Err(TrainError::Diverged { .. })));
}
