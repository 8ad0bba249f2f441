use hyrep::ball::{self, raw, BallPoint, Curvature, TangentVector, EPS_BALL};
use hyrep::cluster::{self, ClusterTree};
use hyrep::data::{bin_spikes, Markers, SpikeTrain};
use hyrep::eval::{self, Predictions};
use hyrep::model;
use hyrep::optim::{self, LossWeights, Schedule, ScheduleMode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn curvature() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.5), Just(1.0), Just(2.0)]
}

/// A point strictly inside the ball of curvature `c`, radius up to 0.95 of the edge.
fn point_in(dim: usize, c: f64) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0f64..1.0, dim), 0.0f64..0.95).prop_map(move |(v, r)| {
        let n = raw::norm(&v);
        if n < 1e-9 {
            vec![0.0; dim]
        } else {
            v.iter().map(|x| x / n * r / c.sqrt()).collect()
        }
    })
}

fn pair(dim: usize) -> impl Strategy<Value = (f64, Vec<f64>, Vec<f64>)> {
    curvature().prop_flat_map(move |c| (Just(c), point_in(dim, c), point_in(dim, c)))
}

fn bp(v: &[f64], c: f64) -> BallPoint {
    BallPoint::new(v.to_vec(), Curvature::new(c).unwrap()).unwrap()
}

fn gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn gyrogroup_identities((c, x, _) in pair(8)) {
        let p = bp(&x, c);
        let o = BallPoint::origin(8, p.curvature());
        prop_assert!(gap(ball::mobius_add(&o, &p).unwrap().coords(), &x) < 1e-9);
        prop_assert!(raw::norm(ball::mobius_add(&p, &p.neg()).unwrap().coords()) < 1e-9);
    }

    #[test]
    fn exp_log_round_trip((c, x, _) in pair(5)) {
        let p = bp(&x, c);
        let back = ball::exp0(&ball::log0(&p), p.curvature());
        prop_assert!(gap(back.coords(), &x) < 1e-9);
    }

    #[test]
    fn log_exp_round_trip(u in prop::collection::vec(-1.0f64..1.0, 4), c in curvature()) {
        // Keep sqrt(c)|v| <= 3 so the image stays clear of the clipping radius.
        let v: Vec<f64> = u.iter().map(|x| x * 1.5 / c.sqrt()).collect();
        let curv = Curvature::new(c).unwrap();
        let back = ball::log0(&ball::exp0(&TangentVector(v.clone()), curv));
        prop_assert!(gap(back.coords(), &v) < 1e-9 * raw::norm(&v).max(1.0));
    }

    #[test]
    fn distance_to_origin_closed_form((c, x, _) in pair(6)) {
        let p = bp(&x, c);
        let o = BallPoint::origin(6, p.curvature());
        let expected = 2.0 / c.sqrt() * (c.sqrt() * raw::norm(&x)).atanh();
        prop_assert!((ball::dist(&o, &p).unwrap() - expected).abs() < 1e-9 * expected.max(1.0));
    }

    #[test]
    fn distance_is_symmetric_and_nonnegative((c, x, y) in pair(3)) {
        let (p, q) = (bp(&x, c), bp(&y, c));
        let d = ball::dist(&p, &q).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - ball::dist(&q, &p).unwrap()).abs() < 1e-9 * d.max(1.0));
    }

    #[test]
    fn triangle_inequality(c in curvature(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<BallPoint> = (0..3).map(|_| {
            let v: Vec<f64> = (0..4).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            let s = rand::Rng::random_range(&mut rng, 0.0..0.9) / c.sqrt() / raw::norm(&v).max(1e-9);
            bp(&v.iter().map(|a| a * s).collect::<Vec<_>>(), c)
        }).collect();
        let d = |a: usize, b: usize| ball::dist(&pts[a], &pts[b]).unwrap();
        prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-9);
    }

    #[test]
    fn rsgd_stays_inside((c, x, _) in pair(3), g in prop::collection::vec(-1e6f64..1e6, 3), lr in 0.0f64..10.0) {
        let p = bp(&x, c);
        let next = optim::rsgd_step(&p, &g, lr).unwrap();
        prop_assert!(c.sqrt() * next.norm() <= 1.0 - EPS_BALL + 1e-12);
    }

    #[test]
    fn riemannian_gradient_scale((c, x, _) in pair(3), g in prop::collection::vec(-5.0f64..5.0, 3)) {
        let p = bp(&x, c);
        let scale = ((1.0 - c * raw::norm_sq(&x)) / 2.0).powi(2);
        let rg = optim::riemannian_grad(&p, &g);
        prop_assert!(gap(&rg, &g.iter().map(|v| v * scale).collect::<Vec<_>>()) < 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-500.0f64..500.0, 2..30)) {
        let p = model::softmax(&logits);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alternating_blocks(k in 1usize..20, steps in 1usize..200, classify_first in any::<bool>()) {
        let s = Schedule { mode: ScheduleMode::Alternating, k_steps: k, classify_first, ..Schedule::default() };
        for step in 0..steps {
            let first = if classify_first { LossWeights::CLASSIFY } else { LossWeights::CLUSTER };
            let second = if classify_first { LossWeights::CLUSTER } else { LossWeights::CLASSIFY };
            let expected = if (step / k) % 2 == 0 { first } else { second };
            prop_assert_eq!(s.weights(0, step), expected);
        }
    }

    #[test]
    fn joint_switch(switch in 0usize..50, epoch in 0usize..100) {
        let s = Schedule { switch_epoch: switch, ..Schedule::default() };
        let expected = if epoch < switch { LossWeights::CLUSTER } else { LossWeights { lambda: 0.5, gamma: 0.5 } };
        prop_assert_eq!(s.weights(epoch, 0), expected);
    }

    #[test]
    fn dasgupta_swap_invariance_and_bound(n in 2usize..8, seed in any::<u64>(), node in any::<prop::sample::Index>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<usize> = (0..n).collect();
        let tree = cluster::random_tree(&items, &mut rng);
        let mut w = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let v: f64 = rand::Rng::random(&mut rng);
                w[i][j] = v;
                w[j][i] = v;
            }
        }
        let cost = cluster::dasgupta_cost(&tree, &w).unwrap();
        let total: f64 = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| w[i][j]).sum();
        prop_assert!(cost >= 2.0 * total - 1e-12);
        let internal: Vec<usize> = (0..tree.nodes().len()).filter(|&k| matches!(tree.node(k), cluster::TreeNode::Internal(..))).collect();
        let mut swapped = tree.clone();
        swapped.swap_children(internal[node.index(internal.len())]);
        prop_assert!((cluster::dasgupta_cost(&swapped, &w).unwrap() - cost).abs() < 1e-12 * cost.max(1.0));
    }

    #[test]
    fn random_trees_are_binary_over_items(n in 1usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let tree: ClusterTree = cluster::random_tree(&items, &mut rng);
        let mut leaves = tree.leaves();
        leaves.sort_unstable();
        prop_assert_eq!(leaves, items);
        prop_assert_eq!(tree.num_internal(), n - 1);
    }

    #[test]
    fn disjoint_bins_conserve_spikes(spikes in prop::collection::vec(0.0f64..2.0, 0..60)) {
        let mut s = spikes.clone();
        s.sort_by(f64::total_cmp);
        let train = SpikeTrain { units: vec![s.clone()], markers: Markers::default(), length: 2.0 };
        let counts = bin_spikes(&train, 0.1, 0.1).unwrap();
        let covered = s.iter().filter(|&&t| t < 0.1 * counts[0].len() as f64).count() as u32;
        prop_assert_eq!(counts[0].iter().sum::<u32>(), covered);
    }

    #[test]
    fn interior_spikes_land_in_four_bins(t in 0.1f64..1.9) {
        let train = SpikeTrain { units: vec![vec![t]], markers: Markers::default(), length: 2.0 };
        let counts = bin_spikes(&train, 0.1, 0.025).unwrap();
        prop_assert_eq!(counts[0].iter().sum::<u32>(), 4);
    }

    #[test]
    fn confusion_and_top_n(k in 2usize..8, rows in prop::collection::vec((any::<prop::sample::Index>(), prop::collection::vec(0.0f64..1.0, 8)), 1..40)) {
        let labels: Vec<usize> = rows.iter().map(|(i, _)| i.index(k)).collect();
        let probs: Vec<Vec<f64>> = rows.iter().map(|(_, p)| p[..k].to_vec()).collect();
        let preds = Predictions { labels: labels.clone(), probs };
        let m = preds.confusion(k);
        prop_assert_eq!(m.total(), labels.len() as u64);
        let mut per_class = vec![0u64; k];
        labels.iter().for_each(|&l| per_class[l] += 1);
        prop_assert_eq!(m.row_sums(), per_class);
        prop_assert!((m.accuracy() - m.trace() as f64 / m.total() as f64).abs() < 1e-15);
        let ns: Vec<usize> = (1..=k).collect();
        let top = preds.top_n(&ns).unwrap();
        prop_assert!(ns.windows(2).all(|w| top[&w[0]] <= top[&w[1]]));
        prop_assert_eq!(top[&k], 1.0);
        prop_assert!((top[&1] - preds.accuracy()).abs() < 1e-15);
    }

    #[test]
    fn mid_rank_percentile_bounds(v in -5.0f64..5.0, samples in prop::collection::vec(-5.0f64..5.0, 1..50)) {
        let p = eval::mid_rank_percentile(v, &samples);
        prop_assert!((0.0..=100.0).contains(&p));
        let lower = eval::mid_rank_percentile(v - 10.0, &samples);
        prop_assert!(lower <= p);
    }
}
