//! Property tests over public invariants.

use std::time::Instant;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sphere_laplace::contrastive::{
    embed_all, full_targets, per_pair_loss, Dataset, LabeledPoint, MarginConfig, MarginConvention, TargetMode,
};
use sphere_laplace::eval::{knn, sparsification_ausc, RetrievalIndex};
use sphere_laplace::harness::checkpoint::Checkpoint;
use sphere_laplace::harness::data::{read_dataset, write_dataset};
use sphere_laplace::laplace::GaussianPosterior;
use sphere_laplace::net::{embed, jacobian, norm, Activation, ActiveSubset, NetSpec, ParamVector, Split};
use sphere_laplace::vmf::{vmf_estimate, K_MAX};

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d)
        .prop_filter("nonzero", |v| norm(v) > 1e-3)
        .prop_map(|v| {
            let n = norm(&v);
            v.into_iter().map(|a| a / n).collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embeddings_are_unit_and_tangent(seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 3)) {
        let spec = NetSpec::new(vec![3, 5, 4], Activation::Tanh).unwrap();
        let params = ParamVector::init(&spec, &mut ChaCha8Rng::seed_from_u64(seed));
        let z = embed(&spec, &params, &x).unwrap();
        prop_assert!((norm(&z) - 1.0).abs() < 1e-12);
        let j = jacobian(&spec, &params, &x, Split::Euclidean, &ActiveSubset::All).unwrap().matrix;
        for c in 0..j.ncols() {
            let dot: f64 = (0..z.len()).map(|r| z[r] * j[(r, c)]).sum();
            prop_assert!(dot.abs() < 1e-10);
        }
    }

    #[test]
    fn split_losses_agree_on_the_sphere(a in unit_vec(3), b in unit_vec(3), y in -3.0f64..3.0) {
        let e = per_pair_loss(y, &a, &b, Split::Euclidean).unwrap();
        let r = per_pair_loss(y, &a, &b, Split::Arccos).unwrap();
        prop_assert!((e - r).abs() < 1e-12);
    }

    #[test]
    fn balanced_targets_sum_to_one_and_minus_one(seed in any::<u64>(), sizes in prop::collection::vec(1usize..4, 2..4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = NetSpec::new(vec![2, 3], Activation::Relu).unwrap();
        let params = ParamVector::init(&spec, &mut rng);
        let mut points = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for k in 0..n {
                points.push(LabeledPoint { id: format!("{c}-{k}"), x: vec![c as f64, k as f64 + 0.5], label: c as u32 });
            }
        }
        let ds = Dataset::new(points).unwrap();
        let z = embed_all(&spec, &params, &ds).unwrap();
        let covering = MarginConfig::new(4.0, MarginConvention::Squared).unwrap();
        let batch = full_targets(&z, &ds.labels(), &covering, &TargetMode::Balanced).unwrap();
        let pos: f64 = batch.pairs.iter().filter(|p| !p.kind.is_negative()).map(|p| p.target).sum();
        let neg: f64 = batch.pairs.iter().filter(|p| p.kind.is_negative()).map(|p| p.target).sum();
        prop_assert!((pos - 1.0).abs() < 1e-12);
        prop_assert!((neg + 1.0).abs() < 1e-12);
    }

    #[test]
    fn knn_is_sorted_and_cosine_consistent(points in prop::collection::vec(unit_vec(3), 2..20), q in unit_vec(3)) {
        let n = points.len();
        let index = RetrievalIndex::new(points.clone(), vec![0; n]).unwrap();
        let nn = knn(&index, &q, n).unwrap();
        let cos = |i: usize| points[i].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        for w in nn.windows(2) {
            prop_assert!(cos(w[0]) >= cos(w[1]) - 1e-12);
        }
    }

    #[test]
    fn kappa_is_bounded(samples in prop::collection::vec(unit_vec(3), 2..30)) {
        let est = vmf_estimate(&samples).unwrap();
        prop_assert!(est.kappa >= 0.0 && est.kappa <= K_MAX);
        prop_assert!(est.r_bar <= 1.0 + 1e-12);
    }

    #[test]
    fn anti_calibrated_uncertainty_never_beats_calibrated(correct in prop::collection::vec(prop::bool::ANY, 1..40)) {
        let score: Vec<f64> = correct.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        let n = score.len();
        // Calibrated: wrong answers most uncertain. Anti: the reverse.
        let cal: Vec<f64> = score.iter().enumerate().map(|(i, s)| 1.0 - s + i as f64 * 1e-9).collect();
        let anti: Vec<f64> = score.iter().enumerate().map(|(i, s)| s + i as f64 * 1e-9).collect();
        let a = sparsification_ausc(&cal, &score, n).unwrap().ausc;
        let b = sparsification_ausc(&anti, &score, n).unwrap().ausc;
        prop_assert!(b <= a + 1e-12);
    }

    #[test]
    fn posterior_checkpoint_round_trips(seed in any::<u64>(), prec in prop::collection::vec(1e-6f64..1e6, 15)) {
        let spec = NetSpec::new(vec![2, 3, 3], Activation::Tanh).unwrap();
        let params = ParamVector::init(&spec, &mut ChaCha8Rng::seed_from_u64(seed));
        let active = spec.last_layer_range();
        let posterior = GaussianPosterior {
            spec, params, active, precision_diag: prec[..12].to_vec(), prior_sigma: 0.3, clamped: 2, floored: 1,
        };
        let ckpt = Checkpoint::Posterior { posterior, config_hash: "abc".into() };
        let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, ckpt);
    }
}

#[test]
fn ten_thousand_rows_load_quickly() {
    let points = (0..10_000)
        .map(|k| LabeledPoint { id: format!("r{k}"), x: vec![k as f64 * 0.001, -(k as f64) * 0.37], label: (k % 7) as u32 })
        .collect();
    let ds = Dataset::new(points).unwrap();
    let mut buf = Vec::new();
    write_dataset(&ds, &mut buf).unwrap();
    let start = Instant::now();
    let back = read_dataset(buf.as_slice()).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    assert_eq!(back, ds);
}
