mod common;

use common::{permutation_importance, permutation_shapley, synth};
use privatexr_core::attribution::{exact_shapley, global_importance, sampled_shapley, ShapleyMode, ValueKind};
use privatexr_core::data::{split, SplitSpec, SynthConfig};
use privatexr_core::nn::{ModelSpec, TrainedModel};
use privatexr_core::trainer::{train, TrainConfig};
use rand::Rng;

fn random_mlp(d: usize, seed: u64) -> TrainedModel {
    let spec = ModelSpec::mlp(d, 3, vec![7, 5]);
    let mut rng = privatexr_core::rng::rng_from_seed(seed);
    let params = (0..spec.param_count()).map(|_| rng.random_range(-1.5..1.5)).collect();
    TrainedModel::from_params(spec, params).unwrap()
}

#[test]
fn exact_mode_matches_enumeration_of_all_orderings() {
    let d = 8;
    let mut rng = privatexr_core::rng::rng_from_seed(3);
    for seed in 0..3 {
        let m = random_mlp(d, seed);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let fast = exact_shapley(&m, &x, &b, ValueKind::Probability).unwrap();
        let oracle = permutation_shapley(&m, &x, &b);
        for (f, o) in fast.iter().zip(&oracle) {
            assert!((f - o).abs() < 1e-10, "{fast:?} vs {oracle:?}");
        }
    }
}

#[test]
fn sampled_estimator_is_unbiased() {
    let d = 8;
    let m = random_mlp(d, 11);
    let x = vec![1.2, -0.4, 0.8, -1.5, 0.3, 2.0, -0.9, 0.1];
    let b = vec![0.0; d];
    let exact = exact_shapley(&m, &x, &b, ValueKind::Probability).unwrap();
    let runs: Vec<Vec<f64>> = (0..50)
        .map(|s| sampled_shapley(&m, &x, &b, 200, s, ValueKind::Probability).unwrap())
        .collect();
    for j in 0..d {
        let vals: Vec<f64> = runs.iter().map(|r| r[j]).collect();
        let mean = vals.iter().sum::<f64>() / 50.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 49.0;
        let se = (var / 50.0).sqrt().max(1e-12);
        assert!((mean - exact[j]).abs() <= 3.0 * se, "feature {j}: {mean} vs {} (se {se})", exact[j]);
    }
}

#[test]
fn signal_features_rank_first_under_both_attributions() {
    let ds = synth(SynthConfig {
        signal_features: Some(vec![0, 1, 2]),
        seed: 4,
        ..SynthConfig::default()
    });
    let (tr, te) = split(&ds, &SplitSpec::frames(0.7, 4)).unwrap();
    let spec = ModelSpec::mlp(ds.dim(), ds.class_count(), vec![32]);
    let cfg = TrainConfig { epochs: 60, batch_size: 64, lr: 0.003, patience: 60, ..TrainConfig::default() };
    let model = train(&tr, &te, &spec, &cfg).unwrap();

    let oracle = permutation_importance(&model, &te, 5, 9);
    let mut by_drop: Vec<usize> = (0..ds.dim()).collect();
    by_drop.sort_by(|&a, &b| oracle[b].total_cmp(&oracle[a]));
    let mut top_oracle = by_drop[..3].to_vec();
    top_oracle.sort();
    assert_eq!(top_oracle, vec![0, 1, 2], "permutation importance {oracle:?}");

    let rows = te.subset(&(0..200).collect::<Vec<_>>()).feature_matrix();
    let gi = global_importance(&model, &rows, &vec![0.0; ds.dim()], ShapleyMode::Sampled { permutations: 64, seed: 1 }).unwrap();
    let mut top = gi.ranking[..3].to_vec();
    top.sort();
    assert_eq!(top, top_oracle, "mean |phi| {:?}", gi.mean_abs_phi);
}
