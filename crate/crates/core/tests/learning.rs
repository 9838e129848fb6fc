mod common;

use common::{nearest_centroid_rate, synth, Logistic};
use privatexr_core::attack::{run_rda, train_shadow_ensemble, MiaConfig, RdaConfig};
use privatexr_core::data::{split, Dataset, SplitSpec, SynthConfig};
use privatexr_core::metrics::balanced_accuracy;
use privatexr_core::nn::ModelSpec;
use privatexr_core::trainer::{dataset_tensor, train_with_log, TrainConfig};

fn task(beta: f64, seed: u64) -> (Dataset, Dataset) {
    let ds = synth(SynthConfig { label_signal_strength: beta, seed, ..SynthConfig::default() });
    split(&ds, &SplitSpec::frames(0.7, seed)).unwrap()
}

fn mlp_cfg() -> TrainConfig {
    TrainConfig { epochs: 60, batch_size: 64, lr: 0.003, patience: 60, ..TrainConfig::default() }
}

#[test]
fn separable_task_is_learnable_by_the_oracle_and_the_mlp() {
    let (tr, te) = task(1.5, 1);
    let oracle = Logistic::fit(&tr, 300, 0.5).balanced_accuracy(&te);
    assert!(oracle >= 0.85, "logistic regression {oracle}");

    let spec = ModelSpec::mlp(tr.dim(), tr.class_count(), vec![64, 64]);
    let (model, _) = train_with_log(&tr, &te, &spec, &mlp_cfg()).unwrap();
    let pred = model.predict(&dataset_tensor(&te, &spec).unwrap()).unwrap();
    let ba = balanced_accuracy(&pred, &te.labels(), te.class_count()).unwrap().value;
    assert!(ba >= 0.85, "mlp {ba}");
}

#[test]
fn training_loss_mostly_decreases_under_the_default_recipe() {
    let (tr, te) = task(1.5, 1);
    let spec = ModelSpec::mlp(tr.dim(), tr.class_count(), vec![64, 64]);
    let (_, log) = train_with_log(&tr, &te, &spec, &TrainConfig::default()).unwrap();
    let losses: Vec<f64> = log.epochs.iter().map(|e| e.train_loss).collect();
    let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down as f64 >= 0.9 * (losses.len() - 1) as f64, "{losses:?}");
}

#[test]
fn label_free_task_stays_at_chance() {
    let (tr, te) = task(0.0, 2);
    let ba = Logistic::fit(&tr, 300, 0.5).balanced_accuracy(&te);
    assert!((ba - 0.25).abs() <= 0.08, "{ba}");
}

#[test]
fn reidentification_threshold_is_reachable() {
    let ds = synth(SynthConfig { user_signature_strength: 2.0, seed: 3, ..SynthConfig::default() });
    let oracle = nearest_centroid_rate(&ds, 0.5, 10, 3);
    assert!(oracle >= 0.25, "nearest centroid {oracle}");
    let rbfn = run_rda(&ds, &RdaConfig { runs: 10, ..RdaConfig::default() }, None).unwrap();
    assert!(rbfn.rate >= 0.25, "rbfn {}", rbfn.rate);
}

#[test]
fn signature_free_users_are_identified_at_chance() {
    let ds = synth(SynthConfig { user_signature_strength: 0.0, seed: 5, ..SynthConfig::default() });
    let r = run_rda(&ds, &RdaConfig::default(), None).unwrap();
    let chance = 1.0 / r.users as f64;
    let se = r.binomial_standard_error(chance);
    assert!((r.rate - chance).abs() <= 3.0 * se, "{} vs {chance} ± {se}", r.rate);
}

#[test]
fn shadows_overfit_their_members() {
    let pool = synth(SynthConfig { label_signal_strength: 0.6, seed: 6, ..SynthConfig::default() });
    let train = TrainConfig { epochs: 100, batch_size: 64, lr: 0.003, patience: 100, ..TrainConfig::default() };
    let spec = ModelSpec::mlp(pool.dim(), pool.class_count(), vec![64, 64]);
    let cfg = MiaConfig::new(2, 300, spec, train);
    let acc = |m: &privatexr_core::nn::TrainedModel, idx: &[usize]| {
        let ds = pool.subset(idx);
        let pred = m.predict(&dataset_tensor(&ds, &m.spec).unwrap()).unwrap();
        pred.iter().zip(ds.labels()).filter(|(p, t)| **p == *t).count() as f64 / ds.len() as f64
    };
    for s in train_shadow_ensemble(&pool, &cfg).unwrap() {
        let gap = acc(&s.model, &s.members) - acc(&s.model, &s.non_members);
        assert!(gap >= 0.15, "train/held-out gap {gap}");
    }
}
