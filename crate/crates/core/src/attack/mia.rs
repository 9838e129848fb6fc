//! Shadow-model membership inference.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::auc::auc_mann_whitney;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ModelSpec, Tensor, TrainedModel};
use crate::rng::{indexed_seed, rng_from_seed};
use crate::trainer::{dataset_tensor, train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaConfig {
    pub shadow_count: usize,
    /// Members per shadow; each shadow also holds out as many non-members.
    pub shadow_train_size: usize,
    /// Recipe shared with the target.
    pub shadow_spec: ModelSpec,
    pub shadow_train: TrainConfig,
    #[serde(default = "default_attack_hidden")]
    pub attack_hidden: Vec<usize>,
    #[serde(default = "default_attack_train")]
    pub attack_train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_attack_hidden() -> Vec<usize> {
    vec![32]
}

fn default_attack_train() -> TrainConfig {
    TrainConfig {
        epochs: 60,
        batch_size: 64,
        lr: 0.005,
        patience: 60,
        ..TrainConfig::default()
    }
}

impl MiaConfig {
    pub fn new(shadow_count: usize, shadow_train_size: usize, shadow_spec: ModelSpec, shadow_train: TrainConfig) -> Self {
        Self {
            shadow_count,
            shadow_train_size,
            shadow_spec,
            shadow_train,
            attack_hidden: default_attack_hidden(),
            attack_train: default_attack_train(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shadow_count < 2 {
            return Err(Error::config("MIA needs at least 2 shadow models"));
        }
        if self.shadow_train_size == 0 {
            return Err(Error::config("shadow_train_size must be positive"));
        }
        self.shadow_spec.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Shadow {
    pub model: TrainedModel,
    /// Pool indices the shadow trained on.
    pub members: Vec<usize>,
    pub non_members: Vec<usize>,
}

pub fn train_shadow_ensemble(pool: &Dataset, cfg: &MiaConfig) -> Result<Vec<Shadow>> {
    cfg.validate()?;
    let m = cfg.shadow_train_size;
    if pool.len() < 2 * m {
        return Err(Error::invalid(format!(
            "attacker pool has {} frames, shadows need {}",
            pool.len(),
            2 * m
        )));
    }
    (0..cfg.shadow_count)
        .into_par_iter()
        .map(|i| {
            let seed = indexed_seed(cfg.seed, i as u64);
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(&mut rng_from_seed(seed));
            let mut members = idx[..m].to_vec();
            let mut non_members = idx[m..2 * m].to_vec();
            members.sort_unstable();
            non_members.sort_unstable();
            let train_cfg = TrainConfig {
                seed,
                progress_log: None,
                ..cfg.shadow_train.clone()
            };
            let spec = ModelSpec { seed, ..cfg.shadow_spec.clone() };
            let model = train(&pool.subset(&members), &pool.subset(&non_members), &spec, &train_cfg)?;
            Ok(Shadow { model, members, non_members })
        })
        .collect()
}

/// Width of one attack feature row for `k` classes.
pub fn attack_feature_len(k: usize) -> usize {
    2 * k + 1
}

/// One row per frame: `[probabilities sorted descending ‖ loss ‖ one-hot label]`.
pub fn attack_features(model: &TrainedModel, ds: &Dataset) -> Result<Vec<f64>> {
    let k = model.spec.class_count;
    let proba = model.predict_proba(&dataset_tensor(ds, &model.spec)?)?;
    let mut out = Vec::with_capacity(ds.len() * attack_feature_len(k));
    for (i, y) in ds.labels().into_iter().enumerate() {
        let row = proba.row(i);
        let loss = -row[y].max(f64::MIN_POSITIVE).ln();
        let mut sorted = row.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        out.extend_from_slice(&sorted);
        out.push(loss);
        out.extend((0..k).map(|c| if c == y { 1.0 } else { 0.0 }));
    }
    Ok(out)
}

/// Attack rows and member labels, in shadow order, members before non-members.
pub fn build_attack_dataset(pool: &Dataset, shadows: &[Shadow]) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for s in shadows {
        features.extend(attack_features(&s.model, &pool.subset(&s.members))?);
        labels.extend(std::iter::repeat_n(true, s.members.len()));
        features.extend(attack_features(&s.model, &pool.subset(&s.non_members))?);
        labels.extend(std::iter::repeat_n(false, s.non_members.len()));
    }
    Ok((features, labels))
}

fn as_dataset(features: &[f64], labels: &[bool], width: usize) -> Result<Dataset> {
    use crate::data::Frame;
    let frames = features
        .chunks_exact(width)
        .zip(labels)
        .map(|(row, &l)| Frame {
            user_id: 0,
            stimulus_id: 0,
            timestamp_ms: 0,
            features: row.to_vec(),
            label: usize::from(l),
        })
        .collect();
    Dataset::new(
        (0..width).map(|j| format!("a{j}")).collect(),
        vec!["out".into(), "in".into()],
        frames,
    )
}

/// Binary member/non-member classifier over attack features.
pub fn train_attack_model(features: &[f64], labels: &[bool], k: usize, cfg: &MiaConfig) -> Result<TrainedModel> {
    let width = attack_feature_len(k);
    if features.len() != labels.len() * width {
        return Err(Error::dimension(labels.len() * width, features.len()));
    }
    let ds = as_dataset(features, labels, width)?;
    let seed = indexed_seed(cfg.seed, u64::MAX);
    let spec = ModelSpec::mlp(width, 2, cfg.attack_hidden.clone());
    let spec = ModelSpec { seed, ..spec };
    let train_cfg = TrainConfig { seed, private: None, progress_log: None, ..cfg.attack_train.clone() };
    train(&ds, &ds, &spec, &train_cfg)
}

/// Membership scores (probability of "member") for every frame of `ds`.
pub fn membership_scores(attack: &TrainedModel, target: &TrainedModel, ds: &Dataset) -> Result<Vec<f64>> {
    let feats = attack_features(target, ds)?;
    let n = ds.len();
    let proba = attack.predict_proba(&Tensor::matrix(n, attack_feature_len(target.spec.class_count), feats)?)?;
    Ok((0..n).map(|i| proba.row(i)[1]).collect())
}

/// AUC of the attack at separating `member_eval` from `nonmember_eval`.
pub fn run_mia(
    attack: &TrainedModel,
    target: &TrainedModel,
    member_eval: &Dataset,
    nonmember_eval: &Dataset,
) -> Result<f64> {
    if member_eval.is_empty() || nonmember_eval.is_empty() {
        return Err(Error::invalid("MIA evaluation needs members and non-members"));
    }
    let mut scores = membership_scores(attack, target, member_eval)?;
    scores.extend(membership_scores(attack, target, nonmember_eval)?);
    let mut labels = vec![true; member_eval.len()];
    labels.resize(member_eval.len() + nonmember_eval.len(), false);
    auc_mann_whitney(&scores, &labels)
}

/// Shadows, attack model and evaluation in one call.
pub fn mia_end_to_end(
    target: &TrainedModel,
    pool: &Dataset,
    member_eval: &Dataset,
    nonmember_eval: &Dataset,
    cfg: &MiaConfig,
) -> Result<f64> {
    let shadows = train_shadow_ensemble(pool, cfg)?;
    let (features, labels) = build_attack_dataset(pool, &shadows)?;
    let attack = train_attack_model(&features, &labels, target.spec.class_count, cfg)?;
    run_mia(&attack, target, member_eval, nonmember_eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize, synth_generate, SynthConfig};

    fn pool() -> Dataset {
        let cfg = SynthConfig {
            users: 4,
            stimuli: 2,
            frames_per_user_stimulus: 50,
            dim: 6,
            seed: 3,
            ..SynthConfig::default()
        };
        normalize(&synth_generate(&cfg).unwrap()).unwrap()
    }

    fn cfg(ds: &Dataset) -> MiaConfig {
        let train = TrainConfig { epochs: 5, batch_size: 32, lr: 0.01, patience: 5, ..TrainConfig::default() };
        MiaConfig::new(2, 150, ModelSpec::mlp(ds.dim(), ds.class_count(), vec![8]), train)
    }

    #[test]
    fn shadows_split_disjointly() {
        let ds = pool();
        let shadows = train_shadow_ensemble(&ds, &cfg(&ds)).unwrap();
        assert_eq!(shadows.len(), 2);
        for s in &shadows {
            assert_eq!((s.members.len(), s.non_members.len()), (150, 150));
            assert!(s.members.iter().all(|i| !s.non_members.contains(i)));
        }
        assert_ne!(shadows[0].members, shadows[1].members);
    }

    #[test]
    fn pool_too_small() {
        let ds = pool();
        let mut c = cfg(&ds);
        c.shadow_train_size = 201;
        assert!(train_shadow_ensemble(&ds, &c).is_err());
        c.shadow_train_size = 10;
        c.shadow_count = 1;
        assert!(train_shadow_ensemble(&ds, &c).unwrap_err().is_config());
    }

    #[test]
    fn attack_rows_have_the_documented_shape() {
        let ds = pool();
        let shadows = train_shadow_ensemble(&ds, &cfg(&ds)).unwrap();
        let (f, l) = build_attack_dataset(&ds, &shadows).unwrap();
        let k = ds.class_count();
        let w = attack_feature_len(k);
        assert_eq!(w, k + 1 + k);
        assert_eq!(f.len(), l.len() * w);
        assert_eq!(l.iter().filter(|&&b| b).count(), l.len() / 2);
        for row in f.chunks_exact(w) {
            assert!(row[..k].windows(2).all(|p| p[0] >= p[1]));
            assert!(row[k] >= 0.0);
            assert_eq!(row[k + 1..].iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn end_to_end_is_deterministic() {
        let ds = pool();
        let c = cfg(&ds);
        let target = TrainedModel::initialize(c.shadow_spec.clone(), 9).unwrap();
        let members = ds.subset(&(0..50).collect::<Vec<_>>());
        let others = ds.subset(&(350..400).collect::<Vec<_>>());
        let a = mia_end_to_end(&target, &ds, &members, &others, &c).unwrap();
        let b = mia_end_to_end(&target, &ds, &members, &others, &c).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
    }
}
