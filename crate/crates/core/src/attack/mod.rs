//! Adversaries: shadow-model membership inference and RBFN re-identification.

mod auc;
mod mia;
mod rbfn;

use serde::{Deserialize, Serialize};

pub use auc::{auc_mann_whitney, auc_trapezoid};
pub use mia::{
    attack_feature_len, attack_features, build_attack_dataset, membership_scores, mia_end_to_end, run_mia,
    train_attack_model, train_shadow_ensemble, MiaConfig, Shadow,
};
pub use rbfn::{identification_rate, run_rda, train_rbfn, RbfnConfig, RbfnModel, RdaConfig, RdaResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub balanced_accuracy: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub condition: String,
    pub mia_auc: Option<f64>,
    pub rda_identification_rate: Option<f64>,
    pub utility: Option<Utility>,
    pub runs: usize,
    pub seed: u64,
}
