use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Frame};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};

/// Multi-user generator standing in for licensed sensor datasets.
///
/// Each user carries a persistent per-feature offset (scaled by
/// `user_signature_strength`) and each class a persistent direction (scaled by
/// `label_signal_strength`). A frame is `class direction + user offset + N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub stimuli: usize,
    pub frames_per_user_stimulus: usize,
    pub dim: usize,
    pub classes: usize,
    pub user_signature_strength: f64,
    pub label_signal_strength: f64,
    /// Restricts the class direction to these features; `None` uses all of them.
    pub signal_features: Option<Vec<usize>>,
    /// Milliseconds between consecutive frames of a session.
    pub frame_interval_ms: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 20,
            stimuli: 4,
            frames_per_user_stimulus: 50,
            dim: 12,
            classes: 4,
            user_signature_strength: 1.5,
            label_signal_strength: 1.5,
            signal_features: None,
            frame_interval_ms: 100,
            seed: 0,
        }
    }
}

/// Class names for the 4-class severity task; other class counts get generic names.
pub(crate) fn default_class_names(k: usize) -> Vec<String> {
    if k == 4 {
        ["none", "low", "medium", "high"].map(String::from).to_vec()
    } else {
        (0..k).map(|c| format!("class{c}")).collect()
    }
}

fn gaussian_vec(rng: &mut StreamRng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.users < 2 || cfg.classes < 2 || cfg.dim < 4 {
        return Err(Error::config(format!(
            "synthetic generator needs users >= 2, classes >= 2, dim >= 4 (got {}, {}, {})",
            cfg.users, cfg.classes, cfg.dim
        )));
    }
    if cfg.stimuli == 0 || cfg.frames_per_user_stimulus == 0 {
        return Err(Error::config("stimuli and frames_per_user_stimulus must be positive"));
    }
    if let Some(sf) = &cfg.signal_features {
        if sf.iter().any(|&j| j >= cfg.dim) {
            return Err(Error::config("signal_features index out of range"));
        }
    }
    let d = cfg.dim;
    let mut structure = stream(cfg.seed, "synth-structure");
    let mut directions: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| gaussian_vec(&mut structure, d, cfg.label_signal_strength))
        .collect();
    if let Some(sf) = &cfg.signal_features {
        for dir in &mut directions {
            for (j, v) in dir.iter_mut().enumerate() {
                if !sf.contains(&j) {
                    *v = 0.0;
                }
            }
        }
    }
    let offsets: Vec<Vec<f64>> = (0..cfg.users)
        .map(|_| gaussian_vec(&mut structure, d, cfg.user_signature_strength))
        .collect();

    let mut noise = stream(cfg.seed, "synth-frames");
    let mut frames = Vec::with_capacity(cfg.users * cfg.stimuli * cfg.frames_per_user_stimulus);
    for (u, offset) in offsets.iter().enumerate() {
        for s in 0..cfg.stimuli {
            for t in 0..cfg.frames_per_user_stimulus {
                let label = noise.random_range(0..cfg.classes);
                let features = directions[label]
                    .iter()
                    .zip(offset)
                    .map(|(c, o)| c + o + noise.sample::<f64, _>(StandardNormal))
                    .collect();
                frames.push(Frame {
                    user_id: u as u32,
                    stimulus_id: s as u32,
                    timestamp_ms: t as u64 * cfg.frame_interval_ms,
                    features,
                    label,
                });
            }
        }
    }
    Dataset::new(
        (0..d).map(|j| format!("f{j}")).collect(),
        default_class_names(cfg.classes),
        frames,
    )
}
