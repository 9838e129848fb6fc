//! Model bundle and request handling behind the prediction service. Transport
//! lives with the binary; everything here is synchronous and immutable after
//! load, apart from the request counter that seeds per-request noise.

use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyLevel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::{prepare_data, prepare_training, select_features, Condition, ExperimentConfig, PipelineData};
use crate::nn::{argmax, Tensor, TrainedModel};
use crate::privatizer::{FeatureDpMode, FeatureDpSpec, Privatizer};
use crate::rng::{child_seed, indexed_seed, rng_from_seed, stream, streams};
use crate::trainer::{train, TrainConfig};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrivacyMode {
    Off,
    Low,
    Medium,
    High,
}

impl PrivacyMode {
    pub const ALL: [PrivacyMode; 4] = [PrivacyMode::Off, PrivacyMode::Low, PrivacyMode::Medium, PrivacyMode::High];

    pub fn level(self) -> Option<PrivacyLevel> {
        match self {
            PrivacyMode::Off => None,
            PrivacyMode::Low => Some(PrivacyLevel::Low),
            PrivacyMode::Medium => Some(PrivacyLevel::Medium),
            PrivacyMode::High => Some(PrivacyLevel::High),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PrivacyMode::Off => "off",
            PrivacyMode::Low => "low",
            PrivacyMode::Medium => "medium",
            PrivacyMode::High => "high",
        }
    }
}

impl FromStr for PrivacyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode {s:?}, expected off|low|medium|high")))
    }
}

/// One privacy level of a bundle: an optional dedicated model plus the
/// input privatization applied before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub level: PrivacyLevel,
    /// Falls back to the non-private model when absent.
    pub model: Option<TrainedModel>,
    pub feature_dp: FeatureDpSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub bundle_version: u32,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub non_private: TrainedModel,
    pub levels: Vec<LevelEntry>,
}

impl ModelBundle {
    /// Rejects bundles whose models disagree with each other or with the names.
    pub fn self_check(&self) -> Result<()> {
        if self.bundle_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::config(format!("unsupported bundle version {}", self.bundle_version)));
        }
        let (d, k) = (self.feature_names.len(), self.class_names.len());
        let models = std::iter::once(&self.non_private).chain(self.levels.iter().filter_map(|l| l.model.as_ref()));
        for m in models {
            if m.spec.input_dim != d || m.spec.class_count != k {
                return Err(Error::config(format!(
                    "model expects d={}, K={} but the bundle names d={d}, K={k}",
                    m.spec.input_dim, m.spec.class_count
                )));
            }
        }
        for level in PrivacyLevel::ALL {
            if self.levels.iter().filter(|l| l.level == level).count() != 1 {
                return Err(Error::config(format!("bundle needs exactly one {} entry", level.as_str())));
            }
        }
        for l in &self.levels {
            if l.feature_dp.level != l.level {
                return Err(Error::config("feature_dp level disagrees with its entry"));
            }
            l.feature_dp.prepare(d)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let b: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        b.self_check()?;
        Ok(b)
    }
}

/// Trains the default bundle: a non-private model for mode "off" and one DPSGD
/// model per level whose inputs also pass selective privatization.
pub fn build_bundle(cfg: &ExperimentConfig) -> Result<ModelBundle> {
    let PipelineData { data, train: train_set, val: val_set, .. } = prepare_data(cfg)?;
    let (d, k) = (data.dim(), data.class_count());

    let plain = prepare_training(&ExperimentConfig { condition: Condition::NoPrivacy, ..cfg.clone() }, d, k, train_set.len())?;
    let non_private = train(&train_set, &val_set, &plain.spec, &plain.train_cfg).map_err(|e| e.at_stage("train"))?;
    let selected = select_features(&non_private, &train_set, &cfg.explain, cfg.seed).map_err(|e| e.at_stage("explain"))?;

    let mut levels = Vec::new();
    for level in PrivacyLevel::ALL {
        let level_cfg = ExperimentConfig {
            condition: Condition::PdPm,
            xai_selective: true,
            level,
            ..cfg.clone()
        };
        let spec = cfg.feature_dp.spec(FeatureDpMode::Selective, level, selected.clone());
        let p = spec.prepare(d)?;
        let mut rng = stream(indexed_seed(cfg.seed, level as u64), streams::FEATURE_NOISE);
        let tr = p.apply_dataset(&train_set, &mut rng)?;
        let va = p.apply_dataset(&val_set, &mut rng)?;
        let prepared = prepare_training(&level_cfg, d, k, tr.len()).map_err(|e| e.at_stage("calibrate"))?;
        let model = train(&tr, &va, &prepared.spec, &prepared.train_cfg).map_err(|e| e.at_stage("train"))?;
        levels.push(LevelEntry {
            level,
            model: Some(model),
            feature_dp: spec,
        });
    }
    let bundle = ModelBundle {
        bundle_version: BUNDLE_FORMAT_VERSION,
        feature_names: data.feature_names().to_vec(),
        class_names: data.class_names().to_vec(),
        non_private,
        levels,
    };
    bundle.self_check()?;
    Ok(bundle)
}

/// A bundle reusing one non-private model at every level, the
/// "one model + three privatizers" layout.
pub fn single_model_bundle(model: TrainedModel, feature_names: Vec<String>, class_names: Vec<String>, selected: Vec<usize>) -> Result<ModelBundle> {
    let mode = if selected.is_empty() { FeatureDpMode::Full } else { FeatureDpMode::Selective };
    let levels = PrivacyLevel::ALL
        .into_iter()
        .map(|level| LevelEntry {
            level,
            model: None,
            feature_dp: FeatureDpSpec {
                mode,
                selected: selected.clone(),
                ..FeatureDpSpec::full(level)
            },
        })
        .collect();
    let b = ModelBundle {
        bundle_version: BUNDLE_FORMAT_VERSION,
        feature_names,
        class_names,
        non_private: model,
        levels,
    };
    b.self_check()?;
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "class")]
    pub class: usize,
    pub label: String,
    pub proba: Vec<f64>,
    pub epsilon: Option<f64>,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub mode: PrivacyMode,
    pub epsilon: f64,
    pub delta: f64,
    pub feature_dp: FeatureDpMode,
    pub selected_features: Vec<usize>,
    pub dedicated_model: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub specs: Vec<crate::nn::ModelSpec>,
    pub levels: Vec<LevelInfo>,
    pub modes: Vec<PrivacyMode>,
}

struct Level {
    model: Option<TrainedModel>,
    privatizer: Privatizer,
    epsilon: f64,
}

/// Read-only predictor over a checked bundle.
pub struct Predictor {
    bundle: ModelBundle,
    levels: Vec<(PrivacyLevel, Level)>,
    noise_seed: u64,
    requests: AtomicU64,
}

impl Predictor {
    pub fn new(bundle: ModelBundle, seed: u64) -> Result<Self> {
        bundle.self_check()?;
        let d = bundle.feature_names.len();
        let levels = bundle
            .levels
            .iter()
            .map(|l| {
                Ok((
                    l.level,
                    Level {
                        model: l.model.clone(),
                        privatizer: l.feature_dp.prepare(d)?,
                        epsilon: l.feature_dp.total_epsilon(),
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bundle,
            levels,
            noise_seed: child_seed(seed, streams::FEATURE_NOISE),
            requests: AtomicU64::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.bundle.feature_names.len()
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    fn level(&self, level: PrivacyLevel) -> &Level {
        &self.levels.iter().find(|(l, _)| *l == level).expect("self-checked bundle has every level").1
    }

    pub fn info(&self) -> ModelInfo {
        let mut specs = vec![self.bundle.non_private.spec.clone()];
        specs.extend(self.bundle.levels.iter().filter_map(|l| l.model.as_ref().map(|m| m.spec.clone())));
        ModelInfo {
            feature_names: self.bundle.feature_names.clone(),
            class_names: self.bundle.class_names.clone(),
            specs,
            levels: self
                .bundle
                .levels
                .iter()
                .map(|l| LevelInfo {
                    mode: match l.level {
                        PrivacyLevel::Low => PrivacyMode::Low,
                        PrivacyLevel::Medium => PrivacyMode::Medium,
                        PrivacyLevel::High => PrivacyMode::High,
                    },
                    epsilon: l.feature_dp.total_epsilon(),
                    delta: l.feature_dp.delta,
                    feature_dp: l.feature_dp.mode,
                    selected_features: self.level(l.level).privatizer.targets().to_vec(),
                    dedicated_model: l.model.is_some(),
                })
                .collect(),
            modes: PrivacyMode::ALL.to_vec(),
        }
    }

    /// Classifies one normalized feature vector under `mode`. Noise for private
    /// modes is seeded from a per-request counter.
    pub fn predict(&self, features: &[f64], mode: PrivacyMode) -> Result<Prediction> {
        let start = Instant::now();
        if features.len() != self.dim() {
            return Err(Error::dimension(self.dim(), features.len()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features must be finite"));
        }
        let (model, x, epsilon) = match mode.level() {
            None => (&self.bundle.non_private, features.to_vec(), None),
            Some(level) => {
                let l = self.level(level);
                let n = self.requests.fetch_add(1, Ordering::Relaxed);
                let x = l.privatizer.apply(features, &mut rng_from_seed(indexed_seed(self.noise_seed, n)))?;
                (l.model.as_ref().unwrap_or(&self.bundle.non_private), x, Some(l.epsilon))
            }
        };
        let shape = if model.spec.arch.uses_time_axis() { vec![1, 1, x.len()] } else { vec![1, x.len()] };
        let proba = model.predict_proba(&Tensor::new(shape, x)?)?.into_values();
        let class = argmax(&proba);
        Ok(Prediction {
            class,
            label: self.bundle.class_names[class].clone(),
            proba,
            epsilon,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    SetMode { mode: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Prediction {
        t: u64,
        #[serde(rename = "class")]
        class: usize,
        label: String,
        mode: PrivacyMode,
        epsilon: Option<f64>,
        latency_ms: f64,
    },
    ModeAck {
        mode: PrivacyMode,
    },
    Error {
        message: String,
    },
}

/// Per-connection replay state: a cursor over the frames and the active mode.
#[derive(Debug, Clone)]
pub struct StreamSession {
    cursor: usize,
    mode: PrivacyMode,
}

impl Default for StreamSession {
    fn default() -> Self {
        Self::new(PrivacyMode::Off)
    }
}

impl StreamSession {
    pub fn new(mode: PrivacyMode) -> Self {
        Self { cursor: 0, mode }
    }

    pub fn mode(&self) -> PrivacyMode {
        self.mode
    }

    /// Applies a client message; the reply is sent before the next frame.
    pub fn handle(&mut self, text: &str) -> ServerMessage {
        match serde_json::from_str::<ClientMessage>(text) {
            Ok(ClientMessage::SetMode { mode }) => match mode.parse::<PrivacyMode>() {
                Ok(m) => {
                    self.mode = m;
                    ServerMessage::ModeAck { mode: m }
                }
                Err(e) => ServerMessage::Error { message: e.to_string() },
            },
            Err(e) => ServerMessage::Error {
                message: format!("bad message: {e}"),
            },
        }
    }

    /// Predicts the next replay frame, wrapping around at the end.
    pub fn next_prediction(&mut self, predictor: &Predictor, frames: &Dataset) -> Result<ServerMessage> {
        if frames.is_empty() {
            return Err(Error::invalid("replay dataset is empty"));
        }
        let t = self.cursor as u64;
        let frame = &frames.frames()[self.cursor % frames.len()];
        self.cursor += 1;
        let p = predictor.predict(&frame.features, self.mode)?;
        Ok(ServerMessage::Prediction {
            t,
            class: p.class,
            label: p.label,
            mode: self.mode,
            epsilon: p.epsilon,
            latency_ms: p.latency_ms,
        })
    }
}

/// Default training recipe for bundles built without a config file.
pub fn default_bundle_config() -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig {
            epochs: 40,
            batch_size: 64,
            lr: 0.003,
            patience: 10,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}
