//! Experiment pipeline for the four privacy conditions, the inference
//! benchmark and the versioned report.

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::accountant::{default_orders, find_sigma, PrivacyLevel, PrivacySpec};
use crate::attack::{mia_end_to_end, run_rda, MiaConfig, RdaConfig};
use crate::attribution::{global_importance, select_top_quarter, ShapleyMode, DEFAULT_EXPLAIN_SAMPLES, MAX_EXACT_FEATURES};
use crate::data::{apply_stats, compute_stats, load_csv, synth_generate, CsvSchema, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::{balanced_accuracy, mean_accuracy};
use crate::nn::{Architecture, ModelSpec, Tensor, TrainedModel};
use crate::privatizer::{AuditRecord, FeatureDpMode, FeatureDpSpec, LevelBudgets, DEFAULT_CLAMP_BOUND, DEFAULT_FEATURE_DELTA};
use crate::rng::{child_seed, stream, streams, StreamRng};
use crate::trainer::{dataset_tensor, train, DpTrainConfig, TrainConfig};

pub const REPORT_VERSION: u32 = 1;

/// The shipped JSON Schema for [`Report`].
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Condition {
    #[default]
    #[serde(rename = "no-privacy")]
    NoPrivacy,
    /// Private data, non-private model.
    #[serde(rename = "PD+NPM")]
    PdNpm,
    /// Non-private data, private model.
    #[serde(rename = "NPD+PM")]
    NpdPm,
    #[serde(rename = "PD+PM")]
    PdPm,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::NoPrivacy, Condition::PdNpm, Condition::NpdPm, Condition::PdPm];

    pub fn private_data(self) -> bool {
        matches!(self, Condition::PdNpm | Condition::PdPm)
    }

    pub fn private_model(self) -> bool {
        matches!(self, Condition::NpdPm | Condition::PdPm)
    }

    pub fn label(self) -> &'static str {
        match self {
            Condition::NoPrivacy => "no-privacy",
            Condition::PdNpm => "PD+NPM",
            Condition::NpdPm => "NPD+PM",
            Condition::PdPm => "PD+PM",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthConfig),
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthConfig::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synth(cfg) => synth_generate(cfg),
            DataSource::Csv { path, schema } => load_csv(path, schema),
        }
    }
}

/// How the dataset is carved into target and attacker sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSettings {
    /// Share of frames held by the attacker (shadow pool).
    pub attacker_fraction: f64,
    /// Shares of the target side used for validation and testing.
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Caps the target's training set; small caps make the target overfit.
    pub target_train_size: Option<usize>,
    /// Normalize with statistics of the target training split only.
    pub normalize_on_train_only: bool,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            attacker_fraction: 0.5,
            val_fraction: 0.2,
            test_fraction: 0.2,
            target_train_size: None,
            normalize_on_train_only: false,
        }
    }
}

/// DPSGD parameters of the private-model conditions. σ is solved from the level's ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpSettings {
    pub clip_norm: f64,
    pub lot_size: usize,
    /// Learning rate of the private path's SGD rule.
    pub lr: f64,
    /// Defaults to 1/(2n).
    pub delta: Option<f64>,
}

impl Default for DpSettings {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            lot_size: 64,
            lr: 0.1,
            delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureDpSettings {
    pub budgets: LevelBudgets,
    pub delta: f64,
    pub clamp_bound: f64,
}

impl Default for FeatureDpSettings {
    fn default() -> Self {
        Self {
            budgets: LevelBudgets::default(),
            delta: DEFAULT_FEATURE_DELTA,
            clamp_bound: DEFAULT_CLAMP_BOUND,
        }
    }
}

impl FeatureDpSettings {
    pub fn spec(&self, mode: FeatureDpMode, level: PrivacyLevel, selected: Vec<usize>) -> FeatureDpSpec {
        FeatureDpSpec {
            mode,
            selected,
            level,
            budgets: self.budgets,
            delta: self.delta,
            clamp_bound: self.clamp_bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainSettings {
    /// Defaults to min(512, n_train).
    pub samples: Option<usize>,
    /// Defaults to exact enumeration when d ≤ 20.
    pub mode: Option<ShapleyMode>,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        Self { samples: None, mode: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiaSettings {
    pub enabled: bool,
    pub shadow_count: usize,
    /// Members (and non-members) per shadow; defaults to the target's training size.
    pub shadow_train_size: Option<usize>,
    /// Members (and non-members) scored against the target.
    pub eval_size: usize,
    pub attack_hidden: Vec<usize>,
    pub attack_train: Option<TrainConfig>,
}

impl Default for MiaSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            shadow_count: 4,
            shadow_train_size: None,
            eval_size: 200,
            attack_hidden: vec![32],
            attack_train: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub enabled: bool,
    pub samples: usize,
    pub repetitions: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            samples: 1000,
            repetitions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(flatten)]
    pub model: Architecture,
    pub train: TrainConfig,
    pub condition: Condition,
    pub xai_selective: bool,
    pub level: PrivacyLevel,
    pub seed: u64,
    pub split: SplitSettings,
    pub dp: DpSettings,
    pub feature_dp: FeatureDpSettings,
    pub explain: ExplainSettings,
    pub mia: MiaSettings,
    /// `None` skips the re-identification attack.
    pub rda: Option<RdaConfig>,
    pub bench: BenchSettings,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            model: Architecture::Mlp { hidden: vec![64, 64] },
            train: TrainConfig::default(),
            condition: Condition::NoPrivacy,
            xai_selective: false,
            level: PrivacyLevel::High,
            seed: 0,
            split: SplitSettings::default(),
            dp: DpSettings::default(),
            feature_dp: FeatureDpSettings::default(),
            explain: ExplainSettings::default(),
            mia: MiaSettings::default(),
            rda: Some(RdaConfig::default()),
            bench: BenchSettings::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.xai_selective && !self.condition.private_data() {
            return Err(Error::config("xai_selective requires a private-data condition"));
        }
        let s = &self.split;
        let fractions_ok = (0.0..1.0).contains(&s.attacker_fraction)
            && s.val_fraction > 0.0
            && s.test_fraction > 0.0
            && s.val_fraction + s.test_fraction < 1.0;
        if !fractions_ok {
            return Err(Error::config("split fractions must leave room for train, validation and test"));
        }
        if self.mia.enabled && (self.mia.shadow_count < 2 || self.mia.eval_size == 0) {
            return Err(Error::config("MIA needs shadow_count ≥ 2 and eval_size ≥ 1"));
        }
        if self.bench.enabled && (self.bench.samples < 1000 || self.bench.repetitions == 0) {
            return Err(Error::config("bench needs at least 1000 samples and one repetition"));
        }
        Ok(())
    }

    pub fn condition_label(&self) -> String {
        if self.xai_selective {
            format!("{}+xai-selective", self.condition.label())
        } else {
            self.condition.label().to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSpent {
    pub epsilon: f64,
    pub delta: f64,
    pub order: u32,
    pub steps: u64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub no_dp: f64,
    pub full_dp: f64,
    pub selective_dp: f64,
    pub selective_over_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix_ms: u128,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_version: u32,
    pub version: String,
    pub condition: String,
    pub level: PrivacyLevel,
    pub balanced_accuracy: f64,
    pub mean_accuracy: f64,
    pub zero_support_classes: Vec<usize>,
    pub mia_auc: Option<f64>,
    pub rda_rate: Option<f64>,
    pub epsilon_spent: Option<EpsilonSpent>,
    pub delta: Option<f64>,
    pub selected_features: Vec<usize>,
    pub feature_dp: Option<AuditRecord>,
    pub train_frames: usize,
    pub test_frames: usize,
    pub inference_ms_per_sample: Option<LatencyReport>,
    pub config: ExperimentConfig,
    pub wall_clock: WallClock,
}

impl Report {
    /// Fields measured from the clock, excluded when comparing runs.
    pub const WALL_CLOCK_FIELDS: [&'static str; 2] = ["wall_clock", "inference_ms_per_sample"];

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The report as JSON with the wall-clock fields removed.
    pub fn deterministic_view(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            for k in Self::WALL_CLOCK_FIELDS {
                obj.remove(k);
            }
        }
        Ok(v)
    }
}

/// Index partition of one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub pool: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn partition(n: usize, split: &SplitSettings, seed: u64) -> Result<Partition> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, streams::DATA));
    let n_pool = (split.attacker_fraction * n as f64).round() as usize;
    let target = &idx[n_pool..];
    let m = target.len();
    let n_test = (split.test_fraction * m as f64).round() as usize;
    let n_val = (split.val_fraction * m as f64).round() as usize;
    if n_test == 0 || n_val == 0 || n_test + n_val >= m {
        return Err(Error::invalid(format!("{n} frames are too few for the configured split")));
    }
    let mut train = target[n_test + n_val..].to_vec();
    if let Some(cap) = split.target_train_size {
        train.truncate(cap.max(1));
    }
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Partition {
        pool: sorted(&idx[..n_pool]),
        train: sorted(&train),
        val: sorted(&target[n_test..n_test + n_val]),
        test: sorted(&target[..n_test]),
    })
}

fn explain_rows(ds: &Dataset, settings: &ExplainSettings) -> Vec<f64> {
    let n = settings.samples.unwrap_or(DEFAULT_EXPLAIN_SAMPLES).min(ds.len());
    ds.subset(&(0..n).collect::<Vec<_>>()).feature_matrix()
}

/// Top-quarter features of a model by mean |φ| over (a prefix of) `ds`.
pub fn select_features(model: &TrainedModel, ds: &Dataset, settings: &ExplainSettings, seed: u64) -> Result<Vec<usize>> {
    let d = ds.dim();
    let mode = settings.mode.clone().unwrap_or(if d <= MAX_EXACT_FEATURES {
        ShapleyMode::Exact
    } else {
        ShapleyMode::Sampled { permutations: 64, seed }
    });
    let gi = global_importance(model, &explain_rows(ds, settings), &vec![0.0; d], mode)?;
    Ok(select_top_quarter(&gi, d))
}

fn utility(model: &TrainedModel, test: &Dataset) -> Result<(f64, f64, Vec<usize>)> {
    let pred = model.predict(&dataset_tensor(test, &model.spec)?)?;
    let labels = test.labels();
    let ba = balanced_accuracy(&pred, &labels, test.class_count())?;
    let ma = mean_accuracy(&pred, &labels, test.class_count())?;
    Ok((ba.value, ma, ba.zero_support_classes))
}

pub(crate) struct Prepared {
    pub(crate) spec: ModelSpec,
    pub(crate) train_cfg: TrainConfig,
    pub(crate) dp: Option<DpTrainConfig>,
}

pub(crate) fn prepare_training(cfg: &ExperimentConfig, d: usize, k: usize, n_train: usize) -> Result<Prepared> {
    let spec = ModelSpec {
        input_dim: d,
        class_count: k,
        arch: cfg.model.clone(),
        seed: child_seed(cfg.seed, streams::INIT),
    };
    spec.validate()?;
    let mut train_cfg = TrainConfig {
        seed: cfg.seed,
        private: None,
        ..cfg.train.clone()
    };
    let mut dp = None;
    if cfg.condition.private_model() {
        let q = (cfg.dp.lot_size as f64 / n_train as f64).min(1.0);
        let delta = cfg.dp.delta.unwrap_or(1.0 / (2.0 * n_train as f64));
        let epsilon = cfg.feature_dp.budgets.epsilon(cfg.level);
        let mut p = DpTrainConfig {
            clip_norm: cfg.dp.clip_norm,
            noise_multiplier: 1.0,
            sampling_rate: q,
            target_delta: Some(delta),
            target_epsilon: Some(epsilon),
        };
        let steps = p.steps_per_epoch() * train_cfg.epochs as u64;
        p.noise_multiplier = find_sigma(&PrivacySpec::new(epsilon, delta)?, q, steps, &default_orders())?;
        train_cfg.lr = cfg.dp.lr;
        train_cfg.private = Some(p.clone());
        dp = Some(p);
    }
    Ok(Prepared { spec, train_cfg, dp })
}

/// The normalized dataset and its target/attacker splits.
#[derive(Debug, Clone)]
pub struct PipelineData {
    pub data: Dataset,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub pool: Dataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PipelineData> {
    let stage = |e: Error| e.at_stage("data");
    let raw = cfg.data.load().map_err(stage)?;
    let parts = partition(raw.len(), &cfg.split, cfg.seed).map_err(stage)?;
    let stats = if cfg.split.normalize_on_train_only {
        compute_stats(&raw.subset(&parts.train))
    } else {
        compute_stats(&raw)
    };
    let data = apply_stats(&raw, &stats).map_err(stage)?;
    Ok(PipelineData {
        train: data.subset(&parts.train),
        val: data.subset(&parts.val),
        test: data.subset(&parts.test),
        pool: data.subset(&parts.pool),
        data,
    })
}

/// Trains the target model of `cfg.condition`, privatizing its training data
/// with full-feature noise when the condition has private data.
pub fn train_target(cfg: &ExperimentConfig, data: &PipelineData) -> Result<TrainedModel> {
    let (d, k) = (data.data.dim(), data.data.class_count());
    let prepared = prepare_training(cfg, d, k, data.train.len()).map_err(|e| e.at_stage("calibrate"))?;
    let (train_set, val_set) = if cfg.condition.private_data() {
        let p = cfg.feature_dp.spec(FeatureDpMode::Full, cfg.level, Vec::new()).prepare(d)?;
        let mut rng = stream(cfg.seed, streams::FEATURE_NOISE);
        (p.apply_dataset(&data.train, &mut rng)?, p.apply_dataset(&data.val, &mut rng)?)
    } else {
        (data.train.clone(), data.val.clone())
    };
    train(&train_set, &val_set, &prepared.spec, &prepared.train_cfg).map_err(|e| e.at_stage("train"))
}

/// Runs one condition end to end.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Report> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let clock = Instant::now();
    cfg.validate()?;
    let PipelineData {
        data,
        train: train_raw,
        val: val_raw,
        test: test_raw,
        pool: pool_raw,
    } = prepare_data(cfg)?;
    let (d, k) = (data.dim(), data.class_count());

    let prepared = prepare_training(cfg, d, k, train_raw.len()).map_err(|e| e.at_stage("calibrate"))?;

    // The explanation model sees raw data and is never private.
    let needs_selection = cfg.xai_selective || cfg.bench.enabled;
    let mut reference: Option<TrainedModel> = None;
    let selected = if needs_selection {
        let plain = TrainConfig { private: None, ..prepared.train_cfg.clone() };
        let plain = TrainConfig { lr: cfg.train.lr, ..plain };
        let model = train(&train_raw, &val_raw, &prepared.spec, &plain).map_err(|e| e.at_stage("explain"))?;
        let sel = select_features(&model, &train_raw, &cfg.explain, cfg.seed).map_err(|e| e.at_stage("explain"))?;
        reference = Some(model);
        sel
    } else {
        Vec::new()
    };

    let feature_spec = if cfg.condition.private_data() {
        let mode = if cfg.xai_selective { FeatureDpMode::Selective } else { FeatureDpMode::Full };
        let sel = if cfg.xai_selective { selected.clone() } else { Vec::new() };
        Some(cfg.feature_dp.spec(mode, cfg.level, sel))
    } else {
        None
    };
    let privatizer = feature_spec.as_ref().map(|s| s.prepare(d)).transpose().map_err(|e| e.at_stage("privatize"))?;
    let (train_set, val_set, test_set) = match &privatizer {
        Some(p) => {
            let mut rng = stream(cfg.seed, streams::FEATURE_NOISE);
            let go = |ds: &Dataset, rng: &mut StreamRng| p.apply_dataset(ds, rng).map_err(|e| e.at_stage("privatize"));
            (go(&train_raw, &mut rng)?, go(&val_raw, &mut rng)?, go(&test_raw, &mut rng)?)
        }
        None => (train_raw.clone(), val_raw.clone(), test_raw.clone()),
    };

    let model = match (&reference, cfg.condition) {
        (Some(m), Condition::NoPrivacy) => m.clone(),
        _ => train(&train_set, &val_set, &prepared.spec, &prepared.train_cfg).map_err(|e| e.at_stage("train"))?,
    };
    let epsilon_spent = match (&prepared.dp, &model.meta.privacy_spent) {
        (Some(dp), Some(spent)) => Some(EpsilonSpent {
            epsilon: spent.epsilon,
            delta: spent.delta,
            order: spent.order,
            steps: spent.steps,
            noise_multiplier: dp.noise_multiplier,
            sampling_rate: dp.sampling_rate,
            budget_exhausted: model.meta.budget_exhausted,
        }),
        _ => None,
    };

    let (ba, ma, zero_support) = utility(&model, &test_set).map_err(|e| e.at_stage("evaluate"))?;

    let mia_auc = if cfg.mia.enabled {
        Some(run_mia_stage(cfg, &model, &prepared, &train_set, &test_set, &pool_raw, privatizer.as_ref()).map_err(|e| e.at_stage("mia"))?)
    } else {
        None
    };

    let rda_rate = match &cfg.rda {
        Some(rda) => {
            let rda = RdaConfig { seed: child_seed(cfg.seed, streams::ATTACKS), ..rda.clone() };
            Some(run_rda(&data, &rda, privatizer.as_ref()).map_err(|e| e.at_stage("rda"))?.rate)
        }
        None => None,
    };

    let inference_ms_per_sample = if cfg.bench.enabled {
        let rows: Vec<f64> = data.feature_matrix().iter().copied().cycle().take(cfg.bench.samples.max(data.len()) * d).collect();
        let specs = [
            cfg.feature_dp.spec(FeatureDpMode::Off, cfg.level, Vec::new()),
            cfg.feature_dp.spec(FeatureDpMode::Full, cfg.level, Vec::new()),
            cfg.feature_dp.spec(FeatureDpMode::Selective, cfg.level, selected.clone()),
        ];
        let b = bench_inference(&model, &rows, &specs, cfg.bench.repetitions, cfg.seed).map_err(|e| e.at_stage("bench"))?;
        Some(LatencyReport {
            no_dp: b.medians[0],
            full_dp: b.medians[1],
            selective_dp: b.medians[2],
            selective_over_full: b.medians[2] / b.medians[1],
        })
    } else {
        None
    };

    let report = Report {
        report_version: REPORT_VERSION,
        version: env!("CARGO_PKG_VERSION").to_string(),
        condition: cfg.condition_label(),
        level: cfg.level,
        balanced_accuracy: ba,
        mean_accuracy: ma,
        zero_support_classes: zero_support,
        mia_auc,
        rda_rate,
        delta: epsilon_spent.as_ref().map(|e| e.delta),
        epsilon_spent,
        selected_features: selected,
        feature_dp: privatizer.as_ref().map(|p| p.audit()),
        train_frames: train_set.len(),
        test_frames: test_set.len(),
        inference_ms_per_sample,
        config: cfg.clone(),
        wall_clock: WallClock {
            started_unix_ms: started,
            elapsed_ms: clock.elapsed().as_secs_f64() * 1e3,
        },
    };
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), report.to_json()?)?;
    }
    Ok(report)
}

fn run_mia_stage(
    cfg: &ExperimentConfig,
    target: &TrainedModel,
    prepared: &Prepared,
    train_set: &Dataset,
    test_set: &Dataset,
    pool_raw: &Dataset,
    privatizer: Option<&crate::privatizer::Privatizer>,
) -> Result<f64> {
    let attack_seed = child_seed(cfg.seed, streams::ATTACKS);
    // the attacker mirrors the full recipe, data privatization included
    let pool = match privatizer {
        Some(p) => p.apply_dataset(pool_raw, &mut stream(attack_seed, streams::FEATURE_NOISE))?,
        None => pool_raw.clone(),
    };
    let m = cfg.mia.eval_size.min(train_set.len()).min(test_set.len());
    let members = train_set.subset(&(0..m).collect::<Vec<_>>());
    let non_members = test_set.subset(&(0..m).collect::<Vec<_>>());
    let shadow_size = cfg.mia.shadow_train_size.unwrap_or(train_set.len()).min(pool.len() / 2);
    let mut mia = MiaConfig::new(cfg.mia.shadow_count, shadow_size, prepared.spec.clone(), prepared.train_cfg.clone());
    mia.attack_hidden = cfg.mia.attack_hidden.clone();
    if let Some(t) = &cfg.mia.attack_train {
        mia.attack_train = t.clone();
    }
    mia.seed = attack_seed;
    if let Some(dp) = &mut mia.shadow_train.private {
        // shadows of a private target are calibrated to their own training size
        let q = (cfg.dp.lot_size as f64 / shadow_size as f64).min(1.0);
        let delta = 1.0 / (2.0 * shadow_size as f64);
        let eps = dp.target_epsilon.unwrap_or(cfg.feature_dp.budgets.epsilon(cfg.level));
        let steps = (1.0 / q).round().max(1.0) as u64 * mia.shadow_train.epochs as u64;
        dp.sampling_rate = q;
        dp.target_delta = Some(delta);
        dp.noise_multiplier = find_sigma(&PrivacySpec::new(eps, delta)?, q, steps, &default_orders())?;
    }
    mia_end_to_end(target, &pool, &members, &non_members, &mia)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    /// Median milliseconds per sample, one per spec.
    pub medians: Vec<f64>,
    /// Every repetition's milliseconds per sample, one list per spec.
    pub repetitions: Vec<Vec<f64>>,
}

/// Times privatize + forward per sample for each spec. Each repetition reports
/// its median per-sample time, so preemption spikes do not land on one spec;
/// the result is the median over `repetitions` passes after one warm-up pass.
/// Specs are interleaved sample by sample so slow drift hits them alike.
pub fn bench_inference(
    model: &TrainedModel,
    rows: &[f64],
    specs: &[FeatureDpSpec],
    repetitions: usize,
    seed: u64,
) -> Result<BenchResult> {
    let d = model.spec.input_dim;
    if rows.len() % d != 0 || rows.len() / d < 1000 {
        return Err(Error::invalid("bench needs at least 1000 samples of the model's width"));
    }
    if repetitions == 0 {
        return Err(Error::config("bench needs at least one repetition"));
    }
    let n = rows.len() / d;
    let privatizers = specs.iter().map(|s| s.prepare(d)).collect::<Result<Vec<_>>>()?;
    let shape = if model.spec.arch.uses_time_axis() { vec![1, 1, d] } else { vec![1, d] };
    let one = |p: &crate::privatizer::Privatizer, row: &[f64], rng: &mut StreamRng| -> Result<std::time::Duration> {
        let start = Instant::now();
        let x = p.apply(row, rng)?;
        std::hint::black_box(model.forward(&Tensor::new(shape.clone(), x)?)?);
        Ok(start.elapsed())
    };
    let mut rng = stream(seed, streams::FEATURE_NOISE);
    let s = specs.len();
    let mut reps = vec![Vec::with_capacity(repetitions); s];
    // one warm-up pass, then the timed repetitions
    for r in 0..=repetitions {
        let mut times = vec![Vec::with_capacity(n); s];
        for (j, row) in rows.chunks_exact(d).enumerate() {
            // rotating the spec order per sample spreads drift evenly
            for i in 0..s {
                let k = (i + j + r) % s;
                times[k].push(one(&privatizers[k], row, &mut rng)?.as_secs_f64() * 1e3);
            }
        }
        if r > 0 {
            for k in 0..s {
                reps[k].push(median(&mut times[k]));
            }
        }
    }
    let medians = reps.iter().map(|v| median(&mut v.clone())).collect();
    Ok(BenchResult { medians, repetitions: reps })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
