//! Non-private (mini-batch Adam) and private (DPSGD) training loops.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accountant::{default_orders, epsilon_after};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    optimizer_step, Gradients, ModelSpec, OptimizerState, PrivacySpent, Reduction,
    Tensor, TrainedModel, UpdateRule,
};
use crate::rng::{child_seed, stream, streams, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpTrainConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    /// Defaults to `1/(2n)` for a training set of `n` frames.
    #[serde(default)]
    pub target_delta: Option<f64>,
    /// Training stops before the step that would push ε past this value.
    #[serde(default)]
    pub target_epsilon: Option<f64>,
}

impl DpTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if !(self.noise_multiplier >= 0.0) {
            return Err(Error::config("noise_multiplier must be non-negative"));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::config("sampling_rate must lie in (0, 1]"));
        }
        if let Some(d) = self.target_delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::config("target_delta must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn delta_for(&self, n: usize) -> f64 {
        self.target_delta.unwrap_or(1.0 / (2.0 * n as f64))
    }

    pub fn steps_per_epoch(&self) -> u64 {
        ((1.0 / self.sampling_rate).round() as u64).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Mini-batch size of the non-private path. The private path draws Poisson lots instead.
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
    pub private: Option<DpTrainConfig>,
    /// JSON-lines file receiving one record per epoch.
    pub progress_log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 256,
            lr: 0.001,
            patience: 30,
            seed: 0,
            private: None,
            progress_log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub epsilon_spent: Option<f64>,
}

/// Diagnostics from one run, alongside the model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Largest per-example gradient norm that entered any private aggregate.
    pub max_clipped_norm: f64,
    pub steps: u64,
    pub stopped_early: bool,
}

/// Scales `grad` onto the L2 ball of radius `clip`.
pub fn clip_per_example(grad: &[f64], clip: f64) -> Vec<f64> {
    let norm = l2_norm(grad);
    let factor = if norm > clip { clip / norm } else { 1.0 };
    grad.iter().map(|g| g * factor).collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Frames shaped for the model: `n × d` for the MLP, `n × 1 × d` for the
/// time-axis architectures.
pub fn dataset_tensor(ds: &Dataset, spec: &ModelSpec) -> Result<Tensor> {
    let shape = if spec.arch.uses_time_axis() {
        vec![ds.len(), 1, ds.dim()]
    } else {
        vec![ds.len(), ds.dim()]
    };
    Tensor::new(shape, ds.feature_matrix())
}

/// Noisy aggregate of one lot, before the update rule is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivateGradient {
    /// `(Σ clip(gᵢ) + N(0, σ²C²I)) / expected_lot`
    pub direction: Vec<f64>,
    pub lot_size: usize,
    pub max_clipped_norm: f64,
}

/// Clips every per-example gradient, sums in lot order, adds one Gaussian draw
/// per parameter (in parameter order) and divides by the expected lot size.
/// An empty lot yields `None` and consumes no randomness.
pub fn private_gradient(
    model: &TrainedModel,
    lot: &Tensor,
    labels: &[usize],
    cfg: &DpTrainConfig,
    expected_lot: f64,
    rng: &mut StreamRng,
) -> Result<Option<PrivateGradient>> {
    if lot.is_empty() {
        return Ok(None);
    }
    let result = model.loss_and_grads(lot, labels, Reduction::PerExample)?;
    let Gradients::PerExample(per) = result.grads else {
        unreachable!("per-example reduction requested")
    };
    let mut sum = vec![0.0; model.params.len()];
    let mut max_norm: f64 = 0.0;
    for g in &per {
        let clipped = clip_per_example(g, cfg.clip_norm);
        let norm = l2_norm(&clipped);
        debug_assert!(norm <= cfg.clip_norm + 1e-9);
        max_norm = max_norm.max(norm);
        for (s, c) in sum.iter_mut().zip(&clipped) {
            *s += c;
        }
    }
    if cfg.noise_multiplier > 0.0 {
        let scale = cfg.noise_multiplier * cfg.clip_norm;
        for s in &mut sum {
            *s += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    sum.iter_mut().for_each(|s| *s /= expected_lot);
    Ok(Some(PrivateGradient {
        direction: sum,
        lot_size: lot.len(),
        max_clipped_norm: max_norm,
    }))
}

/// One DPSGD update with the plain SGD rule. Returns the aggregate used, or
/// `None` (parameters untouched) for an empty lot.
pub fn dpsgd_step(
    model: &mut TrainedModel,
    lot: &Tensor,
    labels: &[usize],
    cfg: &DpTrainConfig,
    expected_lot: f64,
    lr: f64,
    rng: &mut StreamRng,
) -> Result<Option<PrivateGradient>> {
    let step = private_gradient(model, lot, labels, cfg, expected_lot, rng)?;
    if let Some(s) = &step {
        optimizer_step(
            &mut model.params,
            &s.direction,
            &mut OptimizerState::default(),
            UpdateRule::Sgd { lr },
        );
    }
    Ok(step)
}

/// Poisson sampling: each position joins the lot independently with probability `q`.
pub fn poisson_lot(n: usize, q: f64, rng: &mut StreamRng) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

fn mean_loss(model: &TrainedModel, x: &Tensor, y: &[usize]) -> Result<f64> {
    if x.is_empty() {
        return Ok(f64::NAN);
    }
    // chunked so large validation sets stay flat in memory
    let mut total = 0.0;
    for start in (0..x.len()).step_by(1024) {
        let idx: Vec<usize> = (start..(start + 1024).min(x.len())).collect();
        let logits = model.forward(&x.select_rows(&idx))?;
        let k = model.spec.class_count;
        for (row, &label) in logits.values().chunks_exact(k).zip(&y[start..]) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
    }
    Ok(total / x.len() as f64)
}

fn check_spec(ds: &Dataset, spec: &ModelSpec) -> Result<()> {
    spec.validate()?;
    if ds.dim() != spec.input_dim || ds.class_count() != spec.class_count {
        return Err(Error::dimension(
            format!("d = {}, K = {}", spec.input_dim, spec.class_count),
            format!("d = {}, K = {}", ds.dim(), ds.class_count()),
        ));
    }
    Ok(())
}

pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    train_with_log(train_set, val_set, spec, cfg).map(|(m, _)| m)
}

/// Trains and also returns per-epoch diagnostics.
pub fn train_with_log(
    train_set: &Dataset,
    val_set: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainLog)> {
    check_spec(train_set, spec)?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("epochs, batch_size and lr must be positive"));
    }
    if let Some(p) = &cfg.private {
        p.validate()?;
    }
    let x = dataset_tensor(train_set, spec)?;
    let y = train_set.labels();
    let vx = dataset_tensor(val_set, spec)?;
    let vy = val_set.labels();
    let n = train_set.len();

    let mut model = TrainedModel::initialize(spec.clone(), child_seed(cfg.seed, streams::INIT))?;
    let mut order_rng = stream(cfg.seed, "training-order");
    let mut noise_rng = stream(cfg.seed, streams::TRAINING_NOISE);
    let mut log = TrainLog::default();
    let mut progress = match &cfg.progress_log {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };

    let orders = default_orders();
    let mut adam = OptimizerState::new(model.params.len());
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    let mut exhausted = false;
    let mut spent: Option<PrivacySpent> = None;
    let mut last_train_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        match &cfg.private {
            None => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut order_rng);
                for batch in order.chunks(cfg.batch_size) {
                    let bx = x.select_rows(batch);
                    let by: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
                    let r = model.loss_and_grads(&bx, &by, Reduction::Mean)?;
                    let Gradients::Mean(g) = r.grads else { unreachable!() };
                    optimizer_step(&mut model.params, &g, &mut adam, UpdateRule::adam(cfg.lr));
                    log.steps += 1;
                }
            }
            Some(dp) => {
                let delta = dp.delta_for(n);
                let expected_lot = dp.sampling_rate * n as f64;
                for _ in 0..dp.steps_per_epoch() {
                    if let Some(target) = dp.target_epsilon {
                        let next = epsilon_after(dp.sampling_rate, dp.noise_multiplier, log.steps + 1, delta, &orders)?;
                        if next.0 > target {
                            exhausted = true;
                            break;
                        }
                    }
                    let lot = poisson_lot(n, dp.sampling_rate, &mut noise_rng);
                    let lx = x.select_rows(&lot);
                    let ly: Vec<usize> = lot.iter().map(|&i| y[i]).collect();
                    if let Some(step) = dpsgd_step(&mut model, &lx, &ly, dp, expected_lot, cfg.lr, &mut noise_rng)? {
                        log.max_clipped_norm = log.max_clipped_norm.max(step.max_clipped_norm);
                    }
                    log.steps += 1;
                }
                spent = Some(privacy_spent(dp, log.steps, delta)?);
            }
        }

        let train_loss = mean_loss(&model, &x, &y)?;
        let val_loss = if vx.is_empty() { train_loss } else { mean_loss(&model, &vx, &vy)? };
        last_train_loss = train_loss;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            epsilon_spent: spent.map(|s| s.epsilon),
        };
        if let Some(w) = progress.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&record)?)?;
        }
        log.epochs.push(record);

        if exhausted {
            break;
        }
        if val_loss < best_val {
            best_val = val_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    if let Some(w) = progress.as_mut() {
        w.flush()?;
    }

    model.meta.epochs_run = log.epochs.len();
    model.meta.final_loss = last_train_loss;
    model.meta.privacy_spent = spent;
    model.meta.budget_exhausted = exhausted;
    Ok((model, log))
}

fn privacy_spent(dp: &DpTrainConfig, steps: u64, delta: f64) -> Result<PrivacySpent> {
    let (epsilon, order) = epsilon_after(dp.sampling_rate, dp.noise_multiplier, steps, delta, &default_orders())?;
    Ok(PrivacySpent {
        epsilon,
        delta,
        order,
        steps,
    })
}
