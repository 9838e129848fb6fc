//! Input-level Gaussian noise on either every feature or a selected subset.
//!
//! Targeted features are clamped to `[−B, B]`, which bounds the per-feature
//! sensitivity at `2B`. The level's (ε, δ) budget is split uniformly over the
//! targeted features and each receives analytic-Gaussian noise calibrated to
//! its share.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::accountant::PrivacyLevel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const DEFAULT_CLAMP_BOUND: f64 = 3.0;
pub const DEFAULT_FEATURE_DELTA: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureDpMode {
    #[default]
    Off,
    Full,
    Selective,
}

/// Total ε granted to each named level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelBudgets {
    pub low: f64,
    pub medium: f64,
    pub high: f64,
}

impl Default for LevelBudgets {
    fn default() -> Self {
        Self {
            low: PrivacyLevel::Low.epsilon(),
            medium: PrivacyLevel::Medium.epsilon(),
            high: PrivacyLevel::High.epsilon(),
        }
    }
}

impl LevelBudgets {
    pub fn epsilon(&self, level: PrivacyLevel) -> f64 {
        match level {
            PrivacyLevel::Low => self.low,
            PrivacyLevel::Medium => self.medium,
            PrivacyLevel::High => self.high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDpSpec {
    pub mode: FeatureDpMode,
    /// Targeted features in selective mode.
    #[serde(default)]
    pub selected: Vec<usize>,
    pub level: PrivacyLevel,
    #[serde(default)]
    pub budgets: LevelBudgets,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_clamp")]
    pub clamp_bound: f64,
}

fn default_delta() -> f64 {
    DEFAULT_FEATURE_DELTA
}

fn default_clamp() -> f64 {
    DEFAULT_CLAMP_BOUND
}

impl FeatureDpSpec {
    pub fn off() -> Self {
        Self {
            mode: FeatureDpMode::Off,
            selected: Vec::new(),
            level: PrivacyLevel::High,
            budgets: LevelBudgets::default(),
            delta: DEFAULT_FEATURE_DELTA,
            clamp_bound: DEFAULT_CLAMP_BOUND,
        }
    }

    pub fn full(level: PrivacyLevel) -> Self {
        Self {
            mode: FeatureDpMode::Full,
            level,
            ..Self::off()
        }
    }

    pub fn selective(level: PrivacyLevel, selected: Vec<usize>) -> Self {
        Self {
            mode: FeatureDpMode::Selective,
            selected,
            level,
            ..Self::off()
        }
    }

    pub fn total_epsilon(&self) -> f64 {
        self.budgets.epsilon(self.level)
    }

    /// Validates against a feature count and precomputes the noise scale.
    pub fn prepare(&self, d: usize) -> Result<Privatizer> {
        let targets: Vec<usize> = match self.mode {
            FeatureDpMode::Off => Vec::new(),
            FeatureDpMode::Full => (0..d).collect(),
            FeatureDpMode::Selective => {
                if self.selected.is_empty() {
                    return Err(Error::invalid("selective mode needs a non-empty feature selection"));
                }
                let mut s = self.selected.clone();
                s.sort_unstable();
                s.dedup();
                if let Some(&j) = s.iter().find(|&&j| j >= d) {
                    return Err(Error::invalid(format!("selected feature {j} out of range for d = {d}")));
                }
                s
            }
        };
        let (epsilon_shares, delta_share, sigma) = if targets.is_empty() {
            (Vec::new(), 0.0, 0.0)
        } else {
            let eps = self.total_epsilon();
            if !(eps > 0.0) || !(self.delta > 0.0 && self.delta < 1.0) || !(self.clamp_bound > 0.0) {
                return Err(Error::invalid("feature DP needs ε > 0, δ in (0, 1) and B > 0"));
            }
            let shares = split_budget(eps, targets.len());
            let smallest = shares.iter().copied().fold(f64::INFINITY, f64::min);
            let dl = self.delta / targets.len() as f64;
            let sigma = calibrate_sigma(smallest, dl, 2.0 * self.clamp_bound)?;
            (shares, dl, sigma)
        };
        Ok(Privatizer {
            mode: self.mode,
            dim: d,
            targets,
            clamp_bound: self.clamp_bound,
            epsilon_shares,
            delta_share,
            sigma,
        })
    }
}

/// A validated spec with its noise scale resolved for a fixed feature count.
#[derive(Debug, Clone, PartialEq)]
pub struct Privatizer {
    mode: FeatureDpMode,
    dim: usize,
    targets: Vec<usize>,
    clamp_bound: f64,
    epsilon_shares: Vec<f64>,
    delta_share: f64,
    sigma: f64,
}

/// What a privatization pass did, for audit logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub mode: FeatureDpMode,
    pub selected: Vec<usize>,
    pub per_feature_epsilon: Vec<f64>,
    pub per_feature_delta: f64,
    pub sigma_feature: f64,
    #[serde(rename = "B")]
    pub clamp_bound: f64,
}

impl Privatizer {
    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// ε assigned to each targeted feature.
    pub fn per_feature_epsilon(&self) -> &[f64] {
        &self.epsilon_shares
    }

    pub fn audit(&self) -> AuditRecord {
        AuditRecord {
            mode: self.mode,
            selected: self.targets.clone(),
            per_feature_epsilon: self.epsilon_shares.clone(),
            per_feature_delta: self.delta_share,
            sigma_feature: self.sigma,
            clamp_bound: self.clamp_bound,
        }
    }

    /// Noised copy of one feature vector. Untargeted coordinates are copied bitwise.
    pub fn apply(&self, x: &[f64], rng: &mut StreamRng) -> Result<Vec<f64>> {
        let mut out = x.to_vec();
        self.apply_in_place(&mut out, rng)?;
        Ok(out)
    }

    pub fn apply_in_place(&self, x: &mut [f64], rng: &mut StreamRng) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::dimension(self.dim, x.len()));
        }
        let b = self.clamp_bound;
        for &j in &self.targets {
            x[j] = x[j].clamp(-b, b) + self.sigma * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(())
    }

    /// Row-wise [`Privatizer::apply`] over a row-major `n × d` matrix, consuming
    /// `rng` row by row.
    pub fn apply_batch(&self, rows: &[f64], rng: &mut StreamRng) -> Result<Vec<f64>> {
        if rows.len() % self.dim != 0 {
            return Err(Error::dimension(format!("multiple of {}", self.dim), rows.len()));
        }
        let mut out = rows.to_vec();
        for row in out.chunks_exact_mut(self.dim) {
            self.apply_in_place(row, rng)?;
        }
        Ok(out)
    }

    pub fn apply_dataset(&self, ds: &Dataset, rng: &mut StreamRng) -> Result<Dataset> {
        ds.with_feature_matrix(&self.apply_batch(&ds.feature_matrix(), rng)?)
    }
}

/// `k` near-equal shares of `total` whose left-to-right sum is exactly `total`.
/// The last share absorbs the rounding residue, and that subtraction is exact
/// because the partial sum lies within a factor of two of `total`.
pub fn split_budget(total: f64, k: usize) -> Vec<f64> {
    if k == 0 {
        return Vec::new();
    }
    let mut shares = vec![total / k as f64; k];
    let head: f64 = shares[..k - 1].iter().sum();
    shares[k - 1] = total - head;
    shares
}

pub fn privatize(x: &[f64], spec: &FeatureDpSpec, rng: &mut StreamRng) -> Result<Vec<f64>> {
    spec.prepare(x.len())?.apply(x, rng)
}

pub fn privatize_batch(rows: &[f64], d: usize, spec: &FeatureDpSpec, rng: &mut StreamRng) -> Result<Vec<f64>> {
    spec.prepare(d)?.apply_batch(rows, rng)
}

/// ln Φ(x), accurate far into the lower tail.
fn ln_normal_cdf(x: f64) -> f64 {
    if x > -30.0 {
        (0.5 * erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        // Φ(x) ~ φ(x)/|x| · (1 − 1/x² + 3/x⁴ − 15/x⁶)
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + series.ln()
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// The δ achieved by Gaussian noise of scale `sigma` at privacy `epsilon` for
/// sensitivity `sensitivity`:
/// `Φ(Δ/(2σ) − εσ/Δ) − e^ε Φ(−Δ/(2σ) − εσ/Δ)`.
pub fn gaussian_delta(sigma: f64, epsilon: f64, sensitivity: f64) -> f64 {
    let a = sensitivity / (2.0 * sigma);
    let b = epsilon * sigma / sensitivity;
    normal_cdf(a - b) - (epsilon + ln_normal_cdf(-a - b)).exp()
}

/// Smallest σ (relative tolerance 1e-9) whose [`gaussian_delta`] is at most `delta`.
pub fn calibrate_sigma(epsilon: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::invalid(format!("sensitivity must be positive, got {sensitivity}")));
    }
    let ok = |s: f64| gaussian_delta(s, epsilon, sensitivity) <= delta;
    let mut hi = sensitivity;
    while !ok(hi) {
        hi *= 2.0;
    }
    let mut lo = hi;
    while ok(lo) {
        lo *= 0.5;
        if lo < f64::MIN_POSITIVE {
            return Ok(hi);
        }
    }
    while hi - lo > 1e-9 * hi {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
