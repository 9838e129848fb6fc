//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step divergences come from the integer-order binomial series, compose
//! additively over steps, and convert to (ε, δ) by minimizing over orders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_ORDER: u32 = 2;
pub const DEFAULT_MAX_ORDER: u32 = 64;

/// Bracket searched by [`find_sigma`].
pub const SIGMA_BRACKET: (f64, f64) = (0.3, 100.0);

/// Named privacy levels. "High privacy" is the smallest budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrivacyLevel {
    Low,
    Medium,
    High,
}

impl PrivacyLevel {
    pub const ALL: [PrivacyLevel; 3] = [PrivacyLevel::Low, PrivacyLevel::Medium, PrivacyLevel::High];

    /// Total ε of the level's budget.
    pub fn epsilon(self) -> f64 {
        match self {
            PrivacyLevel::Low => 5.0,
            PrivacyLevel::Medium => 3.0,
            PrivacyLevel::High => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PrivacyLevel::Low => "low",
            PrivacyLevel::Medium => "medium",
            PrivacyLevel::High => "high",
        }
    }
}

impl std::str::FromStr for PrivacyLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(PrivacyLevel::Low),
            "medium" => Ok(PrivacyLevel::Medium),
            "high" => Ok(PrivacyLevel::High),
            other => Err(Error::invalid(format!("unknown privacy level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacySpec {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        check_delta(delta)?;
        Ok(Self { epsilon, delta })
    }

    pub fn for_level(level: PrivacyLevel, delta: f64) -> Result<Self> {
        Self::new(level.epsilon(), delta)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// Rényi divergence bound per order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<u32>,
    pub values: Vec<f64>,
}

pub fn default_orders() -> Vec<u32> {
    (DEFAULT_MIN_ORDER..=DEFAULT_MAX_ORDER).collect()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// One step of the subsampled Gaussian mechanism at integer order `alpha`:
///
/// `ε_α = ln(Σ_k C(α,k) (1−q)^(α−k) q^k exp(k(k−1)/(2σ²))) / (α−1)`,
/// summed in log space.
pub fn rdp_one_step(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("sampling rate {q} outside [0, 1]")));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("noise multiplier must be positive, got {sigma}")));
    }
    if alpha < 2 {
        return Err(Error::invalid(format!("Rényi order must be an integer >= 2, got {alpha}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let a = f64::from(alpha);
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut ln_binom = 0.0;
    let mut total = f64::NEG_INFINITY;
    for k in 0..=alpha {
        if k > 0 {
            ln_binom += (a - f64::from(k) + 1.0).ln() - f64::from(k).ln();
        }
        let kf = f64::from(k);
        let mut term = ln_binom + kf * (kf - 1.0) * inv_two_var;
        if k > 0 {
            term += kf * ln_q;
        }
        if k < alpha {
            term += (a - kf) * ln_1mq;
        }
        total = log_add(total, term);
    }
    Ok(total / (a - 1.0))
}

/// Per-step curve over `orders`.
pub fn rdp_curve(q: f64, sigma: f64, orders: &[u32]) -> Result<RdpCurve> {
    let values = orders
        .iter()
        .map(|&a| rdp_one_step(q, sigma, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(RdpCurve {
        orders: orders.to_vec(),
        values,
    })
}

/// RDP composes additively: `steps` repetitions scale every order's bound.
pub fn compose(curve: &RdpCurve, steps: u64) -> RdpCurve {
    RdpCurve {
        orders: curve.orders.clone(),
        values: curve.values.iter().map(|v| v * steps as f64).collect(),
    }
}

/// `min_α ε_α + ln(1/δ)/(α−1)` and the minimizing order (lowest on ties).
pub fn to_epsilon(curve: &RdpCurve, delta: f64) -> Result<(f64, u32)> {
    check_delta(delta)?;
    let ln_inv_delta = -delta.ln();
    curve
        .orders
        .iter()
        .zip(&curve.values)
        .map(|(&a, &v)| (v + ln_inv_delta / (f64::from(a) - 1.0), a))
        .fold(None, |best: Option<(f64, u32)>, cand| match best {
            Some(b) if b.0 <= cand.0 => Some(b),
            _ => Some(cand),
        })
        .ok_or_else(|| Error::invalid("empty RDP curve"))
}

/// ε spent after `steps` noisy steps at (q, σ).
pub fn epsilon_after(q: f64, sigma: f64, steps: u64, delta: f64, orders: &[u32]) -> Result<(f64, u32)> {
    to_epsilon(&compose(&rdp_curve(q, sigma, orders)?, steps), delta)
}

/// Bisects for the smallest noise multiplier meeting the target; the ε it
/// spends after `steps` lands in `[0.999·target, target]`. When even the bracket's lower end satisfies the
/// target, that end is returned.
pub fn find_sigma(target: &PrivacySpec, q: f64, steps: u64, orders: &[u32]) -> Result<f64> {
    let eps = |s: f64| epsilon_after(q, s, steps, target.delta, orders).map(|r| r.0);
    let (mut lo, mut hi) = SIGMA_BRACKET;
    if eps(hi)? > target.epsilon {
        return Err(Error::invalid(format!(
            "target ε = {} infeasible for σ in [{}, {}] (q = {q}, steps = {steps})",
            target.epsilon, SIGMA_BRACKET.0, SIGMA_BRACKET.1
        )));
    }
    if eps(lo)? <= target.epsilon {
        return Ok(lo);
    }
    // bisect to a tight bracket; `hi` always satisfies the budget
    while hi - lo > 1e-10 * hi {
        let mid = 0.5 * (lo + hi);
        if eps(mid)? > target.epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let spent = eps(hi)?;
    if spent < 0.999 * target.epsilon {
        return Err(Error::invalid(format!(
            "σ search stalled at ε = {spent} for target {}",
            target.epsilon
        )));
    }
    Ok(hi)
}
