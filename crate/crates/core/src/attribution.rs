//! Shapley attribution over input features and the global ranking that picks
//! which features receive input noise.
//!
//! The cooperative game: a coalition `S` keeps its features from the explained
//! sample and takes the rest from a baseline; its worth is the model's score
//! for the sample's (unmasked) predicted class.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, Tensor, TrainedModel};
use crate::rng::rng_from_seed;

/// Largest feature count handled by full coalition enumeration.
pub const MAX_EXACT_FEATURES: usize = 20;

/// Default cap on the number of samples feeding a global explanation.
pub const DEFAULT_EXPLAIN_SAMPLES: usize = 512;

/// Which scalar of the model output is explained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    /// Softmax probability of the predicted class.
    #[default]
    Probability,
    /// Raw score of the predicted class.
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ShapleyMode {
    Exact,
    Sampled { permutations: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    /// One row of φ per explained sample.
    pub per_sample_phi: Vec<Vec<f64>>,
    pub baseline: Vec<f64>,
    pub value_kind: ValueKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalImportance {
    pub mean_abs_phi: Vec<f64>,
    /// Feature indices by descending mean |φ|; ties go to the lower index.
    pub ranking: Vec<usize>,
}

/// Evaluates the game for one sample. Holds the explained class fixed.
struct Game<'a> {
    model: &'a TrainedModel,
    x: &'a [f64],
    baseline: &'a [f64],
    class: usize,
    kind: ValueKind,
}

impl<'a> Game<'a> {
    fn new(model: &'a TrainedModel, x: &'a [f64], baseline: &'a [f64], kind: ValueKind) -> Result<Self> {
        let d = model.spec.input_dim;
        if x.len() != d || baseline.len() != d {
            return Err(Error::dimension(
                format!("{d}-feature sample and baseline"),
                format!("{} and {}", x.len(), baseline.len()),
            ));
        }
        let class = predicted_class(model, x)?;
        Ok(Self {
            model,
            x,
            baseline,
            class,
            kind,
        })
    }

    fn hybrid(&self, keep: impl Fn(usize) -> bool, out: &mut Vec<f64>) {
        out.extend((0..self.x.len()).map(|j| if keep(j) { self.x[j] } else { self.baseline[j] }));
    }

    /// Worth of every row in `rows` (each a full hybrid input).
    fn values(&self, rows: Vec<f64>) -> Result<Vec<f64>> {
        let d = self.x.len();
        let n = rows.len() / d;
        let t = input_tensor(self.model, n, rows)?;
        let out = match self.kind {
            ValueKind::Probability => self.model.predict_proba(&t)?,
            ValueKind::Logit => self.model.forward(&t)?,
        };
        let k = self.model.spec.class_count;
        Ok(out.values().chunks_exact(k).map(|r| r[self.class]).collect())
    }
}

/// Rows shaped for the model (time-axis architectures see one-step sequences).
pub(crate) fn input_tensor(model: &TrainedModel, n: usize, rows: Vec<f64>) -> Result<Tensor> {
    let d = model.spec.input_dim;
    if model.spec.arch.uses_time_axis() {
        Tensor::new(vec![n, 1, d], rows)
    } else {
        Tensor::matrix(n, d, rows)
    }
}

pub fn predicted_class(model: &TrainedModel, x: &[f64]) -> Result<usize> {
    let logits = model.forward(&input_tensor(model, 1, x.to_vec())?)?;
    Ok(argmax(logits.row(0)))
}

/// Worth of coalition `subset` (feature indices) for sample `x`.
pub fn value_function(
    model: &TrainedModel,
    x: &[f64],
    baseline: &[f64],
    subset: &[usize],
    kind: ValueKind,
) -> Result<f64> {
    let game = Game::new(model, x, baseline, kind)?;
    if let Some(&j) = subset.iter().find(|&&j| j >= x.len()) {
        return Err(Error::invalid(format!("feature {j} out of range")));
    }
    let mut row = Vec::with_capacity(x.len());
    game.hybrid(|j| subset.contains(&j), &mut row);
    Ok(game.values(row)?[0])
}

/// Shapley values by enumerating all `2^d` coalitions.
pub fn exact_shapley(model: &TrainedModel, x: &[f64], baseline: &[f64], kind: ValueKind) -> Result<Vec<f64>> {
    let d = model.spec.input_dim;
    if d > MAX_EXACT_FEATURES {
        return Err(Error::invalid(format!(
            "exact Shapley enumerates 2^d coalitions; d = {d} exceeds {MAX_EXACT_FEATURES}, use sampled_shapley"
        )));
    }
    let game = Game::new(model, x, baseline, kind)?;
    let total = 1usize << d;
    let mut worth = Vec::with_capacity(total);
    const CHUNK: usize = 4096;
    for start in (0..total).step_by(CHUNK) {
        let end = (start + CHUNK).min(total);
        let mut rows = Vec::with_capacity((end - start) * d);
        for mask in start..end {
            game.hybrid(|j| mask >> j & 1 == 1, &mut rows);
        }
        worth.extend(game.values(rows)?);
    }
    // weight of a coalition of size s not containing i: s!(d−s−1)!/d! = 1/(d·C(d−1, s))
    let weights: Vec<f64> = (0..d)
        .map(|s| 1.0 / (d as f64 * binomial(d - 1, s)))
        .collect();
    let mut phi = vec![0.0; d];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for mask in (0..total).filter(|m| m & bit == 0) {
            let s = mask.count_ones() as usize;
            *p += weights[s] * (worth[mask | bit] - worth[mask]);
        }
    }
    Ok(phi)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Monte-Carlo permutation estimate. Each sampled ordering is paired with its
/// reverse, so `permutations` draws evaluate `2·permutations` orderings.
pub fn sampled_shapley(
    model: &TrainedModel,
    x: &[f64],
    baseline: &[f64],
    permutations: usize,
    seed: u64,
    kind: ValueKind,
) -> Result<Vec<f64>> {
    if permutations == 0 {
        return Err(Error::invalid("sampled_shapley needs at least one permutation"));
    }
    let game = Game::new(model, x, baseline, kind)?;
    let d = x.len();
    let mut rng = rng_from_seed(seed);
    let mut phi = vec![0.0; d];
    let mut order: Vec<usize> = (0..d).collect();
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        let reversed: Vec<usize> = order.iter().rev().copied().collect();
        let mut rows = Vec::with_capacity(2 * (d + 1) * d);
        for perm in [&order, &reversed] {
            let mut included = vec![false; d];
            game.hybrid(|_| false, &mut rows);
            for &j in perm.iter() {
                included[j] = true;
                game.hybrid(|i| included[i], &mut rows);
            }
        }
        let v = game.values(rows)?;
        for (chain, perm) in v.chunks_exact(d + 1).zip([&order, &reversed]) {
            for (step, &j) in perm.iter().enumerate() {
                phi[j] += chain[step + 1] - chain[step];
            }
        }
    }
    let draws = (2 * permutations) as f64;
    phi.iter_mut().for_each(|p| *p /= draws);
    Ok(phi)
}

/// Attributions for every row of `samples` (row-major, `n × d`).
pub fn explain_batch(
    model: &TrainedModel,
    samples: &[f64],
    baseline: &[f64],
    mode: ShapleyMode,
    kind: ValueKind,
) -> Result<AttributionReport> {
    let d = model.spec.input_dim;
    if samples.is_empty() || samples.len() % d != 0 {
        return Err(Error::invalid("explain_batch needs a non-empty n × d sample matrix"));
    }
    let per_sample_phi = samples
        .par_chunks_exact(d)
        .enumerate()
        .map(|(i, x)| match mode {
            ShapleyMode::Exact => exact_shapley(model, x, baseline, kind),
            ShapleyMode::Sampled { permutations, seed } => sampled_shapley(
                model,
                x,
                baseline,
                permutations,
                crate::rng::indexed_seed(seed, i as u64),
                kind,
            ),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttributionReport {
        per_sample_phi,
        baseline: baseline.to_vec(),
        value_kind: kind,
    })
}

impl AttributionReport {
    pub fn global_importance(&self) -> GlobalImportance {
        let d = self.baseline.len();
        let n = self.per_sample_phi.len() as f64;
        let mut mean_abs_phi = vec![0.0; d];
        for row in &self.per_sample_phi {
            for (m, p) in mean_abs_phi.iter_mut().zip(row) {
                *m += p.abs();
            }
        }
        mean_abs_phi.iter_mut().for_each(|m| *m /= n);
        let ranking = rank_descending(&mean_abs_phi);
        GlobalImportance {
            mean_abs_phi,
            ranking,
        }
    }
}

/// Indices sorted by descending score, ties by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Mean |φ| per feature over `samples` with the probability-of-predicted-class game.
pub fn global_importance(
    model: &TrainedModel,
    samples: &[f64],
    baseline: &[f64],
    mode: ShapleyMode,
) -> Result<GlobalImportance> {
    Ok(explain_batch(model, samples, baseline, mode, ValueKind::Probability)?.global_importance())
}

/// The first `ceil(d/4)` features of the ranking.
pub fn select_top_quarter(gi: &GlobalImportance, d: usize) -> Vec<usize> {
    gi.ranking.iter().take(d.div_ceil(4)).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;

    /// Logistic regression with weight matrix `w` (`d × k`, row-major) and zero bias.
    fn linear(d: usize, k: usize, w: Vec<f64>) -> TrainedModel {
        let mut params = w;
        params.extend(vec![0.0; k]);
        TrainedModel::from_params(ModelSpec::mlp(d, k, vec![]), params).unwrap()
    }

    fn mlp(d: usize, seed: u64) -> TrainedModel {
        TrainedModel::initialize(ModelSpec::mlp(d, 3, vec![6]), seed).unwrap()
    }

    #[test]
    fn value_function_endpoints() {
        let m = mlp(5, 1);
        let x = [0.5, -1.0, 2.0, 0.0, 1.5];
        let b = [0.0; 5];
        let c = predicted_class(&m, &x).unwrap();
        let full = value_function(&m, &x, &b, &[0, 1, 2, 3, 4], ValueKind::Probability).unwrap();
        let p = m.predict_proba(&Tensor::matrix(1, 5, x.to_vec()).unwrap()).unwrap();
        assert_eq!(full, p.row(0)[c]);
        let empty = value_function(&m, &x, &b, &[], ValueKind::Probability).unwrap();
        let pb = m.predict_proba(&Tensor::matrix(1, 5, b.to_vec()).unwrap()).unwrap();
        assert_eq!(empty, pb.row(0)[c]);
    }

    #[test]
    fn linear_logit_closed_form() {
        let w = vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1, 0.0, 4.0];
        let m = linear(4, 2, w.clone());
        let x = [1.0, 2.0, -3.0, 0.5];
        let b = [0.2, -0.4, 0.1, 1.0];
        let c = predicted_class(&m, &x).unwrap();
        let phi = exact_shapley(&m, &x, &b, ValueKind::Logit).unwrap();
        for i in 0..4 {
            assert!((phi[i] - w[i * 2 + c] * (x[i] - b[i])).abs() < 1e-8);
        }
    }

    #[test]
    fn exact_guard() {
        let m = TrainedModel::initialize(ModelSpec::mlp(21, 2, vec![]), 0).unwrap();
        let err = exact_shapley(&m, &[0.0; 21], &[0.0; 21], ValueKind::Probability).unwrap_err();
        assert!(err.to_string().contains("sampled_shapley"));
    }

    #[test]
    fn dummy_feature_is_exactly_zero_when_sampled() {
        let mut m = mlp(6, 4);
        // zero the first-layer row of feature 2
        for h in 0..6 {
            m.params[2 * 6 + h] = 0.0;
        }
        let x = [1.0, -0.5, 3.0, 0.2, -2.0, 0.7];
        let phi = sampled_shapley(&m, &x, &[0.0; 6], 50, 9, ValueKind::Probability).unwrap();
        assert_eq!(phi[2], 0.0);
        let again = sampled_shapley(&m, &x, &[0.0; 6], 50, 9, ValueKind::Probability).unwrap();
        assert_eq!(phi, again);
    }

    #[test]
    fn ranking_ties_and_quarter() {
        assert_eq!(rank_descending(&[0.1, 0.5, 0.5, 0.0]), vec![1, 2, 0, 3]);
        let gi = GlobalImportance {
            mean_abs_phi: vec![0.0; 12],
            ranking: (0..12).collect(),
        };
        assert_eq!(select_top_quarter(&gi, 12).len(), 3);
        assert_eq!(select_top_quarter(&gi, 8).len(), 2);
        assert_eq!(select_top_quarter(&gi, 5).len(), 2);
        assert_eq!(select_top_quarter(&gi, 1).len(), 1);
    }

    #[test]
    fn ignored_feature_ranks_last() {
        let mut m = mlp(5, 8);
        for h in 0..6 {
            m.params[4 * 6 + h] = 0.0;
        }
        let samples: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let gi = global_importance(&m, &samples, &[0.0; 5], ShapleyMode::Exact).unwrap();
        assert_eq!(gi.mean_abs_phi[4], 0.0);
        assert_eq!(*gi.ranking.last().unwrap(), 4);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn efficiency_holds(seed in 0u64..1000, xs in proptest::collection::vec(-3.0f64..3.0, 7)) {
            let m = mlp(7, seed);
            let b = vec![0.0; 7];
            let phi = exact_shapley(&m, &xs, &b, ValueKind::Probability).unwrap();
            let all: Vec<usize> = (0..7).collect();
            let full = value_function(&m, &xs, &b, &all, ValueKind::Probability).unwrap();
            let empty = value_function(&m, &xs, &b, &[], ValueKind::Probability).unwrap();
            proptest::prop_assert!((phi.iter().sum::<f64>() - (full - empty)).abs() < 1e-8);
        }

        #[test]
        fn ranking_survives_monotone_transforms(raw in proptest::collection::vec(0u32..1000, 1..16), shift in -8i32..8) {
            // eighths and powers of two keep every transform below exact
            let scores: Vec<f64> = raw.iter().map(|&r| f64::from(r) / 8.0).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| s * 2f64.powi(shift)).collect();
            let squared: Vec<f64> = scores.iter().map(|s| s * s + 1.0).collect();
            let r = rank_descending(&scores);
            proptest::prop_assert_eq!(&r, &rank_descending(&scaled));
            proptest::prop_assert_eq!(&r, &rank_descending(&squared));
        }
    }
}
