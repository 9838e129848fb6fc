//! Radial-basis-function network identifying users, and the re-identification
//! attack built on it.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::nn::argmax;
use crate::privatizer::Privatizer;
use crate::rng::{indexed_seed, rng_from_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RbfnConfig {
    pub centers_per_user: usize,
    pub kmeans_iterations: usize,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for RbfnConfig {
    fn default() -> Self {
        Self {
            centers_per_user: 4,
            kmeans_iterations: 20,
            ridge: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfnModel {
    pub dim: usize,
    /// Row-major `M × d`.
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    /// Row-major `M × U`.
    pub weights: Vec<f64>,
    /// Identity of each output column.
    pub users: Vec<u32>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans(points: &[&[f64]], k: usize, iterations: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = sample(&mut rng_from_seed(seed), points.len(), k)
        .into_iter()
        .map(|i| points[i].to_vec())
        .collect();
    let d = points[0].len();
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let c = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap_or(0);
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous center
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centers
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl RbfnModel {
    pub fn center_count(&self) -> usize {
        self.widths.len()
    }

    fn activations(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (c, w) in self.centers.chunks_exact(self.dim).zip(&self.widths) {
            out.push((-sq_dist(x, c) / (2.0 * w * w)).exp());
        }
    }

    /// Identity probabilities for a row-major `n × d` matrix, one row of `U` per sample.
    pub fn predict_proba(&self, rows: &[f64]) -> Result<Vec<Vec<f64>>> {
        if rows.len() % self.dim != 0 {
            return Err(Error::dimension(format!("multiple of {}", self.dim), rows.len()));
        }
        let u = self.users.len();
        let mut phi = Vec::with_capacity(self.center_count());
        Ok(rows
            .chunks_exact(self.dim)
            .map(|x| {
                self.activations(x, &mut phi);
                let mut z = vec![0.0; u];
                for (a, w) in phi.iter().zip(self.weights.chunks_exact(u)) {
                    for (zj, wj) in z.iter_mut().zip(w) {
                        *zj += a * wj;
                    }
                }
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in z.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                z.iter_mut().for_each(|v| *v /= s);
                z
            })
            .collect())
    }
}

/// Fits an RBFN whose classes are the distinct `user_id`s of `train`.
pub fn train_rbfn(train: &Dataset, cfg: &RbfnConfig) -> Result<RbfnModel> {
    let c = cfg.centers_per_user;
    if c == 0 || !(cfg.ridge > 0.0) {
        return Err(Error::config("RBFN needs centers_per_user ≥ 1 and ridge > 0"));
    }
    let d = train.dim();
    let mut by_user: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
    for f in train.frames() {
        by_user.entry(f.user_id).or_default().push(&f.features);
    }
    if by_user.is_empty() {
        return Err(Error::invalid("RBFN training set is empty"));
    }
    let users: Vec<u32> = by_user.keys().copied().collect();
    let mut centers = Vec::with_capacity(users.len() * c * d);
    for (ui, (user, pts)) in by_user.iter().enumerate() {
        if pts.len() < c {
            return Err(Error::invalid(format!("user {user} has {} frames, RBFN needs {c}", pts.len())));
        }
        for center in kmeans(pts, c, cfg.kmeans_iterations, indexed_seed(cfg.seed, ui as u64)) {
            centers.extend(center);
        }
    }
    let m = users.len() * c;
    let mut pair = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            pair.push(sq_dist(&centers[i * d..(i + 1) * d], &centers[j * d..(j + 1) * d]).sqrt());
        }
    }
    let width = if pair.is_empty() { 1.0 } else { median(pair) };
    let width = if width > 0.0 { width } else { 1.0 };
    let mut model = RbfnModel {
        dim: d,
        centers,
        widths: vec![width; m],
        weights: Vec::new(),
        users,
    };

    let n = train.len();
    let u = model.users.len();
    let mut design = DMatrix::<f64>::zeros(n, m);
    let mut target = DMatrix::<f64>::zeros(n, u);
    let mut phi = Vec::with_capacity(m);
    for (i, f) in train.frames().iter().enumerate() {
        model.activations(&f.features, &mut phi);
        for (j, a) in phi.iter().enumerate() {
            design[(i, j)] = *a;
        }
        let col = model.users.binary_search(&f.user_id).unwrap_or(0);
        target[(i, col)] = 1.0;
    }
    let gram = design.tr_mul(&design) + DMatrix::<f64>::identity(m, m) * cfg.ridge;
    let rhs = design.tr_mul(&target);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::invalid("RBFN normal equations are not positive definite"))?;
    let w = chol.solve(&rhs);
    model.weights = (0..m).flat_map(|i| (0..u).map(move |j| (i, j))).map(|ij| w[ij]).collect();
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RdaConfig {
    pub runs: usize,
    pub train_fraction: f64,
    pub rbfn: RbfnConfig,
    pub seed: u64,
}

impl Default for RdaConfig {
    fn default() -> Self {
        Self {
            runs: 30,
            train_fraction: 0.5,
            rbfn: RbfnConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdaResult {
    /// Mean of the per-run identification rates.
    pub rate: f64,
    pub per_run: Vec<f64>,
    pub users: usize,
}

impl RdaResult {
    /// Binomial standard error of a rate `p` estimated from `users × runs` decisions.
    pub fn binomial_standard_error(&self, p: f64) -> f64 {
        (p * (1.0 - p) / (self.users * self.per_run.len()) as f64).sqrt()
    }
}

/// Fraction of users identified when each test frame's identity probabilities
/// are averaged per (user, stimulus) and the per-stimulus argmaxes vote.
pub fn identification_rate(model: &RbfnModel, test: &Dataset, proba: &[Vec<f64>]) -> Result<f64> {
    if proba.len() != test.len() {
        return Err(Error::dimension(test.len(), proba.len()));
    }
    let u = model.users.len();
    let mut groups: BTreeMap<(u32, u32), (Vec<f64>, usize)> = BTreeMap::new();
    for (f, p) in test.frames().iter().zip(proba) {
        let g = groups.entry((f.user_id, f.stimulus_id)).or_insert_with(|| (vec![0.0; u], 0));
        for (a, b) in g.0.iter_mut().zip(p) {
            *a += b;
        }
        g.1 += 1;
    }
    // per user: vote counts and summed averaged probabilities for tie-breaking
    let mut votes: BTreeMap<u32, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for ((user, _), (sum, count)) in groups {
        let avg: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let v = votes.entry(user).or_insert_with(|| (vec![0; u], vec![0.0; u]));
        v.0[argmax(&avg)] += 1;
        for (a, b) in v.1.iter_mut().zip(&avg) {
            *a += b;
        }
    }
    if votes.is_empty() {
        return Err(Error::invalid("re-identification test set is empty"));
    }
    let mut hits = 0usize;
    for (user, (counts, mass)) in &votes {
        let best = (0..u)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(mass[a].total_cmp(&mass[b])).then(b.cmp(&a)))
            .unwrap_or(0);
        if model.users[best] == *user {
            hits += 1;
        }
    }
    Ok(hits as f64 / votes.len() as f64)
}

/// Re-identification over `cfg.runs` random splits. Test frames pass through
/// `test_privatizer` when given; training frames stay raw.
pub fn run_rda(data: &Dataset, cfg: &RdaConfig, test_privatizer: Option<&Privatizer>) -> Result<RdaResult> {
    if cfg.runs == 0 {
        return Err(Error::config("RDA needs at least one run"));
    }
    let mut per_run = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let seed = indexed_seed(cfg.seed, run as u64);
        let (tr, te) = split_indices(data, &SplitSpec::frames(cfg.train_fraction, seed))?;
        let train = data.subset(&tr);
        let mut test = data.subset(&te);
        if let Some(p) = test_privatizer {
            test = p.apply_dataset(&test, &mut stream(seed, crate::rng::streams::FEATURE_NOISE))?;
        }
        let model = train_rbfn(&train, &RbfnConfig { seed, ..cfg.rbfn.clone() })?;
        let proba = model.predict_proba(&test.feature_matrix())?;
        per_run.push(identification_rate(&model, &test, &proba)?);
    }
    let users = data.users().into_iter().collect::<std::collections::BTreeSet<_>>().len();
    Ok(RdaResult {
        rate: per_run.iter().sum::<f64>() / per_run.len() as f64,
        per_run,
        users,
    })
}
