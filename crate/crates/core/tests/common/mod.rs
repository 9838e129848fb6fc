//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use privatexr_core::data::{normalize, split, synth_generate, Dataset, SplitSpec, SynthConfig};
use privatexr_core::metrics::balanced_accuracy;
use privatexr_core::nn::{argmax, Architecture, ModelSpec, Reduction, Gradients, Tensor, TrainedModel};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn synth(cfg: SynthConfig) -> Dataset {
    normalize(&synth_generate(&cfg).unwrap()).unwrap()
}

/// Architectures small enough for finite differences (≤ 5,000 parameters),
/// with the number of time steps each is fed.
pub fn small_architectures() -> Vec<(Architecture, usize)> {
    vec![
        (Architecture::Mlp { hidden: vec![10, 8] }, 1),
        (
            Architecture::Conv1d {
                filters: 5,
                kernel: 3,
                stride: 1,
                padding: 1,
                layers: 2,
            },
            5,
        ),
        (
            Architecture::AttnEncoder {
                model_dim: 8,
                ff_hidden: 12,
                heads: 2,
            },
            4,
        ),
    ]
}

/// Max relative error between analytic and central-difference gradients of the
/// mean cross-entropy, over every parameter.
pub fn gradient_check(arch: Architecture, steps: usize, seed: u64) -> (f64, usize) {
    let (d, k, n) = (6, 3, 3);
    let spec = ModelSpec {
        input_dim: d,
        class_count: k,
        arch,
        seed,
    };
    let mut rng = privatexr_core::rng::rng_from_seed(seed);
    let params: Vec<f64> = (0..spec.param_count()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let count = params.len();
    let mut model = TrainedModel::from_params(spec.clone(), params).unwrap();
    let mlp = matches!(spec.arch, Architecture::Mlp { .. });
    let width = if mlp { d } else { steps * d };
    let x: Vec<f64> = (0..n * width).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let batch = if mlp { Tensor::matrix(n, d, x).unwrap() } else { Tensor::new(vec![n, steps, d], x).unwrap() };
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let analytic = match model.loss_and_grads(&batch, &labels, Reduction::Mean).unwrap().grads {
        Gradients::Mean(g) => g,
        Gradients::PerExample(_) => unreachable!(),
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let orig = model.params[i];
        model.params[i] = orig + h;
        let up = model.loss_and_grads(&batch, &labels, Reduction::Mean).unwrap().loss;
        model.params[i] = orig - h;
        let down = model.loss_and_grads(&batch, &labels, Reduction::Mean).unwrap().loss;
        model.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    (worst, count)
}

/// Multinomial logistic regression by full-batch gradient descent.
pub struct Logistic {
    d: usize,
    k: usize,
    w: Vec<f64>,
}

impl Logistic {
    pub fn fit(ds: &Dataset, iterations: usize, lr: f64) -> Self {
        let (d, k) = (ds.dim(), ds.class_count());
        let x = ds.feature_matrix();
        let y = ds.labels();
        let n = y.len() as f64;
        let mut w = vec![0.0; (d + 1) * k];
        for _ in 0..iterations {
            let mut grad = vec![0.0; w.len()];
            for (row, &label) in x.chunks_exact(d).zip(&y) {
                let p = Self::proba_of(&w, d, k, row);
                for c in 0..k {
                    let err = p[c] - if c == label { 1.0 } else { 0.0 };
                    for j in 0..d {
                        grad[j * k + c] += err * row[j];
                    }
                    grad[d * k + c] += err;
                }
            }
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= lr * gi / n;
            }
        }
        Self { d, k, w }
    }

    fn proba_of(w: &[f64], d: usize, k: usize, row: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = (0..k).map(|c| w[d * k + c] + (0..d).map(|j| row[j] * w[j * k + c]).sum::<f64>()).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter_mut().map(|v| {
            *v = (*v - m).exp();
            *v
        }).sum();
        z.iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, ds: &Dataset) -> Vec<usize> {
        ds.feature_matrix().chunks_exact(self.d).map(|r| argmax(&Self::proba_of(&self.w, self.d, self.k, r))).collect()
    }

    pub fn balanced_accuracy(&self, ds: &Dataset) -> f64 {
        balanced_accuracy(&self.predict(ds), &ds.labels(), ds.class_count()).unwrap().value
    }
}

/// Identification rate of a nearest-user-centroid classifier, aggregated per
/// (user, stimulus) by averaged distances and then by majority over stimuli.
pub fn nearest_centroid_rate(data: &Dataset, train_fraction: f64, runs: usize, seed: u64) -> f64 {
    let d = data.dim();
    let mut total = 0.0;
    for run in 0..runs {
        let (train, test) = split(data, &SplitSpec::frames(train_fraction, seed + run as u64)).unwrap();
        let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
        for f in train.frames() {
            let e = sums.entry(f.user_id).or_insert_with(|| (vec![0.0; d], 0));
            e.0.iter_mut().zip(&f.features).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
        let centroids: Vec<(u32, Vec<f64>)> = sums.into_iter().map(|(u, (s, c))| (u, s.iter().map(|v| v / c as f64).collect())).collect();
        let mut groups: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
        for f in test.frames() {
            let g = groups.entry((f.user_id, f.stimulus_id)).or_insert_with(|| vec![0.0; centroids.len()]);
            for (gi, (_, c)) in g.iter_mut().zip(&centroids) {
                *gi += c.iter().zip(&f.features).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        let mut votes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for ((user, _), dist) in groups {
            let best = (0..dist.len()).min_by(|&a, &b| dist[a].total_cmp(&dist[b])).unwrap();
            votes.entry(user).or_insert_with(|| vec![0; centroids.len()])[best] += 1;
        }
        let hits = votes
            .iter()
            .filter(|(user, v)| {
                let best = (0..v.len()).max_by(|&a, &b| v[a].cmp(&v[b]).then(b.cmp(&a))).unwrap();
                centroids[best].0 == **user
            })
            .count();
        total += hits as f64 / votes.len() as f64;
    }
    total / runs as f64
}

/// Accuracy drop when each feature column is shuffled, averaged over `repeats`.
pub fn permutation_importance(model: &TrainedModel, ds: &Dataset, repeats: usize, seed: u64) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let d = ds.dim();
    let n = ds.len();
    let x = ds.feature_matrix();
    let y = ds.labels();
    let acc = |m: &[f64]| {
        let pred = model.predict(&Tensor::matrix(n, d, m.to_vec()).unwrap()).unwrap();
        pred.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / n as f64
    };
    let base = acc(&x);
    let mut rng = privatexr_core::rng::rng_from_seed(seed);
    (0..d)
        .map(|j| {
            let mut drop = 0.0;
            for _ in 0..repeats {
                let mut col: Vec<f64> = (0..n).map(|i| x[i * d + j]).collect();
                col.shuffle(&mut rng);
                let mut m = x.clone();
                for i in 0..n {
                    m[i * d + j] = col[i];
                }
                drop += base - acc(&m);
            }
            drop / repeats as f64
        })
        .collect()
}

/// Shapley values as the average marginal contribution over all d! orderings,
/// with coalition worths tabulated once by bitmask.
pub fn permutation_shapley(model: &TrainedModel, x: &[f64], baseline: &[f64]) -> Vec<f64> {
    let d = x.len();
    let masks = 1usize << d;
    let mut rows = Vec::with_capacity(masks * d);
    for m in 0..masks {
        for j in 0..d {
            rows.push(if m >> j & 1 == 1 { x[j] } else { baseline[j] });
        }
    }
    let proba = model.predict_proba(&Tensor::matrix(masks, d, rows).unwrap()).unwrap();
    let class = argmax(proba.row(masks - 1));
    let worth: Vec<f64> = (0..masks).map(|m| proba.row(m)[class]).collect();

    let mut phi = vec![0.0; d];
    let mut perm: Vec<usize> = (0..d).collect();
    let mut count = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let mut mask = 0usize;
        for &j in p {
            let next = mask | 1 << j;
            phi[j] += worth[next] - worth[mask];
            mask = next;
        }
        count += 1;
    });
    phi.iter().map(|v| v / count as f64).collect()
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

/// A pipeline configuration that exercises every stage in a few seconds.
pub fn quick_pipeline(condition: privatexr_core::harness::Condition, xai: bool) -> privatexr_core::harness::ExperimentConfig {
    use privatexr_core::harness::{DataSource, ExperimentConfig};
    let mut cfg = ExperimentConfig {
        data: DataSource::Synth(SynthConfig {
            users: 8,
            frames_per_user_stimulus: 30,
            dim: 8,
            seed: 2,
            ..SynthConfig::default()
        }),
        model: Architecture::Mlp { hidden: vec![16] },
        condition,
        xai_selective: xai,
        seed: 13,
        ..ExperimentConfig::default()
    };
    cfg.train = privatexr_core::trainer::TrainConfig { epochs: 8, batch_size: 32, lr: 0.01, patience: 8, ..Default::default() };
    cfg.explain.samples = Some(64);
    cfg.mia.shadow_count = 2;
    cfg.mia.eval_size = 60;
    cfg.rda = Some(privatexr_core::attack::RdaConfig { runs: 3, ..Default::default() });
    cfg.bench.repetitions = 1;
    cfg
}
