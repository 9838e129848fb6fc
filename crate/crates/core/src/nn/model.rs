use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::{softmax_in_place, Graph, NodeId};
use super::spec::{init_params, Architecture, Block, ModelSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// (ε, δ) actually consumed by a private training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpent {
    pub epsilon: f64,
    pub delta: f64,
    /// Rényi order achieving the reported ε.
    pub order: u32,
    /// Noisy steps executed.
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub privacy_spent: Option<PrivacySpent>,
    #[serde(default)]
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    PerExample,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Gradients {
    Mean(Vec<f64>),
    PerExample(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub per_example_loss: Vec<f64>,
    pub grads: Gradients,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    spec: ModelSpec,
    params: Vec<f64>,
    meta: TrainingMeta,
}

/// Batch geometry after interpreting a tensor against a spec.
#[derive(Clone, Copy)]
struct BatchShape {
    n: usize,
    steps: usize,
    channels: usize,
}

impl TrainedModel {
    /// Untrained model with freshly initialized parameters.
    pub fn initialize(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec, seed);
        Ok(Self {
            spec,
            params,
            meta: TrainingMeta::default(),
        })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::dimension(
                format!("{} parameters", spec.param_count()),
                params.len(),
            ));
        }
        Ok(Self {
            spec,
            params,
            meta: TrainingMeta::default(),
        })
    }

    fn batch_shape(&self, batch: &Tensor) -> Result<BatchShape> {
        let d = self.spec.input_dim;
        let (n, steps, channels) = match batch.shape() {
            [n, c] => (*n, 1, *c),
            [n, t, c] => (*n, *t, *c),
            other => {
                return Err(Error::dimension("n×d or n×T×d batch", format!("{other:?}")));
            }
        };
        let ok = match self.spec.arch {
            Architecture::Mlp { .. } => steps * channels == d,
            _ => channels == d,
        };
        if !ok {
            return Err(Error::dimension(
                format!("feature width {d}"),
                format!("batch shape {:?}", batch.shape()),
            ));
        }
        if steps == 0 {
            return Err(Error::dimension("at least one time step", "0"));
        }
        if let Architecture::Conv1d {
            kernel,
            stride,
            padding,
            layers,
            ..
        } = self.spec.arch
        {
            let mut t = steps;
            for _ in 0..layers {
                if t + 2 * padding < kernel {
                    return Err(Error::dimension(
                        format!("sequence of at least {} steps", kernel.saturating_sub(2 * padding)),
                        format!("{t} steps"),
                    ));
                }
                t = (t + 2 * padding - kernel) / stride + 1;
            }
        }
        Ok(BatchShape { n, steps, channels })
    }

    fn logits_node(&self, g: &mut Graph, x: &[f64], shape: BatchShape) -> NodeId {
        let mut blocks = self.spec.layout().blocks.into_iter();
        let mut next = |g: &mut Graph| {
            let b: Block = blocks.next().expect("layout exhausted");
            g.param(b.offset, b.rows, b.cols)
        };
        match &self.spec.arch {
            Architecture::Mlp { hidden } => {
                let mut h = g.input(shape.n, shape.steps * shape.channels, x.to_vec());
                for _ in hidden {
                    let (w, b) = (next(g), next(g));
                    let z = g.affine(h, w, b);
                    h = g.relu(z);
                }
                let (w, b) = (next(g), next(g));
                g.affine(h, w, b)
            }
            _ => {
                // weights are shared across examples, so load them once
                let params: Vec<NodeId> = std::iter::from_fn(|| {
                    let b = blocks.next()?;
                    Some(g.param(b.offset, b.rows, b.cols))
                })
                .collect();
                let width = shape.steps * shape.channels;
                let rows: Vec<NodeId> = x
                    .chunks_exact(width)
                    .map(|sample| {
                        let input = g.input(shape.steps, shape.channels, sample.to_vec());
                        self.sequence_logits(g, input, &params)
                    })
                    .collect();
                g.concat_rows(rows)
            }
        }
    }

    fn sequence_logits(&self, g: &mut Graph, input: NodeId, p: &[NodeId]) -> NodeId {
        match &self.spec.arch {
            Architecture::Conv1d {
                kernel,
                stride,
                padding,
                layers,
                ..
            } => {
                let mut h = input;
                for l in 0..*layers {
                    let windows = g.unfold(h, *kernel, *stride, *padding);
                    let z = g.affine(windows, p[2 * l], p[2 * l + 1]);
                    h = g.relu(z);
                }
                let pooled = g.mean_rows(h);
                g.affine(pooled, p[2 * layers], p[2 * layers + 1])
            }
            Architecture::AttnEncoder {
                model_dim, heads, ..
            } => {
                let (steps, _) = g.shape(input);
                let e = g.affine(input, p[0], p[1]);
                let pe = g.input(steps, *model_dim, positional_encoding(steps, *model_dim));
                let h = g.add(e, pe);

                let a = g.layer_norm(h, p[2], p[3]);
                let q = g.affine(a, p[4], p[5]);
                let k = g.affine(a, p[6], p[7]);
                let v = g.affine(a, p[8], p[9]);
                let head_dim = model_dim / heads;
                let outs: Vec<NodeId> = (0..*heads)
                    .map(|hd| {
                        let qh = g.col_slice(q, hd * head_dim, head_dim);
                        let kh = g.col_slice(k, hd * head_dim, head_dim);
                        let vh = g.col_slice(v, hd * head_dim, head_dim);
                        let scores = g.matmul_bt(qh, kh);
                        let scaled = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
                        let attn = g.softmax_rows(scaled);
                        g.matmul(attn, vh)
                    })
                    .collect();
                let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(outs) };
                let o = g.affine(joined, p[10], p[11]);
                let h = g.add(h, o);

                let f = g.layer_norm(h, p[12], p[13]);
                let f = g.affine(f, p[14], p[15]);
                let f = g.relu(f);
                let f = g.affine(f, p[16], p[17]);
                let h = g.add(h, f);

                let pooled = g.mean_rows(h);
                let pooled = g.layer_norm(pooled, p[18], p[19]);
                g.affine(pooled, p[20], p[21])
            }
            Architecture::Mlp { .. } => unreachable!("mlp has no sequence path"),
        }
    }

    /// Tape-free MLP evaluation; inference needs no gradients.
    fn mlp_logits(&self, x: &[f64], n: usize, hidden: &[usize]) -> Vec<f64> {
        let mut width = self.spec.input_dim;
        let mut h = x.to_vec();
        let mut offset = 0;
        let widths = hidden.iter().copied().chain(std::iter::once(self.spec.class_count));
        let last = hidden.len();
        for (layer, out) in widths.enumerate() {
            let w = &self.params[offset..offset + width * out];
            let b = &self.params[offset + width * out..offset + width * out + out];
            offset += width * out + out;
            let mut z = vec![0.0; n * out];
            for (hi, zi) in h.chunks_exact(width).zip(z.chunks_exact_mut(out)) {
                for (a, wk) in hi.iter().zip(w.chunks_exact(out)) {
                    for (zj, wj) in zi.iter_mut().zip(wk) {
                        *zj += a * wj;
                    }
                }
                for (zj, bj) in zi.iter_mut().zip(b) {
                    *zj += bj;
                    if layer < last && *zj < 0.0 {
                        *zj = 0.0;
                    }
                }
            }
            h = z;
            width = out;
        }
        h
    }

    /// Raw class scores, `n × K`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let shape = self.batch_shape(batch)?;
        if let Architecture::Mlp { hidden } = &self.spec.arch {
            let logits = self.mlp_logits(batch.values(), shape.n, hidden);
            return Tensor::matrix(shape.n, self.spec.class_count, logits);
        }
        let mut g = Graph::new(&self.params);
        let out = self.logits_node(&mut g, batch.values(), shape);
        Tensor::matrix(shape.n, self.spec.class_count, g.value(out).to_vec())
    }

    /// Row-wise softmax of the logits.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        let logits = self.forward(batch)?;
        Ok(softmax_tensor(logits))
    }

    /// Argmax class per row.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok((0..logits.len()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Categorical cross-entropy and its exact gradient, either averaged over
    /// the batch or one full-length vector per example.
    pub fn loss_and_grads(
        &self,
        batch: &Tensor,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<LossAndGrads> {
        let shape = self.batch_shape(batch)?;
        if labels.len() != shape.n {
            return Err(Error::dimension(format!("{} labels", shape.n), labels.len()));
        }
        let k = self.spec.class_count;
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        if shape.n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        match reduction {
            Reduction::Mean => {
                let mut g = Graph::new(&self.params);
                let out = self.logits_node(&mut g, batch.values(), shape);
                let (losses, mut seed) = cross_entropy(g.value(out), labels, k);
                let n = shape.n as f64;
                seed.iter_mut().for_each(|s| *s /= n);
                let grads = g.backward(out, seed);
                Ok(LossAndGrads {
                    loss: losses.iter().sum::<f64>() / n,
                    per_example_loss: losses,
                    grads: Gradients::Mean(grads),
                })
            }
            Reduction::PerExample => {
                let width = shape.steps * shape.channels;
                let single = BatchShape { n: 1, ..shape };
                let results: Vec<(f64, Vec<f64>)> = batch
                    .values()
                    .par_chunks_exact(width)
                    .zip(labels.par_iter())
                    .map(|(x, &y)| {
                        let mut g = Graph::new(&self.params);
                        let out = self.logits_node(&mut g, x, single);
                        let (loss, seed) = cross_entropy(g.value(out), &[y], k);
                        (loss[0], g.backward(out, seed))
                    })
                    .collect();
                let (losses, grads): (Vec<f64>, Vec<Vec<f64>>) = results.into_iter().unzip();
                Ok(LossAndGrads {
                    loss: losses.iter().sum::<f64>() / shape.n as f64,
                    per_example_loss: losses,
                    grads: Gradients::PerExample(grads),
                })
            }
        }
    }

    /// Versioned JSON document. Identical contents give identical bytes.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            spec: self.spec.clone(),
            params: self.params.clone(),
            meta: self.meta.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        let mut m = Self::from_params(doc.spec, doc.params)?;
        m.meta = doc.meta;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn softmax_tensor(logits: Tensor) -> Tensor {
    let shape = logits.shape().to_vec();
    let k = shape[1];
    let mut v = logits.into_values();
    for row in v.chunks_exact_mut(k) {
        softmax_in_place(row);
    }
    Tensor::new(shape, v).expect("softmax keeps shape")
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-row losses and the gradient of their sum w.r.t. the logits.
fn cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut losses = Vec::with_capacity(labels.len());
    let mut seed = Vec::with_capacity(logits.len());
    for (row, &y) in logits.chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        losses.push(lse - row[y]);
        for (c, z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            seed.push(if c == y { p - 1.0 } else { p });
        }
    }
    (losses, seed)
}

/// Sinusoidal position table, `steps × width`.
fn positional_encoding(steps: usize, width: usize) -> Vec<f64> {
    let mut pe = vec![0.0; steps * width];
    for pos in 0..steps {
        for i in 0..width {
            let exponent = (2 * (i / 2)) as f64 / width as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::Architecture;

    #[test]
    fn mlp_inference_matches_the_tape() {
        let spec = ModelSpec::mlp(5, 3, vec![7, 4]);
        let n = spec.param_count();
        let params: Vec<f64> = (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) / 9.0).collect();
        let m = TrainedModel::from_params(spec, params).unwrap();
        let x = Tensor::matrix(4, 5, (0..20).map(|i| (i as f64 * 0.7).sin() * 2.0).collect()).unwrap();
        let fast = m.forward(&x).unwrap();
        let mut g = Graph::new(&m.params);
        let out = m.logits_node(&mut g, x.values(), m.batch_shape(&x).unwrap());
        for (a, b) in fast.values().iter().zip(g.value(out)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn spec(arch: Architecture) -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            class_count: 4,
            arch,
            seed: 0,
        }
    }

    /// Time steps each architecture is exercised with (the MLP flattens, so it gets one).
    fn steps(arch: &Architecture) -> usize {
        if arch.uses_time_axis() { 2 } else { 1 }
    }

    fn archs() -> Vec<Architecture> {
        vec![
            Architecture::Mlp { hidden: vec![5] },
            Architecture::Conv1d { filters: 4, kernel: 3, stride: 1, padding: 1, layers: 2 },
            Architecture::AttnEncoder { model_dim: 4, ff_hidden: 6, heads: 2 },
        ]
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        for arch in archs() {
            let s = spec(arch);
            let m = TrainedModel::from_params(s.clone(), vec![0.0; s.param_count()]).unwrap();
            let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
            let p = m.predict_proba(&x).unwrap();
            assert!(p.values().iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_tensor(Tensor::matrix(1, 4, vec![10.0, 0.0, 0.0, 0.0]).unwrap());
        let e10 = 10f64.exp();
        assert!((p.values()[0] - e10 / (e10 + 3.0)).abs() < 1e-6);
        let a = softmax_tensor(Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]).unwrap());
        let b = softmax_tensor(Tensor::matrix(1, 3, vec![100.3, 99.0, 102.0]).unwrap());
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_of_one_matches_row_of_three() {
        for arch in archs() {
            let t = steps(&arch);
            let m = TrainedModel::initialize(spec(arch), 3).unwrap();
            let x3 = Tensor::new(vec![3, t, 3], (0..9 * t).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            let x1 = x3.select_rows(&[0]);
            let a = m.forward(&x3).unwrap();
            let b = m.forward(&x1).unwrap();
            for (u, v) in a.row(0).iter().zip(b.row(0)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_computed_mlp() {
        // 2 inputs -> 1 relu hidden unit -> 2 classes
        // hidden = relu(0.5 x0 - 1.0 x1 + 0.25); logits = [2 h + 0.1, -h]
        let s = ModelSpec::mlp(2, 2, vec![1]);
        let params = vec![0.5, -1.0, 0.25, 2.0, -1.0, 0.1, 0.0];
        let m = TrainedModel::from_params(s, params).unwrap();
        let x = Tensor::matrix(2, 2, vec![3.0, 0.5, 0.0, 1.0]).unwrap();
        let z = m.forward(&x).unwrap();
        // row 0: h = 1.5 - 0.5 + 0.25 = 1.25 -> [2.6, -1.25]; row 1: h = relu(-0.75) = 0 -> [0.1, 0]
        assert_eq!(z.values(), &[2.6, -1.25, 0.1, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_dimensions() {
        let m = TrainedModel::initialize(ModelSpec::mlp(3, 2, vec![]), 0).unwrap();
        let err = m.forward(&Tensor::matrix(1, 4, vec![0.0; 4]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("feature width 3"), "{err}");
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let m = TrainedModel::from_params(ModelSpec::mlp(2, 4, vec![]), vec![0.0; 12]).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let r = m.loss_and_grads(&x, &[2], Reduction::Mean).unwrap();
        assert!((r.loss - 4f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(&[0.0, 800.0], &[1], 2);
        assert_eq!(l[0], 0.0);
        assert!(m.loss_and_grads(&x, &[4], Reduction::Mean).is_err());
    }

    #[test]
    fn mean_gradient_is_mean_of_per_example() {
        for arch in archs() {
            let t = steps(&arch);
            let m = TrainedModel::initialize(spec(arch), 9).unwrap();
            let x = Tensor::new(vec![4, t, 3], (0..12 * t).map(|i| (i as f64 * 0.71).cos()).collect()).unwrap();
            let y = [0, 3, 1, 1];
            let mean = m.loss_and_grads(&x, &y, Reduction::Mean).unwrap();
            let per = m.loss_and_grads(&x, &y, Reduction::PerExample).unwrap();
            let (Gradients::Mean(gm), Gradients::PerExample(gp)) = (mean.grads, per.grads) else {
                panic!("wrong gradient kind");
            };
            for i in 0..gm.len() {
                let avg = gp.iter().map(|g| g[i]).sum::<f64>() / 4.0;
                assert!((gm[i] - avg).abs() < 1e-10);
            }
            assert!((mean.loss - per.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn short_sequences_rejected_without_padding() {
        let s = spec(Architecture::Conv1d { filters: 2, kernel: 4, stride: 1, padding: 0, layers: 1 });
        let m = TrainedModel::initialize(s, 0).unwrap();
        assert!(m.forward(&Tensor::new(vec![1, 3, 3], vec![0.0; 9]).unwrap()).is_err());
        assert!(m.forward(&Tensor::new(vec![1, 4, 3], vec![0.0; 12]).unwrap()).is_ok());
    }

    #[test]
    fn json_round_trip_is_byte_stable() {
        let m = TrainedModel::initialize(spec(Architecture::attn_default()), 1).unwrap();
        let text = m.to_json().unwrap();
        let back = TrainedModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), text);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn rows_sum_to_one_and_permute(seed in 0u64..500, perm_seed in 0u64..100) {
            use rand::seq::SliceRandom;
            let m = TrainedModel::initialize(spec(Architecture::Mlp { hidden: vec![7] }), seed).unwrap();
            let x = Tensor::matrix(5, 3, (0..15).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect()).unwrap();
            let p = m.predict_proba(&x).unwrap();
            for i in 0..5 {
                proptest::prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let mut order: Vec<usize> = (0..5).collect();
            order.shuffle(&mut crate::rng::rng_from_seed(perm_seed));
            let z = m.forward(&x).unwrap();
            let zp = m.forward(&x.select_rows(&order)).unwrap();
            for (j, &i) in order.iter().enumerate() {
                proptest::prop_assert_eq!(zp.row(j), z.row(i));
            }
        }
    }
}
