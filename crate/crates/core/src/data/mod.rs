//! Multi-user, per-stimulus sensor frames and the operations that prepare them
//! for training: ingestion, normalization, splitting and synthetic generation.

mod csv_io;
mod split;
mod synth;

pub use csv_io::{load_csv, write_csv, CsvSchema};
pub use split::{kfold_split, split, split_indices, Granularity, SplitSpec};
pub use synth::{synth_generate, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns whose population standard deviation falls below this are treated as constant.
pub const CONSTANT_COLUMN_STD: f64 = 1e-12;

/// One timestamped feature vector recorded for a user watching a stimulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub user_id: u32,
    pub stimulus_id: u32,
    pub timestamp_ms: u64,
    pub features: Vec<f64>,
    pub label: usize,
}

/// Column-wise mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    feature_names: Vec<String>,
    class_names: Vec<String>,
    frames: Vec<Frame>,
    norm_stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        class_names: Vec<String>,
        frames: Vec<Frame>,
    ) -> Result<Self> {
        if feature_names.is_empty() {
            return Err(Error::invalid("dataset needs at least one feature"));
        }
        if class_names.len() < 2 {
            return Err(Error::invalid("dataset needs at least two classes"));
        }
        let d = feature_names.len();
        let k = class_names.len();
        for (i, f) in frames.iter().enumerate() {
            if f.features.len() != d {
                return Err(Error::dimension(
                    format!("{d} features"),
                    format!("{} features in frame {i}", f.features.len()),
                ));
            }
            if f.label >= k {
                return Err(Error::invalid(format!(
                    "frame {i} has label {} but only {k} classes are declared",
                    f.label
                )));
            }
        }
        Ok(Self {
            feature_names,
            class_names,
            frames,
            norm_stats: None,
        })
    }

    /// Same metadata, different frames. Frames must already be valid for this dataset.
    pub(crate) fn with_frames(&self, frames: Vec<Frame>) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
            frames,
            norm_stats: self.norm_stats.clone(),
        }
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm_stats.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Row-major `n × d` feature matrix.
    pub fn feature_matrix(&self) -> Vec<f64> {
        self.frames
            .iter()
            .flat_map(|f| f.features.iter().copied())
            .collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.label).collect()
    }

    /// Distinct user ids in ascending order.
    pub fn users(&self) -> Vec<u32> {
        let mut u: Vec<u32> = self.frames.iter().map(|f| f.user_id).collect();
        u.sort_unstable();
        u.dedup();
        u
    }

    /// Distinct stimulus ids in ascending order.
    pub fn stimuli(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.frames.iter().map(|f| f.stimulus_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Frames at the given positions, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        self.with_frames(indices.iter().map(|&i| self.frames[i].clone()).collect())
    }

    /// Replaces every frame's feature vector with the matching row of `matrix`.
    pub fn with_feature_matrix(&self, matrix: &[f64]) -> Result<Self> {
        let d = self.dim();
        if matrix.len() != self.len() * d {
            return Err(Error::dimension(self.len() * d, matrix.len()));
        }
        let frames = self
            .frames
            .iter()
            .zip(matrix.chunks_exact(d))
            .map(|(f, row)| Frame {
                features: row.to_vec(),
                ..f.clone()
            })
            .collect();
        Ok(self.with_frames(frames))
    }

    /// Copy relabeled by user identity: class `i` is the `i`-th distinct user.
    pub fn relabel_by_user(&self) -> Result<Self> {
        let users = self.users();
        let mut class_names: Vec<String> = users.iter().map(|u| format!("user{u}")).collect();
        if class_names.len() < 2 {
            // a lone user still needs a second declared class
            class_names.push("unused".into());
        }
        let frames = self
            .frames
            .iter()
            .map(|f| Frame {
                label: users.binary_search(&f.user_id).expect("user present"),
                ..f.clone()
            })
            .collect();
        let mut ds = Dataset::new(self.feature_names.clone(), class_names, frames)?;
        ds.norm_stats = self.norm_stats.clone();
        Ok(ds)
    }
}

/// Column-wise mean and population standard deviation over all frames.
pub fn compute_stats(ds: &Dataset) -> NormStats {
    let d = ds.dim();
    let n = ds.len() as f64;
    let mut mean = vec![0.0; d];
    for f in ds.frames() {
        for (m, x) in mean.iter_mut().zip(&f.features) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for f in ds.frames() {
        for ((v, x), m) in var.iter_mut().zip(&f.features).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s < CONSTANT_COLUMN_STD {
                0.0
            } else {
                s
            }
        })
        .collect();
    NormStats { mean, std }
}

/// Applies `(x − μ)/σ` column-wise with the given statistics. Columns with σ = 0 become 0.
pub fn apply_stats(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    if stats.mean.len() != ds.dim() || stats.std.len() != ds.dim() {
        return Err(Error::dimension(ds.dim(), stats.mean.len()));
    }
    let frames = ds
        .frames()
        .iter()
        .map(|f| Frame {
            features: f
                .features
                .iter()
                .zip(stats.mean.iter().zip(&stats.std))
                .map(|(x, (m, s))| if *s == 0.0 { 0.0 } else { (x - m) / s })
                .collect(),
            ..f.clone()
        })
        .collect();
    let mut out = ds.with_frames(frames);
    out.norm_stats = Some(stats.clone());
    Ok(out)
}

/// Z-score normalization with statistics computed over every frame of `ds`.
pub fn normalize(ds: &Dataset) -> Result<Dataset> {
    if ds.len() < 2 {
        return Err(Error::invalid("normalize needs at least two frames"));
    }
    apply_stats(ds, &compute_stats(ds))
}
