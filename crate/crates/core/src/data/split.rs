use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    #[default]
    FrameLevel,
    /// Whole users land on one side, so test identities never appear in training.
    UserLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub granularity: Granularity,
}

impl SplitSpec {
    pub fn frames(train_fraction: f64, seed: u64) -> Self {
        Self {
            train_fraction,
            seed,
            granularity: Granularity::FrameLevel,
        }
    }
}

/// Frame positions on each side of the split, each list in ascending order.
pub fn split_indices(ds: &Dataset, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let mut rng = rng_from_seed(spec.seed);
    let (mut train, mut test) = match spec.granularity {
        Granularity::FrameLevel => {
            let n = ds.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let cut = (spec.train_fraction * n as f64).round() as usize;
            let test = order.split_off(cut);
            (order, test)
        }
        Granularity::UserLevel => {
            let mut users = ds.users();
            if users.len() < 2 {
                return Err(Error::invalid(
                    "user-level split needs at least two users",
                ));
            }
            users.shuffle(&mut rng);
            let cut = ((spec.train_fraction * users.len() as f64).round() as usize)
                .clamp(1, users.len() - 1);
            let train_users = &users[..cut];
            let (a, b): (Vec<usize>, Vec<usize>) = (0..ds.len())
                .partition(|&i| train_users.contains(&ds.frames()[i].user_id));
            (a, b)
        }
    };
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds, spec)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// `k` (train, validation) pairs; every frame validates exactly once and fold
/// sizes differ by at most one.
pub fn kfold_split(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    Ok(kfold_indices(ds.len(), k, seed)?
        .into_iter()
        .map(|(tr, va)| (ds.subset(&tr), ds.subset(&va)))
        .collect())
}

pub(crate) fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::invalid("k-fold needs k >= 2"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds {n} frames")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = n / k + usize::from(f < n % k);
        let mut val = order[start..start + size].to_vec();
        let mut train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        val.sort_unstable();
        train.sort_unstable();
        folds.push((train, val));
        start += size;
    }
    Ok(folds)
}
