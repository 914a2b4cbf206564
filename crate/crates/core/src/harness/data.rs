//! Synthetic multi-task classification data.
//!
//! Each task draws `C` cluster centres uniformly from `[-2, 2]^d` and samples
//! isotropic Gaussian points around them; the label is the cluster index.
//! Tasks share the label space but not the centres, so task models pull a
//! shared backbone in different directions.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_CLUSTER_STD: f64 = 0.4;
const CENTRE_RANGE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub id: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub id: String,
    pub train: Batch,
    pub test: Batch,
}

/// Descriptors for `k` tasks: ids `0..k`, seeds `seed ^ index`.
pub fn task_descriptors(k: usize, n_train: usize, n_test: usize, seed: u64) -> Vec<TaskDescriptor> {
    (0..k)
        .map(|i| TaskDescriptor {
            id: i.to_string(),
            seed: seed ^ i as u64,
            n_train,
            n_test,
        })
        .collect()
}

fn sample_split(centres: &[Vec<f64>], n: usize, std: f64, rng: &mut impl Rng) -> Result<Batch> {
    if n == 0 {
        return Err(Error::InvalidArgument("split size must be positive".into()));
    }
    let classes = centres.len();
    let d = centres[0].len();
    let noise = Normal::new(0.0, std)
        .map_err(|e| Error::InvalidArgument(format!("cluster std {std}: {e}")))?;
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        data.extend(centres[y].iter().map(|c| c + noise.sample(rng)));
    }
    Batch::new(Tensor::new(vec![n, d], data)?, labels)
}

pub fn generate_task(
    desc: &TaskDescriptor,
    dim: usize,
    classes: usize,
    std: f64,
) -> Result<TaskData> {
    if dim < 2 || classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need d >= 2 and C >= 2, got d = {dim}, C = {classes}"
        )));
    }
    let mut rng = seed::rng(desc.seed, "centres");
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| rng.random_range(-CENTRE_RANGE..=CENTRE_RANGE))
                .collect()
        })
        .collect();
    Ok(TaskData {
        id: desc.id.clone(),
        train: sample_split(
            &centres,
            desc.n_train,
            std,
            &mut seed::rng(desc.seed, "train"),
        )?,
        test: sample_split(
            &centres,
            desc.n_test,
            std,
            &mut seed::rng(desc.seed, "test"),
        )?,
    })
}

/// Pretraining pool: the first `n_train / K` training samples of every task.
pub fn base_pool(tasks: &[TaskData]) -> Result<Batch> {
    let k = tasks.len();
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one task".into()));
    }
    let parts = tasks
        .iter()
        .map(|t| {
            let take = t.train.len() / k;
            if take == 0 {
                return Err(Error::InvalidArgument(format!(
                    "task {} has too few training samples to pool",
                    t.id
                )));
            }
            Ok(t.train.select(&(0..take).collect::<Vec<_>>()))
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::concat(&parts)
}

/// `k` task datasets plus the pooled pretraining set.
pub fn generate_tasks(
    k: usize,
    dim: usize,
    classes: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<TaskData>, Batch)> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one task".into()));
    }
    let tasks = task_descriptors(k, n_train, n_test, seed)
        .iter()
        .map(|d| generate_task(d, dim, classes, DEFAULT_CLUSTER_STD))
        .collect::<Result<Vec<_>>>()?;
    let pool = base_pool(&tasks)?;
    Ok((tasks, pool))
}

/// `m` distinct training indices, drawn without replacement.
pub fn calibration_indices(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {m} calibration samples from {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, "calibration"));
    idx.truncate(m);
    Ok(idx)
}
