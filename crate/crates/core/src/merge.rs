//! Merge algorithms: uniform averaging, task arithmetic, TIES, DARE, and
//! per-layer coefficient merging that plugs sensitivity coefficients into any
//! of them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::seed::{label_hash, mix64, unit_f64};
use crate::sensitivity::{SensitivityMode, SensitivityReport};
use crate::task_vector::{compute_task_vector, layer_partition, LayerPartition, TaskVector};
use crate::tensor::Tensor;

pub const DEFAULT_TASK_ARITHMETIC_LAMBDA: f64 = 1.0;
pub const DEFAULT_DARE_LAMBDA: f64 = 0.5;
pub const DEFAULT_DARE_DROP: f64 = 0.5;
pub const DEFAULT_TIES_MASK: f64 = 0.7;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    Ties,
    Dare,
}

impl MergeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Average => "average",
            Self::TaskArithmetic => "task_arithmetic",
            Self::Ties => "ties",
            Self::Dare => "dare",
        }
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            Self::Dare => DEFAULT_DARE_LAMBDA,
            _ => DEFAULT_TASK_ARITHMETIC_LAMBDA,
        }
    }
}

impl std::str::FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "task_arithmetic" => Ok(Self::TaskArithmetic),
            "ties" => Ok(Self::Ties),
            "dare" => Ok(Self::Dare),
            other => Err(Error::InvalidArgument(format!(
                "unknown merge method `{other}`"
            ))),
        }
    }
}

/// A merge method with its hyperparameters. Fields left out of the JSON form
/// take the method's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMergeConfig")]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub use_sens: bool,
    pub lambda: f64,
    pub dare_drop: f64,
    pub ties_mask: f64,
    /// Softmax temperature for the coefficients; `None` keeps the report's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub seed: u64,
    /// Which scaling factors feed the coefficients; `None` keeps the report's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<SensitivityMode>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMergeConfig {
    method: MergeMethod,
    #[serde(default)]
    use_sens: bool,
    lambda: Option<f64>,
    dare_drop: Option<f64>,
    ties_mask: Option<f64>,
    temperature: Option<f64>,
    #[serde(default)]
    seed: u64,
    mode: Option<SensitivityMode>,
}

impl TryFrom<RawMergeConfig> for MergeConfig {
    type Error = Error;

    fn try_from(raw: RawMergeConfig) -> Result<Self> {
        let mut cfg = MergeConfig::new(raw.method);
        cfg.use_sens = raw.use_sens;
        cfg.lambda = raw.lambda.unwrap_or(cfg.lambda);
        cfg.dare_drop = raw.dare_drop.unwrap_or(cfg.dare_drop);
        cfg.ties_mask = raw.ties_mask.unwrap_or(cfg.ties_mask);
        cfg.temperature = raw.temperature;
        cfg.seed = raw.seed;
        cfg.mode = raw.mode;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl MergeConfig {
    pub fn new(method: MergeMethod) -> Self {
        Self {
            method,
            use_sens: false,
            lambda: method.default_lambda(),
            dare_drop: DEFAULT_DARE_DROP,
            ties_mask: DEFAULT_TIES_MASK,
            temperature: None,
            seed: 0,
            mode: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::InvalidArgument("lambda must be finite".into()));
        }
        check_rate("dare_drop", self.dare_drop)?;
        check_rate("ties_mask", self.ties_mask)?;
        if let Some(t) = self.temperature {
            if !t.is_finite() || t <= 0.0 {
                return Err(Error::InvalidArgument(
                    "temperature must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Row label used in reports, e.g. `ties` or `task_arithmetic[cross_task_only]`.
    pub fn label(&self) -> String {
        match self.mode {
            None | Some(SensitivityMode::Both) => self.method.as_str().to_string(),
            Some(mode) => format!("{}[{}]", self.method.as_str(), mode.as_str()),
        }
    }

    fn preprocess(&self) -> Preprocess {
        match self.method {
            MergeMethod::Ties => Preprocess::Ties {
                mask_ratio: self.ties_mask,
            },
            MergeMethod::Dare => Preprocess::Dare {
                drop_rate: self.dare_drop,
                seed: self.seed,
            },
            MergeMethod::Average | MergeMethod::TaskArithmetic => Preprocess::None,
        }
    }

    fn metadata(
        &self,
        k: usize,
        temperature: f64,
        mode: SensitivityMode,
    ) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("method".into(), self.method.as_str().into());
        m.insert("use_sens".into(), self.use_sens.to_string());
        let lambda = match self.method {
            MergeMethod::Average => 1.0 / k as f64,
            _ => self.lambda,
        };
        m.insert("lambda".into(), lambda.to_string());
        m.insert("p".into(), self.dare_drop.to_string());
        m.insert("r".into(), self.ties_mask.to_string());
        m.insert("T".into(), temperature.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("mode".into(), mode.as_str().into());
        if self.use_sens {
            m.insert("sigma_source".into(), "original_models".into());
        }
        m
    }
}

fn check_rate(what: &str, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!(
            "{what} must lie in [0, 1), got {v}"
        )));
    }
    Ok(())
}

fn check_same_layout(
    first: &Checkpoint,
    rest: impl IntoIterator<Item = impl AsRef<Checkpoint>>,
) -> Result<()> {
    rest.into_iter()
        .try_for_each(|c| first.check_compatible(c.as_ref()))
}

impl AsRef<Checkpoint> for Checkpoint {
    fn as_ref(&self) -> &Checkpoint {
        self
    }
}

/// Elementwise mean of the given checkpoints.
pub fn merge_uniform(models: &[Checkpoint]) -> Result<Checkpoint> {
    let first = models.first().ok_or(Error::Empty("no models to merge"))?;
    check_same_layout(first, &models[1..])?;
    let k = models.len() as f64;
    first.try_map(|name, t| {
        let mut acc = t.data().to_vec();
        for m in &models[1..] {
            for (a, v) in acc.iter_mut().zip(m.require(name)?.data()) {
                *a += v;
            }
        }
        Tensor::new(t.shape().to_vec(), acc.into_iter().map(|v| v / k).collect())
    })
}

/// `base + λ · Σ_k δ_k`.
pub fn merge_task_arithmetic(
    base: &Checkpoint,
    tvs: &[TaskVector],
    lambda: f64,
) -> Result<Checkpoint> {
    check_same_layout(base, tvs.iter().map(|t| &t.deltas))?;
    base.try_map(|name, b| {
        let mut sum = vec![0.0; b.len()];
        for tv in tvs {
            for (s, d) in sum.iter_mut().zip(tv.deltas.require(name)?.data()) {
                *s += d;
            }
        }
        let data = b
            .data()
            .iter()
            .zip(&sum)
            .map(|(b, s)| b + lambda * s)
            .collect();
        Tensor::new(b.shape().to_vec(), data)
    })
}

/// Number of entries a TIES trim keeps out of `n`: `ceil((1 - r)·n)`, at
/// least one. The product is nudged down by a relative 1e-9 so that values
/// like `(1 - 0.7)·10 = 3.0000000000000004` round to 3.
pub fn ties_keep_count(n: usize, mask_ratio: f64) -> usize {
    let exact = (1.0 - mask_ratio) * n as f64;
    let k = (exact - exact * 1e-9).ceil() as usize;
    k.clamp(1, n.max(1))
}

fn flatten(c: &Checkpoint) -> Vec<f64> {
    c.iter()
        .flat_map(|(_, t)| t.data().iter().copied())
        .collect()
}

fn unflatten(like: &Checkpoint, flat: &[f64]) -> Result<Checkpoint> {
    let mut at = 0;
    like.try_map(|_, t| {
        let out = Tensor::new(t.shape().to_vec(), flat[at..at + t.len()].to_vec());
        at += t.len();
        out
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiesOutput {
    /// Per-task deltas after trimming and dropping entries that disagree with
    /// the elected sign.
    pub filtered: Vec<TaskVector>,
    /// Disjoint mean of the sign-consistent entries.
    pub merged: Checkpoint,
}

/// Trim, elect sign, disjoint merge. Entries are ranked over the whole
/// flattened task vector (tensors in name order).
pub fn ties_transform(tvs: &[TaskVector], mask_ratio: f64) -> Result<TiesOutput> {
    check_rate("mask ratio", mask_ratio)?;
    let first = tvs.first().ok_or(Error::Empty("no task vectors"))?;
    check_same_layout(&first.deltas, tvs[1..].iter().map(|t| &t.deltas))?;

    let trimmed: Vec<Vec<f64>> = tvs
        .iter()
        .map(|tv| {
            let flat = flatten(&tv.deltas);
            let keep = ties_keep_count(flat.len(), mask_ratio);
            let mut order: Vec<usize> = (0..flat.len()).collect();
            order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
            let mut out = vec![0.0; flat.len()];
            for &i in &order[..keep] {
                out[i] = flat[i];
            }
            out
        })
        .collect();

    let n = trimmed[0].len();
    let mut filtered = vec![vec![0.0; n]; tvs.len()];
    let mut merged = vec![0.0; n];
    for j in 0..n {
        let total: f64 = trimmed.iter().map(|t| t[j]).sum();
        let positive = total >= 0.0;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (t, f) in trimmed.iter().zip(filtered.iter_mut()) {
            let v = t[j];
            if v != 0.0 && (v > 0.0) == positive {
                f[j] = v;
                sum += v;
                count += 1;
            }
        }
        if count > 0 {
            merged[j] = sum / count as f64;
        }
    }

    Ok(TiesOutput {
        filtered: tvs
            .iter()
            .zip(&filtered)
            .map(|(tv, f)| {
                Ok(TaskVector {
                    task_id: tv.task_id.clone(),
                    deltas: unflatten(&tv.deltas, f)?,
                })
            })
            .collect::<Result<_>>()?,
        merged: unflatten(&first.deltas, &merged)?,
    })
}

/// Uniform draw in [0, 1) for one delta entry, keyed by
/// `(seed, task_id, parameter name, flat index)`.
fn dare_uniform(seed: u64, tensor_key: u64, index: usize) -> f64 {
    let stream = mix64(seed ^ tensor_key);
    unit_f64(mix64(stream.wrapping_add(
        (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )))
}

/// Drops each entry with probability `p` and rescales survivors by `1/(1-p)`.
pub fn dare_transform(tv: &TaskVector, drop_rate: f64, seed: u64) -> Result<TaskVector> {
    check_rate("drop rate", drop_rate)?;
    let keep = 1.0 - drop_rate;
    let deltas = tv.deltas.try_map(|name, t| {
        let key = label_hash(&format!("{}\u{0}{}", tv.task_id, name));
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if dare_uniform(seed, key, i) < drop_rate {
                    0.0
                } else {
                    v / keep
                }
            })
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    })?;
    Ok(TaskVector {
        task_id: tv.task_id.clone(),
        deltas,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preprocess {
    None,
    Ties { mask_ratio: f64 },
    Dare { drop_rate: f64, seed: u64 },
}

fn preprocess(tvs: &[TaskVector], how: Preprocess) -> Result<Vec<TaskVector>> {
    match how {
        Preprocess::None => Ok(tvs.to_vec()),
        Preprocess::Ties { mask_ratio } => Ok(ties_transform(tvs, mask_ratio)?.filtered),
        Preprocess::Dare { drop_rate, seed } => tvs
            .iter()
            .map(|tv| dare_transform(tv, drop_rate, seed))
            .collect(),
    }
}

fn check_sigma(sigma: &[Vec<f64>], k: usize, partition: &LayerPartition) -> Result<()> {
    let layers = partition.num_layers();
    if sigma.len() != k || sigma.iter().any(|r| r.len() != layers) {
        return Err(Error::InvalidArgument(format!(
            "coefficient matrix must be {k}x{layers}, got {}x{}",
            sigma.len(),
            sigma.first().map_or(0, Vec::len)
        )));
    }
    for l in 0..layers {
        let col: f64 = sigma.iter().map(|r| r[l]).sum();
        if (col - 1.0).abs() > SIMPLEX_TOLERANCE
            || sigma.iter().any(|r| r[l].is_nan() || r[l] < 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "coefficients for layer {} do not form a simplex point (sum {col})",
                l + 1
            )));
        }
    }
    Ok(())
}

/// `θ^l = base^l + Σ_i w[i][l] · δ_i^l`.
fn weighted_deltas(
    base: &Checkpoint,
    tvs: &[TaskVector],
    weights: &[Vec<f64>],
    partition: &LayerPartition,
) -> Result<Checkpoint> {
    check_same_layout(base, tvs.iter().map(|t| &t.deltas))?;
    base.try_map(|name, b| {
        let l = partition
            .layer_of(name)
            .ok_or_else(|| Error::param(name, "not covered by the layer partition"))?;
        let mut data = b.data().to_vec();
        for (tv, w) in tvs.iter().zip(weights) {
            for (v, d) in data.iter_mut().zip(tv.deltas.require(name)?.data()) {
                *v += w[l] * d;
            }
        }
        Tensor::new(b.shape().to_vec(), data)
    })
}

/// `θ^l = (1 - Σ_i w[i][l]) · base^l + Σ_i w[i][l] · θ_i^l`, the same map as
/// [`weighted_deltas`] applied to full fine-tuned checkpoints. A single model
/// with weight 1 comes back bit-exactly.
fn weighted_models(
    base: &Checkpoint,
    models: &[Checkpoint],
    weights: &[Vec<f64>],
    partition: &LayerPartition,
) -> Result<Checkpoint> {
    check_same_layout(base, models)?;
    base.try_map(|name, b| {
        let l = partition
            .layer_of(name)
            .ok_or_else(|| Error::param(name, "not covered by the layer partition"))?;
        let base_weight = 1.0 - weights.iter().map(|w| w[l]).sum::<f64>();
        let mut data: Vec<f64> = b.data().iter().map(|v| base_weight * v).collect();
        for (m, w) in models.iter().zip(weights) {
            for (v, x) in data.iter_mut().zip(m.require(name)?.data()) {
                *v += w[l] * x;
            }
        }
        Tensor::new(b.shape().to_vec(), data)
    })
}

/// Per-layer coefficient merge:
/// `θ^l = base^l + Σ_i K · σ_i^l · λ · δ'_i^l`, where `δ'` is the
/// preprocessed delta. With `σ = 1/K`, `λ = 1` and no preprocessing this is
/// task arithmetic.
pub fn merge_with_coefficients(
    base: &Checkpoint,
    tvs: &[TaskVector],
    sigma: &[Vec<f64>],
    partition: &LayerPartition,
    lambda: f64,
    how: Preprocess,
) -> Result<Checkpoint> {
    let k = tvs.len();
    if k == 0 {
        return Err(Error::Empty("no task vectors"));
    }
    check_sigma(sigma, k, partition)?;
    let deltas = preprocess(tvs, how)?;
    let weights = scaled_weights(sigma, lambda);
    weighted_deltas(base, &deltas, &weights, partition)
}

fn scaled_weights(sigma: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
    let k = sigma.len() as f64;
    sigma
        .iter()
        .map(|row| row.iter().map(|s| k * s * lambda).collect())
        .collect()
}

/// Merges fine-tuned checkpoints sharing `base` according to `cfg`.
///
/// With `use_sens`, the coefficients come from `report` (computed on the
/// original fine-tuned models) under `cfg.mode` and `cfg.temperature`; the
/// method's own preprocessing and λ are kept. Unset temperature and mode
/// fall back to the report's. Averaging with sensitivity uses
/// `λ = 1/K`, so uniform coefficients reproduce the plain mean.
pub fn merge_models(
    base: &Checkpoint,
    finetuned: &[(&str, &Checkpoint)],
    cfg: &MergeConfig,
    report: Option<&SensitivityReport>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let k = finetuned.len();
    if k == 0 {
        return Err(Error::Empty("no fine-tuned models"));
    }
    let partition = layer_partition(base)?;
    let models: Vec<Checkpoint> = finetuned.iter().map(|(_, c)| (*c).clone()).collect();
    check_same_layout(base, &models)?;
    let tvs = || -> Result<Vec<TaskVector>> {
        finetuned
            .iter()
            .map(|(id, c)| compute_task_vector(c, base, id))
            .collect()
    };

    let mut temperature = cfg.temperature.unwrap_or(DEFAULT_TEMPERATURE);
    let mut mode = cfg.mode.unwrap_or_default();
    let merged = if cfg.use_sens {
        let report = report.ok_or_else(|| {
            Error::InvalidArgument("sensitivity merging needs a sensitivity report".into())
        })?;
        let ids: Vec<&str> = finetuned.iter().map(|(id, _)| *id).collect();
        if report
            .task_ids
            .iter()
            .map(String::as_str)
            .ne(ids.iter().copied())
        {
            return Err(Error::InvalidArgument(format!(
                "report covers tasks {:?}, merge requested {:?}",
                report.task_ids, ids
            )));
        }
        temperature = cfg.temperature.unwrap_or(report.temperature);
        mode = cfg.mode.unwrap_or(report.mode);
        let sigma = report.with_mode(mode, temperature)?.sigma;
        check_sigma(&sigma, k, &partition)?;
        let lambda = match cfg.method {
            MergeMethod::Average => 1.0 / k as f64,
            _ => cfg.lambda,
        };
        match cfg.preprocess() {
            Preprocess::None => {
                weighted_models(base, &models, &scaled_weights(&sigma, lambda), &partition)?
            }
            how => merge_with_coefficients(base, &tvs()?, &sigma, &partition, lambda, how)?,
        }
    } else {
        match cfg.method {
            MergeMethod::Average => merge_uniform(&models)?,
            MergeMethod::TaskArithmetic => {
                let weights = vec![vec![cfg.lambda; partition.num_layers()]; k];
                weighted_models(base, &models, &weights, &partition)?
            }
            MergeMethod::Ties => {
                let out = ties_transform(&tvs()?, cfg.ties_mask)?;
                merge_task_arithmetic(
                    base,
                    &[TaskVector {
                        task_id: "ties".into(),
                        deltas: out.merged,
                    }],
                    cfg.lambda,
                )?
            }
            MergeMethod::Dare => {
                let dropped = preprocess(
                    &tvs()?,
                    Preprocess::Dare {
                        drop_rate: cfg.dare_drop,
                        seed: cfg.seed,
                    },
                )?;
                merge_task_arithmetic(base, &dropped, cfg.lambda)?
            }
        }
    };
    Ok(merged.with_metadata(cfg.metadata(k, temperature, mode)))
}
