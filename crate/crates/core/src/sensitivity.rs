//! Sensitivity-derived merge coefficients.
//!
//! Three stages feed the per-layer, per-task coefficient matrix:
//!
//! * **Task-specific scaling.** Each parameter is scored by
//!   `|θ_j · ∂L(x_k)/∂θ_j|`, the first-order estimate of the loss change from
//!   zeroing it, summed over `m` calibration samples. Scores are summed per
//!   layer and the layer profile of each task is L2-normalized (`α`).
//! * **Cross-task scaling.** `g[i][j]` is the mean L2 distance between the
//!   logits of model `i` and expert `j` on task `j`'s calibration samples.
//!   Row sums over `j != i`, L1-normalized, give `τ`.
//! * **Fusion.** Per layer, `σ = softmax(τ_i · α_i^l / T)` across tasks.
//!
//! `g` is taken literally as a distance: a model whose logits sit further
//! from the other experts gets a larger `τ`. The report records this reading
//! in its `alignment` field.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{forward_logits, loss_and_gradients_with, Batch, GradientMap, Loss, ModelSpec};
use crate::task_vector::LayerPartition;
use crate::tensor::{norm, softmax_temp, Norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMode {
    #[default]
    Both,
    TaskSpecificOnly,
    CrossTaskOnly,
}

impl SensitivityMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Both => "both",
            Self::TaskSpecificOnly => "task_specific_only",
            Self::CrossTaskOnly => "cross_task_only",
        }
    }
}

impl std::str::FromStr for SensitivityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "task_specific_only" => Ok(Self::TaskSpecificOnly),
            "cross_task_only" => Ok(Self::CrossTaskOnly),
            other => Err(Error::InvalidArgument(format!(
                "unknown sensitivity mode `{other}`"
            ))),
        }
    }
}

/// Sums `|θ ⊙ g|` over a sequence of per-sample gradient maps.
///
/// Reduction follows the iterator order, so results are reproducible for a
/// fixed sample order.
pub fn accumulate_sensitivity<I>(params: &Checkpoint, per_sample_grads: I) -> Result<Checkpoint>
where
    I: IntoIterator<Item = Result<GradientMap>>,
{
    let mut total = params.try_map(|_, t| Tensor::zeros(t.shape().to_vec()))?;
    let mut seen = 0usize;
    for grads in per_sample_grads {
        let grads = grads?;
        params.check_compatible(&grads)?;
        total = total.try_map(|name, acc| {
            let theta = params.require(name)?.data();
            let g = grads.require(name)?.data();
            let data = acc
                .data()
                .iter()
                .zip(theta.iter().zip(g))
                .map(|(a, (t, g))| a + (t * g).abs())
                .collect();
            Tensor::new(acc.shape().to_vec(), data)
        })?;
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::Empty("calibration set has no samples"));
    }
    Ok(total)
}

/// Per-parameter sensitivity of a toy model under mean cross-entropy.
pub fn parameter_sensitivity(
    params: &Checkpoint,
    spec: &ModelSpec,
    calib: &Batch,
) -> Result<Checkpoint> {
    parameter_sensitivity_with(params, spec, calib, Loss::CrossEntropy)
}

/// Each sample's gradient is taken against that sample's own loss.
pub fn parameter_sensitivity_with(
    params: &Checkpoint,
    spec: &ModelSpec,
    calib: &Batch,
    loss: Loss,
) -> Result<Checkpoint> {
    if calib.is_empty() {
        return Err(Error::Empty("calibration set has no samples"));
    }
    accumulate_sensitivity(
        params,
        (0..calib.len()).map(|k| {
            let sample = calib.select(&[k]);
            loss_and_gradients_with(params, spec, &sample, loss).map(|(_, g)| g)
        }),
    )
}

/// Per-layer sums `s` and their L2-normalized profile `α`.
pub fn layer_scaling(
    scores: &Checkpoint,
    partition: &LayerPartition,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = partition
        .layers()
        .iter()
        .map(|group| {
            group
                .iter()
                .map(|name| scores.require(name).map(|t| t.data().iter().sum::<f64>()))
                .sum::<Result<f64>>()
        })
        .collect::<Result<Vec<f64>>>()?;
    if s.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "layer sensitivities must be finite and non-negative".into(),
        ));
    }
    let n = norm(&s, Norm::L2)?;
    if n == 0.0 {
        return Err(Error::DegenerateSensitivity);
    }
    let alpha = s.iter().map(|v| v / n).collect();
    Ok((s, alpha))
}

/// Mean per-sample L2 distance between the logits of two models.
pub fn cross_task_alignment(
    model_i: &Checkpoint,
    expert_j: &Checkpoint,
    spec: &ModelSpec,
    calib_j: &Batch,
) -> Result<f64> {
    if calib_j.is_empty() {
        return Err(Error::Empty("calibration set has no samples"));
    }
    let a = forward_logits(model_i, spec, calib_j.inputs())?;
    let b = forward_logits(expert_j, spec, calib_j.inputs())?;
    let classes = spec.num_classes();
    let mut total = 0.0;
    for (ra, rb) in a
        .data()
        .chunks_exact(classes)
        .zip(b.data().chunks_exact(classes))
    {
        total += ra
            .iter()
            .zip(rb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / calib_j.len() as f64)
}

/// `g[i][j]` for every ordered pair; the diagonal is exactly zero.
pub fn alignment_matrix(
    models: &[Checkpoint],
    spec: &ModelSpec,
    calibs: &[Batch],
) -> Result<Vec<Vec<f64>>> {
    if models.len() != calibs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} models but {} calibration sets",
            models.len(),
            calibs.len()
        )));
    }
    let k = models.len();
    let mut g = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            if i != j {
                g[i][j] = cross_task_alignment(&models[i], &models[j], spec, &calibs[j])?;
            }
        }
    }
    Ok(g)
}

pub fn cross_task_scaling(g: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = g.len();
    if k == 0 {
        return Err(Error::Empty("alignment matrix has no tasks"));
    }
    for (i, row) in g.iter().enumerate() {
        if row.len() != k {
            return Err(Error::InvalidArgument(format!(
                "alignment matrix row {i} has length {}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alignment row {i} has a negative or non-finite entry"
            )));
        }
        if row[i] != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alignment diagonal entry {i} is not zero"
            )));
        }
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let raw: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| v)
                .sum()
        })
        .collect();
    let total = norm(&raw, Norm::L1)?;
    if total == 0.0 {
        return Err(Error::DegenerateAlignment);
    }
    Ok(raw.iter().map(|v| v / total).collect())
}

/// `σ[i][l]`: per layer, a temperature softmax across the K tasks.
pub fn combined_coefficients(
    alpha: &[Vec<f64>],
    tau: &[f64],
    temperature: f64,
    mode: SensitivityMode,
) -> Result<Vec<Vec<f64>>> {
    let k = alpha.len();
    if k == 0 || tau.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{k} task-specific rows but {} cross-task entries",
            tau.len()
        )));
    }
    let layers = alpha[0].len();
    if layers == 0 || alpha.iter().any(|r| r.len() != layers) {
        return Err(Error::InvalidArgument(
            "task-specific rows must share a positive layer count".into(),
        ));
    }
    let mut sigma = vec![vec![0.0; layers]; k];
    for l in 0..layers {
        let z: Vec<f64> = (0..k)
            .map(|i| match mode {
                SensitivityMode::Both => tau[i] * alpha[i][l],
                SensitivityMode::TaskSpecificOnly => alpha[i][l],
                SensitivityMode::CrossTaskOnly => tau[i],
            })
            .collect();
        for (i, v) in softmax_temp(&z, temperature)?.into_iter().enumerate() {
            sigma[i][l] = v;
        }
    }
    Ok(sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub task_ids: Vec<String>,
    /// Per-task layer sensitivities, K×L.
    pub s: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub temperature: f64,
    pub m: usize,
    pub mode: SensitivityMode,
    /// How `g` is read when forming `τ`.
    #[serde(default = "default_alignment")]
    pub alignment: String,
}

fn default_alignment() -> String {
    "l2_distance".into()
}

pub struct TaskModel<'a> {
    pub id: &'a str,
    pub params: &'a Checkpoint,
    pub calib: &'a Batch,
}

impl SensitivityReport {
    /// Runs every stage for K fine-tuned models, each with its own
    /// calibration samples.
    pub fn compute(
        tasks: &[TaskModel<'_>],
        spec: &ModelSpec,
        partition: &LayerPartition,
        temperature: f64,
        mode: SensitivityMode,
    ) -> Result<Self> {
        let first = tasks.first().ok_or(Error::Empty("no task models"))?;
        let m = first.calib.len();
        if tasks.iter().any(|t| t.calib.len() != m) {
            return Err(Error::InvalidArgument(
                "calibration sets differ in size".into(),
            ));
        }
        let mut s = Vec::with_capacity(tasks.len());
        let mut alpha = Vec::with_capacity(tasks.len());
        for t in tasks {
            let scores = parameter_sensitivity(t.params, spec, t.calib)?;
            let (s_row, a_row) = layer_scaling(&scores, partition)?;
            s.push(s_row);
            alpha.push(a_row);
        }
        let models: Vec<Checkpoint> = tasks.iter().map(|t| t.params.clone()).collect();
        let calibs: Vec<Batch> = tasks.iter().map(|t| t.calib.clone()).collect();
        let g = alignment_matrix(&models, spec, &calibs)?;
        let tau = cross_task_scaling(&g)?;
        let sigma = combined_coefficients(&alpha, &tau, temperature, mode)?;
        Ok(Self {
            task_ids: tasks.iter().map(|t| t.id.to_string()).collect(),
            s,
            alpha,
            g,
            tau,
            sigma,
            temperature,
            m,
            mode,
            alignment: default_alignment(),
        })
    }

    /// Same α and τ, coefficients recomputed for another mode or temperature.
    pub fn with_mode(&self, mode: SensitivityMode, temperature: f64) -> Result<Self> {
        Ok(Self {
            sigma: combined_coefficients(&self.alpha, &self.tau, temperature, mode)?,
            mode,
            temperature,
            ..self.clone()
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.task_ids.len()
    }

    pub fn num_layers(&self) -> usize {
        self.sigma.first().map_or(0, Vec::len)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One row per (layer, task): `layer,task,s,alpha,sigma`, layers 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,task,s,alpha,sigma\n");
        for l in 0..self.num_layers() {
            for (i, id) in self.task_ids.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{:e},{:.12},{:.12}",
                    l + 1,
                    id,
                    self.s[i][l],
                    self.alpha[i][l],
                    self.sigma[i][l]
                );
            }
        }
        out
    }
}
