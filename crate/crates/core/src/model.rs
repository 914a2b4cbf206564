//! Toy multilayer perceptron: tanh hidden layers, linear output logits, and
//! exact reverse-mode gradients of the batch-mean loss.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Per-parameter gradients, keyed and shaped like the checkpoint they were
/// computed against.
pub type GradientMap = Checkpoint;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input dimension first, class count last.
    pub layer_sizes: Vec<usize>,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        let spec = Self { layer_sizes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer_sizes must list at least two positive sizes, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer}.bias")
    }

    /// `(fan_out, fan_in)` of layer `l`, 1-based.
    fn dims(&self, layer: usize) -> (usize, usize) {
        (self.layer_sizes[layer], self.layer_sizes[layer - 1])
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init_params(&self, seed: u64) -> Result<Checkpoint> {
        self.validate()?;
        let mut rng = seed::rng(seed, "init");
        let mut ckpt = Checkpoint::new();
        for l in 1..=self.num_layers() {
            let (out, inp) = self.dims(l);
            let bound = 1.0 / (inp as f64).sqrt();
            let w = (0..out * inp)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            ckpt.insert(Self::weight_name(l), Tensor::new(vec![out, inp], w)?);
            ckpt.insert(Self::bias_name(l), Tensor::zeros(vec![out])?);
        }
        Ok(ckpt)
    }

    fn layers<'a>(&self, params: &'a Checkpoint) -> Result<Vec<(&'a [f64], &'a [f64])>> {
        self.validate()?;
        (1..=self.num_layers())
            .map(|l| {
                let (out, inp) = self.dims(l);
                let w = expect_shape(params, &Self::weight_name(l), &[out, inp])?;
                let b = expect_shape(params, &Self::bias_name(l), &[out])?;
                Ok((w, b))
            })
            .collect()
    }
}

fn expect_shape<'a>(params: &'a Checkpoint, name: &str, shape: &[usize]) -> Result<&'a [f64]> {
    let t = params.require(name)?;
    if t.shape() != shape {
        return Err(Error::param(
            name,
            format!("expected shape {shape:?}, found {:?}", t.shape()),
        ));
    }
    Ok(t.data())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Tensor,
    targets: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "batch inputs must be [n, d], got {:?}",
                inputs.shape()
            )));
        }
        if inputs.shape()[0] != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} input rows but {} targets",
                inputs.shape()[0],
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: Vec<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("dataset has no samples"));
        }
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("ragged input rows".into()));
        }
        let data = rows.concat();
        Self::new(Tensor::new(vec![rows.len(), d], data)?, targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.inputs.data()[i * d..(i + 1) * d]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            inputs: Tensor::new(vec![indices.len(), d], data).expect("rows of a valid batch"),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    /// Concatenates batches sharing an input dimension.
    pub fn concat(parts: &[Batch]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or(Error::Empty("no batches to concatenate"))?;
        let d = first.dim();
        let mut data = Vec::new();
        let mut targets = Vec::new();
        for p in parts {
            if p.dim() != d {
                return Err(Error::ShapeMismatch {
                    left: first.inputs.shape().to_vec(),
                    right: p.inputs.shape().to_vec(),
                });
            }
            data.extend_from_slice(p.inputs.data());
            targets.extend_from_slice(&p.targets);
        }
        Self::new(Tensor::new(vec![targets.len(), d], data)?, targets)
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty("batch has no samples"));
        }
        if self.dim() != spec.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "batch has input dim {}, model expects {}",
                self.dim(),
                spec.input_dim()
            )));
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t >= spec.num_classes()) {
            return Err(Error::InvalidArgument(format!(
                "target {t} out of range for {} classes",
                spec.num_classes()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Mean softmax cross-entropy.
    #[default]
    CrossEntropy,
    /// Mean of the negated target logit. Linear in the logits, so a model
    /// without hidden layers has a loss that is linear in every parameter.
    NegativeTargetLogit,
}

/// Row-major `[n, out] = x[n, inp] · w[out, inp]^T + b`.
fn affine(x: &[f64], n: usize, inp: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut z = Vec::with_capacity(n * out);
    for row in x.chunks_exact(inp).take(n) {
        for (o, wr) in w.chunks_exact(inp).enumerate() {
            z.push(b[o] + row.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>());
        }
    }
    z
}

/// Activations of every layer: index 0 is the input, the last entry the logits.
fn forward_all(
    layers: &[(&[f64], &[f64])],
    spec: &ModelSpec,
    x: &[f64],
    n: usize,
) -> Vec<Vec<f64>> {
    let mut acts = vec![x.to_vec()];
    for (l, (w, b)) in layers.iter().enumerate() {
        let inp = spec.layer_sizes[l];
        let mut z = affine(acts.last().expect("non-empty"), n, inp, w, b);
        if l + 1 < layers.len() {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(z);
    }
    acts
}

pub fn forward_logits(params: &Checkpoint, spec: &ModelSpec, inputs: &Tensor) -> Result<Tensor> {
    let layers = spec.layers(params)?;
    let shape = inputs.shape();
    if shape.len() != 2 || shape[1] != spec.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "inputs must be [n, {}], got {shape:?}",
            spec.input_dim()
        )));
    }
    let n = shape[0];
    let logits = forward_all(&layers, spec, inputs.data(), n)
        .pop()
        .expect("non-empty");
    Tensor::new(vec![n, spec.num_classes()], logits)
}

/// Per-sample loss values and the gradient of the batch-mean loss with
/// respect to the logits.
fn loss_head(
    logits: &[f64],
    targets: &[usize],
    classes: usize,
    loss: Loss,
) -> (Vec<f64>, Vec<f64>) {
    let n = targets.len();
    let scale = 1.0 / n as f64;
    let mut per_sample = Vec::with_capacity(n);
    let mut grad = vec![0.0; logits.len()];
    for (i, (row, &y)) in logits.chunks_exact(classes).zip(targets).enumerate() {
        let g = &mut grad[i * classes..(i + 1) * classes];
        match loss {
            Loss::CrossEntropy => {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                per_sample.push(lse - row[y]);
                for (gc, &v) in g.iter_mut().zip(row) {
                    *gc = (v - lse).exp() * scale;
                }
                g[y] -= scale;
            }
            Loss::NegativeTargetLogit => {
                per_sample.push(-row[y]);
                g[y] = -scale;
            }
        }
    }
    (per_sample, grad)
}

/// Per-sample losses at `params`, without gradients.
pub fn sample_losses(
    params: &Checkpoint,
    spec: &ModelSpec,
    batch: &Batch,
    loss: Loss,
) -> Result<Vec<f64>> {
    batch.check(spec)?;
    let logits = forward_logits(params, spec, batch.inputs())?;
    Ok(loss_head(logits.data(), batch.targets(), spec.num_classes(), loss).0)
}

pub fn loss_and_gradients(
    params: &Checkpoint,
    spec: &ModelSpec,
    batch: &Batch,
) -> Result<(f64, GradientMap)> {
    loss_and_gradients_with(params, spec, batch, Loss::CrossEntropy)
}

pub fn loss_and_gradients_with(
    params: &Checkpoint,
    spec: &ModelSpec,
    batch: &Batch,
    loss: Loss,
) -> Result<(f64, GradientMap)> {
    let layers = spec.layers(params)?;
    batch.check(spec)?;
    let n = batch.len();
    let acts = forward_all(&layers, spec, batch.inputs().data(), n);
    let (per_sample, mut delta) = loss_head(
        acts.last().expect("non-empty"),
        batch.targets(),
        spec.num_classes(),
        loss,
    );
    let value = per_sample.iter().sum::<f64>() / n as f64;
    if !value.is_finite() {
        return Err(Error::InvalidArgument("loss is not finite".into()));
    }

    let mut grads = GradientMap::new();
    for l in (1..=spec.num_layers()).rev() {
        let (out, inp) = spec.dims(l);
        let (w, _) = layers[l - 1];
        let prev = &acts[l - 1];
        let mut gw = vec![0.0; out * inp];
        let mut gb = vec![0.0; out];
        for (d_row, a_row) in delta.chunks_exact(out).zip(prev.chunks_exact(inp)) {
            for (o, &d) in d_row.iter().enumerate() {
                gb[o] += d;
                for (g, &a) in gw[o * inp..(o + 1) * inp].iter_mut().zip(a_row) {
                    *g += d * a;
                }
            }
        }
        if l > 1 {
            // back through w, then through tanh (prev already holds tanh(z))
            let mut next = vec![0.0; n * inp];
            for ((nd, d_row), a_row) in next
                .chunks_exact_mut(inp)
                .zip(delta.chunks_exact(out))
                .zip(prev.chunks_exact(inp))
            {
                for (o, &d) in d_row.iter().enumerate() {
                    for (x, &wv) in nd.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                        *x += d * wv;
                    }
                }
                for (x, &a) in nd.iter_mut().zip(a_row) {
                    *x *= 1.0 - a * a;
                }
            }
            delta = next;
        }
        grads.insert(ModelSpec::weight_name(l), Tensor::new(vec![out, inp], gw)?);
        grads.insert(ModelSpec::bias_name(l), Tensor::new(vec![out], gb)?);
    }
    Ok((value, grads))
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_accuracy(params: &Checkpoint, spec: &ModelSpec, data: &Batch) -> Result<f64> {
    data.check(spec)?;
    let logits = forward_logits(params, spec, data.inputs())?;
    let correct = logits
        .data()
        .chunks_exact(spec.num_classes())
        .zip(data.targets())
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 20,
            batch_size: 32,
        }
    }
}

pub enum Init<'a> {
    From(&'a Checkpoint),
    Seed(u64),
}

/// Plain minibatch SGD. Sample order per epoch comes from a permutation keyed
/// by `(seed, epoch)`, so identical inputs give bit-identical checkpoints.
pub fn train_sgd(
    spec: &ModelSpec,
    data: &Batch,
    hyper: &TrainConfig,
    init: Init<'_>,
    seed: u64,
) -> Result<Checkpoint> {
    if !hyper.lr.is_finite() || hyper.lr < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "invalid learning rate {}",
            hyper.lr
        )));
    }
    if hyper.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be at least 1".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch_size must be at least 1".into(),
        ));
    }
    data.check(spec)?;
    let mut params = match init {
        Init::From(ckpt) => {
            spec.layers(ckpt)?;
            ckpt.clone()
        }
        Init::Seed(s) => spec.init_params(s)?,
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed, &format!("epoch{epoch}")));
        for chunk in order.chunks(hyper.batch_size) {
            let batch = data.select(chunk);
            let (loss, grads) = loss_and_gradients(&params, spec, &batch)
                .map_err(|_| Error::Diverged { epoch, step })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            params = params
                .try_map(|name, p| {
                    p.combine(grads.require(name)?, crate::tensor::Combine::Sub, hyper.lr)
                })
                .map_err(|_| Error::Diverged { epoch, step })?;
            step += 1;
        }
    }
    Ok(params)
}

#[derive(Serialize, Deserialize)]
struct Record {
    x: Vec<f64>,
    y: usize,
}

/// Writes one `{"x": [...], "y": label}` object per line.
pub fn write_jsonl(batch: &Batch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for i in 0..batch.len() {
        let rec = Record {
            x: batch.row(i).to_vec(),
            y: batch.targets[i],
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSON Lines dataset, rejecting rows of the wrong arity or with
/// labels outside `0..classes`.
pub fn read_jsonl(path: impl AsRef<Path>, dim: usize, classes: usize) -> Result<Batch> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, reason: String| Error::Dataset {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
        if rec.x.len() != dim {
            return Err(bad(
                i + 1,
                format!("expected {dim} features, found {}", rec.x.len()),
            ));
        }
        if rec.y >= classes {
            return Err(bad(
                i + 1,
                format!("label {} out of range 0..{classes}", rec.y),
            ));
        }
        data.extend(rec.x);
        targets.push(rec.y);
    }
    if targets.is_empty() {
        return Err(bad(0, "no samples".into()));
    }
    Batch::new(Tensor::new(vec![targets.len(), dim], data)?, targets)
}
