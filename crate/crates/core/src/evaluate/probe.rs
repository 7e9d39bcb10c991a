use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::metrics::{audit_metrics, compute_metrics, output_width, TaskMetrics};
use crate::augment::{apply_view, Normalization, ViewParams};
use crate::encoder::{forward, Act, BnMode, BnStats, NetworkParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{cosine_lr, AdamW, AdamWConfig, Sgd};
use crate::rng;
use crate::scalar::Scalar;
use crate::synthdata::{Dataset, Split, Target, Task, TaskKind};
use crate::trainer::{load_checkpoint, TrainState};

const FEATURE_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    LinearClassify,
    LinearRegress,
}

impl HeadKind {
    pub fn for_task(task: Task) -> Self {
        match task.kind() {
            TaskKind::Classification { .. } => HeadKind::LinearClassify,
            TaskKind::Regression { .. } => HeadKind::LinearRegress,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeOptimizer {
    Sgd { lr: f64, momentum: f64 },
    AdamW { lr: f64, weight_decay: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub task: Task,
    pub head: HeadKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: ProbeOptimizer,
    pub seed: u64,
}

impl ProbeConfig {
    /// SGD (lr 0.02, momentum 0.9, 100 epochs) for classification, AdamW
    /// (lr 0.01, 200 epochs) for regression.
    pub fn for_task(task: Task) -> Self {
        let head = HeadKind::for_task(task);
        let (epochs, optimizer) = match head {
            HeadKind::LinearClassify => (100, ProbeOptimizer::Sgd { lr: 0.02, momentum: 0.9 }),
            HeadKind::LinearRegress => (
                200,
                ProbeOptimizer::AdamW {
                    lr: 0.01,
                    weight_decay: 0.01,
                },
            ),
        };
        ProbeConfig {
            task,
            head,
            epochs,
            batch_size: 64,
            optimizer,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head != HeadKind::for_task(self.task) {
            return Err(Error::TaskMismatch(format!(
                "{:?} head cannot fit task {}",
                self.head,
                self.task.name()
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("probe epochs and batch_size must be positive".into()));
        }
        let lr = match self.optimizer {
            ProbeOptimizer::Sgd { lr, .. } | ProbeOptimizer::AdamW { lr, .. } => lr,
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("probe lr {lr} must be positive")));
        }
        Ok(())
    }
}

/// Read-only view of an encoder used for feature extraction.
#[derive(Clone, Copy, Debug)]
pub struct FrozenEncoder<'a, T: Scalar> {
    pub params: &'a NetworkParams<T>,
    pub stats: &'a BnStats<T>,
    pub normalization: Normalization,
}

impl<'a, T: Scalar> FrozenEncoder<'a, T> {
    pub fn from_state(state: &'a TrainState<T>) -> Self {
        FrozenEncoder {
            params: &state.online,
            stats: &state.stats,
            normalization: state.normalization,
        }
    }

    pub fn checksum(&self) -> String {
        format!("{}:{}", self.params.checksum(), self.stats.checksum())
    }

    /// Full-frame views resized to the encoder input and normalized.
    pub fn input_batch(&self, images: &[&Image]) -> Result<Act<T>> {
        let s = self.params.config.input_size;
        let views = images
            .iter()
            .map(|img| apply_view(img, &ViewParams::identity((img.height, img.width), s), &self.normalization))
            .collect::<Result<Vec<_>>>()?;
        Ok(Act::from_images(&views.iter().collect::<Vec<_>>()))
    }

    /// Pooled representations, row-major `images.len() × rep_dim`.
    pub fn features(&self, images: &[&Image]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len() * self.params.config.rep_dim);
        for chunk in images.chunks(FEATURE_BATCH) {
            let x = self.input_batch(chunk)?;
            let (pyr, _) = forward(self.params, self.stats, &x, BnMode::Eval, false)?;
            out.extend(pyr.rep.iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }
}

/// Feature rows and labels for one split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitData {
    pub features: Vec<f64>,
    pub labels: Vec<Target>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub dim: usize,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl ProbeData {
    /// Splits `features` (one row per dataset sample, in order) by the
    /// dataset's split assignment.
    pub fn from_dataset(dataset: &Dataset, features: &[f64], dim: usize) -> Result<Self> {
        if features.len() != dataset.samples.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} samples of dim {dim}",
                features.len(),
                dataset.samples.len()
            )));
        }
        let task = dataset.config.task;
        let mut out = ProbeData {
            dim,
            train: SplitData::default(),
            val: SplitData::default(),
            test: SplitData::default(),
        };
        for (k, s) in dataset.samples.iter().enumerate() {
            let part = match s.split {
                Split::Train => &mut out.train,
                Split::Val => &mut out.val,
                Split::Test => &mut out.test,
            };
            part.features.extend_from_slice(&features[k * dim..(k + 1) * dim]);
            part.labels.push(task.target(&s.image.labels));
        }
        Ok(out)
    }
}

/// Per-column affine standardization fitted on training rows.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[f64], dim: usize) -> Self {
        let n = (rows.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, rows: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        let mut out = rows.to_vec();
        for row in out.chunks_exact_mut(dim) {
            for k in 0..dim {
                row[k] = (row[k] - self.mean[k]) / self.std[k];
            }
        }
        out
    }

    pub fn invert(&self, rows: &mut [f64]) {
        let dim = self.mean.len();
        for row in rows.chunks_exact_mut(dim) {
            for k in 0..dim {
                row[k] = row[k] * self.std[k] + self.mean[k];
            }
        }
    }
}

/// Affine map `W x + b` with a task-dependent loss: softmax cross-entropy
/// for classification, mean squared error for regression.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LinearHead {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    /// Uniform in `±1/√inputs`.
    pub fn new(inputs: usize, outputs: usize, r: &mut rng::Rng) -> Self {
        let a = 1.0 / (inputs as f64).sqrt();
        LinearHead {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| r.random_range(-a..a)).collect(),
            bias: (0..outputs).map(|_| r.random_range(-a..a)).collect(),
        }
    }

    pub fn predict(&self, rows: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() / self.inputs * self.outputs);
        for x in rows.chunks_exact(self.inputs) {
            for o in 0..self.outputs {
                let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                out.push(self.bias[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        out
    }

    /// Batch-mean loss and the gradient w.r.t. the outputs. Regression
    /// targets are rows of `outputs` values.
    pub fn loss_grad(&self, outputs: &[f64], targets: &HeadTargets) -> (f64, Vec<f64>) {
        let m = self.outputs;
        let n = outputs.len() / m;
        let mut grad = vec![0.0; outputs.len()];
        let mut loss = 0.0;
        match targets {
            HeadTargets::Classes(ys) => {
                for ((row, g), &y) in outputs.chunks_exact(m).zip(grad.chunks_exact_mut(m)).zip(ys.iter()) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    loss += sum.ln() + max - row[y];
                    for (k, gk) in g.iter_mut().enumerate() {
                        *gk = ((row[k] - max).exp() / sum - f64::from(u8::from(k == y))) / n as f64;
                    }
                }
            }
            HeadTargets::Values(ys) => {
                let denom = (n * m) as f64;
                for ((p, g), y) in outputs.iter().zip(grad.iter_mut()).zip(ys.iter()) {
                    loss += (p - y) * (p - y);
                    *g = 2.0 * (p - y) / denom;
                }
                return (loss / denom, grad);
            }
        }
        (loss / n as f64, grad)
    }

    /// Parameter gradients and input gradients for upstream `d_out`.
    pub fn backward(&self, rows: &[f64], d_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (d, m) = (self.inputs, self.outputs);
        let mut gw = vec![0.0; d * m];
        let mut gb = vec![0.0; m];
        let mut gx = vec![0.0; rows.len()];
        for ((x, g), gxr) in rows.chunks_exact(d).zip(d_out.chunks_exact(m)).zip(gx.chunks_exact_mut(d)) {
            for o in 0..m {
                gb[o] += g[o];
                let w = &self.weight[o * d..(o + 1) * d];
                for k in 0..d {
                    gw[o * d + k] += g[o] * x[k];
                    gxr[k] += g[o] * w[k];
                }
            }
        }
        (gw, gb, gx)
    }
}

pub(crate) const HEAD_STREAM: u64 = 0x9b0e;

pub(crate) enum HeadTargets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl HeadTargets {
    pub fn select(&self, idx: &[usize], width: usize) -> HeadTargets {
        match self {
            HeadTargets::Classes(ys) => HeadTargets::Classes(idx.iter().map(|&i| ys[i]).collect()),
            HeadTargets::Values(ys) => {
                HeadTargets::Values(idx.iter().flat_map(|&i| ys[i * width..(i + 1) * width].iter().copied()).collect())
            }
        }
    }
}

pub(crate) enum HeadOptimizer {
    Sgd(Sgd<f64>),
    AdamW(AdamW<f64>),
}

impl HeadOptimizer {
    pub fn new(kind: ProbeOptimizer, sizes: &[usize]) -> Self {
        match kind {
            ProbeOptimizer::Sgd { lr, momentum } => HeadOptimizer::Sgd(Sgd::new(lr, momentum, sizes)),
            ProbeOptimizer::AdamW { lr, weight_decay } => HeadOptimizer::AdamW(AdamW::new(
                AdamWConfig {
                    lr,
                    weight_decay,
                    ..AdamWConfig::default()
                },
                sizes,
            )),
        }
    }

    pub fn base_lr(&self) -> f64 {
        match self {
            HeadOptimizer::Sgd(o) => o.lr,
            HeadOptimizer::AdamW(o) => o.config.lr,
        }
    }

    pub fn update(&mut self, lr: f64, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        match self {
            HeadOptimizer::Sgd(o) => {
                o.lr = lr;
                o.update(params, grads)
            }
            HeadOptimizer::AdamW(o) => {
                let decay = vec![true; params.len()];
                o.update(lr, params, grads, &decay)
            }
        }
    }
}

pub(crate) fn split_targets(labels: &[Target], task: Task) -> Result<(HeadTargets, Option<Standardizer>)> {
    let mismatch = || Error::TaskMismatch(format!("labels do not match task {}", task.name()));
    match task.kind() {
        TaskKind::Classification { classes } => {
            let ys = labels
                .iter()
                .map(|t| match *t {
                    Target::Class(y) if y < classes => Ok(y),
                    _ => Err(mismatch()),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((HeadTargets::Classes(ys), None))
        }
        TaskKind::Regression { .. } => {
            let raw = labels
                .iter()
                .map(|t| match *t {
                    Target::Values(v) => Ok(v),
                    Target::Class(_) => Err(mismatch()),
                })
                .collect::<Result<Vec<_>>>()?;
            let flat: Vec<f64> = raw.iter().flatten().copied().collect();
            let st = Standardizer::fit(&flat, 3);
            Ok((HeadTargets::Values(st.apply(&flat)), Some(st)))
        }
    }
}

/// Linear head fitted on frozen features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    pub val: TaskMetrics,
    pub test: TaskMetrics,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub test_predictions: Vec<f64>,
}

/// Trains a linear head on the train split, keeps the weights with the best
/// validation metric, and evaluates them on the test split. Features and
/// regression targets are standardized with training-split statistics.
pub fn probe_features(data: &ProbeData, cfg: &ProbeConfig) -> Result<ProbeFit> {
    fit_probe(data, cfg, false)
}

/// [`probe_features`], optionally with a half-cosine learning-rate decay over
/// all steps.
pub(crate) fn fit_probe(data: &ProbeData, cfg: &ProbeConfig, cosine: bool) -> Result<ProbeFit> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::DatasetTooSmall("probe needs non-empty train, val and test splits".into()));
    }
    let task = cfg.task;
    let width = output_width(task);
    let dim = data.dim;
    let fs = Standardizer::fit(&data.train.features, dim);
    let x_train = fs.apply(&data.train.features);
    let x_val = fs.apply(&data.val.features);
    let x_test = fs.apply(&data.test.features);
    let (targets, target_std) = split_targets(&data.train.labels, task)?;
    split_targets(&data.val.labels, task)?;
    split_targets(&data.test.labels, task)?;

    let mut r = rng::substream(cfg.seed, HEAD_STREAM);
    let mut head = LinearHead::new(dim, width, &mut r);
    let mut opt = HeadOptimizer::new(cfg.optimizer, &[head.weight.len(), head.bias.len()]);
    let base_lr = opt.base_lr();
    let evaluate = |head: &LinearHead, x: &[f64], labels: &[Target]| -> Result<(TaskMetrics, Vec<f64>)> {
        let mut p = head.predict(x);
        if let Some(st) = &target_std {
            st.invert(&mut p);
        }
        Ok((compute_metrics(&p, labels, task)?, p))
    };

    let n = data.train.len();
    let total = (cfg.epochs * n.div_ceil(cfg.batch_size)) as u64;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, usize, LinearHead, TaskMetrics)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut r);
        for idx in order.chunks(cfg.batch_size) {
            let lr = if cosine { cosine_lr(base_lr, step, total) } else { base_lr };
            step += 1;
            let rows: Vec<f64> = idx.iter().flat_map(|&i| x_train[i * dim..(i + 1) * dim].iter().copied()).collect();
            let out = head.predict(&rows);
            let (_, d_out) = head.loss_grad(&out, &targets.select(idx, width));
            let (gw, gb, _) = head.backward(&rows, &d_out);
            opt.update(lr, vec![&mut head.weight, &mut head.bias], vec![&gw, &gb])?;
        }
        let (val, _) = evaluate(&head, &x_val, &data.val.labels)?;
        if !val.score().is_finite() {
            return Err(Error::NonFiniteLoss {
                step: epoch as u64,
                repro: format!("probe on {} diverged", task.name()),
            });
        }
        if best.as_ref().is_none_or(|b| val.score() > b.0) {
            best = Some((val.score(), epoch, head.clone(), val));
        }
    }
    let (_, best_epoch, head, val) = best.expect("at least one epoch");
    let (test, test_predictions) = evaluate(&head, &x_test, &data.test.labels)?;
    assert!(
        audit_metrics(&test_predictions, &data.test.labels, task, &test),
        "metric audit failed"
    );
    Ok(ProbeFit {
        val,
        test,
        best_epoch,
        test_predictions,
    })
}

/// Test-split metrics of a linear probe on a frozen encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub seed: u64,
    pub checkpoint: String,
    pub metrics: TaskMetrics,
    pub val: TaskMetrics,
    pub best_epoch: usize,
    pub encoder_checksum: String,
}

/// Probes `encoder` on `dataset`. The encoder and its running statistics are
/// only read; their checksum is recorded and verified after probing.
pub fn linear_probe<T: Scalar>(
    encoder: &FrozenEncoder<'_, T>,
    dataset: &Dataset,
    cfg: &ProbeConfig,
    checkpoint: &str,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if dataset.config.task != cfg.task {
        return Err(Error::TaskMismatch(format!(
            "dataset is labeled for {}, probe expects {}",
            dataset.config.task.name(),
            cfg.task.name()
        )));
    }
    let before = encoder.checksum();
    let images: Vec<&Image> = dataset.samples.iter().map(|s| &s.image.pixels).collect();
    let features = encoder.features(&images)?;
    let data = ProbeData::from_dataset(dataset, &features, encoder.params.config.rep_dim)?;
    let fit = probe_features(&data, cfg)?;
    let after = encoder.checksum();
    assert_eq!(before, after, "probe modified the encoder");
    Ok(MetricsReport {
        task: cfg.task,
        seed: cfg.seed,
        checkpoint: checkpoint.to_string(),
        metrics: fit.test,
        val: fit.val,
        best_epoch: fit.best_epoch,
        encoder_checksum: after,
    })
}

/// [`linear_probe`] on the online encoder stored in a checkpoint file.
pub fn linear_probe_checkpoint<T: Scalar>(path: &Path, dataset: &Dataset, cfg: &ProbeConfig) -> Result<MetricsReport> {
    let state: TrainState<T> = load_checkpoint(path)?;
    linear_probe(&FrozenEncoder::from_state(&state), dataset, cfg, &path.display().to_string())
}
