//! Two-branch pretraining: view sampling, forward passes, combined loss,
//! optimizer and EMA updates, checkpoints and per-step logging.

mod checkpoint;
mod rundir;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use rundir::{checkpoint_name, RunDir, CHECKPOINT_DIR, METRICS_LOG, REPLAY_LOG};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_view, sample_view_params, AugmentConfig, Normalization, ViewParams};
use crate::encoder::{backward, ema_blend, forward, init_branches, Act, BnMode, BnStats, EncoderConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{combined_loss, LossConfig, LossReport, LossSubset, PrototypeBank, ViewWarps, REGION_LAYER};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Target-branch EMA momentum.
    pub ema_momentum: f64,
    pub seed: u64,
    pub cosine_schedule: bool,
    pub enabled: LossSubset,
    pub losses: LossConfig,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            base_lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            ema_momentum: 0.996,
            seed: 0,
            cosine_schedule: false,
            enabled: LossSubset::all(),
            losses: LossConfig::default(),
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return bad(format!("ema_momentum {} outside (0, 1)", self.ema_momentum));
        }
        if self.augment.output_size != self.encoder.input_size {
            return bad(format!(
                "augment output_size {} differs from encoder input_size {}",
                self.augment.output_size, self.encoder.input_size
            ));
        }
        self.losses.validate()?;
        self.encoder.validate()?;
        self.augment.validate()
    }

    /// Loss settings with the disabled terms zeroed.
    pub fn effective_losses(&self) -> LossConfig {
        LossConfig {
            weights: self.enabled.mask(self.losses.weights),
            ..self.losses.clone()
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.base_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    /// Steps in one epoch over `n` images: full batches only, at least one.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        (n / self.batch_size).max(1)
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TrainState<T: Scalar> {
    pub config: TrainConfig,
    pub online: NetworkParams<T>,
    pub target: NetworkParams<T>,
    /// Running normalization statistics of the online branch.
    pub stats: BnStats<T>,
    pub bank: PrototypeBank<T>,
    pub optimizer: AdamW<T>,
    pub normalization: Normalization,
    pub step: u64,
    pub epoch: u32,
    /// Schedule length, fixed when the run starts.
    pub total_steps: u64,
    pub rng: Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut seeds = rng::substream(config.seed, 1);
        let (online, target) = init_branches(&config.encoder, seeds.random())?;
        let bank = PrototypeBank::random(
            config.losses.prototypes,
            config.encoder.tap_channels(REGION_LAYER),
            config.losses.temperature,
            seeds.random(),
        )?;
        let mut sizes: Vec<usize> = online.tensors().iter().map(|t| t.len()).collect();
        sizes.push(bank.vectors.len());
        Ok(TrainState {
            stats: BnStats::new(&online),
            optimizer: AdamW::new(config.optimizer(), &sizes),
            normalization: Normalization::default(),
            rng: rng::substream(config.seed, 2),
            step: 0,
            epoch: 0,
            total_steps: 0,
            config,
            online,
            target,
            bank,
        })
    }

    pub fn current_lr(&self) -> f64 {
        if self.config.cosine_schedule {
            cosine_lr(self.config.base_lr, self.step, self.total_steps)
        } else {
            self.config.base_lr
        }
    }

    /// Checksum of the online encoder and its running statistics.
    pub fn encoder_checksum(&self) -> String {
        format!("{}:{}", self.online.checksum(), self.stats.checksum())
    }
}

/// Per-dimension spread of a batch of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CollapseStats {
    pub std: Vec<f64>,
    pub mean_std: f64,
    pub alarm: bool,
}

pub const COLLAPSE_THRESHOLD: f64 = 1e-3;
pub const COLLAPSE_MIN_BATCH: usize = 8;

/// Population standard deviation of each dimension across `rows` embeddings;
/// alarms when the mean falls below [`COLLAPSE_THRESHOLD`].
pub fn collapse_monitor<T: Scalar>(embeddings: &[T], rows: usize) -> Result<CollapseStats> {
    if rows < COLLAPSE_MIN_BATCH || !embeddings.len().is_multiple_of(rows) {
        return Err(Error::InvalidConfig(format!(
            "collapse monitor needs at least {COLLAPSE_MIN_BATCH} rows, got {rows}"
        )));
    }
    let dim = embeddings.len() / rows;
    let std: Vec<f64> = (0..dim)
        .map(|d| {
            let col = (0..rows).map(|r| embeddings[r * dim + d].as_f64());
            let mean = col.clone().sum::<f64>() / rows as f64;
            (col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64).sqrt()
        })
        .collect();
    let mean_std = std.iter().sum::<f64>() / dim.max(1) as f64;
    Ok(CollapseStats {
        alarm: mean_std < COLLAPSE_THRESHOLD,
        std,
        mean_std,
    })
}

/// One optimizer step, as seen by observers.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: u32,
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
    /// Mean per-dimension std of the online projections of the first view;
    /// `None` for batches below the monitor's minimum.
    pub proj_std: Option<f64>,
    pub collapse_alarm: bool,
    pub indices: Vec<usize>,
    pub views: Vec<[ViewParams; 2]>,
}

#[derive(Serialize)]
struct Repro<'a> {
    step: u64,
    epoch: u32,
    indices: &'a [usize],
    views: &'a [[ViewParams; 2]],
    report: &'a LossReport,
}

fn render_batch(images: &[&Image], params: &[[ViewParams; 2]], norm: &Normalization, which: usize) -> Result<Vec<Image>> {
    images
        .iter()
        .zip(params)
        .map(|(img, p)| apply_view(img, &p[which], norm))
        .collect()
}

/// Samples two views per image, runs both branches, and applies the
/// optimizer, EMA and prototype renormalization in that order.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, images: &[&Image], indices: &[usize]) -> Result<StepRecord> {
    if images.is_empty() || images.len() != indices.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images with {} indices",
            images.len(),
            indices.len()
        )));
    }
    let cfg = state.config.clone();
    let views: Vec<[ViewParams; 2]> = images
        .iter()
        .map(|img| {
            let size = (img.height, img.width);
            let a = sample_view_params(&mut state.rng, size, &cfg.augment);
            let b = sample_view_params(&mut state.rng, size, &cfg.augment);
            [a, b]
        })
        .collect();
    let warps: Vec<ViewWarps> = views.iter().map(|v| ViewWarps::between(&v[0], &v[1])).collect();
    let v1 = render_batch(images, &views, &state.normalization, 0)?;
    let v2 = render_batch(images, &views, &state.normalization, 1)?;
    let x1: Act<T> = Act::from_images(&v1.iter().collect::<Vec<_>>());
    let x2: Act<T> = Act::from_images(&v2.iter().collect::<Vec<_>>());

    let (on1, c1) = forward(&state.online, &state.stats, &x1, BnMode::Train, true)?;
    let (on2, c2) = forward(&state.online, &state.stats, &x2, BnMode::Train, true)?;
    let (tg1, _) = forward(&state.target, &state.stats, &x1, BnMode::Train, false)?;
    let (tg2, _) = forward(&state.target, &state.stats, &x2, BnMode::Train, false)?;

    let losses = cfg.effective_losses();
    let (report, grads) = combined_loss([&on1, &on2], [&tg1, &tg2], &warps, &state.bank, &losses)?;
    if !report.total.is_finite() {
        let repro = Repro {
            step: state.step,
            epoch: state.epoch,
            indices,
            views: &views,
            report: &report,
        };
        return Err(Error::NonFiniteLoss {
            step: state.step,
            repro: serde_json::to_string(&repro)?,
        });
    }
    let [g1, g2] = &grads.online;
    let (mut total, _) = backward(&state.online, &c1, g1, false)?;
    let (other, _) = backward(&state.online, &c2, g2, false)?;
    total.accumulate(&other);

    let lr = state.current_lr();
    let mut params = state.online.tensors_mut();
    params.push(&mut state.bank.vectors);
    let mut gl = total.tensors();
    gl.push(&grads.bank);
    let mut decay = vec![true; gl.len()];
    *decay.last_mut().expect("bank tensor") = false;
    state.optimizer.update(lr, params, gl, &decay)?;
    ema_blend(&state.online, &mut state.target, cfg.ema_momentum)?;
    state.bank.renormalize()?;
    state.stats.update(&c1, crate::encoder::BN_MOMENTUM);
    state.stats.update(&c2, crate::encoder::BN_MOMENTUM);

    let collapse = collapse_monitor(&on1.proj, on1.batch()).ok();
    let record = StepRecord {
        epoch: state.epoch,
        step: state.step,
        lr,
        report,
        proj_std: collapse.as_ref().map(|c| c.mean_std),
        collapse_alarm: collapse.is_some_and(|c| c.alarm),
        indices: indices.to_vec(),
        views,
    };
    state.step += 1;
    Ok(record)
}

/// Receives progress from [`pretrain`].
pub trait PretrainObserver<T: Scalar> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called after every completed epoch, and once for the initial state
    /// when the run has zero epochs.
    fn on_checkpoint(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

pub struct NullObserver;

impl<T: Scalar> PretrainObserver<T> for NullObserver {}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PretrainSummary {
    pub steps: u64,
    /// Mean total loss of each epoch run in this call.
    pub epoch_totals: Vec<f64>,
    pub last_proj_std: Option<f64>,
    pub collapse_alarms: u64,
}

/// Runs the remaining epochs of `state` over `images` (labels unused).
/// Resuming from a checkpointed state continues the original run exactly.
pub fn pretrain<T: Scalar>(
    state: &mut TrainState<T>,
    images: &[&Image],
    observer: &mut dyn PretrainObserver<T>,
) -> Result<PretrainSummary> {
    state.config.validate()?;
    let mut summary = PretrainSummary::default();
    if state.config.epochs == 0 {
        observer.on_checkpoint(state)?;
        return Ok(summary);
    }
    if images.is_empty() {
        return Err(Error::DatasetTooSmall("no images to pretrain on".into()));
    }
    let n = images.len();
    let batch = state.config.batch_size.min(n);
    let steps = state.config.steps_per_epoch(n);
    if state.total_steps == 0 {
        state.total_steps = steps as u64 * u64::from(state.config.epochs);
    }
    while state.epoch < state.config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.rng);
        let mut total = 0.0;
        for s in 0..steps {
            let idx = &order[s * batch..(s + 1) * batch];
            let imgs: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
            let rec = train_step(state, &imgs, idx)?;
            total += rec.report.total;
            summary.steps += 1;
            summary.last_proj_std = rec.proj_std;
            summary.collapse_alarms += u64::from(rec.collapse_alarm);
            observer.on_step(&rec)?;
        }
        summary.epoch_totals.push(total / steps as f64);
        state.epoch += 1;
        observer.on_checkpoint(state)?;
    }
    Ok(summary)
}
