use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{audit_metrics, compute_metrics, output_width, TaskMetrics};
use super::probe::{
    fit_probe, split_targets, FrozenEncoder, HeadKind, LinearHead, MetricsReport, ProbeConfig, ProbeData,
    ProbeOptimizer, Standardizer, HEAD_STREAM,
};
use crate::encoder::{backward, forward, Act, BnMode, NetworkParams, PyramidGrads, TAP_UNITS};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{cosine_lr, Sgd};
use crate::rng;
use crate::scalar::Scalar;
use crate::synthdata::{Dataset, Split, Target, TaskKind};
use crate::trainer::TrainState;

/// Transfer protocol: pooled stage-3 and stage-4 features feed a fresh
/// classifier, and only stage 4 and the classifier are trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub cosine: bool,
    /// When false stage 4 stays frozen too.
    pub train_stage4: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            enabled: false,
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            cosine: true,
            train_stage4: true,
            seed: 0,
        }
    }
}

/// First unit of stage 4.
const STAGE4_START: usize = TAP_UNITS[1] + 1;

/// Hash of every unit before stage 4.
pub fn frozen_stages_checksum<T: Scalar>(params: &NetworkParams<T>) -> String {
    let mut h = Sha256::new();
    for u in &params.units[..STAGE4_START] {
        for v in u.weight.iter().chain(&u.gamma).chain(&u.beta) {
            h.update(v.bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn pooled_readout<T: Scalar>(f3: &Act<T>, f4: &Act<T>) -> Vec<f64> {
    let n = f4.batch;
    let width = f3.channels + f4.channels;
    let mut out = vec![0.0; n * width];
    let mut col = 0;
    for a in [f3, f4] {
        let plane = a.plane();
        for c in 0..a.channels {
            for b in 0..n {
                let o = (c * n + b) * plane;
                out[b * width + col + c] = a.data[o..o + plane].iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
            }
        }
        col += a.channels;
    }
    out
}

/// Concatenated pooled F3 and F4, one row per image.
pub fn multipool_features<T: Scalar>(encoder: &FrozenEncoder<'_, T>, images: &[&Image]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in images.chunks(32) {
        let x = encoder.input_batch(chunk)?;
        let (p, _) = forward(encoder.params, encoder.stats, &x, BnMode::Eval, false)?;
        out.extend(pooled_readout(&p.f3, &p.f4));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub report: MetricsReport,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
}

/// Runs the multipool transfer protocol on a classification dataset. The
/// encoder runs with frozen normalization statistics throughout.
pub fn multipool_finetune<T: Scalar>(
    state: &TrainState<T>,
    dataset: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if !cfg.enabled {
        return Err(Error::InvalidConfig("multipool fine-tune is disabled in this configuration".into()));
    }
    let task = dataset.config.task;
    if !matches!(task.kind(), TaskKind::Classification { .. }) {
        return Err(Error::TaskMismatch(format!("fine-tune needs class labels, {} has none", task.name())));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("fine-tune epochs, batch_size and lr must be positive".into()));
    }
    let encoder = FrozenEncoder::from_state(state);
    let before = frozen_stages_checksum(&state.online);
    let probe = ProbeConfig {
        task,
        head: HeadKind::for_task(task),
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: ProbeOptimizer::Sgd {
            lr: cfg.lr,
            momentum: cfg.momentum,
        },
        seed: cfg.seed,
    };
    let images: Vec<&Image> = dataset.samples.iter().map(|s| &s.image.pixels).collect();
    let feats = multipool_features(&encoder, &images)?;
    let dim = state.online.config.tap_channels(3) + state.online.config.tap_channels(4);
    let data = ProbeData::from_dataset(dataset, &feats, dim)?;

    if !cfg.train_stage4 {
        let fit = fit_probe(&data, &probe, cfg.cosine)?;
        return Ok(FinetuneOutcome {
            report: MetricsReport {
                task,
                seed: cfg.seed,
                checkpoint: String::new(),
                metrics: fit.test,
                val: fit.val,
                best_epoch: fit.best_epoch,
                encoder_checksum: encoder.checksum(),
            },
            frozen_checksum_after: frozen_stages_checksum(&state.online),
            frozen_checksum_before: before,
        });
    }

    let split_images = |split: Split| -> Vec<&Image> {
        dataset.samples.iter().filter(|s| s.split == split).map(|s| &s.image.pixels).collect()
    };
    let (train_imgs, val_imgs, test_imgs) = (split_images(Split::Train), split_images(Split::Val), split_images(Split::Test));
    let std = Standardizer::fit(&data.train.features, dim);
    let (targets, _) = split_targets(&data.train.labels, task)?;
    let width = output_width(task);
    let mut r = rng::substream(cfg.seed, HEAD_STREAM);
    let mut head = LinearHead::new(dim, width, &mut r);
    let mut params = state.online.clone();
    let stats = &state.stats;
    let mut head_opt = Sgd::<f64>::new(cfg.lr, cfg.momentum, &[head.weight.len(), head.bias.len()]);
    let stage_sizes: Vec<usize> = params.units[STAGE4_START..]
        .iter()
        .flat_map(|u| [u.weight.len(), u.gamma.len(), u.beta.len()])
        .collect();
    let mut enc_opt = Sgd::<T>::new(cfg.lr, cfg.momentum, &stage_sizes);

    let predict = |params: &NetworkParams<T>, head: &LinearHead, imgs: &[&Image]| -> Result<Vec<f64>> {
        let enc = FrozenEncoder {
            params,
            stats,
            normalization: state.normalization,
        };
        Ok(head.predict(&std.apply(&multipool_features(&enc, imgs)?)))
    };

    let n = train_imgs.len();
    let total = (cfg.epochs * n.div_ceil(cfg.batch_size)) as u64;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, usize, LinearHead, NetworkParams<T>, TaskMetrics)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut r);
        for idx in order.chunks(cfg.batch_size) {
            let lr = if cfg.cosine { cosine_lr(cfg.lr, step, total) } else { cfg.lr };
            step += 1;
            let batch: Vec<&Image> = idx.iter().map(|&i| train_imgs[i]).collect();
            let enc = FrozenEncoder {
                params: &params,
                stats,
                normalization: state.normalization,
            };
            let x = enc.input_batch(&batch)?;
            let (pyr, cache) = forward(&params, stats, &x, BnMode::Eval, false)?;
            let rows = std.apply(&pooled_readout(&pyr.f3, &pyr.f4));
            let out = head.predict(&rows);
            let (_, d_out) = head.loss_grad(&out, &targets.select(idx, width));
            let (gw, gb, gx) = head.backward(&rows, &d_out);

            let f4 = &pyr.f4;
            let c3 = pyr.f3.channels;
            let plane = f4.plane();
            let mut d_f4 = Act::zeros_like(f4);
            for c in 0..f4.channels {
                for b in 0..f4.batch {
                    let d = gx[b * dim + c3 + c] / std.std[c3 + c] / plane as f64;
                    let o = (c * f4.batch + b) * plane;
                    d_f4.data[o..o + plane].iter_mut().for_each(|v| *v = T::lit(d));
                }
            }
            let upstream = PyramidGrads {
                f4: Some(d_f4),
                ..PyramidGrads::default()
            };
            let (grads, _) = backward(&params, &cache, &upstream, false)?;
            head_opt.lr = lr;
            head_opt.update(vec![&mut head.weight, &mut head.bias], vec![&gw, &gb])?;
            enc_opt.lr = lr;
            let stage_params: Vec<&mut [T]> = params.units[STAGE4_START..]
                .iter_mut()
                .flat_map(|u| [&mut u.weight[..], &mut u.gamma[..], &mut u.beta[..]])
                .collect();
            let stage_grads: Vec<&[T]> = grads.units[STAGE4_START..]
                .iter()
                .flat_map(|u| [&u.weight[..], &u.gamma[..], &u.beta[..]])
                .collect();
            enc_opt.update(stage_params, stage_grads)?;
        }
        let val = compute_metrics(&predict(&params, &head, &val_imgs)?, &data.val.labels, task)?;
        if best.as_ref().is_none_or(|b| val.score() > b.0) {
            best = Some((val.score(), epoch, head.clone(), params.clone(), val));
        }
    }
    let (_, best_epoch, head, params, val) = best.expect("at least one epoch");
    let preds = predict(&params, &head, &test_imgs)?;
    let labels: Vec<Target> = data.test.labels.clone();
    let test = compute_metrics(&preds, &labels, task)?;
    assert!(audit_metrics(&preds, &labels, task, &test), "metric audit failed");
    Ok(FinetuneOutcome {
        report: MetricsReport {
            task,
            seed: cfg.seed,
            checkpoint: String::new(),
            metrics: test,
            val,
            best_epoch,
            encoder_checksum: format!("{}:{}", params.checksum(), stats.checksum()),
        },
        frozen_checksum_before: before,
        frozen_checksum_after: frozen_stages_checksum(&params),
    })
}
