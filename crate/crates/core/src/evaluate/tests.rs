use std::sync::OnceLock;

use super::*;
use crate::encoder::EncoderConfig;
use crate::error::Error;
use crate::image::Image;
use crate::losses::{LossConfig, LossSubset};
use crate::synthdata::{make_dataset, Dataset, Modality, Target, Task, TaskConfig};
use crate::trainer::{TrainConfig, TrainState};

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 16,
        seed,
        encoder: EncoderConfig {
            input_size: 64,
            stage_channels: [4, 8, 8, 16],
            rep_dim: 16,
            proj_dim: 8,
        },
        losses: LossConfig {
            prototypes: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn shapes() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| make_dataset(TaskConfig::new(Task::Shape), 120, 11).unwrap())
}

#[test]
fn probe_leaves_encoder_untouched() {
    let state = TrainState::<f32>::new(small_config(1)).unwrap();
    let before = state.encoder_checksum();
    let enc = FrozenEncoder::from_state(&state);
    let cfg = ProbeConfig {
        epochs: 5,
        ..ProbeConfig::for_task(Task::Shape)
    };
    let rep = linear_probe(&enc, shapes(), &cfg, "init").unwrap();
    assert_eq!(state.encoder_checksum(), before);
    assert_eq!(rep.encoder_checksum, before);
    let TaskMetrics::Classification { top1, top5 } = rep.metrics else { panic!() };
    assert!((0.0..=100.0).contains(&top1) && top1 <= top5);
    assert!((1..=5).contains(&rep.best_epoch));
}

#[test]
fn probe_rejects_wrong_task() {
    let state = TrainState::<f32>::new(small_config(1)).unwrap();
    let enc = FrozenEncoder::from_state(&state);
    let err = linear_probe(&enc, shapes(), &ProbeConfig::for_task(Task::EdgePose), "x").unwrap_err();
    assert!(matches!(err, Error::TaskMismatch(_)));
    let mut cfg = ProbeConfig::for_task(Task::Shape);
    cfg.head = HeadKind::LinearRegress;
    assert!(matches!(cfg.validate(), Err(Error::TaskMismatch(_))));
}

#[test]
fn default_probe_settings() {
    let c = ProbeConfig::for_task(Task::Shape);
    assert_eq!(c.epochs, 100);
    assert_eq!(c.optimizer, ProbeOptimizer::Sgd { lr: 0.02, momentum: 0.9 });
    let r = ProbeConfig::for_task(Task::Force);
    assert_eq!(r.epochs, 200);
    assert!(matches!(r.optimizer, ProbeOptimizer::AdamW { lr, .. } if lr == 0.01));
}

#[test]
fn single_batch_is_memorized() {
    let state = TrainState::<f32>::new(TrainConfig::default()).unwrap();
    let enc = FrozenEncoder::from_state(&state);
    let batch: Vec<&Image> = shapes().samples.iter().take(32).map(|s| &s.image.pixels).collect();
    let labels: Vec<Target> = shapes()
        .samples
        .iter()
        .take(32)
        .map(|s| Task::Shape.target(&s.image.labels))
        .collect();
    let split = SplitData {
        features: enc.features(&batch).unwrap(),
        labels,
    };
    let data = ProbeData {
        dim: 128,
        train: split.clone(),
        val: split.clone(),
        test: split,
    };
    let fit = probe_features(&data, &ProbeConfig::for_task(Task::Shape)).unwrap();
    assert_eq!(fit.test.top1(), Some(100.0));
}

#[test]
fn regression_probe_fits_linear_targets() {
    // targets are an exact affine function of the features
    let mut r = crate::rng::seeded(4);
    let dim = 6;
    let mut split = |n: usize| {
        use rand::Rng as _;
        let features: Vec<f64> = (0..n * dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let labels = features
            .chunks(dim)
            .map(|x| Target::Values([2.0 * x[0] - x[1] + 1.0, x[2] * 3.0, 10.0 * x[3] + x[4]]))
            .collect();
        SplitData { features, labels }
    };
    let data = ProbeData {
        dim,
        train: split(200),
        val: split(40),
        test: split(40),
    };
    let fit = probe_features(&data, &ProbeConfig::for_task(Task::EdgePose)).unwrap();
    assert!(fit.test.avg_mae().unwrap() < 0.1, "{:?}", fit.test);
}

#[test]
fn probe_is_deterministic() {
    let state = TrainState::<f32>::new(small_config(3)).unwrap();
    let enc = FrozenEncoder::from_state(&state);
    let cfg = ProbeConfig {
        epochs: 4,
        seed: 9,
        ..ProbeConfig::for_task(Task::Shape)
    };
    let a = linear_probe(&enc, shapes(), &cfg, "a").unwrap();
    let b = linear_probe(&enc, shapes(), &cfg, "a").unwrap();
    assert_eq!(a, b);
}

fn finetune_cfg() -> FinetuneConfig {
    FinetuneConfig {
        enabled: true,
        epochs: 2,
        batch_size: 16,
        ..Default::default()
    }
}

#[test]
fn finetune_is_config_gated() {
    let state = TrainState::<f32>::new(small_config(1)).unwrap();
    let err = multipool_finetune(&state, shapes(), &FinetuneConfig::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
}

#[test]
fn finetune_freezes_early_stages() {
    let state = TrainState::<f32>::new(small_config(1)).unwrap();
    let out = multipool_finetune(&state, shapes(), &finetune_cfg()).unwrap();
    assert_eq!(out.frozen_checksum_before, out.frozen_checksum_after);
    assert_eq!(out.frozen_checksum_before, frozen_stages_checksum(&state.online));
    // stage 4 moved
    assert_ne!(out.report.encoder_checksum, state.encoder_checksum());
}

#[test]
fn frozen_finetune_is_a_multipool_linear_probe() {
    let state = TrainState::<f32>::new(small_config(1)).unwrap();
    let cfg = FinetuneConfig {
        train_stage4: false,
        cosine: false,
        ..finetune_cfg()
    };
    let out = multipool_finetune(&state, shapes(), &cfg).unwrap();
    assert_eq!(out.report.encoder_checksum, state.encoder_checksum());

    let enc = FrozenEncoder::from_state(&state);
    let images: Vec<&Image> = shapes().samples.iter().map(|s| &s.image.pixels).collect();
    let feats = multipool_features(&enc, &images).unwrap();
    let data = ProbeData::from_dataset(shapes(), &feats, 8 + 16).unwrap();
    let probe = ProbeConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: ProbeOptimizer::Sgd {
            lr: cfg.lr,
            momentum: cfg.momentum,
        },
        seed: cfg.seed,
        ..ProbeConfig::for_task(Task::Shape)
    };
    let fit = probe_features(&data, &probe).unwrap();
    assert_eq!(fit.test, out.report.metrics);
}

fn tiny_base() -> AblationBase {
    AblationBase {
        train: small_config(0),
        samples_per_task: 40,
        data_seed: 2,
        probe_tasks: vec![Task::Shape, Task::EdgePose],
    }
}

#[test]
fn ablation_rows_cover_every_cell_and_ignore_jobs() {
    let base = tiny_base();
    let subsets = [LossSubset::none(), LossSubset::all()];
    let seeds = [0, 1];
    let seen = std::sync::atomic::AtomicUsize::new(0);
    let count = |rows: &[AblationRow]| {
        seen.fetch_add(rows.len(), std::sync::atomic::Ordering::SeqCst);
    };
    let serial = ablation_matrix::<f32>(&base, &subsets, &[Modality::Fused], &seeds, 1, None, &count).unwrap();
    let parallel = ablation_matrix::<f32>(&base, &subsets, &[Modality::Fused], &seeds, 3, None, &|_| {}).unwrap();
    assert_eq!(serial.len(), 2 * 2 * 2);
    assert_eq!(seen.into_inner(), serial.len());
    assert_eq!(serial, parallel);
    assert_eq!(serial[0].subset, "global");
    assert_eq!(serial[4].subset, "sal+ppda+ram");
    for r in &serial {
        match r.task.as_str() {
            "shape" => assert!(r.top1.is_some() && r.avg_mae.is_none()),
            _ => assert!(r.avg_mae.is_some() && r.top1.is_none()),
        }
    }
    // different seeds, different runs
    assert_ne!(serial[0].final_loss, serial[2].final_loss);

    let table = render_table(&serial);
    assert_eq!(table.lines().count(), 2 + 2);
    assert!(table.contains("±"));
}

#[test]
fn summary_statistics() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
    assert!((m - 2.0).abs() < 1e-15 && (s - 1.0).abs() < 1e-15);
    assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
}

#[test]
fn empty_ablation_is_rejected() {
    let err = ablation_matrix::<f32>(&tiny_base(), &[], &[Modality::Fused], &[0], 1, None, &|_| {}).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
}
