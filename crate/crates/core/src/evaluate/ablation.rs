use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::metrics::TaskMetrics;
use super::probe::{linear_probe, FrozenEncoder, ProbeConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::LossSubset;
use crate::scalar::Scalar;
use crate::synthdata::{make_dataset, Dataset, Modality, Task, TaskConfig};
use crate::trainer::{pretrain, NullObserver, PretrainObserver, RunDir, TrainConfig, TrainState};

/// Settings shared by every cell of an ablation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationBase {
    pub train: TrainConfig,
    /// Samples generated per probe task; the train and val splits of all
    /// probe datasets form the unlabeled pretraining pool.
    pub samples_per_task: usize,
    pub data_seed: u64,
    pub probe_tasks: Vec<Task>,
}

impl Default for AblationBase {
    fn default() -> Self {
        AblationBase {
            train: TrainConfig::default(),
            samples_per_task: 1000,
            data_seed: 0,
            probe_tasks: vec![Task::Shape, Task::EdgePose],
        }
    }
}

/// One probe result of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub subset: String,
    pub modality: String,
    pub seed: u64,
    pub task: String,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub mae_axis0: Option<f64>,
    pub mae_axis1: Option<f64>,
    pub mae_axis2: Option<f64>,
    pub avg_mae: Option<f64>,
    pub final_loss: Option<f64>,
    pub proj_std: Option<f64>,
}

impl AblationRow {
    fn new(subset: LossSubset, modality: Modality, seed: u64, task: Task, m: &TaskMetrics) -> Self {
        let mut row = AblationRow {
            subset: subset.label(),
            modality: modality.name().to_string(),
            seed,
            task: task.name().to_string(),
            top1: None,
            top5: None,
            mae_axis0: None,
            mae_axis1: None,
            mae_axis2: None,
            avg_mae: None,
            final_loss: None,
            proj_std: None,
        };
        match m {
            TaskMetrics::Classification { top1, top5 } => {
                row.top1 = Some(*top1);
                row.top5 = Some(*top5);
            }
            TaskMetrics::Regression { mae, avg_mae, .. } => {
                row.mae_axis0 = mae.first().copied();
                row.mae_axis1 = mae.get(1).copied();
                row.mae_axis2 = mae.get(2).copied();
                row.avg_mae = Some(*avg_mae);
            }
        }
        row
    }

    /// Top-1 for classification rows, average MAE otherwise.
    pub fn headline(&self) -> Option<f64> {
        self.top1.or(self.avg_mae)
    }
}

/// Probe datasets of one modality and their pooled unlabeled images.
pub struct ModalityData {
    pub modality: Modality,
    pub datasets: Vec<Dataset>,
}

impl ModalityData {
    pub fn generate(base: &AblationBase, modality: Modality) -> Result<Self> {
        let datasets = base
            .probe_tasks
            .iter()
            .map(|&task| make_dataset(TaskConfig { task, modality }, base.samples_per_task, base.data_seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModalityData { modality, datasets })
    }

    pub fn pool(&self) -> Vec<&Image> {
        self.datasets.iter().flat_map(|d| d.pretraining_pool()).collect()
    }
}

/// Pretrains one model and probes it on every dataset of `data`. With
/// `run_dir`, logs and checkpoints go there.
pub fn run_cell<T: Scalar>(
    base: &AblationBase,
    data: &ModalityData,
    subset: LossSubset,
    seed: u64,
    run_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let config = TrainConfig {
        seed,
        enabled: subset,
        ..base.train.clone()
    };
    let mut state = TrainState::<T>::new(config)?;
    let pool = data.pool();
    let summary = match run_dir {
        Some(dir) => {
            let mut obs = RunDir::open(dir, false)?;
            let s = pretrain(&mut state, &pool, &mut obs as &mut dyn PretrainObserver<T>)?;
            obs.flush()?;
            s
        }
        None => pretrain(&mut state, &pool, &mut NullObserver)?,
    };
    let encoder = FrozenEncoder::from_state(&state);
    let id = format!("{}/{}/seed{seed}", subset.label(), data.modality.name());
    data.datasets
        .iter()
        .map(|ds| {
            let task = ds.config.task;
            let cfg = ProbeConfig {
                seed,
                ..ProbeConfig::for_task(task)
            };
            let rep = linear_probe(&encoder, ds, &cfg, &id)?;
            let mut row = AblationRow::new(subset, data.modality, seed, task, &rep.metrics);
            row.final_loss = summary.epoch_totals.last().copied();
            row.proj_std = summary.last_proj_std;
            Ok(row)
        })
        .collect()
}

pub fn cell_dir_name(subset: LossSubset, modality: Modality, seed: u64) -> String {
    format!("{}_{}_s{seed}", subset.label().replace('+', "-"), modality.name())
}

/// Pretrains and probes every (subset, modality, seed) cell, running up to
/// `jobs` cells at once. Rows come back in cell order regardless of `jobs`;
/// `on_cell` sees each finished cell's rows.
pub fn ablation_matrix<T: Scalar>(
    base: &AblationBase,
    subsets: &[LossSubset],
    modalities: &[Modality],
    seeds: &[u64],
    jobs: usize,
    out_dir: Option<&Path>,
    on_cell: &(dyn Fn(&[AblationRow]) + Sync),
) -> Result<Vec<AblationRow>> {
    if subsets.is_empty() || modalities.is_empty() || seeds.is_empty() || base.probe_tasks.is_empty() {
        return Err(Error::InvalidConfig("ablation needs subsets, modalities, seeds and probe tasks".into()));
    }
    let data = modalities
        .iter()
        .map(|&m| ModalityData::generate(base, m))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, LossSubset, u64)> = (0..modalities.len())
        .flat_map(|m| subsets.iter().flat_map(move |&s| seeds.iter().map(move |&seed| (m, s, seed))))
        .collect();
    let results: Mutex<Vec<Option<Result<Vec<AblationRow>>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(m, subset, seed)) = cells.get(k) else { break };
        let dir: Option<PathBuf> = out_dir.map(|d| d.join(cell_dir_name(subset, modalities[m], seed)));
        let rows = run_cell::<T>(base, &data[m], subset, seed, dir.as_deref());
        if let Ok(r) = &rows {
            on_cell(r);
        } else {
            next.store(cells.len(), Ordering::SeqCst);
        }
        results.lock().expect("results lock")[k] = Some(rows);
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.max(1) {
            s.spawn(work);
        }
        work();
    });
    let mut rows = Vec::new();
    for r in results.into_inner().expect("results lock").into_iter().flatten() {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Mean and sample standard deviation of one (subset, modality, task) group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub subset: String,
    pub modality: String,
    pub task: String,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
    /// True when larger is better (accuracy), false for errors.
    pub higher_is_better: bool,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by (subset, modality, task) and averages the headline metric
/// over seeds.
pub fn summarize(rows: &[AblationRow]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<(String, String, String), (Vec<f64>, bool)> = BTreeMap::new();
    for r in rows {
        if let Some(v) = r.headline() {
            let e = groups
                .entry((r.subset.clone(), r.modality.clone(), r.task.clone()))
                .or_insert((Vec::new(), r.top1.is_some()));
            e.0.push(v);
        }
    }
    groups
        .into_iter()
        .map(|((subset, modality, task), (vals, higher))| {
            let (mean, std) = mean_std(&vals);
            CellSummary {
                subset,
                modality,
                task,
                seeds: vals.len(),
                mean,
                std,
                higher_is_better: higher,
            }
        })
        .collect()
}

/// Text table with one line per (subset, modality) and one mean ± std
/// column per task, ordered best first by average per-task rank.
pub fn render_table(rows: &[AblationRow]) -> String {
    let summary = summarize(rows);
    let mut tasks: Vec<String> = Vec::new();
    for s in &summary {
        if !tasks.contains(&s.task) {
            tasks.push(s.task.clone());
        }
    }
    tasks.sort_by_key(|t| Task::ALL.iter().position(|a| a.name() == t).unwrap_or(usize::MAX));
    let mut lines: BTreeMap<(String, String), BTreeMap<String, &CellSummary>> = BTreeMap::new();
    for s in &summary {
        lines
            .entry((s.subset.clone(), s.modality.clone()))
            .or_default()
            .insert(s.task.clone(), s);
    }
    let keys: Vec<(String, String)> = lines.keys().cloned().collect();
    let mut rank_sum: BTreeMap<(String, String), f64> = keys.iter().map(|k| (k.clone(), 0.0)).collect();
    for t in &tasks {
        let mut scored: Vec<(&(String, String), f64)> = keys
            .iter()
            .filter_map(|k| {
                lines[k]
                    .get(t)
                    .map(|s| (k, if s.higher_is_better { -s.mean } else { s.mean }))
            })
            .collect();
        scored.sort_by(|a, b| a.1.total_cmp(&b.1));
        for (rank, (k, _)) in scored.iter().enumerate() {
            *rank_sum.get_mut(*k).expect("key") += rank as f64;
        }
    }
    let mut order = keys.clone();
    order.sort_by(|a, b| rank_sum[a].total_cmp(&rank_sum[b]).then(a.cmp(b)));

    let header_for = |t: &String| {
        let higher = summary.iter().find(|s| &s.task == t).is_some_and(|s| s.higher_is_better);
        format!("{t} {}", if higher { "top1 (higher)" } else { "avg MAE (lower)" })
    };
    let mut table: Vec<Vec<String>> = vec![{
        let mut h = vec!["loss".to_string(), "modality".to_string()];
        h.extend(tasks.iter().map(header_for));
        h.push("seeds".into());
        h
    }];
    for k in &order {
        let mut line = vec![k.0.clone(), k.1.clone()];
        let mut seeds = 0;
        for t in &tasks {
            line.push(match lines[k].get(t) {
                Some(s) => {
                    seeds = seeds.max(s.seeds);
                    if s.higher_is_better {
                        format!("{:.2} ± {:.2}", s.mean, s.std)
                    } else {
                        format!("{:.4} ± {:.4}", s.mean, s.std)
                    }
                }
                None => "-".into(),
            });
        }
        line.push(seeds.to_string());
        table.push(line);
    }
    let cols = table[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in table.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v}{}", " ".repeat(w - v.chars().count())))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
            out.push('\n');
        }
    }
    out
}
