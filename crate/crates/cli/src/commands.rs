use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use spatial_ssl::evaluate::{
    ablation_matrix, gradcheck_suite, linear_probe, multipool_finetune, render_table, AblationBase, AblationRow,
    FrozenEncoder, ProbeConfig,
};
use spatial_ssl::image::Image;
use spatial_ssl::losses::LossSubset;
use spatial_ssl::synthdata::{load_dataset, make_dataset, save_dataset, Dataset, Modality, Task, TaskConfig};
use spatial_ssl::trainer::{load_checkpoint, pretrain as run_pretrain, RunDir, TrainState, CHECKPOINT_DIR, METRICS_LOG, REPLAY_LOG};
use spatial_ssl::{Error, Real};

use crate::config::{DataSection, RunConfig, SNAPSHOT_FILE};
use crate::failure::Failure;
use crate::manifest::Run;
use crate::Common;

pub const RESULTS_FILE: &str = "results.csv";
pub const TABLE_FILE: &str = "results.txt";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const REPRO_FILE: &str = "repro.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const FINETUNE_FILE: &str = "finetune.json";
pub const CELLS_DIR: &str = "cells";

fn parse_task(s: &str) -> Result<Task, Failure> {
    Task::parse(s).ok_or_else(|| Failure::Usage(format!("unknown task `{s}`")))
}

fn parse_modality(s: &str) -> Result<Modality, Failure> {
    Modality::parse(s).ok_or_else(|| Failure::Usage(format!("unknown modality `{s}`")))
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    for s in &common.set {
        cfg.set(s)?;
    }
    Ok(cfg)
}

fn json<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// Starts a run: validates, snapshots the effective config, and hands the
/// body a [`Run`] whose manifest is written however the body ends.
fn with_run(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    seed: Option<u64>,
    body: impl FnOnce(&mut Run) -> Result<(), Failure>,
) -> Result<(), Failure> {
    cfg.validate()?;
    let snapshot = cfg.to_toml()?;
    let mut run = Run::start(dir, command, snapshot.clone(), seed)?;
    run.write(SNAPSHOT_FILE, snapshot.as_bytes())?;
    let result = body(&mut run);
    run.finish(result)
}

pub fn gen_data(task: &str, n: usize, seed: u64, modality: &str, out: &Path) -> Result<(), Failure> {
    let task = parse_task(task)?;
    let modality = parse_modality(modality)?;
    let snapshot = format!(
        "task = \"{}\"\nn = {n}\nseed = {seed}\nmodality = \"{}\"\n",
        task.name(),
        modality.name()
    );
    let mut run = Run::start(out, "gen-data", snapshot.clone(), Some(seed))?;
    run.write(SNAPSHOT_FILE, snapshot.as_bytes())?;
    let result = (|| {
        let ds = make_dataset(TaskConfig { task, modality }, n, seed)?;
        save_dataset(&ds, out)?;
        run.record(spatial_ssl::synthdata::MANIFEST_FILE);
        eprintln!("wrote {} samples to {}", ds.samples.len(), out.display());
        Ok(())
    })();
    run.finish(result)
}

fn pool_datasets(data: &DataSection) -> Result<Vec<Dataset>, Failure> {
    if data.dirs.is_empty() {
        data.tasks
            .iter()
            .map(|&task| {
                make_dataset(
                    TaskConfig {
                        task,
                        modality: data.modality,
                    },
                    data.samples_per_task,
                    data.seed,
                )
                .map_err(Failure::from)
            })
            .collect()
    } else {
        data.dirs.iter().map(|d| load_dataset(d).map_err(Failure::from)).collect()
    }
}

fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>, Failure> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    found.sort();
    Ok(found.pop())
}

pub struct PretrainFlags {
    pub losses: Option<String>,
    pub modality: Option<String>,
    pub epochs: Option<u32>,
    pub seed: Option<u64>,
    pub resume: bool,
    pub log_views: bool,
}

pub fn pretrain(common: &Common, run_dir: &Path, flags: PretrainFlags) -> Result<(), Failure> {
    let mut cfg = resolve(common)?;
    if let Some(l) = &flags.losses {
        cfg.train.enabled = LossSubset::parse(l)?;
    }
    if let Some(m) = &flags.modality {
        cfg.data.modality = parse_modality(m)?;
    }
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = flags.seed {
        cfg.train.seed = s;
    }
    with_run(run_dir, "pretrain", &cfg.clone(), Some(cfg.train.seed), |run| {
        let mut state = match latest_checkpoint(run_dir)?.filter(|_| flags.resume) {
            Some(path) => {
                let s: TrainState<Real> = load_checkpoint(&path)?;
                if s.config != cfg.train {
                    return Err(Failure::ConfigInvalid(format!(
                        "{} was written with a different training config",
                        path.display()
                    )));
                }
                eprintln!("resuming from {} (epoch {})", path.display(), s.epoch);
                s
            }
            None => TrainState::<Real>::new(cfg.train.clone())?,
        };
        let datasets = pool_datasets(&cfg.data)?;
        let pool: Vec<&Image> = datasets.iter().flat_map(|d| d.pretraining_pool()).collect();
        let mut observer = RunDir::open(run_dir, flags.log_views)?;
        let outcome = run_pretrain(&mut state, &pool, &mut observer);
        observer.flush()?;
        run.record(METRICS_LOG);
        if flags.log_views {
            run.record(REPLAY_LOG);
        }
        for p in observer.checkpoints() {
            if let Ok(rel) = p.strip_prefix(run.dir()) {
                run.record(rel);
            }
        }
        match outcome {
            Ok(summary) => {
                run.write(SUMMARY_FILE, &json(&summary)?)?;
                eprintln!(
                    "pretrained {} steps over {} images; last projection std {:?}",
                    summary.steps,
                    pool.len(),
                    summary.last_proj_std
                );
                Ok(())
            }
            Err(Error::NonFiniteLoss { step, repro }) => {
                run.write(REPRO_FILE, repro.as_bytes())?;
                Err(Error::NonFiniteLoss { step, repro }.into())
            }
            Err(e) => Err(e.into()),
        }
    })
}

pub fn probe(common: &Common, ckpt: Option<PathBuf>, task: Option<String>, run_dir: &Path, finetune: bool) -> Result<(), Failure> {
    let mut cfg = resolve(common)?;
    if let Some(c) = ckpt {
        cfg.probe.checkpoint = Some(c);
    }
    if let Some(t) = task {
        cfg.probe.task = parse_task(&t)?;
    }
    let Some(path) = cfg.probe.checkpoint.clone() else {
        return Err(Failure::Usage("probe needs --ckpt or probe.checkpoint".into()));
    };
    with_run(run_dir, "probe", &cfg.clone(), Some(cfg.probe.seed), |run| {
        let state: TrainState<Real> = load_checkpoint(&path)?;
        let task = cfg.probe.task;
        let dataset = match &cfg.probe.data_dir {
            Some(dir) => load_dataset(dir)?,
            None => make_dataset(
                TaskConfig {
                    task,
                    modality: cfg.data.modality,
                },
                cfg.data.samples_per_task,
                cfg.data.seed,
            )?,
        };
        let defaults = ProbeConfig::for_task(task);
        let probe = ProbeConfig {
            seed: cfg.probe.seed,
            epochs: cfg.probe.epochs.unwrap_or(defaults.epochs),
            batch_size: cfg.probe.batch_size.unwrap_or(defaults.batch_size),
            ..defaults
        };
        let report = linear_probe(
            &FrozenEncoder::from_state(&state),
            &dataset,
            &probe,
            &path.display().to_string(),
        )?;
        run.write(METRICS_FILE, &json(&report)?)?;
        println!("{}", serde_json::to_string(&report.metrics)?);
        if finetune {
            let outcome = multipool_finetune(&state, &dataset, &cfg.finetune)?;
            run.write(FINETUNE_FILE, &json(&outcome)?)?;
            println!("{}", serde_json::to_string(&outcome.report.metrics)?);
        }
        Ok(())
    })
}

pub fn ablate(
    common: &Common,
    run_dir: &Path,
    seeds: Option<String>,
    subsets: Option<String>,
    modalities: Option<String>,
    jobs: usize,
) -> Result<(), Failure> {
    let mut cfg = resolve(common)?;
    if let Some(s) = seeds {
        cfg.ablation.seeds = s
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| Failure::Usage(format!("bad seed `{v}`"))))
            .collect::<Result<_, _>>()?;
    }
    if let Some(s) = subsets {
        cfg.ablation.subsets = s.split(';').map(|v| v.trim().to_string()).collect();
    }
    if let Some(m) = modalities {
        cfg.ablation.modalities = m.split(',').map(|v| parse_modality(v.trim())).collect::<Result<_, _>>()?;
    }
    if !cfg.data.dirs.is_empty() {
        return Err(Failure::ConfigInvalid("ablate generates its own data; data.dirs must be empty".into()));
    }
    with_run(run_dir, "ablate", &cfg.clone(), None, |run| {
        let base = AblationBase {
            train: cfg.train.clone(),
            samples_per_task: cfg.data.samples_per_task,
            data_seed: cfg.data.seed,
            probe_tasks: cfg.data.tasks.clone(),
        };
        let subsets = cfg.ablation.parsed_subsets()?;
        let cells = run_dir.join(CELLS_DIR);
        let rows = ablation_matrix::<Real>(
            &base,
            &subsets,
            &cfg.ablation.modalities,
            &cfg.ablation.seeds,
            jobs,
            Some(&cells),
            &|rows: &[AblationRow]| {
                for r in rows {
                    eprintln!("{} {} seed {} {}: {:?}", r.subset, r.modality, r.seed, r.task, r.headline());
                }
            },
        )?;
        run.record(CELLS_DIR);
        run.write(RESULTS_FILE, &rows_to_csv(&rows)?)?;
        let table = render_table(&rows);
        run.write(TABLE_FILE, table.as_bytes())?;
        print!("{table}");
        Ok(())
    })
}

fn rows_to_csv(rows: &[AblationRow]) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Failure::Core(Error::Io(e.into_error())))
}

pub fn gradcheck(common: &Common, tolerance: Option<f64>, h: Option<f64>, seed: Option<u64>, run_dir: &Path) -> Result<(), Failure> {
    let mut cfg = resolve(common)?;
    if let Some(t) = tolerance {
        cfg.gradcheck.tolerance = t;
    }
    if let Some(h) = h {
        cfg.gradcheck.h = h;
    }
    if let Some(s) = seed {
        cfg.gradcheck.seed = s;
    }
    let g = cfg.gradcheck.clone();
    if !(g.h > 0.0 && g.tolerance > 0.0) {
        return Err(Failure::ConfigInvalid("gradcheck h and tolerance must be positive".into()));
    }
    with_run(run_dir, "gradcheck", &cfg, Some(g.seed), |run| {
        let report = gradcheck_suite(g.h, g.tolerance, g.seed);
        run.write(GRADCHECK_FILE, &json(&report)?)?;
        for t in &report.terms {
            println!(
                "{:<16} {:>5} {:>12.3e} {}",
                t.term,
                t.checked,
                t.max_rel_error,
                if t.passed { "pass" } else { "FAIL" }
            );
        }
        for s in &report.stop_gradient {
            println!(
                "stop-gradient {:<6} target grad {:e}, value delta {:.3e} {}",
                s.term,
                s.max_abs_target_grad,
                s.max_value_delta,
                if s.passed { "pass" } else { "FAIL" }
            );
        }
        if report.passed {
            Ok(())
        } else {
            Err(Failure::GradcheckFailed(format!("some terms exceed tolerance {:e}", g.tolerance)))
        }
    })
}

pub fn read_results(path: &Path) -> Result<Vec<AblationRow>, Failure> {
    let file = fs::File::open(path).map_err(|e| Failure::Core(Error::DatasetFormat(format!("{}: {e}", path.display()))))?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize().map(|row| row.map_err(Failure::from)).collect()
}

pub fn report(input: &Path, format: &str) -> Result<(), Failure> {
    let rows = read_results(input)?;
    let out = match format {
        "csv" => String::from_utf8(rows_to_csv(&rows)?).expect("csv is utf-8"),
        "table" => render_table(&rows),
        other => return Err(Failure::Usage(format!("unknown format `{other}` (csv or table)"))),
    };
    std::io::stdout().write_all(out.as_bytes())?;
    Ok(())
}
