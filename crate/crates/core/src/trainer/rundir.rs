use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::checkpoint::save_checkpoint;
use super::{PretrainObserver, StepRecord, TrainState};
use crate::augment::ViewParams;
use crate::error::Result;
use crate::losses::LossReport;
use crate::scalar::Scalar;

pub const METRICS_LOG: &str = "metrics.log";
pub const REPLAY_LOG: &str = "augment_replay.log";
pub const CHECKPOINT_DIR: &str = "ckpt";

pub fn checkpoint_name(epoch: u32) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    epoch: u32,
    step: u64,
    lr: f64,
    #[serde(flatten)]
    report: &'a LossReport,
    proj_std: Option<f64>,
    collapse_alarm: bool,
}

#[derive(Serialize)]
struct ReplayLine<'a> {
    step: u64,
    index: usize,
    views: &'a [ViewParams; 2],
}

/// Run-directory writer: line-delimited metrics and augmentation replay logs
/// plus one checkpoint per epoch under `ckpt/`.
pub struct RunDir {
    root: PathBuf,
    metrics: BufWriter<File>,
    replay: Option<BufWriter<File>>,
    checkpoints: Vec<PathBuf>,
}

impl RunDir {
    /// Creates (or appends to) the logs under `root`.
    pub fn open(root: &Path, log_views: bool) -> Result<Self> {
        fs::create_dir_all(root.join(CHECKPOINT_DIR))?;
        let append = |name: &str| -> Result<BufWriter<File>> {
            let f = fs::OpenOptions::new().create(true).append(true).open(root.join(name))?;
            Ok(BufWriter::new(f))
        };
        Ok(RunDir {
            root: root.to_path_buf(),
            metrics: append(METRICS_LOG)?,
            replay: if log_views { Some(append(REPLAY_LOG)?) } else { None },
            checkpoints: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self, epoch: u32) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join(checkpoint_name(epoch))
    }

    /// Checkpoints written through this handle, in order.
    pub fn checkpoints(&self) -> &[PathBuf] {
        &self.checkpoints
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        if let Some(r) = &mut self.replay {
            r.flush()?;
        }
        Ok(())
    }
}

impl<T: Scalar> PretrainObserver<T> for RunDir {
    fn on_step(&mut self, rec: &StepRecord) -> Result<()> {
        let line = MetricsLine {
            epoch: rec.epoch,
            step: rec.step,
            lr: rec.lr,
            report: &rec.report,
            proj_std: rec.proj_std,
            collapse_alarm: rec.collapse_alarm,
        };
        serde_json::to_writer(&mut self.metrics, &line)?;
        self.metrics.write_all(b"\n")?;
        if let Some(r) = &mut self.replay {
            for (index, views) in rec.indices.iter().zip(&rec.views) {
                serde_json::to_writer(
                    &mut *r,
                    &ReplayLine {
                        step: rec.step,
                        index: *index,
                        views,
                    },
                )?;
                r.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState<T>) -> Result<()> {
        self.flush()?;
        let path = self.checkpoint_path(state.epoch);
        save_checkpoint(state, &path)?;
        self.checkpoints.push(path);
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
