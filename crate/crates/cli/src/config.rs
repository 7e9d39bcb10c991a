use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spatial_ssl::evaluate::FinetuneConfig;
use spatial_ssl::losses::LossSubset;
use spatial_ssl::synthdata::{Modality, Task};
use spatial_ssl::trainer::TrainConfig;

use crate::failure::Failure;

pub const SCHEMA_VERSION: u32 = 1;
pub const SNAPSHOT_FILE: &str = "config.snapshot";

/// Where pretraining and probe images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Tasks whose train and val splits form the pretraining pool.
    pub tasks: Vec<Task>,
    pub samples_per_task: usize,
    pub seed: u64,
    pub modality: Modality,
    /// Saved datasets to use instead of generating; empty means generate.
    pub dirs: Vec<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            tasks: vec![Task::Shape, Task::EdgePose],
            samples_per_task: 1000,
            seed: 0,
            modality: Modality::Fused,
            dirs: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub task: Task,
    pub checkpoint: Option<PathBuf>,
    /// Saved dataset to probe on; generated from `[data]` when absent.
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
    /// Overrides of the per-task protocol defaults.
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            task: Task::Shape,
            checkpoint: None,
            data_dir: None,
            seed: 0,
            epochs: None,
            batch_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Loss subsets as `global`, `sal`, `sal+ram`, ... or `all`.
    pub subsets: Vec<String>,
    pub modalities: Vec<Modality>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            subsets: LossSubset::power_set().iter().map(LossSubset::label).collect(),
            modalities: vec![Modality::Fused],
            seeds: vec![0, 1, 2],
        }
    }
}

impl AblationSection {
    pub fn parsed_subsets(&self) -> Result<Vec<LossSubset>, Failure> {
        self.subsets
            .iter()
            .map(|s| LossSubset::parse(s).map_err(Failure::from))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub h: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            h: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

/// Every effective setting of a run; serialized as the run's snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            train: TrainConfig::default(),
            data: DataSection::default(),
            probe: ProbeSection::default(),
            ablation: AblationSection::default(),
            gradcheck: GradcheckSection::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path`, when given.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::ConfigUnreadable(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Failure::ConfigUnreadable(e.message().to_string()))?;
        match value.get("schema_version").and_then(toml::Value::as_integer) {
            Some(v) if v == i64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Failure::SchemaVersion(format!(
                    "config has schema_version {v}, this build reads {SCHEMA_VERSION}"
                )))
            }
            None => return Err(Failure::SchemaVersion("config lacks an integer schema_version".into())),
        }
        toml::from_str(text).map_err(|e| Failure::ConfigInvalid(e.message().to_string()))
    }

    /// Applies one `section.key=value` override; the value is read as TOML,
    /// falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<(), Failure> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("override `{assignment}` is not key=value")))?;
        let parsed: toml::Value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Failure::ConfigInvalid(e.to_string()))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        let (last, parents) = keys.split_last().expect("split yields one key");
        let mut node = &mut root;
        for k in parents {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*k))
                .ok_or_else(|| Failure::ConfigInvalid(format!("unknown config section `{k}` in `{path}`")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Failure::ConfigInvalid(format!("`{path}` does not name a field")))?;
        table.insert(last.to_string(), parsed);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Failure::ConfigInvalid(format!("{path}: {}", e.message())))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::ConfigInvalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.train.validate()?;
        self.ablation.parsed_subsets()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.train.base_lr = 0.0013;
        c.train.enabled = LossSubset::parse("sal+ram").unwrap();
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "schema_version = 1\n[train.losses.weights]\nsall = 0.2\n";
        assert!(matches!(RunConfig::parse(text), Err(Failure::ConfigInvalid(_))));
    }

    #[test]
    fn schema_version_is_checked() {
        assert!(matches!(RunConfig::parse("schema_version = 2"), Err(Failure::SchemaVersion(_))));
        assert!(matches!(RunConfig::parse("[train]\nepochs = 1"), Err(Failure::SchemaVersion(_))));
    }

    #[test]
    fn partial_files_keep_defaults() {
        let c = RunConfig::parse("schema_version = 1\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.set("train.losses.weights.sal=0.5").unwrap();
        c.set("data.modality=marker_only").unwrap();
        assert_eq!(c.train.losses.weights.sal, 0.5);
        assert_eq!(c.data.modality, Modality::MarkerOnly);
        assert!(c.set("train.nope=1").is_err());
        assert!(c.set("train.epochs").is_err());
    }
}
