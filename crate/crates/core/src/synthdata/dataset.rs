use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::render::modality_toggle;
use super::{
    ContactPoint, EdgePose, LabeledImage, Labels, MarkerGrid, Modality, SceneSpec, ShapeClass, NUM_TEXTURES,
};
use crate::error::{Error, Result};
use crate::rng;

pub const MIN_SAMPLES: usize = 20;
pub const TRAIN_FRACTION: f64 = 0.70;
pub const VAL_FRACTION: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Shape,
    Texture,
    EdgePose,
    ContactPoint,
    Force,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification { classes: usize },
    Regression { axes: [&'static str; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Values([f64; 3]),
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Shape, Task::Texture, Task::EdgePose, Task::ContactPoint, Task::Force];

    pub fn name(self) -> &'static str {
        match self {
            Task::Shape => "shape",
            Task::Texture => "texture",
            Task::EdgePose => "edge_pose",
            Task::ContactPoint => "contact_point",
            Task::Force => "force",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shape" => Some(Task::Shape),
            "texture" | "grating" => Some(Task::Texture),
            "edge_pose" | "edge-pose" => Some(Task::EdgePose),
            "contact_point" | "contact-point" | "contact" => Some(Task::ContactPoint),
            "force" => Some(Task::Force),
            _ => None,
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            Task::Shape => TaskKind::Classification {
                classes: ShapeClass::OBJECTS.len(),
            },
            Task::Texture => TaskKind::Classification {
                classes: NUM_TEXTURES as usize,
            },
            Task::EdgePose => TaskKind::Regression { axes: ["x", "z", "theta"] },
            Task::ContactPoint => TaskKind::Regression { axes: ["px", "py", "pz"] },
            Task::Force => TaskKind::Regression { axes: ["fx", "fy", "fz"] },
        }
    }

    pub fn target(self, labels: &Labels) -> Target {
        match self {
            Task::Shape => Target::Class(labels.shape_class.index()),
            Task::Texture => Target::Class(labels.texture_id as usize),
            Task::EdgePose => Target::Values(labels.edge_pose),
            Task::ContactPoint => Target::Values(labels.contact_point),
            Task::Force => Target::Values(labels.force),
        }
    }

    /// Draws the scene for sample `index`; `class` is the balanced class slot
    /// for classification tasks.
    fn sample_scene(self, rng: &mut rng::Rng, class: usize) -> SceneSpec {
        let mut spec = SceneSpec {
            marker_grid: MarkerGrid::default(),
            ..SceneSpec::default()
        };
        match self {
            Task::Shape | Task::Texture => {
                let depth = rng.random_range(0.5..=3.0);
                spec.shape_class = if self == Task::Shape {
                    ShapeClass::OBJECTS[class]
                } else {
                    ShapeClass::OBJECTS[rng.random_range(0..ShapeClass::OBJECTS.len())]
                };
                spec.texture_id = if self == Task::Texture {
                    class as u32
                } else {
                    rng.random_range(0..NUM_TEXTURES)
                };
                spec.edge_pose = EdgePose {
                    x_offset: 0.0,
                    press_depth: depth,
                    rotation: rng.random_range(-45.0..=45.0),
                };
                spec.contact_point = ContactPoint {
                    px: rng.random_range(-5.0..=5.0),
                    py: rng.random_range(-5.0..=5.0),
                    pz: depth,
                };
            }
            Task::EdgePose => {
                let depth = rng.random_range(0.0..=3.0);
                spec.shape_class = ShapeClass::Edge;
                spec.texture_id = rng.random_range(0..NUM_TEXTURES);
                spec.edge_pose = EdgePose {
                    x_offset: rng.random_range(-8.0..=8.0),
                    press_depth: depth,
                    rotation: rng.random_range(-45.0..=45.0),
                };
                spec.contact_point = ContactPoint { px: 0.0, py: 0.0, pz: depth };
            }
            Task::ContactPoint | Task::Force => {
                let depth = rng.random_range(0.0..=3.0);
                spec.shape_class = ShapeClass::Circle;
                spec.texture_id = rng.random_range(0..NUM_TEXTURES);
                spec.edge_pose = EdgePose {
                    x_offset: 0.0,
                    press_depth: depth,
                    rotation: 0.0,
                };
                spec.contact_point = ContactPoint {
                    px: rng.random_range(-8.0..=8.0),
                    py: rng.random_range(-8.0..=8.0),
                    pz: depth,
                };
            }
        }
        spec.noise_seed = rng.random();
        spec
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: Task,
    #[serde(default)]
    pub modality: Modality,
}

impl TaskConfig {
    pub fn new(task: Task) -> Self {
        TaskConfig {
            task,
            modality: Modality::Fused,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub spec: SceneSpec,
    pub image: LabeledImage,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: TaskConfig,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> + '_ {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// The unlabeled pretraining pool: train and validation images.
    pub fn pretraining_pool(&self) -> Vec<&crate::image::Image> {
        self.samples
            .iter()
            .filter(|s| s.split != Split::Test)
            .map(|s| &s.image.pixels)
            .collect()
    }
}

/// Split sizes for `n` samples: rounded 70% / 15%, remainder to test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let val = (n as f64 * VAL_FRACTION).round() as usize;
    (train, val, n - train - val)
}

/// Generates `n_samples` scenes for a task with deterministic, disjoint
/// train/val/test splits.
///
/// Classification tasks cycle through classes so counts are balanced, and
/// splits are stratified by interleaving per-class shuffles.
pub fn make_dataset(config: TaskConfig, n_samples: usize, seed: u64) -> Result<Dataset> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::DatasetTooSmall(format!(
            "{n_samples} samples, need at least {MIN_SAMPLES}"
        )));
    }
    let classes = match config.task.kind() {
        TaskKind::Classification { classes } => Some(classes),
        TaskKind::Regression { .. } => None,
    };

    let mut specs = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut r = rng::substream(seed, i as u64);
        let class = classes.map_or(0, |c| i % c);
        specs.push(config.task.sample_scene(&mut r, class));
    }

    // stream 2^63 is reserved for the split permutation
    let mut split_rng = rng::substream(seed, 1 << 63);
    let order: Vec<usize> = match classes {
        Some(c) => {
            let mut per_class: Vec<Vec<usize>> = (0..c).map(|k| (k..n_samples).step_by(c).collect()).collect();
            for list in &mut per_class {
                list.shuffle(&mut split_rng);
            }
            let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
            (0..longest)
                .flat_map(|pos| per_class.iter().filter_map(move |l| l.get(pos).copied()))
                .collect()
        }
        None => {
            let mut all: Vec<usize> = (0..n_samples).collect();
            all.shuffle(&mut split_rng);
            all
        }
    };
    let (n_train, n_val, _) = split_sizes(n_samples);
    let mut splits = vec![Split::Test; n_samples];
    for (pos, &idx) in order.iter().enumerate() {
        splits[idx] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    if let Some(c) = classes {
        for split in [Split::Train, Split::Val, Split::Test] {
            for k in 0..c {
                let present = (0..n_samples).any(|i| splits[i] == split && i % c == k);
                if !present {
                    return Err(Error::DatasetTooSmall(format!(
                        "class {k} missing from {split:?} split with {n_samples} samples"
                    )));
                }
            }
        }
    }

    let mut samples = Vec::with_capacity(n_samples);
    for (i, spec) in specs.into_iter().enumerate() {
        let image = modality_toggle(&spec, config.modality)?;
        samples.push(Sample {
            index: i,
            spec,
            image,
            split: splits[i],
        });
    }
    Ok(Dataset { config, seed, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_samples_split_70_15_15() {
        let ds = make_dataset(TaskConfig::new(Task::EdgePose), 100, 3).unwrap();
        assert_eq!(ds.split_len(Split::Train), 70);
        assert_eq!(ds.split_len(Split::Val), 15);
        assert_eq!(ds.split_len(Split::Test), 15);
        assert_eq!(split_sizes(100), (70, 15, 15));
    }

    #[test]
    fn split_assignment_is_deterministic() {
        let a = make_dataset(TaskConfig::new(Task::Shape), 60, 11).unwrap();
        let b = make_dataset(TaskConfig::new(Task::Shape), 60, 11).unwrap();
        let sa: Vec<_> = a.samples.iter().map(|s| s.split).collect();
        let sb: Vec<_> = b.samples.iter().map(|s| s.split).collect();
        assert_eq!(sa, sb);
        assert_eq!(a.samples[7].image.pixels.data, b.samples[7].image.pixels.data);
        let c = make_dataset(TaskConfig::new(Task::Shape), 60, 12).unwrap();
        let sc: Vec<_> = c.samples.iter().map(|s| s.split).collect();
        assert_ne!(sa, sc);
    }

    #[test]
    fn shape_task_is_class_balanced_per_split() {
        let ds = make_dataset(TaskConfig::new(Task::Shape), 600, 5).unwrap();
        for (split, want) in [(Split::Train, 70), (Split::Val, 15), (Split::Test, 15)] {
            let mut counts = [0usize; 6];
            for s in ds.split(split) {
                counts[s.image.labels.shape_class.index()] += 1;
            }
            assert_eq!(counts, [want; 6], "{split:?}");
        }
    }

    #[test]
    fn too_few_samples_fail() {
        assert!(matches!(
            make_dataset(TaskConfig::new(Task::Shape), 19, 0),
            Err(Error::DatasetTooSmall(_))
        ));
        // 20 samples over 6 classes cannot fill a 3-sample val split per class
        assert!(matches!(
            make_dataset(TaskConfig::new(Task::Shape), 20, 0),
            Err(Error::DatasetTooSmall(_))
        ));
        assert!(make_dataset(TaskConfig::new(Task::Force), 20, 0).is_ok());
    }

    #[test]
    fn labels_echo_the_generating_spec() {
        let ds = make_dataset(TaskConfig::new(Task::ContactPoint), 24, 9).unwrap();
        for s in &ds.samples {
            assert_eq!(s.image.labels, Labels::from_spec(&s.spec));
            assert_eq!(s.spec.contact_point.pz, s.spec.edge_pose.press_depth);
        }
    }
}
