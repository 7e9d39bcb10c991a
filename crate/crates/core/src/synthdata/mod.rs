//! Synthetic fused visuo-tactile scenes.
//!
//! A scene is a visual layer (a textured object silhouette seen through the
//! sensor skin) composited with a marker layer (a dot grid displaced by the
//! contact). Every label is known exactly because it is an input.

mod dataset;
mod io;
mod render;

pub use dataset::{make_dataset, split_sizes, Dataset, Sample, Split, Target, Task, TaskConfig, TaskKind};
pub use io::{load_dataset, save_dataset, MANIFEST_FILE, MANIFEST_SCHEMA_VERSION};
pub use render::{
    force_from_contact, generate_sample, marker_positions, modality_toggle, reference_marker_positions,
    render_layers, Layers, MARKER_RGB, PLAIN_BACKGROUND,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Native render resolution (square).
pub const RENDER_SIZE: usize = 128;
/// Physical width of the sensor field covered by the image.
pub const FIELD_MM: f64 = 40.0;
pub const PX_PER_MM: f64 = RENDER_SIZE as f64 / FIELD_MM;
pub const NUM_TEXTURES: u32 = 6;

pub const X_OFFSET_RANGE: (f64, f64) = (-8.0, 8.0);
pub const PRESS_DEPTH_RANGE: (f64, f64) = (0.0, 3.0);
pub const ROTATION_RANGE: (f64, f64) = (-45.0, 45.0);
pub const CONTACT_XY_RANGE: (f64, f64) = (-8.0, 8.0);
pub const CONTACT_Z_RANGE: (f64, f64) = (0.0, 3.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Hexagon,
    Cross,
    Annulus,
    /// Straight edge of a flat plate, used by the edge-pose task.
    Edge,
}

impl ShapeClass {
    /// The object classes of the shape-identification task.
    pub const OBJECTS: [ShapeClass; 6] = [
        ShapeClass::Circle,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Hexagon,
        ShapeClass::Cross,
        ShapeClass::Annulus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(ShapeClass::Circle),
            1 => Some(ShapeClass::Square),
            2 => Some(ShapeClass::Triangle),
            3 => Some(ShapeClass::Hexagon),
            4 => Some(ShapeClass::Cross),
            5 => Some(ShapeClass::Annulus),
            6 => Some(ShapeClass::Edge),
            _ => None,
        }
    }
}

/// Edge pose: horizontal offset and press depth in mm, rotation in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgePose {
    pub x_offset: f64,
    pub press_depth: f64,
    pub rotation: f64,
}

/// Contact location on the sensor surface, mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactPoint {
    pub px: f64,
    pub py: f64,
    pub pz: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerGrid {
    pub rows: usize,
    pub cols: usize,
    pub spacing_px: f64,
    pub marker_radius_px: f64,
}

impl Default for MarkerGrid {
    fn default() -> Self {
        MarkerGrid {
            rows: 9,
            cols: 9,
            spacing_px: 13.0,
            marker_radius_px: 2.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape_class: ShapeClass,
    pub edge_pose: EdgePose,
    pub contact_point: ContactPoint,
    pub texture_id: u32,
    pub marker_grid: MarkerGrid,
    pub noise_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            shape_class: ShapeClass::Circle,
            edge_pose: EdgePose {
                x_offset: 0.0,
                press_depth: 0.0,
                rotation: 0.0,
            },
            contact_point: ContactPoint {
                px: 0.0,
                py: 0.0,
                pz: 0.0,
            },
            texture_id: 0,
            marker_grid: MarkerGrid::default(),
            noise_seed: 0,
        }
    }
}

fn check_range(name: &str, v: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(Error::InvalidScene(format!("{name} = {v} outside [{lo}, {hi}]")))
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        check_range("x_offset", self.edge_pose.x_offset, X_OFFSET_RANGE)?;
        check_range("press_depth", self.edge_pose.press_depth, PRESS_DEPTH_RANGE)?;
        check_range("rotation", self.edge_pose.rotation, ROTATION_RANGE)?;
        check_range("px", self.contact_point.px, CONTACT_XY_RANGE)?;
        check_range("py", self.contact_point.py, CONTACT_XY_RANGE)?;
        check_range("pz", self.contact_point.pz, CONTACT_Z_RANGE)?;
        if self.texture_id >= NUM_TEXTURES {
            return Err(Error::InvalidScene(format!(
                "texture_id {} >= {NUM_TEXTURES}",
                self.texture_id
            )));
        }
        let g = &self.marker_grid;
        if g.rows == 0 || g.cols == 0 {
            return Err(Error::InvalidScene("marker grid must have at least one marker".into()));
        }
        if !(g.marker_radius_px > 0.0) || !(g.spacing_px > 2.0 * g.marker_radius_px) {
            return Err(Error::InvalidScene(format!(
                "marker spacing {} must exceed marker diameter {}",
                g.spacing_px,
                2.0 * g.marker_radius_px
            )));
        }
        let size = RENDER_SIZE as f64;
        let extent_x = (g.cols - 1) as f64 * g.spacing_px + 2.0 * g.marker_radius_px;
        let extent_y = (g.rows - 1) as f64 * g.spacing_px + 2.0 * g.marker_radius_px;
        if extent_x > size || extent_y > size {
            return Err(Error::InvalidScene(format!(
                "marker grid {extent_x:.1}x{extent_y:.1} px does not fit the {size} px frame"
            )));
        }
        Ok(())
    }
}

/// Ground truth attached to a rendered scene. Units are mm and degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub shape_class: ShapeClass,
    pub texture_id: u32,
    /// (x, z, θ): horizontal distance, press depth, rotation.
    pub edge_pose: [f64; 3],
    pub contact_point: [f64; 3],
    pub force: [f64; 3],
}

impl Labels {
    pub fn from_spec(spec: &SceneSpec) -> Self {
        let cp = spec.contact_point;
        Labels {
            shape_class: spec.shape_class,
            texture_id: spec.texture_id,
            edge_pose: [
                spec.edge_pose.x_offset,
                spec.edge_pose.press_depth,
                spec.edge_pose.rotation,
            ],
            contact_point: [cp.px, cp.py, cp.pz],
            force: force_from_contact(&cp, spec.edge_pose.press_depth),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Image,
    pub labels: Labels,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Fused,
    VisualOnly,
    MarkerOnly,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Fused, Modality::VisualOnly, Modality::MarkerOnly];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Fused => "fused",
            Modality::VisualOnly => "visual",
            Modality::MarkerOnly => "marker",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fused" => Some(Modality::Fused),
            "visual" | "visual_only" => Some(Modality::VisualOnly),
            "marker" | "marker_only" => Some(Modality::MarkerOnly),
            _ => None,
        }
    }
}
