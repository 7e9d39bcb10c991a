use rand_distr::{Distribution, Normal};

use super::{
    ContactPoint, LabeledImage, Labels, MarkerGrid, Modality, SceneSpec, ShapeClass, PX_PER_MM,
    RENDER_SIZE,
};
use crate::error::Result;
use crate::image::Image;
use crate::rng;

/// Skin colour used by the marker-only modality (no visual layer).
pub const PLAIN_BACKGROUND: [f32; 3] = [0.78, 0.74, 0.70];
pub const MARKER_RGB: [f32; 3] = [0.06, 0.06, 0.08];

const GEL_RGB: [f64; 3] = [0.55, 0.52, 0.50];
const STRIPE_DARK: [f64; 3] = [0.28, 0.20, 0.18];
const STRIPE_LIGHT: [f64; 3] = [0.90, 0.84, 0.66];
const OBJECT_RADIUS_PX: f64 = 16.0;
const SENSOR_NOISE_STD: f64 = 0.01;
/// Marker displacement per mm of press depth, px.
const DISPLACEMENT_GAIN: f64 = 2.5;
const DISPLACEMENT_SIGMA_PX: f64 = 18.0;
/// Linear stiffness map from (px, py, depth) to (fx, fy, fz), N/mm.
const STIFFNESS: [[f64; 3]; 3] = [[0.15, 0.0, 0.04], [0.0, 0.15, 0.02], [0.01, 0.01, 1.8]];

const TEXTURE_PERIODS: [f64; 3] = [4.0, 6.0, 9.0];
const TEXTURE_ANGLES_DEG: [f64; 2] = [0.0, 60.0];

/// The two unimodal layers of a scene before compositing.
#[derive(Clone, Debug)]
pub struct Layers {
    pub visual: Image,
    /// Per-pixel marker coverage in [0, 1], row-major H×W.
    pub marker_alpha: Vec<f32>,
}

pub fn force_from_contact(cp: &ContactPoint, press_depth: f64) -> [f64; 3] {
    let v = [cp.px, cp.py, press_depth];
    let mut f = [0.0; 3];
    for (fi, row) in f.iter_mut().zip(STIFFNESS.iter()) {
        *fi = row.iter().zip(&v).map(|(k, x)| k * x).sum();
    }
    f
}

/// Object centre in pixel coordinates `(y, x)`.
fn contact_center_px(spec: &SceneSpec) -> (f64, f64) {
    let c = RENDER_SIZE as f64 / 2.0;
    (
        c + spec.contact_point.py * PX_PER_MM,
        c + (spec.contact_point.px + spec.edge_pose.x_offset) * PX_PER_MM,
    )
}

/// Undeformed marker centres `(y, x)` in pixels, row-major over the grid.
pub fn reference_marker_positions(grid: &MarkerGrid) -> Vec<(f64, f64)> {
    let c = RENDER_SIZE as f64 / 2.0;
    let mut out = Vec::with_capacity(grid.rows * grid.cols);
    for r in 0..grid.rows {
        for k in 0..grid.cols {
            out.push((
                c + (r as f64 - (grid.rows - 1) as f64 / 2.0) * grid.spacing_px,
                c + (k as f64 - (grid.cols - 1) as f64 / 2.0) * grid.spacing_px,
            ));
        }
    }
    out
}

/// Marker centres after the contact displacement field is applied.
///
/// The field is a Gaussian-attenuated radial push away from the contact
/// centre plus a tangential twist proportional to rotation, both scaled
/// linearly by press depth.
pub fn marker_positions(spec: &SceneSpec) -> Vec<(f64, f64)> {
    let (cy, cx) = contact_center_px(spec);
    let gain = DISPLACEMENT_GAIN * spec.edge_pose.press_depth;
    let twist = 0.5 * spec.edge_pose.rotation / 45.0;
    reference_marker_positions(&spec.marker_grid)
        .into_iter()
        .map(|(y, x)| {
            let dy = (y - cy) / DISPLACEMENT_SIGMA_PX;
            let dx = (x - cx) / DISPLACEMENT_SIGMA_PX;
            let atten = gain * (-(dy * dy + dx * dx) / 2.0).exp();
            (y + atten * (dy - twist * dx), x + atten * (dx + twist * dy))
        })
        .collect()
}

fn inside_regular_polygon(lx: f64, ly: f64, radius: f64, sides: usize) -> bool {
    let apothem = radius * (std::f64::consts::PI / sides as f64).cos();
    (0..sides).all(|k| {
        let a = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / sides as f64 - std::f64::consts::FRAC_PI_2;
        lx * a.cos() + ly * a.sin() <= apothem
    })
}

fn inside_shape(shape: ShapeClass, lx: f64, ly: f64, r: f64) -> bool {
    let d = (lx * lx + ly * ly).sqrt();
    match shape {
        ShapeClass::Circle => d <= r,
        ShapeClass::Square => lx.abs().max(ly.abs()) <= 0.8 * r,
        ShapeClass::Triangle => inside_regular_polygon(lx, ly, r, 3),
        ShapeClass::Hexagon => inside_regular_polygon(lx, ly, r, 6),
        ShapeClass::Cross => {
            (lx.abs() <= 0.3 * r && ly.abs() <= r) || (ly.abs() <= 0.3 * r && lx.abs() <= r)
        }
        ShapeClass::Annulus => d <= r && d >= 0.55 * r,
        // Plate occupying the half-plane left of the edge line, cut to a disc.
        ShapeClass::Edge => lx <= 0.0 && d <= 2.6 * r,
    }
}

fn render_visual(spec: &SceneSpec) -> Image {
    let n = RENDER_SIZE;
    let (cy, cx) = contact_center_px(spec);
    let depth = spec.edge_pose.press_depth;
    let radius = OBJECT_RADIUS_PX * (0.85 + 0.1 * depth);
    let theta = spec.edge_pose.rotation.to_radians();
    let (st, ct) = theta.sin_cos();
    let period = TEXTURE_PERIODS[(spec.texture_id % 3) as usize];
    let phi = TEXTURE_ANGLES_DEG[(spec.texture_id / 3) as usize % 2].to_radians();
    let (sp, cp) = phi.sin_cos();
    let shade = 0.75 + 0.25 * depth / 3.0;

    let to_local = |y: f64, x: f64| {
        let dy = y - cy;
        let dx = x - cx;
        (ct * dx + st * dy, -st * dx + ct * dy)
    };

    let mut noise_rng = rng::seeded(spec.noise_seed);
    let noise = Normal::new(0.0, SENSOR_NOISE_STD).expect("valid std");
    let mut img = Image::new(n, n);
    const SUB: usize = 3;
    for y in 0..n {
        for x in 0..n {
            let mut hits = 0usize;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64;
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64;
                    let (lx, ly) = to_local(py, px);
                    if inside_shape(spec.shape_class, lx, ly, radius) {
                        hits += 1;
                    }
                }
            }
            let coverage = hits as f64 / (SUB * SUB) as f64;
            let (lx, ly) = to_local(y as f64 + 0.5, x as f64 + 0.5);
            let phase = 2.0 * std::f64::consts::PI * (lx * cp + ly * sp) / period;
            let stripe = 0.5 + 0.5 * phase.cos();
            let mut rgb = [0.0f32; 3];
            for c in 0..3 {
                let obj = shade * (STRIPE_DARK[c] + (STRIPE_LIGHT[c] - STRIPE_DARK[c]) * stripe);
                let v = GEL_RGB[c] + (obj - GEL_RGB[c]) * coverage + noise.sample(&mut noise_rng);
                rgb[c] = v.clamp(0.0, 1.0) as f32;
            }
            img.set_pixel(y, x, rgb);
        }
    }
    img
}

fn render_marker_alpha(spec: &SceneSpec) -> Vec<f32> {
    let n = RENDER_SIZE;
    let mut alpha = vec![0.0f32; n * n];
    let r = spec.marker_grid.marker_radius_px;
    for (my, mx) in marker_positions(spec) {
        let y0 = ((my - r - 1.0).floor().max(0.0)) as usize;
        let y1 = ((my + r + 1.0).ceil().min((n - 1) as f64)) as usize;
        let x0 = ((mx - r - 1.0).floor().max(0.0)) as usize;
        let x1 = ((mx + r + 1.0).ceil().min((n - 1) as f64)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 + 0.5 - my;
                let dx = x as f64 + 0.5 - mx;
                let a = (r + 0.5 - (dy * dy + dx * dx).sqrt()).clamp(0.0, 1.0) as f32;
                let slot = &mut alpha[y * n + x];
                *slot = slot.max(a);
            }
        }
    }
    alpha
}

pub fn render_layers(spec: &SceneSpec) -> Result<Layers> {
    spec.validate()?;
    Ok(Layers {
        visual: render_visual(spec),
        marker_alpha: render_marker_alpha(spec),
    })
}

/// `out = (1 - α) · base + α · marker` at every pixel.
fn composite(base: &Image, alpha: &[f32]) -> Image {
    let mut out = base.clone();
    for (i, &a) in alpha.iter().enumerate() {
        if a > 0.0 {
            for c in 0..3 {
                let v = &mut out.data[i * 3 + c];
                *v = (1.0 - a) * *v + a * MARKER_RGB[c];
            }
        }
    }
    out
}

impl Layers {
    pub fn compose(&self, mode: Modality) -> Image {
        match mode {
            Modality::Fused => composite(&self.visual, &self.marker_alpha),
            Modality::VisualOnly => self.visual.clone(),
            Modality::MarkerOnly => {
                let plain = Image::filled(self.visual.height, self.visual.width, PLAIN_BACKGROUND);
                composite(&plain, &self.marker_alpha)
            }
        }
    }
}

pub fn modality_toggle(spec: &SceneSpec, mode: Modality) -> Result<LabeledImage> {
    let layers = render_layers(spec)?;
    Ok(LabeledImage {
        pixels: layers.compose(mode),
        labels: Labels::from_spec(spec),
    })
}

pub fn generate_sample(spec: &SceneSpec) -> Result<LabeledImage> {
    modality_toggle(spec, Modality::Fused)
}

/// Random in-range scene for property tests and smoke runs.
#[cfg(test)]
pub(crate) fn random_scene<R: rand::Rng>(rng: &mut R) -> SceneSpec {
    let depth = rng.random_range(0.0..=3.0);
    SceneSpec {
        shape_class: ShapeClass::OBJECTS[rng.random_range(0..6)],
        edge_pose: super::EdgePose {
            x_offset: rng.random_range(-4.0..=4.0),
            press_depth: depth,
            rotation: rng.random_range(-45.0..=45.0),
        },
        contact_point: ContactPoint {
            px: rng.random_range(-4.0..=4.0),
            py: rng.random_range(-4.0..=4.0),
            pz: depth,
        },
        texture_id: rng.random_range(0..super::NUM_TEXTURES),
        marker_grid: MarkerGrid::default(),
        noise_seed: rng.random(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn depth_spec(depth: f64) -> SceneSpec {
        let mut s = SceneSpec::default();
        s.edge_pose.press_depth = depth;
        s.contact_point.pz = depth;
        s.contact_point.px = 1.5;
        s.contact_point.py = -2.0;
        s
    }

    /// Marker centroids recovered from pixels: darkness-weighted mean inside a
    /// window around each reference position.
    fn extract_centroids(img: &Image, spec: &SceneSpec) -> Vec<(f64, f64)> {
        let half = spec.marker_grid.spacing_px / 2.0;
        reference_marker_positions(&spec.marker_grid)
            .into_iter()
            .map(|(ry, rx)| {
                let (mut sw, mut sy, mut sx) = (0.0, 0.0, 0.0);
                let y0 = (ry - half).floor().max(0.0) as usize;
                let y1 = ((ry + half).ceil() as usize).min(img.height - 1);
                let x0 = (rx - half).floor().max(0.0) as usize;
                let x1 = ((rx + half).ceil() as usize).min(img.width - 1);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let w = (PLAIN_BACKGROUND[0] - img.get(y, x, 0)).max(0.0) as f64;
                        sw += w;
                        sy += w * (y as f64 + 0.5);
                        sx += w * (x as f64 + 0.5);
                    }
                }
                (sy / sw, sx / sw)
            })
            .collect()
    }

    fn max_displacement(img: &Image, spec: &SceneSpec) -> f64 {
        let reference = reference_marker_positions(&spec.marker_grid);
        extract_centroids(img, spec)
            .iter()
            .zip(&reference)
            .map(|(a, b)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_depth_leaves_markers_on_reference_grid() {
        let spec = depth_spec(0.0);
        let moved = marker_positions(&spec);
        let reference = reference_marker_positions(&spec.marker_grid);
        let max = moved
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a.0 - b.0).abs().max((a.1 - b.1).abs()))
            .fold(0.0, f64::max);
        assert_eq!(max, 0.0);
        let img = modality_toggle(&spec, Modality::MarkerOnly).unwrap().pixels;
        assert!(max_displacement(&img, &spec) < 0.05);
    }

    #[test]
    fn deeper_press_displaces_markers_further() {
        let a = depth_spec(1.0);
        let b = depth_spec(2.0);
        let ia = modality_toggle(&a, Modality::MarkerOnly).unwrap().pixels;
        let ib = modality_toggle(&b, Modality::MarkerOnly).unwrap().pixels;
        let da = max_displacement(&ia, &a);
        let db = max_displacement(&ib, &b);
        assert!(da > 0.5, "depth 1 should visibly move markers, got {da}");
        assert!(db > da, "{db} <= {da}");
    }

    #[test]
    fn rendering_is_bit_deterministic() {
        let mut spec = depth_spec(1.3);
        spec.shape_class = ShapeClass::Hexagon;
        spec.noise_seed = 99;
        let a = generate_sample(&spec).unwrap();
        let b = generate_sample(&spec).unwrap();
        assert_eq!(a.pixels.data, b.pixels.data);
    }

    #[test]
    fn marker_only_at_zero_depth_is_reference_grid_on_plain_background() {
        let spec = depth_spec(0.0);
        let img = modality_toggle(&spec, Modality::MarkerOnly).unwrap().pixels;
        let reference = reference_marker_positions(&spec.marker_grid);
        let r = spec.marker_grid.marker_radius_px;
        for y in 0..RENDER_SIZE {
            for x in 0..RENDER_SIZE {
                let near = reference.iter().any(|&(my, mx)| {
                    ((y as f64 + 0.5 - my).powi(2) + (x as f64 + 0.5 - mx).powi(2)).sqrt() < r + 0.5
                });
                if !near {
                    assert_eq!(img.pixel(y, x), PLAIN_BACKGROUND);
                }
            }
        }
        // each marker centre is fully dark
        for &(my, mx) in &reference {
            assert_eq!(img.pixel(my as usize, mx as usize), MARKER_RGB);
        }
    }

    #[test]
    fn visual_only_ignores_marker_grid() {
        let mut a = depth_spec(2.0);
        a.shape_class = ShapeClass::Cross;
        let mut b = a;
        b.marker_grid = MarkerGrid {
            rows: 5,
            cols: 7,
            spacing_px: 17.0,
            marker_radius_px: 3.0,
        };
        let ia = modality_toggle(&a, Modality::VisualOnly).unwrap();
        let ib = modality_toggle(&b, Modality::VisualOnly).unwrap();
        assert_eq!(ia.pixels.data, ib.pixels.data);
    }

    #[test]
    fn fused_differs_from_visual_on_marker_footprints() {
        let spec = depth_spec(1.0);
        let layers = render_layers(&spec).unwrap();
        let fused = layers.compose(Modality::Fused);
        let visual = layers.compose(Modality::VisualOnly);
        let mut footprint = 0;
        for (i, &a) in layers.marker_alpha.iter().enumerate() {
            if a > 0.5 {
                footprint += 1;
                let diff: f32 = (0..3).map(|c| (fused.data[i * 3 + c] - visual.data[i * 3 + c]).abs()).sum();
                assert!(diff > 0.0);
            }
        }
        assert!(footprint > 100);
    }

    #[test]
    fn shapes_are_distinct_silhouettes() {
        let mut images = Vec::new();
        for shape in ShapeClass::OBJECTS {
            let mut s = depth_spec(1.0);
            s.shape_class = shape;
            images.push(modality_toggle(&s, Modality::VisualOnly).unwrap().pixels);
        }
        for i in 0..images.len() {
            for j in i + 1..images.len() {
                assert_ne!(images[i].data, images[j].data);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn fused_is_composite_of_layers(seed in any::<u64>()) {
            let mut r = rng::seeded(seed);
            let spec = random_scene(&mut r);
            let layers = render_layers(&spec).unwrap();
            let fused = modality_toggle(&spec, Modality::Fused).unwrap();
            for (i, &a) in layers.marker_alpha.iter().enumerate() {
                for c in 0..3 {
                    let want = (1.0 - a) * layers.visual.data[i * 3 + c] + a * MARKER_RGB[c];
                    prop_assert_eq!(fused.pixels.data[i * 3 + c], want);
                }
            }
            prop_assert!(fused.pixels.data.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(fused.labels, Labels::from_spec(&spec));
        }

        #[test]
        fn max_displacement_non_decreasing_in_depth(d1 in 0.0f64..3.0, d2 in 0.0f64..3.0, rot in -45.0f64..45.0) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let disp = |d: f64| {
                let mut s = depth_spec(d);
                s.edge_pose.rotation = rot;
                let reference = reference_marker_positions(&s.marker_grid);
                marker_positions(&s).iter().zip(&reference)
                    .map(|(a, b)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
                    .fold(0.0, f64::max)
            };
            prop_assert!(disp(lo) <= disp(hi));
        }
    }
}
