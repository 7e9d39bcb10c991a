//! Two-view augmentation and the geometry linking the views.
//!
//! Geometric ops (crop, resize, flip) define an affine map between the
//! normalized coordinates of two views; photometric ops never touch it.

mod photometric;
pub mod warp;

pub use photometric::{adjust_brightness, adjust_contrast, adjust_hue, adjust_saturation, gaussian_blur, grayscale, hflip};
pub use warp::{map_coords, overlap_mask, warp_between, AffineWarp, Mapped, OverlapMask, ViewGeometry};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;

/// Reference resolution at which the blur kernel size is specified.
pub const REFERENCE_RESOLUTION: usize = 224;
pub const REFERENCE_BLUR_KERNEL: usize = 23;

/// Crop rectangle in continuous source-pixel units; covers
/// `[top, top + height) × [left, left + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl CropRect {
    pub fn full(source: (usize, usize)) -> Self {
        CropRect {
            top: 0.0,
            left: 0.0,
            height: source.0 as f64,
            width: source.1 as f64,
        }
    }

    pub fn area(&self) -> f64 {
        self.height * self.width
    }

    pub fn fits(&self, source: (usize, usize)) -> bool {
        const EPS: f64 = 1e-9;
        self.height > 0.0
            && self.width > 0.0
            && self.top >= -EPS
            && self.left >= -EPS
            && self.top + self.height <= source.0 as f64 + EPS
            && self.left + self.width <= source.1 as f64 + EPS
    }
}

/// Sampled photometric factors: multiplicative brightness/contrast/saturation
/// and an additive hue shift in turns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurParams {
    pub kernel: usize,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub source_size: (usize, usize),
    pub crop: CropRect,
    pub output_size: usize,
    pub hflip: bool,
    pub jitter: Option<ColorJitter>,
    pub grayscale: bool,
    pub blur: Option<BlurParams>,
}

impl ViewParams {
    /// Full-frame resize with every other op disabled.
    pub fn identity(source_size: (usize, usize), output_size: usize) -> Self {
        ViewParams {
            source_size,
            crop: CropRect::full(source_size),
            output_size,
            hflip: false,
            jitter: None,
            grayscale: false,
            blur: None,
        }
    }

    pub fn geometry(&self) -> ViewGeometry {
        ViewGeometry {
            crop: self.crop,
            hflip: self.hflip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.crop.fits(self.source_size) {
            return Err(Error::InvalidConfig(format!(
                "crop {:?} outside source {:?}",
                self.crop, self.source_size
            )));
        }
        if self.output_size == 0 {
            return Err(Error::InvalidConfig("output size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-channel normalization constants applied after all other ops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Dataset-level per-channel mean and standard deviation.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            for px in img.data.chunks_exact(3) {
                for c in 0..3 {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += img.height * img.width;
        }
        if count == 0 {
            return Self::default();
        }
        let n = count as f64;
        let mut out = Normalization::identity();
        for c in 0..3 {
            out.mean[c] = sum[c] / n;
            out.std[c] = (sq[c] / n - out.mean[c] * out.mean[c]).max(1e-12).sqrt();
        }
        out
    }

    pub fn apply(&self, img: &mut Image) {
        for px in img.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = ((px[c] as f64 - self.mean[c]) / self.std[c]) as f32;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub output_size: usize,
    /// Crop area as a fraction of the source area.
    pub area_range: (f64, f64),
    pub aspect_range: (f64, f64),
    pub p_hflip: f64,
    pub p_jitter: f64,
    /// Maximum brightness, contrast, saturation and hue deltas.
    pub jitter_strength: [f64; 4],
    pub p_grayscale: f64,
    pub blur: bool,
    /// Blur sigma range at the reference resolution; scaled with the output.
    pub blur_sigma_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            output_size: 64,
            area_range: (0.2, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            p_hflip: 0.5,
            p_jitter: 0.8,
            jitter_strength: [0.4, 0.4, 0.4, 0.1],
            p_grayscale: 0.2,
            blur: true,
            blur_sigma_range: (0.1, 2.0),
        }
    }
}

impl AugmentConfig {
    /// Full-frame views with no flips and no photometric change.
    pub fn identity(output_size: usize) -> Self {
        AugmentConfig {
            output_size,
            area_range: (1.0, 1.0),
            aspect_range: (1.0, 1.0),
            p_hflip: 0.0,
            p_jitter: 0.0,
            jitter_strength: [0.0; 4],
            p_grayscale: 0.0,
            blur: false,
            blur_sigma_range: (0.1, 2.0),
        }
    }

    /// Odd blur kernel scaled from the reference 23 px at 224 px.
    pub fn blur_kernel(&self) -> usize {
        let k = (REFERENCE_BLUR_KERNEL as f64 * self.output_size as f64 / REFERENCE_RESOLUTION as f64).round() as usize;
        let k = k.max(1);
        if k.is_multiple_of(2) {
            k + 1
        } else {
            k
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.area_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!("area_range {:?}", self.area_range)));
        }
        let (alo, ahi) = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::InvalidConfig(format!("aspect_range {:?}", self.aspect_range)));
        }
        for p in [self.p_hflip, self.p_jitter, self.p_grayscale] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.output_size == 0 {
            return Err(Error::InvalidConfig("output_size must be positive".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws one view's parameters.
///
/// The crop area fraction is drawn once, uniformly; the aspect ratio is
/// log-uniform and redrawn up to ten times until the crop fits, after which a
/// square crop of the same area is used.
pub fn sample_view_params(rng: &mut Rng, source_size: (usize, usize), cfg: &AugmentConfig) -> ViewParams {
    let (sh, sw) = (source_size.0 as f64, source_size.1 as f64);
    let area = uniform(rng, cfg.area_range.0, cfg.area_range.1) * sh * sw;
    let (log_lo, log_hi) = (cfg.aspect_range.0.ln(), cfg.aspect_range.1.ln());
    let mut dims = None;
    for _ in 0..10 {
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let w = (area * ratio).sqrt();
        let h = (area / ratio).sqrt();
        if w <= sw && h <= sh {
            dims = Some((h, w));
            break;
        }
    }
    let (h, w) = dims.unwrap_or_else(|| {
        let side = area.sqrt();
        (side.min(sh), (area / side.min(sh)).min(sw))
    });
    let top = uniform(rng, 0.0, sh - h);
    let left = uniform(rng, 0.0, sw - w);

    let hflip = rng.random_bool(cfg.p_hflip);
    let jitter = if rng.random_bool(cfg.p_jitter) {
        let [b, c, s, hue] = cfg.jitter_strength;
        Some(ColorJitter {
            brightness: uniform(rng, (1.0 - b).max(0.0), 1.0 + b),
            contrast: uniform(rng, (1.0 - c).max(0.0), 1.0 + c),
            saturation: uniform(rng, (1.0 - s).max(0.0), 1.0 + s),
            hue: uniform(rng, -hue, hue),
        })
    } else {
        None
    };
    let grayscale = rng.random_bool(cfg.p_grayscale);
    let blur = if cfg.blur {
        let scale = cfg.output_size as f64 / REFERENCE_RESOLUTION as f64;
        let sigma = uniform(rng, cfg.blur_sigma_range.0, cfg.blur_sigma_range.1) * scale;
        Some(BlurParams {
            kernel: cfg.blur_kernel(),
            sigma,
        })
    } else {
        None
    };

    ViewParams {
        source_size,
        crop: CropRect {
            top,
            left,
            height: h,
            width: w,
        },
        output_size: cfg.output_size,
        hflip,
        jitter,
        grayscale,
        blur,
    }
}

/// Crop, resize, flip, jitter, grayscale and blur, without normalization.
/// Values stay in [0, 1].
pub fn render_view(image: &Image, params: &ViewParams) -> Result<Image> {
    if (image.height, image.width) != params.source_size {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{}, view params expect {:?}",
            image.height, image.width, params.source_size
        )));
    }
    params.validate()?;
    let s = params.output_size;
    let crop = params.crop;
    let mut out = Image::new(s, s);
    for r in 0..s {
        let y = crop.top + crop.height * (r as f64 + 0.5) / s as f64;
        for c in 0..s {
            let x = crop.left + crop.width * (c as f64 + 0.5) / s as f64;
            out.set_pixel(r, c, image.sample_bilinear(y - 0.5, x - 0.5));
        }
    }
    if params.hflip {
        out = hflip(&out);
    }
    if let Some(j) = params.jitter {
        adjust_brightness(&mut out, j.brightness);
        adjust_contrast(&mut out, j.contrast);
        adjust_saturation(&mut out, j.saturation);
        adjust_hue(&mut out, j.hue);
    }
    if params.grayscale {
        grayscale(&mut out);
    }
    if let Some(b) = params.blur {
        out = gaussian_blur(&out, b.kernel, b.sigma);
    }
    Ok(out)
}

/// The full view pipeline including per-channel normalization.
pub fn apply_view(image: &Image, params: &ViewParams, norm: &Normalization) -> Result<Image> {
    let mut out = render_view(image, params)?;
    norm.apply(&mut out);
    Ok(out)
}
