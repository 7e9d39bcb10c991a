use serde::{Deserialize, Serialize};

/// Interleaved RGB image with `f32` samples, row-major `H×W×3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel-center coordinates, clamped at
    /// the borders.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> [f32; 3] {
        let (y0, y1, wy) = bilinear_taps(y, self.height);
        let (x0, x1, wx) = bilinear_taps(x, self.width);
        let mut out = [0.0f32; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let a = self.get(y0, x0, c) as f64;
            let b = self.get(y0, x1, c) as f64;
            let d = self.get(y1, x0, c) as f64;
            let e = self.get(y1, x1, c) as f64;
            let top = a + (b - a) * wx;
            let bot = d + (e - d) * wx;
            *o = (top + (bot - top) * wy) as f32;
        }
        out
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Integer neighbours and fractional weight for bilinear interpolation at
/// continuous index `t` on an axis of length `len`, with edge clamping.
#[inline]
pub(crate) fn bilinear_taps(t: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let t = t.clamp(0.0, max);
    let i0 = t.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, t - i0 as f64)
}

/// Full-frame bilinear resize (pixel-center convention, no antialiasing).
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    let mut out = Image::new(height, width);
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    for r in 0..height {
        let y = (r as f64 + 0.5) * sy - 0.5;
        for c in 0..width {
            let x = (c as f64 + 0.5) * sx - 0.5;
            out.set_pixel(r, c, img.sample_bilinear(y, x));
        }
    }
    out
}
