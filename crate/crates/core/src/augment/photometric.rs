use crate::image::Image;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[inline]
fn luma(px: &[f32]) -> f32 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

pub fn hflip(img: &Image) -> Image {
    let mut out = Image::new(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(y, img.width - 1 - x, img.pixel(y, x));
        }
    }
    out
}

pub fn adjust_brightness(img: &mut Image, factor: f64) {
    let f = factor as f32;
    for v in &mut img.data {
        *v = (*v * f).clamp(0.0, 1.0);
    }
}

pub fn adjust_contrast(img: &mut Image, factor: f64) {
    let n = (img.height * img.width) as f64;
    let mean = (img.data.chunks_exact(3).map(|p| luma(p) as f64).sum::<f64>() / n) as f32;
    let f = factor as f32;
    for v in &mut img.data {
        *v = (mean + (*v - mean) * f).clamp(0.0, 1.0);
    }
}

pub fn adjust_saturation(img: &mut Image, factor: f64) {
    let f = factor as f32;
    for px in img.data.chunks_exact_mut(3) {
        let g = luma(px);
        for v in px.iter_mut() {
            *v = (g + (*v - g) * f).clamp(0.0, 1.0);
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rotates hue by `shift` turns.
pub fn adjust_hue(img: &mut Image, shift: f64) {
    if shift == 0.0 {
        return;
    }
    let d = shift as f32;
    for px in img.data.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let rgb = hsv_to_rgb(h + d, s, v);
        for (o, c) in px.iter_mut().zip(rgb) {
            *o = c.clamp(0.0, 1.0);
        }
    }
}

pub fn grayscale(img: &mut Image) {
    for px in img.data.chunks_exact_mut(3) {
        let g = luma(px);
        px.fill(g);
    }
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Image, kernel: usize, sigma: f64) -> Image {
    if kernel <= 1 || sigma <= 0.0 {
        return img.clone();
    }
    let half = (kernel / 2) as isize;
    let mut weights: Vec<f64> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let (h, w) = (img.height, img.width);
    let mut tmp = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (k, wt) in weights.iter().enumerate() {
                let xx = reflect(x as isize + k as isize - half, w);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += wt * img.get(y, xx, c) as f64;
                }
            }
            tmp.set_pixel(y, x, [acc[0] as f32, acc[1] as f32, acc[2] as f32]);
        }
    }
    let mut out = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (k, wt) in weights.iter().enumerate() {
                let yy = reflect(y as isize + k as isize - half, h);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += wt * tmp.get(yy, x, c) as f64;
                }
            }
            out.set_pixel(y, x, [acc[0] as f32, acc[1] as f32, acc[2] as f32]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5, 0.9), (0.9, 0.1, 0.1), (0.3, 0.3, 0.3), (0.0, 1.0, 0.5)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let back = hsv_to_rgb(h, s, v);
            for (x, y) in back.iter().zip([r, g, b]) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn full_hue_turn_is_identity() {
        let mut img = Image::filled(2, 2, [0.7, 0.2, 0.4]);
        adjust_hue(&mut img, 1.0);
        for px in img.data.chunks_exact(3) {
            assert!((px[0] - 0.7).abs() < 1e-5 && (px[1] - 0.2).abs() < 1e-5 && (px[2] - 0.4).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Image::filled(9, 7, [0.25, 0.5, 0.75]);
        let out = gaussian_blur(&img, 7, 1.3);
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
    }
}
