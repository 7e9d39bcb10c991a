//! Batched layers with explicit forward caches and reverse-mode passes.

use serde::{Deserialize, Serialize};

use crate::feature::FeatureMap;
use crate::image::Image;
use crate::scalar::{mat, Scalar};

pub const BN_EPS: f64 = 1e-5;

/// Batch activations, channel-major: `C×N×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Act<T: Scalar> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Act<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Act {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.channels, other.batch, other.height, other.width)
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    fn offset(&self, c: usize, n: usize) -> usize {
        (c * self.batch + n) * self.plane()
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.batch, self.height, self.width)
    }

    /// Packs `H×W×3` images into a batch tensor.
    pub fn from_images(images: &[&Image]) -> Self {
        let n = images.len();
        let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
        let mut act = Self::zeros(3, n, h, w);
        for (b, img) in images.iter().enumerate() {
            assert_eq!((img.height, img.width), (h, w), "mixed image sizes in batch");
            for c in 0..3 {
                let o = act.offset(c, b);
                for (p, px) in img.data.chunks_exact(3).enumerate() {
                    act.data[o + p] = T::lit(px[c] as f64);
                }
            }
        }
        act
    }

    pub fn sample_map(&self, n: usize) -> FeatureMap<T> {
        let p = self.plane();
        let mut data = Vec::with_capacity(self.channels * p);
        for c in 0..self.channels {
            let o = self.offset(c, n);
            data.extend_from_slice(&self.data[o..o + p]);
        }
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn add_sample_map(&mut self, n: usize, map: &FeatureMap<T>) {
        assert_eq!((map.channels, map.height, map.width), (self.channels, self.height, self.width));
        let p = self.plane();
        for c in 0..self.channels {
            let o = self.offset(c, n);
            for (d, s) in self.data[o..o + p].iter_mut().zip(&map.data[c * p..(c + 1) * p]) {
                *d += *s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

#[inline]
fn out_side(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

/// 3×3, pad 1 patch matrix: rows `(ci, ky, kx)`, columns `(n, oy, ox)`.
fn im2col<T: Scalar>(x: &Act<T>, stride: usize) -> (Vec<T>, usize, usize) {
    let (c, n, h, w) = x.shape();
    let (ho, wo) = (out_side(h, stride), out_side(w, stride));
    let cols_n = n * ho * wo;
    let mut cols = vec![T::zero(); c * 9 * cols_n];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_n;
                for b in 0..n {
                    let src = x.offset(ci, b);
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = row + (b * ho + oy) * wo;
                        let src_row = src + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                cols[dst + ox] = x.data[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im<T: Scalar>(cols: &[T], shape: (usize, usize, usize, usize), stride: usize) -> Act<T> {
    let (c, n, h, w) = shape;
    let (ho, wo) = (out_side(h, stride), out_side(w, stride));
    let cols_n = n * ho * wo;
    let mut x = Act::zeros(c, n, h, w);
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_n;
                for b in 0..n {
                    let dst = x.offset(ci, b);
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = row + (b * ho + oy) * wo;
                        let dst_row = dst + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                x.data[dst_row + ix as usize] += cols[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Cached state of one conv → norm → ReLU unit.
#[derive(Clone, Debug)]
pub(crate) struct UnitCache<T: Scalar> {
    pub input_shape: (usize, usize, usize, usize),
    pub cols: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, for running statistics.
    pub batch_var: Vec<T>,
    pub out: Act<T>,
}

pub(crate) struct UnitRef<'a, T: Scalar> {
    pub c_out: usize,
    pub stride: usize,
    pub weight: &'a [T],
    pub gamma: &'a [T],
    pub beta: &'a [T],
}

pub(crate) fn unit_forward<T: Scalar>(
    unit: &UnitRef<'_, T>,
    x: &Act<T>,
    mode: BnMode,
    running: (&[T], &[T]),
) -> UnitCache<T> {
    let c_in = x.channels;
    let (cols, ho, wo) = im2col(x, unit.stride);
    let n = x.batch;
    let np = n * ho * wo;
    let mut y = Act::zeros(unit.c_out, n, ho, wo);
    mat::mul(unit.c_out, c_in * 9, np, unit.weight, &cols, &mut y.data, false);

    let eps = T::lit(BN_EPS);
    let count = T::lit(np as f64);
    let mut xhat = vec![T::zero(); y.data.len()];
    let mut inv_std = vec![T::zero(); unit.c_out];
    let mut batch_mean = vec![T::zero(); unit.c_out];
    let mut batch_var = vec![T::zero(); unit.c_out];
    for c in 0..unit.c_out {
        let slice = &mut y.data[c * np..(c + 1) * np];
        let (mean, var) = match mode {
            BnMode::Train => {
                let mean = slice.iter().copied().sum::<T>() / count;
                let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
                batch_mean[c] = mean;
                batch_var[c] = if np > 1 {
                    var * count / T::lit((np - 1) as f64)
                } else {
                    var
                };
                (mean, var)
            }
            BnMode::Eval => (running.0[c], running.1[c]),
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std[c] = is;
        let (g, b) = (unit.gamma[c], unit.beta[c]);
        let xh = &mut xhat[c * np..(c + 1) * np];
        for (v, h) in slice.iter_mut().zip(xh.iter_mut()) {
            *h = (*v - mean) * is;
            let out = g * *h + b;
            *v = if out > T::zero() { out } else { T::zero() };
        }
    }
    UnitCache {
        input_shape: x.shape(),
        cols,
        xhat,
        inv_std,
        mode,
        batch_mean,
        batch_var,
        out: y,
    }
}

/// Accumulates parameter gradients into `dw`, `dgamma`, `dbeta`; returns the
/// input gradient when `need_dx`.
pub(crate) fn unit_backward<T: Scalar>(
    unit: &UnitRef<'_, T>,
    cache: &UnitCache<T>,
    dy: &Act<T>,
    grads: (&mut [T], &mut [T], &mut [T]),
    need_dx: bool,
) -> Option<Act<T>> {
    let (dw, dgamma, dbeta) = grads;
    let c_in = cache.input_shape.0;
    let np = dy.batch * dy.height * dy.width;
    let count = T::lit(np as f64);
    let mut dz = vec![T::zero(); dy.data.len()];
    for c in 0..unit.c_out {
        let range = c * np..(c + 1) * np;
        let out = &cache.out.data[range.clone()];
        let xh = &cache.xhat[range.clone()];
        let g_out = &dy.data[range.clone()];
        let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
        // ReLU gate folded in: gradient only where the unit fired
        let dn = &mut dz[range];
        for k in 0..np {
            let d = if out[k] > T::zero() { g_out[k] } else { T::zero() };
            dn[k] = d;
            sum_dy += d;
            sum_dy_xh += d * xh[k];
        }
        dgamma[c] += sum_dy_xh;
        dbeta[c] += sum_dy;
        let scale = unit.gamma[c] * cache.inv_std[c];
        match cache.mode {
            BnMode::Train => {
                let m_dy = sum_dy / count;
                let m_dyx = sum_dy_xh / count;
                for k in 0..np {
                    dn[k] = scale * (dn[k] - m_dy - xh[k] * m_dyx);
                }
            }
            BnMode::Eval => {
                for v in dn.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
    let k = c_in * 9;
    mat::mul_bt(unit.c_out, np, k, &dz, &cache.cols, dw, true);
    if !need_dx {
        return None;
    }
    let mut dcols = vec![T::zero(); k * np];
    mat::mul_at(k, unit.c_out, np, unit.weight, &dz, &mut dcols, false);
    Some(col2im(&dcols, cache.input_shape, unit.stride))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LinearParams<T: Scalar> {
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major `d_out × d_in`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MlpParams<T: Scalar> {
    pub hidden: LinearParams<T>,
    pub output: LinearParams<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct MlpCache<T: Scalar> {
    pub input: Vec<T>,
    pub hidden: Vec<T>,
    pub rows: usize,
}

fn linear_forward<T: Scalar>(p: &LinearParams<T>, x: &[T], rows: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * p.d_out];
    for r in 0..rows {
        y[r * p.d_out..(r + 1) * p.d_out].copy_from_slice(&p.bias);
    }
    mat::mul_bt(rows, p.d_in, p.d_out, x, &p.weight, &mut y, true);
    y
}

fn linear_backward<T: Scalar>(p: &LinearParams<T>, x: &[T], dy: &[T], rows: usize, g: &mut LinearParams<T>) -> Vec<T> {
    mat::mul_at(p.d_out, rows, p.d_in, dy, x, &mut g.weight, true);
    for r in 0..rows {
        for (gb, d) in g.bias.iter_mut().zip(&dy[r * p.d_out..(r + 1) * p.d_out]) {
            *gb += *d;
        }
    }
    let mut dx = vec![T::zero(); rows * p.d_in];
    mat::mul(rows, p.d_out, p.d_in, dy, &p.weight, &mut dx, false);
    dx
}

impl<T: Scalar> MlpParams<T> {
    pub(crate) fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, MlpCache<T>) {
        let mut hidden = linear_forward(&self.hidden, x, rows);
        for v in &mut hidden {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let out = linear_forward(&self.output, &hidden, rows);
        (
            out,
            MlpCache {
                input: x.to_vec(),
                hidden,
                rows,
            },
        )
    }

    pub(crate) fn backward(&self, cache: &MlpCache<T>, dy: &[T], grads: &mut MlpParams<T>) -> Vec<T> {
        let mut dh = linear_backward(&self.output, &cache.hidden, dy, cache.rows, &mut grads.output);
        for (d, h) in dh.iter_mut().zip(&cache.hidden) {
            if *h <= T::zero() {
                *d = T::zero();
            }
        }
        linear_backward(&self.hidden, &cache.input, &dh, cache.rows, &mut grads.hidden)
    }
}
