use crate::augment::warp::{map_coords, AffineWarp, Mapped};
use crate::feature::FeatureMap;
use crate::image::bilinear_taps;
use crate::scalar::Scalar;

/// Channel-wise L1 magnitude, L2-normalized over the whole grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap<T: Scalar> {
    pub height: usize,
    pub width: usize,
    /// Row-major `H×W`.
    pub values: Vec<T>,
    /// L2 norm of the raw magnitude map; zero means the source was all-zero
    /// and normalization was skipped.
    pub raw_norm: T,
}

impl<T: Scalar> SaliencyMap<T> {
    pub fn from_values(height: usize, width: usize, values: Vec<T>) -> Self {
        assert_eq!(values.len(), height * width);
        SaliencyMap {
            height,
            width,
            values,
            raw_norm: T::one(),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.raw_norm == T::zero()
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.values[i * self.width + j]
    }

    /// Bilinear read at continuous index `(y, x)`, edge-clamped.
    pub fn sample(&self, y: f64, x: f64) -> T {
        let (y0, y1, wy) = bilinear_taps(y, self.height);
        let (x0, x1, wx) = bilinear_taps(x, self.width);
        let (wy, wx) = (T::lit(wy), T::lit(wx));
        let top = self.at(y0, x0) + (self.at(y0, x1) - self.at(y0, x0)) * wx;
        let bot = self.at(y1, x0) + (self.at(y1, x1) - self.at(y1, x0)) * wx;
        top + (bot - top) * wy
    }
}

pub fn saliency<T: Scalar>(f: &FeatureMap<T>) -> SaliencyMap<T> {
    let p = f.plane();
    let mut values = vec![T::zero(); p];
    for c in 0..f.channels {
        for (s, v) in values.iter_mut().zip(&f.data[c * p..(c + 1) * p]) {
            *s += v.abs();
        }
    }
    let raw_norm = values.iter().map(|&v| v * v).sum::<T>().sqrt();
    if raw_norm > T::zero() {
        for v in &mut values {
            *v /= raw_norm;
        }
    }
    SaliencyMap {
        height: f.height,
        width: f.width,
        values,
        raw_norm,
    }
}

/// Pulls a gradient on the normalized map back to the source features.
/// Subgradient `sign(0) = 0` at exact zeros.
pub fn saliency_backward<T: Scalar>(f: &FeatureMap<T>, s: &SaliencyMap<T>, d_s: &[T]) -> FeatureMap<T> {
    let mut out = FeatureMap::zeros(f.height, f.width, f.channels);
    if s.is_degenerate() {
        return out;
    }
    let dot: T = s.values.iter().zip(d_s).map(|(&a, &b)| a * b).sum();
    let d_raw: Vec<T> = s
        .values
        .iter()
        .zip(d_s)
        .map(|(&v, &d)| (d - v * dot) / s.raw_norm)
        .collect();
    let p = f.plane();
    for c in 0..f.channels {
        let src = &f.data[c * p..(c + 1) * p];
        let dst = &mut out.data[c * p..(c + 1) * p];
        for k in 0..p {
            if src[k] > T::zero() {
                dst[k] = d_raw[k];
            } else if src[k] < T::zero() {
                dst[k] = -d_raw[k];
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SalLoss<T: Scalar> {
    pub value: T,
    /// Gradient with respect to the online saliency map.
    pub grad: Vec<T>,
    /// Number of online cells whose warped centre lands in the target view.
    pub mask_count: usize,
}

/// Mean squared saliency difference over the online cells that remain visible
/// in the target view. The target map is read bilinearly at the warped
/// position and is constant. Zero (with `mask_count == 0`) when nothing
/// overlaps.
pub fn sal_loss<T: Scalar>(s_on: &SaliencyMap<T>, s_tg: &SaliencyMap<T>, warp: &AffineWarp) -> SalLoss<T> {
    let (h, w) = (s_on.height, s_on.width);
    let mut diffs = Vec::new();
    let mut value = T::zero();
    for i in 0..h {
        for j in 0..w {
            if let Mapped::Inside { coord, .. } = map_coords(warp, (i, j), (h, w), (s_tg.height, s_tg.width)) {
                let d = s_on.at(i, j) - s_tg.sample(coord.0, coord.1);
                value += d * d;
                diffs.push((i * w + j, d));
            }
        }
    }
    let mut grad = vec![T::zero(); h * w];
    let count = diffs.len();
    if count == 0 {
        return SalLoss {
            value: T::zero(),
            grad,
            mask_count: 0,
        };
    }
    let m = T::lit(count as f64);
    let two = T::lit(2.0);
    for (k, d) in diffs {
        grad[k] = two * d / m;
    }
    SalLoss {
        value: value / m,
        grad,
        mask_count: count,
    }
}

/// SAL on one pair of feature maps, with the gradient carried back to the
/// online features.
#[derive(Clone, Debug, PartialEq)]
pub struct SalLayer<T: Scalar> {
    pub value: T,
    pub grad: FeatureMap<T>,
    pub mask_count: usize,
    /// Either saliency map was all zero.
    pub degenerate: bool,
}

pub fn sal_layer<T: Scalar>(f_on: &FeatureMap<T>, f_tg: &FeatureMap<T>, warp: &AffineWarp) -> SalLayer<T> {
    let s_on = saliency(f_on);
    let s_tg = saliency(f_tg);
    let l = sal_loss(&s_on, &s_tg, warp);
    SalLayer {
        value: l.value,
        grad: saliency_backward(f_on, &s_on, &l.grad),
        mask_count: l.mask_count,
        degenerate: s_on.is_degenerate() || s_tg.is_degenerate(),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::*;
    use crate::augment::warp::AffineWarp;
    use crate::augment::{CropRect, ViewParams};
    use crate::losses::testutil::{fd_map, rand_map};
    use crate::rng;

    #[test]
    fn single_entry_gives_one_hot() {
        let mut f = FeatureMap::<f64>::zeros(4, 5, 3);
        *f.at_mut(2, 3, 1) = 5.0;
        let s = saliency(&f);
        for i in 0..4 {
            for j in 0..5 {
                assert_eq!(s.at(i, j), if (i, j) == (2, 3) { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn zero_map_is_flagged_and_left_zero() {
        let f = FeatureMap::<f64>::zeros(3, 3, 2);
        let s = saliency(&f);
        assert!(s.is_degenerate());
        assert!(s.values.iter().all(|v| *v == 0.0));
        let g = saliency_backward(&f, &s, &[1.0; 9]);
        assert!(g.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_maps_identity_warp_is_zero() {
        let mut r = rng::seeded(1);
        let f = rand_map(4, 4, 6, &mut r);
        let l = sal_layer(&f, &f, &AffineWarp::identity());
        assert!(l.value.abs() < 1e-12);
        assert_eq!(l.mask_count, 16);
    }

    #[test]
    fn disjoint_views_give_zero_with_empty_mask() {
        let geo = |left: f64| ViewParams {
            crop: CropRect { top: 0.0, left, height: 64.0, width: 20.0 },
            ..ViewParams::identity((64, 64), 64)
        };
        let warp = crate::augment::warp::warp_between(&geo(0.0), &geo(40.0));
        let mut r = rng::seeded(2);
        let l = sal_layer(&rand_map(4, 4, 3, &mut r), &rand_map(4, 4, 3, &mut r), &warp);
        assert_eq!(l.mask_count, 0);
        assert_eq!(l.value, 0.0);
        assert!(l.grad.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_cell_shift_matches_hand_sum() {
        let on: Vec<f64> = (0..16).map(|k| (k as f64 * 0.37).sin().abs()).collect();
        let tg: Vec<f64> = (0..16).map(|k| (k as f64 * 0.91).cos().abs()).collect();
        let s_on = SaliencyMap::from_values(4, 4, on.clone());
        let s_tg = SaliencyMap::from_values(4, 4, tg.clone());
        // column j of the online grid lines up with column j + 1 of the target
        let warp = AffineWarp::translation(0.0, 0.25);
        let l = sal_loss(&s_on, &s_tg, &warp);
        let mut sum = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                sum += (on[i * 4 + j] - tg[i * 4 + j + 1]).powi(2);
            }
        }
        assert_eq!(l.mask_count, 12);
        assert!((l.value - sum / 12.0).abs() < 1e-12);
    }

    #[test]
    fn half_cell_shift_interpolates() {
        let s_on = SaliencyMap::from_values(1, 4, vec![0.0; 4]);
        let s_tg = SaliencyMap::from_values(1, 4, vec![1.0, 3.0, 5.0, 7.0]);
        let l = sal_loss(&s_on, &s_tg, &AffineWarp::translation(0.0, 0.125));
        // samples at 0.5, 1.5, 2.5; the last centre (1.0) lies on the border
        // and is clamped to 7
        let expect = (2.0f64.powi(2) + 4.0f64.powi(2) + 6.0f64.powi(2) + 7.0f64.powi(2)) / 4.0;
        assert_eq!(l.mask_count, 4);
        assert!((l.value - expect).abs() < 1e-12, "{}", l.value);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng::seeded(5);
        let f_on = rand_map(4, 4, 5, &mut r);
        let f_tg = rand_map(4, 4, 5, &mut r);
        let warp = AffineWarp::from_matrix([[0.9, 0.1, 0.2], [-0.05, 0.8, 0.3]]);
        let l = sal_layer(&f_on, &f_tg, &warp);
        assert!(l.mask_count > 0 && l.mask_count < 16);
        let num = fd_map(&f_on, |f| sal_layer(f, &f_tg, &warp).value);
        for (a, n) in l.grad.data.iter().zip(&num.data) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn target_is_not_differentiated() {
        let mut r = rng::seeded(6);
        let f_on = rand_map(4, 4, 3, &mut r);
        let f_tg = rand_map(4, 4, 3, &mut r);
        let base = sal_layer(&f_on, &f_tg, &AffineWarp::identity());
        let mut bumped = f_tg.clone();
        bumped.data[5] += 0.5;
        let moved = sal_layer(&f_on, &bumped, &AffineWarp::identity());
        assert_ne!(base.value, moved.value);
        // gradient has the online shape only; nothing is returned for the target
        assert!(base.grad.same_shape(&f_on));
    }

    proptest! {
        #[test]
        fn saliency_is_unit_norm_nonnegative_and_scale_invariant(seed in 0u64..1000, k in 0.01f64..100.0) {
            let mut r = rng::seeded(seed);
            let f = rand_map(r.random_range(1..6), r.random_range(1..6), r.random_range(1..5), &mut r);
            let s = saliency(&f);
            prop_assert!(s.values.iter().all(|v| *v >= 0.0));
            let n = s.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
            let t = saliency(&f.scaled(k));
            for (a, b) in s.values.iter().zip(&t.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn sal_is_nonnegative_and_scale_invariant(seed in 0u64..1000, k1 in 0.1f64..10.0, k2 in 0.1f64..10.0) {
            let mut r = rng::seeded(seed);
            let f_on = rand_map(4, 4, 3, &mut r);
            let f_tg = rand_map(4, 4, 3, &mut r);
            let warp = AffineWarp::translation(r.random_range(-0.3..0.3), r.random_range(-0.3..0.3));
            let a = sal_layer(&f_on, &f_tg, &warp).value;
            let b = sal_layer(&f_on.scaled(k1), &f_tg.scaled(k2), &warp).value;
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
