//! Disjoint grid partitions of a feature map and row normalization.

use crate::feature::FeatureMap;
use crate::scalar::Scalar;

/// Floor partition of `0..len` into `parts` contiguous, non-empty spans.
pub fn spans(len: usize, parts: usize) -> Vec<(usize, usize)> {
    assert!(parts >= 1 && parts <= len, "cannot split {len} into {parts}");
    (0..parts).map(|k| (k * len / parts, (k + 1) * len / parts)).collect()
}

/// Average-pooled cell vectors, row-major over the grid, `cells × C`.
#[derive(Clone, Debug)]
pub struct Regions<T: Scalar> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub vectors: Vec<T>,
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl<T: Scalar> Regions<T> {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }
}

/// Pools `f` over a `grid × grid` partition, clamping the grid to each side.
pub fn pool_regions<T: Scalar>(f: &FeatureMap<T>, grid: usize) -> Regions<T> {
    let grid_h = grid.min(f.height).max(1);
    let grid_w = grid.min(f.width).max(1);
    let rows = spans(f.height, grid_h);
    let cols = spans(f.width, grid_w);
    let c = f.channels;
    let mut vectors = vec![T::zero(); grid_h * grid_w * c];
    for (gi, &(r0, r1)) in rows.iter().enumerate() {
        for (gj, &(c0, c1)) in cols.iter().enumerate() {
            let area = T::lit(((r1 - r0) * (c1 - c0)) as f64);
            let out = &mut vectors[(gi * grid_w + gj) * c..(gi * grid_w + gj + 1) * c];
            for (ch, o) in out.iter_mut().enumerate() {
                let mut s = T::zero();
                for i in r0..r1 {
                    for j in c0..c1 {
                        s += f.at(i, j, ch);
                    }
                }
                *o = s / area;
            }
        }
    }
    Regions {
        grid_h,
        grid_w,
        dim: c,
        vectors,
        rows,
        cols,
    }
}

/// Adjoint of [`pool_regions`]: spreads per-cell gradients over their pixels.
pub fn unpool<T: Scalar>(like: &FeatureMap<T>, regions: &Regions<T>, grad: &[T]) -> FeatureMap<T> {
    let mut out = FeatureMap::zeros(like.height, like.width, like.channels);
    let c = regions.dim;
    for (gi, &(r0, r1)) in regions.rows.iter().enumerate() {
        for (gj, &(c0, c1)) in regions.cols.iter().enumerate() {
            let area = T::lit(((r1 - r0) * (c1 - c0)) as f64);
            let g = &grad[(gi * regions.grid_w + gj) * c..(gi * regions.grid_w + gj + 1) * c];
            for (ch, &gv) in g.iter().enumerate() {
                let v = gv / area;
                for i in r0..r1 {
                    for j in c0..c1 {
                        *out.at_mut(i, j, ch) += v;
                    }
                }
            }
        }
    }
    out
}

/// Unit-normalizes each row; zero rows stay zero and report norm 0.
pub fn normalize_rows<T: Scalar>(v: &[T], rows: usize, dim: usize) -> (Vec<T>, Vec<T>) {
    let mut hat = v.to_vec();
    let mut norms = vec![T::zero(); rows];
    for i in 0..rows {
        let row = &mut hat[i * dim..(i + 1) * dim];
        let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        norms[i] = n;
        if n > T::zero() {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    (hat, norms)
}

/// `d v = (d v̂ − v̂ ⟨v̂, d v̂⟩) / ‖v‖` per row; zero rows get zero gradient.
pub fn normalize_rows_backward<T: Scalar>(hat: &[T], norms: &[T], d_hat: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); hat.len()];
    for (i, &n) in norms.iter().enumerate() {
        if n == T::zero() {
            continue;
        }
        let h = &hat[i * dim..(i + 1) * dim];
        let d = &d_hat[i * dim..(i + 1) * dim];
        let dot: T = h.iter().zip(d).map(|(&a, &b)| a * b).sum();
        for ((o, &hv), &dv) in out[i * dim..(i + 1) * dim].iter_mut().zip(h).zip(d) {
            *o = (dv - hv * dot) / n;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::testutil::rand_map;
    use crate::rng;

    #[test]
    fn spans_cover_without_overlap() {
        assert_eq!(spans(4, 4), vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(spans(8, 3), vec![(0, 2), (2, 5), (5, 8)]);
        assert_eq!(spans(7, 7).len(), 7);
    }

    #[test]
    fn grid_is_clamped_and_pool_is_mean() {
        let mut r = rng::seeded(0);
        let f = rand_map(4, 4, 2, &mut r);
        let g = pool_regions(&f, 7);
        assert_eq!((g.grid_h, g.grid_w), (4, 4));
        assert_eq!(g.row(5), &[f.at(1, 1, 0), f.at(1, 1, 1)]);
        let g = pool_regions(&f, 2);
        let m = (f.at(2, 0, 1) + f.at(2, 1, 1) + f.at(3, 0, 1) + f.at(3, 1, 1)) / 4.0;
        assert!((g.row(2)[1] - m).abs() < 1e-15);
    }

    #[test]
    fn unpool_is_adjoint_of_pool() {
        let mut r = rng::seeded(1);
        let f = rand_map(6, 5, 3, &mut r);
        let g = pool_regions(&f, 3);
        let y = crate::losses::testutil::rand_vec(g.vectors.len(), &mut r);
        let back = unpool(&f, &g, &y);
        let lhs: f64 = g.vectors.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
