use super::regions::{normalize_rows, normalize_rows_backward, pool_regions, unpool, Regions};
use crate::augment::warp::{map_coords, AffineWarp, Mapped};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::scalar::Scalar;

/// Pairwise cosine distances between region vectors, `P × P` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix<T: Scalar> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> AffinityMatrix<T> {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.values[i * self.len() + j]
    }
}

struct Normalized<T: Scalar> {
    regions: Regions<T>,
    hat: Vec<T>,
    norms: Vec<T>,
}

fn normalized_regions<T: Scalar>(f: &FeatureMap<T>, grid: usize) -> Normalized<T> {
    let regions = pool_regions(f, grid);
    let (hat, norms) = normalize_rows(&regions.vectors, regions.len(), regions.dim);
    Normalized { regions, hat, norms }
}

fn affinity_of<T: Scalar>(n: &Normalized<T>) -> AffinityMatrix<T> {
    let p = n.regions.len();
    let c = n.regions.dim;
    let mut values = vec![T::zero(); p * p];
    for i in 0..p {
        for j in i + 1..p {
            let cos: T = n.hat[i * c..(i + 1) * c]
                .iter()
                .zip(&n.hat[j * c..(j + 1) * c])
                .map(|(&a, &b)| a * b)
                .sum();
            let a = T::one() - cos;
            values[i * p + j] = a;
            values[j * p + i] = a;
        }
    }
    AffinityMatrix {
        grid_h: n.regions.grid_h,
        grid_w: n.regions.grid_w,
        values,
    }
}

/// `A[i][j] = 1 − cos(v_i, v_j)` over average-pooled grid cells; the
/// diagonal is exactly zero.
pub fn region_affinity<T: Scalar>(f: &FeatureMap<T>, grid: usize) -> Result<AffinityMatrix<T>> {
    let n = normalized_regions(f, grid);
    if let Some(cell) = n.norms.iter().position(|v| *v == T::zero()) {
        return Err(Error::ZeroNormRegion {
            cell: (cell / n.regions.grid_w, cell % n.regions.grid_w),
        });
    }
    Ok(affinity_of(&n))
}

/// For each region of a `grid` partition, the target region containing its
/// warped centre, or `None` when it leaves the target view.
pub fn region_index_map(warp: &AffineWarp, grid: (usize, usize)) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(grid.0 * grid.1);
    for i in 0..grid.0 {
        for j in 0..grid.1 {
            out.push(match map_coords(warp, (i, j), grid, grid) {
                Mapped::Inside { cell, .. } => Some(cell.0 * grid.1 + cell.1),
                Mapped::OutOfBounds => None,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RamLoss<T: Scalar> {
    pub value: T,
    pub grad: FeatureMap<T>,
    /// Regions whose warped centre lands inside the target view.
    pub valid_regions: usize,
    /// Regions dropped because they, or their match, pooled to zero.
    pub zero_regions: usize,
}

/// Mean squared affinity discrepancy over pairs of valid regions, matched
/// through `index_map`. A region is valid when it has a match and neither it
/// nor its match pools to the zero vector (cosine is undefined there). Zero
/// when no region is valid.
pub fn ram_loss_with_map<T: Scalar>(
    f_on: &FeatureMap<T>,
    f_tg: &FeatureMap<T>,
    index_map: &[Option<usize>],
    grid: usize,
) -> Result<RamLoss<T>> {
    if f_on.channels != f_tg.channels {
        return Err(Error::ShapeMismatch(format!(
            "region maps with {} and {} channels",
            f_on.channels, f_tg.channels
        )));
    }
    let on = normalized_regions(f_on, grid);
    let tg = normalized_regions(f_tg, grid);
    let p = on.regions.len();
    if index_map.len() != p || tg.regions.len() != p {
        return Err(Error::ShapeMismatch(format!(
            "{} region indices for {p} online and {} target regions",
            index_map.len(),
            tg.regions.len()
        )));
    }
    let a_on = affinity_of(&on);
    let a_tg = affinity_of(&tg);
    let matched: Vec<(usize, usize)> = index_map
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|t| (i, t)))
        .collect();
    let valid: Vec<(usize, usize)> = matched
        .iter()
        .copied()
        .filter(|&(i, t)| on.norms[i] > T::zero() && tg.norms[t] > T::zero())
        .collect();
    let zero_regions = matched.len() - valid.len();
    let c = on.regions.dim;
    if valid.is_empty() {
        return Ok(RamLoss {
            value: T::zero(),
            grad: FeatureMap::zeros(f_on.height, f_on.width, f_on.channels),
            valid_regions: 0,
            zero_regions,
        });
    }
    let pairs = T::lit((valid.len() * valid.len()) as f64);
    let two = T::lit(2.0);
    let mut value = T::zero();
    let mut d_hat = vec![T::zero(); p * c];
    for &(i, ti) in &valid {
        for &(j, tj) in &valid {
            if i == j {
                continue;
            }
            let d = a_on.at(i, j) - a_tg.at(ti, tj);
            value += d * d;
            // (i, j) and (j, i) carry the same term, both depending on v̂_i
            let g = -two * two * d / pairs;
            for k in 0..c {
                let vj = on.hat[j * c + k];
                d_hat[i * c + k] += g * vj;
            }
        }
    }
    let d_v = normalize_rows_backward(&on.hat, &on.norms, &d_hat, c);
    Ok(RamLoss {
        value: value / pairs,
        grad: unpool(f_on, &on.regions, &d_v),
        valid_regions: valid.len(),
        zero_regions,
    })
}

/// RAM with the region correspondence induced by `warp`.
pub fn ram_loss<T: Scalar>(
    f_on: &FeatureMap<T>,
    f_tg: &FeatureMap<T>,
    warp: &AffineWarp,
    grid: usize,
) -> Result<RamLoss<T>> {
    let g = (grid.min(f_on.height).max(1), grid.min(f_on.width).max(1));
    ram_loss_with_map(f_on, f_tg, &region_index_map(warp, g), grid)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    use super::*;
    use crate::losses::testutil::{fd_map, rand_map, rand_vec};
    use crate::rng;

    fn from_regions(vectors: &[Vec<f64>], side: usize) -> FeatureMap<f64> {
        FeatureMap::from_fn(side, side, vectors[0].len(), |i, j, c| vectors[i * side + j][c])
    }

    #[test]
    fn identical_regions_give_zero_matrix() {
        let f = FeatureMap::<f64>::from_fn(4, 4, 3, |_, _, c| [0.2, 1.0, 0.5][c]);
        let a = region_affinity(&f, 4).unwrap();
        assert!(a.values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn orthogonal_regions_have_unit_distance() {
        let f = from_regions(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![1.0, 0.0], vec![0.0, 3.0]], 2);
        let a = region_affinity(&f, 2).unwrap();
        assert!((a.at(0, 1) - 1.0).abs() < 1e-15);
        assert!(a.at(0, 2).abs() < 1e-15);
        assert_eq!(a.at(1, 1), 0.0);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut r = rng::seeded(2);
        let f = rand_map(6, 6, 5, &mut r);
        let a = region_affinity(&f, 3).unwrap();
        let mut v = Vec::new();
        for gi in 0..3 {
            for gj in 0..3 {
                let mut s = vec![0.0; 5];
                for i in 2 * gi..2 * gi + 2 {
                    for j in 2 * gj..2 * gj + 2 {
                        for c in 0..5 {
                            s[c] += f.at(i, j, c) / 4.0;
                        }
                    }
                }
                v.push(s);
            }
        }
        for i in 0..9 {
            for j in 0..9 {
                let dot: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
                let ni: f64 = v[i].iter().map(|x| x * x).sum::<f64>().sqrt();
                let nj: f64 = v[j].iter().map(|x| x * x).sum::<f64>().sqrt();
                let oracle = if i == j { 0.0 } else { 1.0 - dot / (ni * nj) };
                assert!((a.at(i, j) - oracle).abs() < 1e-12);
                assert_eq!(a.at(i, j), a.at(j, i));
                assert!((0.0..=2.0).contains(&a.at(i, j)));
            }
        }
    }

    #[test]
    fn zero_region_reports_its_cell() {
        let mut f = FeatureMap::from_fn(4, 4, 2, |_, _, _| 1.0);
        for c in 0..2 {
            *f.at_mut(2, 1, c) = 0.0;
        }
        match region_affinity(&f, 4) {
            Err(Error::ZeroNormRegion { cell }) => assert_eq!(cell, (2, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_regions_are_dropped_from_the_loss() {
        let mut r = rng::seeded(8);
        let mut on = rand_map(4, 4, 3, &mut r);
        let mut tg = rand_map(4, 4, 3, &mut r);
        for c in 0..3 {
            *on.at_mut(0, 0, c) = 0.0;
            *tg.at_mut(3, 3, c) = 0.0;
        }
        let id: Vec<Option<usize>> = (0..16).map(Some).collect();
        let l = ram_loss_with_map(&on, &tg, &id, 4).unwrap();
        assert_eq!((l.valid_regions, l.zero_regions), (14, 2));
        let mut on2 = on.clone();
        let mut tg2 = tg.clone();
        for c in 0..3 {
            *on2.at_mut(0, 0, c) = 0.7;
            *tg2.at_mut(3, 3, c) = 0.2;
            *tg2.at_mut(0, 0, c) = 5.0;
            *on2.at_mut(3, 3, c) = 1.0;
        }
        // dropped regions do not influence the value
        let l2 = ram_loss_with_map(&on2, &tg2, &id, 4).unwrap();
        assert_eq!(l2.valid_regions, 16);
        assert!(l.grad.data[0].abs() == 0.0);
    }

    #[test]
    fn identical_maps_identity_warp_is_zero() {
        let mut r = rng::seeded(3);
        let f = rand_map(4, 4, 6, &mut r);
        let l = ram_loss(&f, &f, &AffineWarp::identity(), 6).unwrap();
        assert!(l.value.abs() < 1e-12);
        assert_eq!(l.valid_regions, 16);
    }

    #[test]
    fn hand_built_two_by_two() {
        let on = from_regions(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, -1.0]], 2);
        let tg = from_regions(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]], 2);
        let l = ram_loss_with_map(&on, &tg, &[Some(0), Some(1), Some(2), Some(3)], 2).unwrap();
        let s = 1.0 - 0.5f64.sqrt();
        let a_on = [[0.0, 1.0, s, s], [1.0, 0.0, s, 2.0 - s], [s, s, 0.0, 1.0], [s, 2.0 - s, 1.0, 0.0]];
        let a_tg = [[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 0.0], [1.0, 1.0, 0.0, 1.0], [0.0, 0.0, 1.0, 0.0]];
        let mut sum = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                sum += (a_on[i][j] - a_tg[i][j]).powi(2);
            }
        }
        assert!((l.value - sum / 16.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_view_regions_are_excluded() {
        let mut r = rng::seeded(4);
        let on = rand_map(4, 4, 3, &mut r);
        let tg = rand_map(4, 4, 3, &mut r);
        let mut map: Vec<Option<usize>> = (0..16).map(Some).collect();
        for k in [3, 7, 11, 15] {
            map[k] = None;
        }
        let l = ram_loss_with_map(&on, &tg, &map, 4).unwrap();
        assert_eq!(l.valid_regions, 12);
        let a = region_affinity(&on, 4).unwrap();
        let b = region_affinity(&tg, 4).unwrap();
        let keep: Vec<usize> = (0..16).filter(|k| k % 4 != 3).collect();
        let mut sum = 0.0;
        for &i in &keep {
            for &j in &keep {
                sum += (a.at(i, j) - b.at(i, j)).powi(2);
            }
        }
        assert!((l.value - sum / 144.0).abs() < 1e-12);
        let none = ram_loss_with_map(&on, &tg, &[None; 16], 4).unwrap();
        assert_eq!((none.value, none.valid_regions), (0.0, 0));
    }

    #[test]
    fn shifted_warp_maps_regions() {
        let map = region_index_map(&AffineWarp::translation(0.0, 0.25), (4, 4));
        assert_eq!(map[0], Some(1));
        assert_eq!(map[3], None);
        assert_eq!(map.iter().filter(|m| m.is_some()).count(), 12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng::seeded(5);
        let on = rand_map(6, 6, 4, &mut r);
        let tg = rand_map(6, 6, 4, &mut r);
        let warp = AffineWarp::from_matrix([[0.9, 0.1, 0.3], [0.0, 0.9, 0.35]]);
        let l = ram_loss(&on, &tg, &warp, 3).unwrap();
        assert!(l.valid_regions > 1 && l.valid_regions < 9);
        let num = fd_map(&on, |f| ram_loss(f, &tg, &warp, 3).unwrap().value);
        for (a, n) in l.grad.data.iter().zip(&num.data) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    proptest! {
        #[test]
        fn invariant_to_shared_rotation_and_joint_relabeling(seed in 0u64..300) {
            let mut r = rng::seeded(seed);
            let on = rand_map(4, 4, 3, &mut r);
            let tg = rand_map(4, 4, 3, &mut r);
            let id: Vec<Option<usize>> = (0..16).map(Some).collect();
            let base = ram_loss_with_map(&on, &tg, &id, 4).unwrap().value;
            prop_assert!(base >= 0.0);

            // random orthogonal matrix via Gram-Schmidt
            let mut q: Vec<Vec<f64>> = Vec::new();
            while q.len() < 3 {
                let mut v = rand_vec(3, &mut r);
                for u in &q {
                    let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-3 {
                    q.push(v.iter().map(|x| x / n).collect());
                }
            }
            let rot = |f: &FeatureMap<f64>| FeatureMap::from_fn(4, 4, 3, |i, j, c| (0..3).map(|k| q[c][k] * f.at(i, j, k)).sum::<f64>());
            let turned = ram_loss_with_map(&rot(&on), &rot(&tg), &id, 4).unwrap().value;
            prop_assert!((base - turned).abs() < 1e-9);

            let mut perm: Vec<usize> = (0..16).collect();
            perm.shuffle(&mut r);
            let shuffle = |f: &FeatureMap<f64>| FeatureMap::from_fn(4, 4, 3, |i, j, c| {
                let s = perm[i * 4 + j];
                f.at(s / 4, s % 4, c)
            });
            let relabeled = ram_loss_with_map(&shuffle(&on), &shuffle(&tg), &id, 4).unwrap().value;
            prop_assert!((base - relabeled).abs() < 1e-12);
        }
    }
}
