use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::regions::{normalize_rows, normalize_rows_backward, pool_regions, unpool};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::rng;
use crate::scalar::Scalar;

pub const KL_CLAMP: f64 = 1e-8;

/// Learnable part prototypes, `count × dim`, unit rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PrototypeBank<T: Scalar> {
    pub count: usize,
    pub dim: usize,
    pub temperature: f64,
    pub vectors: Vec<T>,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn new(count: usize, dim: usize, temperature: f64, vectors: Vec<T>) -> Result<Self> {
        let bank = PrototypeBank {
            count,
            dim,
            temperature,
            vectors,
        };
        bank.validate()?;
        Ok(bank)
    }

    /// Isotropic Gaussian draws projected onto the unit sphere.
    pub fn random(count: usize, dim: usize, temperature: f64, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let vectors = (0..count * dim)
            .map(|_| T::lit(StandardNormal.sample(&mut r)))
            .collect();
        let mut bank = Self::new(count, dim, temperature, vectors)?;
        bank.renormalize()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 prototypes, got {}", self.count)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {} must be positive", self.temperature)));
        }
        if self.dim == 0 || self.vectors.len() != self.count * self.dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} prototypes of dim {}",
                self.vectors.len(),
                self.count,
                self.dim
            )));
        }
        Ok(())
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    /// Rescales every row to unit length.
    pub fn renormalize(&mut self) -> Result<()> {
        for k in 0..self.count {
            let row = &mut self.vectors[k * self.dim..(k + 1) * self.dim];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() || !n.is_finite() {
                return Err(Error::DegenerateEmbedding(format!("prototype {k} has norm {n}")));
            }
            for v in row {
                *v /= n;
            }
        }
        Ok(())
    }
}

/// Row-stochastic soft assignment of patches to prototypes.
#[derive(Clone, Debug)]
pub struct Assignment<T: Scalar> {
    pub rows: usize,
    pub count: usize,
    /// `rows × count`.
    pub probs: Vec<T>,
    /// Patches with zero norm, given the uniform distribution.
    pub zero_rows: Vec<bool>,
    patches_hat: Vec<T>,
    patch_norms: Vec<T>,
    protos_hat: Vec<T>,
    proto_norms: Vec<T>,
}

impl<T: Scalar> Assignment<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.probs[i * self.count..(i + 1) * self.count]
    }

    /// Mean assignment over rows.
    pub fn part_distribution(&self) -> Vec<T> {
        let mut q = vec![T::zero(); self.count];
        for i in 0..self.rows {
            for (a, b) in q.iter_mut().zip(self.row(i)) {
                *a += *b;
            }
        }
        let n = T::lit(self.rows as f64);
        q.iter_mut().for_each(|v| *v /= n);
        q
    }
}

/// `softmax_k(⟨v̂_i, p̂_k⟩ / τ)` with both sides normalized here.
pub fn soft_assign<T: Scalar>(patches: &[T], rows: usize, bank: &PrototypeBank<T>) -> Result<Assignment<T>> {
    bank.validate()?;
    let c = bank.dim;
    if patches.len() != rows * c {
        return Err(Error::ShapeMismatch(format!(
            "{} patch values for {rows} rows of dim {c}",
            patches.len()
        )));
    }
    let (patches_hat, patch_norms) = normalize_rows(patches, rows, c);
    let (protos_hat, proto_norms) = normalize_rows(&bank.vectors, bank.count, c);
    if let Some(k) = proto_norms.iter().position(|n| *n == T::zero()) {
        return Err(Error::DegenerateEmbedding(format!("prototype {k} has zero norm")));
    }
    let k = bank.count;
    let inv_tau = T::lit(1.0 / bank.temperature);
    let mut probs = vec![T::zero(); rows * k];
    let mut zero_rows = vec![false; rows];
    let uniform = T::one() / T::lit(k as f64);
    for i in 0..rows {
        let out = &mut probs[i * k..(i + 1) * k];
        if patch_norms[i] == T::zero() {
            zero_rows[i] = true;
            out.fill(uniform);
            continue;
        }
        let v = &patches_hat[i * c..(i + 1) * c];
        for (kk, o) in out.iter_mut().enumerate() {
            let p = &protos_hat[kk * c..(kk + 1) * c];
            *o = v.iter().zip(p).map(|(&a, &b)| a * b).sum::<T>() * inv_tau;
        }
        let max = out.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            z += *o;
        }
        out.iter_mut().for_each(|o| *o /= z);
    }
    Ok(Assignment {
        rows,
        count: k,
        probs,
        zero_rows,
        patches_hat,
        patch_norms,
        protos_hat,
        proto_norms,
    })
}

/// Gradients of a function of the assignment with respect to the raw patches
/// and raw prototype rows.
fn soft_assign_backward<T: Scalar>(a: &Assignment<T>, dim: usize, temperature: f64, d_probs: &[T]) -> (Vec<T>, Vec<T>) {
    let (n, k, c) = (a.rows, a.count, dim);
    let inv_tau = T::lit(1.0 / temperature);
    let mut d_vhat = vec![T::zero(); n * c];
    let mut d_phat = vec![T::zero(); k * c];
    for i in 0..n {
        if a.zero_rows[i] {
            continue;
        }
        let q = a.row(i);
        let dq = &d_probs[i * k..(i + 1) * k];
        let inner: T = q.iter().zip(dq).map(|(&x, &y)| x * y).sum();
        let v = &a.patches_hat[i * c..(i + 1) * c];
        for kk in 0..k {
            let dl = q[kk] * (dq[kk] - inner) * inv_tau;
            if dl == T::zero() {
                continue;
            }
            let p = &a.protos_hat[kk * c..(kk + 1) * c];
            for (d, &pv) in d_vhat[i * c..(i + 1) * c].iter_mut().zip(p) {
                *d += dl * pv;
            }
            for (d, &vv) in d_phat[kk * c..(kk + 1) * c].iter_mut().zip(v) {
                *d += dl * vv;
            }
        }
    }
    (
        normalize_rows_backward(&a.patches_hat, &a.patch_norms, &d_vhat, c),
        normalize_rows_backward(&a.protos_hat, &a.proto_norms, &d_phat, c),
    )
}

fn clamp_ln<T: Scalar>(v: T) -> T {
    v.max(T::lit(KL_CLAMP)).ln()
}

/// `KL(a‖b) + KL(b‖a)` with probabilities clamped below at [`KL_CLAMP`]
/// inside the logarithms.
pub fn symmetric_kl<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (clamp_ln(x) - clamp_ln(y))).sum()
}

/// Derivative of [`symmetric_kl`] in its first argument.
pub fn symmetric_kl_grad<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    let eps = T::lit(KL_CLAMP);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let base = clamp_ln(x) - clamp_ln(y);
            if x > eps {
                base + T::one() - y / x
            } else {
                base
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PpdaLoss<T: Scalar> {
    pub value: T,
    pub grad: FeatureMap<T>,
    /// Same layout as the bank's vectors.
    pub grad_bank: Vec<T>,
    pub q_online: Vec<T>,
    pub q_target: Vec<T>,
    pub zero_patches: usize,
}

/// Symmetric KL between the part distributions of two maps. Patches are the
/// average-pooled cells of a `grid × grid` partition, clamped to the map
/// side. The target side is constant, bank included.
pub fn ppda_loss<T: Scalar>(
    f_on: &FeatureMap<T>,
    f_tg: &FeatureMap<T>,
    bank: &PrototypeBank<T>,
    grid: usize,
) -> Result<PpdaLoss<T>> {
    for f in [f_on, f_tg] {
        if f.channels != bank.dim {
            return Err(Error::ShapeMismatch(format!(
                "map has {} channels, prototypes have {}",
                f.channels, bank.dim
            )));
        }
    }
    let r_on = pool_regions(f_on, grid);
    let r_tg = pool_regions(f_tg, grid);
    let a_on = soft_assign(&r_on.vectors, r_on.len(), bank)?;
    let a_tg = soft_assign(&r_tg.vectors, r_tg.len(), bank)?;
    let q_on = a_on.part_distribution();
    let q_tg = a_tg.part_distribution();
    let value = symmetric_kl(&q_on, &q_tg);
    let dq = symmetric_kl_grad(&q_on, &q_tg);
    let n = T::lit(a_on.rows as f64);
    let mut d_probs = Vec::with_capacity(a_on.probs.len());
    for _ in 0..a_on.rows {
        d_probs.extend(dq.iter().map(|&d| d / n));
    }
    let (d_patches, grad_bank) = soft_assign_backward(&a_on, bank.dim, bank.temperature, &d_probs);
    let zero_patches = a_on.zero_rows.iter().chain(&a_tg.zero_rows).filter(|z| **z).count();
    Ok(PpdaLoss {
        value,
        grad: unpool(f_on, &r_on, &d_patches),
        grad_bank,
        q_online: q_on,
        q_target: q_tg,
        zero_patches,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    use super::*;
    use crate::losses::testutil::{fd_map, fd_vec, rand_map, rand_vec};

    #[test]
    fn bank_validation_and_unit_rows() {
        assert!(PrototypeBank::<f64>::random(1, 4, 0.1, 0).is_err());
        assert!(PrototypeBank::<f64>::random(4, 4, 0.0, 0).is_err());
        assert!(PrototypeBank::<f64>::new(2, 3, 0.1, vec![1.0; 5]).is_err());
        let b = PrototypeBank::<f64>::random(32, 16, 0.1, 3).unwrap();
        for k in 0..32 {
            let n: f64 = b.row(k).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sharp_temperature_picks_matching_prototype() {
        let mut bank = PrototypeBank::<f64>::random(8, 64, 0.01, 7).unwrap();
        bank.temperature = 0.01;
        for k in 0..8 {
            let a = soft_assign(bank.row(k), 1, &bank).unwrap();
            assert!(a.row(0)[k] > 0.99, "prototype {k}: {}", a.row(0)[k]);
        }
    }

    #[test]
    fn identical_prototypes_give_uniform_rows() {
        let bank = PrototypeBank::new(4, 3, 0.1, [0.2, -0.4, 0.9].repeat(4)).unwrap();
        let mut r = rng::seeded(1);
        let a = soft_assign(&rand_vec(15, &mut r), 5, &bank).unwrap();
        assert!(a.probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_patch_gets_uniform_and_is_flagged() {
        let bank = PrototypeBank::<f64>::random(4, 3, 0.1, 2).unwrap();
        let a = soft_assign(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0], 2, &bank).unwrap();
        assert_eq!(a.zero_rows, vec![true, false]);
        assert!(a.row(0).iter().all(|p| *p == 0.25));
    }

    #[test]
    fn hand_computed_symmetric_kl() {
        let v: f64 = symmetric_kl(&[0.7, 0.3], &[0.3, 0.7]);
        assert!((v - 0.6779).abs() < 1e-4);
        assert!((v - 0.8 * (0.7f64 / 0.3).ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let a = vec![0.5, 0.2, 0.3];
        let b = vec![0.1, 0.6, 0.3];
        let g = symmetric_kl_grad(&a, &b);
        let num = fd_vec(&a, |x| symmetric_kl(x, &b));
        for (x, y) in g.iter().zip(&num) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_maps_give_zero() {
        let mut r = rng::seeded(3);
        let bank = PrototypeBank::<f64>::random(8, 6, 0.1, 4).unwrap();
        let f = rand_map(4, 4, 6, &mut r);
        let l = ppda_loss(&f, &f, &bank, 7).unwrap();
        assert!(l.value.abs() < 1e-9);
        let s: f64 = l.q_online.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut r = rng::seeded(3);
        let bank = PrototypeBank::<f64>::random(8, 5, 0.1, 4).unwrap();
        let f = rand_map(4, 4, 6, &mut r);
        assert!(ppda_loss(&f, &f, &bank, 4).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::seeded(5);
        let bank = PrototypeBank::<f64>::random(5, 4, 0.5, 6).unwrap();
        let f_on = rand_map(6, 6, 4, &mut r);
        let f_tg = rand_map(6, 6, 4, &mut r);
        let l = ppda_loss(&f_on, &f_tg, &bank, 4).unwrap();
        assert!(l.value > 1e-4);
        let num = fd_map(&f_on, |f| ppda_loss(f, &f_tg, &bank, 4).unwrap().value);
        for (a, n) in l.grad.data.iter().zip(&num.data) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
        // target-side assignments stay fixed while the bank moves
        let regions = pool_regions(&f_on, 4);
        let num = fd_vec(&bank.vectors, |v| {
            let b = PrototypeBank { vectors: v.to_vec(), ..bank.clone() };
            let q = soft_assign(&regions.vectors, regions.len(), &b).unwrap().part_distribution();
            symmetric_kl(&q, &l.q_target)
        });
        for (a, n) in l.grad_bank.iter().zip(&num) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "bank {a} vs {n}");
        }
    }

    fn permute_cells(f: &FeatureMap<f64>, perm: &[usize]) -> FeatureMap<f64> {
        let w = f.width;
        FeatureMap::from_fn(f.height, w, f.channels, |i, j, c| {
            let src = perm[i * w + j];
            f.at(src / w, src % w, c)
        })
    }

    proptest! {
        #[test]
        fn rows_are_distributions(seed in 0u64..500) {
            let mut r = rng::seeded(seed);
            let bank = PrototypeBank::<f64>::random(r.random_range(2..10), 5, r.random_range(0.05..1.0), seed).unwrap();
            let n = r.random_range(1..20);
            let a = soft_assign(&rand_vec(n * 5, &mut r), n, &bank).unwrap();
            for i in 0..n {
                prop_assert!(a.row(i).iter().all(|p| *p >= 0.0));
                prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn invariant_to_cell_and_prototype_permutations(seed in 0u64..500) {
            let mut r = rng::seeded(seed);
            let bank = PrototypeBank::<f64>::random(6, 3, 0.2, seed + 1).unwrap();
            let f_on = rand_map(4, 4, 3, &mut r);
            let f_tg = rand_map(4, 4, 3, &mut r);
            let base = ppda_loss(&f_on, &f_tg, &bank, 4).unwrap().value;
            prop_assert!(base >= 0.0);
            let mut perm: Vec<usize> = (0..16).collect();
            perm.shuffle(&mut r);
            let moved = ppda_loss(&permute_cells(&f_on, &perm), &f_tg, &bank, 4).unwrap().value;
            prop_assert!((base - moved).abs() < 1e-12);
            let mut order: Vec<usize> = (0..6).collect();
            order.shuffle(&mut r);
            let vectors = order.iter().flat_map(|&k| bank.row(k).to_vec()).collect();
            let relabeled = PrototypeBank { vectors, ..bank.clone() };
            let v = ppda_loss(&f_on, &f_tg, &relabeled, 4).unwrap().value;
            prop_assert!((base - v).abs() < 1e-12);
        }
    }
}
