use rand_distr::{Distribution, StandardNormal};

use crate::feature::FeatureMap;
use crate::rng::Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rand_vec(len: usize, r: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(r)).collect()
}

/// Non-negative map, like post-ReLU activations with a little jitter.
pub fn rand_map(h: usize, w: usize, c: usize, r: &mut Rng) -> FeatureMap<f64> {
    FeatureMap::from_fn(h, w, c, |_, _, _| {
        let z: f64 = StandardNormal.sample(r);
        z.abs() + 0.05
    })
}

pub fn fd_vec(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + FD_STEP;
            let a = f(&v);
            v[i] = orig - FD_STEP;
            let b = f(&v);
            v[i] = orig;
            (a - b) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn fd_map(m: &FeatureMap<f64>, f: impl Fn(&FeatureMap<f64>) -> f64) -> FeatureMap<f64> {
    let data = fd_vec(&m.data, |d| {
        let mm = FeatureMap { data: d.to_vec(), ..m.clone() };
        f(&mm)
    });
    FeatureMap { data, ..m.clone() }
}
