//! First-order optimizers over lists of flat tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

fn check_lists<T>(params: &[&mut [T]], grads: &[&[T]], sizes: &[usize]) -> Result<()> {
    let ok = params.len() == sizes.len()
        && grads.len() == sizes.len()
        && params.iter().zip(grads).zip(sizes).all(|((p, g), s)| p.len() == *s && g.len() == *s);
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch("parameter/gradient lists do not match optimizer state".into()))
    }
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            config,
            step: 0,
            m: sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
            v: sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
        }
    }

    /// One update at learning rate `lr`. Tensors with `decay[i] == false`
    /// skip weight decay.
    pub fn update(&mut self, lr: f64, params: Vec<&mut [T]>, grads: Vec<&[T]>, decay: &[bool]) -> Result<()> {
        let sizes: Vec<usize> = self.m.iter().map(Vec::len).collect();
        check_lists(&params, &grads, &sizes)?;
        if decay.len() != sizes.len() {
            return Err(Error::ShapeMismatch("decay mask length".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let sqrt_bc2 = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let shrink = T::lit(1.0 - lr * if decay[i] { c.weight_decay } else { 0.0 });
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                p[k] *= shrink;
                m[k] = b1 * m[k] + one_b1 * g[k];
                v[k] = b2 * v[k] + one_b2 * g[k] * g[k];
                let denom = v[k].sqrt() / sqrt_bc2 + eps;
                p[k] -= step_size * m[k] / denom;
            }
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Sgd<T: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, sizes: &[usize]) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) -> Result<()> {
        let sizes: Vec<usize> = self.velocity.iter().map(Vec::len).collect();
        check_lists(&params, &grads, &sizes)?;
        let (mu, lr) = (T::lit(self.momentum), T::lit(self.lr));
        for ((p, g), vel) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for k in 0..p.len() {
                vel[k] = mu * vel[k] + g[k];
                p[k] -= lr * vel[k];
            }
        }
        Ok(())
    }
}

/// Half-cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // after one step m̂ = g and v̂ = g², so the move is lr·sign(g)
        let mut opt = AdamW::<f64>::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.update(0.01, vec![&mut p], vec![&[0.3, -4.0, 1e-3]], &[true]).unwrap();
        let expect = [0.99, -1.99, 0.49];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn decay_is_decoupled_and_maskable() {
        let cfg = AdamWConfig { weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::<f64>::new(cfg, &[1, 1]);
        let (mut a, mut b) = (vec![2.0], vec![2.0]);
        opt.update(0.1, vec![&mut a, &mut b], vec![&[0.0], &[0.0]], &[true, false]).unwrap();
        assert!((a[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert_eq!(b[0], 2.0);
    }

    #[test]
    fn adamw_matches_reference_recursion() {
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::<f64>::new(cfg, &[1]);
        let mut p = vec![0.7];
        let (mut m, mut v, mut q) = (0.0, 0.0, 0.7f64);
        for t in 1..=5 {
            let g = (t as f64).sin();
            opt.update(cfg.lr, vec![&mut p], vec![&[g]], &[true]).unwrap();
            q -= cfg.lr * cfg.weight_decay * q;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            q -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            assert!((p[0] - q).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_momentum_recursion() {
        let mut opt = Sgd::<f64>::new(0.1, 0.9, &[1]);
        let mut p = vec![1.0];
        opt.update(vec![&mut p], vec![&[1.0]]).unwrap();
        opt.update(vec![&mut p], vec![&[1.0]]).unwrap();
        assert!((p[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lists_are_rejected() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::default(), &[2]);
        let mut p = vec![0.0; 3];
        assert!(opt.update(0.1, vec![&mut p], vec![&[0.0; 3]], &[true]).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-15);
    }
}
