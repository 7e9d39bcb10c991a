use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{unit_backward, unit_forward, Act, BnMode, LinearParams, MlpCache, MlpParams, UnitCache, UnitRef};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Index of the unit whose output is each tapped stage (F2, F3, F4).
pub const TAP_UNITS: [usize; 3] = [4, 6, 8];
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Online,
    Target,
}

/// Weights of one conv 3×3 → batch norm → ReLU unit. Convs carry no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ConvBnParams<T: Scalar> {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    /// Row-major `c_out × (c_in·3·3)`.
    pub weight: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> ConvBnParams<T> {
    fn as_ref(&self) -> UnitRef<'_, T> {
        UnitRef {
            c_out: self.c_out,
            stride: self.stride,
            weight: &self.weight,
            gamma: &self.gamma,
            beta: &self.beta,
        }
    }
}

/// All trainable tensors of one branch: stem, four stages of two units,
/// projector and predictor. Gradients use the same layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct NetworkParams<T: Scalar> {
    pub config: EncoderConfig,
    pub branch: Branch,
    pub units: Vec<ConvBnParams<T>>,
    pub projector: MlpParams<T>,
    pub predictor: MlpParams<T>,
}

/// Running normalization statistics, one entry per unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BnStats<T: Scalar> {
    pub mean: Vec<Vec<T>>,
    pub var: Vec<Vec<T>>,
}

fn linear_zeros<T: Scalar>(d_in: usize, d_out: usize) -> LinearParams<T> {
    LinearParams {
        d_in,
        d_out,
        weight: vec![T::zero(); d_in * d_out],
        bias: vec![T::zero(); d_out],
    }
}

fn mlp_zeros<T: Scalar>(d_in: usize, hidden: usize, d_out: usize) -> MlpParams<T> {
    MlpParams {
        hidden: linear_zeros(d_in, hidden),
        output: linear_zeros(hidden, d_out),
    }
}

impl<T: Scalar> NetworkParams<T> {
    /// Zero tensors with the layout implied by `config`.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let ch = &config.stage_channels;
        let mut units = Vec::with_capacity(9);
        let unit = |c_in: usize, c_out: usize, stride: usize| ConvBnParams {
            c_in,
            c_out,
            stride,
            weight: vec![T::zero(); c_out * c_in * 9],
            gamma: vec![T::one(); c_out],
            beta: vec![T::zero(); c_out],
        };
        units.push(unit(3, ch[0], 2));
        let mut c_prev = ch[0];
        for &c in ch.iter() {
            units.push(unit(c_prev, c, 2));
            units.push(unit(c, c, 1));
            c_prev = c;
        }
        let hidden = config.head_hidden();
        NetworkParams {
            config: config.clone(),
            branch: Branch::Online,
            units,
            projector: mlp_zeros(config.rep_dim, hidden, config.proj_dim),
            predictor: mlp_zeros(config.proj_dim, hidden, config.proj_dim),
        }
    }

    /// Same layout with every tensor (including norm scales) zeroed, for
    /// gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for t in g.tensors_mut() {
            t.fill(T::zero());
        }
        g
    }

    /// Every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for u in &self.units {
            out.push(&u.weight);
            out.push(&u.gamma);
            out.push(&u.beta);
        }
        for m in [&self.projector, &self.predictor] {
            out.push(&m.hidden.weight);
            out.push(&m.hidden.bias);
            out.push(&m.output.weight);
            out.push(&m.output.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for u in &mut self.units {
            out.push(&mut u.weight);
            out.push(&mut u.gamma);
            out.push(&mut u.beta);
        }
        for m in [&mut self.projector, &mut self.predictor] {
            out.push(&mut m.hidden.weight);
            out.push(&mut m.hidden.bias);
            out.push(&mut m.output.weight);
            out.push(&mut m.output.bias);
        }
        out
    }

    /// Human-readable names matching [`Self::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.units.len() {
            let tag = if i == 0 {
                "stem".to_string()
            } else {
                format!("stage{}.{}", i.div_ceil(2), (i + 1) % 2)
            };
            for p in ["weight", "gamma", "beta"] {
                out.push(format!("{tag}.{p}"));
            }
        }
        for head in ["projector", "predictor"] {
            for p in ["hidden.weight", "hidden.bias", "output.weight", "output.bias"] {
                out.push(format!("{head}.{p}"));
            }
        }
        out
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over the bit patterns of every tensor.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t {
                h.update(v.bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn with_branch(mut self, branch: Branch) -> Self {
        self.branch = branch;
        self
    }

    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}

impl<T: Scalar> BnStats<T> {
    pub fn new(params: &NetworkParams<T>) -> Self {
        BnStats {
            mean: params.units.iter().map(|u| vec![T::zero(); u.c_out]).collect(),
            var: params.units.iter().map(|u| vec![T::one(); u.c_out]).collect(),
        }
    }

    /// `running ← (1 − m)·running + m·batch` for every unit.
    pub fn update(&mut self, cache: &ForwardCache<T>, momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for (i, u) in cache.units.iter().enumerate() {
            if u.mode != BnMode::Train {
                continue;
            }
            for (r, b) in self.mean[i].iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + m * *b;
            }
            for (r, b) in self.var[i].iter_mut().zip(&u.batch_var) {
                *r = keep * *r + m * *b;
            }
        }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.var).flatten() {
            h.update(v.bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Fan-in scaled (He) normal initialization. Norm scales start at one,
/// shifts and biases at zero.
pub fn init_params<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<NetworkParams<T>> {
    config.validate()?;
    let mut p = NetworkParams::zeros(config);
    let mut r = rng::seeded(seed);
    let mut fill = |w: &mut [T], fan_in: usize| {
        let std = (2.0 / fan_in as f64).sqrt();
        for v in w {
            let z: f64 = StandardNormal.sample(&mut r);
            *v = T::lit(z * std);
        }
    };
    for u in &mut p.units {
        fill(&mut u.weight, u.c_in * 9);
    }
    for m in [&mut p.projector, &mut p.predictor] {
        fill(&mut m.hidden.weight, m.hidden.d_in);
        fill(&mut m.output.weight, m.output.d_in);
    }
    Ok(p)
}

/// Online parameters and a target copy (`ξ₀ = θ₀`).
pub fn init_branches<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<(NetworkParams<T>, NetworkParams<T>)> {
    let online = init_params(config, seed)?;
    let target = online.clone().with_branch(Branch::Target);
    Ok((online, target))
}

/// Tapped feature maps and heads for a batch.
///
/// `rep` is the spatial mean of `f4`; all vectors are row-major `N×dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T: Scalar> {
    pub f2: Act<T>,
    pub f3: Act<T>,
    pub f4: Act<T>,
    pub rep: Vec<T>,
    pub proj: Vec<T>,
    pub pred: Option<Vec<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn batch(&self) -> usize {
        self.f4.batch
    }

    pub fn tap(&self, layer: usize) -> &Act<T> {
        match layer {
            2 => &self.f2,
            3 => &self.f3,
            4 => &self.f4,
            _ => panic!("no tap at layer {layer}"),
        }
    }

    pub fn rep_row(&self, n: usize) -> &[T] {
        let d = self.rep.len() / self.batch();
        &self.rep[n * d..(n + 1) * d]
    }

    pub fn proj_row(&self, n: usize) -> &[T] {
        let d = self.proj.len() / self.batch();
        &self.proj[n * d..(n + 1) * d]
    }

    pub fn pred_row(&self, n: usize) -> Option<&[T]> {
        let d = self.proj.len() / self.batch();
        self.pred.as_ref().map(|p| &p[n * d..(n + 1) * d])
    }
}

/// Upstream gradients for a pyramid. Missing entries count as zero.
#[derive(Clone, Debug, Default)]
pub struct PyramidGrads<T: Scalar> {
    pub f2: Option<Act<T>>,
    pub f3: Option<Act<T>>,
    pub f4: Option<Act<T>>,
    pub proj: Option<Vec<T>>,
    pub pred: Option<Vec<T>>,
}

impl<T: Scalar> PyramidGrads<T> {
    pub fn tap_mut(&mut self, layer: usize, like: &Act<T>) -> &mut Act<T> {
        let slot = match layer {
            2 => &mut self.f2,
            3 => &mut self.f3,
            4 => &mut self.f4,
            _ => panic!("no tap at layer {layer}"),
        };
        slot.get_or_insert_with(|| Act::zeros_like(like))
    }
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T: Scalar> {
    pub(crate) units: Vec<UnitCache<T>>,
    projector: MlpCache<T>,
    predictor: Option<MlpCache<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Fingerprint of every ReLU on/off decision; equal fingerprints mean two
    /// inputs lie in the same linear region of the backbone.
    pub fn activation_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for u in &self.units {
            for v in &u.out.data {
                (*v > T::zero()).hash(&mut h);
            }
        }
        for v in self
            .projector
            .hidden
            .iter()
            .chain(self.predictor.iter().flat_map(|p| p.hidden.iter()))
        {
            (*v > T::zero()).hash(&mut h);
        }
        h.finish()
    }
}

fn check_input<T: Scalar>(params: &NetworkParams<T>, input: &Act<T>) -> Result<()> {
    let s = params.config.input_size;
    if input.channels != 3 || input.height != s || input.width != s || input.batch == 0 {
        return Err(Error::ShapeMismatch(format!(
            "input {:?}, encoder expects 3x{s}x{s} images",
            input.shape()
        )));
    }
    Ok(())
}

/// Runs the backbone and heads. The predictor is evaluated only when
/// `with_pred` (online branch).
pub fn forward<T: Scalar>(
    params: &NetworkParams<T>,
    stats: &BnStats<T>,
    input: &Act<T>,
    mode: BnMode,
    with_pred: bool,
) -> Result<(FeaturePyramid<T>, ForwardCache<T>)> {
    check_input(params, input)?;
    let mut caches: Vec<UnitCache<T>> = Vec::with_capacity(params.units.len());
    for (i, u) in params.units.iter().enumerate() {
        let x = caches.last().map_or(input, |c| &c.out);
        let c = unit_forward(&u.as_ref(), x, mode, (&stats.mean[i], &stats.var[i]));
        caches.push(c);
    }
    let f4 = &caches[TAP_UNITS[2]].out;
    let n = f4.batch;
    let plane = f4.plane();
    let count = T::lit(plane as f64);
    let mut rep = vec![T::zero(); n * f4.channels];
    for c in 0..f4.channels {
        for b in 0..n {
            let o = (c * n + b) * plane;
            let s: T = f4.data[o..o + plane].iter().copied().sum();
            rep[b * f4.channels + c] = s / count;
        }
    }
    let (proj, projector) = params.projector.forward(&rep, n);
    let (pred, predictor) = if with_pred {
        let (p, c) = params.predictor.forward(&proj, n);
        (Some(p), Some(c))
    } else {
        (None, None)
    };
    let pyramid = FeaturePyramid {
        f2: caches[TAP_UNITS[0]].out.clone(),
        f3: caches[TAP_UNITS[1]].out.clone(),
        f4: f4.clone(),
        rep,
        proj,
        pred,
    };
    Ok((
        pyramid,
        ForwardCache {
            units: caches,
            projector,
            predictor,
        },
    ))
}

fn check_grad_shape<T: Scalar>(name: &str, g: &Option<Act<T>>, like: &Act<T>) -> Result<()> {
    match g {
        Some(a) if a.shape() != like.shape() => Err(Error::ShapeMismatch(format!(
            "gradient for {name} is {:?}, map is {:?}",
            a.shape(),
            like.shape()
        ))),
        _ => Ok(()),
    }
}

/// Reverse pass. Gradients arriving at several taps are summed along the
/// shared backbone path. Returns parameter gradients and, when requested, the
/// gradient with respect to the input batch.
pub fn backward<T: Scalar>(
    params: &NetworkParams<T>,
    cache: &ForwardCache<T>,
    upstream: &PyramidGrads<T>,
    input_grad: bool,
) -> Result<(NetworkParams<T>, Option<Act<T>>)> {
    let n = cache.projector.rows;
    let taps: Vec<&Act<T>> = TAP_UNITS.iter().map(|&i| &cache.units[i].out).collect();
    check_grad_shape("F2", &upstream.f2, taps[0])?;
    check_grad_shape("F3", &upstream.f3, taps[1])?;
    check_grad_shape("F4", &upstream.f4, taps[2])?;
    let pdim = params.config.proj_dim;
    for (name, g) in [("proj", &upstream.proj), ("pred", &upstream.pred)] {
        if let Some(v) = g {
            if v.len() != n * pdim {
                return Err(Error::ShapeMismatch(format!("{name} gradient has {} values", v.len())));
            }
        }
    }

    let mut grads = params.zeros_like();
    let mut d_proj = upstream.proj.clone().unwrap_or_else(|| vec![T::zero(); n * pdim]);
    if let (Some(dp), Some(pc)) = (&upstream.pred, &cache.predictor) {
        let d = params.predictor.backward(pc, dp, &mut grads.predictor);
        for (a, b) in d_proj.iter_mut().zip(d) {
            *a += b;
        }
    }
    let d_rep = params.projector.backward(&cache.projector, &d_proj, &mut grads.projector);

    let f4 = taps[2];
    let mut g = upstream.f4.clone().unwrap_or_else(|| Act::zeros_like(f4));
    let plane = f4.plane();
    let inv = T::one() / T::lit(plane as f64);
    for c in 0..f4.channels {
        for b in 0..n {
            let d = d_rep[b * f4.channels + c] * inv;
            let o = (c * n + b) * plane;
            for v in &mut g.data[o..o + plane] {
                *v += d;
            }
        }
    }

    let mut input = None;
    for i in (0..params.units.len()).rev() {
        if i == TAP_UNITS[1] {
            if let Some(d) = &upstream.f3 {
                g.add_assign(d);
            }
        } else if i == TAP_UNITS[0] {
            if let Some(d) = &upstream.f2 {
                g.add_assign(d);
            }
        }
        let unit = &params.units[i];
        let gu = &mut grads.units[i];
        let need_dx = i > 0 || input_grad;
        let dx = unit_backward(
            &unit.as_ref(),
            &cache.units[i],
            &g,
            (&mut gu.weight, &mut gu.gamma, &mut gu.beta),
            need_dx,
        );
        match dx {
            Some(d) if i > 0 => g = d,
            other => input = other,
        }
    }
    Ok((grads, input))
}

/// `ξ ← μ·ξ + (1 − μ)·θ`, elementwise over every tensor.
pub fn ema_blend<T: Scalar>(online: &NetworkParams<T>, target: &mut NetworkParams<T>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidConfig(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    if !online.same_layout(target) {
        return Err(Error::ShapeMismatch("online and target layouts differ".into()));
    }
    let mu = T::lit(momentum);
    let rest = T::one() - mu;
    for (xi, theta) in target.tensors_mut().into_iter().zip(online.tensors()) {
        for (x, t) in xi.iter_mut().zip(theta) {
            *x = mu * *x + rest * *t;
        }
    }
    Ok(())
}
