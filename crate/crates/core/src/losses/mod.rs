//! Training objectives: the global prediction loss plus three spatial terms
//! (saliency alignment, part-distribution alignment, region affinity) and
//! their weighted combination.

mod global;
mod ppda;
mod ram;
pub mod regions;
mod saliency;
#[cfg(test)]
pub(crate) mod testutil;

pub use global::{global_loss, normalized_mse, GlobalLoss};
pub use ppda::{ppda_loss, soft_assign, symmetric_kl, symmetric_kl_grad, Assignment, PpdaLoss, PrototypeBank, KL_CLAMP};
pub use ram::{ram_loss, ram_loss_with_map, region_affinity, region_index_map, AffinityMatrix, RamLoss};
pub use saliency::{sal_layer, sal_loss, saliency, saliency_backward, SalLayer, SalLoss, SaliencyMap};

use serde::{Deserialize, Serialize};

use crate::augment::warp::{warp_between, AffineWarp};
use crate::augment::ViewParams;
use crate::encoder::{FeaturePyramid, PyramidGrads};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub sal: f64,
    pub ppda: f64,
    pub ram: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sal: 0.10,
            ppda: 0.05,
            ram: 0.02,
        }
    }
}

impl LossWeights {
    pub fn none() -> Self {
        LossWeights {
            sal: 0.0,
            ppda: 0.0,
            ram: 0.0,
        }
    }
}

/// Which spatial terms are switched on; the global term is always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSubset {
    pub sal: bool,
    pub ppda: bool,
    pub ram: bool,
}

impl Default for LossSubset {
    fn default() -> Self {
        Self::all()
    }
}

impl LossSubset {
    pub const fn all() -> Self {
        LossSubset {
            sal: true,
            ppda: true,
            ram: true,
        }
    }

    pub const fn none() -> Self {
        LossSubset {
            sal: false,
            ppda: false,
            ram: false,
        }
    }

    /// All eight subsets, from the global-only baseline to the full set.
    pub fn power_set() -> Vec<Self> {
        (0..8u8)
            .map(|b| LossSubset {
                sal: b & 1 != 0,
                ppda: b & 2 != 0,
                ram: b & 4 != 0,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        usize::from(self.sal) + usize::from(self.ppda) + usize::from(self.ram)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `"sal+ram"`, or `"global"` for the empty subset.
    pub fn label(&self) -> String {
        let names: Vec<&str> = [(self.sal, "sal"), (self.ppda, "ppda"), (self.ram, "ram")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if names.is_empty() {
            "global".into()
        } else {
            names.join("+")
        }
    }

    /// Accepts comma or plus separated term names, `all`, or `none`/`global`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "all" => return Ok(Self::all()),
            "" | "none" | "global" => return Ok(Self::none()),
            _ => {}
        }
        let mut out = Self::none();
        for part in s.split([',', '+']) {
            match part.trim() {
                "sal" => out.sal = true,
                "ppda" => out.ppda = true,
                "ram" => out.ram = true,
                other => return Err(Error::InvalidConfig(format!("unknown loss term `{other}`"))),
            }
        }
        Ok(out)
    }

    /// `weights` with disabled terms zeroed.
    pub fn mask(&self, weights: LossWeights) -> LossWeights {
        LossWeights {
            sal: if self.sal { weights.sal } else { 0.0 },
            ppda: if self.ppda { weights.ppda } else { 0.0 },
            ram: if self.ram { weights.ram } else { 0.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Encoder taps used by the saliency term, averaged with equal weight.
    pub sal_layers: Vec<usize>,
    pub ppda_grid: usize,
    pub ram_grid: usize,
    pub prototypes: usize,
    pub temperature: f64,
    /// Average every spatial term over both view-role assignments.
    pub symmetrize_spatial: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            sal_layers: vec![2, 3, 4],
            ppda_grid: 7,
            ram_grid: 6,
            prototypes: 32,
            temperature: 0.1,
            symmetrize_spatial: true,
        }
    }
}

/// Layer the part and region terms read from.
pub const REGION_LAYER: usize = 3;

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (name, v) in [("sal", w.sal), ("ppda", w.ppda), ("ram", w.ram)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("weight {name} = {v} must be finite and >= 0")));
            }
        }
        if self.sal_layers.is_empty() || self.sal_layers.iter().any(|l| !(2..=4).contains(l)) {
            return Err(Error::InvalidConfig(format!(
                "sal_layers {:?} must be a non-empty subset of 2, 3, 4",
                self.sal_layers
            )));
        }
        if self.ppda_grid == 0 || self.ram_grid == 0 {
            return Err(Error::InvalidConfig("grid sides must be positive".into()));
        }
        if self.prototypes < 2 {
            return Err(Error::InvalidConfig("need at least 2 prototypes".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Warps between the two views of one sample, in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewWarps {
    /// View 1 coordinates to view 2.
    pub forward: AffineWarp,
    pub backward: AffineWarp,
}

impl ViewWarps {
    pub fn between(v1: &ViewParams, v2: &ViewParams) -> Self {
        ViewWarps {
            forward: warp_between(v1, v2),
            backward: warp_between(v2, v1),
        }
    }

    pub fn identity() -> Self {
        ViewWarps {
            forward: AffineWarp::identity(),
            backward: AffineWarp::identity(),
        }
    }
}

/// Batch-mean loss values. Disabled terms (zero weight) are not evaluated
/// and read zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub global: f64,
    pub sal: f64,
    pub ppda: f64,
    pub ram: f64,
    pub total: f64,
    pub weights: LossWeights,
    /// Mean overlap-mask size over every saliency evaluation.
    pub mask_mean: f64,
    pub empty_masks: usize,
    pub ram_valid_mean: f64,
    pub ram_empty: usize,
    pub zero_regions: usize,
    pub zero_patches: usize,
    pub degenerate_saliency: usize,
}

#[derive(Clone, Debug)]
pub struct CombinedGrads<T: Scalar> {
    /// Upstream gradients for the online pyramids of view 1 and view 2.
    pub online: [PyramidGrads<T>; 2],
    pub bank: Vec<T>,
}

fn check_batch<T: Scalar>(online: [&FeaturePyramid<T>; 2], target: [&FeaturePyramid<T>; 2], warps: &[ViewWarps]) -> Result<usize> {
    let n = online[0].batch();
    let same = [online[1], target[0], target[1]].iter().all(|p| p.batch() == n);
    if !same || warps.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "batch sizes {:?} with {} warps",
            [online[0].batch(), online[1].batch(), target[0].batch(), target[1].batch()],
            warps.len()
        )));
    }
    if online.iter().any(|p| p.pred.is_none()) {
        return Err(Error::ShapeMismatch("online pyramids need predictions".into()));
    }
    Ok(n)
}

/// `global + λ_sal·sal + λ_ppda·ppda + λ_ram·ram`, averaged over the batch,
/// with gradients for the online pyramids and the prototype bank. Target
/// pyramids are constants.
pub fn combined_loss<T: Scalar>(
    online: [&FeaturePyramid<T>; 2],
    target: [&FeaturePyramid<T>; 2],
    warps: &[ViewWarps],
    bank: &PrototypeBank<T>,
    cfg: &LossConfig,
) -> Result<(LossReport, CombinedGrads<T>)> {
    cfg.validate()?;
    let n = check_batch(online, target, warps)?;
    let w = cfg.weights;
    let inv_n = 1.0 / n as f64;
    let mut report = LossReport {
        weights: w,
        ..Default::default()
    };
    let mut grads = CombinedGrads {
        online: [PyramidGrads::default(), PyramidGrads::default()],
        bank: vec![T::zero(); bank.vectors.len()],
    };
    let pdim = online[0].proj.len() / n;
    let mut d_pred = [vec![T::zero(); n * pdim], vec![T::zero(); n * pdim]];

    let directions: &[(usize, f64)] = if cfg.symmetrize_spatial {
        &[(0, 0.5), (1, 0.5)]
    } else {
        &[(0, 1.0)]
    };
    let (mut sal_evals, mut mask_total) = (0usize, 0usize);
    let mut ram_evals = 0usize;
    let mut ram_valid_total = 0usize;

    for s in 0..n {
        let g = global_loss(
            online[0].pred_row(s).expect("checked"),
            target[1].proj_row(s),
            online[1].pred_row(s).expect("checked"),
            target[0].proj_row(s),
        )?;
        report.global += g.value.as_f64() * inv_n;
        let k = T::lit(inv_n);
        for (dst, src) in d_pred.iter_mut().zip([&g.grad_pred1, &g.grad_pred2]) {
            for (d, v) in dst[s * pdim..(s + 1) * pdim].iter_mut().zip(src) {
                *d = *v * k;
            }
        }

        for &(a, dir_w) in directions {
            let b = 1 - a;
            let warp = if a == 0 { &warps[s].forward } else { &warps[s].backward };
            let (on, tg) = (online[a], target[b]);

            if w.sal > 0.0 {
                let per_layer = dir_w / cfg.sal_layers.len() as f64;
                for &layer in &cfg.sal_layers {
                    let l = sal_layer(&on.tap(layer).sample_map(s), &tg.tap(layer).sample_map(s), warp);
                    report.sal += l.value.as_f64() * per_layer * inv_n;
                    sal_evals += 1;
                    mask_total += l.mask_count;
                    report.empty_masks += usize::from(l.mask_count == 0);
                    report.degenerate_saliency += usize::from(l.degenerate);
                    let k = T::lit(w.sal * per_layer * inv_n);
                    grads.online[a]
                        .tap_mut(layer, on.tap(layer))
                        .add_sample_map(s, &l.grad.scaled(k));
                }
            }

            if w.ppda > 0.0 || w.ram > 0.0 {
                let f_on = on.tap(REGION_LAYER).sample_map(s);
                let f_tg = tg.tap(REGION_LAYER).sample_map(s);
                if w.ppda > 0.0 {
                    let l = ppda_loss(&f_on, &f_tg, bank, cfg.ppda_grid)?;
                    report.ppda += l.value.as_f64() * dir_w * inv_n;
                    report.zero_patches += l.zero_patches;
                    let k = T::lit(w.ppda * dir_w * inv_n);
                    grads.online[a]
                        .tap_mut(REGION_LAYER, on.tap(REGION_LAYER))
                        .add_sample_map(s, &l.grad.scaled(k));
                    for (d, v) in grads.bank.iter_mut().zip(&l.grad_bank) {
                        *d += *v * k;
                    }
                }
                if w.ram > 0.0 {
                    let l = ram_loss(&f_on, &f_tg, warp, cfg.ram_grid)?;
                    report.ram += l.value.as_f64() * dir_w * inv_n;
                    ram_evals += 1;
                    ram_valid_total += l.valid_regions;
                    report.ram_empty += usize::from(l.valid_regions == 0);
                    report.zero_regions += l.zero_regions;
                    let k = T::lit(w.ram * dir_w * inv_n);
                    grads.online[a]
                        .tap_mut(REGION_LAYER, on.tap(REGION_LAYER))
                        .add_sample_map(s, &l.grad.scaled(k));
                }
            }
        }
    }
    let [p0, p1] = d_pred;
    grads.online[0].pred = Some(p0);
    grads.online[1].pred = Some(p1);
    if sal_evals > 0 {
        report.mask_mean = mask_total as f64 / sal_evals as f64;
    }
    if ram_evals > 0 {
        report.ram_valid_mean = ram_valid_total as f64 / ram_evals as f64;
    }
    report.total = report.global + w.sal * report.sal + w.ppda * report.ppda + w.ram * report.ram;
    Ok((report, grads))
}

#[cfg(test)]
mod tests;
