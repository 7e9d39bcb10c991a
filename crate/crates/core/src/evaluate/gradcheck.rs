use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::warp::AffineWarp;
use crate::encoder::{Act, FeaturePyramid, PyramidGrads};
use crate::feature::FeatureMap;
use crate::losses::regions::pool_regions;
use crate::losses::{
    combined_loss, global_loss, ppda_loss, ram_loss, sal_layer, soft_assign, symmetric_kl, LossConfig, LossWeights,
    PrototypeBank, ViewWarps,
};
use crate::rng::{self, Rng};

/// Largest map side used by the suite.
pub const MAP_SIDE: usize = 6;
/// Channels of every single-term map.
pub const MAP_CHANNELS: usize = 8;
/// Denominator floor of the relative error, so entries whose exact gradient
/// is near zero are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

const GRID: usize = 3;
const PROTOTYPES: usize = 6;
const TEMPERATURE: f64 = 0.5;
const BATCH: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    /// Number of elements compared.
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

/// A target-branch input: its reported gradient and the largest change in
/// loss value produced by perturbing one of its elements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopGradientCheck {
    pub term: String,
    pub max_abs_target_grad: f64,
    pub max_value_delta: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub precision: String,
    pub h: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub terms: Vec<TermCheck>,
    pub stop_gradient: Vec<StopGradientCheck>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn central_difference(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + h;
            let a = f(&v);
            v[i] = orig - h;
            let b = f(&v);
            v[i] = orig;
            (a - b) / (2.0 * h)
        })
        .collect()
}

/// Largest `|f(x + h·e_i) − f(x)|` over elements.
fn max_value_delta(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let base = f(x);
    let mut v = x.to_vec();
    let mut best = 0.0f64;
    for i in 0..x.len() {
        let orig = v[i];
        v[i] = orig + h;
        best = best.max((f(&v) - base).abs());
        v[i] = orig;
    }
    best
}

fn compare(term: &str, analytic: &[f64], numeric: &[f64], tolerance: f64) -> TermCheck {
    let mut rel = 0.0f64;
    let mut abs = 0.0f64;
    let mut finite = analytic.len() == numeric.len();
    for (a, n) in analytic.iter().zip(numeric) {
        finite &= a.is_finite() && n.is_finite();
        rel = rel.max(relative_error(*a, *n));
        abs = abs.max((a - n).abs());
    }
    TermCheck {
        term: term.to_string(),
        checked: analytic.len(),
        max_rel_error: rel,
        max_abs_error: abs,
        passed: finite && rel < tolerance,
    }
}

fn stop_gradient(term: &str, target_grad: &[f64], delta: f64) -> StopGradientCheck {
    let g = target_grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    StopGradientCheck {
        term: term.to_string(),
        max_abs_target_grad: g,
        max_value_delta: delta,
        passed: g == 0.0 && delta > 0.0,
    }
}

fn rand_vec(len: usize, r: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(r)).collect()
}

/// Strictly positive entries, like post-ReLU activations away from the kink.
fn rand_map(h: usize, w: usize, c: usize, r: &mut Rng) -> FeatureMap<f64> {
    FeatureMap::from_fn(h, w, c, |_, _, _| r.random::<f64>() + 0.05)
}

fn with_data(m: &FeatureMap<f64>, data: &[f64]) -> FeatureMap<f64> {
    FeatureMap {
        data: data.to_vec(),
        ..m.clone()
    }
}

/// A partial-overlap warp: some cells map outside the other view.
fn test_warp() -> AffineWarp {
    AffineWarp::from_matrix([[0.9, 0.0, 0.12], [0.05, 0.85, 0.15]])
}

fn rand_act(c: usize, side: usize, r: &mut Rng) -> Act<f64> {
    let mut a = Act::zeros(c, BATCH, side, side);
    for v in &mut a.data {
        *v = r.random::<f64>() + 0.05;
    }
    a
}

fn rand_pyramid(r: &mut Rng) -> FeaturePyramid<f64> {
    let f4 = rand_act(MAP_CHANNELS, 2, r);
    let rep = vec![0.0; BATCH * MAP_CHANNELS];
    FeaturePyramid {
        f2: rand_act(4, MAP_SIDE, r),
        f3: rand_act(MAP_CHANNELS, 4, r),
        f4,
        rep,
        proj: rand_vec(BATCH * 5, r),
        pred: Some(rand_vec(BATCH * 5, r)),
    }
}

/// Online pyramid values flattened in a fixed order: f2, f3, f4, pred.
fn flatten(p: &FeaturePyramid<f64>) -> Vec<f64> {
    let mut v = p.f2.data.clone();
    v.extend(&p.f3.data);
    v.extend(&p.f4.data);
    v.extend(p.pred.as_deref().unwrap_or(&[]));
    v
}

fn unflatten(like: &FeaturePyramid<f64>, v: &[f64]) -> FeaturePyramid<f64> {
    let mut p = like.clone();
    let (a, rest) = v.split_at(p.f2.data.len());
    let (b, rest) = rest.split_at(p.f3.data.len());
    let (c, d) = rest.split_at(p.f4.data.len());
    p.f2.data = a.to_vec();
    p.f3.data = b.to_vec();
    p.f4.data = c.to_vec();
    p.pred = Some(d.to_vec());
    p
}

fn flatten_grads(g: &PyramidGrads<f64>, like: &FeaturePyramid<f64>) -> Vec<f64> {
    let mut v = Vec::new();
    for (slot, act) in [(&g.f2, &like.f2), (&g.f3, &like.f3), (&g.f4, &like.f4)] {
        match slot {
            Some(a) => v.extend(&a.data),
            None => v.extend(std::iter::repeat_n(0.0, act.data.len())),
        }
    }
    match &g.pred {
        Some(p) => v.extend(p),
        None => v.extend(std::iter::repeat_n(0.0, like.pred.as_ref().map_or(0, Vec::len))),
    }
    v
}

/// Compares analytic gradients of every loss term with central finite
/// differences of step `h` on small random double-precision inputs, and
/// checks that target-branch inputs receive no gradient while still
/// affecting the loss value.
pub fn gradcheck_suite(h: f64, tolerance: f64, seed: u64) -> GradcheckReport {
    let mut r = rng::seeded(seed);
    let mut terms = Vec::new();
    let mut stops = Vec::new();
    let warp = test_warp();
    let (s, c) = (MAP_SIDE, MAP_CHANNELS);

    // global
    let dim = 8;
    let (p1, z2, p2, z1) = (
        rand_vec(dim, &mut r),
        rand_vec(dim, &mut r),
        rand_vec(dim, &mut r),
        rand_vec(dim, &mut r),
    );
    let g = global_loss(&p1, &z2, &p2, &z1).expect("global");
    let mut joint = p1.clone();
    joint.extend(&p2);
    let num = central_difference(&joint, h, |v| {
        global_loss(&v[..dim], &z2, &v[dim..], &z1).map_or(f64::NAN, |l| l.value)
    });
    let mut analytic = g.grad_pred1.clone();
    analytic.extend(&g.grad_pred2);
    terms.push(compare("global", &analytic, &num, tolerance));
    let mut targets = z2.clone();
    targets.extend(&z1);
    let delta = max_value_delta(&targets, h, |v| {
        global_loss(&p1, &v[..dim], &p2, &v[dim..]).map_or(f64::NAN, |l| l.value)
    });
    stops.push(stop_gradient("global", &vec![0.0; targets.len()], delta));

    // saliency alignment
    let f_on = rand_map(s, s, c, &mut r);
    let f_tg = rand_map(s, s, c, &mut r);
    let l = sal_layer(&f_on, &f_tg, &warp);
    let num = central_difference(&f_on.data, h, |v| sal_layer(&with_data(&f_on, v), &f_tg, &warp).value);
    terms.push(compare("sal", &l.grad.data, &num, tolerance));
    let delta = max_value_delta(&f_tg.data, h, |v| sal_layer(&f_on, &with_data(&f_tg, v), &warp).value);
    stops.push(stop_gradient("sal", &vec![0.0; f_tg.data.len()], delta));

    // part-distribution alignment
    let bank = PrototypeBank::<f64>::random(PROTOTYPES, c, TEMPERATURE, r.random()).expect("bank");
    let f_on = rand_map(s, s, c, &mut r);
    let f_tg = rand_map(s, s, c, &mut r);
    let ppda = |a: &FeatureMap<f64>, b: &FeatureMap<f64>, bank: &PrototypeBank<f64>| {
        ppda_loss(a, b, bank, GRID).map_or(f64::NAN, |l| l.value)
    };
    let l = ppda_loss(&f_on, &f_tg, &bank, GRID).expect("ppda");
    let num = central_difference(&f_on.data, h, |v| ppda(&with_data(&f_on, v), &f_tg, &bank));
    terms.push(compare("ppda_features", &l.grad.data, &num, tolerance));
    let regions = pool_regions(&f_on, GRID);
    let num = central_difference(&bank.vectors, h, |v| {
        let b = PrototypeBank {
            vectors: v.to_vec(),
            ..bank.clone()
        };
        soft_assign(&regions.vectors, regions.len(), &b)
            .map_or(f64::NAN, |a| symmetric_kl(&a.part_distribution(), &l.q_target))
    });
    terms.push(compare("ppda_prototypes", &l.grad_bank, &num, tolerance));
    let delta = max_value_delta(&f_tg.data, h, |v| ppda(&f_on, &with_data(&f_tg, v), &bank));
    stops.push(stop_gradient("ppda", &vec![0.0; f_tg.data.len()], delta));

    // region affinity
    let f_on = rand_map(s, s, c, &mut r);
    let f_tg = rand_map(s, s, c, &mut r);
    let ram = |a: &FeatureMap<f64>, b: &FeatureMap<f64>| ram_loss(a, b, &warp, GRID).map_or(f64::NAN, |l| l.value);
    let l = ram_loss(&f_on, &f_tg, &warp, GRID).expect("ram");
    let num = central_difference(&f_on.data, h, |v| ram(&with_data(&f_on, v), &f_tg));
    terms.push(compare("ram", &l.grad.data, &num, tolerance));
    let delta = max_value_delta(&f_tg.data, h, |v| ram(&f_on, &with_data(&f_tg, v)));
    stops.push(stop_gradient("ram", &vec![0.0; f_tg.data.len()], delta));

    // weighted combination over a two-sample batch of pyramids
    let online = [rand_pyramid(&mut r), rand_pyramid(&mut r)];
    let target = [rand_pyramid(&mut r), rand_pyramid(&mut r)];
    let warps: Vec<ViewWarps> = (0..BATCH)
        .map(|k| {
            let fw = AffineWarp::from_matrix([[0.9, 0.0, 0.1 * k as f64], [0.05, 0.85, 0.15]]);
            ViewWarps {
                backward: fw.inverse(),
                forward: fw,
            }
        })
        .collect();
    let cfg = LossConfig {
        weights: LossWeights {
            sal: 0.7,
            ppda: 0.4,
            ram: 0.9,
        },
        ppda_grid: GRID,
        ram_grid: GRID,
        prototypes: PROTOTYPES,
        temperature: TEMPERATURE,
        ..LossConfig::default()
    };
    let total = |on: [&FeaturePyramid<f64>; 2], tg: [&FeaturePyramid<f64>; 2]| {
        combined_loss(on, tg, &warps, &bank, &cfg).map_or(f64::NAN, |(rep, _)| rep.total)
    };
    match combined_loss([&online[0], &online[1]], [&target[0], &target[1]], &warps, &bank, &cfg) {
        Ok((_, grads)) => {
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            for v in 0..2 {
                analytic.extend(flatten_grads(&grads.online[v], &online[v]));
                numeric.extend(central_difference(&flatten(&online[v]), h, |x| {
                    let mut on = online.clone();
                    on[v] = unflatten(&online[v], x);
                    total([&on[0], &on[1]], [&target[0], &target[1]])
                }));
            }
            terms.push(compare("combined", &analytic, &numeric, tolerance));
        }
        Err(_) => terms.push(TermCheck {
            term: "combined".into(),
            checked: 0,
            max_rel_error: f64::INFINITY,
            max_abs_error: f64::INFINITY,
            passed: false,
        }),
    }

    let passed = terms.iter().all(|t| t.passed) && stops.iter().all(|s| s.passed);
    GradcheckReport {
        precision: "f64".into(),
        h,
        tolerance,
        seed,
        terms,
        stop_gradient: stops,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_tolerance() {
        let rep = gradcheck_suite(1e-5, 1e-4, 0);
        for t in &rep.terms {
            assert!(t.passed, "{t:?}");
            assert!(t.checked > 0);
        }
        assert!(rep.stop_gradient.iter().all(|s| s.passed), "{:?}", rep.stop_gradient);
        assert!(rep.passed);
        let names: Vec<&str> = rep.terms.iter().map(|t| t.term.as_str()).collect();
        assert_eq!(names, ["global", "sal", "ppda_features", "ppda_prototypes", "ram", "combined"]);
    }

    #[test]
    fn suite_fails_below_truncation_floor() {
        let rep = gradcheck_suite(1e-5, 1e-12, 0);
        assert!(!rep.passed);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
