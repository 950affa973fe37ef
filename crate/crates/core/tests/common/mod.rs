//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cooptrack::autodiff::{Eval, Graph};
use cooptrack::config::RunConfig;
use cooptrack::covnet::{CovNetConfig, CovNetParams};
use cooptrack::filter::{fuse_sequential, ObservationModel, TrackState};
use cooptrack::geometry::Box7;
use cooptrack::linalg::Mat;
use cooptrack::sim::{generate, scenario_from_config, Sequence};
use cooptrack::training::{window_gradient, window_loss_plain, NetContext};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

pub fn from_na(m: &DMatrix<f64>) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Random SPD matrix `B Bᵀ + n·floor·I` with entries of `B` in ±scale.
pub fn random_spd(r: &mut impl Rng, n: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| r.random_range(-scale..scale));
    &b * b.transpose() + DMatrix::identity(n, n) * (n as f64 * floor)
}

/// Stacked Kalman update: all observations in one measurement vector with a
/// block-diagonal noise matrix.
pub fn joint_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    obs: &[[f64; 7]],
    noises: &[DMatrix<f64>],
) -> (DVector<f64>, DMatrix<f64>) {
    let m = obs.len() * 7;
    let n = mean.len();
    let mut h = DMatrix::zeros(m, n);
    let mut r = DMatrix::zeros(m, m);
    let mut z = DVector::zeros(m);
    for (k, (o, rk)) in obs.iter().zip(noises).enumerate() {
        for i in 0..7 {
            h[(7 * k + i, i)] = 1.0;
            z[7 * k + i] = o[i];
        }
        r.view_mut((7 * k, 7 * k), (7, 7)).copy_from(rk);
    }
    let s = &h * cov * h.transpose() + r;
    let s_inv = s
        .try_inverse()
        .expect("innovation covariance is invertible");
    let k = cov * h.transpose() * s_inv;
    let new_mean = mean + &k * (z - &h * mean);
    let new_cov = (DMatrix::identity(n, n) - &k * &h) * cov;
    (new_mean, new_cov)
}

pub struct FusionCase {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub obs: Vec<[f64; 7]>,
    pub noises: Vec<DMatrix<f64>>,
}

/// Random track with 1–4 observations near its mean; yaw and extents stay
/// far from wrap and floor boundaries.
pub fn fusion_case(r: &mut impl Rng) -> FusionCase {
    let mut mean = DVector::zeros(10);
    for i in 0..10 {
        mean[i] = r.random_range(-10.0..10.0);
    }
    mean[3] = r.random_range(-1.0..1.0);
    for i in 4..7 {
        mean[i] = r.random_range(2.0..5.0);
    }
    let cov = random_spd(r, 10, 0.5, 0.05);
    let count = r.random_range(1..=4);
    let obs = (0..count)
        .map(|_| {
            let mut o = [0.0; 7];
            for (i, v) in o.iter_mut().enumerate() {
                *v = mean[i] + r.random_range(-0.3..0.3);
            }
            o
        })
        .collect();
    let noises = (0..count).map(|_| random_spd(r, 7, 0.4, 0.05)).collect();
    FusionCase {
        mean,
        cov,
        obs,
        noises,
    }
}

/// Worst relative error of sequential fusion against the joint update:
/// `max |a − b| / max(1, |b|)` over mean and covariance entries.
pub fn fusion_error(case: &FusionCase) -> f64 {
    let state = TrackState {
        mean: from_na(&DMatrix::from_column_slice(10, 1, case.mean.as_slice())),
        cov: from_na(&case.cov),
        id: 0,
        hits: 1,
        misses: 0,
        score: 1.0,
    };
    let observations: Vec<([f64; 7], ObservationModel<Mat>)> = case
        .obs
        .iter()
        .zip(&case.noises)
        .map(|(o, r)| (*o, ObservationModel { noise: from_na(r) }))
        .collect();
    let fused = fuse_sequential(&mut Eval, &state, &observations).expect("fusion succeeds");
    let (jm, jc) = joint_update(&case.mean, &case.cov, &case.obs, &case.noises);
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        worst = worst.max((fused.mean.get(i, 0) - jm[i]).abs() / jm[i].abs().max(1.0));
        for j in 0..10 {
            let b = jc[(i, j)];
            worst = worst.max((fused.cov.get(i, j) - b).abs() / b.abs().max(1.0));
        }
    }
    worst
}

/// Minimum assignment cost over all injective maps of the smaller side.
pub fn brute_force_min(cost: &Mat) -> f64 {
    let (rows, cols) = cost.shape();
    let transpose = rows > cols;
    let (small, large) = if transpose {
        (cols, rows)
    } else {
        (rows, cols)
    };
    let at = |i: usize, j: usize| {
        if transpose {
            cost.get(j, i)
        } else {
            cost.get(i, j)
        }
    };
    fn go(
        i: usize,
        small: usize,
        large: usize,
        used: &mut Vec<bool>,
        acc: f64,
        at: &dyn Fn(usize, usize) -> f64,
        best: &mut f64,
    ) {
        if i == small {
            *best = best.min(acc);
            return;
        }
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                go(i + 1, small, large, used, acc + at(i, j), at, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(
        0,
        small,
        large,
        &mut vec![false; large],
        0.0,
        &at,
        &mut best,
    );
    if small == 0 {
        0.0
    } else {
        best
    }
}

pub fn random_box(r: &mut impl Rng, spread: f64) -> Box7 {
    Box7::new(
        r.random_range(-spread..spread),
        r.random_range(-spread..spread),
        r.random_range(-0.5..0.5),
        r.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        r.random_range(1.0..5.0),
        r.random_range(0.8..2.5),
        r.random_range(1.0..2.0),
    )
    .unwrap()
}

fn inside(b: &[f64; 7], p: [f64; 3]) -> bool {
    let (dx, dy) = (p[0] - b[0], p[1] - b[1]);
    let u = dx * b[3].cos() + dy * b[3].sin();
    let v = -dx * b[3].sin() + dy * b[3].cos();
    2.0 * u.abs() <= b[4] && 2.0 * v.abs() <= b[5] && 2.0 * (p[2] - b[2]).abs() <= b[6]
}

/// Monte-Carlo IoU: the intersection volume is estimated from `n` uniform
/// samples inside the first box.
pub fn mc_iou(b1: &Box7, b2: &Box7, n: usize, r: &mut impl Rng) -> f64 {
    let a = b1.to_array();
    let c = b2.to_array();
    let (s, co) = a[3].sin_cos();
    let mut hits = 0usize;
    for _ in 0..n {
        let u = (r.random::<f64>() - 0.5) * a[4];
        let v = (r.random::<f64>() - 0.5) * a[5];
        let w = (r.random::<f64>() - 0.5) * a[6];
        let p = [a[0] + co * u - s * v, a[1] + s * u + co * v, a[2] + w];
        if inside(&c, p) {
            hits += 1;
        }
    }
    let v1 = a[4] * a[5] * a[6];
    let v2 = c[4] * c[5] * c[6];
    let inter = v1 * hits as f64 / n as f64;
    inter / (v1 + v2 - inter)
}

/// Two CAVs, three objects, three frames.
pub fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.scenario.duration = 3;
    cfg.scenario.num_objects = 3;
    cfg.covnet.zero_output_layer = false;
    cfg
}

pub fn toy_sequence(cfg: &RunConfig, seed: u64) -> Sequence {
    generate(&scenario_from_config(&cfg.scenario, cfg.covnet.appearance, seed).unwrap()).unwrap()
}

/// Gaussian direction over all networks, scaled to unit global norm.
pub fn random_direction(
    cfg: &CovNetConfig,
    count: usize,
    r: &mut impl RngCore,
) -> Vec<CovNetParams> {
    let normal = rand_distr::StandardNormal;
    let raw: Vec<CovNetParams> = (0..count)
        .map(|_| {
            CovNetParams::zeros(cfg)
                .map(|m| Mat::from_fn(m.rows(), m.cols(), |_, _| r.sample::<f64, _>(normal)))
        })
        .collect();
    let norm = dot(&raw, &raw).sqrt();
    raw.iter()
        .map(|n| n.map(|m| Mat::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) / norm)))
        .collect()
}

fn axpy(nets: &[CovNetParams], dir: &[CovNetParams], t: f64) -> Vec<CovNetParams> {
    nets.iter()
        .zip(dir)
        .map(|(n, d)| {
            let mut out = n.clone();
            for (o, dd) in out.as_mut_slice().into_iter().zip(d.as_slice()) {
                *o = Mat::from_fn(o.rows(), o.cols(), |i, j| o.get(i, j) + t * dd.get(i, j));
            }
            out
        })
        .collect()
}

fn dot(a: &[CovNetParams], b: &[CovNetParams]) -> f64 {
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
            total += p
                .data()
                .iter()
                .zip(q.data())
                .map(|(u, v)| u * v)
                .sum::<f64>();
        }
    }
    total
}

/// Relative errors `|ad − fd| / max(|ad|, |fd|)` of backward-mode
/// directional derivatives against central differences with step `h`.
pub fn gradient_check(
    cfg: &RunConfig,
    seq: &Sequence,
    nets: &[CovNetParams],
    directions: usize,
    h: f64,
    seed: u64,
) -> Vec<f64> {
    let ctx = NetContext {
        tracker: &cfg.tracker,
        covnet: &cfg.covnet,
        bounds: &cfg.features.bounds,
        train: &cfg.train,
    };
    let range = 0..seq.frames.len();
    let (_, supervised, grads) = window_gradient(nets, seq, range.clone(), &ctx).unwrap();
    assert!(supervised > 0, "toy window has no supervised tracks");
    let loss_at = |p: &[CovNetParams]| {
        let l = window_loss_plain(p, seq, range.clone(), &ctx).unwrap();
        Eval.scalar(&l.value.unwrap())
    };
    let mut r = rng(seed);
    (0..directions)
        .map(|_| {
            let dir = random_direction(&cfg.covnet, nets.len(), &mut r);
            let ad = dot(&grads, &dir);
            let fd = (loss_at(&axpy(nets, &dir, h)) - loss_at(&axpy(nets, &dir, -h))) / (2.0 * h);
            (ad - fd).abs() / ad.abs().max(fd.abs()).max(f64::MIN_POSITIVE)
        })
        .collect()
}
