//! Kalman prediction and update for one track.
//!
//! State layout: `(x, y, z, a, l, w, h, dx, dy, dz)`, velocities in meters
//! per frame. The observation model is `H = [I₇ 0]`, so `HΣ` and `ΣHᵀ` are
//! taken as blocks of `Σ` rather than as products.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::geometry::wrap_angle;
use crate::linalg::Mat;

pub const STATE_DIM: usize = 10;
pub const OBS_DIM: usize = 7;
const YAW: usize = 3;
/// Extents are kept at least this large after an update.
const MIN_EXTENT: f64 = 1e-3;

/// Constant-velocity transition `A` and diagonal process noise `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessModel {
    pub transition: Mat,
    pub noise: Mat,
}

impl ProcessModel {
    pub fn constant_velocity(q_diag: &[f64; STATE_DIM]) -> Result<Self> {
        if q_diag.iter().any(|q| !(*q >= 0.0) || !q.is_finite()) {
            return Err(Error::Config(format!(
                "process noise must be finite and nonnegative: {q_diag:?}"
            )));
        }
        let mut a = Mat::identity(STATE_DIM);
        for k in 0..3 {
            a.set(k, 7 + k, 1.0);
        }
        Ok(ProcessModel {
            transition: a,
            noise: Mat::diag(q_diag),
        })
    }
}

impl Default for ProcessModel {
    fn default() -> Self {
        ProcessModel::constant_velocity(&DEFAULT_Q_DIAG).expect("default Q is valid")
    }
}

pub const DEFAULT_Q_DIAG: [f64; STATE_DIM] = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.01, 0.01, 0.01];

/// Per-detection observation noise `R` (7×7, diagonal by construction).
#[derive(Debug, Clone)]
pub struct ObservationModel<N> {
    pub noise: N,
}

/// One track's Gaussian belief plus lifecycle bookkeeping.
#[derive(Debug, Clone)]
pub struct TrackState<N> {
    /// 10×1 mean.
    pub mean: N,
    /// 10×10 covariance.
    pub cov: N,
    pub id: u64,
    pub hits: u32,
    pub misses: u32,
    pub score: f64,
}

impl<N> TrackState<N> {
    pub fn with_belief<M>(&self, mean: M, cov: M) -> TrackState<M> {
        TrackState {
            mean,
            cov,
            id: self.id,
            hits: self.hits,
            misses: self.misses,
            score: self.score,
        }
    }
}

/// Rewrites the observed yaw so that its difference to `predicted_yaw` is
/// wrapped into `[-π, π)`, flipping the heading by π when the wrapped
/// difference exceeds π/2.
pub fn align_observation(obs: &[f64; OBS_DIM], predicted_yaw: f64) -> [f64; OBS_DIM] {
    let raw = obs[YAW] - predicted_yaw;
    let mut d = wrap_angle(raw);
    if d.abs() > FRAC_PI_2 {
        d = wrap_angle(d + PI);
    }
    let mut out = *obs;
    if d != raw {
        out[YAW] = predicted_yaw + d;
    }
    out
}

/// `μ̂ = Aμ`, `Σ̂ = AΣAᵀ + Q`.
pub fn predict<G: Graph>(
    g: &mut G,
    state: &TrackState<G::Node>,
    model: &ProcessModel,
) -> TrackState<G::Node> {
    let a = g.constant(model.transition.clone());
    let at = g.constant(model.transition.transpose());
    let q = g.constant(model.noise.clone());
    let mean = g.matmul(&a, &state.mean);
    let a_sigma = g.matmul(&a, &state.cov);
    let a_sigma_at = g.matmul(&a_sigma, &at);
    let cov = g.add(&a_sigma_at, &q);
    state.with_belief(mean, cov)
}

/// Kalman update with one associated observation.
pub fn update<G: Graph>(
    g: &mut G,
    state: &TrackState<G::Node>,
    obs: &[f64; OBS_DIM],
    model: &ObservationModel<G::Node>,
) -> Result<TrackState<G::Node>> {
    check_shape(g.value(&state.mean), (STATE_DIM, 1), "mean")?;
    check_shape(g.value(&state.cov), (STATE_DIM, STATE_DIM), "covariance")?;
    check_shape(g.value(&model.noise), (OBS_DIM, OBS_DIM), "R")?;

    let predicted_yaw = g.value(&state.mean).get(YAW, 0);
    let o = g.constant(Mat::col(&align_observation(obs, predicted_yaw)));

    let h_mean = g.slice(&state.mean, 0..OBS_DIM, 0..1);
    let innovation = g.sub(&o, &h_mean);
    let h_sigma = g.slice(&state.cov, 0..OBS_DIM, 0..STATE_DIM);
    let sigma_ht = g.slice(&state.cov, 0..STATE_DIM, 0..OBS_DIM);
    let h_sigma_ht = g.slice(&state.cov, 0..OBS_DIM, 0..OBS_DIM);
    let s = g.add(&h_sigma_ht, &model.noise);

    // K = ΣHᵀS⁻¹ = (S⁻¹ (ΣHᵀ)ᵀ)ᵀ for symmetric S
    let rhs = g.transpose(&sigma_ht);
    let kt = g.spd_solve(&s, &rhs)?;
    let k = g.transpose(&kt);

    let correction = g.matmul(&k, &innovation);
    let mean = g.add(&state.mean, &correction);
    let mean = normalize_mean(g, mean);

    let k_h_sigma = g.matmul(&k, &h_sigma);
    let cov = g.sub(&state.cov, &k_h_sigma);
    let cov_t = g.transpose(&cov);
    let cov = g.add(&cov, &cov_t);
    let cov = g.scale(&cov, 0.5);

    Ok(state.with_belief(mean, cov))
}

/// Sequential multi-sensor update: one [`update`] per observation, in order.
pub fn fuse_sequential<G: Graph>(
    g: &mut G,
    state: &TrackState<G::Node>,
    observations: &[([f64; OBS_DIM], ObservationModel<G::Node>)],
) -> Result<TrackState<G::Node>> {
    let mut cur = state.clone();
    for (obs, model) in observations {
        cur = update(g, &cur, obs, model)?;
    }
    Ok(cur)
}

/// Re-wraps the yaw and keeps the extents positive by adding constant
/// offsets; gradients pass through unchanged.
fn normalize_mean<G: Graph>(g: &mut G, mean: G::Node) -> G::Node {
    let v = g.value(&mean);
    let mut offset = vec![0.0; STATE_DIM];
    let yaw = v.get(YAW, 0);
    let wrapped = wrap_angle(yaw);
    if wrapped != yaw {
        offset[YAW] = wrapped - yaw;
    }
    for (k, o) in offset.iter_mut().enumerate().take(7).skip(4) {
        let e = v.get(k, 0);
        if e < MIN_EXTENT {
            *o = MIN_EXTENT - e;
        }
    }
    if offset.iter().all(|o| *o == 0.0) {
        return mean;
    }
    let c = g.constant(Mat::col(&offset));
    g.add(&mean, &c)
}

fn check_shape(m: &Mat, want: (usize, usize), what: &str) -> Result<()> {
    if m.shape() != want {
        return Err(Error::Shape(format!(
            "{what}: expected {want:?}, got {:?}",
            m.shape()
        )));
    }
    Ok(())
}

/// Initial belief for a track born from `obs`: zero velocity, diagonal Σ₀.
pub fn birth_state<G: Graph>(
    g: &mut G,
    obs: &[f64; OBS_DIM],
    init_cov: G::Node,
    id: u64,
    score: f64,
) -> TrackState<G::Node> {
    let mut mean = obs.to_vec();
    mean.extend_from_slice(&[0.0; 3]);
    TrackState {
        mean: g.constant(Mat::col(&mean)),
        cov: init_cov,
        id,
        hits: 1,
        misses: 0,
        score,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Eval, Tape};

    fn state(mean: [f64; 10], cov: Mat) -> TrackState<Mat> {
        TrackState {
            mean: Mat::col(&mean),
            cov,
            id: 1,
            hits: 2,
            misses: 0,
            score: 0.5,
        }
    }

    const BASE: [f64; 10] = [1.0, 2.0, 0.5, 0.3, 4.0, 1.8, 1.5, 0.0, 0.0, 0.0];

    #[test]
    fn zero_velocity_keeps_position() {
        let s = state(BASE, Mat::identity(10));
        let p = predict(&mut Eval, &s, &ProcessModel::default());
        assert_eq!(p.mean, s.mean);
        assert_eq!((p.id, p.hits, p.misses), (1, 2, 0));
    }

    #[test]
    fn unit_velocity_advances_one_per_frame() {
        let mut m = [0.0; 10];
        m[4] = 1.0;
        m[5] = 1.0;
        m[6] = 1.0;
        m[7] = 1.0;
        let s = state(m, Mat::identity(10));
        let p = predict(&mut Eval, &s, &ProcessModel::default());
        assert_eq!(p.mean.get(0, 0), 1.0);
        let p2 = predict(&mut Eval, &p, &ProcessModel::default());
        assert_eq!(p2.mean.get(0, 0), 2.0);
    }

    #[test]
    fn zero_covariance_propagates_to_q() {
        let s = state(BASE, Mat::zeros(10, 10));
        let model = ProcessModel::default();
        let p = predict(&mut Eval, &s, &model);
        assert_eq!(p.cov, model.noise);
    }

    #[test]
    fn zero_innovation_leaves_mean() {
        let s = state(BASE, Mat::identity(10));
        let obs: [f64; 7] = BASE[..7].try_into().unwrap();
        let r = ObservationModel {
            noise: Mat::diag(&[0.3, 0.2, 0.1, 0.5, 0.7, 0.9, 1.1]),
        };
        let u = update(&mut Eval, &s, &obs, &r).unwrap();
        assert_eq!(u.mean, s.mean);
    }

    #[test]
    fn huge_noise_ignores_observation() {
        let s = state(BASE, Mat::identity(10));
        let obs = [5.0, -3.0, 1.0, 0.1, 4.5, 2.0, 1.6];
        let r = ObservationModel {
            noise: Mat::diag(&[1e9; 7]),
        };
        let u = update(&mut Eval, &s, &obs, &r).unwrap();
        for (i, b) in BASE.iter().enumerate() {
            assert!((u.mean.get(i, 0) - b).abs() < 1e-6);
        }
    }

    #[test]
    fn yaw_flip_is_applied() {
        let o = align_observation(&[0.0, 0.0, 0.0, PI - 0.05, 1.0, 1.0, 1.0], 0.05);
        assert!((o[3] - (-0.05)).abs() < 1e-12);
        let o = align_observation(&[0.0, 0.0, 0.0, 3.1, 1.0, 1.0, 1.0], -3.1);
        assert!((o[3] - (-3.1 - (2.0 * PI - 6.2))).abs() < 1e-12);
    }

    #[test]
    fn empty_and_single_fusion() {
        let s = state(BASE, Mat::identity(10));
        let same = fuse_sequential(&mut Eval, &s, &[]).unwrap();
        assert_eq!(same.mean, s.mean);
        assert_eq!(same.cov, s.cov);
        let obs = [1.5, 2.5, 0.4, 0.2, 4.2, 1.7, 1.4];
        let r = ObservationModel {
            noise: Mat::diag(&[0.5; 7]),
        };
        let one = fuse_sequential(&mut Eval, &s, &[(obs, r.clone())]).unwrap();
        let direct = update(&mut Eval, &s, &obs, &r).unwrap();
        assert_eq!(one.mean, direct.mean);
        assert_eq!(one.cov, direct.cov);
    }

    #[test]
    fn tape_matches_plain_bitwise() {
        let cov = Mat::from_fn(
            10,
            10,
            |i, j| if i == j { 1.0 + 0.1 * i as f64 } else { 0.01 },
        );
        let s = state(BASE, cov.clone());
        let obs = [1.5, 2.5, 0.4, 0.2, 4.2, 1.7, 1.4];
        let r = Mat::diag(&[0.5, 0.4, 0.3, 0.2, 0.6, 0.7, 0.8]);
        let model = ProcessModel::default();

        let p = predict(&mut Eval, &s, &model);
        let plain = update(&mut Eval, &p, &obs, &ObservationModel { noise: r.clone() }).unwrap();

        let mut t = Tape::new();
        let ts = TrackState {
            mean: t.constant(s.mean.clone()),
            cov: t.param(cov),
            id: 1,
            hits: 0,
            misses: 0,
            score: 0.0,
        };
        let tr = t.param(r);
        let tp = predict(&mut t, &ts, &model);
        let tu = update(&mut t, &tp, &obs, &ObservationModel { noise: tr }).unwrap();
        assert_eq!(t.value(&tu.mean), &plain.mean);
        assert_eq!(t.value(&tu.cov), &plain.cov);
    }

    #[test]
    fn degenerate_innovation_is_an_error() {
        let s = state(BASE, Mat::zeros(10, 10));
        let r = ObservationModel {
            noise: Mat::zeros(7, 7),
        };
        let err = update(&mut Eval, &s, &[0.0; 7].map(|_| 1.0), &r).unwrap_err();
        assert!(matches!(err, Error::DegenerateCovariance(_)));
    }
}
