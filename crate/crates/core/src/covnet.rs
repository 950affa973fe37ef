//! Covariance network: maps a detection's appearance tensor and encoded
//! positional feature to ten standard-deviation residuals, and turns those
//! residuals into the diagonal `R` and `Σ₀` used by the filter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Eval, Graph, Tape, Var};
use crate::error::{Error, Result};
use crate::features::{AppearanceShape, POSITIONAL_LEN};
use crate::filter::{OBS_DIM, STATE_DIM};
use crate::linalg::Mat;

/// Floor applied to every diagonal entry of `R` and `Σ₀`.
pub const COV_FLOOR: f64 = 1e-6;
pub const RESIDUAL_LEN: usize = STATE_DIM;

/// Which inputs feed the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Both,
    AppearanceOnly,
    PositionalOnly,
}

impl FeatureSet {
    pub fn uses_appearance(self) -> bool {
        matches!(self, FeatureSet::Both | FeatureSet::AppearanceOnly)
    }

    pub fn uses_positional(self) -> bool {
        matches!(self, FeatureSet::Both | FeatureSet::PositionalOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovNetConfig {
    pub appearance: AppearanceShape,
    /// Frequencies per positional scalar (`d`); the encoding is 18 × 2d.
    pub encoding_dim: usize,
    pub kernel: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub pos_hidden: usize,
    pub pos_out: usize,
    pub head_hidden: usize,
    pub features: FeatureSet,
    pub num_cavs: usize,
    /// One parameter set for all CAVs instead of one per CAV.
    pub shared_weights: bool,
    /// Start the output layer at zero so the untrained network reproduces
    /// the constant-covariance tracker exactly.
    pub zero_output_layer: bool,
}

impl Default for CovNetConfig {
    fn default() -> Self {
        CovNetConfig {
            appearance: AppearanceShape::default(),
            encoding_dim: crate::features::DEFAULT_ENCODING_DIM,
            kernel: 3,
            conv1_channels: 16,
            conv2_channels: 36,
            pos_hidden: 32,
            pos_out: 8,
            head_hidden: 32,
            features: FeatureSet::Both,
            num_cavs: 2,
            shared_weights: false,
            zero_output_layer: true,
        }
    }
}

impl CovNetConfig {
    pub fn conv1(&self) -> ConvGeometry {
        ConvGeometry {
            channels: self.appearance.channels,
            height: self.appearance.height,
            width: self.appearance.width,
            kernel: self.kernel,
            stride: 2,
            padding: self.kernel / 2,
        }
    }

    pub fn conv2(&self) -> ConvGeometry {
        let c1 = self.conv1();
        ConvGeometry {
            channels: self.conv1_channels,
            height: c1.out_height(),
            width: c1.out_width(),
            kernel: self.kernel,
            stride: 2,
            padding: self.kernel / 2,
        }
    }

    pub fn appearance_flat_len(&self) -> usize {
        let c2 = self.conv2();
        self.conv2_channels * c2.out_height() * c2.out_width()
    }

    pub fn positional_flat_len(&self) -> usize {
        POSITIONAL_LEN * self.pos_out
    }

    pub fn head_input_len(&self) -> usize {
        let mut n = 0;
        if self.features.uses_appearance() {
            n += self.appearance_flat_len();
        }
        if self.features.uses_positional() {
            n += self.positional_flat_len();
        }
        n
    }

    pub fn parameter_sets(&self) -> usize {
        if self.shared_weights {
            1
        } else {
            self.num_cavs
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.appearance.channels,
            self.appearance.height,
            self.appearance.width,
            self.encoding_dim,
            self.kernel,
            self.conv1_channels,
            self.conv2_channels,
            self.pos_hidden,
            self.pos_out,
            self.head_hidden,
            self.num_cavs,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if self.kernel > self.appearance.height + 2 * (self.kernel / 2)
            || self.kernel > self.appearance.width + 2 * (self.kernel / 2)
        {
            return Err(Error::Config(
                "kernel larger than padded appearance map".into(),
            ));
        }
        let (a, p) = (
            self.appearance_flat_len() as f64,
            self.positional_flat_len() as f64,
        );
        if (a - p).abs() > 0.15 * a.min(p) {
            return Err(Error::Config(format!(
                "branch widths {a} and {p} differ by more than 15%"
            )));
        }
        Ok(())
    }
}

/// The network's weight tensors. Generic over the element so the same
/// layout holds plain matrices, tape handles, or optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layers<T> {
    pub conv1_w: T,
    pub conv1_b: T,
    pub conv2_w: T,
    pub conv2_b: T,
    pub pos1_w: T,
    pub pos1_b: T,
    pub pos2_w: T,
    pub pos2_b: T,
    pub head1_w: T,
    pub head1_b: T,
    pub head2_w: T,
    pub head2_b: T,
}

pub type CovNetParams = Layers<Mat>;

impl<T> Layers<T> {
    pub fn as_slice(&self) -> [&T; 12] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.pos1_w,
            &self.pos1_b,
            &self.pos2_w,
            &self.pos2_b,
            &self.head1_w,
            &self.head1_b,
            &self.head2_w,
            &self.head2_b,
        ]
    }

    pub fn as_mut_slice(&mut self) -> [&mut T; 12] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.pos1_w,
            &mut self.pos1_b,
            &mut self.pos2_w,
            &mut self.pos2_b,
            &mut self.head1_w,
            &mut self.head1_b,
            &mut self.head2_w,
            &mut self.head2_b,
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Layers<U> {
        Layers {
            conv1_w: f(&self.conv1_w),
            conv1_b: f(&self.conv1_b),
            conv2_w: f(&self.conv2_w),
            conv2_b: f(&self.conv2_b),
            pos1_w: f(&self.pos1_w),
            pos1_b: f(&self.pos1_b),
            pos2_w: f(&self.pos2_w),
            pos2_b: f(&self.pos2_b),
            head1_w: f(&self.head1_w),
            head1_b: f(&self.head1_b),
            head2_w: f(&self.head2_w),
            head2_b: f(&self.head2_b),
        }
    }
}

/// Expected `(rows, cols)` of every tensor, in [`Layers::as_slice`] order.
pub fn layer_shapes(cfg: &CovNetConfig) -> [(usize, usize); 12] {
    let c1 = cfg.conv1();
    let c2 = cfg.conv2();
    [
        (cfg.conv1_channels, c1.patch_len()),
        (cfg.conv1_channels, 1),
        (cfg.conv2_channels, c2.patch_len()),
        (cfg.conv2_channels, 1),
        (2 * cfg.encoding_dim, cfg.pos_hidden),
        (1, cfg.pos_hidden),
        (cfg.pos_hidden, cfg.pos_out),
        (1, cfg.pos_out),
        (cfg.head_input_len(), cfg.head_hidden),
        (1, cfg.head_hidden),
        (cfg.head_hidden, RESIDUAL_LEN),
        (1, RESIDUAL_LEN),
    ]
}

impl CovNetParams {
    /// Uniform `[-k, k]` weights with `k = 1/√fan_in`, zero biases.
    pub fn init(cfg: &CovNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = layer_shapes(cfg);
        let fan_in = [
            cfg.conv1().patch_len(),
            cfg.conv2().patch_len(),
            2 * cfg.encoding_dim,
            cfg.pos_hidden,
            cfg.head_input_len(),
            cfg.head_hidden,
        ];
        let mut tensors = Vec::with_capacity(12);
        for (layer, fan) in fan_in.iter().enumerate() {
            let (wr, wc) = shapes[2 * layer];
            let k = 1.0 / (*fan as f64).sqrt();
            let zero = layer == 5 && cfg.zero_output_layer;
            let w = Mat::from_fn(wr, wc, |_, _| {
                let u: f64 = rng.random_range(-k..=k);
                if zero {
                    0.0
                } else {
                    u
                }
            });
            let (br, bc) = shapes[2 * layer + 1];
            tensors.push(w);
            tensors.push(Mat::zeros(br, bc));
        }
        Layers::from_vec(tensors)
    }

    pub fn zeros(cfg: &CovNetConfig) -> Self {
        Layers::from_vec(
            layer_shapes(cfg)
                .iter()
                .map(|(r, c)| Mat::zeros(*r, *c))
                .collect(),
        )
    }

    pub fn check_shapes(&self, cfg: &CovNetConfig) -> Result<()> {
        for (i, (t, want)) in self.as_slice().iter().zip(layer_shapes(cfg)).enumerate() {
            if t.shape() != want {
                return Err(Error::Shape(format!(
                    "network tensor {i}: expected {want:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Input(format!("network tensor {i} is not finite")));
            }
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.as_slice().iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor as a trainable tape leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> Layers<Var> {
        self.map(|m| tape.param(m.clone()))
    }
}

impl<T> Layers<T> {
    fn from_vec(v: Vec<T>) -> Self {
        let mut it = v.into_iter();
        let mut next = || it.next().expect("12 tensors");
        Layers {
            conv1_w: next(),
            conv1_b: next(),
            conv2_w: next(),
            conv2_b: next(),
            pos1_w: next(),
            pos1_b: next(),
            pos2_w: next(),
            pos2_b: next(),
            head1_w: next(),
            head1_b: next(),
            head2_w: next(),
            head2_b: next(),
        }
    }
}

/// Forward pass. `appearance` is `channels × (h·w)`, `positional` is the
/// `18 × 2d` encoding. Returns a 1×10 residual row.
pub fn forward<G: Graph>(
    g: &mut G,
    params: &Layers<G::Node>,
    cfg: &CovNetConfig,
    appearance: &G::Node,
    positional: &G::Node,
) -> Result<G::Node> {
    let mut branches = Vec::with_capacity(2);
    if cfg.features.uses_appearance() {
        let want = (
            cfg.appearance.channels,
            cfg.appearance.height * cfg.appearance.width,
        );
        if g.value(appearance).shape() != want {
            return Err(Error::Shape(format!(
                "appearance input: expected {want:?}, got {:?}",
                g.value(appearance).shape()
            )));
        }
        let h = g.conv(appearance, &params.conv1_w, &params.conv1_b, cfg.conv1());
        let h = g.relu(&h);
        let h = g.conv(&h, &params.conv2_w, &params.conv2_b, cfg.conv2());
        let h = g.relu(&h);
        branches.push(g.reshape(&h, 1, cfg.appearance_flat_len()));
    }
    if cfg.features.uses_positional() {
        let want = (POSITIONAL_LEN, 2 * cfg.encoding_dim);
        if g.value(positional).shape() != want {
            return Err(Error::Shape(format!(
                "positional input: expected {want:?}, got {:?}",
                g.value(positional).shape()
            )));
        }
        let h = g.linear(positional, &params.pos1_w, &params.pos1_b);
        let h = g.relu(&h);
        let h = g.linear(&h, &params.pos2_w, &params.pos2_b);
        let h = g.relu(&h);
        branches.push(g.reshape(&h, 1, cfg.positional_flat_len()));
    }
    let x = if branches.len() == 1 {
        branches.pop().expect("one branch")
    } else {
        g.hstack(&branches)
    };
    let h = g.linear(&x, &params.head1_w, &params.head1_b);
    let h = g.relu(&h);
    Ok(g.linear(&h, &params.head2_w, &params.head2_b))
}

/// Plain-mode forward returning the residual values.
pub fn forward_plain(
    params: &CovNetParams,
    cfg: &CovNetConfig,
    appearance: &Mat,
    positional: &Mat,
) -> Result<[f64; RESIDUAL_LEN]> {
    let out = forward(&mut Eval, params, cfg, appearance, positional)?;
    Ok(out.data().try_into().expect("10 residuals"))
}

fn residual_to_cov<G: Graph>(
    g: &mut G,
    residual: &G::Node,
    default_diag: &[f64],
) -> Result<G::Node> {
    let n = default_diag.len();
    if g.value(residual).shape() != (1, RESIDUAL_LEN) {
        return Err(Error::Shape(format!(
            "residual must be 1x{RESIDUAL_LEN}, got {:?}",
            g.value(residual).shape()
        )));
    }
    let roots: Vec<f64> = default_diag.iter().map(|d| d.sqrt()).collect();
    let base = g.constant(Mat::row(&roots));
    let part = g.slice(residual, 0..1, 0..n);
    let std = g.add(&base, &part);
    let var = g.square(&std);
    let var = g.floor(&var, COV_FLOOR);
    Ok(g.diag(&var))
}

/// `diag(R) = (√diag(R_def) + σ[0..7])²`, floored at [`COV_FLOOR`].
pub fn residual_to_obs_cov<G: Graph>(
    g: &mut G,
    residual: &G::Node,
    r_default: &[f64; OBS_DIM],
) -> Result<G::Node> {
    residual_to_cov(g, residual, r_default)
}

/// `diag(Σ₀) = (√diag(Σ₀_def) + σ)²`, floored at [`COV_FLOOR`].
pub fn residual_to_init_cov<G: Graph>(
    g: &mut G,
    residual: &G::Node,
    sigma0_default: &[f64; STATE_DIM],
) -> Result<G::Node> {
    residual_to_cov(g, residual, sigma0_default)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(cfg: &CovNetConfig, seed: u64) -> (Mat, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let app = Mat::from_fn(
            cfg.appearance.channels,
            cfg.appearance.height * cfg.appearance.width,
            |_, _| rng.random_range(-1.0..1.0),
        );
        let pos = Mat::from_fn(POSITIONAL_LEN, 2 * cfg.encoding_dim, |_, _| {
            rng.random_range(-1.0..1.0)
        });
        (app, pos)
    }

    #[test]
    fn default_config_is_balanced() {
        let cfg = CovNetConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.appearance_flat_len(), 144);
        assert_eq!(cfg.positional_flat_len(), 144);
    }

    #[test]
    fn zero_weights_give_zero_residual() {
        let cfg = CovNetConfig::default();
        let p = CovNetParams::zeros(&cfg);
        let (a, x) = inputs(&cfg, 1);
        assert_eq!(forward_plain(&p, &cfg, &a, &x).unwrap(), [0.0; 10]);
    }

    #[test]
    fn default_init_has_zero_output_layer() {
        let cfg = CovNetConfig::default();
        let p = CovNetParams::init(&cfg, 5);
        assert!(p.head2_w.data().iter().all(|v| *v == 0.0));
        assert!(p.head1_w.data().iter().any(|v| *v != 0.0));
        let (a, x) = inputs(&cfg, 2);
        assert_eq!(forward_plain(&p, &cfg, &a, &x).unwrap(), [0.0; 10]);
    }

    #[test]
    fn deterministic_init_and_forward() {
        let cfg = CovNetConfig {
            zero_output_layer: false,
            ..CovNetConfig::default()
        };
        let p1 = CovNetParams::init(&cfg, 42);
        let p2 = CovNetParams::init(&cfg, 42);
        assert_eq!(p1, p2);
        let (a, x) = inputs(&cfg, 3);
        let r1 = forward_plain(&p1, &cfg, &a, &x).unwrap();
        let r2 = forward_plain(&p2, &cfg, &a, &x).unwrap();
        assert_eq!(r1.map(f64::to_bits), r2.map(f64::to_bits));
        assert!(r1.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = CovNetConfig::default();
        let p = CovNetParams::zeros(&cfg);
        let (a, _) = inputs(&cfg, 1);
        let bad = Mat::zeros(18, 10);
        assert!(matches!(
            forward_plain(&p, &cfg, &a, &bad),
            Err(Error::Shape(_))
        ));
        let mut other = cfg.clone();
        other.pos_hidden = 7;
        assert!(p.check_shapes(&other).is_err());
    }

    #[test]
    fn doubling_output_layer_doubles_residual() {
        let cfg = CovNetConfig {
            zero_output_layer: false,
            ..CovNetConfig::default()
        };
        let p = CovNetParams::init(&cfg, 8);
        let mut p2 = p.clone();
        p2.head2_w = p.head2_w.scale(2.0);
        let (a, x) = inputs(&cfg, 4);
        let r1 = forward_plain(&p, &cfg, &a, &x).unwrap();
        let r2 = forward_plain(&p2, &cfg, &a, &x).unwrap();
        for (u, v) in r1.iter().zip(&r2) {
            assert!((2.0 * u - v).abs() <= 1e-15 * u.abs().max(1.0));
        }
    }

    #[test]
    fn obs_cov_formula() {
        let mut e = Eval;
        let r = residual_to_obs_cov(&mut e, &Mat::row(&[0.0; 10]), &[1.0; 7]).unwrap();
        assert_eq!(r, Mat::identity(7));
        let mut res = [0.0; 10];
        res[2] = 0.5;
        res[4] = -1.0;
        let r = residual_to_obs_cov(&mut e, &Mat::row(&res), &[1.0; 7]).unwrap();
        assert_eq!(r.get(2, 2), 2.25);
        assert_eq!(r.get(4, 4), COV_FLOOR);
        assert_eq!(r.get(0, 1), 0.0);
    }

    #[test]
    fn init_cov_formula() {
        let mut e = Eval;
        let s = residual_to_init_cov(&mut e, &Mat::row(&[0.0; 10]), &[1.0; 10]).unwrap();
        assert_eq!(s, Mat::identity(10));
        let s = residual_to_init_cov(&mut e, &Mat::row(&[0.2; 10]), &[1.0; 10]).unwrap();
        for i in 0..10 {
            assert!((s.get(i, i) - 1.44).abs() < 1e-15);
        }
    }

    #[test]
    fn floor_blocks_gradient() {
        let mut t = Tape::new();
        let mut res = [0.3; 10];
        res[1] = -1.0;
        let r = t.param(Mat::row(&res));
        let cov = residual_to_obs_cov(&mut t, &r, &[1.0; 7]).unwrap();
        let total = t.sum(&cov);
        let g = t.backward(total).unwrap().get(r);
        assert_eq!(g.get(0, 1), 0.0);
        assert!((g.get(0, 0) - 2.0 * 1.3).abs() < 1e-12);
        // entries 7..10 do not feed R
        assert_eq!(g.get(0, 8), 0.0);
    }
}
