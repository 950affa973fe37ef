//! Joint training of the per-CAV covariance networks through the whole
//! tracking pipeline.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, Graph, Tape};
use crate::covnet::{CovNetConfig, CovNetParams, Layers};
use crate::error::{Error, Result};
use crate::features::NormalizationBounds;
use crate::filter::OBS_DIM;
use crate::geometry::{wrap_angle, Box7};
use crate::linalg::Mat;
use crate::metrics::GtFrame;
use crate::pipeline::{run_sequence, NetworkResiduals, StepOutput, TrackerConfig};
use crate::sim::Sequence;

/// Distance used to find a track's ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchDistance {
    Center3d,
    Bev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Sub-sequence length in frames.
    pub window: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub gt_match_radius: f64,
    pub match_distance: MatchDistance,
    /// Windows whose gradients are averaged into one optimizer step.
    pub windows_per_step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: 10,
            lr: 1e-3,
            weight_decay: 1e-5,
            grad_clip_norm: 1.0,
            epochs: 20,
            gt_match_radius: 2.0,
            match_distance: MatchDistance::Center3d,
            windows_per_step: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.grad_clip_norm, self.gt_match_radius, self.eps];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || !(self.weight_decay >= 0.0)
            || self.window < 2
            || self.windows_per_step == 0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config(format!("invalid training config: {self:?}")));
        }
        Ok(())
    }
}

/// Consecutive non-overlapping windows of `len` frames; a shorter tail is
/// dropped.
pub fn split_subsequences(num_frames: usize, len: usize) -> Vec<Range<usize>> {
    assert!(len >= 2, "window length must be at least 2");
    (0..num_frames / len)
        .map(|k| k * len..(k + 1) * len)
        .collect()
}

/// Scalar loss together with the number of supervised track states.
#[derive(Debug, Clone)]
pub struct Loss<N> {
    pub value: Option<N>,
    pub supervised: usize,
}

impl<N> Loss<N> {
    pub fn is_supervised(&self) -> bool {
        self.supervised > 0
    }
}

/// Index of the closest GT object; ties go to the lower index.
fn nearest_gt(b: &Box7, gt: &GtFrame, metric: MatchDistance) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, o) in gt.objects.iter().enumerate() {
        let d = match metric {
            MatchDistance::Center3d => b.center_distance(&o.bbox),
            MatchDistance::Bev => b.bev_distance(&o.bbox),
        };
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best
}

/// Mean L2 distance between reported track boxes and their nearest GT
/// boxes, over tracks within the match radius. Yaw differences are wrapped.
pub fn window_loss<G: Graph>(
    g: &mut G,
    outputs: &[StepOutput<G::Node>],
    gt: &[GtFrame],
    cfg: &TrainConfig,
) -> Result<Loss<G::Node>> {
    if outputs.len() != gt.len() {
        return Err(Error::Input(format!(
            "{} tracker outputs for {} GT frames",
            outputs.len(),
            gt.len()
        )));
    }
    let mut terms = Vec::new();
    for (out, frame) in outputs.iter().zip(gt) {
        if out.timestep != frame.timestep {
            return Err(Error::Input(format!(
                "tracker output at t={} paired with GT at t={}",
                out.timestep, frame.timestep
            )));
        }
        for (report, mean) in out.reports.iter().zip(&out.means) {
            let Some((k, d)) = nearest_gt(&report.bbox, frame, cfg.match_distance) else {
                continue;
            };
            if d > cfg.gt_match_radius {
                continue;
            }
            let target = frame.objects[k].bbox.to_array();
            let mu = g.slice(mean, 0..OBS_DIM, 0..1);
            let raw_yaw = g.value(&mu).get(3, 0) - target[3];
            let mut shifted = target;
            shifted[3] -= wrap_angle(raw_yaw) - raw_yaw;
            let t = g.constant(Mat::col(&shifted));
            let diff = g.sub(&mu, &t);
            let sq = g.square(&diff);
            let ss = g.sum(&sq);
            terms.push(g.sqrt(&ss));
        }
    }
    let supervised = terms.len();
    if supervised == 0 {
        return Ok(Loss {
            value: None,
            supervised,
        });
    }
    let stacked = g.vstack(&terms);
    let total = g.sum(&stacked);
    Ok(Loss {
        value: Some(g.scale(&total, 1.0 / supervised as f64)),
        supervised,
    })
}

/// Everything needed to run the networks on one sequence.
pub struct NetContext<'a> {
    pub tracker: &'a TrackerConfig,
    pub covnet: &'a CovNetConfig,
    pub bounds: &'a NormalizationBounds,
    pub train: &'a TrainConfig,
}

/// Loss of one window evaluated without a tape.
pub fn window_loss_plain(
    nets: &[CovNetParams],
    seq: &Sequence,
    range: Range<usize>,
    ctx: &NetContext,
) -> Result<Loss<Mat>> {
    let mut source = NetworkResiduals {
        nets,
        config: ctx.covnet,
        bounds: ctx.bounds,
        appearance: &seq.appearance,
    };
    let out = run_sequence(
        &mut Eval,
        ctx.tracker,
        &seq.frames[range.clone()],
        &mut source,
    )?;
    window_loss(&mut Eval, &out, &seq.gt[range], ctx.train)
}

/// Loss and parameter gradients of one window.
pub fn window_gradient(
    nets: &[CovNetParams],
    seq: &Sequence,
    range: Range<usize>,
    ctx: &NetContext,
) -> Result<(f64, usize, Vec<CovNetParams>)> {
    let mut tape = Tape::new();
    let vars: Vec<Layers<_>> = nets.iter().map(|n| n.to_tape(&mut tape)).collect();
    let out = {
        let mut source = NetworkResiduals {
            nets: &vars,
            config: ctx.covnet,
            bounds: ctx.bounds,
            appearance: &seq.appearance,
        };
        run_sequence(
            &mut tape,
            ctx.tracker,
            &seq.frames[range.clone()],
            &mut source,
        )?
    };
    let loss = window_loss(&mut tape, &out, &seq.gt[range], ctx.train)?;
    let Some(node) = loss.value else {
        return Ok((
            0.0,
            0,
            nets.iter()
                .map(|n| n.map(|m| Mat::zeros(m.rows(), m.cols())))
                .collect(),
        ));
    };
    let value = tape.scalar(&node);
    let grads = tape.backward(node)?;
    let per_net = vars.iter().map(|v| v.map(|var| grads.get(*var))).collect();
    Ok((value, loss.supervised, per_net))
}

/// Global L2 norm over every tensor of every network.
pub fn global_norm(grads: &[CovNetParams]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|m| m.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [CovNetParams], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for m in g.as_mut_slice() {
                *m = m.scale(s);
            }
        }
    }
    norm
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<CovNetParams>,
    pub v: Vec<CovNetParams>,
}

impl AdamState {
    pub fn new(nets: &[CovNetParams]) -> Self {
        let zeros: Vec<CovNetParams> = nets
            .iter()
            .map(|n| n.map(|m| Mat::zeros(m.rows(), m.cols())))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One Adam step with L2 weight decay folded into the gradient.
    pub fn apply(&mut self, nets: &mut [CovNetParams], grads: &[CovNetParams], cfg: &TrainConfig) {
        self.step += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.step as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.step as i32);
        for (k, net) in nets.iter_mut().enumerate() {
            let params = net.as_mut_slice();
            let ms = self.m[k].as_mut_slice();
            let vs = self.v[k].as_mut_slice();
            for (((p, g), m), v) in params.into_iter().zip(grads[k].as_slice()).zip(ms).zip(vs) {
                let p = p.data_mut();
                let m = m.data_mut();
                let v = v.data_mut();
                for i in 0..p.len() {
                    let gi = g.data()[i] + cfg.weight_decay * p[i];
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                    let mh = m[i] / b1t;
                    let vh = v[i] / b2t;
                    p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowLoss {
    pub epoch: usize,
    /// Position in the epoch's shuffled order.
    pub position: usize,
    pub sequence: usize,
    pub start: usize,
    pub loss: f64,
    pub supervised: usize,
}

/// Parameters, optimizer state and history; everything needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub nets: Vec<CovNetParams>,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub window_losses: Vec<WindowLoss>,
    pub epoch_losses: Vec<f64>,
}

impl TrainState {
    pub fn init(covnet: &CovNetConfig, seed: u64) -> Result<Self> {
        covnet.validate()?;
        let nets: Vec<CovNetParams> = (0..covnet.parameter_sets())
            .map(|k| CovNetParams::init(covnet, seed.wrapping_add(k as u64)))
            .collect();
        Ok(TrainState {
            adam: AdamState::new(&nets),
            nets,
            epochs_done: 0,
            window_losses: Vec::new(),
            epoch_losses: Vec::new(),
        })
    }
}

/// Shuffled `(sequence, window)` order of one epoch.
fn epoch_order(windows: &[(usize, Range<usize>)], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Trains until `state.epochs_done == ctx.train.epochs`.
pub fn train(state: &mut TrainState, data: &[Sequence], ctx: &NetContext, seed: u64) -> Result<()> {
    let cfg = ctx.train;
    cfg.validate()?;
    for net in &state.nets {
        net.check_shapes(ctx.covnet)?;
    }
    let windows: Vec<(usize, Range<usize>)> = data
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| {
            split_subsequences(seq.frames.len(), cfg.window)
                .into_iter()
                .map(move |r| (s, r))
        })
        .collect();

    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done;
        let order = epoch_order(&windows, seed, epoch);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (batch_no, batch) in order.chunks(cfg.windows_per_step).enumerate() {
            let results: Vec<Result<(f64, usize, Vec<CovNetParams>)>> = batch
                .par_iter()
                .map(|&w| {
                    let (s, ref r) = windows[w];
                    window_gradient(&state.nets, &data[s], r.clone(), ctx)
                })
                .collect();
            let mut total: Option<Vec<CovNetParams>> = None;
            let mut supervised_windows = 0;
            for (k, res) in results.into_iter().enumerate() {
                let (loss, supervised, grads) = res?;
                let w = batch[k];
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { window: w });
                }
                let (s, ref r) = windows[w];
                state.window_losses.push(WindowLoss {
                    epoch,
                    position: batch_no * cfg.windows_per_step + k,
                    sequence: s,
                    start: r.start,
                    loss,
                    supervised,
                });
                if supervised == 0 {
                    continue;
                }
                supervised_windows += 1;
                sum += loss;
                count += 1;
                total = Some(match total {
                    None => grads,
                    Some(mut acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (am, gm) in a.as_mut_slice().into_iter().zip(g.as_slice()) {
                                am.add_assign(gm);
                            }
                        }
                        acc
                    }
                });
            }
            let Some(mut grads) = total else { continue };
            if supervised_windows > 1 {
                let s = 1.0 / supervised_windows as f64;
                for g in grads.iter_mut() {
                    for m in g.as_mut_slice() {
                        *m = m.scale(s);
                    }
                }
            }
            clip_global_norm(&mut grads, cfg.grad_clip_norm);
            state.adam.apply(&mut state.nets, &grads, cfg);
        }
        state
            .epoch_losses
            .push(if count > 0 { sum / count as f64 } else { 0.0 });
        state.epochs_done += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::GtObject;
    use crate::pipeline::TrackReport;

    fn b(x: f64) -> Box7 {
        Box7::new(x, 0.0, 0.0, 0.0, 4.0, 2.0, 1.5).unwrap()
    }

    fn step(t: u64, boxes: &[Box7]) -> StepOutput<Mat> {
        StepOutput {
            timestep: t,
            reports: boxes
                .iter()
                .enumerate()
                .map(|(k, bb)| TrackReport {
                    id: k as u64,
                    bbox: *bb,
                    score: 1.0,
                })
                .collect(),
            means: boxes
                .iter()
                .map(|bb| {
                    let mut v = bb.to_array().to_vec();
                    v.extend([0.0; 3]);
                    Mat::col(&v)
                })
                .collect(),
            comm_bytes: 0,
        }
    }

    fn gt(t: u64, boxes: &[Box7]) -> GtFrame {
        GtFrame {
            timestep: t,
            objects: boxes
                .iter()
                .enumerate()
                .map(|(k, bb)| GtObject {
                    id: k as u64,
                    bbox: *bb,
                })
                .collect(),
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_subsequences(25, 10), vec![0..10, 10..20]);
        assert_eq!(split_subsequences(10, 10), vec![0..10]);
        assert_eq!(split_subsequences(7105, 10).len(), 710);
    }

    #[test]
    fn exact_tracks_zero_loss() {
        let cfg = TrainConfig::default();
        let l = window_loss(&mut Eval, &[step(0, &[b(0.0)])], &[gt(0, &[b(0.0)])], &cfg).unwrap();
        assert_eq!(l.value.unwrap().get(0, 0), 0.0);
        assert_eq!(l.supervised, 1);
    }

    #[test]
    fn far_track_excluded() {
        let cfg = TrainConfig::default();
        let track = Box7::new(3.0, 4.0, 0.0, 0.0, 4.0, 2.0, 1.5).unwrap();
        let l = window_loss(&mut Eval, &[step(0, &[track])], &[gt(0, &[b(0.0)])], &cfg).unwrap();
        assert!(l.value.is_none());
        assert!(!l.is_supervised());
    }

    #[test]
    fn mean_of_norms() {
        let cfg = TrainConfig::default();
        let l = window_loss(
            &mut Eval,
            &[step(0, &[b(0.3), b(20.5)])],
            &[gt(0, &[b(0.0), b(20.0)])],
            &cfg,
        )
        .unwrap();
        assert!((l.value.unwrap().get(0, 0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn yaw_difference_is_wrapped() {
        let cfg = TrainConfig::default();
        let t = Box7::new(0.0, 0.0, 0.0, 3.1, 4.0, 2.0, 1.5).unwrap();
        let g = Box7::new(0.0, 0.0, 0.0, -3.1, 4.0, 2.0, 1.5).unwrap();
        let l = window_loss(&mut Eval, &[step(0, &[t])], &[gt(0, &[g])], &cfg).unwrap();
        let want = 2.0 * std::f64::consts::PI - 6.2;
        assert!((l.value.unwrap().get(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn clip_to_unit_norm() {
        let cfg = CovNetConfig::default();
        let mut g = vec![CovNetParams::zeros(&cfg)];
        g[0].head2_b = Mat::row(&[3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-9);
        assert!((g[0].head2_b.get(0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_leaves_params() {
        let covnet = CovNetConfig::default();
        let mut state = TrainState::init(&covnet, 1).unwrap();
        let before = state.nets.clone();
        let tracker = TrackerConfig::default();
        let bounds = NormalizationBounds::default();
        let train_cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let ctx = NetContext {
            tracker: &tracker,
            covnet: &covnet,
            bounds: &bounds,
            train: &train_cfg,
        };
        train(&mut state, &[], &ctx, 1).unwrap();
        assert_eq!(state.nets, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let covnet = CovNetConfig::default();
        let mut nets = vec![CovNetParams::zeros(&covnet)];
        let mut grads = vec![CovNetParams::zeros(&covnet)];
        grads[0].head2_b.set(0, 2, -0.5);
        let mut adam = AdamState::new(&nets);
        adam.apply(&mut nets, &grads, &TrainConfig::default());
        assert!((nets[0].head2_b.get(0, 2) - 1e-3).abs() < 1e-9);
        assert_eq!(nets[0].head2_b.get(0, 1), 0.0);
    }
}
