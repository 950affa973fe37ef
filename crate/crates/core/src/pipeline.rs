//! Cooperative tracking over one timestep: each CAV's detections are
//! associated against the current tracks and fused in turn, then the
//! lifecycle runs and every track is predicted to the next timestep.

use serde::{Deserialize, Serialize};

use crate::association::{associate, is_reported, lifecycle_step, LifecycleConfig};
use crate::autodiff::Graph;
use crate::covnet::{self, CovNetConfig, Layers, RESIDUAL_LEN};
use crate::error::{Error, Result};
use crate::features::{
    encode_positional, extract_positional, AppearanceStore, NormalizationBounds,
};
use crate::filter::{
    birth_state, predict, update, ObservationModel, ProcessModel, TrackState, DEFAULT_Q_DIAG,
    OBS_DIM, STATE_DIM,
};
use crate::geometry::{transform_box, Box7, PoseYawT};
use crate::linalg::Mat;

/// Bytes shared per detection: 7 box values and 10 residuals as 4-byte reals.
pub const BYTES_PER_DETECTION: usize = (OBS_DIM + RESIDUAL_LEN) * 4;

/// One detection in its CAV's local frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection", into = "RawDetection")]
pub struct Detection {
    pub bbox: Box7,
    /// Detector confidence in `(0, 1]`.
    pub confidence: f64,
    /// Standard-deviation residuals shared alongside the box; zero in raw logs.
    pub residual: [f64; RESIDUAL_LEN],
    /// Index into the run's [`AppearanceStore`].
    pub appearance: Option<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    #[serde(rename = "box")]
    bbox: Box7,
    confidence: f64,
    residual: [f64; RESIDUAL_LEN],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    appearance: Option<u32>,
}

impl TryFrom<RawDetection> for Detection {
    type Error = Error;

    fn try_from(r: RawDetection) -> Result<Self> {
        Detection::new(r.bbox, r.confidence, r.residual, r.appearance)
    }
}

impl From<Detection> for RawDetection {
    fn from(d: Detection) -> Self {
        RawDetection {
            bbox: d.bbox,
            confidence: d.confidence,
            residual: d.residual,
            appearance: d.appearance,
        }
    }
}

impl Detection {
    pub fn new(
        bbox: Box7,
        confidence: f64,
        residual: [f64; RESIDUAL_LEN],
        appearance: Option<u32>,
    ) -> Result<Self> {
        if !(confidence > 0.0 && confidence <= 1.0) {
            return Err(Error::Input(format!(
                "confidence must lie in (0, 1], got {confidence}"
            )));
        }
        if residual.iter().any(|r| !r.is_finite()) {
            return Err(Error::Input("residual has non-finite entries".into()));
        }
        Ok(Detection {
            bbox,
            confidence,
            residual,
            appearance,
        })
    }
}

/// Everything one CAV shares at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramePacket {
    pub timestep: u64,
    pub cav_id: u32,
    /// CAV local → global.
    pub pose: PoseYawT,
    pub detections: Vec<Detection>,
}

/// All packets of one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestep: u64,
    pub packets: Vec<FramePacket>,
}

impl Frame {
    pub fn num_detections(&self) -> usize {
        self.packets.iter().map(|p| p.detections.len()).sum()
    }

    /// The same frame restricted to the listed CAVs.
    pub fn only_cavs(&self, cavs: &[u32]) -> Frame {
        Frame {
            timestep: self.timestep,
            packets: self
                .packets
                .iter()
                .filter(|p| cavs.contains(&p.cav_id))
                .cloned()
                .collect(),
        }
    }
}

/// Groups packets into frames by timestep, preserving first-seen order.
pub fn group_frames(packets: Vec<FramePacket>) -> Vec<Frame> {
    let mut frames: Vec<Frame> = Vec::new();
    for p in packets {
        match frames.last_mut() {
            Some(f) if f.timestep == p.timestep => f.packets.push(p),
            _ => frames.push(Frame {
                timestep: p.timestep,
                packets: vec![p],
            }),
        }
    }
    frames
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub q_diag: [f64; STATE_DIM],
    /// Default observation noise diagonal `R_def`.
    pub r_default: [f64; OBS_DIM],
    /// Default initial covariance diagonal `Σ₀_def`.
    pub sigma0_default: [f64; STATE_DIM],
    pub assoc_threshold: f64,
    pub lifecycle: LifecycleConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            q_diag: DEFAULT_Q_DIAG,
            r_default: [1.0; OBS_DIM],
            sigma0_default: [1.0; STATE_DIM],
            assoc_threshold: 0.1,
            lifecycle: LifecycleConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        ProcessModel::constant_velocity(&self.q_diag)?;
        let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !positive(&self.r_default) || !positive(&self.sigma0_default) {
            return Err(Error::Config(
                "default covariance diagonals must be positive".into(),
            ));
        }
        if !(self.assoc_threshold > 0.0 && self.assoc_threshold < 1.0) {
            return Err(Error::Config(format!(
                "association threshold must lie in (0, 1), got {}",
                self.assoc_threshold
            )));
        }
        if !(self.lifecycle.score_decay > 0.0 && self.lifecycle.score_decay <= 1.0) {
            return Err(Error::Config("score decay must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Supplies the 1×10 residual row of a detection.
pub trait ResidualSource<G: Graph> {
    fn residual(
        &mut self,
        g: &mut G,
        packet: &FramePacket,
        index: usize,
        global: &Box7,
    ) -> Result<G::Node>;
}

/// Zero residuals: the constant-covariance tracker.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantResiduals;

impl<G: Graph> ResidualSource<G> for ConstantResiduals {
    fn residual(&mut self, g: &mut G, _: &FramePacket, _: usize, _: &Box7) -> Result<G::Node> {
        Ok(g.constant(Mat::zeros(1, RESIDUAL_LEN)))
    }
}

/// Residuals carried in the packets themselves.
#[derive(Debug, Clone, Copy, Default)]
pub struct PacketResiduals;

impl<G: Graph> ResidualSource<G> for PacketResiduals {
    fn residual(&mut self, g: &mut G, p: &FramePacket, index: usize, _: &Box7) -> Result<G::Node> {
        Ok(g.constant(Mat::row(&p.detections[index].residual)))
    }
}

/// Residuals computed by per-CAV covariance networks.
pub struct NetworkResiduals<'a, N> {
    pub nets: &'a [Layers<N>],
    pub config: &'a CovNetConfig,
    pub bounds: &'a NormalizationBounds,
    pub appearance: &'a AppearanceStore,
}

impl<'a, N> NetworkResiduals<'a, N> {
    fn net_for(&self, cav_id: u32) -> Result<&'a Layers<N>> {
        let idx = if self.config.shared_weights {
            0
        } else {
            cav_id as usize
        };
        self.nets.get(idx).ok_or_else(|| {
            Error::Shape(format!(
                "no covariance network for CAV {cav_id} ({} available)",
                self.nets.len()
            ))
        })
    }
}

impl<'a, G: Graph> ResidualSource<G> for NetworkResiduals<'a, G::Node> {
    fn residual(
        &mut self,
        g: &mut G,
        p: &FramePacket,
        index: usize,
        global: &Box7,
    ) -> Result<G::Node> {
        let det = &p.detections[index];
        let net = self.net_for(p.cav_id)?;
        let cfg = self.config;
        let app = if cfg.features.uses_appearance() {
            let idx = det.appearance.ok_or_else(|| {
                Error::Input(format!(
                    "detection {index} of CAV {} at t={} has no appearance feature",
                    p.cav_id, p.timestep
                ))
            })?;
            let f = self.appearance.get(idx)?;
            if f.shape != cfg.appearance {
                return Err(Error::Shape(format!(
                    "appearance shape {:?} does not match network input {:?}",
                    f.shape, cfg.appearance
                )));
            }
            f.to_mat()
        } else {
            Mat::zeros(0, 0)
        };
        let pos = if cfg.features.uses_positional() {
            let f = extract_positional(global, &det.bbox, &p.pose)?;
            encode_positional(&f, self.bounds, cfg.encoding_dim)?
        } else {
            Mat::zeros(0, 0)
        };
        let app = g.constant(app);
        let pos = g.constant(pos);
        covnet::forward(g, net, cfg, &app, &pos)
    }
}

/// One reported track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackReport {
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: Box7,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutput<N> {
    pub timestep: u64,
    pub reports: Vec<TrackReport>,
    /// Post-update 10×1 means of the reported tracks, aligned with `reports`.
    pub means: Vec<N>,
    pub comm_bytes: usize,
}

/// Tracker state carried between timesteps.
#[derive(Debug, Clone)]
pub struct Tracker<N> {
    pub tracks: Vec<TrackState<N>>,
    next_id: u64,
    /// Timesteps processed so far.
    frames: u64,
    process: ProcessModel,
    config: TrackerConfig,
}

impl<N: Clone> Tracker<N> {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Tracker {
            tracks: Vec::new(),
            next_id: 1,
            frames: 0,
            process: ProcessModel::constant_velocity(&config.q_diag)?,
            config,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Processes one timestep and returns its post-update results.
    pub fn step<G, S>(&mut self, g: &mut G, frame: &Frame, source: &mut S) -> Result<StepOutput<N>>
    where
        G: Graph<Node = N>,
        S: ResidualSource<G>,
    {
        let mut packets: Vec<&FramePacket> = frame.packets.iter().collect();
        packets.sort_by_key(|p| p.cav_id);
        for (k, p) in packets.iter().enumerate() {
            if p.timestep != frame.timestep {
                return Err(Error::Input(format!(
                    "packet from CAV {} has timestep {}, frame is {}",
                    p.cav_id, p.timestep, frame.timestep
                )));
            }
            if k > 0 && packets[k - 1].cav_id == p.cav_id {
                return Err(Error::Input(format!(
                    "duplicate packet from CAV {} at timestep {}",
                    p.cav_id, p.timestep
                )));
            }
        }

        let existing = self.tracks.len();
        let mut tracks = std::mem::take(&mut self.tracks);
        let mut hit = vec![false; existing];
        // best confidence seen by each track this timestep
        let mut best_conf: Vec<Option<f64>> = vec![None; existing];

        for packet in packets {
            let globals: Vec<Box7> = packet
                .detections
                .iter()
                .map(|d| transform_box(&d.bbox, &packet.pose))
                .collect();
            let mut residuals = Vec::with_capacity(globals.len());
            for (j, b) in globals.iter().enumerate() {
                residuals.push(source.residual(g, packet, j, b)?);
            }
            let track_boxes = tracks
                .iter()
                .map(|t| Box7::from_slice(&g.value(&t.mean).data()[..OBS_DIM]))
                .collect::<Result<Vec<_>>>()?;
            let assignment = associate(&track_boxes, &globals, self.config.assoc_threshold)?;

            for &(i, j, _) in &assignment.matches {
                let r = covnet::residual_to_obs_cov(g, &residuals[j], &self.config.r_default)?;
                let obs = globals[j].to_array();
                tracks[i] = update(g, &tracks[i], &obs, &ObservationModel { noise: r })?;
                let conf = packet.detections[j].confidence;
                if i < existing {
                    hit[i] = true;
                }
                best_conf[i] = Some(best_conf[i].map_or(conf, |c: f64| c.max(conf)));
            }
            for &j in &assignment.unmatched_detections {
                let s0 =
                    covnet::residual_to_init_cov(g, &residuals[j], &self.config.sigma0_default)?;
                let conf = packet.detections[j].confidence;
                tracks.push(birth_state(
                    g,
                    &globals[j].to_array(),
                    s0,
                    self.next_id,
                    conf,
                ));
                self.next_id += 1;
                best_conf.push(Some(conf));
            }
        }

        for (t, c) in tracks.iter_mut().zip(&best_conf) {
            if let Some(c) = c {
                t.score = *c;
            }
        }
        let births = tracks.split_off(existing);
        let outcome = lifecycle_step(tracks, &hit, births, &self.config.lifecycle);

        let mut reports = Vec::new();
        let mut means = Vec::new();
        for t in &outcome.tracks {
            if is_reported(t, self.frames, &self.config.lifecycle) {
                let bbox = Box7::from_slice(&g.value(&t.mean).data()[..OBS_DIM])?;
                reports.push(TrackReport {
                    id: t.id,
                    bbox,
                    score: t.score,
                });
                means.push(t.mean.clone());
            }
        }

        self.tracks = outcome
            .tracks
            .iter()
            .map(|t| predict(g, t, &self.process))
            .collect();
        self.frames += 1;

        Ok(StepOutput {
            timestep: frame.timestep,
            reports,
            means,
            comm_bytes: BYTES_PER_DETECTION * frame.num_detections(),
        })
    }
}

/// Runs a fresh tracker over `frames`, which must have strictly increasing
/// timesteps.
pub fn run_sequence<G, S>(
    g: &mut G,
    config: &TrackerConfig,
    frames: &[Frame],
    source: &mut S,
) -> Result<Vec<StepOutput<G::Node>>>
where
    G: Graph,
    S: ResidualSource<G>,
{
    let mut tracker = Tracker::new(config.clone())?;
    let mut out = Vec::with_capacity(frames.len());
    for (k, frame) in frames.iter().enumerate() {
        if k > 0 && frame.timestep <= frames[k - 1].timestep {
            return Err(Error::Input(format!(
                "frame {k}: timestep {} does not follow {}",
                frame.timestep,
                frames[k - 1].timestep
            )));
        }
        let step = tracker.step(g, frame, source).map_err(|e| match e {
            Error::Input(msg) => Error::Input(format!("frame {k}: {msg}")),
            other => other,
        })?;
        out.push(step);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eval;

    fn det(x: f64, y: f64, conf: f64) -> Detection {
        Detection::new(
            Box7::new(x, y, 0.0, 0.0, 4.0, 2.0, 1.5).unwrap(),
            conf,
            [0.0; 10],
            None,
        )
        .unwrap()
    }

    fn packet(t: u64, cav: u32, pose: PoseYawT, dets: Vec<Detection>) -> FramePacket {
        FramePacket {
            timestep: t,
            cav_id: cav,
            pose,
            detections: dets,
        }
    }

    #[test]
    fn confidence_zero_rejected() {
        let b = Box7::new(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        assert!(Detection::new(b, 0.0, [0.0; 10], None).is_err());
        assert!(Detection::new(b, 1.0, [0.0; 10], None).is_ok());
    }

    #[test]
    fn empty_sequence() {
        let out = run_sequence(
            &mut Eval,
            &TrackerConfig::default(),
            &[],
            &mut ConstantResiduals,
        )
        .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn zero_cavs_coast() {
        let mut tr: Tracker<Mat> = Tracker::new(TrackerConfig::default()).unwrap();
        let f0 = Frame {
            timestep: 0,
            packets: vec![packet(0, 0, PoseYawT::identity(), vec![det(5.0, 0.0, 0.9)])],
        };
        let out = tr.step(&mut Eval, &f0, &mut ConstantResiduals).unwrap();
        assert_eq!(out.reports.len(), 1);
        let f1 = Frame {
            timestep: 1,
            packets: vec![],
        };
        let out = tr.step(&mut Eval, &f1, &mut ConstantResiduals).unwrap();
        assert!(out.reports.is_empty());
        assert_eq!(tr.tracks.len(), 1);
        assert_eq!(tr.tracks[0].misses, 1);
        assert!((tr.tracks[0].score - 0.81).abs() < 1e-12);
    }

    #[test]
    fn mixed_timesteps_rejected() {
        let mut tr: Tracker<Mat> = Tracker::new(TrackerConfig::default()).unwrap();
        let f = Frame {
            timestep: 3,
            packets: vec![
                packet(3, 0, PoseYawT::identity(), vec![]),
                packet(4, 1, PoseYawT::identity(), vec![]),
            ],
        };
        assert!(matches!(
            tr.step(&mut Eval, &f, &mut ConstantResiduals),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn out_of_order_frames_name_index() {
        let frames = vec![
            Frame {
                timestep: 1,
                packets: vec![],
            },
            Frame {
                timestep: 1,
                packets: vec![],
            },
        ];
        let err = run_sequence(
            &mut Eval,
            &TrackerConfig::default(),
            &frames,
            &mut ConstantResiduals,
        )
        .unwrap_err();
        assert!(err.to_string().contains("frame 1"), "{err}");
    }

    #[test]
    fn second_cav_fuses_into_same_track() {
        // CAV 1 sits 10 m ahead and sees the same object at local x = 0.4
        let frame = Frame {
            timestep: 0,
            packets: vec![
                packet(
                    0,
                    1,
                    PoseYawT::new(10.0, 0.0, 0.0, 0.0),
                    vec![det(0.4, 0.0, 0.7)],
                ),
                packet(0, 0, PoseYawT::identity(), vec![det(10.0, 0.0, 0.9)]),
            ],
        };
        let out = run_sequence(
            &mut Eval,
            &TrackerConfig::default(),
            &[frame],
            &mut ConstantResiduals,
        )
        .unwrap();
        let r = &out[0].reports;
        assert_eq!(r.len(), 1);
        assert!(r[0].bbox.x > 10.0 && r[0].bbox.x < 10.4);
        assert_eq!(r[0].score, 0.9);
        assert_eq!(out[0].comm_bytes, 2 * 68);
    }

    #[test]
    fn noiseless_object_keeps_one_id() {
        let frames: Vec<Frame> = (0..10)
            .map(|t| Frame {
                timestep: t,
                packets: vec![packet(
                    t,
                    0,
                    PoseYawT::identity(),
                    vec![det(5.0 + 0.5 * t as f64, 1.0, 0.8)],
                )],
            })
            .collect();
        let out = run_sequence(
            &mut Eval,
            &TrackerConfig::default(),
            &frames,
            &mut ConstantResiduals,
        )
        .unwrap();
        for s in &out {
            assert_eq!(s.reports.len(), 1);
            assert_eq!(s.reports[0].id, 1);
        }
    }

    #[test]
    fn group_frames_by_timestep() {
        let ps = vec![
            packet(0, 0, PoseYawT::identity(), vec![]),
            packet(0, 1, PoseYawT::identity(), vec![]),
            packet(1, 0, PoseYawT::identity(), vec![]),
        ];
        let f = group_frames(ps);
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].packets.len(), 2);
    }
}
