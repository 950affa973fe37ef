//! Synthetic two-CAV highway scenarios with heteroscedastic detection noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{synth_appearance, AppearanceShape, AppearanceStore, SensingContext};
use crate::geometry::{inverse_pose, transform_box, wrap_angle, Box7, PoseYawT};
use crate::metrics::{GtFrame, GtObject};
use crate::pipeline::{Detection, Frame, FramePacket};

/// Per-frame miss probability for one object, overriding the occlusion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissOverride {
    pub object: u64,
    pub miss_prob: f64,
}

/// Box-level detector model of one CAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorModel {
    /// Noise std of `(x, y, z, a, l, w, h)` at zero range.
    pub base_std: [f64; 7],
    /// Relative std growth per meter of range.
    pub dist_coef: f64,
    pub far_range: f64,
    /// Extra std multiplier beyond `far_range`.
    pub far_gain: f64,
    pub max_range: f64,
    pub base_miss: f64,
    /// Added miss probability per unit of blockage.
    pub blockage_miss: f64,
    /// Relative std growth per unit of blockage.
    pub occlusion_noise_gain: f64,
    /// Probability of one false positive per frame.
    pub fp_rate: f64,
    /// Confidence is `exp(-confidence_scale * std_x)`.
    pub confidence_scale: f64,
    pub miss_overrides: Vec<MissOverride>,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            base_std: [0.15, 0.15, 0.05, 0.04, 0.12, 0.06, 0.05],
            dist_coef: 0.02,
            far_range: 30.0,
            far_gain: 1.0,
            max_range: 50.0,
            base_miss: 0.03,
            blockage_miss: 0.3,
            occlusion_noise_gain: 1.0,
            fp_rate: 0.3,
            confidence_scale: 2.0,
            miss_overrides: Vec::new(),
        }
    }
}

impl SensorModel {
    pub fn noiseless() -> Self {
        SensorModel {
            base_std: [0.0; 7],
            dist_coef: 0.0,
            far_gain: 1.0,
            max_range: f64::INFINITY,
            base_miss: 0.0,
            blockage_miss: 0.0,
            occlusion_noise_gain: 0.0,
            fp_rate: 0.0,
            ..SensorModel::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.base_miss, self.blockage_miss, self.fp_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r))
            || self
                .miss_overrides
                .iter()
                .any(|o| !(0.0..=1.0).contains(&o.miss_prob))
        {
            return Err(Error::Config("sensor rates must lie in [0, 1]".into()));
        }
        let nonneg = [
            self.dist_coef,
            self.occlusion_noise_gain,
            self.confidence_scale,
            self.far_range,
        ];
        if self
            .base_std
            .iter()
            .chain(&nonneg)
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return Err(Error::Config(
                "sensor stds and coefficients must be finite and >= 0".into(),
            ));
        }
        if !(self.far_gain >= 1.0 && self.far_gain.is_finite()) || !(self.max_range > 0.0) {
            return Err(Error::Config(
                "far gain must be >= 1 and max range positive".into(),
            ));
        }
        Ok(())
    }

    /// Noise std of every box variable for a detection at `range` with the
    /// given blockage fraction.
    pub fn std_at(&self, range: f64, blockage: f64) -> [f64; 7] {
        let far = if range > self.far_range {
            self.far_gain
        } else {
            1.0
        };
        let k = (1.0 + self.dist_coef * range) * far * (1.0 + self.occlusion_noise_gain * blockage);
        self.base_std.map(|s| s * k)
    }

    pub fn miss_prob(&self, object: u64, blockage: f64) -> f64 {
        match self.miss_overrides.iter().find(|o| o.object == object) {
            Some(o) => o.miss_prob,
            None => (self.base_miss + self.blockage_miss * blockage).min(1.0),
        }
    }

    pub fn confidence(&self, std_x: f64) -> f64 {
        (-self.confidence_scale * std_x).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub id: u64,
    /// Global box per frame.
    pub boxes: Vec<Box7>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavTrack {
    pub cav_id: u32,
    /// Local → global pose per frame.
    pub poses: Vec<PoseYawT>,
    pub sensor: SensorModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Frame count at 10 Hz.
    pub duration: usize,
    pub objects: Vec<ObjectTrack>,
    pub cavs: Vec<CavTrack>,
    pub appearance: AppearanceShape,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        for o in &self.objects {
            if o.boxes.len() != self.duration {
                return Err(Error::Input(format!(
                    "object {} has {} boxes for {} frames",
                    o.id,
                    o.boxes.len(),
                    self.duration
                )));
            }
        }
        for c in &self.cavs {
            c.sensor.validate()?;
            if c.poses.len() != self.duration {
                return Err(Error::Input(format!(
                    "CAV {} has {} poses for {} frames",
                    c.cav_id,
                    c.poses.len(),
                    self.duration
                )));
            }
            for w in c.poses.windows(2) {
                let step = (w[1].tx - w[0].tx)
                    .hypot(w[1].ty - w[0].ty)
                    .hypot(w[1].tz - w[0].tz);
                if !(step < 5.0) {
                    return Err(Error::Input(format!(
                        "CAV {} jumps {step:.2} m between frames",
                        c.cav_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ground truth, per-CAV detections, and their appearance tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub gt: Vec<GtFrame>,
    pub frames: Vec<Frame>,
    pub appearance: AppearanceStore,
}

/// Fraction of `b`'s bearing interval, seen from the origin, covered by
/// the intervals of `occluders`.
fn blockage(b: &Box7, occluders: &[Box7]) -> f64 {
    let span = |x: &Box7| {
        let center = x.y.atan2(x.x);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for [cx, cy] in x.bev_corners() {
            let d = wrap_angle(cy.atan2(cx) - center);
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (center, lo, hi)
    };
    let (center, lo, hi) = span(b);
    let width = hi - lo;
    if !(width > 0.0) {
        return 0.0;
    }
    let mut covered: Vec<(f64, f64)> = occluders
        .iter()
        .filter_map(|o| {
            let (c, l, h) = span(o);
            let shift = wrap_angle(c - center);
            let (a, z) = ((shift + l).max(lo), (shift + h).min(hi));
            (z > a).then_some((a, z))
        })
        .collect();
    covered.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut total = 0.0;
    let mut end = lo;
    for (a, z) in covered {
        let a = a.max(end);
        if z > a {
            total += z - a;
            end = z;
        }
    }
    (total / width).clamp(0.0, 1.0)
}

fn sample_noisy_box<R: Rng>(local: &Box7, std: &[f64; 7], rng: &mut R) -> Result<Box7> {
    let mut v = local.to_array();
    for k in 0..7 {
        if std[k] == 0.0 {
            continue;
        }
        let n = Normal::new(0.0, std[k]).map_err(|e| Error::Input(e.to_string()))?;
        if k < 4 {
            v[k] += n.sample(rng);
        } else {
            // truncated: resample until the extent stays positive
            loop {
                let e = v[k] + n.sample(rng);
                if e > 0.05 * v[k] {
                    v[k] = e;
                    break;
                }
            }
        }
    }
    Box7::new(v[0], v[1], v[2], wrap_angle(v[3]), v[4], v[5], v[6])
}

/// Renders per-CAV detections for every frame of the scenario.
pub fn generate(scenario: &Scenario) -> Result<Sequence> {
    render(scenario).map(|(seq, _)| seq)
}

/// Mean per-frame fraction of GT objects that received a detection from at least one CAV.
pub fn coverage(scenario: &Scenario) -> Result<f64> {
    render(scenario).map(|(_, c)| c)
}

fn render(scenario: &Scenario) -> Result<(Sequence, f64)> {
    scenario.validate()?;
    let mut covered = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut store = AppearanceStore::new(scenario.appearance);
    let mut gt = Vec::with_capacity(scenario.duration);
    let mut frames = Vec::with_capacity(scenario.duration);
    let mut cavs: Vec<&CavTrack> = scenario.cavs.iter().collect();
    cavs.sort_by_key(|c| c.cav_id);

    for t in 0..scenario.duration {
        gt.push(GtFrame {
            timestep: t as u64,
            objects: scenario
                .objects
                .iter()
                .map(|o| GtObject {
                    id: o.id,
                    bbox: o.boxes[t],
                })
                .collect(),
        });
        let mut packets = Vec::with_capacity(cavs.len());
        let mut seen = vec![false; scenario.objects.len()];
        for cav in &cavs {
            let pose = cav.poses[t];
            let to_local = inverse_pose(&pose);
            let sensor = &cav.sensor;
            let locals: Vec<Box7> = scenario
                .objects
                .iter()
                .map(|o| transform_box(&o.boxes[t], &to_local))
                .collect();
            let ranges: Vec<f64> = locals.iter().map(|b| b.x.hypot(b.y)).collect();
            let mut detections = Vec::new();
            for (k, obj) in scenario.objects.iter().enumerate() {
                if ranges[k] > sensor.max_range {
                    continue;
                }
                let nearer: Vec<Box7> = (0..locals.len())
                    .filter(|&m| m != k && ranges[m] < ranges[k])
                    .map(|m| locals[m])
                    .collect();
                let blocked = blockage(&locals[k], &nearer);
                let p_miss = sensor.miss_prob(obj.id, blocked);
                if p_miss > 0.0 && rng.random::<f64>() < p_miss {
                    continue;
                }
                let std = sensor.std_at(ranges[k], blocked);
                let bbox = sample_noisy_box(&locals[k], &std, &mut rng)?;
                let ctx = SensingContext {
                    range: ranges[k],
                    blockage: blocked,
                    noise_scale: std[0],
                };
                let app = synth_appearance(&ctx, scenario.appearance, &mut rng);
                let idx = store.push(&app)?;
                seen[k] = true;
                detections.push(Detection::new(
                    bbox,
                    sensor.confidence(std[0]),
                    [0.0; 10],
                    Some(idx),
                )?);
            }
            if sensor.fp_rate > 0.0 && rng.random::<f64>() < sensor.fp_rate {
                let radius = if sensor.max_range.is_finite() {
                    sensor.max_range
                } else {
                    50.0
                };
                let r = radius * rng.random::<f64>().sqrt();
                let phi = rng.random_range(-PI..PI);
                let bbox = Box7::new(
                    r * phi.cos(),
                    r * phi.sin(),
                    rng.random_range(0.5..1.0),
                    rng.random_range(-PI..PI),
                    rng.random_range(3.5..5.0),
                    rng.random_range(1.6..2.1),
                    rng.random_range(1.3..1.8),
                )?;
                let ctx = SensingContext {
                    range: r,
                    blockage: rng.random(),
                    noise_scale: sensor.std_at(r, 1.0)[0].max(sensor.base_std[0]),
                };
                let app = synth_appearance(&ctx, scenario.appearance, &mut rng);
                let idx = store.push(&app)?;
                let conf = rng.random_range(0.05..0.25);
                detections.push(Detection::new(bbox, conf, [0.0; 10], Some(idx))?);
            }
            packets.push(FramePacket {
                timestep: t as u64,
                cav_id: cav.cav_id,
                pose,
                detections,
            });
        }
        frames.push(Frame {
            timestep: t as u64,
            packets,
        });
        covered += if seen.is_empty() {
            1.0
        } else {
            seen.iter().filter(|&&s| s).count() as f64 / seen.len() as f64
        };
    }
    let cov = if scenario.duration == 0 {
        1.0
    } else {
        covered / scenario.duration as f64
    };
    let seq = Sequence {
        gt,
        frames,
        appearance: store,
    };
    Ok((seq, cov))
}

/// Knobs of the canonical two-CAV highway scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub duration: usize,
    pub num_objects: usize,
    /// Longitudinal gap between the two CAVs.
    pub cav_gap: f64,
    /// CAV speed in meters per frame.
    pub cav_speed: f64,
    /// Maximum object speed offset relative to the CAVs, meters per frame.
    pub relative_speed: f64,
    /// Probability that an object keeps changing lanes.
    pub lane_change_prob: f64,
    /// Frames between the starts of consecutive lane changes.
    pub lane_change_interval: usize,
    /// Duration of each turn segment of a lane change.
    pub lane_change_frames: usize,
    pub road_heading: f64,
    pub noiseless: bool,
    pub sensors: Vec<SensorModel>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let near = SensorModel {
            base_std: [0.3, 0.3, 0.1, 0.08, 0.24, 0.12, 0.1],
            dist_coef: 0.03,
            base_miss: 0.01,
            blockage_miss: 0.1,
            ..SensorModel::default()
        };
        let far = SensorModel {
            far_gain: 3.0,
            blockage_miss: 0.2,
            occlusion_noise_gain: 2.0,
            ..near.clone()
        };
        ScenarioConfig {
            duration: 200,
            num_objects: 12,
            cav_gap: 50.0,
            cav_speed: 0.55,
            relative_speed: 0.06,
            lane_change_prob: 0.3,
            lane_change_interval: 200,
            lane_change_frames: 15,
            road_heading: 0.2,
            noiseless: false,
            sensors: vec![near, far],
        }
    }
}

const LANES: [f64; 5] = [-7.0, -3.5, 0.0, 3.5, 7.0];
const MIN_LONGITUDINAL_GAP: f64 = 7.0;
const MIN_LATERAL_GAP: f64 = 3.0;

/// Road-frame `(s, lateral, heading)` samples of one vehicle.
struct RoadPath {
    points: Vec<(f64, f64, f64)>,
}

impl RoadPath {
    fn straight(s0: f64, lateral: f64, speed: f64, n: usize) -> Self {
        RoadPath {
            points: (0..n)
                .map(|t| (s0 + speed * t as f64, lateral, 0.0))
                .collect(),
        }
    }

    /// Constant-velocity driving with lane changes. Each change starts at
    /// the given frame and is built from a left and a right constant-turn
    /// segment of `half` frames each, shifting the lateral offset by `shift`.
    fn weaving(
        s0: f64,
        lateral: f64,
        speed: f64,
        n: usize,
        changes: &[(usize, f64)],
        half: usize,
    ) -> Self {
        let (mut s, mut l, mut h) = (s0, lateral, 0.0_f64);
        let mut omega = 0.0;
        let mut points = Vec::with_capacity(n);
        for t in 0..n {
            points.push((s, l, h));
            s += speed * h.cos();
            l += speed * h.sin();
            if let Some(&(start, shift)) =
                changes.iter().find(|(st, _)| t >= *st && t < st + 2 * half)
            {
                if t == start {
                    omega = (shift / (speed * (half * half) as f64)).clamp(-0.1, 0.1);
                }
                h += if t < start + half { omega } else { -omega };
                if t + 1 == start + 2 * half {
                    h = 0.0;
                }
            }
        }
        RoadPath { points }
    }

    fn conflicts(&self, other: &RoadPath) -> bool {
        self.points.iter().zip(&other.points).any(|(a, b)| {
            (a.0 - b.0).abs() < MIN_LONGITUDINAL_GAP && (a.1 - b.1).abs() < MIN_LATERAL_GAP
        })
    }
}

fn road_to_global(heading: f64, s: f64, l: f64) -> (f64, f64) {
    let (sn, cs) = heading.sin_cos();
    (cs * s - sn * l, sn * s + cs * l)
}

/// The canonical scenario: two CAVs driving together about 50 m apart on a
/// five-lane road with twelve surrounding vehicles. The second CAV's sensor
/// is three times noisier beyond 30 m and suffers heavier occlusion.
pub fn preset_v2v_mini(seed: u64) -> Result<Scenario> {
    scenario_from_config(&ScenarioConfig::default(), AppearanceShape::default(), seed)
}

/// [`preset_v2v_mini`] with perfect sensors.
pub fn preset_v2v_mini_noiseless(seed: u64) -> Result<Scenario> {
    let cfg = ScenarioConfig {
        noiseless: true,
        ..ScenarioConfig::default()
    };
    scenario_from_config(&cfg, AppearanceShape::default(), seed)
}

pub fn scenario_from_config(
    cfg: &ScenarioConfig,
    appearance: AppearanceShape,
    seed: u64,
) -> Result<Scenario> {
    if cfg.sensors.is_empty() {
        return Err(Error::Config("scenario needs at least one sensor".into()));
    }
    if cfg.duration == 0 || !(cfg.cav_speed >= 0.0 && cfg.cav_speed < 5.0) {
        return Err(Error::Config(
            "scenario duration and CAV speed out of range".into(),
        ));
    }
    let n = cfg.duration;
    let mut layout_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a70);
    let cav_paths: Vec<RoadPath> = (0..cfg.sensors.len())
        .map(|k| RoadPath::straight(k as f64 * cfg.cav_gap, 0.0, cfg.cav_speed, n))
        .collect();
    let s_lo = -0.7 * cfg.cav_gap;
    let s_hi = (cfg.sensors.len() as f64 - 1.0) * cfg.cav_gap + 0.7 * cfg.cav_gap;

    let mut paths: Vec<RoadPath> = Vec::new();
    let mut attempts = 0;
    while paths.len() < cfg.num_objects {
        attempts += 1;
        if attempts > 20_000 {
            return Err(Error::Config(format!(
                "could not place {} objects without conflicts",
                cfg.num_objects
            )));
        }
        let lane = layout_rng.random_range(0..LANES.len());
        let s0 = layout_rng.random_range(s_lo..s_hi);
        let speed = cfg.cav_speed
            + if cfg.relative_speed > 0.0 {
                layout_rng.random_range(-cfg.relative_speed..cfg.relative_speed)
            } else {
                0.0
            };
        let weaves = layout_rng.random::<f64>() < cfg.lane_change_prob;
        let half = cfg.lane_change_frames;
        let mut changes = Vec::new();
        if weaves && speed > 0.1 && half > 0 && n > 2 * half {
            let mut cur = lane;
            let mut start = layout_rng.random_range(0..cfg.lane_change_interval.max(1));
            while start + 2 * half < n {
                let target = if cur == 0 || (cur < LANES.len() - 1 && layout_rng.random::<bool>()) {
                    cur + 1
                } else {
                    cur - 1
                };
                changes.push((start, LANES[target] - LANES[cur]));
                cur = target;
                start += (2 * half).max(cfg.lane_change_interval);
            }
        }
        let path = RoadPath::weaving(s0, LANES[lane], speed, n, &changes, half);
        if cav_paths.iter().chain(&paths).any(|p| p.conflicts(&path)) {
            continue;
        }
        paths.push(path);
    }

    let mut objects = Vec::with_capacity(paths.len());
    for (k, p) in paths.iter().enumerate() {
        let l = layout_rng.random_range(3.8..4.8);
        let w = layout_rng.random_range(1.7..2.0);
        let h = layout_rng.random_range(1.4..1.7);
        let boxes = p
            .points
            .iter()
            .map(|&(s, lat, hd)| {
                let (x, y) = road_to_global(cfg.road_heading, s, lat);
                Box7::new(x, y, h / 2.0, wrap_angle(cfg.road_heading + hd), l, w, h)
            })
            .collect::<Result<Vec<_>>>()?;
        objects.push(ObjectTrack {
            id: k as u64 + 1,
            boxes,
        });
    }

    let cavs = cfg
        .sensors
        .iter()
        .zip(&cav_paths)
        .enumerate()
        .map(|(k, (sensor, path))| CavTrack {
            cav_id: k as u32,
            poses: path
                .points
                .iter()
                .map(|&(s, lat, _)| {
                    let (x, y) = road_to_global(cfg.road_heading, s, lat);
                    PoseYawT::new(x, y, 0.0, cfg.road_heading)
                })
                .collect(),
            sensor: if cfg.noiseless {
                SensorModel::noiseless()
            } else {
                sensor.clone()
            },
        })
        .collect();

    Ok(Scenario {
        duration: n,
        objects,
        cavs,
        appearance,
        seed,
    })
}
