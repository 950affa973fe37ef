//! CLEAR-style tracking metrics averaged over recall levels, and the
//! communication cost of sharing detections.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::association::hungarian_solve;
use crate::error::{Error, Result};
use crate::filter::OBS_DIM;
use crate::geometry::{iou3d, Box7};
use crate::linalg::Mat;
use crate::pipeline::{Frame, StepOutput, TrackReport, BYTES_PER_DETECTION};

pub const EVAL_IOU: f64 = 0.25;
pub const RECALL_LEVELS: usize = 40;
pub const MOSTLY_TRACKED: f64 = 0.8;
pub const MOSTLY_LOST: f64 = 0.2;
pub const BYTES_PER_MB: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub recall_levels: usize,
    pub mostly_tracked: f64,
    pub mostly_lost: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: EVAL_IOU,
            recall_levels: RECALL_LEVELS,
            mostly_tracked: MOSTLY_TRACKED,
            mostly_lost: MOSTLY_LOST,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0)
            || self.recall_levels == 0
            || !(0.0..=1.0).contains(&self.mostly_tracked)
            || !(0.0..=1.0).contains(&self.mostly_lost)
            || self.mostly_lost >= self.mostly_tracked
        {
            return Err(Error::Config(format!(
                "invalid evaluation config: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtObject {
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: Box7,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtFrame {
    pub timestep: u64,
    pub objects: Vec<GtObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackFrame {
    pub timestep: u64,
    pub tracks: Vec<TrackReport>,
}

impl<N> From<&StepOutput<N>> for TrackFrame {
    fn from(s: &StepOutput<N>) -> Self {
        TrackFrame {
            timestep: s.timestep,
            tracks: s.reports.clone(),
        }
    }
}

/// Matching result of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatch {
    /// `(track index, gt index, iou)`.
    pub tp: Vec<(usize, usize, f64)>,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
}

/// Hungarian matching on negated IoU; pairs below `theta` do not count.
/// `last_match` maps a GT id to the track id it was last matched with and
/// is updated in place; a change counts as an identity switch.
pub fn match_frame(
    tracks: &[TrackReport],
    gts: &[GtObject],
    theta: f64,
    last_match: &mut HashMap<u64, u64>,
) -> Result<FrameMatch> {
    let cost = Mat::from_fn(tracks.len(), gts.len(), |i, j| {
        -iou3d(&tracks[i].bbox, &gts[j].bbox)
    });
    let mut tp = Vec::new();
    let mut ids = 0;
    for (i, j) in hungarian_solve(&cost)? {
        let iou = -cost.get(i, j);
        if iou >= theta {
            tp.push((i, j, iou));
            let gt_id = gts[j].id;
            let trk_id = tracks[i].id;
            if let Some(prev) = last_match.insert(gt_id, trk_id) {
                if prev != trk_id {
                    ids += 1;
                }
            }
        }
    }
    Ok(FrameMatch {
        fp: tracks.len() - tp.len(),
        fn_: gts.len() - tp.len(),
        tp,
        ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub recall: f64,
    /// Score threshold reaching this recall; `None` if unreachable.
    pub threshold: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ids: usize,
    pub mota: f64,
    pub smota: f64,
    pub motp: f64,
}

/// Summary metrics, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub amota: f64,
    pub amotp: f64,
    pub samota: f64,
    pub mota: f64,
    pub mt: f64,
    pub ml: f64,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub id_switches: usize,
    pub per_recall: Vec<RecallRow>,
}

struct Pass {
    tp: usize,
    fp: usize,
    fn_: usize,
    ids: usize,
    iou_sum: f64,
    tp_scores: Vec<f64>,
    /// GT id → (frames present, frames matched).
    coverage: BTreeMap<u64, (usize, usize)>,
}

fn run_pass(frames: &[(&GtFrame, Vec<TrackReport>)], min_score: f64, iou: f64) -> Result<Pass> {
    let mut last = HashMap::new();
    let mut pass = Pass {
        tp: 0,
        fp: 0,
        fn_: 0,
        ids: 0,
        iou_sum: 0.0,
        tp_scores: Vec::new(),
        coverage: BTreeMap::new(),
    };
    for (gt, tracks) in frames {
        let kept: Vec<TrackReport> = tracks
            .iter()
            .filter(|t| t.score >= min_score)
            .cloned()
            .collect();
        let m = match_frame(&kept, &gt.objects, iou, &mut last)?;
        for o in &gt.objects {
            pass.coverage.entry(o.id).or_default().0 += 1;
        }
        for &(i, j, iou) in &m.tp {
            pass.iou_sum += iou;
            pass.tp_scores.push(kept[i].score);
            pass.coverage.entry(gt.objects[j].id).or_default().1 += 1;
        }
        pass.tp += m.tp.len();
        pass.fp += m.fp;
        pass.fn_ += m.fn_;
        pass.ids += m.ids;
    }
    Ok(pass)
}

/// [`evaluate_with`] at the default settings.
pub fn evaluate(tracks: &[TrackFrame], gt: &[GtFrame]) -> Result<EvalReport> {
    evaluate_with(tracks, gt, &EvalConfig::default())
}

/// Evaluates a track log against ground truth. Frames are aligned by
/// timestep; GT frames without a track frame count as frames with no tracks.
pub fn evaluate_with(
    tracks: &[TrackFrame],
    gt: &[GtFrame],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let levels = cfg.recall_levels;
    let num_gt: usize = gt.iter().map(|f| f.objects.len()).sum();
    if num_gt == 0 {
        return Err(Error::Evaluation("ground truth is empty".into()));
    }
    let mut by_time: HashMap<u64, &TrackFrame> = HashMap::new();
    for f in tracks {
        if by_time.insert(f.timestep, f).is_some() {
            return Err(Error::Evaluation(format!(
                "duplicate track frame at timestep {}",
                f.timestep
            )));
        }
    }
    let mut aligned = Vec::with_capacity(gt.len());
    for g in gt {
        let t = by_time
            .remove(&g.timestep)
            .map(|f| f.tracks.clone())
            .unwrap_or_default();
        aligned.push((g, t));
    }
    if let Some(t) = by_time.keys().min() {
        return Err(Error::Evaluation(format!(
            "track frame at timestep {t} has no ground-truth frame"
        )));
    }

    let full = run_pass(&aligned, f64::NEG_INFINITY, cfg.iou_threshold)?;
    let mut scores = full.tp_scores.clone();
    scores.sort_by(|a, b| b.total_cmp(a));

    let g = num_gt as f64;
    let mut per_recall = Vec::with_capacity(levels);
    for k in 1..=levels {
        let r = k as f64 / levels as f64;
        let need = (k * num_gt).div_ceil(levels);
        if need > scores.len() {
            per_recall.push(RecallRow {
                recall: r,
                threshold: None,
                tp: 0,
                fp: 0,
                fn_: num_gt,
                ids: 0,
                mota: 0.0,
                smota: 0.0,
                motp: 0.0,
            });
            continue;
        }
        let threshold = scores[need - 1];
        let p = run_pass(&aligned, threshold, cfg.iou_threshold)?;
        let errors = (p.fp + p.fn_ + p.ids) as f64;
        let mota = (1.0 - errors / g).max(0.0);
        let smota = (1.0 - (errors - (1.0 - r) * g) / (r * g)).clamp(0.0, 1.0);
        let motp = if p.tp > 0 {
            p.iou_sum / p.tp as f64
        } else {
            0.0
        };
        per_recall.push(RecallRow {
            recall: r,
            threshold: Some(threshold),
            tp: p.tp,
            fp: p.fp,
            fn_: p.fn_,
            ids: p.ids,
            mota,
            smota,
            motp,
        });
    }

    let mean =
        |f: fn(&RecallRow) -> f64| 100.0 * per_recall.iter().map(f).sum::<f64>() / levels as f64;
    let trajectories = full.coverage.len() as f64;
    let mt = full
        .coverage
        .values()
        .filter(|(n, m)| *m as f64 >= cfg.mostly_tracked * *n as f64)
        .count() as f64;
    let ml = full
        .coverage
        .values()
        .filter(|(n, m)| *m as f64 <= cfg.mostly_lost * *n as f64)
        .count() as f64;
    Ok(EvalReport {
        amota: mean(|r| r.mota),
        amotp: mean(|r| r.motp),
        samota: mean(|r| r.smota),
        mota: 100.0 * (1.0 - (full.fp + full.fn_ + full.ids) as f64 / g),
        mt: 100.0 * mt / trajectories,
        ml: 100.0 * ml / trajectories,
        num_gt,
        tp: full.tp,
        fp: full.fp,
        fn_: full.fn_,
        id_switches: full.ids,
        per_recall,
    })
}

/// Payload size relative to sharing boxes only.
pub fn payload_ratio() -> f64 {
    BYTES_PER_DETECTION as f64 / (OBS_DIM * 4) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommCost {
    pub frames: usize,
    pub detections: usize,
    pub bytes: usize,
    pub mb_total: f64,
    pub mb_per_frame: f64,
    pub ratio_vs_box_only: f64,
}

pub fn comm_cost(frames: &[Frame]) -> CommCost {
    let detections: usize = frames.iter().map(Frame::num_detections).sum();
    let bytes = detections * BYTES_PER_DETECTION;
    let mb_total = bytes as f64 / BYTES_PER_MB;
    CommCost {
        frames: frames.len(),
        detections,
        bytes,
        mb_total,
        mb_per_frame: if frames.is_empty() {
            0.0
        } else {
            mb_total / frames.len() as f64
        },
        ratio_vs_box_only: payload_ratio(),
    }
}

/// Scales a box-only per-frame cost to the box-plus-residual payload.
pub fn scale_box_only_cost(box_only_mb: f64) -> f64 {
    box_only_mb * payload_ratio()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> Box7 {
        Box7::new(x, 0.0, 0.0, 0.0, 4.0, 2.0, 1.5).unwrap()
    }

    fn trk(id: u64, x: f64, score: f64) -> TrackReport {
        TrackReport {
            id,
            bbox: b(x),
            score,
        }
    }

    fn gt_frame(t: u64, xs: &[(u64, f64)]) -> GtFrame {
        GtFrame {
            timestep: t,
            objects: xs
                .iter()
                .map(|&(id, x)| GtObject { id, bbox: b(x) })
                .collect(),
        }
    }

    #[test]
    fn exact_tracks_all_tp() {
        let g = gt_frame(0, &[(1, 0.0), (2, 10.0)]);
        let t = vec![trk(5, 0.0, 0.9), trk(6, 10.0, 0.9)];
        let m = match_frame(&t, &g.objects, EVAL_IOU, &mut HashMap::new()).unwrap();
        assert_eq!((m.tp.len(), m.fp, m.fn_, m.ids), (2, 0, 0, 0));
    }

    #[test]
    fn empty_tracks_all_fn() {
        let g = gt_frame(0, &[(1, 0.0), (2, 10.0)]);
        let m = match_frame(&[], &g.objects, EVAL_IOU, &mut HashMap::new()).unwrap();
        assert_eq!(m.fn_, 2);
    }

    #[test]
    fn identity_swap_counts_once() {
        // two objects; tracks 7 and 8 swap after frame 1, then stay swapped
        let gt: Vec<GtFrame> = (0..4)
            .map(|t| gt_frame(t, &[(1, 0.0), (2, 10.0)]))
            .collect();
        let tracks: Vec<TrackFrame> = (0..4)
            .map(|t| TrackFrame {
                timestep: t,
                tracks: if t < 2 {
                    vec![trk(7, 0.0, 0.9), trk(8, 10.0, 0.9)]
                } else {
                    vec![trk(8, 0.0, 0.9), trk(7, 10.0, 0.9)]
                },
            })
            .collect();
        let r = evaluate(&tracks, &gt).unwrap();
        assert_eq!(r.id_switches, 2);
        // only object 1 swaps
        let tracks: Vec<TrackFrame> = (0..4)
            .map(|t| TrackFrame {
                timestep: t,
                tracks: vec![trk(if t < 2 { 7 } else { 9 }, 0.0, 0.9), trk(8, 10.0, 0.9)],
            })
            .collect();
        assert_eq!(evaluate(&tracks, &gt).unwrap().id_switches, 1);
    }

    #[test]
    fn perfect_tracking() {
        let gt: Vec<GtFrame> = (0..5)
            .map(|t| gt_frame(t, &[(1, 0.0), (2, 10.0)]))
            .collect();
        let tracks: Vec<TrackFrame> = (0..5)
            .map(|t| TrackFrame {
                timestep: t,
                tracks: vec![trk(1, 0.0, 0.5), trk(2, 10.0, 0.5)],
            })
            .collect();
        let r = evaluate(&tracks, &gt).unwrap();
        assert_eq!(
            (r.amota, r.mota, r.samota, r.ml, r.mt),
            (100.0, 100.0, 100.0, 0.0, 100.0)
        );
        assert!((r.amotp - 100.0).abs() < 1e-9);
    }

    #[test]
    fn hand_built_mota_70() {
        // 10 GT boxes in one frame; 8 tracked, 2 missed, 1 false positive
        let xs: Vec<(u64, f64)> = (0..10).map(|k| (k, 10.0 * k as f64)).collect();
        let gt = vec![gt_frame(0, &xs)];
        let mut t: Vec<TrackReport> = (0..8).map(|k| trk(100 + k, 10.0 * k as f64, 0.9)).collect();
        t.push(trk(200, 500.0, 0.9));
        let r = evaluate(
            &[TrackFrame {
                timestep: 0,
                tracks: t,
            }],
            &gt,
        )
        .unwrap();
        assert!((r.mota - 70.0).abs() < 1e-12);
        assert_eq!((r.tp, r.fp, r.fn_, r.id_switches), (8, 1, 2, 0));
    }

    #[test]
    fn no_tracks_zero_amota() {
        let gt = vec![gt_frame(0, &[(1, 0.0)])];
        let r = evaluate(&[], &gt).unwrap();
        assert_eq!(r.amota, 0.0);
        assert_eq!(r.ml, 100.0);
    }

    #[test]
    fn empty_gt_is_an_error() {
        assert!(matches!(evaluate(&[], &[]), Err(Error::Evaluation(_))));
    }

    #[test]
    fn low_score_false_positive_is_filtered_at_low_recall() {
        let gt: Vec<GtFrame> = (0..4).map(|t| gt_frame(t, &[(1, 0.0)])).collect();
        let tracks: Vec<TrackFrame> = (0..4)
            .map(|t| TrackFrame {
                timestep: t,
                tracks: vec![trk(1, 0.0, 0.9 - 0.1 * t as f64), trk(2, 50.0, 0.05)],
            })
            .collect();
        let r = evaluate(&tracks, &gt).unwrap();
        let first = &r.per_recall[0];
        assert_eq!((first.tp, first.fp), (1, 0));
        assert!(r.amota <= r.samota);
    }

    #[test]
    fn comm_cost_arithmetic() {
        assert_eq!(comm_cost(&[]).mb_total, 0.0);
        assert!((payload_ratio() - 17.0 / 7.0).abs() < 1e-15);
        assert!((scale_box_only_cost(0.003) - 0.0072857142857).abs() < 1e-12);
    }
}
