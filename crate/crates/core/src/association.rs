//! IoU-based track/detection matching and track lifecycle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::TrackState;
use crate::geometry::{iou3d, Box7};
use crate::linalg::Mat;

/// Result of matching one CAV's detections against the current tracks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    /// `(track index, detection index, iou)`
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Entry `(i, j)` is `-iou3d(tracks[i], detections[j])`.
pub fn build_cost_matrix(tracks: &[Box7], detections: &[Box7]) -> Mat {
    Mat::from_fn(tracks.len(), detections.len(), |i, j| {
        -iou3d(&tracks[i], &detections[j])
    })
}

/// Minimum-cost assignment on the cost matrix zero-padded to square.
/// Returns the `(row, col)` pairs that involve real rows and columns,
/// sorted by row.
pub fn hungarian_solve(cost: &Mat) -> Result<Vec<(usize, usize)>> {
    if !cost.is_finite() {
        return Err(Error::Input("cost matrix has non-finite entries".into()));
    }
    let (rows, cols) = cost.shape();
    let n = rows.max(cols);
    if n == 0 {
        return Ok(Vec::new());
    }
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost.get(i, j)
        } else {
            0.0
        }
    };

    // Shortest augmenting path with row/column potentials, 1-based with a
    // virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| p[j] != 0 && p[j] - 1 < rows && j - 1 < cols)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// Hungarian matching on negated IoU; matches below `threshold` are
/// demoted to unmatched on both sides.
pub fn associate(tracks: &[Box7], detections: &[Box7], threshold: f64) -> Result<Assignment> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "association threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let cost = build_cost_matrix(tracks, detections);
    let pairs = hungarian_solve(&cost)?;
    let mut track_used = vec![false; tracks.len()];
    let mut det_used = vec![false; detections.len()];
    let mut matches = Vec::new();
    for (i, j) in pairs {
        let iou = -cost.get(i, j);
        if iou >= threshold {
            track_used[i] = true;
            det_used[j] = true;
            matches.push((i, j, iou));
        }
    }
    Ok(Assignment {
        matches,
        unmatched_tracks: (0..tracks.len()).filter(|i| !track_used[*i]).collect(),
        unmatched_detections: (0..detections.len()).filter(|j| !det_used[*j]).collect(),
    })
}

/// Track birth/death constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifecycleConfig {
    pub min_hits: u32,
    pub max_age: u32,
    /// Multiplier applied to a track's score on a missed timestep.
    pub score_decay: f64,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        LifecycleConfig {
            min_hits: 3,
            max_age: 2,
            score_decay: 0.9,
        }
    }
}

#[derive(Debug)]
pub struct LifecycleOutcome<N> {
    /// Surviving pre-existing tracks followed by the newborn ones.
    pub tracks: Vec<TrackState<N>>,
    pub birthed: Vec<u64>,
    pub killed: Vec<u64>,
}

/// End-of-timestep bookkeeping. `matched[i]` says whether `existing[i]` was
/// matched by any CAV during the timestep; `births` are tracks created
/// from unmatched detections during the timestep.
pub fn lifecycle_step<N>(
    existing: Vec<TrackState<N>>,
    matched: &[bool],
    births: Vec<TrackState<N>>,
    config: &LifecycleConfig,
) -> LifecycleOutcome<N> {
    assert_eq!(existing.len(), matched.len(), "lifecycle_step: flag count");
    let mut tracks = Vec::with_capacity(existing.len() + births.len());
    let mut killed = Vec::new();
    for (mut t, hit) in existing.into_iter().zip(matched) {
        if *hit {
            t.hits += 1;
            t.misses = 0;
        } else {
            t.misses += 1;
            t.score *= config.score_decay;
        }
        if t.misses > config.max_age {
            killed.push(t.id);
        } else {
            tracks.push(t);
        }
    }
    let birthed = births.iter().map(|t| t.id).collect();
    tracks.extend(births);
    LifecycleOutcome {
        tracks,
        birthed,
        killed,
    }
}

/// Whether a track is emitted in this timestep's output: it must have been
/// updated this timestep and be confirmed, unless `frame` (0-based index of
/// the timestep within the sequence) is still below `min_hits`.
pub fn is_reported<N>(t: &TrackState<N>, frame: u64, config: &LifecycleConfig) -> bool {
    t.misses == 0 && (t.hits >= config.min_hits || frame < u64::from(config.min_hits))
}
