//! Oriented 3D boxes, yaw-only rigid transforms and rotated-box 3D IoU.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// BEV intersections below this area are treated as empty.
const AREA_EPS: f64 = 1e-12;

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = a - two_pi * ((a + PI) / two_pi).floor();
    // floor rounding can land exactly on +π
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}

/// Oriented 3D bounding box: center, yaw about z, and extents
/// (`l` along the heading).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct Box7 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub a: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    x: f64,
    y: f64,
    z: f64,
    a: f64,
    l: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for Box7 {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        Box7::new(r.x, r.y, r.z, r.a, r.l, r.w, r.h)
    }
}

impl From<Box7> for RawBox {
    fn from(b: Box7) -> Self {
        RawBox {
            x: b.x,
            y: b.y,
            z: b.z,
            a: b.a,
            l: b.l,
            w: b.w,
            h: b.h,
        }
    }
}

impl Box7 {
    /// Validating constructor; the yaw is wrapped into `[-π, π)`.
    pub fn new(x: f64, y: f64, z: f64, a: f64, l: f64, w: f64, h: f64) -> Result<Self> {
        let vals = [x, y, z, a, l, w, h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite box entry in {vals:?}")));
        }
        if !(l > 0.0 && w > 0.0 && h > 0.0) {
            return Err(Error::Input(format!(
                "box extents must be positive (l={l}, w={w}, h={h})"
            )));
        }
        Ok(Box7 {
            x,
            y,
            z,
            a: wrap_angle(a),
            l,
            w,
            h,
        })
    }

    /// Builds a box from a 7-vector `(x, y, z, a, l, w, h)`.
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 7 {
            return Err(Error::Shape(format!(
                "box needs 7 entries, got {}",
                v.len()
            )));
        }
        Box7::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.a, self.l, self.w, self.h]
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn center_distance(&self, other: &Box7) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2))
            .sqrt()
    }

    pub fn bev_distance(&self, other: &Box7) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// BEV footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.a.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.x + c * u - s * v, self.y + s * u + c * v])
    }

    /// True if the point lies inside the box (boundary included).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.a.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.l / 2.0 && v.abs() <= self.w / 2.0 && (p[2] - self.z).abs() <= self.h / 2.0
    }
}

/// Yaw-and-translation transform from a CAV's local frame to the global frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseYawT {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub yaw: f64,
}

impl Default for PoseYawT {
    fn default() -> Self {
        PoseYawT::identity()
    }
}

impl PoseYawT {
    pub fn new(tx: f64, ty: f64, tz: f64, yaw: f64) -> Self {
        PoseYawT {
            tx,
            ty,
            tz,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        PoseYawT::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.tx,
            s * p[0] + c * p[1] + self.ty,
            p[2] + self.tz,
        ]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseYawT) -> PoseYawT {
        let t = self.apply_point([other.tx, other.ty, other.tz]);
        PoseYawT::new(t[0], t[1], t[2], self.yaw + other.yaw)
    }

    pub fn translation_norm_xy(&self) -> f64 {
        self.tx.hypot(self.ty)
    }
}

/// Rotates the box center by the pose yaw, translates it, and adds the yaw
/// to the heading. Extents are copied unchanged.
pub fn transform_box(b: &Box7, pose: &PoseYawT) -> Box7 {
    let [x, y, z] = pose.apply_point([b.x, b.y, b.z]);
    Box7 {
        x,
        y,
        z,
        a: wrap_angle(b.a + pose.yaw),
        l: b.l,
        w: b.w,
        h: b.h,
    }
}

pub fn inverse_pose(pose: &PoseYawT) -> PoseYawT {
    let (s, c) = pose.yaw.sin_cos();
    // R⁻¹ = Rᵀ, t' = -Rᵀ t
    let tx = -(c * pose.tx + s * pose.ty);
    let ty = -(-s * pose.tx + c * pose.ty);
    PoseYawT::new(tx, ty, -pose.tz, -pose.yaw)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clipping of `subject` by the convex, counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(e0, e1, cur) >= 0.0;
            let prev_in = cross(e0, e1, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_intersection(prev, cur, e0, e1));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_intersection(prev, cur, e0, e1));
            }
        }
    }
    output
}

fn segment_intersection(p: [f64; 2], q: [f64; 2], e0: [f64; 2], e1: [f64; 2]) -> [f64; 2] {
    let dp = cross(e0, e1, p);
    let dq = cross(e0, e1, q);
    let denom = dp - dq;
    if denom.abs() < 1e-300 {
        return q;
    }
    let t = dp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Shoelace area (absolute).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        acc += p[0] * q[1] - q[0] * p[1];
    }
    (acc / 2.0).abs()
}

/// Area of the intersection of the two boxes' BEV rectangles.
pub fn bev_intersection_area(b1: &Box7, b2: &Box7) -> f64 {
    let area = polygon_area(&clip_convex(&b1.bev_corners(), &b2.bev_corners()));
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

/// 3D IoU of two yaw-rotated boxes: BEV polygon intersection area times
/// vertical overlap, over the union of volumes.
pub fn iou3d(b1: &Box7, b2: &Box7) -> f64 {
    // disjoint bounding circles short-circuit
    let r1 = 0.5 * b1.l.hypot(b1.w);
    let r2 = 0.5 * b2.l.hypot(b2.w);
    if b1.bev_distance(b2) > r1 + r2 {
        return 0.0;
    }
    let z_lo = (b1.z - b1.h / 2.0).max(b2.z - b2.h / 2.0);
    let z_hi = (b1.z + b1.h / 2.0).min(b2.z + b2.h / 2.0);
    let dz = z_hi - z_lo;
    if dz <= 0.0 {
        return 0.0;
    }
    // Symmetric by construction: clip in a canonical argument order.
    let (p, q) = if canonical_order(b1, b2) {
        (b1, b2)
    } else {
        (b2, b1)
    };
    let inter = bev_intersection_area(p, q) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = b1.volume() + b2.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn canonical_order(b1: &Box7, b2: &Box7) -> bool {
    let k1 = b1.to_array();
    let k2 = b2.to_array();
    for (u, v) in k1.iter().zip(&k2) {
        match u.total_cmp(v) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}
