//! Primitive distance queries and the scene contact check.

use nalgebra::Vector3;

use crate::se3::Pose;

use super::model::{SimModel, SimState};
use super::scene::{Aabb, Shape};

type V3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Contact {
    /// Body names in lexicographic order.
    pub pair: (String, String),
    /// Penetration depth in meters (positive).
    pub depth: f64,
}

impl Contact {
    fn new(a: &str, b: &str, depth: f64) -> Self {
        let pair = if a <= b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
        Self { pair, depth }
    }
}

/// Closest point parameter on segment `ab` to `p`, and the distance.
pub fn segment_point(a: &V3, b: &V3, p: &V3) -> (f64, f64) {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (t, (a + ab * t - p).norm())
}

/// Distance between segments `p1q1` and `p2q2`.
pub fn segment_segment(p1: &V3, q1: &V3, p2: &V3, q2: &V3) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    const EPS: f64 = 1e-18;
    let (s, t) = if a <= EPS && e <= EPS {
        (0.0, 0.0)
    } else if a <= EPS {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= EPS {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > EPS { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

/// Signed distance from `p` to an oriented box (negative inside).
pub fn box_signed_distance(pose: &Pose, half: &[f64; 3], p: &V3) -> f64 {
    let local = pose.inverse().transform_point(p);
    let q = V3::new(local.x.abs() - half[0], local.y.abs() - half[1], local.z.abs() - half[2]);
    let outside = V3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    outside + q.x.max(q.y).max(q.z).min(0.0)
}

/// Minimum signed distance from segment `ab` to a box. The signed distance
/// to a convex set is convex along a line, so golden-section search finds
/// the minimum.
pub fn segment_box_distance(a: &V3, b: &V3, pose: &Pose, half: &[f64; 3]) -> f64 {
    let inv = pose.inverse();
    let (la, lb) = (inv.transform_point(a), inv.transform_point(b));
    let f = |t: f64| {
        let p = la + (lb - la) * t;
        let q = V3::new(p.x.abs() - half[0], p.y.abs() - half[1], p.z.abs() - half[2]);
        V3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm() + q.x.max(q.y).max(q.z).min(0.0)
    };
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    f(0.0).min(f(1.0)).min(f1).min(f2).min(f(0.5 * (lo + hi)))
}

/// A capsule in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldCapsule {
    pub a: V3,
    pub b: V3,
    pub radius: f64,
}

impl WorldCapsule {
    pub fn from_local(frame: &Pose, c: &crate::kin::Capsule) -> Self {
        Self {
            a: frame.transform_point(&V3::from(c.a)),
            b: frame.transform_point(&V3::from(c.b)),
            radius: c.radius,
        }
    }
}

/// Penetration depth of a capsule into a shape; positive when touching.
pub fn capsule_shape_depth(c: &WorldCapsule, shape: &Shape, pose: &Pose) -> f64 {
    match shape {
        Shape::Sphere { radius } => c.radius + radius - segment_point(&c.a, &c.b, &pose.translation).1,
        Shape::Box { half_extents } => c.radius - segment_box_distance(&c.a, &c.b, pose, half_extents),
    }
}

pub fn capsule_capsule_depth(x: &WorldCapsule, y: &WorldCapsule) -> f64 {
    x.radius + y.radius - segment_segment(&x.a, &x.b, &y.a, &y.b)
}

/// Arm bodies: link capsules in chain order, then the hand (if any).
pub fn arm_capsules(model: &SimModel, state: &SimState) -> Vec<(String, WorldCapsule)> {
    let mut out: Vec<(String, WorldCapsule)> = model
        .chain
        .joints
        .iter()
        .zip(&state.fk.links)
        .filter_map(|(j, frame)| j.capsule.as_ref().map(|c| (j.name.clone(), WorldCapsule::from_local(frame, c))))
        .collect();
    if let Some(c) = model.gripper().and_then(|g| g.hand_capsule.as_ref()) {
        out.push(("hand".to_string(), WorldCapsule::from_local(&state.fk.ee, c)));
    }
    out
}

/// Deepest contact among: arm capsules against collidable scene objects,
/// non-adjacent arm capsule pairs, and arm points leaving the safety zone.
/// The held object and graspable objects near the hand are exempt from
/// hand tests; the held object is exempt from all arm tests.
pub fn check_collision(model: &SimModel, state: &SimState, zone: Option<&Aabb>) -> Option<Contact> {
    let dof = model.chain.dof();
    let gap = model.chain.self_collision_min_gap;
    // Index each capsule by its position in the chain so the hand sits after
    // the last link.
    let mut bodies: Vec<(usize, &str, WorldCapsule)> = Vec::with_capacity(dof + 1);
    for (i, (j, frame)) in model.chain.joints.iter().zip(&state.fk.links).enumerate() {
        if let Some(c) = &j.capsule {
            bodies.push((i, j.name.as_str(), WorldCapsule::from_local(frame, c)));
        }
    }
    if let Some(c) = model.gripper().and_then(|g| g.hand_capsule.as_ref()) {
        bodies.push((dof, "hand", WorldCapsule::from_local(&state.fk.ee, c)));
    }
    let held = state.attachment.map(|a| a.object);

    let mut best: Option<Contact> = None;
    let mut consider = |a: &str, b: &str, depth: f64| {
        if depth <= 0.0 {
            return;
        }
        let c = Contact::new(a, b, depth);
        let better = match &best {
            None => true,
            Some(cur) => depth > cur.depth || (depth == cur.depth && c.pair < cur.pair),
        };
        if better {
            best = Some(c);
        }
    };

    for (i, obj) in state.objects.iter().enumerate() {
        if !obj.collidable || Some(i) == held {
            continue;
        }
        for (idx, name, cap) in &bodies {
            if *idx == dof && obj.graspable {
                continue;
            }
            consider(name, &obj.id, capsule_shape_depth(cap, &obj.shape, &obj.pose));
        }
    }
    for (x, (ix, nx, cx)) in bodies.iter().enumerate() {
        for (iy, ny, cy) in &bodies[x + 1..] {
            if iy - ix >= gap {
                consider(nx, ny, capsule_capsule_depth(cx, cy));
            }
        }
    }
    if let Some(z) = zone {
        consider("ee", "zone", z.outside_distance(&state.fk.ee.translation));
        for (_, name, cap) in &bodies {
            consider(name, "zone", z.outside_distance(&cap.a).max(z.outside_distance(&cap.b)));
        }
    }
    best
}
