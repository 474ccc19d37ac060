//! Collision and success predicates.

use serde::{Deserialize, Serialize};

use super::scenario::{Pose, Scenario, Segment, P2};
use crate::geometry::Trajectory;

/// Endpoint position tolerance in world units.
pub const TAU_POS: f64 = 0.02;
/// Endpoint heading tolerance in degrees.
pub const TAU_ANG_DEG: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contact {
    Obstacle,
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Collision {
    /// Index `i` of the first offending segment `p_i → p_{i+1}`.
    pub segment: usize,
    pub contact: Contact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Failure {
    Collision,
    MissedDocker,
    MissedTunnel,
    NonFinite,
}

fn points(traj: &Trajectory) -> Vec<P2> {
    (0..traj.len()).map(|t| P2::new(traj.point(t)[0], traj.point(t)[1])).collect()
}

/// Distance from `c` to the segment `a → b`.
pub fn point_segment_distance(c: P2, a: P2, b: P2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 == 0.0 { 0.0 } else { ((c - a).dot(&ab) / len2).clamp(0.0, 1.0) };
    (a + ab * s - c).norm()
}

fn cross(a: P2, b: P2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn on_segment(p: P2, s: &Segment) -> bool {
    p.x >= s.a.x.min(s.b.x) && p.x <= s.a.x.max(s.b.x) && p.y >= s.a.y.min(s.b.y) && p.y <= s.a.y.max(s.b.y)
}

/// Closed segment intersection: touching counts.
pub fn segments_intersect(p: &Segment, q: &Segment) -> bool {
    let d1 = cross(q.b - q.a, p.a - q.a);
    let d2 = cross(q.b - q.a, p.b - q.a);
    let d3 = cross(p.b - p.a, q.a - p.a);
    let d4 = cross(p.b - p.a, q.b - p.a);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(p.a, q))
        || (d2 == 0.0 && on_segment(p.b, q))
        || (d3 == 0.0 && on_segment(q.a, p))
        || (d4 == 0.0 && on_segment(q.b, p))
}

/// First segment that enters the obstacle's open disc or touches a wall.
pub fn check_collision(traj: &Trajectory, scenario: &Scenario) -> Option<Collision> {
    let pts = points(traj);
    let walls = scenario.walls();
    for (i, w) in pts.windows(2).enumerate() {
        let seg = Segment { a: w[0], b: w[1] };
        if let Some(o) = &scenario.obstacle {
            if point_segment_distance(o.center(), seg.a, seg.b) < o.radius {
                return Some(Collision { segment: i, contact: Contact::Obstacle });
            }
        }
        if walls.iter().any(|wall| segments_intersect(&seg, wall)) {
            return Some(Collision { segment: i, contact: Contact::Wall });
        }
    }
    None
}

fn angle_between(a: P2, b: P2) -> f64 {
    cross(a, b).atan2(a.dot(&b)).abs().to_degrees()
}

/// Direction of travel leaving `pts[0]`, measured to the first point at least [`TAU_POS`] away.
fn departure(pts: &[P2]) -> Option<P2> {
    pts.iter().find(|p| (*p - pts[0]).norm() >= TAU_POS).map(|p| p - pts[0])
}

fn arrival(pts: &[P2]) -> Option<P2> {
    let last = *pts.last()?;
    pts.iter().rev().find(|p| (last - *p).norm() >= TAU_POS).map(|p| last - p)
}

/// Leaves the mouth of `dock` along its axis.
fn leaves(pts: &[P2], dock: &Pose) -> bool {
    (pts[0] - dock.position()).norm() <= TAU_POS && departure(pts).is_some_and(|d| angle_between(d, dock.axis()) <= TAU_ANG_DEG)
}

/// Arrives at the mouth of `dock` travelling against its axis.
fn arrives(pts: &[P2], dock: &Pose) -> bool {
    let last = pts[pts.len() - 1];
    (last - dock.position()).norm() <= TAU_POS && arrival(pts).is_some_and(|d| angle_between(d, -dock.axis()) <= TAU_ANG_DEG)
}

/// Some run of consecutive points crosses the entrance line inside the
/// walls, stays within the corridor, and crosses the far end, in either direction.
fn traverses(pts: &[P2], tunnel: &super::scenario::Tunnel) -> bool {
    let local: Vec<P2> = pts.iter().map(|p| tunnel.pose.to_local(*p)).collect();
    let half = tunnel.width / 2.0;
    let inside = |p: &P2| p.x >= 0.0 && p.x <= tunnel.length && p.y.abs() < half;
    let crosses = |a: P2, b: P2, x: f64| {
        if (a.x - x) * (b.x - x) > 0.0 || a.x == b.x {
            return false;
        }
        let s = (x - a.x) / (b.x - a.x);
        (a.y + s * (b.y - a.y)).abs() < half
    };
    for i in 0..local.len().saturating_sub(1) {
        for (from, to) in [(0.0, tunnel.length), (tunnel.length, 0.0)] {
            if !crosses(local[i], local[i + 1], from) {
                continue;
            }
            let mut j = i + 1;
            while j < local.len() && inside(&local[j]) {
                j += 1;
            }
            if j < local.len() && crosses(local[j - 1], local[j], to) {
                return true;
            }
        }
    }
    false
}

/// `Ok` when the trajectory solves the task; otherwise the first failure found.
pub fn check_success(traj: &Trajectory, scenario: &Scenario) -> std::result::Result<(), Failure> {
    if traj.dim() != 2 || traj.len() < 2 || traj.points().iter().any(|v| !v.is_finite()) {
        return Err(Failure::NonFinite);
    }
    if check_collision(traj, scenario).is_some() {
        return Err(Failure::Collision);
    }
    let pts = points(traj);
    if !leaves(&pts, &scenario.start.pose) {
        return Err(Failure::MissedDocker);
    }
    match (&scenario.goal, &scenario.tunnel) {
        (Some(goal), _) => {
            if !arrives(&pts, &goal.pose) {
                return Err(Failure::MissedDocker);
            }
        }
        (None, Some(tunnel)) => {
            if !traverses(&pts, tunnel) {
                return Err(Failure::MissedTunnel);
            }
            if !arrives(&pts, &scenario.start.pose) {
                return Err(Failure::MissedDocker);
            }
        }
        (None, None) => return Err(Failure::MissedDocker),
    }
    Ok(())
}
