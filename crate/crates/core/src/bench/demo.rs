//! Scripted demonstrator: a Hermite spline through task waypoints, emitted at
//! equal arc length and perturbed by smooth bumps that vanish at both ends.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{Pose, Scenario, TaskKind, P2};
use super::score::{check_success, point_segment_distance};
use crate::error::{Error, Result};
use crate::geometry::{Demonstration, Trajectory};

/// Default number of emitted points.
pub const DEFAULT_HORIZON: usize = 50;
/// Demos keep at least this multiple of the radius from the obstacle centre.
pub const DETOUR_CLEARANCE: f64 = 1.5;
const ATTEMPTS: u64 = 40;
const DENSE_PER_SEGMENT: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }

    pub fn flip(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// Which side of the obstacle the outbound motion passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoMode {
    Left,
    Right,
    /// The shorter detour, swapped with probability [`DemoStyle::flip_probability`].
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoStyle {
    /// Standard deviation of each bump's displacement.
    pub noise: f64,
    pub flip_probability: f64,
    pub horizon: usize,
}

impl Default for DemoStyle {
    fn default() -> Self {
        Self { noise: 0.006, flip_probability: 0.3, horizon: DEFAULT_HORIZON }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDemo {
    pub demonstration: Demonstration,
    /// Outbound side; `None` without an obstacle.
    pub side: Option<Side>,
}

#[derive(Debug, Clone, Copy)]
struct Knot {
    p: P2,
    /// Unit tangent; the bisector of the neighbouring chords when `None`.
    dir: Option<P2>,
}

fn knot(p: P2, dir: P2) -> Knot {
    Knot { p, dir: Some(dir.normalize()) }
}

fn free(p: P2) -> Knot {
    Knot { p, dir: None }
}

fn hermite(p0: P2, m0: P2, p1: P2, m1: P2, u: f64) -> P2 {
    let (u2, u3) = (u * u, u * u * u);
    p0 * (2.0 * u3 - 3.0 * u2 + 1.0) + m0 * (u3 - 2.0 * u2 + u) + p1 * (-2.0 * u3 + 3.0 * u2) + m1 * (u3 - u2)
}

/// Densely sampled spline; each segment's tangents are scaled by its chord.
fn spline(knots: &[Knot]) -> Vec<P2> {
    let dirs: Vec<P2> = (0..knots.len())
        .map(|i| {
            knots[i].dir.unwrap_or_else(|| {
                let a = (knots[i].p - knots[i - 1].p).normalize();
                let b = (knots[i + 1].p - knots[i].p).normalize();
                (a + b).normalize()
            })
        })
        .collect();
    let mut out = Vec::with_capacity(knots.len() * DENSE_PER_SEGMENT);
    for i in 0..knots.len() - 1 {
        let c = (knots[i + 1].p - knots[i].p).norm();
        for j in 0..DENSE_PER_SEGMENT {
            let u = j as f64 / DENSE_PER_SEGMENT as f64;
            out.push(hermite(knots[i].p, dirs[i] * c, knots[i + 1].p, dirs[i + 1] * c, u));
        }
    }
    out.push(knots[knots.len() - 1].p);
    out
}

/// `n` points at equal arc length along a dense polyline, with their phase in `[0, 1]`.
fn emit(dense: &[P2], n: usize) -> Vec<(f64, P2)> {
    let mut cum = vec![0.0];
    for w in dense.windows(2) {
        cum.push(cum[cum.len() - 1] + (w[1] - w[0]).norm());
    }
    let total = cum[cum.len() - 1];
    let mut k = 0;
    (0..n)
        .map(|j| {
            let s = j as f64 / (n - 1) as f64;
            if j == n - 1 {
                return (1.0, dense[dense.len() - 1]);
            }
            let target = s * total;
            while k + 1 < cum.len() - 1 && cum[k + 1] < target {
                k += 1;
            }
            let span = cum[k + 1] - cum[k];
            let f = if span > 0.0 { (target - cum[k]) / span } else { 0.0 };
            (s, dense[k] + (dense[k + 1] - dense[k]) * f)
        })
        .collect()
}

/// Sum of `sin²` bumps over random windows inside `(0, 1)`.
struct Bumps(Vec<(f64, f64, P2)>);

impl Bumps {
    fn draw(rng: &mut impl Rng, sd: f64) -> Self {
        let n = 3;
        Bumps(
            (0..n)
                .map(|_| {
                    let half = rng.random_range(0.08..0.2);
                    let center = rng.random_range(half..1.0 - half);
                    let v = P2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * (sd * 3f64.sqrt());
                    (center, half, v)
                })
                .collect(),
        )
    }

    fn at(&self, s: f64) -> P2 {
        self.0
            .iter()
            .filter(|(c, h, _)| (s - c).abs() < *h)
            .map(|(c, h, v)| v * (std::f64::consts::PI * (s - c + h) / (2.0 * h)).sin().powi(2))
            .fold(P2::zeros(), |a, b| a + b)
    }
}

/// Signed offset of the obstacle centre to the left of the start-to-target line.
pub fn obstacle_offset(scenario: &Scenario) -> Option<f64> {
    let o = scenario.obstacle?;
    let a = scenario.start.pose.position();
    let u = (scenario.target().position() - a).normalize();
    Some((o.center() - a).dot(&P2::new(-u.y, u.x)))
}

/// Side on which the start-to-target line passes the obstacle.
pub fn shorter_side(scenario: &Scenario) -> Option<Side> {
    obstacle_offset(scenario).map(|off| if off > 0.0 { Side::Right } else { Side::Left })
}

fn choose_side(scenario: &Scenario, mode: DemoMode, flip: f64, rng: &mut impl Rng) -> Option<Side> {
    let short = shorter_side(scenario)?;
    Some(match mode {
        DemoMode::Left => Side::Left,
        DemoMode::Right => Side::Right,
        DemoMode::Auto => {
            if rng.random::<f64>() < flip {
                short.flip()
            } else {
                short
            }
        }
    })
}

/// Point passing the obstacle on `side`, at least `clear` from its centre.
fn pass_point(scenario: &Scenario, side: Side, clear: f64) -> P2 {
    let o = scenario.obstacle.expect("obstacle task");
    let a = scenario.start.pose.position();
    let u = (scenario.target().position() - a).normalize();
    let n = P2::new(-u.y, u.x);
    let line = -side.sign() * obstacle_offset(scenario).unwrap_or(0.0);
    o.center() + n * (side.sign() * clear.max(line))
}

/// Pass knots for travel along `dir`; the far side gets an extra knot beside
/// the obstacle so the curve swings out before reaching it.
fn pass_knots(scenario: &Scenario, side: Side, clear: f64, dir: P2) -> Vec<Knot> {
    let o = scenario.obstacle.expect("obstacle task");
    let w = pass_point(scenario, side, clear);
    let far = side.sign() * obstacle_offset(scenario).unwrap_or(0.0) > 0.0;
    let mut out = Vec::new();
    if far {
        let lateral = w - o.center();
        out.push(free(o.center() + lateral * 0.9 - dir * clear * 1.1));
    }
    out.push(knot(w, dir));
    out
}

fn knots(scenario: &Scenario, side: Option<Side>, rng: &mut impl Rng) -> Vec<Knot> {
    let s = &scenario.start.pose;
    let lead = |rng: &mut dyn rand::RngCore| rng.random_range(0.04..0.08);
    let clear = |rng: &mut dyn rand::RngCore| {
        scenario.obstacle.map(|o| o.radius * rng.random_range(1.65..2.0)).unwrap_or(0.0)
    };
    let mut out = vec![knot(s.position(), s.axis())];
    out.push(knot(s.position() + s.axis() * lead(rng), s.axis()));
    match scenario.task {
        TaskKind::Docker | TaskKind::DockerObstacle => {
            if let Some(side) = side {
                let u = (scenario.target().position() - s.position()).normalize();
                out.extend(pass_knots(scenario, side, clear(rng), u));
            }
            let g: &Pose = &scenario.goal.as_ref().expect("goal docker").pose;
            out.push(knot(g.position() + g.axis() * lead(rng), -g.axis()));
            out.push(knot(g.position(), -g.axis()));
        }
        TaskKind::DockerObstacleTunnel => {
            let side = side.expect("tunnel task has an obstacle");
            let t = scenario.tunnel.expect("tunnel");
            let tp = &t.pose;
            let loop_side = -side.sign();
            let home = (s.position() - scenario.target().position()).normalize();
            let jitter = |rng: &mut dyn rand::RngCore| rng.random_range(-0.01..0.01);
            out.extend(pass_knots(scenario, side, clear(rng), -home));
            out.push(knot(tp.to_world(P2::new(-0.06, 0.0)), tp.axis()));
            out.push(knot(tp.to_world(P2::new(t.length + 0.06, 0.0)), tp.axis()));
            out.push(knot(tp.to_world(P2::new(t.length + 0.12 + jitter(rng), loop_side * 0.08)), tp.normal() * loop_side));
            out.push(knot(tp.to_world(P2::new(t.length / 2.0, loop_side * (0.14 + jitter(rng)))), -tp.axis()));
            out.push(free(tp.to_world(P2::new(-0.08, loop_side * (0.13 + jitter(rng))))));
            let c = clear(rng);
            out.extend(pass_knots(scenario, side.flip(), c, home));
            let o = scenario.obstacle.expect("obstacle task");
            let lateral = pass_point(scenario, side.flip(), c) - o.center();
            out.push(free(o.center() + lateral * 0.9 + home * c * 1.1));
            out.push(knot(s.position() + s.axis() * lead(rng), -s.axis()));
            out.push(knot(s.position(), -s.axis()));
        }
    }
    out
}

fn valid(traj: &Trajectory, scenario: &Scenario) -> bool {
    if check_success(traj, scenario).is_err() {
        return false;
    }
    let Some(o) = scenario.obstacle else { return true };
    let pts: Vec<P2> = (0..traj.len()).map(|t| P2::new(traj.point(t)[0], traj.point(t)[1])).collect();
    pts.windows(2).all(|w| point_segment_distance(o.center(), w[0], w[1]) >= DETOUR_CLEARANCE * o.radius)
}

/// One demonstration for `scenario`; a pure function of the arguments.
///
/// Every returned demo passes [`check_success`] and keeps
/// [`DETOUR_CLEARANCE`] radii from the obstacle centre.
pub fn synth_demo(scenario: &Scenario, mode: DemoMode, seed: u64, style: &DemoStyle) -> Result<SynthDemo> {
    scenario.validate()?;
    if style.horizon < 4 {
        return Err(Error::InvalidInput("demonstrations need at least 4 points".into()));
    }
    let mut side_rng = ChaCha8Rng::seed_from_u64(seed);
    let side = choose_side(scenario, mode, style.flip_probability, &mut side_rng);
    for attempt in 0..ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (attempt + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let ks = knots(scenario, side, &mut rng);
        let bumps = Bumps::draw(&mut rng, style.noise);
        let pts = emit(&spline(&ks), style.horizon);
        let rows: Vec<Vec<f64>> = pts
            .iter()
            .map(|(s, p)| {
                let q = p + bumps.at(*s);
                vec![q.x, q.y]
            })
            .collect();
        let traj = Trajectory::from_rows(&rows)?;
        if valid(&traj, scenario) {
            return Ok(SynthDemo { demonstration: Demonstration::new(scenario.query(), traj)?, side });
        }
    }
    Err(Error::Infeasible(format!("no valid {} demonstration after {ATTEMPTS} attempts", scenario.task.name())))
}

/// Noise-free demos exist on every side the task offers.
pub fn feasible(scenario: &Scenario) -> bool {
    let style = DemoStyle { noise: 0.0, ..Default::default() };
    let modes: &[DemoMode] = if scenario.task.has_obstacle() { &[DemoMode::Left, DemoMode::Right] } else { &[DemoMode::Auto] };
    modes.iter().all(|m| synth_demo(scenario, *m, 0, &style).is_ok())
}
