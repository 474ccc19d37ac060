//! Task layouts in the unit square and a seeded sampler for train and test regimes.

use std::f64::consts::PI;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, TaskQuery};

pub type P2 = Vector2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Docker,
    DockerObstacle,
    DockerObstacleTunnel,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Docker, TaskKind::DockerObstacle, TaskKind::DockerObstacleTunnel];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Docker => "docker",
            TaskKind::DockerObstacle => "docker-obstacle",
            TaskKind::DockerObstacleTunnel => "docker-obstacle-tunnel",
        }
    }

    pub fn num_frames(self) -> usize {
        match self {
            TaskKind::Docker => 2,
            _ => 3,
        }
    }

    /// Size of the synthesized training set.
    pub fn default_train_demos(self) -> usize {
        match self {
            TaskKind::Docker => 20,
            _ => 30,
        }
    }

    pub fn has_obstacle(self) -> bool {
        self != TaskKind::Docker
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Train,
    Test,
}

/// Planar pose; `heading` is the direction of the local x-axis in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn position(&self) -> P2 {
        P2::new(self.x, self.y)
    }

    pub fn axis(&self) -> P2 {
        P2::new(self.heading.cos(), self.heading.sin())
    }

    /// Left-hand normal of the axis.
    pub fn normal(&self) -> P2 {
        P2::new(-self.heading.sin(), self.heading.cos())
    }

    pub fn frame(&self) -> Frame {
        Frame::planar(self.x, self.y, self.heading)
    }

    pub fn to_world(&self, local: P2) -> P2 {
        self.position() + self.axis() * local.x + self.normal() * local.y
    }

    pub fn to_local(&self, p: P2) -> P2 {
        let d = p - self.position();
        P2::new(d.dot(&self.axis()), d.dot(&self.normal()))
    }
}

/// Wall segment in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: P2,
    pub b: P2,
}

/// U-shaped docker open towards its local +x; the pose sits at the mouth centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Docker {
    pub pose: Pose,
    pub width: f64,
    pub depth: f64,
}

impl Docker {
    pub fn walls(&self) -> [Segment; 3] {
        let (h, d) = (self.width / 2.0, self.depth);
        let c = |x: f64, y: f64| self.pose.to_world(P2::new(x, y));
        [
            Segment { a: c(0.0, h), b: c(-d, h) },
            Segment { a: c(-d, h), b: c(-d, -h) },
            Segment { a: c(-d, -h), b: c(0.0, -h) },
        ]
    }

    fn footprint(&self) -> (P2, f64) {
        (self.pose.to_world(P2::new(-self.depth / 2.0, 0.0)), (self.depth / 2.0).hypot(self.width / 2.0))
    }
}

/// Straight corridor entered at the pose and running along local +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tunnel {
    pub pose: Pose,
    pub length: f64,
    pub width: f64,
}

impl Tunnel {
    pub fn walls(&self) -> [Segment; 2] {
        let h = self.width / 2.0;
        let c = |x: f64, y: f64| self.pose.to_world(P2::new(x, y));
        [
            Segment { a: c(0.0, h), b: c(self.length, h) },
            Segment { a: c(0.0, -h), b: c(self.length, -h) },
        ]
    }

    pub fn exit(&self) -> P2 {
        self.pose.to_world(P2::new(self.length, 0.0))
    }

    fn footprint(&self) -> (P2, f64) {
        (self.pose.to_world(P2::new(self.length / 2.0, 0.0)), (self.length / 2.0).hypot(self.width / 2.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Obstacle {
    pub fn center(&self) -> P2 {
        P2::new(self.center[0], self.center[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub task: TaskKind,
    pub start: Docker,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Docker>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tunnel: Option<Tunnel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle: Option<Obstacle>,
}

/// Separation kept between footprints, and between the obstacle and docker mouths.
pub const CLEARANCE: f64 = 0.05;

impl Scenario {
    /// Where the outbound motion is headed: the goal mouth or the tunnel entrance.
    pub fn target(&self) -> Pose {
        match (&self.goal, &self.tunnel) {
            (Some(g), _) => g.pose,
            (None, Some(t)) => t.pose,
            (None, None) => self.start.pose,
        }
    }

    /// Obstacle frame: centred on the disc, x-axis along the start-to-target direction.
    pub fn obstacle_pose(&self) -> Option<Pose> {
        self.obstacle.map(|o| {
            let d = self.target().position() - self.start.pose.position();
            Pose { x: o.center[0], y: o.center[1], heading: d.y.atan2(d.x) }
        })
    }

    /// Frame poses in query order: start, then obstacle, then goal or tunnel.
    pub fn frame_poses(&self) -> Vec<Pose> {
        let mut out = vec![self.start.pose];
        out.extend(self.obstacle_pose());
        out.extend(self.goal.map(|g| g.pose));
        out.extend(self.tunnel.map(|t| t.pose));
        out
    }

    pub fn query(&self) -> TaskQuery {
        TaskQuery { frames: self.frame_poses().iter().map(Pose::frame).collect() }
    }

    pub fn walls(&self) -> Vec<Segment> {
        let mut out: Vec<Segment> = self.start.walls().to_vec();
        if let Some(g) = &self.goal {
            out.extend(g.walls());
        }
        if let Some(t) = &self.tunnel {
            out.extend(t.walls());
        }
        out
    }

    fn footprints(&self) -> Vec<(P2, f64)> {
        let mut out = vec![self.start.footprint()];
        out.extend(self.goal.map(|g| g.footprint()));
        out.extend(self.tunnel.map(|t| t.footprint()));
        out.extend(self.obstacle.map(|o| (o.center(), o.radius)));
        out
    }

    /// Pieces match the task kind, lie inside the unit square, and keep
    /// [`CLEARANCE`] from each other.
    pub fn validate(&self) -> Result<()> {
        let shape_ok = match self.task {
            TaskKind::Docker => self.goal.is_some() && self.tunnel.is_none() && self.obstacle.is_none(),
            TaskKind::DockerObstacle => self.goal.is_some() && self.tunnel.is_none() && self.obstacle.is_some(),
            TaskKind::DockerObstacleTunnel => self.goal.is_none() && self.tunnel.is_some() && self.obstacle.is_some(),
        };
        if !shape_ok {
            return Err(Error::InvalidInput(format!("scenario pieces do not match task {}", self.task.name())));
        }
        let prints = self.footprints();
        for (i, (c, r)) in prints.iter().enumerate() {
            if !c.iter().all(|v| v.is_finite()) || c.iter().any(|v| *v - r < 0.0 || *v + r > 1.0) {
                return Err(Error::Infeasible(format!("piece {i} leaves the unit square")));
            }
            for (c2, r2) in &prints[i + 1..] {
                if (c - c2).norm() < r + r2 + CLEARANCE {
                    return Err(Error::Infeasible("pieces overlap".into()));
                }
            }
        }
        if let Some(o) = &self.obstacle {
            let mouths = [Some(self.start.pose), self.goal.map(|g| g.pose)];
            for m in mouths.iter().flatten() {
                if (m.position() - o.center()).norm() <= o.radius + CLEARANCE {
                    return Err(Error::Infeasible("obstacle crowds a docker mouth".into()));
                }
            }
        }
        Ok(())
    }
}

/// Union of closed intervals, sampled proportionally to length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranges(pub Vec<(f64, f64)>);

impl Ranges {
    pub fn one(lo: f64, hi: f64) -> Self {
        Ranges(vec![(lo, hi)])
    }

    /// `[-hi, -lo] ∪ [lo, hi]` shifted by `center`.
    pub fn symmetric(center: f64, lo: f64, hi: f64) -> Self {
        Ranges(vec![(center - hi, center - lo), (center + lo, center + hi)])
    }

    pub fn contains(&self, v: f64) -> bool {
        self.0.iter().any(|(a, b)| *a <= v && v <= *b)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let total: f64 = self.0.iter().map(|(a, b)| b - a).sum();
        let mut u = rng.random::<f64>() * total;
        for (a, b) in &self.0 {
            if u <= b - a {
                return a + u;
            }
            u -= b - a;
        }
        self.0.last().map(|r| r.1).unwrap_or(0.0)
    }
}

/// Box of docker poses; headings in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseBox {
    pub x: Ranges,
    pub y: Ranges,
    pub heading: Ranges,
}

impl PoseBox {
    pub fn contains(&self, p: &Pose) -> bool {
        self.x.contains(p.x) && self.y.contains(p.y) && self.heading.contains(p.heading)
    }

    fn sample(&self, rng: &mut impl Rng) -> Pose {
        Pose { x: self.x.sample(rng), y: self.y.sample(rng), heading: self.heading.sample(rng) }
    }
}

/// Pose ranges for one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRanges {
    pub start: PoseBox,
    pub goal: PoseBox,
    /// Tunnel entrance position.
    pub tunnel: PoseBox,
    /// Tunnel heading relative to the start-to-entrance direction.
    pub tunnel_turn: Ranges,
}

/// Dimensions shared by every sampled layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dimensions {
    pub docker_width: f64,
    pub docker_depth: f64,
    pub tunnel_length: f64,
    pub tunnel_width: f64,
    pub obstacle_radius: f64,
    /// Obstacle position along the start-to-target segment, as a fraction.
    pub obstacle_along: (f64, f64),
    /// Signed offset of the obstacle to the left of the start-to-target line.
    pub obstacle_offset: (f64, f64),
}

impl Default for Dimensions {
    fn default() -> Self {
        Self {
            docker_width: 0.06,
            docker_depth: 0.04,
            tunnel_length: 0.12,
            tunnel_width: 0.08,
            obstacle_radius: 0.06,
            obstacle_along: (0.35, 0.65),
            obstacle_offset: (-0.03, 0.12),
        }
    }
}

const MAX_REJECTIONS: usize = 1000;

fn deg(d: f64) -> f64 {
    d * PI / 180.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSampler {
    pub seed: u64,
    pub train: RegimeRanges,
    pub test: RegimeRanges,
    pub dims: Dimensions,
}

impl ScenarioSampler {
    /// Train headings stay within 20° of facing each other; test headings are
    /// turned 25° to 50° away, so no test docker pose lies in the train box.
    pub fn new(seed: u64) -> Self {
        let start_xy = (Ranges::one(0.08, 0.22), Ranges::one(0.3, 0.7));
        let goal_xy = (Ranges::one(0.78, 0.92), Ranges::one(0.3, 0.7));
        let tunnel_xy = (Ranges::one(0.55, 0.62), Ranges::one(0.38, 0.62));
        let pb = |xy: &(Ranges, Ranges), h: Ranges| PoseBox { x: xy.0.clone(), y: xy.1.clone(), heading: h };
        let train = RegimeRanges {
            start: pb(&start_xy, Ranges::one(deg(-20.0), deg(20.0))),
            goal: pb(&goal_xy, Ranges::one(deg(160.0), deg(200.0))),
            tunnel: pb(&tunnel_xy, Ranges::one(0.0, 0.0)),
            tunnel_turn: Ranges::one(deg(-15.0), deg(15.0)),
        };
        let test = RegimeRanges {
            start: pb(&start_xy, Ranges::symmetric(0.0, deg(25.0), deg(50.0))),
            goal: pb(&goal_xy, Ranges::symmetric(deg(180.0), deg(25.0), deg(50.0))),
            tunnel: pb(&tunnel_xy, Ranges::one(0.0, 0.0)),
            tunnel_turn: Ranges::symmetric(0.0, deg(20.0), deg(30.0)),
        };
        Self { seed, train, test, dims: Dimensions::default() }
    }

    pub fn ranges(&self, regime: Regime) -> &RegimeRanges {
        match regime {
            Regime::Train => &self.train,
            Regime::Test => &self.test,
        }
    }

    fn rng(&self, kind: TaskKind, regime: Regime, index: u64) -> ChaCha8Rng {
        let tag = kind as u64 * 2 + regime as u64;
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&tag.to_le_bytes());
        seed[16..24].copy_from_slice(&index.to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    /// The `index`-th layout of a regime; a pure function of the seed and index.
    pub fn sample(&self, kind: TaskKind, regime: Regime, index: u64) -> Result<Scenario> {
        let mut rng = self.rng(kind, regime, index);
        let r = self.ranges(regime);
        let dims = &self.dims;
        let docker = |pose| Docker { pose, width: dims.docker_width, depth: dims.docker_depth };
        for _ in 0..MAX_REJECTIONS {
            let start = docker(r.start.sample(&mut rng));
            let (goal, tunnel) = match kind {
                TaskKind::DockerObstacleTunnel => {
                    let mut pose = r.tunnel.sample(&mut rng);
                    let d = pose.position() - start.pose.position();
                    pose.heading = d.y.atan2(d.x) + r.tunnel_turn.sample(&mut rng);
                    (None, Some(Tunnel { pose, length: dims.tunnel_length, width: dims.tunnel_width }))
                }
                _ => (Some(docker(r.goal.sample(&mut rng))), None),
            };
            let mut s = Scenario { task: kind, start, goal, tunnel, obstacle: None };
            if kind.has_obstacle() {
                let a = s.start.pose.position();
                let b = s.target().position();
                let along = rng.random_range(dims.obstacle_along.0..=dims.obstacle_along.1);
                let offset = rng.random_range(dims.obstacle_offset.0..=dims.obstacle_offset.1);
                let dir = (b - a).normalize();
                let c = a + (b - a) * along + P2::new(-dir.y, dir.x) * offset;
                s.obstacle = Some(Obstacle { center: [c.x, c.y], radius: dims.obstacle_radius });
            }
            if s.validate().is_ok() && super::demo::feasible(&s) {
                return Ok(s);
            }
        }
        Err(Error::Infeasible(format!("no valid {} layout after {MAX_REJECTIONS} draws", kind.name())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_replayable() {
        let s = ScenarioSampler::new(3);
        for kind in TaskKind::ALL {
            for regime in [Regime::Train, Regime::Test] {
                assert_eq!(s.sample(kind, regime, 7).unwrap(), ScenarioSampler::new(3).sample(kind, regime, 7).unwrap());
            }
        }
        assert_ne!(s.sample(TaskKind::Docker, Regime::Train, 1).unwrap(), s.sample(TaskKind::Docker, Regime::Train, 2).unwrap());
    }

    #[test]
    fn test_dockers_fall_outside_the_train_box() {
        let s = ScenarioSampler::new(11);
        for i in 0..1000 {
            let sc = s.sample(TaskKind::Docker, Regime::Test, i).unwrap();
            assert!(!s.train.start.contains(&sc.start.pose));
            assert!(!s.train.goal.contains(&sc.goal.unwrap().pose));
        }
    }

    #[test]
    fn obstacles_keep_clear_of_mouths() {
        let s = ScenarioSampler::new(12);
        for kind in [TaskKind::DockerObstacle, TaskKind::DockerObstacleTunnel] {
            for i in 0..200 {
                let sc = s.sample(kind, if i % 2 == 0 { Regime::Train } else { Regime::Test }, i).unwrap();
                let o = sc.obstacle.unwrap();
                for m in [Some(sc.start.pose), sc.goal.map(|g| g.pose)].into_iter().flatten() {
                    assert!((m.position() - o.center()).norm() > o.radius + CLEARANCE);
                }
                assert_eq!(sc.query().num_frames(), 3);
            }
        }
    }

    #[test]
    fn pose_round_trip_and_walls() {
        let p = Pose { x: 0.3, y: 0.4, heading: 1.1 };
        let q = P2::new(0.7, -0.2);
        assert!((p.to_local(p.to_world(q)) - q).norm() < 1e-15);
        let d = Docker { pose: Pose { x: 0.5, y: 0.5, heading: 0.0 }, width: 0.06, depth: 0.04 };
        let w = d.walls();
        assert!((w[1].a - P2::new(0.46, 0.53)).norm() < 1e-15);
        let mut sc = ScenarioSampler::new(0).sample(TaskKind::Docker, Regime::Train, 0).unwrap();
        sc.goal = None;
        assert!(sc.validate().is_err());
        assert_eq!("docker-obstacle".parse::<TaskKind>().unwrap(), TaskKind::DockerObstacle);
    }
}
