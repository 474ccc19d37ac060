//! Frames, trajectories, and the transforms between task space and local frames.
//!
//! A [`Frame`] `(A, b)` is the pose of a local coordinate system expressed in
//! task space. Points move into a frame with `Aᵀ(y − b)` and back out with
//! `A·y + b`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOL: f64 = 1e-6;

/// Default variance floor added before inverting per-timestep variances.
pub const DEFAULT_EPSILON: f64 = 0.01;

/// Default number of samples every trajectory is resampled to.
pub const DEFAULT_HORIZON: usize = 50;

/// A fixed-length sequence of `D`-dimensional points, stored `T×D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Trajectory {
    points: Array2<f64>,
}

impl Trajectory {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() < 2 {
            return Err(Error::Degenerate(format!(
                "trajectory needs at least 2 points, got {}",
                points.nrows()
            )));
        }
        if points.ncols() == 0 {
            return Err(Error::Dimension("trajectory points have zero dimension".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("trajectory contains non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged trajectory rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let points = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn point(&self, t: usize) -> ArrayView1<'_, f64> {
        self.points.row(t)
    }

    pub fn into_points(self) -> Array2<f64> {
        self.points
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.points.outer_iter().map(|r| r.to_vec()).collect()
    }

    /// Polyline length.
    pub fn arc_length(&self) -> f64 {
        self.points
            .axis_windows(Axis(0), 2)
            .into_iter()
            .map(|w| dist(w.row(0), w.row(1)))
            .sum()
    }

    /// Largest distance between consecutive points.
    pub fn max_step(&self) -> f64 {
        self.points
            .axis_windows(Axis(0), 2)
            .into_iter()
            .map(|w| dist(w.row(0), w.row(1)))
            .fold(0.0, f64::max)
    }

    /// Largest coordinate-wise absolute difference to `other`.
    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.points
            .iter()
            .zip(other.points.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Root mean square of per-point Euclidean distances to `other`.
    pub fn rms_distance(&self, other: &Trajectory) -> f64 {
        let n = self.len() as f64;
        let ss: f64 = self
            .points
            .outer_iter()
            .zip(other.points.outer_iter())
            .map(|(a, b)| dist(a, b).powi(2))
            .sum();
        (ss / n).sqrt()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Trajectory {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<Trajectory> for Vec<Vec<f64>> {
    fn from(t: Trajectory) -> Self {
        t.to_rows()
    }
}

fn dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Pose of a local frame in task space: orthonormal rotation plus translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FrameRepr", into = "FrameRepr")]
pub struct Frame {
    rotation: Array2<f64>,
    translation: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct FrameRepr {
    rotation: Vec<Vec<f64>>,
    translation: Vec<f64>,
}

impl TryFrom<FrameRepr> for Frame {
    type Error = Error;

    fn try_from(r: FrameRepr) -> Result<Self> {
        let d = r.translation.len();
        if r.rotation.len() != d || r.rotation.iter().any(|row| row.len() != d) {
            return Err(Error::Dimension(format!("rotation must be {d}x{d}")));
        }
        let flat: Vec<f64> = r.rotation.into_iter().flatten().collect();
        let rot = Array2::from_shape_vec((d, d), flat).map_err(|e| Error::Dimension(e.to_string()))?;
        Frame::new(rot, Array1::from(r.translation))
    }
}

impl From<Frame> for FrameRepr {
    fn from(f: Frame) -> Self {
        FrameRepr {
            rotation: f.rotation.outer_iter().map(|r| r.to_vec()).collect(),
            translation: f.translation.to_vec(),
        }
    }
}

impl Frame {
    pub fn new(rotation: Array2<f64>, translation: Array1<f64>) -> Result<Self> {
        let d = translation.len();
        if d == 0 || rotation.dim() != (d, d) {
            return Err(Error::Dimension(format!(
                "rotation {:?} does not match translation length {d}",
                rotation.dim()
            )));
        }
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidFrame("non-finite entries".into()));
        }
        let gram = rotation.t().dot(&rotation);
        let ortho_err = gram
            .indexed_iter()
            .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).powi(2))
            .sum::<f64>()
            .sqrt();
        if ortho_err > ROTATION_TOL {
            return Err(Error::InvalidFrame(format!("rotation not orthonormal (err {ortho_err:.3e})")));
        }
        let det = determinant(&rotation);
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidFrame(format!("rotation determinant {det} != 1")));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity(dim: usize) -> Self {
        Self { rotation: Array2::eye(dim), translation: Array1::zeros(dim) }
    }

    /// Planar frame at `(x, y)` whose local x-axis points along `heading` radians.
    pub fn planar(x: f64, y: f64, heading: f64) -> Self {
        let (s, c) = heading.sin_cos();
        Self {
            rotation: ndarray::arr2(&[[c, -s], [s, c]]),
            translation: ndarray::arr1(&[x, y]),
        }
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    pub fn rotation(&self) -> &Array2<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Array1<f64> {
        &self.translation
    }

    /// Heading of the local x-axis (planar frames only).
    pub fn heading(&self) -> f64 {
        self.rotation[[1, 0]].atan2(self.rotation[[0, 0]])
    }

    /// Maps a task-space point into this frame.
    pub fn point_to_local(&self, p: ArrayView1<'_, f64>) -> Array1<f64> {
        self.rotation.t().dot(&(&p - &self.translation))
    }

    /// Maps a local point into task space.
    pub fn point_to_global(&self, p: ArrayView1<'_, f64>) -> Array1<f64> {
        self.rotation.dot(&p) + &self.translation
    }

    /// Maps a local direction into task space (rotation only).
    pub fn dir_to_global(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        self.rotation.dot(&v)
    }

    pub fn dir_to_local(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        self.rotation.t().dot(&v)
    }

    /// Composition `self ∘ inner`: first express in `inner`, then treat the
    /// result as local coordinates of `self`. Used to move a whole frame by a
    /// rigid transform `g` via `g.compose(&frame)`.
    pub fn compose(&self, inner: &Frame) -> Result<Frame> {
        if self.dim() != inner.dim() {
            return Err(Error::Dimension("frame dimensions differ".into()));
        }
        Ok(Frame {
            rotation: self.rotation.dot(&inner.rotation),
            translation: self.rotation.dot(&inner.translation) + &self.translation,
        })
    }
}

fn determinant(m: &Array2<f64>) -> f64 {
    let d = m.nrows();
    let mat = nalgebra::DMatrix::from_fn(d, d, |i, j| m[[i, j]]);
    mat.determinant()
}

/// Expresses a task-space trajectory in `frame`.
pub fn to_local(traj: &Trajectory, frame: &Frame) -> Result<Trajectory> {
    check_dims(traj, frame)?;
    let shifted = &traj.points - &frame.translation.view().insert_axis(Axis(0));
    // rows are points, so y_local = (y - b) A
    Ok(Trajectory { points: shifted.dot(&frame.rotation) })
}

/// Maps a trajectory expressed in `frame` back into task space.
pub fn to_global(traj: &Trajectory, frame: &Frame) -> Result<Trajectory> {
    check_dims(traj, frame)?;
    let rotated = traj.points.dot(&frame.rotation.t());
    Ok(Trajectory { points: rotated + &frame.translation.view().insert_axis(Axis(0)) })
}

fn check_dims(traj: &Trajectory, frame: &Frame) -> Result<()> {
    if traj.dim() != frame.dim() {
        return Err(Error::Dimension(format!(
            "trajectory dimension {} vs frame dimension {}",
            traj.dim(),
            frame.dim()
        )));
    }
    Ok(())
}

/// Resamples a polyline to `t_out` points spaced uniformly along it.
///
/// Output points lie on the input polyline and both endpoints are reproduced
/// exactly. For stroke-like inputs the spacing is refined so consecutive
/// output points are equally far apart (equal chords); an equal-chord input
/// with `t_out` points is returned unchanged, which makes resampling
/// idempotent. Inputs with sharp reversals fall back to uniform arc-length
/// interpolation.
pub fn resample(traj: &Trajectory, t_out: usize) -> Result<Trajectory> {
    if t_out < 2 {
        return Err(Error::InvalidInput(format!("t_out must be >= 2, got {t_out}")));
    }
    let d = traj.dim();
    if traj.len() == t_out && is_equal_chord(traj) {
        return Ok(traj.clone());
    }
    // drop repeated points so every segment has positive length
    let mut verts: Vec<Array1<f64>> = Vec::with_capacity(traj.len());
    for row in traj.points.outer_iter() {
        if verts.last().is_none_or(|last| dist(last.view(), row) > 0.0) {
            verts.push(row.to_owned());
        }
    }
    let first = traj.points.row(0).to_owned();
    let last = traj.points.row(traj.len() - 1).to_owned();
    if verts.len() < 2 {
        return Err(Error::Degenerate("trajectory has zero length".into()));
    }
    let seg_len: Vec<f64> = verts.windows(2).map(|w| dist(w[0].view(), w[1].view())).collect();
    let total: f64 = seg_len.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Degenerate("trajectory has zero length".into()));
    }

    if t_out == 2 {
        return Trajectory::new(ndarray::stack![Axis(0), first, last]);
    }

    let steps = t_out - 1;
    // bisect on whether the last gap is shorter than the chord; the walk can
    // jump where the circle grazes the polyline, so scan for every bracket
    let overshoots = |w: &ChordWalk, c: f64| w.points.len() < steps - 1 || dist(last.view(), w.points[steps - 2].view()) < c;
    let c_max = total / steps as f64;
    let grid: Vec<f64> = (1..=SCAN).map(|i| c_max * i as f64 / SCAN as f64).collect();
    let flags: Vec<bool> = grid.iter().map(|&c| overshoots(&walk_chords(&verts, &seg_len, c, steps - 1), c)).collect();
    for i in 0..SCAN {
        let (mut lo, mut hi) = match i {
            0 if flags[0] => (0.0, grid[0]),
            0 => continue,
            _ if !flags[i - 1] && flags[i] => (grid[i - 1], grid[i]),
            _ => continue,
        };
        let mut best = None;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let w = walk_chords(&verts, &seg_len, mid, steps - 1);
            if overshoots(&w, mid) {
                hi = mid;
            } else {
                lo = mid;
                best = Some(w);
            }
            if hi - lo <= 1e-16 * total {
                break;
            }
        }
        let Some(best) = best else { continue };
        let mut out = Array2::zeros((t_out, d));
        out.row_mut(0).assign(&first);
        out.row_mut(t_out - 1).assign(&last);
        for (k, p) in best.points.iter().enumerate() {
            out.row_mut(k + 1).assign(p);
        }
        let out = Trajectory::new(out)?;
        if is_equal_chord(&out) {
            return Ok(out);
        }
    }
    // no equal-chord spacing found: plain arc-length spacing
    Ok(resample_arc_length(&verts, &seg_len, total, t_out, first, last))
}

/// Chord lengths probed before bisecting when resampling.
const SCAN: usize = 64;

/// Consecutive points equally spaced to within a relative `1e-9`.
fn is_equal_chord(traj: &Trajectory) -> bool {
    let chords: Vec<f64> = traj
        .points
        .axis_windows(Axis(0), 2)
        .into_iter()
        .map(|w| dist(w.row(0), w.row(1)))
        .collect();
    let mean = chords.iter().sum::<f64>() / chords.len() as f64;
    mean > 0.0 && chords.iter().all(|c| (c - mean).abs() <= 1e-9 * mean)
}

struct ChordWalk {
    points: Vec<Array1<f64>>,
}

fn walk_chords(verts: &[Array1<f64>], seg_len: &[f64], chord: f64, steps: usize) -> ChordWalk {
    let mut points = Vec::with_capacity(steps);
    let mut seg = 0usize;
    let mut s_min = 0.0; // fraction along the current segment
    let mut p = verts[0].clone();
    'outer: for _ in 0..steps {
        // first point further along the polyline at distance `chord` from p
        let mut j = seg;
        loop {
            if j >= seg_len.len() {
                break 'outer;
            }
            let a = &verts[j];
            let dvec = &verts[j + 1] - a;
            let ap = a - &p;
            let dd = dvec.dot(&dvec);
            let beta = ap.dot(&dvec);
            let c0 = ap.dot(&ap) - chord * chord;
            let disc = beta * beta - dd * c0;
            let from = if j == seg { s_min } else { 0.0 };
            if disc >= 0.0 {
                let root = disc.sqrt();
                let hit = [(-beta - root) / dd, (-beta + root) / dd]
                    .into_iter()
                    .find(|s| *s > from && *s <= 1.0);
                if let Some(s) = hit {
                    seg = j;
                    s_min = s;
                    p = lerp(&verts[j], &verts[j + 1], s);
                    points.push(p.clone());
                    break;
                }
            }
            j += 1;
        }
    }
    ChordWalk { points }
}

fn lerp(a: &Array1<f64>, b: &Array1<f64>, s: f64) -> Array1<f64> {
    a + &((b - a) * s)
}

fn resample_arc_length(
    verts: &[Array1<f64>],
    seg_len: &[f64],
    total: f64,
    t_out: usize,
    first: Array1<f64>,
    last: Array1<f64>,
) -> Trajectory {
    let d = first.len();
    let mut out = Array2::zeros((t_out, d));
    out.row_mut(0).assign(&first);
    out.row_mut(t_out - 1).assign(&last);
    let mut seg = 0;
    let mut acc = 0.0;
    for i in 1..t_out - 1 {
        let target = total * i as f64 / (t_out - 1) as f64;
        while seg + 1 < seg_len.len() && acc + seg_len[seg] < target {
            acc += seg_len[seg];
            seg += 1;
        }
        let s = ((target - acc) / seg_len[seg]).clamp(0.0, 1.0);
        out.row_mut(i).assign(&lerp(&verts[seg], &verts[seg + 1], s));
    }
    Trajectory { points: out }
}

/// Per-timestep reproduction weights derived from the least-variable frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameVarianceProfile {
    /// Minimal per-timestep variance over frames.
    pub v: Vec<f64>,
    /// Reproduction weights `1 / (v + epsilon)`.
    pub w: Vec<f64>,
    pub epsilon: f64,
}

impl FrameVarianceProfile {
    pub fn from_variances(v: Vec<f64>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
        }
        let w = v.iter().map(|vt| 1.0 / (vt + epsilon)).collect();
        Ok(Self { v, w, epsilon })
    }

    pub fn horizon(&self) -> usize {
        self.w.len()
    }
}

/// Scalar variance of a set of points: trace of the unbiased sample covariance.
pub fn point_set_variance<'a>(points: impl Iterator<Item = ArrayView1<'a, f64>>) -> f64 {
    let pts: Vec<ArrayView1<'a, f64>> = points.collect();
    let n = pts.len();
    if n < 2 {
        return 0.0;
    }
    let d = pts[0].len();
    let mut mean = Array1::<f64>::zeros(d);
    for p in &pts {
        mean += p;
    }
    mean /= n as f64;
    let ss: f64 = pts.iter().map(|p| (p - &mean).mapv(|v| v * v).sum()).sum();
    ss / (n - 1) as f64
}

/// Builds the variance profile from `K` sets of `N` local trajectories.
pub fn variance_profile(local_sets: &[Vec<Trajectory>], epsilon: f64) -> Result<FrameVarianceProfile> {
    let first = local_sets
        .first()
        .ok_or_else(|| Error::InvalidInput("need at least one frame".into()))?;
    let n = first.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("variance needs N >= 2 demonstrations, got {n}")));
    }
    let t_len = first[0].len();
    let d = first[0].dim();
    for set in local_sets {
        if set.len() != n {
            return Err(Error::Dimension("frames hold different demonstration counts".into()));
        }
        if set.iter().any(|tr| tr.len() != t_len || tr.dim() != d) {
            return Err(Error::Dimension("local trajectories differ in shape".into()));
        }
    }
    let v: Vec<f64> = (0..t_len)
        .map(|t| {
            local_sets
                .iter()
                .map(|set| point_set_variance(set.iter().map(|tr| tr.point(t))))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    FrameVarianceProfile::from_variances(v, epsilon)
}

/// Rigid task description: the poses of the `K` local frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskQuery {
    pub frames: Vec<Frame>,
}

impl TaskQuery {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let q = Self { frames };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::InvalidInput("task query needs at least one frame".into()))?;
        if self.frames.iter().any(|f| f.dim() != first.dim()) {
            return Err(Error::Dimension("frames differ in dimension".into()));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map(Frame::dim).unwrap_or(0)
    }

    /// Moves every frame by the rigid transform `g`.
    pub fn transformed(&self, g: &Frame) -> Result<TaskQuery> {
        let frames = self.frames.iter().map(|f| g.compose(f)).collect::<Result<Vec<_>>>()?;
        Ok(TaskQuery { frames })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub query: TaskQuery,
    pub trajectory: Trajectory,
}

impl Demonstration {
    pub fn new(query: TaskQuery, trajectory: Trajectory) -> Result<Self> {
        query.validate()?;
        if query.dim() != trajectory.dim() {
            return Err(Error::Dimension(format!(
                "trajectory dimension {} vs frame dimension {}",
                trajectory.dim(),
                query.dim()
            )));
        }
        Ok(Self { query, trajectory })
    }

    /// The demonstration expressed in each of its frames.
    pub fn local_trajectories(&self) -> Result<Vec<Trajectory>> {
        self.query.frames.iter().map(|f| to_local(&self.trajectory, f)).collect()
    }
}

pub const DATASET_SCHEMA: u32 = 1;

/// A set of demonstrations sharing frame count, dimension, and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetFile", into = "DatasetFile")]
pub struct Dataset {
    demos: Vec<Demonstration>,
    dim: usize,
    horizon: usize,
    num_frames: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    schema: u32,
    dim: usize,
    horizon: usize,
    num_frames: usize,
    demos: Vec<Demonstration>,
}

impl TryFrom<DatasetFile> for Dataset {
    type Error = Error;

    fn try_from(f: DatasetFile) -> Result<Self> {
        if f.schema != DATASET_SCHEMA {
            return Err(Error::Schema(format!("unsupported dataset schema {}", f.schema)));
        }
        let ds = Dataset::new(f.demos)?;
        if ds.demos.is_empty() {
            return Ok(Dataset { demos: vec![], dim: f.dim, horizon: f.horizon, num_frames: f.num_frames });
        }
        if ds.dim != f.dim || ds.horizon != f.horizon || ds.num_frames != f.num_frames {
            return Err(Error::Schema(format!(
                "header (dim {}, horizon {}, frames {}) disagrees with demos (dim {}, horizon {}, frames {})",
                f.dim, f.horizon, f.num_frames, ds.dim, ds.horizon, ds.num_frames
            )));
        }
        Ok(ds)
    }
}

impl From<Dataset> for DatasetFile {
    fn from(d: Dataset) -> Self {
        DatasetFile {
            schema: DATASET_SCHEMA,
            dim: d.dim,
            horizon: d.horizon,
            num_frames: d.num_frames,
            demos: d.demos,
        }
    }
}

impl Dataset {
    pub fn new(demos: Vec<Demonstration>) -> Result<Self> {
        let Some(first) = demos.first() else {
            return Ok(Self { demos, dim: 0, horizon: 0, num_frames: 0 });
        };
        let (dim, horizon, num_frames) = (first.trajectory.dim(), first.trajectory.len(), first.query.num_frames());
        for (i, d) in demos.iter().enumerate() {
            if d.trajectory.dim() != dim || d.query.dim() != dim {
                return Err(Error::Dimension(format!("demo {i} has a different dimension")));
            }
            if d.trajectory.len() != horizon {
                return Err(Error::Dimension(format!(
                    "demo {i} has {} points, expected {horizon}",
                    d.trajectory.len()
                )));
            }
            if d.query.num_frames() != num_frames {
                return Err(Error::Dimension(format!("demo {i} has a different frame count")));
            }
        }
        Ok(Self { demos, dim, horizon, num_frames })
    }

    /// Resamples every demonstration to `horizon` points before collecting them.
    pub fn resampled(demos: Vec<Demonstration>, horizon: usize) -> Result<Self> {
        let demos = demos
            .into_iter()
            .map(|d| {
                let trajectory = if d.trajectory.len() == horizon {
                    d.trajectory
                } else {
                    resample(&d.trajectory, horizon)?
                };
                Demonstration::new(d.query, trajectory)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(demos)
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    /// `K` lists (one per frame) of the `N` local trajectories.
    pub fn local_sets(&self) -> Result<Vec<Vec<Trajectory>>> {
        let mut sets = vec![Vec::with_capacity(self.len()); self.num_frames];
        for demo in &self.demos {
            for (k, local) in demo.local_trajectories()?.into_iter().enumerate() {
                sets[k].push(local);
            }
        }
        Ok(sets)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
