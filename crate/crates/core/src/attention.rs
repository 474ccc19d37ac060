//! Shift attention: a recurrent schedule of weights over the `K` local frames
//! that blends per-frame trajectories, each mapped back to task space,
//!
//! ```text
//! ŷ_t = Σ_k a_{k,t} · T_k⁻¹(NVP_k⁻¹(z_{k,t}))
//! ```
//!
//! The network never sees the task query. Its input at step `t` is
//! `[z_{1,t}, …, z_{K,t}, t/T]`, so under the mean-latent policy the schedule
//! is a fixed function of time shared by every query. Because every term of
//! the blend is a rigid map of a query-independent local trajectory, moving
//! all frames by a rigid transform moves the output by the same transform.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Adam, AdamConfig, Bound, Dense, GruCell, Init, Mat, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{train_flow_with, FlowConfig, FlowModel, FlowReport};
use crate::geometry::{to_global, variance_profile, Dataset, FrameVarianceProfile, TaskQuery, Trajectory};

/// Tolerance on attention rows accepted by [`combine`].
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Relative weights of the attention training costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub traj: f64,
    pub point: f64,
    pub smooth: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { traj: 10.0, point: 1.0, smooth: 1.0 }
    }
}

/// GRU over the latent/time input followed by a linear head and a softmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionNet {
    pub gru: GruCell,
    pub head: Dense,
    pub frames: usize,
    pub dim: usize,
}

impl AttentionNet {
    pub fn new(store: &mut ParamStore, frames: usize, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let gru = GruCell::new(store, "attention.gru", frames * dim + 1, hidden, rng);
        let head = Dense::new(store, "attention.head", hidden, frames, Init::FanIn, rng);
        Self { gru, head, frames, dim }
    }

    pub fn input_size(&self) -> usize {
        self.frames * self.dim + 1
    }

    /// Stacked `(T·B)×K` attention rows for a stacked `(T·B)×(K·D+1)` input.
    pub fn apply(&self, tape: &mut Tape, p: &Bound, input: Var, steps: usize, batch: usize) -> Var {
        let h = self.gru.run(tape, p, input, steps, batch, false);
        let logits = self.head.apply(tape, p, h);
        tape.softmax_rows(logits)
    }
}

/// Network input for one sequence: the frame latents side by side, then `t/T`.
pub fn attention_input(latents: &[Array2<f64>], horizon: usize, dim: usize) -> Array2<f64> {
    let k = latents.len();
    let mut x = Array2::zeros((horizon, k * dim + 1));
    for (i, z) in latents.iter().enumerate() {
        x.slice_mut(ndarray::s![.., i * dim..(i + 1) * dim]).assign(z);
    }
    for t in 0..horizon {
        x[[t, k * dim]] = (t + 1) as f64 / horizon as f64;
    }
    x
}

/// `T×K` attention weights for a single input sequence.
pub fn attention_weights(net: &AttentionNet, params: &ParamStore, input: &Array2<f64>) -> Result<Array2<f64>> {
    if input.ncols() != net.input_size() {
        return Err(Error::Dimension(format!(
            "attention input has {} features, network expects {}",
            input.ncols(),
            net.input_size()
        )));
    }
    let mut tape = Tape::new();
    let p = tape.bind(params);
    let x = tape.constant(input.clone());
    let a = net.apply(&mut tape, &p, x, input.nrows(), 1);
    tape.check_finite()?;
    Ok(tape.value(a).clone())
}

fn check_simplex(weights: &Array2<f64>) -> Result<()> {
    for (t, row) in weights.outer_iter().enumerate() {
        let total: f64 = row.sum();
        if (total - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|a| *a < -SIMPLEX_TOL || !a.is_finite()) {
            return Err(Error::InvalidInput(format!("attention row {t} is not on the simplex")));
        }
    }
    Ok(())
}

/// Per-timestep convex combination of `K` global trajectories.
pub fn combine(weights: &Array2<f64>, decoded: &[Trajectory]) -> Result<Trajectory> {
    let k = decoded.len();
    let first = decoded.first().ok_or_else(|| Error::InvalidInput("nothing to combine".into()))?;
    let (t, d) = (first.len(), first.dim());
    if weights.dim() != (t, k) || decoded.iter().any(|g| g.len() != t || g.dim() != d) {
        return Err(Error::Dimension(format!(
            "weights are {}×{}, decodes are {k} trajectories of {t}×{d}",
            weights.nrows(),
            weights.ncols()
        )));
    }
    check_simplex(weights)?;
    let mut out = Array2::zeros((t, d));
    for (kk, g) in decoded.iter().enumerate() {
        out += &(g.points() * &weights.column(kk).insert_axis(Axis(1)));
    }
    Trajectory::new(out)
}

/// Stacks `N` trajectories time-major into a `(T·N)×D` matrix.
fn stack_time_major(trajs: &[&Array2<f64>]) -> Array2<f64> {
    let n = trajs.len();
    let (t, d) = trajs[0].dim();
    let mut out = Array2::zeros((t * n, d));
    for (i, y) in trajs.iter().enumerate() {
        for s in 0..t {
            out.row_mut(s * n + i).assign(&y.row(s));
        }
    }
    out
}

/// `Σ_n Σ_t w_t‖ξ_t − ξ̂_t‖²` on stacked `(T·N)×D` nodes.
pub fn reprod_tape(tape: &mut Tape, generated: Var, target: &Array2<f64>, w: &[f64], batch: usize) -> Var {
    let c = tape.value(generated).ncols();
    let wm = Array2::from_shape_fn((w.len() * batch, c), |(r, _)| w[r / batch]);
    let y = tape.constant(target.clone());
    let diff = tape.sub(generated, y);
    let sq = tape.mul(diff, diff);
    let weighted = tape.mul_const(sq, Rc::new(wm));
    tape.sum(weighted)
}

/// `log K + (1/N) Σ_n Σ_k ā_k log ā_k` with `ā` the time-averaged attention.
pub fn traj_tape(tape: &mut Tape, attn: Var, steps: usize, batch: usize) -> Var {
    let k = tape.value(attn).ncols();
    let avg = Rc::new(Mat::from_elem((1, steps), 1.0 / steps as f64));
    let abar = tape.left_mul_blocks(avg, attn);
    let ent = tape.xlogx(abar);
    let s = tape.sum(ent);
    let s = tape.scale(s, 1.0 / batch as f64);
    let c = tape.constant(Mat::from_elem((1, 1), (k as f64).ln()));
    tape.add(s, c)
}

/// Mean per-step entropy `(1/(N·T)) Σ −a log a`.
pub fn point_tape(tape: &mut Tape, attn: Var) -> Var {
    let rows = tape.value(attn).nrows();
    let ent = tape.xlogx(attn);
    let s = tape.sum(ent);
    tape.scale(s, -1.0 / rows as f64)
}

/// `(1/N) Σ_n Σ_t ‖ŷ_{t+1} − ŷ_t‖²` on a stacked `(T·N)×D` node.
pub fn smooth_tape(tape: &mut Tape, generated: Var, steps: usize, batch: usize) -> Var {
    let diff = Rc::new(Mat::from_shape_fn((steps - 1, steps), |(i, j)| {
        if j == i + 1 {
            1.0
        } else if j == i {
            -1.0
        } else {
            0.0
        }
    }));
    let d = tape.left_mul_blocks(diff, generated);
    let sq = tape.mul(d, d);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / batch as f64)
}

fn scalar_cost(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.scalar(v)
}

/// Variance-weighted reproduction cost.
pub fn cost_reprod(demos: &[Trajectory], generated: &[Trajectory], profile: &FrameVarianceProfile) -> Result<f64> {
    if demos.len() != generated.len() || demos.is_empty() {
        return Err(Error::Dimension("demos and generated trajectories differ in count".into()));
    }
    let t = demos[0].len();
    if demos.iter().chain(generated).any(|g| g.len() != t || g.dim() != demos[0].dim()) || profile.w.len() != t {
        return Err(Error::Dimension("trajectories and profile disagree in shape".into()));
    }
    let g = stack_time_major(&generated.iter().map(|g| g.points()).collect::<Vec<_>>());
    let y = stack_time_major(&demos.iter().map(|g| g.points()).collect::<Vec<_>>());
    Ok(scalar_cost(|tape| {
        let gv = tape.constant(g);
        reprod_tape(tape, gv, &y, &profile.w, demos.len())
    }))
}

fn stack_attention(attn: &[Array2<f64>]) -> Result<(Array2<f64>, usize, usize)> {
    let first = attn.first().ok_or_else(|| Error::InvalidInput("no attention sequences".into()))?;
    if attn.iter().any(|a| a.dim() != first.dim()) {
        return Err(Error::Dimension("attention sequences differ in shape".into()));
    }
    for a in attn {
        check_simplex(a)?;
    }
    Ok((stack_time_major(&attn.iter().collect::<Vec<_>>()), first.nrows(), attn.len()))
}

/// Attention distribution over the whole task: `0` when each frame gets the
/// same share on average, `log K` when one frame takes everything.
pub fn cost_traj(attn: &[Array2<f64>]) -> Result<f64> {
    let (a, steps, n) = stack_attention(attn)?;
    Ok(scalar_cost(|tape| {
        let v = tape.constant(a);
        traj_tape(tape, v, steps, n)
    }))
}

/// Attention concentration per step: `0` when one-hot, `log K` when uniform.
pub fn cost_point(attn: &[Array2<f64>]) -> Result<f64> {
    let (a, _, _) = stack_attention(attn)?;
    Ok(scalar_cost(|tape| {
        let v = tape.constant(a);
        point_tape(tape, v)
    }))
}

pub fn cost_dist(attn: &[Array2<f64>], weights: &CostWeights) -> Result<f64> {
    Ok(weights.traj * cost_traj(attn)? + weights.point * cost_point(attn)?)
}

pub fn cost_smooth(generated: &[Trajectory]) -> Result<f64> {
    let first = generated.first().ok_or_else(|| Error::InvalidInput("no trajectories".into()))?;
    if generated.iter().any(|g| g.len() != first.len() || g.dim() != first.dim()) {
        return Err(Error::Dimension("trajectories differ in shape".into()));
    }
    let g = stack_time_major(&generated.iter().map(|g| g.points()).collect::<Vec<_>>());
    Ok(scalar_cost(|tape| {
        let v = tape.constant(g);
        smooth_tape(tape, v, first.len(), generated.len())
    }))
}

/// How latents are chosen when generating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LatentPolicy {
    /// The prior mean, the all-zero sequence.
    Mean,
    /// A prior draw from a seeded generator.
    Sample { seed: u64 },
}

/// Per-frame local trajectory model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LocalModel {
    /// Recurrent RealNVP decoded from a latent sequence.
    Flow(FlowModel),
    /// Per-timestep mean and variance of the local trajectories.
    Mean { mean: Trajectory, variance: Vec<f64> },
}

impl LocalModel {
    pub fn decode(&self, latent: &Array2<f64>) -> Result<Trajectory> {
        match self {
            LocalModel::Flow(f) => f.decode(latent),
            LocalModel::Mean { mean, .. } => Ok(mean.clone()),
        }
    }

    pub fn latent(&self, policy: LatentPolicy, frame: usize) -> Result<Array2<f64>> {
        match (self, policy) {
            (LocalModel::Flow(f), LatentPolicy::Sample { seed }) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(frame as u64));
                f.flow.sample_latent(&mut rng)
            }
            (LocalModel::Flow(f), LatentPolicy::Mean) => Ok(Array2::zeros((f.flow.horizon(), f.flow.dim()))),
            (LocalModel::Mean { mean, .. }, _) => Ok(Array2::zeros(mean.points().dim())),
        }
    }
}

/// Flow-based locals (SALaT) or mean-trajectory locals (SALiT).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Salat,
    Salit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub costs: CostWeights,
    pub policy: LatentPolicy,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 3000,
            lr: 1e-3,
            costs: CostWeights::default(),
            policy: LatentPolicy::Mean,
            epsilon: crate::geometry::DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

/// Cost breakdown at one parameter setting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub reprod: f64,
    pub traj: f64,
    pub point: f64,
    pub smooth: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub initial: CostBreakdown,
    pub best: CostBreakdown,
    pub best_epoch: usize,
    pub losses: Vec<f64>,
}

impl AttentionReport {
    pub fn improvement(&self) -> f64 {
        (self.initial.total - self.best.total) / self.initial.total.abs().max(f64::MIN_POSITIVE)
    }
}

/// Trained SALaT or SALiT model: local models, attention net, and the
/// variance profile it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BundleFile", into = "BundleFile")]
pub struct ShiftAttentionModel {
    pub kind: ModelKind,
    pub locals: Vec<LocalModel>,
    pub net: AttentionNet,
    pub params: ParamStore,
    pub profile: FrameVarianceProfile,
    pub policy: LatentPolicy,
    pub horizon: usize,
    pub dim: usize,
    pub hidden: usize,
}

/// Output of one generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub trajectory: Trajectory,
    /// `T×K` attention rows.
    pub attention: Vec<Vec<f64>>,
    /// Each frame's local trajectory mapped into task space.
    pub frame_trajectories: Vec<Trajectory>,
}

impl ShiftAttentionModel {
    pub fn num_frames(&self) -> usize {
        self.locals.len()
    }

    fn latents(&self, policy: LatentPolicy) -> Result<Vec<Array2<f64>>> {
        self.locals.iter().enumerate().map(|(k, l)| l.latent(policy, k)).collect()
    }

    /// Local trajectories under `policy`, in frame coordinates.
    pub fn local_trajectories(&self, policy: LatentPolicy) -> Result<Vec<Trajectory>> {
        let z = self.latents(policy)?;
        self.locals.iter().zip(&z).map(|(l, z)| l.decode(z)).collect()
    }

    /// The attention schedule under `policy`.
    pub fn schedule(&self, policy: LatentPolicy) -> Result<Array2<f64>> {
        let z = self.latents(policy)?;
        attention_weights(&self.net, &self.params, &attention_input(&z, self.horizon, self.dim))
    }

    pub fn generate(&self, query: &TaskQuery) -> Result<Generation> {
        self.generate_with(query, self.policy)
    }

    pub fn generate_with(&self, query: &TaskQuery, policy: LatentPolicy) -> Result<Generation> {
        query.validate()?;
        if query.num_frames() != self.num_frames() {
            return Err(Error::Dimension(format!(
                "query has {} frames, model was trained with {}",
                query.num_frames(),
                self.num_frames()
            )));
        }
        if query.dim() != self.dim {
            return Err(Error::Dimension(format!("query dimension {} vs model dimension {}", query.dim(), self.dim)));
        }
        let local = self.local_trajectories(policy)?;
        let global = local
            .iter()
            .zip(&query.frames)
            .map(|(l, f)| to_global(l, f))
            .collect::<Result<Vec<_>>>()?;
        let weights = self.schedule(policy)?;
        let trajectory = combine(&weights, &global)?;
        Ok(Generation {
            trajectory,
            attention: weights.outer_iter().map(|r| r.to_vec()).collect(),
            frame_trajectories: global,
        })
    }

    /// Cost breakdown of the current parameters on `data`.
    pub fn costs(&self, data: &Dataset, weights: &CostWeights) -> Result<CostBreakdown> {
        let problem = Objective::new(self, data, weights)?;
        problem.evaluate(&self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub const BUNDLE_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BundleFile {
    schema: u32,
    kind: ModelKind,
    num_frames: usize,
    dim: usize,
    horizon: usize,
    hidden: usize,
    policy: LatentPolicy,
    locals: Vec<LocalModel>,
    attention: ParamStore,
    profile: FrameVarianceProfile,
}

impl From<ShiftAttentionModel> for BundleFile {
    fn from(m: ShiftAttentionModel) -> Self {
        BundleFile {
            schema: BUNDLE_SCHEMA,
            kind: m.kind,
            num_frames: m.locals.len(),
            dim: m.dim,
            horizon: m.horizon,
            hidden: m.hidden,
            policy: m.policy,
            locals: m.locals,
            attention: m.params,
            profile: m.profile,
        }
    }
}

impl TryFrom<BundleFile> for ShiftAttentionModel {
    type Error = Error;

    fn try_from(f: BundleFile) -> Result<Self> {
        if f.schema != BUNDLE_SCHEMA {
            return Err(Error::Schema(format!("unsupported model schema {}", f.schema)));
        }
        if f.locals.len() != f.num_frames || f.num_frames == 0 {
            return Err(Error::Schema(format!("header declares {} frames, bundle holds {}", f.num_frames, f.locals.len())));
        }
        for l in &f.locals {
            let (t, d) = match l {
                LocalModel::Flow(m) => (m.flow.horizon(), m.flow.dim()),
                LocalModel::Mean { mean, variance } => {
                    if variance.len() != mean.len() {
                        return Err(Error::Schema("mean model variance length differs from its horizon".into()));
                    }
                    mean.points().dim()
                }
            };
            if (t, d) != (f.horizon, f.dim) {
                return Err(Error::Schema("local model shape disagrees with the header".into()));
            }
        }
        if f.profile.w.len() != f.horizon {
            return Err(Error::Schema("variance profile length differs from the horizon".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = AttentionNet::new(&mut store, f.num_frames, f.dim, f.hidden, &mut rng);
        let matches = store.len() == f.attention.len()
            && store.iter().zip(f.attention.iter()).all(|((na, a), (nb, b))| na == nb && a.dim() == b.dim());
        if !matches {
            return Err(Error::Schema("attention weights do not match the declared shape".into()));
        }
        Ok(ShiftAttentionModel {
            kind: f.kind,
            locals: f.locals,
            net,
            params: f.attention,
            profile: f.profile,
            policy: f.policy,
            horizon: f.horizon,
            dim: f.dim,
            hidden: f.hidden,
        })
    }
}

/// The attention training objective; everything except the net weights is
/// fixed and precomputed.
pub struct Objective {
    net: AttentionNet,
    input: Array2<f64>,
    /// `(T·N)×(K·D)`: every demo's frames applied to the local decodes.
    frames_global: Rc<Mat>,
    target: Array2<f64>,
    w: Vec<f64>,
    steps: usize,
    n: usize,
    /// 1 under the mean policy: one schedule shared by every demo
    batch: usize,
    costs: CostWeights,
}

impl Objective {
    pub fn new(model: &ShiftAttentionModel, data: &Dataset, costs: &CostWeights) -> Result<Self> {
        if data.num_frames() != model.num_frames() || data.horizon() != model.horizon || data.dim() != model.dim {
            return Err(Error::Dimension("dataset shape disagrees with the model".into()));
        }
        let (steps, n, k, d) = (model.horizon, data.len(), model.num_frames(), model.dim);
        let per_demo: Vec<(Vec<Array2<f64>>, Vec<Trajectory>)> = match model.policy {
            LatentPolicy::Mean => {
                let z = model.latents(LatentPolicy::Mean)?;
                let local = model.local_trajectories(LatentPolicy::Mean)?;
                vec![(z, local)]
            }
            LatentPolicy::Sample { seed } => (0..n)
                .map(|i| {
                    let p = LatentPolicy::Sample { seed: seed.wrapping_add(i as u64) };
                    Ok((model.latents(p)?, model.local_trajectories(p)?))
                })
                .collect::<Result<_>>()?,
        };
        let batch = per_demo.len();
        let inputs: Vec<Array2<f64>> = per_demo.iter().map(|(z, _)| attention_input(z, steps, d)).collect();
        let input = stack_time_major(&inputs.iter().collect::<Vec<_>>());
        let mut g = Mat::zeros((steps * n, k * d));
        for (i, demo) in data.demos().iter().enumerate() {
            let local = &per_demo[i.min(batch - 1)].1;
            for (kk, (l, f)) in local.iter().zip(&demo.query.frames).enumerate() {
                let gl = to_global(l, f)?;
                for t in 0..steps {
                    g.slice_mut(ndarray::s![t * n + i, kk * d..(kk + 1) * d]).assign(&gl.point(t));
                }
            }
        }
        let target = stack_time_major(&data.demos().iter().map(|d| d.trajectory.points()).collect::<Vec<_>>());
        Ok(Self {
            net: model.net,
            input,
            frames_global: Rc::new(g),
            target,
            w: model.profile.w.clone(),
            steps,
            n,
            batch,
            costs: *costs,
        })
    }

    /// Builds all four costs; returns `(total, [reprod, traj, point, smooth])`.
    pub fn build(&self, tape: &mut Tape, p: &Bound) -> (Var, [Var; 4]) {
        let x = tape.constant(self.input.clone());
        let attn = self.net.apply(tape, p, x, self.steps, self.batch);
        let expanded = if self.batch == 1 { tape.repeat_rows(attn, self.n) } else { attn };
        let yhat = tape.combine(expanded, self.frames_global.clone());
        let reprod = reprod_tape(tape, yhat, &self.target, &self.w, self.n);
        let traj = traj_tape(tape, attn, self.steps, self.batch);
        let point = point_tape(tape, attn);
        let smooth = smooth_tape(tape, yhat, self.steps, self.n);
        let a = tape.scale(traj, self.costs.traj);
        let b = tape.scale(point, self.costs.point);
        let c = tape.scale(smooth, self.costs.smooth);
        let total = tape.add(reprod, a);
        let total = tape.add(total, b);
        let total = tape.add(total, c);
        (total, [reprod, traj, point, smooth])
    }

    pub fn evaluate(&self, params: &ParamStore) -> Result<CostBreakdown> {
        let mut tape = Tape::new();
        let p = tape.bind(params);
        let (total, parts) = self.build(&mut tape, &p);
        tape.check_finite()?;
        Ok(CostBreakdown {
            reprod: tape.scalar(parts[0]),
            traj: tape.scalar(parts[1]),
            point: tape.scalar(parts[2]),
            smooth: tape.scalar(parts[3]),
            total: tape.scalar(total),
        })
    }
}

/// Local models for every frame: trained flows for SALaT, per-timestep means for SALiT.
pub fn fit_locals(data: &Dataset, kind: ModelKind, flow: &FlowConfig) -> Result<Vec<LocalModel>> {
    Ok(fit_locals_with(data, kind, flow, |_, _, _| {})?.0)
}

/// [`fit_locals`] with a callback receiving `(frame, epoch, loss)`; also
/// returns the flow reports (empty for SALiT).
pub fn fit_locals_with(
    data: &Dataset,
    kind: ModelKind,
    flow: &FlowConfig,
    mut on_epoch: impl FnMut(usize, usize, f64),
) -> Result<(Vec<LocalModel>, Vec<FlowReport>)> {
    let sets = data.local_sets()?;
    let mut locals = Vec::with_capacity(sets.len());
    let mut reports = Vec::new();
    for (k, set) in sets.iter().enumerate() {
        match kind {
            ModelKind::Salat => {
                let cfg = FlowConfig { seed: flow.seed.wrapping_add(k as u64), ..*flow };
                let (m, r) = train_flow_with(set, &cfg, |e, l| on_epoch(k, e, l))?;
                locals.push(LocalModel::Flow(m));
                reports.push(r);
            }
            ModelKind::Salit => locals.push(mean_local(set)?),
        }
    }
    Ok((locals, reports))
}

/// Per-timestep mean and scalar variance of a set of local trajectories.
pub fn mean_local(set: &[Trajectory]) -> Result<LocalModel> {
    let first = set.first().ok_or_else(|| Error::InvalidInput("no local trajectories".into()))?;
    let mut mean = Array2::<f64>::zeros(first.points().dim());
    for s in set {
        mean += s.points();
    }
    mean /= set.len() as f64;
    let variance = (0..first.len())
        .map(|t| crate::geometry::point_set_variance(set.iter().map(|s| s.point(t))))
        .collect();
    Ok(LocalModel::Mean { mean: Trajectory::new(mean)?, variance })
}

/// Trains the attention net on `data` for fixed local models.
pub fn train_attention(
    locals: Vec<LocalModel>,
    data: &Dataset,
    config: &AttentionConfig,
) -> Result<(ShiftAttentionModel, AttentionReport)> {
    train_attention_with(locals, data, config, |_, _| {})
}

pub fn train_attention_with(
    locals: Vec<LocalModel>,
    data: &Dataset,
    config: &AttentionConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(ShiftAttentionModel, AttentionReport)> {
    if data.len() < 2 {
        return Err(Error::InvalidInput(format!("attention training needs N >= 2 demonstrations, got {}", data.len())));
    }
    let kind = if locals.iter().all(|l| matches!(l, LocalModel::Flow(_))) { ModelKind::Salat } else { ModelKind::Salit };
    let profile = variance_profile(&data.local_sets()?, config.epsilon)?;
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = AttentionNet::new(&mut params, data.num_frames(), data.dim(), config.hidden, &mut rng);
    let mut model = ShiftAttentionModel {
        kind,
        locals,
        net,
        params,
        profile,
        policy: config.policy,
        horizon: data.horizon(),
        dim: data.dim(),
        hidden: config.hidden,
    };
    let problem = Objective::new(&model, data, &config.costs)?;
    let initial = problem.evaluate(&model.params)?;
    let mut opt = Adam::new(&model.params, AdamConfig { lr: config.lr, ..Default::default() });
    let mut best = model.params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        let (loss, grads) = diffcore::gradient(&model.params, |t, p| Ok(problem.build(t, p).0))?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite attention loss or gradient at epoch {epoch} (loss {loss}, best {best_loss} at epoch {best_epoch})"
            )));
        }
        losses.push(loss);
        on_epoch(epoch, loss);
        if loss < best_loss {
            best_loss = loss;
            best_epoch = epoch;
            best.clone_from(&model.params);
        }
        if epoch < config.epochs {
            opt.step(&mut model.params, &grads)?;
        }
    }
    model.params = best;
    let best = problem.evaluate(&model.params)?;
    Ok((model, AttentionReport { initial, best, best_epoch, losses }))
}

/// Fits local models and attention in one go.
pub fn train_model(
    data: &Dataset,
    kind: ModelKind,
    flow: &FlowConfig,
    attention: &AttentionConfig,
) -> Result<(ShiftAttentionModel, AttentionReport)> {
    let locals = fit_locals(data, kind, flow)?;
    train_attention(locals, data, attention)
}

/// Everything a full training run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub flows: Vec<FlowReport>,
    pub attention: AttentionReport,
}

/// [`train_model`] reporting overall progress in [0, 1] after every epoch.
pub fn train_model_with(
    data: &Dataset,
    kind: ModelKind,
    flow: &FlowConfig,
    attention: &AttentionConfig,
    mut progress: impl FnMut(f64),
) -> Result<(ShiftAttentionModel, TrainingReport)> {
    let flow_steps = if kind == ModelKind::Salat { data.num_frames() * (flow.epochs + 1) } else { 0 };
    let total = (flow_steps + attention.epochs + 1) as f64;
    let (locals, flows) = fit_locals_with(data, kind, flow, |k, e, _| progress((k * (flow.epochs + 1) + e + 1) as f64 / total))?;
    let (model, attention) = train_attention_with(locals, data, attention, |e, _| progress((flow_steps + e + 1) as f64 / total))?;
    Ok((model, TrainingReport { flows, attention }))
}
