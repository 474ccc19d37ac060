//! Recurrent RealNVP flows over whole local trajectories.
//!
//! A flow maps a `T×D` trajectory to a `T×D` latent sequence through a stack of
//! affine coupling blocks. Each block splits the coordinates into `y₁`/`y₂`:
//!
//! ```text
//! z₁ = y₁ ⊙ exp(s₁(y₂)) + t₁(y₂)
//! z₂ = y₂ ⊙ exp(s₂(z₁)) + t₂(z₁)
//! ```
//!
//! where `s` and `t` are bidirectional GRUs run over the full sequence, so every
//! timestep sees the whole other half. Consecutive blocks swap the roles of the
//! two halves.

use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Adam, AdamConfig, BiGru, Bound, Init, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Trajectory;

/// Bound on scale-net outputs, applied as `c·tanh(s / c)`.
pub const SCALE_CLAMP: f64 = 3.0;

/// Diagonal jitter added to the GP kernel before factorization.
pub const KERNEL_JITTER: f64 = 1e-6;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Latent prior over a `T×D` sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Prior {
    /// Independent standard normal at every timestep.
    Iid,
    /// Squared-exponential GP over time, independently per latent dimension.
    Gp { sigma_f: f64, length_scale: f64 },
}

impl Default for Prior {
    fn default() -> Self {
        Prior::Gp { sigma_f: 1.0, length_scale: 1.0 }
    }
}

/// `K_ij = σ_f²·exp(−(i − j)² / 2l²)` over unit-spaced timesteps, without jitter.
pub fn gp_kernel(horizon: usize, sigma_f: f64, length_scale: f64) -> Result<Array2<f64>> {
    if horizon < 2 {
        return Err(Error::InvalidInput(format!("kernel needs T >= 2, got {horizon}")));
    }
    if !(sigma_f > 0.0 && length_scale > 0.0) {
        return Err(Error::InvalidInput("kernel hyperparameters must be positive".into()));
    }
    let s2 = sigma_f * sigma_f;
    Ok(Array2::from_shape_fn((horizon, horizon), |(i, j)| {
        let d = i as f64 - j as f64;
        s2 * (-d * d / (2.0 * length_scale * length_scale)).exp()
    }))
}

/// Jittered kernel with its inverse, Cholesky factor, and `log det(2πK)`.
#[derive(Debug, Clone)]
pub struct GpFactor {
    pub kernel: Array2<f64>,
    pub inverse: Array2<f64>,
    pub cholesky: Array2<f64>,
    pub log_det_2pi: f64,
}

impl GpFactor {
    pub fn new(horizon: usize, sigma_f: f64, length_scale: f64) -> Result<Self> {
        let mut k = gp_kernel(horizon, sigma_f, length_scale)?;
        for i in 0..horizon {
            k[[i, i]] += KERNEL_JITTER;
        }
        let m = DMatrix::from_fn(horizon, horizon, |i, j| k[[i, j]]);
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::Numerical("GP kernel is not positive definite after jitter".into()))?;
        let l = chol.l();
        let inv = chol.inverse();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            kernel: k,
            inverse: Array2::from_shape_fn((horizon, horizon), |(i, j)| inv[(i, j)]),
            cholesky: Array2::from_shape_fn((horizon, horizon), |(i, j)| l[(i, j)]),
            log_det_2pi: horizon as f64 * LOG_2PI + log_det,
        })
    }

    /// Negative log-density of one latent column under `N(0, K)`.
    pub fn nll(&self, z: &[f64]) -> f64 {
        let v = DVector::from_column_slice(z);
        let kinv = DMatrix::from_fn(self.inverse.nrows(), self.inverse.ncols(), |i, j| self.inverse[[i, j]]);
        0.5 * v.dot(&(kinv * &v)) + 0.5 * self.log_det_2pi
    }
}

/// One two-step affine coupling. Part `A` is columns `0..first`, part `B` the rest;
/// `flipped` makes `B` play the role of `y₁`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingBlock {
    pub first: usize,
    pub flipped: bool,
    pub s1: BiGru,
    pub t1: BiGru,
    pub s2: BiGru,
    pub t2: BiGru,
}

/// Scale and shift outputs of one coupling, all `T×d`.
#[derive(Debug, Clone)]
pub struct CouplingTrace {
    pub s1: Array2<f64>,
    pub t1: Array2<f64>,
    pub s2: Array2<f64>,
    pub t2: Array2<f64>,
}

impl CouplingBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, name: &str, dim: usize, first: usize, flipped: bool, hidden: usize, rng: &mut impl Rng) -> Self {
        let (d1, d2) = if flipped { (dim - first, first) } else { (first, dim - first) };
        Self {
            first,
            flipped,
            s1: BiGru::new(store, &format!("{name}.s1"), d2, hidden, d1, Init::Zero, rng),
            t1: BiGru::new(store, &format!("{name}.t1"), d2, hidden, d1, Init::Zero, rng),
            s2: BiGru::new(store, &format!("{name}.s2"), d1, hidden, d2, Init::Zero, rng),
            t2: BiGru::new(store, &format!("{name}.t2"), d1, hidden, d2, Init::Zero, rng),
        }
    }

    /// Column ranges of `y₁` and `y₂`.
    pub fn parts(&self, dim: usize) -> ((usize, usize), (usize, usize)) {
        let a = (0, self.first);
        let b = (self.first, dim - self.first);
        if self.flipped {
            (b, a)
        } else {
            (a, b)
        }
    }

    fn join(&self, tape: &mut Tape, x1: Var, x2: Var) -> Var {
        if self.flipped {
            tape.concat_cols(&[x2, x1])
        } else {
            tape.concat_cols(&[x1, x2])
        }
    }

    /// Forward coupling on a stacked batch; returns `z` and the per-row log-det.
    pub fn forward_tape(&self, tape: &mut Tape, p: &Bound, y: Var, steps: usize, batch: usize, clamp: f64) -> (Var, Var) {
        let dim = tape.value(y).ncols();
        let ((a1, n1), (a2, n2)) = self.parts(dim);
        let y1 = tape.slice_cols(y, a1, n1);
        let y2 = tape.slice_cols(y, a2, n2);
        let s1 = self.s1.apply(tape, p, y2, steps, batch);
        let s1 = tape.soft_clamp(s1, clamp);
        let t1 = self.t1.apply(tape, p, y2, steps, batch);
        let e1 = tape.exp(s1);
        let z1 = tape.mul(y1, e1);
        let z1 = tape.add(z1, t1);
        let s2 = self.s2.apply(tape, p, z1, steps, batch);
        let s2 = tape.soft_clamp(s2, clamp);
        let t2 = self.t2.apply(tape, p, z1, steps, batch);
        let e2 = tape.exp(s2);
        let z2 = tape.mul(y2, e2);
        let z2 = tape.add(z2, t2);
        let z = self.join(tape, z1, z2);
        let l1 = tape.row_sum(s1);
        let l2 = tape.row_sum(s2);
        (z, tape.add(l1, l2))
    }

    /// Forward on one `T×D` sequence, also returning the net outputs.
    pub fn forward_traced(&self, params: &ParamStore, y: &Array2<f64>, clamp: f64) -> Result<(Array2<f64>, CouplingTrace)> {
        let ((a1, n1), (a2, n2)) = self.parts(y.ncols());
        let steps = y.nrows();
        let mut tape = Tape::new();
        let p = tape.bind(params);
        let y1 = y.slice(ndarray::s![.., a1..a1 + n1]).to_owned();
        let y2 = y.slice(ndarray::s![.., a2..a2 + n2]).to_owned();
        let y2v = tape.constant(y2.clone());
        let s1 = self.s1.apply(&mut tape, &p, y2v, steps, 1);
        let s1 = tape.soft_clamp(s1, clamp);
        let t1 = self.t1.apply(&mut tape, &p, y2v, steps, 1);
        tape.check_finite()?;
        let (s1, t1) = (tape.value(s1).clone(), tape.value(t1).clone());
        let z1 = &y1 * &s1.mapv(f64::exp) + &t1;
        let z1v = tape.constant(z1.clone());
        let s2 = self.s2.apply(&mut tape, &p, z1v, steps, 1);
        let s2 = tape.soft_clamp(s2, clamp);
        let t2 = self.t2.apply(&mut tape, &p, z1v, steps, 1);
        tape.check_finite()?;
        let (s2, t2) = (tape.value(s2).clone(), tape.value(t2).clone());
        let z2 = &y2 * &s2.mapv(f64::exp) + &t2;
        let z = self.assemble(&z1, &z2);
        finite(&z, "coupling forward")?;
        Ok((z, CouplingTrace { s1, t1, s2, t2 }))
    }

    fn assemble(&self, x1: &Array2<f64>, x2: &Array2<f64>) -> Array2<f64> {
        if self.flipped {
            ndarray::concatenate(Axis(1), &[x2.view(), x1.view()]).expect("same rows")
        } else {
            ndarray::concatenate(Axis(1), &[x1.view(), x2.view()]).expect("same rows")
        }
    }

    /// Exact inverse: recovers `y₂` from `z₁` first, then `y₁` from `y₂`.
    pub fn inverse(&self, params: &ParamStore, z: &Array2<f64>, clamp: f64) -> Result<Array2<f64>> {
        finite(z, "coupling inverse input")?;
        let ((a1, n1), (a2, n2)) = self.parts(z.ncols());
        let steps = z.nrows();
        let z1 = z.slice(ndarray::s![.., a1..a1 + n1]).to_owned();
        let z2 = z.slice(ndarray::s![.., a2..a2 + n2]).to_owned();
        let (s2, t2) = self.nets(params, &self.s2, &self.t2, &z1, steps, clamp)?;
        let y2 = (&z2 - &t2) * &s2.mapv(|v| (-v).exp());
        let (s1, t1) = self.nets(params, &self.s1, &self.t1, &y2, steps, clamp)?;
        let y1 = (&z1 - &t1) * &s1.mapv(|v| (-v).exp());
        let y = self.assemble(&y1, &y2);
        finite(&y, "coupling inverse")?;
        Ok(y)
    }

    /// Clamped scale and shift of one net pair on a single sequence.
    pub fn nets(&self, params: &ParamStore, s: &BiGru, t: &BiGru, input: &Array2<f64>, steps: usize, clamp: f64) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut tape = Tape::new();
        let p = tape.bind(params);
        let x = tape.constant(input.clone());
        let sv = s.apply(&mut tape, &p, x, steps, 1);
        let sv = tape.soft_clamp(sv, clamp);
        let tv = t.apply(&mut tape, &p, x, steps, 1);
        tape.check_finite()?;
        Ok((tape.value(sv).clone(), tape.value(tv).clone()))
    }
}

fn finite(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: what.into() })
    }
}

/// Fixed affine map applied before the couplings: subtract a per-timestep mean
/// and divide by a per-dimension scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// `T×D`, stored row-major.
    pub mean: Vec<Vec<f64>>,
    pub scale: Vec<f64>,
}

/// Smallest scale the standardizer will divide by.
pub const MIN_SCALE: f64 = 1e-3;

impl Standardizer {
    pub fn fit(data: &[Trajectory]) -> Result<Self> {
        let first = data.first().ok_or_else(|| Error::InvalidInput("no trajectories".into()))?;
        let (t, d) = (first.len(), first.dim());
        let mut mean = Array2::<f64>::zeros((t, d));
        for tr in data {
            mean += tr.points();
        }
        mean /= data.len() as f64;
        let mut ss = vec![0.0; d];
        for tr in data {
            for (r, m) in tr.points().outer_iter().zip(mean.outer_iter()) {
                for j in 0..d {
                    ss[j] += (r[j] - m[j]).powi(2);
                }
            }
        }
        let n = (data.len() * t) as f64;
        let scale = ss.iter().map(|s| (s / n).sqrt().max(MIN_SCALE)).collect();
        Ok(Self { mean: mean.outer_iter().map(|r| r.to_vec()).collect(), scale })
    }

    fn mean_matrix(&self) -> Array2<f64> {
        let d = self.scale.len();
        Array2::from_shape_fn((self.mean.len(), d), |(i, j)| self.mean[i][j])
    }

    pub fn apply(&self, y: &Array2<f64>) -> Array2<f64> {
        let s = Array1::from(self.scale.clone());
        (y - &self.mean_matrix()) / &s.view().insert_axis(Axis(0))
    }

    pub fn invert(&self, u: &Array2<f64>) -> Array2<f64> {
        let s = Array1::from(self.scale.clone());
        u * &s.view().insert_axis(Axis(0)) + &self.mean_matrix()
    }

    /// Log-det of the map at one timestep.
    pub fn log_det(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }
}

/// Architecture of a flow, independent of its weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowTopology {
    pub dim: usize,
    pub horizon: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub clamp: f64,
    pub prior: Prior,
}

/// A stack of coupling blocks with its prior and optional standardizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealNvp {
    pub topology: FlowTopology,
    pub blocks: Vec<CouplingBlock>,
    pub standardizer: Option<Standardizer>,
}

impl RealNvp {
    /// Registers all networks in `store`. Every output projection starts at
    /// zero, so a fresh flow is the identity.
    pub fn new(topology: FlowTopology, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let FlowTopology { dim, horizon, blocks, hidden, clamp, .. } = topology;
        if dim < 2 {
            return Err(Error::Dimension("coupling flows need D >= 2".into()));
        }
        if horizon < 2 || blocks == 0 || hidden == 0 || !(clamp > 0.0) {
            return Err(Error::InvalidInput("flow topology has an empty or invalid size".into()));
        }
        let first = dim / 2;
        let blocks = (0..blocks)
            .map(|i| CouplingBlock::new(store, &format!("block{i}"), dim, first, i % 2 == 1, hidden, rng))
            .collect();
        Ok(Self { topology, blocks, standardizer: None })
    }

    pub fn dim(&self) -> usize {
        self.topology.dim
    }

    pub fn horizon(&self) -> usize {
        self.topology.horizon
    }

    fn check(&self, y: &Array2<f64>) -> Result<()> {
        if y.dim() != (self.horizon(), self.dim()) {
            return Err(Error::Dimension(format!(
                "sequence is {}×{}, flow expects {}×{}",
                y.nrows(),
                y.ncols(),
                self.horizon(),
                self.dim()
            )));
        }
        finite(y, "flow input")
    }

    fn standardize(&self, y: &Array2<f64>) -> Array2<f64> {
        match &self.standardizer {
            Some(s) => s.apply(y),
            None => y.clone(),
        }
    }

    fn standardizer_log_det(&self) -> f64 {
        self.standardizer.as_ref().map_or(0.0, Standardizer::log_det)
    }

    /// Latent sequence and per-timestep log-det of one trajectory.
    pub fn forward(&self, params: &ParamStore, y: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check(y)?;
        let mut x = self.standardize(y);
        let mut log_det = Array1::from_elem(self.horizon(), self.standardizer_log_det());
        for b in &self.blocks {
            let (z, tr) = b.forward_traced(params, &x, self.topology.clamp)?;
            log_det += &tr.s1.sum_axis(Axis(1));
            log_det += &tr.s2.sum_axis(Axis(1));
            x = z;
        }
        Ok((x, log_det))
    }

    pub fn encode(&self, params: &ParamStore, y: &Trajectory) -> Result<Array2<f64>> {
        Ok(self.forward(params, y.points())?.0)
    }

    /// Inverse flow: latent sequence to local trajectory.
    pub fn decode(&self, params: &ParamStore, z: &Array2<f64>) -> Result<Trajectory> {
        self.check(z)?;
        let mut x = z.clone();
        for b in self.blocks.iter().rev() {
            x = b.inverse(params, &x, self.topology.clamp)?;
        }
        if let Some(s) = &self.standardizer {
            x = s.invert(&x);
        }
        Trajectory::new(x).map_err(|_| Error::NonFinite { op: "flow decode".into() })
    }

    /// Per-timestep log-det of the whole flow.
    pub fn log_det(&self, params: &ParamStore, y: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(params, y)?.1)
    }

    /// Image of timestep `t` when its row is replaced by `row` while every
    /// other timestep of every block input stays at its value for `base`.
    pub fn timestep_map(&self, params: &ParamStore, base: &Array2<f64>, t: usize, row: &[f64]) -> Result<Array1<f64>> {
        self.check(base)?;
        let clamp = self.topology.clamp;
        let mut base_x = self.standardize(base);
        let mut cur = Array1::from(row.to_vec());
        if let Some(s) = &self.standardizer {
            let m = s.mean_matrix();
            for j in 0..cur.len() {
                cur[j] = (cur[j] - m[[t, j]]) / s.scale[j];
            }
        }
        for b in &self.blocks {
            let ((a1, n1), (a2, n2)) = b.parts(self.dim());
            let steps = base_x.nrows();
            let (base_z, _) = b.forward_traced(params, &base_x, clamp)?;
            let mut y2 = base_x.slice(ndarray::s![.., a2..a2 + n2]).to_owned();
            y2.row_mut(t).assign(&cur.slice(ndarray::s![a2..a2 + n2]));
            let (s1, t1) = b.nets(params, &b.s1, &b.t1, &y2, steps, clamp)?;
            let y1t = cur.slice(ndarray::s![a1..a1 + n1]).to_owned();
            let z1t = &y1t * &s1.row(t).mapv(f64::exp) + &t1.row(t);
            let mut z1 = base_z.slice(ndarray::s![.., a1..a1 + n1]).to_owned();
            z1.row_mut(t).assign(&z1t);
            let (s2, t2) = b.nets(params, &b.s2, &b.t2, &z1, steps, clamp)?;
            let y2t = cur.slice(ndarray::s![a2..a2 + n2]).to_owned();
            let z2t = &y2t * &s2.row(t).mapv(f64::exp) + &t2.row(t);
            let mut next = Array1::zeros(self.dim());
            next.slice_mut(ndarray::s![a1..a1 + n1]).assign(&z1t);
            next.slice_mut(ndarray::s![a2..a2 + n2]).assign(&z2t);
            cur = next;
            base_x = base_z;
        }
        Ok(cur)
    }

    /// Builds the summed negative log-likelihood of a batch on `tape`.
    /// `ys` holds already-standardized sequences.
    pub fn nll_tape(&self, tape: &mut Tape, p: &Bound, ys: &[Array2<f64>], gp: Option<&GpFactor>) -> Result<Var> {
        let n = ys.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let (steps, dim) = (self.horizon(), self.dim());
        // time-major stacking: row t·N + n is step t of sequence n
        let mut stacked = Array2::zeros((steps * n, dim));
        for (i, y) in ys.iter().enumerate() {
            for t in 0..steps {
                stacked.row_mut(t * n + i).assign(&y.row(t));
            }
        }
        let mut x = tape.constant(stacked);
        let mut log_det: Option<Var> = None;
        for b in &self.blocks {
            let (z, ld) = b.forward_tape(tape, p, x, steps, n, self.topology.clamp);
            log_det = Some(match log_det {
                None => ld,
                Some(acc) => tape.add(acc, ld),
            });
            x = z;
        }
        let sq = tape.mul(x, x);
        let energy = match (self.topology.prior, gp) {
            (Prior::Iid, _) => tape.sum(sq),
            (Prior::Gp { .. }, Some(f)) => {
                let mixed = tape.left_mul_blocks(Rc::new(f.inverse.clone()), x);
                let quad = tape.mul(x, mixed);
                tape.sum(quad)
            }
            (Prior::Gp { .. }, None) => return Err(Error::InvalidInput("GP prior needs its kernel factor".into())),
        };
        let energy = tape.scale(energy, 0.5);
        let constant = match (self.topology.prior, gp) {
            (Prior::Gp { .. }, Some(f)) => 0.5 * (n * dim) as f64 * f.log_det_2pi,
            _ => 0.5 * (n * steps * dim) as f64 * LOG_2PI,
        } - (n * steps) as f64 * self.standardizer_log_det();
        let ld_total = match log_det {
            Some(ld) => tape.sum(ld),
            None => tape.zeros(1, 1),
        };
        let c = tape.constant(Array2::from_elem((1, 1), constant));
        let nll = tape.sub(energy, ld_total);
        Ok(tape.add(nll, c))
    }

    pub fn gp_factor(&self) -> Result<Option<GpFactor>> {
        match self.topology.prior {
            Prior::Iid => Ok(None),
            Prior::Gp { sigma_f, length_scale } => Ok(Some(GpFactor::new(self.horizon(), sigma_f, length_scale)?)),
        }
    }

    /// Summed negative log-likelihood of raw trajectories under the model's prior.
    pub fn nll(&self, params: &ParamStore, data: &[Array2<f64>]) -> Result<f64> {
        for y in data {
            self.check(y)?;
        }
        let ys: Vec<Array2<f64>> = data.iter().map(|y| self.standardize(y)).collect();
        let gp = self.gp_factor()?;
        diffcore::evaluate(params, |t, p| self.nll_tape(t, p, &ys, gp.as_ref()))
    }

    /// Draws a latent sequence from the prior.
    pub fn sample_latent(&self, rng: &mut impl Rng) -> Result<Array2<f64>> {
        let (steps, dim) = (self.horizon(), self.dim());
        let eps = Array2::from_shape_simple_fn((steps, dim), || rng.sample::<f64, _>(StandardNormal));
        match self.gp_factor()? {
            None => Ok(eps),
            Some(f) => Ok(f.cholesky.dot(&eps)),
        }
    }
}

/// Negative log-likelihood with an independent standard-normal latent at every step.
pub fn nll_iid(model: &RealNvp, params: &ParamStore, data: &[Array2<f64>]) -> Result<f64> {
    let mut m = model.clone();
    m.topology.prior = Prior::Iid;
    m.nll(params, data)
}

/// Negative log-likelihood with a GP latent prior per dimension.
pub fn nll_gp(model: &RealNvp, params: &ParamStore, data: &[Array2<f64>], sigma_f: f64, length_scale: f64) -> Result<f64> {
    let mut m = model.clone();
    m.topology.prior = Prior::Gp { sigma_f, length_scale };
    m.nll(params, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub prior: Prior,
    pub clamp: f64,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            hidden: 32,
            epochs: 2000,
            lr: 1e-3,
            prior: Prior::default(),
            clamp: SCALE_CLAMP,
            standardize: true,
            seed: 0,
        }
    }
}

/// Loss trajectory of one training run, per demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub losses: Vec<f64>,
}

impl FlowReport {
    /// Relative decrease of the best loss from the loss at initialization.
    pub fn improvement(&self) -> f64 {
        (self.initial_loss - self.best_loss) / self.initial_loss.abs().max(f64::MIN_POSITIVE)
    }
}

/// A flow together with its weights. Serializes as a checkpoint: a topology
/// header, the standardizer, and the named weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlowFile", into = "FlowFile")]
pub struct FlowModel {
    pub flow: RealNvp,
    pub params: ParamStore,
}

pub const FLOW_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FlowFile {
    schema: u32,
    topology: FlowTopology,
    standardizer: Option<Standardizer>,
    params: ParamStore,
}

impl FlowModel {
    /// Fresh identity flow.
    pub fn init(topology: FlowTopology, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let flow = RealNvp::new(topology, &mut params, &mut rng)?;
        Ok(Self { flow, params })
    }

    pub fn encode(&self, y: &Trajectory) -> Result<Array2<f64>> {
        self.flow.encode(&self.params, y)
    }

    pub fn decode(&self, z: &Array2<f64>) -> Result<Trajectory> {
        self.flow.decode(&self.params, z)
    }

    /// Decodes the prior mean, the all-zero latent sequence.
    pub fn decode_mean(&self) -> Result<Trajectory> {
        self.decode(&Array2::zeros((self.flow.horizon(), self.flow.dim())))
    }

    pub fn nll(&self, data: &[Array2<f64>]) -> Result<f64> {
        self.flow.nll(&self.params, data)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl From<FlowModel> for FlowFile {
    fn from(m: FlowModel) -> Self {
        FlowFile { schema: FLOW_SCHEMA, topology: m.flow.topology, standardizer: m.flow.standardizer, params: m.params }
    }
}

impl TryFrom<FlowFile> for FlowModel {
    type Error = Error;

    /// Checks the weights against the declared topology.
    fn try_from(f: FlowFile) -> Result<Self> {
        if f.schema != FLOW_SCHEMA {
            return Err(Error::Schema(format!("unsupported flow schema {}", f.schema)));
        }
        let mut template = Self::init(f.topology, 0).map_err(|e| Error::Schema(e.to_string()))?;
        let matches = template.params.len() == f.params.len()
            && template
                .params
                .iter()
                .zip(f.params.iter())
                .all(|((na, a), (nb, b))| na == nb && a.dim() == b.dim());
        if !matches {
            return Err(Error::Schema("flow weights do not match the declared topology".into()));
        }
        if let Some(s) = &f.standardizer {
            if s.mean.len() != f.topology.horizon
                || s.scale.len() != f.topology.dim
                || s.mean.iter().any(|r| r.len() != f.topology.dim)
                || s.scale.iter().any(|v| !(*v > 0.0))
            {
                return Err(Error::Schema("standardizer does not match the declared topology".into()));
            }
        }
        template.flow.standardizer = f.standardizer;
        template.params = f.params;
        Ok(template)
    }
}

/// Fits one flow to the local trajectories of a single frame by full-batch
/// Adam on the mean per-demonstration NLL, keeping the best parameters seen.
pub fn train_flow(data: &[Trajectory], config: &FlowConfig) -> Result<(FlowModel, FlowReport)> {
    train_flow_with(data, config, |_, _| {})
}

/// [`train_flow`] with a callback receiving `(epoch, loss)` after every step.
pub fn train_flow_with(data: &[Trajectory], config: &FlowConfig, mut on_epoch: impl FnMut(usize, f64)) -> Result<(FlowModel, FlowReport)> {
    if data.len() < 2 {
        return Err(Error::InvalidInput(format!("flow training needs N >= 2 trajectories, got {}", data.len())));
    }
    let (horizon, dim) = (data[0].len(), data[0].dim());
    if data.iter().any(|t| t.len() != horizon || t.dim() != dim) {
        return Err(Error::Dimension("training trajectories differ in shape".into()));
    }
    let topology = FlowTopology {
        dim,
        horizon,
        blocks: config.blocks,
        hidden: config.hidden,
        clamp: config.clamp,
        prior: config.prior,
    };
    // a canonical order makes the float sums, and so training, independent of input order
    let mut sorted: Vec<&Trajectory> = data.iter().collect();
    sorted.sort_by(|a, b| {
        a.points()
            .iter()
            .zip(b.points().iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted: Vec<Trajectory> = sorted.into_iter().cloned().collect();
    let mut model = FlowModel::init(topology, config.seed)?;
    if config.standardize {
        model.flow.standardizer = Some(Standardizer::fit(&sorted)?);
    }
    let ys: Vec<Array2<f64>> = sorted.iter().map(|t| model.flow.standardize(t.points())).collect();
    let gp = model.flow.gp_factor()?;
    let n = data.len() as f64;
    let mut opt = Adam::new(&model.params, AdamConfig { lr: config.lr, ..Default::default() });
    let mut best = model.params.clone();
    let mut report = FlowReport { initial_loss: f64::NAN, best_loss: f64::INFINITY, best_epoch: 0, losses: Vec::with_capacity(config.epochs + 1) };
    for epoch in 0..=config.epochs {
        let flow = &model.flow;
        let (total, grads) = diffcore::gradient(&model.params, |t, p| {
            let nll = flow.nll_tape(t, p, &ys, gp.as_ref())?;
            Ok(t.scale(nll, 1.0 / n))
        })?;
        if !total.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss or gradient at epoch {epoch} (loss {total}, best {} at epoch {})",
                report.best_loss, report.best_epoch
            )));
        }
        if epoch == 0 {
            report.initial_loss = total;
        }
        report.losses.push(total);
        on_epoch(epoch, total);
        if total < report.best_loss {
            report.best_loss = total;
            report.best_epoch = epoch;
            best.clone_from(&model.params);
        }
        if epoch < config.epochs {
            opt.step(&mut model.params, &grads)?;
        }
    }
    model.params = best;
    Ok((model, report))
}
