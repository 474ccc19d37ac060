//! Task-parameterized Gaussian mixtures: one joint (time, position) GMM per
//! local frame, regression on time, and a precision-weighted product of the
//! per-frame Gaussians mapped into task space.
//!
//! The α variant reweights each frame by how concentrated its conditioned
//! covariance is,
//!
//! ```text
//! α_k = ‖Σ_k^{−γ}‖_F / Σ_j ‖Σ_j^{−γ}‖_F
//! ```
//!
//! and scales frame `k`'s precision by `α_k` in the product.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{variance_profile, Dataset, Frame, TaskQuery, Trajectory, DEFAULT_EPSILON};

/// Diagonal regularization added to every covariance estimate.
pub const COVARIANCE_JITTER: f64 = 1e-6;
pub const EM_TOL: f64 = 1e-6;
pub const EM_MAX_ITERS: usize = 200;
pub const DEFAULT_GAMMA_GRID: [f64; 6] = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0];
pub const TPGMM_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl From<Gaussian> for GaussianRepr {
    fn from(g: Gaussian) -> Self {
        GaussianRepr {
            mean: g.mean.iter().copied().collect(),
            cov: g.cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

impl TryFrom<GaussianRepr> for Gaussian {
    type Error = Error;

    fn try_from(r: GaussianRepr) -> Result<Self> {
        let d = r.mean.len();
        if r.cov.len() != d || r.cov.iter().any(|row| row.len() != d) {
            return Err(Error::Schema(format!("covariance is not {d}×{d}")));
        }
        Gaussian::new(DVector::from_vec(r.mean), DMatrix::from_fn(d, d, |i, j| r.cov[i][j]))
    }
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::Dimension(format!("mean length {d}, covariance {:?}", cov.shape())));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "gaussian".into() });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Image under `x ↦ R x + b`.
    pub fn to_global(&self, frame: &Frame) -> Gaussian {
        let r = to_na(frame.rotation());
        let b = DVector::from_iterator(frame.dim(), frame.translation().iter().copied());
        Gaussian { mean: &r * &self.mean + b, cov: &r * &self.cov * r.transpose() }
    }
}

fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Eigenvalues of a symmetric matrix, erroring unless all are positive.
fn pd_eigenvalues(cov: &DMatrix<f64>) -> Result<DVector<f64>> {
    let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
    if eig.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::Numerical(format!("covariance is not positive definite (eigenvalues {eig:?})")));
    }
    Ok(eig)
}

/// Precision-weighted product `Λ = Σ α_k Σ_k⁻¹`, `μ = Λ⁻¹ Σ α_k Σ_k⁻¹ μ_k`.
pub fn gaussian_product(gaussians: &[Gaussian], alphas: &[f64]) -> Result<Gaussian> {
    let first = gaussians.first().ok_or_else(|| Error::InvalidInput("product of no gaussians".into()))?;
    if alphas.len() != gaussians.len() {
        return Err(Error::Dimension(format!("{} gaussians, {} weights", gaussians.len(), alphas.len())));
    }
    if alphas.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(Error::InvalidInput("product weights must be positive".into()));
    }
    let d = first.dim();
    let mut precision = DMatrix::zeros(d, d);
    let mut info = DVector::zeros(d);
    for (g, &a) in gaussians.iter().zip(alphas) {
        if g.dim() != d {
            return Err(Error::Dimension("gaussians differ in dimension".into()));
        }
        let p = g
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("singular covariance in product".into()))?
            .inverse()
            * a;
        info += &p * &g.mean;
        precision += p;
    }
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::Numerical("singular precision in product".into()))?;
    let cov = chol.inverse();
    let mean = chol.solve(&info);
    let cov = (&cov + cov.transpose()) * 0.5;
    Gaussian::new(mean, cov)
}

/// Variance-sensitive frame weights on the simplex.
pub fn alpha_weights(covariances: &[DMatrix<f64>], gamma: f64) -> Result<Vec<f64>> {
    if covariances.is_empty() {
        return Err(Error::InvalidInput("no covariances".into()));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidInput(format!("gamma must be non-negative, got {gamma}")));
    }
    // ‖Σ^{−γ}‖_F² = Σ_i λ_i^{−2γ}; kept in log space so large γ cannot overflow
    let log_norms = covariances
        .iter()
        .map(|c| {
            let eig = pd_eigenvalues(c)?;
            let terms: Vec<f64> = eig.iter().map(|l| -2.0 * gamma * l.ln()).collect();
            Ok(0.5 * log_sum_exp(&terms))
        })
        .collect::<Result<Vec<f64>>>()?;
    let top = log_norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = log_norms.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = scaled.iter().sum();
    Ok(scaled.iter().map(|v| v / total).collect())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub prior: f64,
    pub gaussian: Gaussian,
}

/// Mixture over `(time, local position)`; time is normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalGmm {
    pub components: Vec<Component>,
}

/// Position distribution given time.
#[derive(Debug, Clone, PartialEq)]
pub struct Regression {
    pub gaussian: Gaussian,
    /// `t` lies outside the time range seen in training.
    pub extrapolated: bool,
}

impl LocalGmm {
    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Joint dimension `1 + D`.
    pub fn dim(&self) -> usize {
        self.components[0].gaussian.dim()
    }

    pub fn log_likelihood(&self, points: &[DVector<f64>]) -> Result<f64> {
        let cache = Cache::new(&self.components)?;
        let flat = Points::from_vectors(points);
        let mut scratch = vec![0.0; self.components.len()];
        Ok((0..flat.len()).map(|i| cache.log_joint(flat.row(i), &mut scratch)).sum())
    }

    pub fn condition_on_time(&self, t: f64) -> Regression {
        let d = self.dim() - 1;
        let m = self.components.len();
        let mut logh = Vec::with_capacity(m);
        let mut parts = Vec::with_capacity(m);
        let mut extrapolated = true;
        for c in &self.components {
            let g = &c.gaussian;
            let stt = g.cov[(0, 0)];
            let dt = t - g.mean[0];
            if dt.abs() <= 3.0 * stt.sqrt() {
                extrapolated = false;
            }
            logh.push(c.prior.ln() - 0.5 * (dt * dt / stt + (2.0 * std::f64::consts::PI * stt).ln()));
            let sxt = g.cov.view((1, 0), (d, 1)).clone_owned();
            let mean = g.mean.rows(1, d).clone_owned() + &sxt * (dt / stt);
            let cov = g.cov.view((1, 1), (d, d)) - &sxt * sxt.transpose() / stt;
            parts.push((mean, cov));
        }
        let total = log_sum_exp(&logh);
        let h: Vec<f64> = logh.iter().map(|l| (l - total).exp()).collect();
        let mut mean = DVector::zeros(d);
        for (hk, (mk, _)) in h.iter().zip(&parts) {
            mean += mk * *hk;
        }
        let mut cov = DMatrix::zeros(d, d);
        for (hk, (mk, ck)) in h.iter().zip(&parts) {
            let dm = mk - &mean;
            cov += (ck + &dm * dm.transpose()) * *hk;
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        Regression { gaussian: Gaussian { mean, cov }, extrapolated }
    }
}

/// Row-major point cloud.
struct Points {
    data: Vec<f64>,
    dim: usize,
}

impl Points {
    fn from_vectors(points: &[DVector<f64>]) -> Self {
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        Self { data: points.iter().flat_map(|p| p.iter().copied()).collect(), dim }
    }

    fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-component inverse covariances and normalizers for the E-step.
struct Cache {
    log_norm: Vec<f64>,
    inv: Vec<DMatrix<f64>>,
    mean: Vec<DVector<f64>>,
}

impl Cache {
    fn new(components: &[Component]) -> Result<Self> {
        let mut log_norm = Vec::new();
        let mut inv = Vec::new();
        let mut mean = Vec::new();
        for c in components {
            let d = c.gaussian.dim();
            let chol = c
                .gaussian
                .cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical("component covariance lost definiteness".into()))?;
            let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            log_norm.push(c.prior.ln() - 0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det));
            inv.push(chol.inverse());
            mean.push(c.gaussian.mean.clone());
        }
        Ok(Self { log_norm, inv, mean })
    }

    /// Fills `out[m] = log(π_m N(x | m))` and returns their log-sum-exp.
    fn log_joint(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let d = x.len();
        for (m, slot) in out.iter_mut().enumerate() {
            let (mu, inv) = (&self.mean[m], &self.inv[m]);
            let mut q = 0.0;
            for i in 0..d {
                let di = x[i] - mu[i];
                let mut row = 0.0;
                for j in 0..d {
                    row += inv[(i, j)] * (x[j] - mu[j]);
                }
                q += di * row;
            }
            *slot = self.log_norm[m] - 0.5 * q;
        }
        log_sum_exp(out)
    }
}

/// Weight-proportional draw invariant to duplicating entries in place.
fn draw_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if acc > target {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding followed by a few Lloyd steps; `None` if a cluster empties.
fn kmeans_init(points: &Points, m: usize, rng: &mut impl Rng) -> Option<Vec<Component>> {
    let n = points.len();
    let d = points.dim;
    let mut centers: Vec<Vec<f64>> = vec![points.row(draw_weighted(&vec![1.0; n], rng)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centers[0])).collect();
    while centers.len() < m {
        let c = points.row(draw_weighted(&nearest, rng)).to_vec();
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(points.row(i), &c));
        }
        centers.push(c);
    }
    let mut assign = vec![0usize; n];
    for _ in 0..10 {
        for (i, a) in assign.iter_mut().enumerate() {
            let x = points.row(i);
            *a = (0..m)
                .min_by(|&p, &q| sq_dist(x, &centers[p]).total_cmp(&sq_dist(x, &centers[q])))
                .unwrap_or(0);
        }
        let mut counts = vec![0usize; m];
        let mut sums = vec![vec![0.0; d]; m];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        if counts.iter().any(|c| *c == 0) {
            return None;
        }
        for (c, (s, k)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            *c = s.iter().map(|v| v / *k as f64).collect();
        }
    }
    let resp: Vec<Vec<f64>> = (0..m)
        .map(|k| assign.iter().map(|&a| if a == k { 1.0 } else { 0.0 }).collect())
        .collect();
    m_step(points, &resp)
}

/// Weighted means and covariances; `None` once a component carries less
/// than one point of mass.
fn m_step(points: &Points, resp: &[Vec<f64>]) -> Option<Vec<Component>> {
    let n = points.len();
    let d = points.dim;
    let mut out = Vec::with_capacity(resp.len());
    for r in resp {
        let nk: f64 = r.iter().sum();
        if !(nk >= 1.0) {
            return None;
        }
        let mut mean = DVector::zeros(d);
        for (i, w) in r.iter().enumerate() {
            for j in 0..d {
                mean[j] += w * points.row(i)[j];
            }
        }
        mean /= nk;
        let mut cov = DMatrix::zeros(d, d);
        for (i, w) in r.iter().enumerate() {
            let x = points.row(i);
            for a in 0..d {
                let da = x[a] - mean[a];
                for b in a..d {
                    cov[(a, b)] += w * da * (x[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] /= nk;
                cov[(b, a)] = cov[(a, b)];
            }
            cov[(a, a)] += COVARIANCE_JITTER;
        }
        out.push(Component { prior: nk / n as f64, gaussian: Gaussian { mean, cov } });
    }
    Some(out)
}

/// Outcome of one EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub gmm: LocalGmm,
    /// Total log-likelihood after every iteration, starting from the initialization.
    pub log_likelihood: Vec<f64>,
    pub restart: usize,
}

fn em_once(points: &Points, m: usize, rng: &mut impl Rng) -> Option<(Vec<Component>, Vec<f64>)> {
    let n = points.len();
    let mut comps = kmeans_init(points, m, rng)?;
    let mut trace = Vec::new();
    let mut resp = vec![vec![0.0; n]; m];
    let mut scratch = vec![0.0; m];
    for _ in 0..=EM_MAX_ITERS {
        let cache = Cache::new(&comps).ok()?;
        let mut ll = 0.0;
        for i in 0..n {
            let total = cache.log_joint(points.row(i), &mut scratch);
            ll += total;
            for k in 0..m {
                resp[k][i] = (scratch[k] - total).exp();
            }
        }
        if !ll.is_finite() {
            return None;
        }
        let done = trace.last().is_some_and(|prev: &f64| (ll - prev).abs() < EM_TOL * n as f64);
        trace.push(ll);
        if done || trace.len() > EM_MAX_ITERS {
            break;
        }
        comps = m_step(points, &resp)?;
    }
    Some((comps, trace))
}

/// EM on joint points with `restarts` k-means++ initializations, keeping the
/// most likely fit. Restarts whose components collapse are discarded.
pub fn fit_em(points: &[DVector<f64>], m: usize, restarts: usize, seed: u64) -> Result<EmFit> {
    if m == 0 {
        return Err(Error::InvalidInput("need at least one component".into()));
    }
    if points.len() < 10 * m {
        return Err(Error::InvalidInput(format!("{} points are too few for {m} components", points.len())));
    }
    let flat = Points::from_vectors(points);
    if points.iter().any(|p| p.len() != flat.dim) || flat.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("points must be finite and share a dimension".into()));
    }
    let mut best: Option<EmFit> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        if let Some((components, trace)) = em_once(&flat, m, &mut rng) {
            let ll = *trace.last().unwrap_or(&f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|b| ll > *b.log_likelihood.last().unwrap_or(&f64::NEG_INFINITY)) {
                best = Some(EmFit { gmm: LocalGmm { components }, log_likelihood: trace, restart: r });
            }
        }
    }
    best.ok_or_else(|| Error::Numerical(format!("all {} EM restarts collapsed", restarts.max(1))))
}

/// Normalized time of step `t` in a horizon of `T`.
pub fn time_of(t: usize, horizon: usize) -> f64 {
    if horizon < 2 {
        0.0
    } else {
        t as f64 / (horizon - 1) as f64
    }
}

/// Joint `(time, position)` points of a set of local trajectories.
pub fn joint_points(set: &[Trajectory]) -> Vec<DVector<f64>> {
    set.iter()
        .flat_map(|traj| {
            (0..traj.len()).map(move |t| {
                let p = traj.point(t);
                DVector::from_iterator(1 + p.len(), std::iter::once(time_of(t, traj.len())).chain(p.iter().copied()))
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    Alpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpGmmConfig {
    pub components: usize,
    pub restarts: usize,
    pub gamma_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for TpGmmConfig {
    fn default() -> Self {
        Self { components: 6, restarts: 5, gamma_grid: DEFAULT_GAMMA_GRID.to_vec(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TpGmmFile", into = "TpGmmFile")]
pub struct TpGmmModel {
    pub variant: Variant,
    pub gamma: f64,
    pub frames: Vec<LocalGmm>,
    pub dim: usize,
    pub horizon: usize,
}

#[derive(Serialize, Deserialize)]
struct TpGmmFile {
    schema: u32,
    variant: Variant,
    gamma: f64,
    dim: usize,
    horizon: usize,
    frames: Vec<LocalGmm>,
}

impl From<TpGmmModel> for TpGmmFile {
    fn from(m: TpGmmModel) -> Self {
        TpGmmFile { schema: TPGMM_SCHEMA, variant: m.variant, gamma: m.gamma, dim: m.dim, horizon: m.horizon, frames: m.frames }
    }
}

impl TryFrom<TpGmmFile> for TpGmmModel {
    type Error = Error;

    fn try_from(f: TpGmmFile) -> Result<Self> {
        if f.schema != TPGMM_SCHEMA {
            return Err(Error::Schema(format!("unsupported baseline schema {}", f.schema)));
        }
        if f.frames.is_empty() || f.horizon < 2 || !(f.gamma >= 0.0) {
            return Err(Error::Schema("baseline needs frames, a horizon of at least 2, and gamma >= 0".into()));
        }
        let m = f.frames[0].components.len();
        for g in &f.frames {
            if g.components.len() != m || m == 0 {
                return Err(Error::Schema("frames must share a non-zero component count".into()));
            }
            let total: f64 = g.components.iter().map(|c| c.prior).sum();
            if (total - 1.0).abs() > 1e-6 || g.components.iter().any(|c| !(c.prior > 0.0)) {
                return Err(Error::Schema("component priors are not on the simplex".into()));
            }
            for c in &g.components {
                if c.gaussian.dim() != f.dim + 1 {
                    return Err(Error::Schema("component dimension disagrees with the header".into()));
                }
                pd_eigenvalues(&c.gaussian.cov).map_err(|e| Error::Schema(e.to_string()))?;
            }
        }
        Ok(TpGmmModel { variant: f.variant, gamma: f.gamma, frames: f.frames, dim: f.dim, horizon: f.horizon })
    }
}

/// Generated trajectory with its per-step frame weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpGmmGeneration {
    pub trajectory: Trajectory,
    /// `T×K`; uniform for the plain variant.
    pub alpha: Vec<Vec<f64>>,
}

impl TpGmmModel {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn generate(&self, query: &TaskQuery) -> Result<TpGmmGeneration> {
        self.generate_with_gamma(query, self.gamma)
    }

    pub fn generate_with_gamma(&self, query: &TaskQuery, gamma: f64) -> Result<TpGmmGeneration> {
        query.validate()?;
        if query.num_frames() != self.num_frames() || query.dim() != self.dim {
            return Err(Error::Dimension(format!(
                "query has {} frames of dimension {}, model expects {} of dimension {}",
                query.num_frames(),
                query.dim(),
                self.num_frames(),
                self.dim
            )));
        }
        let k = self.num_frames();
        let mut points = Array2::zeros((self.horizon, self.dim));
        let mut alpha = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            let s = time_of(t, self.horizon);
            let local: Vec<Gaussian> = self.frames.iter().map(|g| g.condition_on_time(s).gaussian).collect();
            let a = match self.variant {
                Variant::Plain => vec![1.0; k],
                Variant::Alpha => alpha_weights(&local.iter().map(|g| g.cov.clone()).collect::<Vec<_>>(), gamma)?,
            };
            let global: Vec<Gaussian> = local.iter().zip(&query.frames).map(|(g, f)| g.to_global(f)).collect();
            let prod = gaussian_product(&global, &a)?;
            for j in 0..self.dim {
                points[[t, j]] = prod.mean[j];
            }
            let norm: f64 = a.iter().sum();
            alpha.push(a.iter().map(|v| v / norm).collect());
        }
        Ok(TpGmmGeneration { trajectory: Trajectory::new(points)?, alpha })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Fits one mixture per frame; the α variant then picks γ from the grid.
pub fn fit_tpgmm(data: &Dataset, variant: Variant, config: &TpGmmConfig) -> Result<TpGmmModel> {
    let frames = data
        .local_sets()?
        .iter()
        .enumerate()
        .map(|(k, set)| {
            let seed = config.seed.wrapping_add(1000 * k as u64);
            Ok(fit_em(&joint_points(set), config.components, config.restarts, seed)?.gmm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = TpGmmModel { variant, gamma: 0.0, frames, dim: data.dim(), horizon: data.horizon() };
    if variant == Variant::Alpha {
        model.gamma = select_gamma(&model, data, &config.gamma_grid)?.0;
    }
    Ok(model)
}

/// Grid value minimizing the variance-weighted reproduction error on `data`;
/// near-ties go to the smaller γ. Returns the per-γ costs alongside.
pub fn select_gamma(model: &TpGmmModel, data: &Dataset, grid: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty gamma grid".into()));
    }
    let profile = variance_profile(&data.local_sets()?, DEFAULT_EPSILON)?;
    let mut costs = Vec::with_capacity(grid.len());
    for &gamma in grid {
        let mut cost = 0.0;
        for demo in data.demos() {
            let gen = model.generate_with_gamma(&demo.query, gamma)?.trajectory;
            for t in 0..data.horizon() {
                let e: f64 = (&gen.point(t) - &demo.trajectory.point(t)).mapv(|v| v * v).sum();
                cost += profile.w[t] * e;
            }
        }
        costs.push((gamma, cost));
    }
    let mut best = costs[0];
    for &(g, c) in &costs[1..] {
        let tie = (c - best.1).abs() <= 1e-9 * best.1.abs().max(c.abs());
        if (tie && g < best.0) || (!tie && c < best.1) {
            best = (g, c);
        }
    }
    Ok((best.0, costs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Demonstration;
    use nalgebra::dmatrix;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(mean: &[f64], cov: DMatrix<f64>) -> Gaussian {
        Gaussian::new(DVector::from_row_slice(mean), cov).unwrap()
    }

    #[test]
    fn alpha_closed_form() {
        let a = alpha_weights(&[DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 4.0], 1.0).unwrap();
        assert!((a[0] - 0.8).abs() < 1e-12 && (a[1] - 0.2).abs() < 1e-12, "{a:?}");
        let b = alpha_weights(&[dmatrix![2.0, 0.3; 0.3, 1.0], dmatrix![0.1, 0.0; 0.0, 5.0]], 0.0).unwrap();
        assert_eq!(b, vec![0.5, 0.5]);
        let c = alpha_weights(&vec![dmatrix![2.0, 0.3; 0.3, 1.0]; 3], 2.5).unwrap();
        assert!(c.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(alpha_weights(&[dmatrix![1.0, 2.0; 2.0, 1.0]], 1.0).is_err());
    }

    #[test]
    fn alpha_favours_tighter_frame_as_gamma_grows() {
        let covs = [DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2) * 2.0];
        let mut prev = 0.5;
        for g in [0.5, 1.0, 2.0, 4.0, 8.0, 40.0] {
            let a = alpha_weights(&covs, g).unwrap();
            assert!(a[0] > prev && (a[0] + a[1] - 1.0).abs() < 1e-15);
            prev = a[0];
        }
    }

    #[test]
    fn product_closed_forms() {
        let i = DMatrix::identity(2, 2);
        let p = gaussian_product(&[gauss(&[0.0, 0.0], i.clone()), gauss(&[0.0, 0.0], i.clone())], &[1.0, 1.0]).unwrap();
        assert!((p.cov - &i * 0.5).abs().max() < 1e-15 && p.mean.abs().max() == 0.0);
        // scalar product: precisions add, means blend by precision
        let p = gaussian_product(&[gauss(&[1.0], dmatrix![2.0]), gauss(&[4.0], dmatrix![0.5])], &[1.0, 1.0]).unwrap();
        assert!((p.cov[(0, 0)] - 0.4).abs() < 1e-15);
        assert!((p.mean[0] - 0.4 * (0.5 + 8.0)).abs() < 1e-14);
        let g = gauss(&[0.3, -1.0], dmatrix![0.7, 0.2; 0.2, 0.4]);
        let one = gaussian_product(&[g.clone()], &[1.0]).unwrap();
        assert!((one.mean - &g.mean).abs().max() < 1e-14 && (one.cov - &g.cov).abs().max() < 1e-14);
        let h = gauss(&[1.0, 2.0], dmatrix![0.2, -0.1; -0.1, 0.9]);
        let a = gaussian_product(&[g.clone(), h.clone()], &[0.3, 0.3]).unwrap();
        let b = gaussian_product(&[g, h], &[1.0, 1.0]).unwrap();
        assert!((a.mean - b.mean).abs().max() < 1e-12);
        assert!((a.cov - b.cov * (1.0 / 0.3)).abs().max() < 1e-12);
    }

    #[test]
    fn single_component_conditioning_is_exact() {
        let g = gauss(&[0.5, 1.0, -2.0], dmatrix![0.04, 0.01, -0.02; 0.01, 0.3, 0.05; -0.02, 0.05, 0.2]);
        let gmm = LocalGmm { components: vec![Component { prior: 1.0, gaussian: g.clone() }] };
        let r = gmm.condition_on_time(0.7);
        let sxt = g.cov.view((1, 0), (2, 1)).clone_owned();
        let mean = g.mean.rows(1, 2) + &sxt * ((0.7 - 0.5) / 0.04);
        let cov = g.cov.view((1, 1), (2, 2)) - &sxt * sxt.transpose() / 0.04;
        assert!((r.gaussian.mean - mean).abs().max() < 1e-14);
        assert!((r.gaussian.cov - cov).abs().max() < 1e-14);
        assert!(!r.extrapolated);
        assert!(gmm.condition_on_time(5.0).extrapolated);
    }

    #[test]
    fn symmetric_mixture_conditions_to_zero() {
        let c = |m: f64| Component { prior: 0.5, gaussian: gauss(&[0.5, m], dmatrix![0.1, 0.0; 0.0, 0.2]) };
        let gmm = LocalGmm { components: vec![c(-1.0), c(1.0)] };
        let r = gmm.condition_on_time(0.5);
        assert!(r.gaussian.mean[0].abs() < 1e-15);
        assert!(pd_eigenvalues(&r.gaussian.cov).is_ok());
    }

    fn normal_points(n: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                DVector::from_row_slice(&[1.0 + 0.5 * a, -2.0 + 0.2 * b + 0.1 * a])
            })
            .collect()
    }

    #[test]
    fn single_gaussian_mean_is_recovered() {
        let pts = normal_points(400, 1);
        let fit = fit_em(&pts, 1, 5, 2).unwrap();
        let m = &fit.gmm.components[0].gaussian.mean;
        let se = [0.5 / 20.0, (0.04f64 + 0.01).sqrt() / 20.0];
        assert!((m[0] - 1.0).abs() < 3.0 * se[0] && (m[1] + 2.0).abs() < 3.0 * se[1], "{m}");
    }

    #[test]
    fn em_is_monotone_and_duplication_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<DVector<f64>> = (0..300)
            .map(|i| {
                let c = [(0.0, 0.0), (2.0, 1.0), (-1.0, 3.0)][i % 3];
                DVector::from_row_slice(&[c.0 + rng.random_range(-0.5..0.5), c.1 + rng.random_range(-0.5..0.5)])
            })
            .collect();
        let fit = fit_em(&pts, 4, 3, 4).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{:?}", fit.log_likelihood);
        }
        let doubled: Vec<DVector<f64>> = pts.iter().flat_map(|p| [p.clone(), p.clone()]).collect();
        let twice = fit_em(&doubled, 4, 3, 4).unwrap();
        for (a, b) in fit.gmm.components.iter().zip(&twice.gmm.components) {
            assert!((a.prior - b.prior).abs() < 1e-9);
            assert!((&a.gaussian.mean - &b.gaussian.mean).abs().max() < 1e-9);
            assert!((&a.gaussian.cov - &b.gaussian.cov).abs().max() < 1e-9);
        }
        assert_eq!(fit_em(&pts, 4, 3, 4).unwrap(), fit);
        assert!(fit_em(&pts[..30], 4, 3, 4).is_err());
    }

    fn line_dataset(n: usize, t: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let demos = (0..n)
            .map(|_| {
                let f0 = Frame::planar(rng.random_range(0.0..0.2), rng.random_range(0.0..1.0), rng.random_range(-0.5..0.5));
                let f1 = Frame::planar(rng.random_range(0.8..1.0), rng.random_range(0.0..1.0), rng.random_range(-0.5..0.5));
                let wob = rng.random_range(-0.02..0.02);
                let a = f0.translation().clone();
                let b = f1.translation().clone();
                let pts = Array2::from_shape_fn((t, 2), |(i, j)| {
                    let s = time_of(i, t);
                    (1.0 - s) * a[j] + s * b[j] + wob * (std::f64::consts::PI * s).sin()
                });
                Demonstration::new(TaskQuery::new(vec![f0, f1]).unwrap(), Trajectory::new(pts).unwrap()).unwrap()
            })
            .collect();
        Dataset::new(demos).unwrap()
    }

    #[test]
    fn generation_is_equivariant_and_reduces_at_gamma_zero() {
        let data = line_dataset(10, 20, 5);
        let cfg = TpGmmConfig { components: 3, restarts: 2, ..Default::default() };
        let plain = fit_tpgmm(&data, Variant::Plain, &cfg).unwrap();
        let mut alpha = plain.clone();
        alpha.variant = Variant::Alpha;
        let q = &data.demos()[0].query;
        let a = alpha.generate_with_gamma(q, 0.0).unwrap().trajectory;
        let p = plain.generate(q).unwrap().trajectory;
        assert!(a.max_abs_diff(&p) < 1e-12);
        let g = Frame::planar(0.4, -1.3, 2.2);
        let moved = plain.generate(&q.transformed(&g).unwrap()).unwrap().trajectory;
        assert!(moved.max_abs_diff(&crate::geometry::to_global(&p, &g).unwrap()) < 1e-10);
        // each end is pulled to the frame that is tight there
        let gap = |t: usize, k: usize| (&p.point(t) - &q.frames[k].translation().view()).mapv(|v| v * v).sum().sqrt();
        assert!(gap(0, 0) < 0.1 && gap(19, 1) < 0.1 && gap(0, 1) > 0.5 && gap(19, 0) > 0.5);
    }

    #[test]
    fn single_frame_output_is_its_regression() {
        let data = line_dataset(8, 15, 6);
        let one = Dataset::new(
            data.demos()
                .iter()
                .map(|d| Demonstration::new(TaskQuery::new(vec![d.query.frames[0].clone()]).unwrap(), d.trajectory.clone()).unwrap())
                .collect(),
        )
        .unwrap();
        let m = fit_tpgmm(&one, Variant::Alpha, &TpGmmConfig { components: 2, restarts: 1, ..Default::default() }).unwrap();
        let q = &one.demos()[0].query;
        let out = m.generate(q).unwrap();
        for t in 0..15 {
            let r = m.frames[0].condition_on_time(time_of(t, 15)).gaussian.to_global(&q.frames[0]);
            assert!((out.trajectory.point(t)[0] - r.mean[0]).abs() < 1e-12);
            assert_eq!(out.alpha[t], vec![1.0]);
        }
    }

    #[test]
    fn gamma_selection_is_the_grid_argmin() {
        let data = line_dataset(10, 20, 7);
        let m = fit_tpgmm(&data, Variant::Alpha, &TpGmmConfig { components: 3, restarts: 2, ..Default::default() }).unwrap();
        let (g, costs) = select_gamma(&m, &data, &DEFAULT_GAMMA_GRID).unwrap();
        assert_eq!(g, m.gamma);
        let min = costs.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        assert!(costs.iter().any(|c| c.0 == g && c.1 <= min * (1.0 + 1e-9)));
        assert_eq!(select_gamma(&m, &data, &[2.0]).unwrap().0, 2.0);
    }

    #[test]
    fn symmetric_frames_tie_to_smallest_gamma() {
        // both frames carry the same mixture and sit at the same pose
        let data = line_dataset(6, 12, 8);
        let mut m = fit_tpgmm(&data, Variant::Alpha, &TpGmmConfig { components: 2, restarts: 1, ..Default::default() }).unwrap();
        m.frames[1] = m.frames[0].clone();
        let demos = data
            .demos()
            .iter()
            .map(|d| {
                let f = d.query.frames[0].clone();
                Demonstration::new(TaskQuery::new(vec![f.clone(), f]).unwrap(), d.trajectory.clone()).unwrap()
            })
            .collect();
        let sym = Dataset::new(demos).unwrap();
        assert_eq!(select_gamma(&m, &sym, &[4.0, 1.0, 0.5, 8.0]).unwrap().0, 0.5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = line_dataset(6, 12, 9);
        let m = fit_tpgmm(&data, Variant::Alpha, &TpGmmConfig { components: 2, restarts: 1, ..Default::default() }).unwrap();
        let back = TpGmmModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["frames"][0]["components"][0]["prior"] = 0.9.into();
        assert!(TpGmmModel::from_json(&v.to_string()).is_err());
        let q = TaskQuery::new(vec![Frame::identity(2)]).unwrap();
        assert!(matches!(m.generate(&q), Err(Error::Dimension(_))));
    }
}
