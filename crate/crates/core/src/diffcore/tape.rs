//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in evaluation order, so the node list
//! is already topologically sorted and the backward pass is a single reverse
//! sweep.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

use super::params::{Bound, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    XLogX(Var),
    SoftClamp(Var, f64),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    StackRows(Vec<Var>),
    SliceRows(Var, usize),
    RepeatRows(Var, usize),
    MulConst(Var, Rc<Mat>),
    LeftMulBlocks(Rc<Mat>, Var),
    Combine(Var, Rc<Mat>),
    RowSum(Var),
    Sum(Var),
    Gru(Box<GruNode>),
}

/// Parameter handles of one GRU direction, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_zr: Var,
    pub w_h: Var,
    pub u_zr: Var,
    pub u_h: Var,
    pub b_zr: Var,
    pub b_h: Var,
}

#[derive(Debug)]
struct GruNode {
    x: Var,
    w: GruVars,
    batch: usize,
    reverse: bool,
    /// per timestep: previous hidden state, update gate, reset gate, candidate
    h_prev: Vec<Mat>,
    z: Vec<Mat>,
    r: Vec<Mat>,
    cand: Vec<Mat>,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "constant",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::OneMinus(..) => "one_minus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::XLogX(..) => "xlogx",
            Op::SoftClamp(..) => "soft_clamp",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::StackRows(..) => "stack_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::MulConst(..) => "mul_const",
            Op::LeftMulBlocks(..) => "left_mul_blocks",
            Op::Combine(..) => "combine",
            Op::RowSum(..) => "row_sum",
            Op::Sum(..) => "sum",
            Op::Gru(..) => "gru",
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
}

/// Smallest argument used inside `ln` by [`Tape::xlogx`]'s derivative.
const XLOGX_FLOOR: f64 = 1e-300;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_nonfinite: Option<(usize, &'static str)>,
}

/// Gradients of a scalar with respect to every node that influenced it.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Returns an error naming the first operation that produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            Some((idx, op)) => Err(Error::NonFinite { op: format!("{op} (node {idx})") }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        if self.first_nonfinite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.first_nonfinite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Mat::zeros((rows, cols)))
    }

    /// Binds every parameter of `store` as a differentiable leaf.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let vars = store
            .values()
            .map(|m| self.push(m.clone(), Op::Param))
            .collect();
        Bound::new(vars)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    /// Elementwise `x ln x` with `0 ln 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x == 0.0 { 0.0 } else { x * x.ln() });
        self.push(v, Op::XLogX(a))
    }

    /// `c·tanh(x / c)`: identity near zero, bounded by `±c`.
    pub fn soft_clamp(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| c * (x / c).tanh());
        self.push(v, Op::SoftClamp(a, c))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row /= total;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("stack_rows: column counts differ");
        self.push(v, Op::StackRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    /// Repeats every row `n` times consecutively: `r×c → (r·n)×c`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let src = self.value(a);
        let (r, c) = src.dim();
        let mut v = Mat::zeros((r * n, c));
        for i in 0..r {
            for j in 0..n {
                v.row_mut(i * n + j).assign(&src.row(i));
            }
        }
        self.push(v, Op::RepeatRows(a, n))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Rc<Mat>) -> Var {
        let v = self.value(a) * &*c;
        self.push(v, Op::MulConst(a, c))
    }

    /// Mixes row blocks: with `s` stacked as `T` blocks of equal height,
    /// output block `r` is `Σ_j m[r, j] · block_j`. `m` is a constant `R×T`.
    pub fn left_mul_blocks(&mut self, m: Rc<Mat>, s: Var) -> Var {
        let src = self.value(s);
        let (rows, cols) = src.dim();
        let t = m.ncols();
        assert_eq!(rows % t, 0, "left_mul_blocks: rows not divisible by block count");
        let block = rows / t;
        let flat = src
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((t, block * cols))
            .expect("contiguous");
        let mixed = m.dot(&flat);
        let v = mixed
            .into_shape_with_order((m.nrows() * block, cols))
            .expect("contiguous");
        self.push(v, Op::LeftMulBlocks(m, s))
    }

    /// Row-wise convex combination: `a` is `N×K`, `g` is a constant
    /// `N×(K·D)`; output `[n, d] = Σ_k a[n,k]·g[n, k·D + d]`.
    pub fn combine(&mut self, a: Var, g: Rc<Mat>) -> Var {
        let w = self.value(a);
        let (n, k) = w.dim();
        let d = g.ncols() / k;
        let mut v = Mat::zeros((n, d));
        for i in 0..n {
            for kk in 0..k {
                let wk = w[[i, kk]];
                for dd in 0..d {
                    v[[i, dd]] += wk * g[[i, kk * d + dd]];
                }
            }
        }
        self.push(v, Op::Combine(a, g))
    }

    /// `r×c → r×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Runs a gated recurrent unit over a stacked `(steps·batch)×input` sequence
    /// from a zero state, as one node. The output stacks the hidden states by
    /// time in the same layout, whichever direction the recurrence runs:
    ///
    /// ```text
    /// z = σ(x·Wz + h·Uz + bz)      r = σ(x·Wr + h·Ur + br)
    /// h̃ = tanh(x·Wh + (r ⊙ h)·Uh + bh)
    /// h' = z ⊙ h + (1 − z) ⊙ h̃
    /// ```
    pub fn gru(&mut self, x: Var, w: GruVars, steps: usize, batch: usize, reverse: bool) -> Var {
        let hidden = self.value(w.u_h).nrows();
        let xs = self.value(x);
        assert_eq!(xs.nrows(), steps * batch, "gru: input rows must be steps·batch");
        let xzr = xs.dot(self.value(w.w_zr)) + self.value(w.b_zr);
        let xh = xs.dot(self.value(w.w_h)) + self.value(w.b_h);
        let (u_zr, u_h) = (self.value(w.u_zr), self.value(w.u_h));
        let mut out = Mat::zeros((steps * batch, hidden));
        let mut h = Mat::zeros((batch, hidden));
        let empty = || vec![Mat::zeros((0, 0)); steps];
        let (mut hp, mut zs, mut rs, mut cs) = (empty(), empty(), empty(), empty());
        let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..steps).rev()) } else { Box::new(0..steps) };
        for t in order {
            let rows = s![t * batch..(t + 1) * batch, ..];
            let mut a = h.dot(u_zr);
            a += &xzr.slice(rows);
            a.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
            let z = a.slice(s![.., ..hidden]).to_owned();
            let r = a.slice(s![.., hidden..]).to_owned();
            let mut c = (&r * &h).dot(u_h);
            c += &xh.slice(rows);
            c.mapv_inplace(f64::tanh);
            let next = &c + &(&z * &(&h - &c));
            out.slice_mut(rows).assign(&next);
            hp[t] = std::mem::replace(&mut h, next);
            zs[t] = z;
            rs[t] = r;
            cs[t] = c;
        }
        let node = GruNode { x, w, batch, reverse, h_prev: hp, z: zs, r: rs, cand: cs };
        self.push(out, Op::Gru(Box::new(node)))
    }

    fn gru_backward(&self, n: &GruNode, g: &Mat, grads: &mut [Option<Mat>]) {
        let steps = n.z.len();
        let batch = n.batch;
        let hidden = n.cand.first().map_or(0, |c| c.ncols());
        let xs = self.value(n.x);
        let (w_zr, w_h, u_zr, u_h) = (self.value(n.w.w_zr), self.value(n.w.w_h), self.value(n.w.u_zr), self.value(n.w.u_h));
        let mut dx_zr = Mat::zeros((steps * batch, 2 * hidden));
        let mut dx_h = Mat::zeros((steps * batch, hidden));
        let mut du_zr = Mat::zeros(u_zr.dim());
        let mut du_h = Mat::zeros(u_h.dim());
        let mut carry = Mat::zeros((batch, hidden));
        // walk against the direction the recurrence ran
        let order: Box<dyn Iterator<Item = usize>> = if n.reverse { Box::new(0..steps) } else { Box::new((0..steps).rev()) };
        for t in order {
            let rows = s![t * batch..(t + 1) * batch, ..];
            let (h, z, r, c) = (&n.h_prev[t], &n.z[t], &n.r[t], &n.cand[t]);
            let gh = &g.slice(rows) + &carry;
            let dz = &gh * &(h - c);
            let da_h = ndarray::Zip::from(&gh).and(z).and(c).map_collect(|g, z, c| g * (1.0 - z) * (1.0 - c * c));
            let rh = r * h;
            du_h += &rh.t().dot(&da_h);
            let drh = da_h.dot(&u_h.t());
            let dr = &drh * h;
            let mut dh = &gh * z;
            dh += &(&drh * r);
            let mut da_zr = Mat::zeros((batch, 2 * hidden));
            ndarray::Zip::from(da_zr.slice_mut(s![.., ..hidden])).and(&dz).and(z).for_each(|o, d, z| *o = d * z * (1.0 - z));
            ndarray::Zip::from(da_zr.slice_mut(s![.., hidden..])).and(&dr).and(r).for_each(|o, d, r| *o = d * r * (1.0 - r));
            du_zr += &h.t().dot(&da_zr);
            dh += &da_zr.dot(&u_zr.t());
            dx_zr.slice_mut(rows).assign(&da_zr);
            dx_h.slice_mut(rows).assign(&da_h);
            carry = dh;
        }
        accumulate(grads, n.w.w_zr, xs.t().dot(&dx_zr));
        accumulate(grads, n.w.w_h, xs.t().dot(&dx_h));
        accumulate(grads, n.w.b_zr, dx_zr.sum_axis(Axis(0)).insert_axis(Axis(0)));
        accumulate(grads, n.w.b_h, dx_h.sum_axis(Axis(0)).insert_axis(Axis(0)));
        accumulate(grads, n.w.u_zr, du_zr);
        accumulate(grads, n.w.u_h, du_h);
        let dx = dx_zr.dot(&w_zr.t()) + dx_h.dot(&w_h.t());
        accumulate(grads, n.x, dx);
    }

    /// Reverse sweep from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::InvalidInput("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g * *s),
                Op::OneMinus(a) => accumulate(&mut grads, *a, -&g),
                Op::Sigmoid(a) => {
                    let ga = ndarray::Zip::from(&g).and(y).map_collect(|g, y| g * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = ndarray::Zip::from(&g).and(y).map_collect(|g, y| g * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * y),
                Op::Log(a) => accumulate(&mut grads, *a, &g / self.value(*a)),
                Op::XLogX(a) => {
                    let ga = ndarray::Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|g, x| g * (x.max(XLOGX_FLOOR).ln() + 1.0));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftClamp(a, c) => {
                    let ga = ndarray::Zip::from(&g).and(y).map_collect(|g, y| {
                        let t = y / c;
                        g * (1.0 - t * t)
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::StackRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let r = self.value(*p).nrows();
                        accumulate(&mut grads, *p, g.slice(s![start..start + r, ..]).to_owned());
                        start += r;
                    }
                }
                Op::SliceRows(a, start) => {
                    add_rows(&mut grads, *a, self.value(*a).dim(), *start, &g);
                }
                Op::RepeatRows(a, n) => {
                    let (r, c) = self.value(*a).dim();
                    let mut ga = Mat::zeros((r, c));
                    for i in 0..r {
                        for j in 0..*n {
                            let mut row = ga.row_mut(i);
                            row += &g.row(i * n + j);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g * &**c),
                Op::LeftMulBlocks(m, src) => {
                    let (rows, cols) = self.value(*src).dim();
                    let block = rows / m.ncols();
                    let gflat = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((m.nrows(), block * cols))
                        .expect("contiguous");
                    let gs = m.t().dot(&gflat).into_shape_with_order((rows, cols)).expect("contiguous");
                    accumulate(&mut grads, *src, gs);
                }
                Op::Combine(a, gm) => {
                    let (n, k) = self.value(*a).dim();
                    let d = gm.ncols() / k;
                    let mut ga = Mat::zeros((n, k));
                    for i in 0..n {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for dd in 0..d {
                                acc += g[[i, dd]] * gm[[i, kk * d + dd]];
                            }
                            ga[[i, kk]] = acc;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let c = self.value(*a).ncols();
                    let ga = g.broadcast((g.nrows(), c)).expect("broadcast").to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gru(n) => self.gru_backward(n, &g, &mut grads),
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Collects gradients of bound parameters into a store-shaped container.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore, bound: &Bound) -> ParamStore {
        let mut out = store.zeros_like();
        for (i, v) in bound.vars().iter().enumerate() {
            if let Some(g) = grads.get(*v) {
                *out.value_at_mut(i) = g.clone();
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn add_rows(grads: &mut [Option<Mat>], v: Var, dim: (usize, usize), start: usize, g: &Mat) {
    let slot = grads[v.0].get_or_insert_with(|| Mat::zeros(dim));
    let mut dst = slot.slice_mut(s![start..start + g.nrows(), ..]);
    dst += g;
}
