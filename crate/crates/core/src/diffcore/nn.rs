//! Dense layers and gated recurrent units built on the tape.
//!
//! Sequences are stored time-major and stacked: a batch of `N` sequences of
//! length `T` with `C` features is one `(T·N)×C` matrix whose rows
//! `t·N .. (t+1)·N` hold step `t`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{GruVars, Tape, Var};

/// How a freshly registered weight matrix is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    FanIn,
    Zero,
}

fn init_matrix(rows: usize, cols: usize, fan_in: usize, init: Init, rng: &mut impl Rng) -> Array2<f64> {
    match init {
        Init::Zero => Array2::zeros((rows, cols)),
        Init::FanIn => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
        }
    }
}

/// Affine layer `x·W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, init: Init, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), init_matrix(input, output, input, init, rng));
        let b = store.add(format!("{name}.b"), init_matrix(1, output, input, init, rng));
        Self { w, b, input, output }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p[self.w]);
        tape.add_row(y, p[self.b])
    }
}

/// Gated recurrent unit with update gate `z`, reset gate `r`, and candidate:
///
/// ```text
/// z = σ(x·Wz + h·Uz + bz)      r = σ(x·Wr + h·Ur + br)
/// h̃ = tanh(x·Wh + (r ⊙ h)·Uh + bh)
/// h' = z ⊙ h + (1 − z) ⊙ h̃
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    /// Input weights for the update and reset gates, `input×2H`.
    pub w_zr: ParamId,
    pub w_h: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub b_zr: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let h = hidden;
        let w_zr = store.add(format!("{name}.w_zr"), init_matrix(input, 2 * h, h, Init::FanIn, rng));
        let w_h = store.add(format!("{name}.w_h"), init_matrix(input, h, h, Init::FanIn, rng));
        let u_zr = store.add(format!("{name}.u_zr"), init_matrix(h, 2 * h, h, Init::FanIn, rng));
        let u_h = store.add(format!("{name}.u_h"), init_matrix(h, h, h, Init::FanIn, rng));
        let b_zr = store.add(format!("{name}.b_zr"), init_matrix(1, 2 * h, h, Init::FanIn, rng));
        let b_h = store.add(format!("{name}.b_h"), init_matrix(1, h, h, Init::FanIn, rng));
        Self { w_zr, w_h, u_zr, u_h, b_zr, b_h, input, hidden }
    }

    /// Runs over a stacked `(steps·batch)×input` sequence from a zero state and
    /// returns the hidden states stacked by time.
    pub fn run(&self, tape: &mut Tape, p: &Bound, xs: Var, steps: usize, batch: usize, reverse: bool) -> Var {
        let w = GruVars {
            w_zr: p[self.w_zr],
            w_h: p[self.w_h],
            u_zr: p[self.u_zr],
            u_h: p[self.u_h],
            b_zr: p[self.b_zr],
            b_h: p[self.b_h],
        };
        tape.gru(xs, w, steps, batch, reverse)
    }
}

/// Bidirectional GRU with a dense projection of `[h_fwd, h_bwd]` at every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
    pub output: Dense,
}

impl BiGru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        output_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let forward = GruCell::new(store, &format!("{name}.fwd"), input, hidden, rng);
        let backward = GruCell::new(store, &format!("{name}.bwd"), input, hidden, rng);
        let output = Dense::new(store, &format!("{name}.out"), 2 * hidden, output, output_init, rng);
        Self { forward, backward, output }
    }

    pub fn out_size(&self) -> usize {
        self.output.output
    }

    /// `(steps·batch)×input → (steps·batch)×output`.
    pub fn apply(&self, tape: &mut Tape, p: &Bound, xs: Var, steps: usize, batch: usize) -> Var {
        let hf = self.forward.run(tape, p, xs, steps, batch, false);
        let hb = self.backward.run(tape, p, xs, steps, batch, true);
        let both = tape.concat_cols(&[hf, hb]);
        self.output.apply(tape, p, both)
    }
}

/// Convenience: evaluate a Bi-GRU on one `T×input` sequence without gradients.
pub fn bigru_apply(spec: &BiGru, params: &ParamStore, seq: &Array2<f64>) -> crate::Result<Array2<f64>> {
    if seq.ncols() != spec.forward.input {
        return Err(crate::Error::Dimension(format!(
            "sequence has {} features, network expects {}",
            seq.ncols(),
            spec.forward.input
        )));
    }
    if seq.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::InvalidInput("sequence contains non-finite values".into()));
    }
    let mut tape = Tape::new();
    let p = tape.bind(params);
    let xs = tape.constant(seq.clone());
    let y = spec.apply(&mut tape, &p, xs, seq.nrows(), 1);
    tape.check_finite()?;
    Ok(tape.value(y).clone())
}
