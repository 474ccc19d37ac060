//! Minimal differentiable computation: a matrix tape with reverse-mode
//! gradients, GRU building blocks, an Adam optimizer, and finite-difference
//! probing for gradient checks.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use nn::{bigru_apply, BiGru, Dense, GruCell, Init};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, GruVars, Mat, Tape, Var};

use crate::error::Result;

/// Value and parameter gradient of a scalar built on a fresh tape.
pub fn gradient<F>(params: &ParamStore, loss_fn: F) -> Result<(f64, ParamStore)>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let loss = loss_fn(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), tape.param_grads(&grads, params, &bound)))
}

/// Evaluates a scalar without keeping gradients.
pub fn evaluate<F>(params: &ParamStore, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let loss = loss_fn(&mut tape, &bound)?;
    tape.check_finite()?;
    Ok(tape.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn half_squared_norm_gradient_is_params() {
        let mut s = ParamStore::new();
        s.add("a", arr2(&[[1.0, -2.0], [0.5, 3.0]]));
        s.add("b", arr2(&[[4.0]]));
        let (v, g) = gradient(&s, |t, p| {
            let mut total = None;
            for var in p.vars() {
                let sq = t.mul(*var, *var);
                let sm = t.sum(sq);
                total = Some(match total {
                    None => sm,
                    Some(acc) => t.add(acc, sm),
                });
            }
            Ok(t.scale(total.unwrap(), 0.5))
        })
        .unwrap();
        assert!((v - 0.5 * (1.0 + 4.0 + 0.25 + 9.0 + 16.0)).abs() < 1e-12);
        assert_eq!(g, s);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut s = ParamStore::new();
        s.add("a", arr2(&[[1.0, 2.0]]));
        let (_, g) = gradient(&s, |t, _| Ok(t.constant(arr2(&[[3.0]])))).unwrap();
        assert_eq!(g, s.zeros_like());
    }
}
