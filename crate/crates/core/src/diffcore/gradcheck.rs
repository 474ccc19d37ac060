//! Central finite differences over the flat parameter view.

use crate::error::Result;

use super::params::ParamStore;

/// Default step for central differences in `f64`.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Numerical gradient of `f` at `params`, one central difference per scalar.
pub fn finite_difference<F>(params: &ParamStore, step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + step;
        probe.set_flat(&flat)?;
        let plus = f(&probe)?;
        flat[i] = base[i] - step;
        probe.set_flat(&flat)?;
        let minus = f(&probe)?;
        flat[i] = base[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative error between the analytic gradient from `loss` and central
/// differences of the same scalar.
pub fn check<F>(params: &ParamStore, loss: F) -> Result<f64>
where
    F: Fn(&mut super::Tape, &super::Bound) -> Result<super::Var>,
{
    let (_, analytic) = super::gradient(params, &loss)?;
    let numeric = finite_difference(params, DEFAULT_STEP, |p| super::evaluate(p, &loss))?;
    Ok(relative_error(&analytic.to_flat(), &numeric))
}
