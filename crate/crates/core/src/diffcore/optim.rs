use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment optimizer state with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Mat> = params.values().map(|p| Mat::zeros(p.dim())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        if !params.same_shape(grads) || params.len() != self.m.len() {
            return Err(Error::Dimension("gradients do not match parameter shapes".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite { op: "optimizer gradient".into() });
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.values().enumerate() {
            let p = params.value_at_mut(i);
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn store(v: Mat) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", v);
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(arr2(&[[1.0, -2.0]]));
        let before = p.clone();
        let mut opt = Adam::new(&p, AdamConfig::default());
        let zeros = p.zeros_like();
        opt.step(&mut p, &zeros).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = store(arr2(&[[1.0, -2.0, 0.5]]));
        let g = store(arr2(&[[0.3, -7.0, 1e-3]]));
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut opt = Adam::new(&p, cfg);
        opt.step(&mut p, &g).unwrap();
        // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + eps)
        let expect = [1.0 - 0.01 * 0.3 / (0.3 + 1e-8), -2.0 + 0.01 * 7.0 / (7.0 + 1e-8), 0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)];
        for (a, e) in p.get(super::super::ParamId(0)).iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = store(arr2(&[[1.0]]));
        let g = store(arr2(&[[f64::NAN]]));
        let mut opt = Adam::new(&p, AdamConfig::default());
        assert!(opt.step(&mut p, &g).is_err());
        assert_eq!(opt.steps(), 0);
    }
}
