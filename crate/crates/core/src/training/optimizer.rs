//! Adam with lazily created per-parameter state.
//!
//! A parameter's moments and bias-correction step count advance only when a
//! step actually produced a gradient for it, so parameters outside the
//! selected branch's graph stay bit-identical, moments included.

use std::collections::BTreeMap;

use crate::model::Parameter;

pub struct AdamOptimizer {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamOptimizer {
    pub fn new() -> Self {
        AdamOptimizer { beta1: 0.9, beta2: 0.98, eps: 1e-9, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One Adam update on a single parameter, using its own update count
    /// for bias correction.
    pub fn apply(&mut self, param: &mut Parameter, grad: &[f64], lr: f64) {
        debug_assert_eq!(param.data.len(), grad.len());
        let m = self
            .m
            .entry(param.name.clone())
            .or_insert_with(|| vec![0.0; param.data.len()]);
        let v = self
            .v
            .entry(param.name.clone())
            .or_insert_with(|| vec![0.0; param.data.len()]);
        param.step_count += 1;
        let t = param.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..grad.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }

    /// Moment buffers for a parameter, if it has ever been updated.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        match (self.m.get(name), self.v.get(name)) {
            (Some(m), Some(v)) => Some((m.as_slice(), v.as_slice())),
            _ => None,
        }
    }
}

impl Default for AdamOptimizer {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: Vec<f64>) -> Parameter {
        Parameter { name: "p".to_string(), shape: vec![values.len()], data: values, step_count: 0 }
    }

    #[test]
    fn first_step_moves_against_gradient() {
        let mut opt = AdamOptimizer::new();
        let mut p = param(vec![1.0, -1.0]);
        opt.apply(&mut p, &[0.5, -0.25], 0.1);
        assert!(p.data[0] < 1.0);
        assert!(p.data[1] > -1.0);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn untouched_parameter_has_no_state() {
        let opt = AdamOptimizer::new();
        assert!(opt.moments("never").is_none());
    }

    #[test]
    fn repeated_steps_converge_on_quadratic() {
        // minimize (x - 3)^2, gradient 2(x - 3)
        let mut opt = AdamOptimizer::new();
        let mut p = param(vec![0.0]);
        for _ in 0..4000 {
            let g = 2.0 * (p.data[0] - 3.0);
            opt.apply(&mut p, &[g], 0.01);
        }
        assert!((p.data[0] - 3.0).abs() < 1e-3, "{}", p.data[0]);
    }
}
