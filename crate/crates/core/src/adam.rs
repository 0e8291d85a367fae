//! Adam optimizer over a flat parameter vector.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { learning_rate: 0.01, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning rate must be >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(Error::invalid(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be > 0"));
        }
        Ok(())
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(params: AdamParams, len: usize) -> Result<Self> {
        params.validate()?;
        Ok(AdamState { params, m: vec![0.0; len], v: vec![0.0; len], step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update in place:
    ///
    /// ```text
    /// m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g²
    /// p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    /// ```
    pub fn step(&mut self, values: &mut [f64], grads: &[f64]) -> Result<()> {
        if values.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state holds {} parameters, got {} values / {} grads",
                self.m.len(),
                values.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let p = &self.params;
        let bc1 = 1.0 - p.beta1.powi(self.step as i32);
        let bc2 = 1.0 - p.beta2.powi(self.step as i32);
        for i in 0..values.len() {
            let g = grads[i];
            self.m[i] = p.beta1 * self.m[i] + (1.0 - p.beta1) * g;
            self.v[i] = p.beta2 * self.v[i] + (1.0 - p.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] -= p.learning_rate * m_hat / (v_hat.sqrt() + p.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut state = AdamState::new(AdamParams::default(), 3).unwrap();
        let mut values = vec![1.0, -2.0, 0.5];
        state.step(&mut values, &[0.0; 3]).unwrap();
        assert_eq!(values, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let params = AdamParams::default();
        let mut state = AdamState::new(params, 2).unwrap();
        let mut values = vec![0.0, 0.0];
        state.step(&mut values, &[5.0, -0.3]).unwrap();
        // Bias-corrected first step reduces to -lr * g / (|g| + eps').
        assert!((values[0] + params.learning_rate).abs() < 1e-6);
        assert!((values[1] - params.learning_rate).abs() < 1e-6);
    }

    #[test]
    fn converges_on_a_parabola() {
        let params = AdamParams { learning_rate: 0.1, ..AdamParams::default() };
        let mut state = AdamState::new(params, 1).unwrap();
        let mut x = vec![1.0];
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let g = 2.0 * x[0];
            state.step(&mut x, &[g]).unwrap();
            worst = worst.max(x[0].abs());
        }
        assert!(worst <= 1.0, "iterates escaped the initial envelope");
        assert!(x[0].abs() < 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = AdamState::new(AdamParams::default(), 2).unwrap();
        let mut values = vec![0.0; 3];
        assert!(state.step(&mut values, &[0.0; 3]).is_err());
    }

    #[test]
    fn invalid_params_are_rejected() {
        let bad = AdamParams { beta1: 1.0, ..AdamParams::default() };
        assert!(AdamState::new(bad, 1).is_err());
        let bad = AdamParams { epsilon: 0.0, ..AdamParams::default() };
        assert!(AdamState::new(bad, 1).is_err());
    }
}
