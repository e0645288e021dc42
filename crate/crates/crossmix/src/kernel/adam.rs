//! Adam optimizer state for one parameter tensor.

use crate::error::{Error, Result};
use crate::kernel::tensor::Tensor;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment accumulators plus the step counter for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    learning_rate: f64,
    step: u64,
    first_moment: Tensor,
    second_moment: Tensor,
}

impl AdamState {
    /// Fresh state for a parameter of the given shape.
    pub fn new(learning_rate: f64, rows: usize, cols: usize) -> Self {
        AdamState {
            learning_rate,
            step: 0,
            first_moment: Tensor::zeros(rows, cols),
            second_moment: Tensor::zeros(rows, cols),
        }
    }

    /// Rebuild state from checkpointed parts.
    pub fn from_parts(
        learning_rate: f64,
        step: u64,
        first_moment: Tensor,
        second_moment: Tensor,
    ) -> Self {
        AdamState {
            learning_rate,
            step,
            first_moment,
            second_moment,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        self.learning_rate = learning_rate;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.second_moment
    }

    /// One Adam update with bias correction. `name` identifies the parameter
    /// in NaN diagnostics.
    pub fn apply(&mut self, param: &mut Tensor, grad: &Tensor, name: &str) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: param.shape(),
                right: grad.shape(),
            });
        }
        if grad.data().iter().any(|g| g.is_nan()) {
            return Err(Error::NanGradient {
                param: name.to_string(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - BETA1.powi(t);
        let bias2 = 1.0 - BETA2.powi(t);
        let m = self.first_moment.data_mut();
        let v = self.second_moment.data_mut();
        for (idx, g) in grad.data().iter().enumerate() {
            m[idx] = BETA1 * m[idx] + (1.0 - BETA1) * g;
            v[idx] = BETA2 * v[idx] + (1.0 - BETA2) * g * g;
            let m_hat = m[idx] / bias1;
            let v_hat = v[idx] / bias2;
            param.data_mut()[idx] -= self.learning_rate * m_hat / (v_hat.sqrt() + EPSILON);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut state = AdamState::new(0.1, 1, 3);
        let mut param = Tensor::row(&[1.0, -2.0, 0.5]);
        let before = param.clone();
        state.apply(&mut param, &Tensor::zeros(1, 3), "w").unwrap();
        assert_eq!(param, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn constant_gradient_moves_parameter_against_its_sign() {
        let mut state = AdamState::new(0.01, 1, 2);
        let mut param = Tensor::row(&[0.0, 0.0]);
        let grad = Tensor::row(&[3.0, -0.2]);
        for _ in 0..50 {
            state.apply(&mut param, &grad, "w").unwrap();
        }
        assert!(param.data()[0] < 0.0);
        assert!(param.data()[1] > 0.0);
    }

    #[test]
    fn quadratic_converges_to_its_minimum() {
        // f(w) = (w - 3)^2, gradient 2(w - 3).
        let mut state = AdamState::new(0.1, 1, 1);
        let mut w = Tensor::scalar(0.0);
        for _ in 0..500 {
            let grad = Tensor::scalar(2.0 * (w.data()[0] - 3.0));
            state.apply(&mut w, &grad, "w").unwrap();
        }
        assert!(
            (w.data()[0] - 3.0).abs() < 0.01,
            "ended at {}",
            w.data()[0]
        );
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut state = AdamState::new(0.1, 1, 1);
        let mut param = Tensor::scalar(1.0);
        let err = state
            .apply(&mut param, &Tensor::scalar(f64::NAN), "image_projection")
            .unwrap_err();
        match err {
            Error::NanGradient { param } => assert_eq!(param, "image_projection"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn moment_shapes_track_parameter_shape() {
        let mut state = AdamState::new(0.1, 2, 2);
        let mut param = Tensor::zeros(2, 2);
        state.apply(&mut param, &Tensor::zeros(2, 2), "w").unwrap();
        assert_eq!(state.first_moment().shape(), param.shape());
        assert_eq!(state.second_moment().shape(), param.shape());
        assert!(state
            .apply(&mut param, &Tensor::zeros(1, 4), "w")
            .is_err());
    }
}
