//! Full-batch gradient descent on logit tables.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constant-step gradient descent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientDescent {
    pub step_size: f64,
    pub max_steps: usize,
    /// Stop once the gradient ∞-norm falls below this.
    pub tolerance: f64,
}

impl Default for GradientDescent {
    fn default() -> Self {
        Self {
            step_size: 0.5,
            max_steps: 2000,
            tolerance: 1e-8,
        }
    }
}

/// Result of a descent run.
#[derive(Clone, Debug)]
pub struct Descent {
    pub theta: Array2<f64>,
    pub steps: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub value: f64,
}

impl GradientDescent {
    pub fn new(step_size: f64, max_steps: usize, tolerance: f64) -> Self {
        Self {
            step_size,
            max_steps,
            tolerance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "step_size = {} must be positive",
                self.step_size
            )));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config(format!(
                "tolerance = {} must be ≥ 0",
                self.tolerance
            )));
        }
        Ok(())
    }

    /// Minimize `objective`, which returns the value and gradient at `θ`.
    pub fn minimize<F>(&self, init: Array2<f64>, mut objective: F) -> Result<Descent>
    where
        F: FnMut(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        let mut theta = init;
        let (mut value, mut grad) = objective(&theta)?;
        let mut steps = 0;
        loop {
            let grad_norm = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            if !grad_norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient norm became {grad_norm} at step {steps}"
                )));
            }
            if grad_norm < self.tolerance || steps >= self.max_steps {
                return Ok(Descent {
                    theta,
                    steps,
                    converged: grad_norm < self.tolerance,
                    grad_norm,
                    value,
                });
            }
            theta.scaled_add(-self.step_size, &grad);
            (value, grad) = objective(&theta)?;
            steps += 1;
        }
    }

    /// Maximize by descending on the negated objective.
    pub fn maximize<F>(&self, init: Array2<f64>, mut objective: F) -> Result<Descent>
    where
        F: FnMut(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        let mut out = self.minimize(init, |t| {
            let (v, g) = objective(t)?;
            Ok((-v, -g))
        })?;
        out.value = -out.value;
        Ok(out)
    }
}
