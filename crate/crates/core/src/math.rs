//! Scalar helpers shared across modules.

/// Logistic function with `logistic(d) + logistic(-d) == 1` exactly.
pub fn logistic(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        1.0 - logistic(-d)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `-ln σ(z)`, the Bradley–Terry negative log-likelihood of a margin `z`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

/// `σ(-z)` computed without cancellation for large positive `z`.
pub fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}
