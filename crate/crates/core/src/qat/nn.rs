//! Element-wise activations and losses, each with its reverse rule.

use super::tensor::Tensor;
use super::QatError;

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `z·σ(z)`.
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

pub fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Mean squared error over all elements and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor), QatError> {
    let diff = pred.zip_map(target, |p, t| p - t)?;
    let n = diff.len() as f64;
    let loss = diff.data().iter().fold(0.0, |s, d| s + d * d) / n;
    Ok((loss, diff.map(|d| 2.0 * d / n)))
}

/// Mean softmax cross-entropy of `logits [batch, classes]` against class
/// indices, and its gradient w.r.t. the logits.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), QatError> {
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(QatError::Shape(format!("{} labels for {b} rows", labels.len())));
    }
    let mut grad = Vec::with_capacity(b * c);
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        if label >= c {
            return Err(QatError::Shape(format!("label {label} out of {c} classes")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += sum.ln() + max - row[label];
        for (j, v) in row.iter().enumerate() {
            let p = (v - max).exp() / sum;
            grad.push((p - if j == label { 1.0 } else { 0.0 }) / b as f64);
        }
    }
    Ok((loss / b as f64, logits.with_data(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn silu_derivative_matches_finite_difference() {
        for z in [-4.0, -1.3, 0.0, 0.7, 3.2] {
            assert!((silu_grad(z) - central_diff(silu, z)).abs() < 1e-8);
        }
    }

    #[test]
    fn mse_value_and_gradient() {
        let p = Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        let t = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let (l, g) = mse_loss(&p, &t).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g.data(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let logits = Tensor::matrix(2, 3, vec![0.2, -1.0, 0.5, 2.0, 0.1, -0.3]).unwrap();
        let labels = [2, 0];
        let (_, g) = cross_entropy_loss(&logits, &labels).unwrap();
        for i in 0..6 {
            let f = |v: f64| {
                let mut d = logits.data().to_vec();
                d[i] = v;
                cross_entropy_loss(&logits.with_data(d), &labels).unwrap().0
            };
            assert!((g.data()[i] - central_diff(f, logits.data()[i])).abs() < 1e-7);
        }
        let uniform = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert!((cross_entropy_loss(&uniform, &[1]).unwrap().0 - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_loss(&uniform, &[4]).is_err());
    }
}
