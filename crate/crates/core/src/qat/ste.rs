//! Scalar check of the straight-through rule.
//!
//! A [`ScalarGraph`] is `x -> post(dq(q(s · pre(x))))` with a single fake
//! quantizer. The STE gradient is obtained by a reverse sweep over the
//! recorded nodes; the surrogate gradient treats the quantizer as the
//! identity (evaluating `post'` at the same forward value). They must agree
//! exactly, including when the quantizer clips.

use super::nn::{sigmoid, silu, silu_grad};
use super::QatError;
use crate::codec::{quantize_scalar, CodecParams};
use crate::scaling::TensorScale;

/// Local derivative the straight-through estimator assigns to fake quantization.
pub const STE_DERIVATIVE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smooth {
    Affine { scale: f64, shift: f64 },
    Sigmoid,
    Tanh,
    Silu,
    Square,
}

impl Smooth {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Smooth::Affine { scale, shift } => scale * x + shift,
            Smooth::Sigmoid => sigmoid(x),
            Smooth::Tanh => x.tanh(),
            Smooth::Silu => silu(x),
            Smooth::Square => x * x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Smooth::Affine { scale, .. } => scale,
            Smooth::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Smooth::Tanh => 1.0 - x.tanh().powi(2),
            Smooth::Silu => silu_grad(x),
            Smooth::Square => 2.0 * x,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScalarGraph {
    pub pre: Smooth,
    pub post: Smooth,
    /// Amax estimate that fixes the quantizer's scale.
    pub amax_hat: f64,
    pub codec: CodecParams,
}

/// Forward record: each node's input and its local derivative.
struct Sweep {
    value: f64,
    locals: Vec<f64>,
    quantized: f64,
    clipped: bool,
}

impl ScalarGraph {
    fn sweep(&self, x: f64) -> Result<Sweep, QatError> {
        let scale = TensorScale::new(self.amax_hat, self.codec.max_val())?;
        let z = self.pre.value(x);
        let (q, clipped) = quantize_scalar(scale.apply(z), &self.codec);
        let quantized = scale.remove(q);
        let value = self.post.value(quantized);
        Ok(Sweep {
            value,
            locals: vec![self.pre.derivative(x), STE_DERIVATIVE, self.post.derivative(quantized)],
            quantized,
            clipped,
        })
    }

    pub fn forward(&self, x: f64) -> Result<f64, QatError> {
        Ok(self.sweep(x)?.value)
    }

    /// Whether the quantizer clips at `x`.
    pub fn clips_at(&self, x: f64) -> Result<bool, QatError> {
        Ok(self.sweep(x)?.clipped)
    }

    /// Reverse-mode gradient with the quantizer's derivative set to 1.
    pub fn ste_gradient(&self, x: f64) -> Result<f64, QatError> {
        let sweep = self.sweep(x)?;
        Ok(sweep.locals.iter().rev().fold(1.0, |g, local| g * local))
    }

    /// Gradient of the graph with the quantizer replaced by identity plus
    /// the frozen offset `quantized - pre(x)`.
    pub fn surrogate_gradient(&self, x: f64) -> Result<f64, QatError> {
        let q = self.sweep(x)?.quantized;
        Ok(self.post.derivative(q) * self.pre.derivative(x))
    }
}

/// `|STE gradient - surrogate gradient|` at `x0`; zero by contract.
pub fn ste_identity_check(graph: &ScalarGraph, x0: f64) -> Result<f64, QatError> {
    Ok((graph.ste_gradient(x0)? - graph.surrogate_gradient(x0)?).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> ScalarGraph {
        ScalarGraph {
            pre: Smooth::Affine {
                scale: 1.5,
                shift: 0.25,
            },
            post: Smooth::Tanh,
            amax_hat: 4.0,
            codec: CodecParams::default(),
        }
    }

    #[test]
    fn zero_discrepancy_at_origin() {
        assert_eq!(ste_identity_check(&graph(), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn clipped_region_still_passes_gradient() {
        let g = graph();
        assert!(g.clips_at(10.0).unwrap());
        assert_eq!(ste_identity_check(&g, 10.0).unwrap(), 0.0);
        // The STE gradient is non-zero even though the forward is flat there.
        assert!(g.ste_gradient(10.0).unwrap() != 0.0);
        assert_eq!(g.forward(10.0).unwrap(), g.forward(11.0).unwrap());
    }

    #[test]
    fn linear_chain_matches_unclipped_finite_difference() {
        // loss = w * fq(x): the unclipped surrogate is w * x.
        let g = ScalarGraph {
            pre: Smooth::Affine { scale: 1.0, shift: 0.0 },
            post: Smooth::Affine {
                scale: -2.5,
                shift: 0.0,
            },
            amax_hat: 15.0,
            codec: CodecParams::default(),
        };
        let x = 40.0;
        assert!(g.clips_at(x).unwrap());
        let h = 1e-3;
        let fd = (-2.5 * (x + h) - -2.5 * (x - h)) / (2.0 * h);
        let ste = g.ste_gradient(x).unwrap();
        assert!(((ste - fd) / fd).abs() < 1e-4);
    }

    #[test]
    fn smooth_derivatives() {
        for f in [
            Smooth::Sigmoid,
            Smooth::Tanh,
            Smooth::Silu,
            Smooth::Square,
            Smooth::Affine { scale: 3.0, shift: 1.0 },
        ] {
            for x in [-2.0, -0.3, 0.4, 1.7] {
                let h = 1e-6;
                let fd = (f.value(x + h) - f.value(x - h)) / (2.0 * h);
                assert!((f.derivative(x) - fd).abs() < 1e-7, "{f:?} at {x}");
            }
        }
    }
}
