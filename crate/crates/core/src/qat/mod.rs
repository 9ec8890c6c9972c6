//! Quantization-aware training primitives.
//!
//! Layers carry their own forward caches and expose explicit reverse-mode
//! rules (vector-Jacobian products); a model runs them in reverse order to
//! backpropagate. Fake quantization inside [`QuantLinear`] uses the
//! straight-through estimator: its derivative is taken as 1 everywhere,
//! clipped elements included, so gradients flow through the quantized
//! operands as though quantization were the identity.

use thiserror::Error;

use crate::codec::{fake_quantize, CodecError, CodecParams};
use crate::scaling::trace::AmaxTraceRow;
use crate::scaling::{ScaleRegistry, ScalingError, StateKey, TensorScale};

pub mod linear;
pub mod nn;
pub mod optim;
pub mod ste;
pub mod telemetry;
pub mod tensor;

pub use linear::{Linear, LinearGrads, Parameter, QuantLinear};
pub use telemetry::{SaturationEvent, SaturationReport, SaturationTotals};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QatError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward called on `{0}` without a preceding forward")]
    Sequencing(String),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// What a quantized layer does with its operands this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Plain full-precision linear.
    Off,
    /// Full-precision arithmetic, but amax values are fed to the scale states.
    ObserveOnly,
    /// Fake-quantize weights and activations (and gradients when enabled).
    Quantize,
}

/// Mutable per-step state threaded through every layer call.
pub struct QuantContext<'a> {
    pub registry: &'a mut ScaleRegistry,
    pub report: &'a mut SaturationReport,
    pub codec: CodecParams,
    pub step: u64,
    /// When present, every observation is appended here.
    pub trace: Option<&'a mut Vec<AmaxTraceRow>>,
}

impl<'a> QuantContext<'a> {
    pub fn new(
        registry: &'a mut ScaleRegistry,
        report: &'a mut SaturationReport,
        codec: CodecParams,
        step: u64,
    ) -> Self {
        Self {
            registry,
            report,
            codec,
            step,
            trace: None,
        }
    }

    /// Feed a tensor's true amax to its state. All-zero tensors are skipped.
    pub fn observe(&mut self, key: &StateKey, amax: f64) -> Result<(), QatError> {
        if amax == 0.0 {
            return Ok(());
        }
        self.registry.get_mut(key)?.observe(amax)?;
        if let Some(trace) = self.trace.as_deref_mut() {
            trace.push(AmaxTraceRow {
                step: self.step,
                layer_id: key.layer_id.clone(),
                role: key.role,
                amax,
            });
        }
        Ok(())
    }

    /// Scale, fake-quantize and dequantize `x` with the estimate from `key`'s
    /// state, record saturation, then observe this step's amax.
    pub fn quantize(&mut self, key: &StateKey, x: &Tensor) -> Result<Tensor, QatError> {
        let amax = x.amax();
        if amax == 0.0 {
            self.report.record(self.step, key, 0, x.len() as u64);
            return Ok(x.clone());
        }
        let estimate = self.registry.get(key)?.estimate(Some(amax))?;
        let scale = TensorScale::new(estimate, self.codec.max_val())?;
        let scaled: Vec<f64> = x.data().iter().map(|&v| scale.apply(v)).collect();
        let q = fake_quantize(&scaled, &self.codec)?;
        self.report
            .record(self.step, key, q.saturated_count as u64, q.total_count as u64);
        let out = x.with_data(q.values.into_iter().map(|v| scale.remove(v)).collect());
        self.observe(key, amax)?;
        Ok(out)
    }
}
