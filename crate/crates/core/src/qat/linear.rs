//! Full-precision and fake-quantized linear layers.

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use super::{QatError, QuantContext, QuantMode};
use crate::scaling::{StateKey, TensorRole};

/// A trainable tensor and its most recent gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// `y = x Wᵀ (+ b)` in full precision.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    input: Option<Tensor>,
}

impl Linear {
    /// `weight` is `[out, in]`; `bias` is `[1, out]`.
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            weight: Parameter::new(weight),
            bias: bias.map(Parameter::new),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, QatError> {
        let mut y = matmul_nt(x, &self.weight.value)?;
        if let Some(b) = &self.bias {
            y = y.add_row(&b.value)?;
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<LinearGrads, QatError> {
        let x = self.input.take().ok_or_else(|| QatError::Sequencing("linear".into()))?;
        Ok(LinearGrads {
            input: matmul_nn(upstream, &self.weight.value)?,
            weight: matmul_tn(upstream, &x)?,
            bias: self.bias.as_ref().map(|_| upstream.sum_rows()),
        })
    }
}

struct ForwardCache {
    mode: QuantMode,
    input: Tensor,
    weight: Tensor,
}

/// Bias-free linear with HiF8 W8A8 fake quantization.
///
/// In [`QuantMode::Quantize`] the forward computes
/// `dq(q(x·s_x)) · dq(q(W·s_w))ᵀ`, and the backward returns
/// `grad_x = g·W_q`, `grad_W = gᵀ·x_q`, where `g` is the upstream gradient,
/// itself fake-quantized when gradient quantization is on. Scales come from
/// the layer's three states in the context registry, keyed by `layer_id`.
pub struct QuantLinear {
    pub weight: Parameter,
    mode: QuantMode,
    quantize_gradients: bool,
    keys: [StateKey; 3],
    cache: Option<ForwardCache>,
}

impl QuantLinear {
    pub fn new(layer_id: impl Into<String>, weight: Tensor) -> Self {
        let id = layer_id.into();
        Self {
            weight: Parameter::new(weight),
            mode: QuantMode::Off,
            quantize_gradients: true,
            keys: TensorRole::ALL.map(|role| StateKey::new(id.clone(), role)),
            cache: None,
        }
    }

    pub fn layer_id(&self) -> &str {
        &self.keys[0].layer_id
    }

    pub fn state_key(&self, role: TensorRole) -> &StateKey {
        &self.keys[role as usize]
    }

    pub fn state_keys(&self) -> &[StateKey; 3] {
        &self.keys
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: QuantMode) {
        self.mode = mode;
    }

    pub fn quantize_gradients(&self) -> bool {
        self.quantize_gradients
    }

    pub fn set_quantize_gradients(&mut self, on: bool) {
        self.quantize_gradients = on;
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &mut QuantContext<'_>) -> Result<Tensor, QatError> {
        let w = &self.weight.value;
        if x.cols() != w.cols() {
            return Err(QatError::Shape(format!(
                "{}: input has {} features, weight expects {}",
                self.layer_id(),
                x.cols(),
                w.cols()
            )));
        }
        let (input, weight) = match self.mode {
            QuantMode::Off => (x.clone(), w.clone()),
            QuantMode::ObserveOnly => {
                ctx.observe(&self.keys[TensorRole::Activation as usize], x.amax())?;
                ctx.observe(&self.keys[TensorRole::Weight as usize], w.amax())?;
                (x.clone(), w.clone())
            }
            QuantMode::Quantize => {
                let xq = ctx.quantize(&self.keys[TensorRole::Activation as usize], x)?;
                let wq = ctx.quantize(&self.keys[TensorRole::Weight as usize], w)?;
                (xq, wq)
            }
        };
        let y = matmul_nt(&input, &weight)?;
        self.cache = Some(ForwardCache {
            mode: self.mode,
            input,
            weight,
        });
        Ok(y)
    }

    pub fn backward(&mut self, upstream: &Tensor, ctx: &mut QuantContext<'_>) -> Result<LinearGrads, QatError> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| QatError::Sequencing(self.layer_id().to_string()))?;
        let grad_key = &self.keys[TensorRole::Gradient as usize];
        let g = match (cache.mode, self.quantize_gradients) {
            (QuantMode::Quantize, true) => ctx.quantize(grad_key, upstream)?,
            (QuantMode::ObserveOnly, true) => {
                ctx.observe(grad_key, upstream.amax())?;
                upstream.clone()
            }
            _ => upstream.clone(),
        };
        Ok(LinearGrads {
            input: matmul_nn(&g, &cache.weight)?,
            weight: matmul_tn(&g, &cache.input)?,
            bias: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecParams;
    use crate::qat::SaturationReport;
    use crate::scaling::{AmaxAlgo, ScaleRegistry, ScaleState};

    fn registry_for(layer: &QuantLinear, algo: AmaxAlgo, seed_amax: &[f64]) -> ScaleRegistry {
        let mut reg = ScaleRegistry::new();
        for key in layer.state_keys() {
            let mut s = ScaleState::new(algo, 64).unwrap();
            for &a in seed_amax {
                s.observe(a).unwrap();
            }
            reg.register(key.clone(), s).unwrap();
        }
        reg
    }

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn disabled_layer_is_plain_matmul() {
        let w = t(2, 3, &[0.3, -1.1, 2.7, 0.01, 0.5, -0.25]);
        let x = t(2, 3, &[1.7, 0.2, -3.3, 0.9, 1.1, 0.05]);
        let mut ql = QuantLinear::new("l", w.clone());
        let mut plain = Linear::new(w, None);
        let mut reg = ScaleRegistry::new();
        let mut rep = SaturationReport::new();
        let mut ctx = QuantContext::new(&mut reg, &mut rep, CodecParams::default(), 1);
        let yq = ql.forward(&x, &mut ctx).unwrap();
        assert_eq!(yq, plain.forward(&x).unwrap());
        let g = t(2, 2, &[0.4, -0.7, 1.3, 0.2]);
        let gq = ql.backward(&g, &mut ctx).unwrap();
        let gp = plain.backward(&g).unwrap();
        assert_eq!(gq.input, gp.input);
        assert_eq!(gq.weight, gp.weight);
        assert!(rep.events().is_empty());
    }

    #[test]
    fn on_grid_operands_with_unit_scale_are_exact() {
        let w = t(2, 2, &[1.0, -0.5, 2.5, 0.75]);
        let x = t(1, 2, &[3.0, -6.5]);
        let mut ql = QuantLinear::new("l", w.clone());
        ql.set_mode(QuantMode::Quantize);
        let mut reg = registry_for(&ql, AmaxAlgo::MaxWindow { window: 64 }, &[15.0]);
        let mut rep = SaturationReport::new();
        let mut ctx = QuantContext::new(&mut reg, &mut rep, CodecParams::default(), 1);
        let y = ql.forward(&x, &mut ctx).unwrap();
        assert_eq!(y, matmul_nt(&x, &w).unwrap());
        let g = t(1, 2, &[0.5, -1.25]);
        let grads = ql.backward(&g, &mut ctx).unwrap();
        assert_eq!(grads.input, matmul_nn(&g, &w).unwrap());
        assert_eq!(grads.weight, matmul_tn(&g, &x).unwrap());
    }

    #[test]
    fn single_element_rounds_like_the_codec() {
        let mut ql = QuantLinear::new("l", t(1, 1, &[1.0]));
        ql.set_mode(QuantMode::Quantize);
        let mut reg = registry_for(&ql, AmaxAlgo::MostRecent, &[15.0]);
        let mut rep = SaturationReport::new();
        let mut ctx = QuantContext::new(&mut reg, &mut rep, CodecParams::default(), 1);
        let y = ql.forward(&t(1, 1, &[8.6]), &mut ctx).unwrap();
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn delayed_scale_observes_after_use() {
        let mut ql = QuantLinear::new("l", t(1, 1, &[1.0]));
        ql.set_mode(QuantMode::Quantize);
        let mut reg = registry_for(&ql, AmaxAlgo::MostRecent, &[15.0]);
        let mut rep = SaturationReport::new();
        let mut ctx = QuantContext::new(&mut reg, &mut rep, CodecParams::default(), 1);
        // A spike to 30 uses last step's scale (1.0): clipped to 15.
        let y = ql.forward(&t(1, 1, &[30.0]), &mut ctx).unwrap();
        assert_eq!(y.data(), &[15.0]);
        assert_eq!(ctx.report.total_saturated(), 1);
        let act = StateKey::new("l", TensorRole::Activation);
        assert_eq!(ctx.registry.get(&act).unwrap().estimate(None).unwrap(), 30.0);
    }

    #[test]
    fn missing_history_and_sequencing_errors() {
        let mut ql = QuantLinear::new("l", t(1, 1, &[1.0]));
        let mut reg = registry_for(&ql, AmaxAlgo::MostRecent, &[]);
        let mut rep = SaturationReport::new();
        let mut ctx = QuantContext::new(&mut reg, &mut rep, CodecParams::default(), 1);
        assert!(matches!(
            ql.backward(&t(1, 1, &[1.0]), &mut ctx),
            Err(QatError::Sequencing(_))
        ));
        ql.set_mode(QuantMode::Quantize);
        assert!(matches!(
            ql.forward(&t(1, 1, &[1.0]), &mut ctx),
            Err(QatError::Scaling(crate::scaling::ScalingError::NoHistory))
        ));
        assert!(matches!(
            ql.forward(&t(1, 2, &[1.0, 2.0]), &mut ctx),
            Err(QatError::Shape(_))
        ));
    }

    #[test]
    fn gradient_quantization_uses_its_own_state() {
        let mut ql = QuantLinear::new("l", t(1, 1, &[1.0]));
        ql.set_mode(QuantMode::Quantize);
        let mut reg = registry_for(&ql, AmaxAlgo::Current, &[]);
        let mut rep = SaturationReport::new();
        let mut ctx = QuantContext::new(&mut reg, &mut rep, CodecParams::default(), 1);
        ql.forward(&t(1, 1, &[2.0]), &mut ctx).unwrap();
        // Under CTS a lone element maps onto the clip point and back exactly.
        let g = t(1, 1, &[0.3]);
        let grads = ql.backward(&g, &mut ctx).unwrap();
        assert_eq!(grads.weight.data(), &[0.3 * 2.0]);
        let gk = StateKey::new("l", TensorRole::Gradient);
        assert_eq!(ctx.registry.get(&gk).unwrap().history().back(), Some(&0.3));
        assert_eq!(rep.events().len(), 3);
        assert_eq!(rep.total_saturated(), 0);
    }
}
