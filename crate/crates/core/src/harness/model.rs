//! Toy teacher-student regression task and the block-stacked student.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::layout::{ArchSpec, LayoutError, QuantLayout};
use crate::qat::nn::{silu, silu_grad};
use crate::qat::{Linear, Parameter, QatError, QuantContext, QuantLinear, QuantMode, Tensor};

/// Dimensions of the student network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyArch {
    pub input_dim: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub output_dim: usize,
    pub n_blocks: usize,
}

impl Default for ToyArch {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden: 16,
            intermediate: 32,
            output_dim: 4,
            n_blocks: 8,
        }
    }
}

impl ToyArch {
    /// The same dims as an [`ArchSpec`], so the layout rules apply unchanged.
    pub fn arch_spec(&self) -> Result<ArchSpec, LayoutError> {
        let per_block = 3 * self.hidden * self.intermediate + self.hidden * (self.hidden + 1);
        let outer = (self.input_dim + 1) * self.hidden + (self.hidden + 1) * self.output_dim;
        ArchSpec::gated_mlp(
            self.n_blocks,
            self.hidden,
            self.intermediate,
            (outer + per_block * self.n_blocks) as u64,
        )
    }
}

/// Fixed random teacher `y = W2 tanh(W1 x) + noise`; inputs are Gaussian
/// with a per-step log-normal gain so activation ranges drift from step to
/// step. The label noise sets an irreducible loss floor of `NOISE_STD²`.
#[derive(Debug, Clone)]
pub struct ToyTask {
    teacher_in: Tensor,
    teacher_out: Tensor,
    input_dim: usize,
    data_seed: u64,
}

impl ToyTask {
    const TEACHER_STREAM: u64 = u64::MAX;
    const GAIN_SIGMA: f64 = 0.2;
    pub const NOISE_STD: f64 = 0.5;

    pub fn new(arch: &ToyArch, data_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
        rng.set_stream(Self::TEACHER_STREAM);
        let width = 2 * arch.hidden;
        let teacher_in = gaussian(&mut rng, width, arch.input_dim, 1.0 / (arch.input_dim as f64).sqrt());
        let teacher_out = gaussian(&mut rng, arch.output_dim, width, 1.0 / (width as f64).sqrt());
        Self {
            teacher_in,
            teacher_out,
            input_dim: arch.input_dim,
            data_seed,
        }
    }

    /// Inputs and targets for a 1-based step; depends only on `(data_seed, step)`.
    pub fn batch(&self, step: u64, batch_size: usize) -> Result<(Tensor, Tensor), QatError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.data_seed);
        rng.set_stream(step);
        let gain = (Self::GAIN_SIGMA * rng.sample::<f64, _>(StandardNormal)).exp();
        let x = Tensor::from_fn(batch_size, self.input_dim, |_, _| {
            gain * rng.sample::<f64, _>(StandardNormal)
        });
        let h = crate::qat::tensor::matmul_nt(&x, &self.teacher_in)?.map(f64::tanh);
        let clean = crate::qat::tensor::matmul_nt(&h, &self.teacher_out)?;
        let y = clean.map(|v| v + Self::NOISE_STD * rng.sample::<f64, _>(StandardNormal));
        Ok((x, y))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// An MLP projection: full precision or quantization-capable.
pub enum Projection {
    Full(Linear),
    Quant(QuantLinear),
}

impl Projection {
    fn forward(&mut self, x: &Tensor, ctx: &mut QuantContext<'_>) -> Result<Tensor, QatError> {
        match self {
            Projection::Full(l) => l.forward(x),
            Projection::Quant(q) => q.forward(x, ctx),
        }
    }

    fn backward(&mut self, g: &Tensor, ctx: &mut QuantContext<'_>) -> Result<Tensor, QatError> {
        let (grads, weight) = match self {
            Projection::Full(l) => (l.backward(g)?, &mut l.weight),
            Projection::Quant(q) => (q.backward(g, ctx)?, &mut q.weight),
        };
        weight.grad = grads.weight;
        Ok(grads.input)
    }

    fn weight_mut(&mut self) -> &mut Parameter {
        match self {
            Projection::Full(l) => &mut l.weight,
            Projection::Quant(q) => &mut q.weight,
        }
    }
}

struct BlockCache {
    gate_pre: Tensor,
    up_out: Tensor,
}

/// `m = h + mixer(h)`; `out = m + down(silu(gate(m)) ⊙ up(m))`. The mixer is
/// the full-precision stand-in for attention.
struct Block {
    mixer: Linear,
    gate: Projection,
    up: Projection,
    down: Projection,
    cache: Option<BlockCache>,
}

impl Block {
    fn forward(&mut self, h: &Tensor, ctx: &mut QuantContext<'_>) -> Result<Tensor, QatError> {
        let m = h.add(&self.mixer.forward(h)?)?;
        let gate_pre = self.gate.forward(&m, ctx)?;
        let up_out = self.up.forward(&m, ctx)?;
        let act = gate_pre.map(silu).mul(&up_out)?;
        let out = m.add(&self.down.forward(&act, ctx)?)?;
        self.cache = Some(BlockCache { gate_pre, up_out });
        Ok(out)
    }

    fn backward(&mut self, dout: &Tensor, ctx: &mut QuantContext<'_>) -> Result<Tensor, QatError> {
        let BlockCache { gate_pre, up_out } = self.cache.take().ok_or_else(|| QatError::Sequencing("block".into()))?;
        let d_act = self.down.backward(dout, ctx)?;
        let d_gate = d_act.mul(&up_out)?.mul(&gate_pre.map(silu_grad))?;
        let d_up = d_act.mul(&gate_pre.map(silu))?;
        let mut dm = dout.clone();
        dm.add_assign(&self.gate.backward(&d_gate, ctx)?)?;
        dm.add_assign(&self.up.backward(&d_up, ctx)?)?;
        let mixer = self.mixer.backward(&dm)?;
        self.mixer.weight.grad = mixer.weight;
        if let (Some(b), Some(g)) = (self.mixer.bias.as_mut(), mixer.bias) {
            b.grad = g;
        }
        dm.add(&mixer.input)
    }
}

pub struct ToyModel {
    embed: Linear,
    blocks: Vec<Block>,
    head: Linear,
}

impl ToyModel {
    /// Init gain of the layers that write into the residual stream. The
    /// gated MLP is quadratic in its input, so branches must start small
    /// for eight blocks to stay O(1).
    const BRANCH_GAIN: f64 = 0.2;

    /// Parameters are drawn in the same order whatever the layout, so a
    /// layout-free model and a quantization-capable one start identical.
    pub fn new(arch: &ToyArch, layout: Option<&QuantLayout>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let (h, i) = (arch.hidden, arch.intermediate);
        let embed = Linear::new(
            gaussian(&mut rng, h, arch.input_dim, fan(arch.input_dim)),
            Some(Tensor::zeros(&[1, h])),
        );
        let blocks = (0..arch.n_blocks)
            .map(|b| {
                let mixer = Linear::new(
                    gaussian(&mut rng, h, h, Self::BRANCH_GAIN * fan(h)),
                    Some(Tensor::zeros(&[1, h])),
                );
                let mut proj = |name: &str, rows: usize, cols: usize, std: f64| {
                    let w = gaussian(&mut rng, rows, cols, std);
                    match layout {
                        Some(l) if l.is_quantized(b, name) => {
                            Projection::Quant(QuantLinear::new(format!("block{b}.{name}"), w))
                        }
                        _ => Projection::Full(Linear::new(w, None)),
                    }
                };
                let gate = proj("gate_proj", i, h, fan(h));
                let up = proj("up_proj", i, h, fan(h));
                let down = proj("down_proj", h, i, Self::BRANCH_GAIN * fan(i));
                Block {
                    mixer,
                    gate,
                    up,
                    down,
                    cache: None,
                }
            })
            .collect();
        let head = Linear::new(
            gaussian(&mut rng, arch.output_dim, h, fan(h)),
            Some(Tensor::zeros(&[1, arch.output_dim])),
        );
        Self { embed, blocks, head }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &mut QuantContext<'_>) -> Result<Tensor, QatError> {
        let mut h = self.embed.forward(x)?;
        for block in &mut self.blocks {
            h = block.forward(&h, ctx)?;
        }
        self.head.forward(&h)
    }

    /// Backpropagates `grad` (d loss / d output) and stores every parameter gradient.
    pub fn backward(&mut self, grad: &Tensor, ctx: &mut QuantContext<'_>) -> Result<(), QatError> {
        let head = self.head.backward(grad)?;
        store(&mut self.head, head.weight, head.bias);
        let mut g = head.input;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g, ctx)?;
        }
        let embed = self.embed.backward(&g)?;
        store(&mut self.embed, embed.weight, embed.bias);
        Ok(())
    }

    /// Every trainable parameter in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        push_linear(&mut out, &mut self.embed);
        for b in &mut self.blocks {
            push_linear(&mut out, &mut b.mixer);
            out.push(b.gate.weight_mut());
            out.push(b.up.weight_mut());
            out.push(b.down.weight_mut());
        }
        push_linear(&mut out, &mut self.head);
        out
    }

    pub fn quant_layers(&self) -> impl Iterator<Item = &QuantLinear> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.gate, &b.up, &b.down])
            .filter_map(|p| match p {
                Projection::Quant(q) => Some(q),
                Projection::Full(_) => None,
            })
    }

    fn quant_layers_mut(&mut self) -> impl Iterator<Item = &mut QuantLinear> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.gate, &mut b.up, &mut b.down])
            .filter_map(|p| match p {
                Projection::Quant(q) => Some(q),
                Projection::Full(_) => None,
            })
    }

    pub fn set_mode(&mut self, mode: QuantMode) {
        self.quant_layers_mut().for_each(|q| q.set_mode(mode));
    }

    pub fn set_quantize_gradients(&mut self, on: bool) {
        self.quant_layers_mut().for_each(|q| q.set_quantize_gradients(on));
    }

    /// Flattened copy of every parameter value, in [`params_mut`](Self::params_mut) order.
    pub fn snapshot(&mut self) -> Vec<f64> {
        self.params_mut()
            .into_iter()
            .flat_map(|p| p.value.data().to_vec())
            .collect()
    }
}

fn store(l: &mut Linear, weight: Tensor, bias: Option<Tensor>) {
    l.weight.grad = weight;
    if let (Some(b), Some(g)) = (l.bias.as_mut(), bias) {
        b.grad = g;
    }
}

fn push_linear<'a>(out: &mut Vec<&'a mut Parameter>, l: &'a mut Linear) {
    out.push(&mut l.weight);
    if let Some(b) = l.bias.as_mut() {
        out.push(b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecParams;
    use crate::layout::build_layout;
    use crate::qat::nn::mse_loss;
    use crate::qat::SaturationReport;
    use crate::scaling::ScaleRegistry;

    #[test]
    fn toy_layout_uses_boundary_rule() {
        let arch = ToyArch::default();
        let layout = build_layout(&arch.arch_spec().unwrap(), 2).unwrap();
        let model = ToyModel::new(&arch, Some(&layout), 1);
        assert_eq!(model.quant_layers().count(), 3 * 6);
        assert!(model
            .quant_layers()
            .all(|q| !q.layer_id().starts_with("block0.") && !q.layer_id().starts_with("block7.")));
    }

    #[test]
    fn batches_are_a_pure_function_of_step() {
        let task = ToyTask::new(&ToyArch::default(), 3);
        assert_eq!(task.batch(5, 4).unwrap(), task.batch(5, 4).unwrap());
        assert_ne!(task.batch(5, 4).unwrap().0, task.batch(6, 4).unwrap().0);
    }

    #[test]
    fn backward_matches_finite_difference_in_full_precision() {
        let arch = ToyArch {
            n_blocks: 2,
            ..Default::default()
        };
        let task = ToyTask::new(&arch, 2);
        let (x, y) = task.batch(1, 3).unwrap();
        let mut model = ToyModel::new(&arch, None, 4);
        let mut reg = ScaleRegistry::new();
        let mut rep = SaturationReport::new();
        let mut ctx = QuantContext::new(&mut reg, &mut rep, CodecParams::default(), 1);
        let pred = model.forward(&x, &mut ctx).unwrap();
        let (_, g) = mse_loss(&pred, &y).unwrap();
        model.backward(&g, &mut ctx).unwrap();
        let grads: Vec<Vec<f64>> = model.params_mut().iter().map(|p| p.grad.data().to_vec()).collect();
        let n_params = grads.len();
        for (pi, grad) in grads.iter().enumerate().take(n_params) {
            for ei in [0, grad.len() / 2, grad.len() - 1] {
                let mut loss_at = |delta: f64| {
                    let original = model.params_mut()[pi].value.data()[ei];
                    model.params_mut()[pi].value.data_mut()[ei] = original + delta;
                    let pred = model.forward(&x, &mut ctx).unwrap();
                    model.params_mut()[pi].value.data_mut()[ei] = original;
                    mse_loss(&pred, &y).unwrap().0
                };
                let h = 1e-6;
                let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                let scale = fd.abs().max(grad[ei].abs()).max(1e-6);
                assert!(
                    (fd - grad[ei]).abs() / scale < 1e-4,
                    "param {pi} elem {ei}: fd {fd} vs {}",
                    grad[ei]
                );
            }
        }
    }
}
