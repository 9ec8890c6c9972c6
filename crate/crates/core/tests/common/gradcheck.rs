//! Two-layer network `y = W2 · silu(W1 · x)` with every operand
//! fake-quantized under max-window scaling. The library's STE gradients
//! are compared with central differences of a surrogate written here in
//! plain loops: each quantizer becomes `v + offset`, where the offset is
//! the rounding error at the base point, held fixed.

use hif8_lab::codec::CodecParams;
use hif8_lab::qat::nn::{mse_loss, silu, silu_grad};
use hif8_lab::qat::{QuantContext, QuantLinear, QuantMode, SaturationReport, Tensor};
use hif8_lab::scaling::{AmaxAlgo, ScaleRegistry, ScaleState, TensorRole};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{nearest_signed, oracle_grid};

const B: usize = 4;
const IN: usize = 3;
const HID: usize = 5;
const OUT: usize = 2;

pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// |surrogate loss - library loss| at the base point.
    pub loss_gap: f64,
    /// Elements clipped during the library forward.
    pub clipped: u64,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// `a [r, k] · b [c, k]ᵀ`, row-major.
fn mm_nt(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = (0..k).map(|t| a[i * k + t] * b[j * k + t]).sum();
        }
    }
    out
}

fn offsets(v: &[f64], amax_hat: f64, grid: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| nearest_signed(grid, x / amax_hat * 15.0) / 15.0 * amax_hat - x)
        .collect()
}

struct Surrogate {
    y: Vec<f64>,
    ox: Vec<f64>,
    o1: Vec<f64>,
    oa: Vec<f64>,
    o2: Vec<f64>,
}

impl Surrogate {
    fn loss(&self, x: &[f64], w1: &[f64], w2: &[f64]) -> f64 {
        let add = |v: &[f64], o: &[f64]| v.iter().zip(o).map(|(a, b)| a + b).collect::<Vec<_>>();
        let h = mm_nt(&add(x, &self.ox), &add(w1, &self.o1), B, IN, HID);
        let a: Vec<f64> = h.iter().map(|&v| silu(v)).collect();
        let out = mm_nt(&add(&a, &self.oa), &add(w2, &self.o2), B, HID, OUT);
        out.iter().zip(&self.y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / out.len() as f64
    }
}

pub fn two_layer_check(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_vec(&mut rng, B * IN);
    let w1 = rand_vec(&mut rng, HID * IN);
    let w2 = rand_vec(&mut rng, OUT * HID);
    let y = rand_vec(&mut rng, B * OUT);

    let amax = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let h0 = mm_nt(&x, &w1, B, IN, HID);
    let a0: Vec<f64> = h0.iter().map(|&v| silu(v)).collect();
    // Histories: generous for most operands, tight (clipping) for the hidden activation.
    let hist = [
        ("l1", TensorRole::Activation, amax(&x) * 1.25),
        ("l1", TensorRole::Weight, amax(&w1) * 1.1),
        ("l2", TensorRole::Activation, amax(&a0) * 0.7),
        ("l2", TensorRole::Weight, amax(&w2) * 1.05),
    ];

    let mut l1 = QuantLinear::new("l1", Tensor::matrix(HID, IN, w1.clone()).unwrap());
    let mut l2 = QuantLinear::new("l2", Tensor::matrix(OUT, HID, w2.clone()).unwrap());
    let mut reg = ScaleRegistry::new();
    for layer in [&mut l1, &mut l2] {
        layer.set_mode(QuantMode::Quantize);
        layer.set_quantize_gradients(false);
        for key in layer.state_keys() {
            let mut s = ScaleState::new(AmaxAlgo::MaxWindow { window: 64 }, 64).unwrap();
            if let Some(&(_, _, a)) = hist.iter().find(|(l, r, _)| *l == key.layer_id && *r == key.role) {
                s.observe(a).unwrap();
                s.observe(0.5 * a).unwrap();
            }
            reg.register(key.clone(), s).unwrap();
        }
    }
    let mut rep = SaturationReport::new();
    let mut ctx = QuantContext::new(&mut reg, &mut rep, CodecParams::default(), 1);
    let xt = Tensor::matrix(B, IN, x.clone()).unwrap();
    let h = l1.forward(&xt, &mut ctx).unwrap();
    let a = h.map(silu);
    let out = l2.forward(&a, &mut ctx).unwrap();
    let (lib_loss, g) = mse_loss(&out, &Tensor::matrix(B, OUT, y.clone()).unwrap()).unwrap();
    let g2 = l2.backward(&g, &mut ctx).unwrap();
    let dh = g2.input.zip_map(&h, |d, hv| d * silu_grad(hv)).unwrap();
    let g1 = l1.backward(&dh, &mut ctx).unwrap();
    let clipped = rep.total_saturated();

    let grid = oracle_grid(15.0, -10);
    let est = |i: usize| hist[i].2;
    let ox = offsets(&x, est(0), &grid);
    let o1 = offsets(&w1, est(1), &grid);
    let add = |v: &[f64], o: &[f64]| v.iter().zip(o).map(|(a, b)| a + b).collect::<Vec<_>>();
    // The second layer sees the activation of the already-quantized first layer.
    let a_base: Vec<f64> = mm_nt(&add(&x, &ox), &add(&w1, &o1), B, IN, HID)
        .iter()
        .map(|&v| silu(v))
        .collect();
    let sur = Surrogate {
        oa: offsets(&a_base, est(2), &grid),
        o2: offsets(&w2, est(3), &grid),
        ox,
        o1,
        y,
    };
    let loss_gap = (sur.loss(&x, &w1, &w2) - lib_loss).abs();

    let mut checked = 0;
    let mut max_rel_err: f64 = 0.0;
    let step = 1e-6;
    let mut compare = |fd: f64, ste: f64| {
        checked += 1;
        let denom = fd.abs().max(ste.abs()).max(1e-6);
        max_rel_err = max_rel_err.max((fd - ste).abs() / denom);
    };
    for i in 0..x.len() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p[i] += step;
        m[i] -= step;
        compare(
            (sur.loss(&p, &w1, &w2) - sur.loss(&m, &w1, &w2)) / (2.0 * step),
            g1.input.data()[i],
        );
    }
    for i in 0..w1.len() {
        let (mut p, mut m) = (w1.clone(), w1.clone());
        p[i] += step;
        m[i] -= step;
        compare(
            (sur.loss(&x, &p, &w2) - sur.loss(&x, &m, &w2)) / (2.0 * step),
            g1.weight.data()[i],
        );
    }
    for i in 0..w2.len() {
        let (mut p, mut m) = (w2.clone(), w2.clone());
        p[i] += step;
        m[i] -= step;
        compare(
            (sur.loss(&x, &w1, &p) - sur.loss(&x, &w1, &m)) / (2.0 * step),
            g2.weight.data()[i],
        );
    }
    GradReport {
        checked,
        max_rel_err,
        loss_gap,
        clipped,
    }
}
