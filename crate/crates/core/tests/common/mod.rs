//! Reference implementations used only by tests. Nothing here calls the
//! library's rounding or grid code.
#![allow(dead_code)]

/// `(magnitude bound, mantissa bits)` per precision tier.
pub const TIER_TABLE: [(f64, u32); 3] = [(8.0, 3), (128.0, 2), (32768.0, 1)];

pub fn tier_bits(magnitude: f64) -> u32 {
    TIER_TABLE
        .iter()
        .find(|(b, _)| magnitude <= *b)
        .map(|t| t.1)
        .expect("magnitude within the tier table")
}

/// Non-negative grid built from scratch: subnormals below `2^e_min`, then
/// binades `[2^e, 2^(e+1))` using the bits of the tier that holds `2^(e+1)`,
/// then the clip point.
pub fn oracle_grid(max_val: f64, e_min: i32) -> Vec<f64> {
    let mut g = vec![0.0];
    let sub_bits = tier_bits(2f64.powi(e_min + 1));
    let sub_step = 2f64.powi(e_min - sub_bits as i32);
    let mut k = 1.0;
    while k * sub_step < 2f64.powi(e_min) && k * sub_step <= max_val {
        g.push(k * sub_step);
        k += 1.0;
    }
    let mut e = e_min;
    while 2f64.powi(e) <= max_val {
        // The binade starting at the top bound contributes only its first point.
        let m = tier_bits(2f64.powi(e + 1).min(32768.0));
        let step = 2f64.powi(e - m as i32);
        for j in 0..(1u32 << m) {
            let v = 2f64.powi(e) + j as f64 * step;
            if v <= max_val {
                g.push(v);
            }
        }
        e += 1;
    }
    if *g.last().unwrap() != max_val {
        g.push(max_val);
    }
    g
}

/// Nearest grid magnitude by linear scan; ties go to the even index;
/// anything beyond the last point clips to it.
pub fn nearest_magnitude(grid: &[f64], mag: f64) -> f64 {
    let mut best = 0;
    for i in 1..grid.len() {
        let d_best = (grid[best] - mag).abs();
        let d = (grid[i] - mag).abs();
        if d < d_best || (d == d_best && i % 2 == 0) {
            best = i;
        }
    }
    grid[best]
}

pub fn nearest_signed(grid: &[f64], x: f64) -> f64 {
    let q = nearest_magnitude(grid, x.abs());
    if x < 0.0 {
        -q
    } else {
        q
    }
}

/// Deterministic amax traces: a log-space random walk with occasional
/// spikes and decays, so both rising and falling runs occur.
pub fn amax_trace(seed: u64, len: usize) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut level: f64 = rng.random_range(-3.0..3.0);
    (0..len)
        .map(|_| {
            level += rng.random_range(-0.05..0.05);
            let spike = if rng.random_bool(0.01) {
                rng.random_range(0.0..1.5)
            } else {
                0.0
            };
            (level + spike).exp()
        })
        .collect()
}

pub mod gradcheck;
