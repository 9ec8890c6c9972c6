//! HiF8 value grid and round-to-nearest fake quantization.
//!
//! HiF8 assigns mantissa precision by magnitude through a three-row tier
//! table: magnitudes up to 8 carry three mantissa bits, up to 128 two bits
//! and up to 32768 one bit. Every binade `[2^e, 2^(e+1))` with
//! `e >= min_normal_exponent` is split into `2^m` equal steps, where `m` is
//! the mantissa width of the tier that holds the whole binade. Below the
//! smallest normal binade the grid continues linearly down to zero at the
//! smallest step.
//!
//! All functions here operate in the *scaled* domain: the caller has already
//! multiplied the tensor by its per-tensor scale. Values beyond `±max_val`
//! are clipped to the clip point and counted as saturated.

use thiserror::Error;

/// Largest magnitude covered by the tier table.
pub const MAX_TIER_BOUND: f64 = 32768.0;

/// Lower limit accepted for [`CodecParams::min_normal_exponent`].
pub const MIN_EXPONENT_FLOOR: i32 = -64;

/// One row of the HiF8 precision table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TierSpec {
    /// Inclusive upper bound on `|x|` for this tier.
    pub magnitude_bound: f64,
    /// Mantissa bits for values in this tier.
    pub mantissa_bits: u32,
}

/// The tier table, ordered from highest to lowest precision.
pub const TIERS: [TierSpec; 3] = [
    TierSpec {
        magnitude_bound: 8.0,
        mantissa_bits: 3,
    },
    TierSpec {
        magnitude_bound: 128.0,
        mantissa_bits: 2,
    },
    TierSpec {
        magnitude_bound: MAX_TIER_BOUND,
        mantissa_bits: 1,
    },
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("magnitude {0} is outside the tier table (must be in [0, 32768])")]
    OutOfRange(f64),
    #[error("invalid codec parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite input {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("{0} is not a representable grid value")]
    NotOnGrid(f64),
    #[error("code {0:#04x} is not assigned to any value")]
    UnassignedCode(u8),
    #[error("grid has {0} non-negative points; the 8-bit code space holds at most 128")]
    CodeSpaceExceeded(usize),
}

/// Returns the first tier whose bound covers `magnitude`.
pub fn tier_of(magnitude: f64) -> Result<TierSpec, CodecError> {
    if !(0.0..=MAX_TIER_BOUND).contains(&magnitude) {
        return Err(CodecError::OutOfRange(magnitude));
    }
    Ok(*TIERS
        .iter()
        .find(|t| magnitude <= t.magnitude_bound)
        .expect("last tier bound is MAX_TIER_BOUND"))
}

/// Clip bound and smallest normal binade of the emulated format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecParams {
    max_val: f64,
    min_normal_exponent: i32,
}

impl CodecParams {
    pub const DEFAULT_MAX_VAL: f64 = 15.0;
    pub const DEFAULT_MIN_NORMAL_EXPONENT: i32 = -10;

    pub fn new(max_val: f64, min_normal_exponent: i32) -> Result<Self, CodecError> {
        if !(max_val.is_finite() && max_val > 0.0 && max_val <= MAX_TIER_BOUND) {
            return Err(CodecError::InvalidParams(format!(
                "max_val must be in (0, {MAX_TIER_BOUND}], got {max_val}"
            )));
        }
        if !(MIN_EXPONENT_FLOOR..=3).contains(&min_normal_exponent) {
            return Err(CodecError::InvalidParams(format!(
                "min_normal_exponent must be in [{MIN_EXPONENT_FLOOR}, 3], got {min_normal_exponent}"
            )));
        }
        Ok(Self {
            max_val,
            min_normal_exponent,
        })
    }

    /// Default exponent floor with a custom clip bound.
    pub fn with_max_val(max_val: f64) -> Result<Self, CodecError> {
        Self::new(max_val, Self::DEFAULT_MIN_NORMAL_EXPONENT)
    }

    pub fn max_val(&self) -> f64 {
        self.max_val
    }

    pub fn min_normal_exponent(&self) -> i32 {
        self.min_normal_exponent
    }

    /// Grid spacing inside the subnormal range (the step of the lowest binade).
    pub fn subnormal_step(&self) -> f64 {
        let e = self.min_normal_exponent;
        pow2(e - binade_mantissa_bits(e) as i32)
    }
}

impl Default for CodecParams {
    fn default() -> Self {
        Self {
            max_val: Self::DEFAULT_MAX_VAL,
            min_normal_exponent: Self::DEFAULT_MIN_NORMAL_EXPONENT,
        }
    }
}

/// Mantissa bits used inside the binade `[2^e, 2^(e+1))`.
pub fn binade_mantissa_bits(exponent: i32) -> u32 {
    let upper = pow2(exponent + 1);
    TIERS
        .iter()
        .find(|t| upper <= t.magnitude_bound)
        .unwrap_or(&TIERS[TIERS.len() - 1])
        .mantissa_bits
}

fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// Exponent of the binade containing a positive normal `x`.
fn binade_exponent(x: f64) -> i32 {
    ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    Zero,
    Subnormal,
    Normal,
    /// The `max_val` clip point when it is not itself a binade point.
    Clip,
}

impl PointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PointKind::Zero => "zero",
            PointKind::Subnormal => "subnormal",
            PointKind::Normal => "normal",
            PointKind::Clip => "clip",
        }
    }
}

/// A non-negative grid value with its provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub value: f64,
    pub kind: PointKind,
    /// Mantissa bits of the binade the point sits in (`None` for the clip point).
    pub mantissa_bits: Option<u32>,
    /// Spacing to the next point within the same binade.
    pub step: Option<f64>,
}

/// Every non-negative output magnitude, ascending, annotated.
pub fn annotated_grid(params: &CodecParams) -> Vec<GridPoint> {
    let max_val = params.max_val;
    let e_min = params.min_normal_exponent;
    let sub_step = params.subnormal_step();
    let sub_bits = binade_mantissa_bits(e_min);

    let mut grid = vec![GridPoint {
        value: 0.0,
        kind: PointKind::Zero,
        mantissa_bits: None,
        step: None,
    }];
    let mut k = 1u64;
    loop {
        let v = k as f64 * sub_step;
        if v >= pow2(e_min) || v > max_val {
            break;
        }
        grid.push(GridPoint {
            value: v,
            kind: PointKind::Subnormal,
            mantissa_bits: Some(sub_bits),
            step: Some(sub_step),
        });
        k += 1;
    }

    let mut e = e_min;
    'binades: while pow2(e) <= max_val {
        let m = binade_mantissa_bits(e);
        let step = pow2(e - m as i32);
        for k in 0..(1u64 << m) {
            let v = pow2(e) + k as f64 * step;
            if v > max_val {
                break 'binades;
            }
            grid.push(GridPoint {
                value: v,
                kind: PointKind::Normal,
                mantissa_bits: Some(m),
                step: Some(step),
            });
        }
        e += 1;
    }

    if grid.last().map(|p| p.value) != Some(max_val) {
        grid.push(GridPoint {
            value: max_val,
            kind: PointKind::Clip,
            mantissa_bits: None,
            step: None,
        });
    }
    grid
}

/// Sorted non-negative representable magnitudes `<= max_val`, including 0
/// and the clip point. The negative half is the mirror image.
pub fn representable_grid(params: &CodecParams) -> Vec<f64> {
    annotated_grid(params).into_iter().map(|p| p.value).collect()
}

/// Output of [`fake_quantize`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult {
    pub values: Vec<f64>,
    pub saturated_count: usize,
    pub total_count: usize,
}

/// Rounds one finite scaled value. Returns the grid value and whether it was clipped.
pub fn quantize_scalar(x: f64, params: &CodecParams) -> (f64, bool) {
    let mag = x.abs();
    if mag > params.max_val {
        return (params.max_val.copysign(x), true);
    }
    let step = if mag < pow2(params.min_normal_exponent) {
        params.subnormal_step()
    } else {
        let e = binade_exponent(mag);
        pow2(e - binade_mantissa_bits(e) as i32)
    };
    // Power-of-two step: the quotient and products below are exact.
    let k = (mag / step).floor();
    let lo = k * step;
    if lo == mag {
        return (mag.copysign(x), false);
    }
    let hi = ((k + 1.0) * step).min(params.max_val);
    // lo and hi bracket mag within one binade, so both differences are exact.
    let below = mag - lo;
    let above = hi - mag;
    let pick = if below < above {
        lo
    } else if above < below {
        hi
    } else if k % 2.0 == 0.0 {
        // Binade starts sit at even grid indices, so k's parity is lo's.
        lo
    } else {
        hi
    };
    (pick.copysign(x), false)
}

/// Round every element to the nearest grid value (ties to even grid index),
/// clipping `|x| > max_val` to `±max_val`.
pub fn fake_quantize(x: &[f64], params: &CodecParams) -> Result<QuantResult, CodecError> {
    let mut values = Vec::with_capacity(x.len());
    let mut saturated_count = 0;
    for (index, &value) in x.iter().enumerate() {
        if !value.is_finite() {
            return Err(CodecError::NonFinite { index, value });
        }
        let (q, clipped) = quantize_scalar(value, params);
        saturated_count += clipped as usize;
        values.push(q);
    }
    Ok(QuantResult {
        values,
        saturated_count,
        total_count: x.len(),
    })
}

/// Sign-magnitude 8-bit code book: bit 7 is the sign, bits 0..=6 index the
/// non-negative grid. `0x80` (negative zero) is left unassigned.
#[derive(Debug, Clone)]
pub struct Codebook {
    magnitudes: Vec<f64>,
}

impl Codebook {
    const SIGN: u8 = 0x80;

    pub fn new(params: &CodecParams) -> Result<Self, CodecError> {
        let magnitudes = representable_grid(params);
        if magnitudes.len() > 128 {
            return Err(CodecError::CodeSpaceExceeded(magnitudes.len()));
        }
        Ok(Self { magnitudes })
    }

    /// Number of distinct signed values (zero counted once).
    pub fn len(&self) -> usize {
        2 * self.magnitudes.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, value: f64) -> Result<u8, CodecError> {
        let mag = value.abs();
        let idx = self.magnitudes.partition_point(|&g| g < mag);
        if self.magnitudes.get(idx) != Some(&mag) {
            return Err(CodecError::NotOnGrid(value));
        }
        let sign = if value.is_sign_negative() && mag != 0.0 {
            Self::SIGN
        } else {
            0
        };
        Ok(sign | idx as u8)
    }

    pub fn decode(&self, code: u8) -> Result<f64, CodecError> {
        let idx = (code & !Self::SIGN) as usize;
        let negative = code & Self::SIGN != 0;
        match self.magnitudes.get(idx) {
            Some(_) if negative && idx == 0 => Err(CodecError::UnassignedCode(code)),
            Some(&m) if negative => Ok(-m),
            Some(&m) => Ok(m),
            None => Err(CodecError::UnassignedCode(code)),
        }
    }
}
