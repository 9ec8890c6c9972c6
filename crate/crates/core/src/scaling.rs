//! Per-tensor scale estimation.
//!
//! Each quantized tensor owns a [`ScaleState`]: a bounded amax history plus
//! the exponential-smoothing carry. Delayed scaling (DTS) derives the scale
//! from observations of earlier steps, current scaling (CTS) from the amax
//! of the tensor being quantized. Callers must estimate before observing
//! within a step; that ordering is what makes DTS delayed.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod trace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScalingError {
    #[error("invalid amax observation {0} (must be finite and > 0)")]
    InvalidObservation(f64),
    #[error("no amax history for a delayed-scaling estimate; run warmup first")]
    NoHistory,
    #[error("current-tensor scaling needs the current amax")]
    MissingCurrentAmax,
    #[error("scale is undefined for amax estimate {0}")]
    DivisionDomain(f64),
    #[error("invalid scaling configuration: {0}")]
    InvalidConfig(String),
    #[error("no scale state registered for {0}")]
    UnknownState(StateKey),
    #[error("scale state {0} registered twice")]
    DuplicateState(StateKey),
}

/// Amax estimation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AmaxAlgo {
    /// Previous step's amax.
    MostRecent,
    /// Exponential moving average of observed amax values.
    ExpSmooth { alpha: f64 },
    /// Maximum over the most recent `window` observations.
    MaxWindow { window: usize },
    /// The current tensor's own amax (CTS).
    Current,
}

impl AmaxAlgo {
    pub const DEFAULT_ALPHA: f64 = 0.9;

    pub fn is_delayed(&self) -> bool {
        !matches!(self, AmaxAlgo::Current)
    }
}

impl fmt::Display for AmaxAlgo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AmaxAlgo::MostRecent => write!(f, "most_recent"),
            AmaxAlgo::ExpSmooth { alpha } => write!(f, "exp_smooth:{alpha}"),
            AmaxAlgo::MaxWindow { window } => write!(f, "max:{window}"),
            AmaxAlgo::Current => write!(f, "current"),
        }
    }
}

/// Parses `most_recent`, `exp_smooth[:alpha]`, `max[:window]` and `current`.
/// A bare `max` uses a 64-step window.
impl FromStr for AmaxAlgo {
    type Err = ScalingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.trim().split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.trim(), None),
        };
        let bad = || ScalingError::InvalidConfig(format!("unrecognised amax algorithm `{s}`"));
        let algo = match (name, arg) {
            ("most_recent", None) => AmaxAlgo::MostRecent,
            ("current" | "cts", None) => AmaxAlgo::Current,
            ("exp_smooth", None) => AmaxAlgo::ExpSmooth {
                alpha: Self::DEFAULT_ALPHA,
            },
            ("exp_smooth", Some(a)) => AmaxAlgo::ExpSmooth {
                alpha: a.parse().map_err(|_| bad())?,
            },
            ("max", None) => AmaxAlgo::MaxWindow { window: 64 },
            ("max", Some(w)) => AmaxAlgo::MaxWindow {
                window: w.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        algo.validate(usize::MAX)?;
        Ok(algo)
    }
}

impl AmaxAlgo {
    fn validate(&self, capacity: usize) -> Result<(), ScalingError> {
        match *self {
            AmaxAlgo::ExpSmooth { alpha } if !(alpha > 0.0 && alpha < 1.0) => Err(ScalingError::InvalidConfig(
                format!("exp_smooth alpha must be in (0,1), got {alpha}"),
            )),
            AmaxAlgo::MaxWindow { window } if window == 0 || window > capacity => Err(ScalingError::InvalidConfig(
                format!("max window {window} must be in 1..={capacity} (history capacity)"),
            )),
            _ => Ok(()),
        }
    }
}

/// Amax history for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleState {
    algo: AmaxAlgo,
    capacity: usize,
    history: VecDeque<f64>,
    smooth_carry: Option<f64>,
    steps_observed: u64,
}

impl ScaleState {
    pub fn new(algo: AmaxAlgo, capacity: usize) -> Result<Self, ScalingError> {
        if capacity == 0 {
            return Err(ScalingError::InvalidConfig("history capacity must be >= 1".into()));
        }
        algo.validate(capacity)?;
        Ok(Self {
            algo,
            capacity,
            history: VecDeque::with_capacity(capacity),
            smooth_carry: None,
            steps_observed: 0,
        })
    }

    pub fn algo(&self) -> AmaxAlgo {
        self.algo
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn history(&self) -> &VecDeque<f64> {
        &self.history
    }

    pub fn smooth_carry(&self) -> Option<f64> {
        self.smooth_carry
    }

    pub fn steps_observed(&self) -> u64 {
        self.steps_observed
    }

    /// Record this step's true amax.
    pub fn observe(&mut self, amax: f64) -> Result<(), ScalingError> {
        if !(amax.is_finite() && amax > 0.0) {
            return Err(ScalingError::InvalidObservation(amax));
        }
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(amax);
        if let AmaxAlgo::ExpSmooth { alpha } = self.algo {
            self.smooth_carry = Some(match self.smooth_carry {
                None => amax,
                Some(prev) => alpha * amax + (1.0 - alpha) * prev,
            });
        }
        self.steps_observed += 1;
        Ok(())
    }

    /// Estimate under the state's own algorithm.
    pub fn estimate(&self, current_amax: Option<f64>) -> Result<f64, ScalingError> {
        estimate_amax(self, self.algo, current_amax)
    }

    pub fn reset(&mut self) {
        self.history.clear();
        self.smooth_carry = None;
        self.steps_observed = 0;
    }
}

/// Amax estimate for `algo` from `state`'s history.
///
/// `ExpSmooth` reads the state's carry, which only exists when the state
/// itself runs `ExpSmooth`.
pub fn estimate_amax(state: &ScaleState, algo: AmaxAlgo, current_amax: Option<f64>) -> Result<f64, ScalingError> {
    match algo {
        AmaxAlgo::MostRecent => state.history.back().copied().ok_or(ScalingError::NoHistory),
        AmaxAlgo::ExpSmooth { .. } => state.smooth_carry.ok_or(ScalingError::NoHistory),
        AmaxAlgo::MaxWindow { window } => state
            .history
            .iter()
            .rev()
            .take(window)
            .copied()
            .reduce(f64::max)
            .ok_or(ScalingError::NoHistory),
        AmaxAlgo::Current => match current_amax {
            Some(a) if a.is_finite() && a > 0.0 => Ok(a),
            Some(a) => Err(ScalingError::InvalidObservation(a)),
            None => Err(ScalingError::MissingCurrentAmax),
        },
    }
}

/// `s = max_val / amax_hat`.
pub fn compute_scale(amax_hat: f64, max_val: f64) -> Result<f64, ScalingError> {
    if !(amax_hat.is_finite() && amax_hat > 0.0) {
        return Err(ScalingError::DivisionDomain(amax_hat));
    }
    if !(max_val.is_finite() && max_val > 0.0) {
        return Err(ScalingError::InvalidConfig(format!(
            "max_val must be finite and > 0, got {max_val}"
        )));
    }
    Ok(max_val / amax_hat)
}

/// Maps a tensor into and out of the scaled domain for one estimate.
///
/// Mathematically `apply(x) = x * max_val / amax_hat`. It is evaluated as
/// `(x / amax_hat) * max_val` so that `|x| <= amax_hat` always yields
/// `|apply(x)| <= max_val` under correctly rounded arithmetic; a precomputed
/// `x * s` can land one ulp past `max_val` when `|x| == amax_hat`.
/// Power-of-two scales take the exact `x * s` path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorScale {
    amax_hat: f64,
    max_val: f64,
    scale: f64,
    exact: bool,
}

impl TensorScale {
    pub fn new(amax_hat: f64, max_val: f64) -> Result<Self, ScalingError> {
        let scale = compute_scale(amax_hat, max_val)?;
        let exact = is_power_of_two(scale) && scale * amax_hat == max_val;
        Ok(Self {
            amax_hat,
            max_val,
            scale,
            exact,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn amax_hat(&self) -> f64 {
        self.amax_hat
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        if self.exact {
            x * self.scale
        } else {
            x / self.amax_hat * self.max_val
        }
    }

    #[inline]
    pub fn remove(&self, q: f64) -> f64 {
        if self.exact {
            q / self.scale
        } else {
            q / self.max_val * self.amax_hat
        }
    }
}

fn is_power_of_two(x: f64) -> bool {
    x.is_normal() && x.to_bits() & ((1u64 << 52) - 1) == 0
}

/// Which operand of a quantized linear a state belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Weight,
    Activation,
    Gradient,
}

impl TensorRole {
    pub const ALL: [TensorRole; 3] = [TensorRole::Weight, TensorRole::Activation, TensorRole::Gradient];

    pub fn as_str(self) -> &'static str {
        match self {
            TensorRole::Weight => "weight",
            TensorRole::Activation => "activation",
            TensorRole::Gradient => "gradient",
        }
    }
}

impl fmt::Display for TensorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TensorRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weight" => Ok(TensorRole::Weight),
            "activation" => Ok(TensorRole::Activation),
            "gradient" => Ok(TensorRole::Gradient),
            other => Err(format!("unknown tensor role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateKey {
    pub layer_id: String,
    pub role: TensorRole,
}

impl StateKey {
    pub fn new(layer_id: impl Into<String>, role: TensorRole) -> Self {
        Self {
            layer_id: layer_id.into(),
            role,
        }
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.layer_id, self.role)
    }
}

/// Owner of every [`ScaleState`] in a run.
///
/// Registration and [`reset_all`](Self::reset_all) take `&mut self`, so they
/// are serialized against any concurrent reader by construction.
#[derive(Debug, Clone, Default)]
pub struct ScaleRegistry {
    states: BTreeMap<StateKey, ScaleState>,
}

impl ScaleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, key: StateKey, state: ScaleState) -> Result<(), ScalingError> {
        if self.states.contains_key(&key) {
            return Err(ScalingError::DuplicateState(key));
        }
        self.states.insert(key, state);
        Ok(())
    }

    pub fn get(&self, key: &StateKey) -> Result<&ScaleState, ScalingError> {
        self.states
            .get(key)
            .ok_or_else(|| ScalingError::UnknownState(key.clone()))
    }

    pub fn get_mut(&mut self, key: &StateKey) -> Result<&mut ScaleState, ScalingError> {
        self.states
            .get_mut(key)
            .ok_or_else(|| ScalingError::UnknownState(key.clone()))
    }

    /// Discard every history, e.g. at the end of full-precision warmup.
    pub fn reset_all(&mut self) {
        self.states.values_mut().for_each(ScaleState::reset);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateKey, &ScaleState)> {
        self.states.iter()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}
