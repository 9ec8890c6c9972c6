use serde::{Deserialize, Serialize};

use super::model::ToyArch;
use super::HarnessError;
use crate::codec::{CodecParams, MAX_TIER_BOUND};
use crate::scaling::AmaxAlgo;

/// Amax algorithm family as named in experiment configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgoName {
    MostRecent,
    ExpSmooth,
    Max,
}

impl AlgoName {
    pub fn as_str(self) -> &'static str {
        match self {
            AlgoName::MostRecent => "most_recent",
            AlgoName::ExpSmooth => "exp_smooth",
            AlgoName::Max => "max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    /// Delayed: scale from earlier steps' amax.
    Dts,
    /// Current: scale from this step's amax.
    Cts,
}

impl ScalingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScalingMode::Dts => "dts",
            ScalingMode::Cts => "cts",
        }
    }
}

/// One experiment. Loaded from a flat TOML document whose keys are the
/// field names; omitted keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub name: String,
    /// `false` runs the whole schedule in full precision (a baseline).
    pub quantize: bool,
    pub max_val: f64,
    pub amax_algo: AlgoName,
    pub dts_or_cts: ScalingMode,
    /// History capacity; also the window of the `max` algorithm.
    pub history_len: usize,
    pub exp_smooth_alpha: f64,
    pub warmup_steps: u64,
    pub high_precision_layers: usize,
    pub learning_rate: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub data_seed: u64,
    pub quantize_gradients: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            name: "max_quant".into(),
            quantize: true,
            max_val: CodecParams::DEFAULT_MAX_VAL,
            amax_algo: AlgoName::Max,
            dts_or_cts: ScalingMode::Dts,
            history_len: 64,
            exp_smooth_alpha: AmaxAlgo::DEFAULT_ALPHA,
            warmup_steps: 100,
            high_precision_layers: 2,
            learning_rate: 1e-4,
            total_steps: 2000,
            batch_size: 32,
            seed: 7,
            data_seed: 11,
            quantize_gradients: true,
        }
    }
}

impl QuantConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg = Self::parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without checking the invariants.
    pub fn parse_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// The algorithm each scale state runs.
    pub fn amax_algo(&self) -> AmaxAlgo {
        match (self.dts_or_cts, self.amax_algo) {
            (ScalingMode::Cts, _) => AmaxAlgo::Current,
            (ScalingMode::Dts, AlgoName::MostRecent) => AmaxAlgo::MostRecent,
            (ScalingMode::Dts, AlgoName::ExpSmooth) => AmaxAlgo::ExpSmooth {
                alpha: self.exp_smooth_alpha,
            },
            (ScalingMode::Dts, AlgoName::Max) => AmaxAlgo::MaxWindow {
                window: self.history_len,
            },
        }
    }

    pub fn codec(&self) -> Result<CodecParams, HarnessError> {
        CodecParams::with_max_val(self.max_val).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Full-precision run with the same seeds, learning rate and schedule.
    pub fn baseline(&self) -> Self {
        Self {
            name: format!("baseline_lr{}", self.learning_rate),
            quantize: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Config(format!("{}: {msg}", self.name)));
        if self.total_steps == 0 {
            return fail("total_steps must be >= 1".into());
        }
        if self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup_steps {} must be < total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.quantize && self.dts_or_cts == ScalingMode::Dts && self.warmup_steps == 0 {
            return fail("delayed scaling needs warmup_steps >= 1 to populate the amax history".into());
        }
        if !(self.max_val > 0.0 && self.max_val <= MAX_TIER_BOUND) {
            return fail(format!("max_val must be in (0, {MAX_TIER_BOUND}]"));
        }
        if self.history_len == 0 {
            return fail("history_len must be >= 1".into());
        }
        if !(self.exp_smooth_alpha > 0.0 && self.exp_smooth_alpha < 1.0) {
            return fail("exp_smooth_alpha must be in (0, 1)".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be > 0".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.high_precision_layers > ToyArch::default().n_blocks {
            return fail(format!(
                "high_precision_layers {} exceeds the toy model's {} blocks",
                self.high_precision_layers,
                ToyArch::default().n_blocks
            ));
        }
        Ok(())
    }
}
