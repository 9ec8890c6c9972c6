use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{AlgoName, QuantConfig, ScalingMode};
use super::metrics::{ape, final_window};
use super::train::{two_phase_train, RunRecord};
use super::HarnessError;

/// The experiment matrix at toy scale: 2,000 steps, 8 blocks, 2 of them
/// high precision.
pub fn reference_matrix() -> Vec<QuantConfig> {
    let base = QuantConfig::default();
    let preset = |name: &str, algo, mode, history_len, warmup_steps, learning_rate| QuantConfig {
        name: name.into(),
        amax_algo: algo,
        dts_or_cts: mode,
        history_len,
        warmup_steps,
        learning_rate,
        ..base.clone()
    };
    use AlgoName::*;
    use ScalingMode::*;
    vec![
        preset("dts_mr", MostRecent, Dts, 30, 1, 1e-4),
        preset("dts_exp", ExpSmooth, Dts, 30, 1, 1e-4),
        preset("cts", MostRecent, Cts, 30, 0, 1e-4),
        preset("dts_exp_2", ExpSmooth, Dts, 128, 1, 1e-4),
        preset("max_quant", Max, Dts, 64, 100, 1e-4),
        preset("max_quant_lr1e5", Max, Dts, 64, 100, 1e-5),
    ]
}

/// Extra preset: the small-batch variant of `dts_mr`.
pub fn small_batch_preset() -> QuantConfig {
    QuantConfig {
        name: "dts_mr_small_batch".into(),
        batch_size: 8,
        ..reference_matrix()[0].clone()
    }
}

/// Derived metrics for one quantized run against its baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub config: QuantConfig,
    pub final_loss: f64,
    pub baseline_final_loss: f64,
    pub ape_overall: f64,
    pub ape_final_window: f64,
    /// 1-based inclusive step range of the final window.
    pub final_window_steps: (u64, u64),
    pub total_saturation_events: u64,
    pub total_saturated_elements: u64,
}

impl RunSummary {
    pub fn new(run: &RunRecord, baseline: &RunRecord) -> Result<Self, HarnessError> {
        let window = final_window(run.losses.len());
        Ok(Self {
            name: run.config.name.clone(),
            config: run.config.clone(),
            final_loss: run.final_loss(),
            baseline_final_loss: baseline.final_loss(),
            ape_overall: ape(&run.losses, &baseline.losses, None)?,
            ape_final_window: ape(&run.losses, &baseline.losses, Some(window.clone()))?,
            final_window_steps: (window.start as u64 + 1, window.end as u64),
            total_saturation_events: run.total_saturation_events(),
            total_saturated_elements: run.saturation.total_saturated(),
        })
    }
}

/// A config, its run and its matched baseline.
pub struct RunPair {
    pub run: RunRecord,
    pub baseline: RunRecord,
    pub summary: RunSummary,
}

/// Runs `config` and its matched-lr baseline side by side.
pub fn run_with_baseline(config: &QuantConfig) -> Result<RunPair, HarnessError> {
    config.validate()?;
    let (run, baseline) = rayon::join(|| two_phase_train(config), || two_phase_train(&config.baseline()));
    let (run, baseline) = (run?, baseline?);
    let summary = RunSummary::new(&run, &baseline)?;
    Ok(RunPair { run, baseline, summary })
}

/// One row of the matrix table. Empty metric cells mean the row failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixRow {
    pub name: String,
    pub lr: f64,
    pub amax_algo: &'static str,
    pub history: usize,
    pub warmup: u64,
    pub scaling: &'static str,
    pub quantize: bool,
    pub status: String,
    pub final_loss: Option<f64>,
    pub baseline_final_loss: Option<f64>,
    pub ape: Option<f64>,
    pub ape_final_window: Option<f64>,
    pub saturation_events: Option<u64>,
    pub saturated_elements: Option<u64>,
}

impl MatrixRow {
    fn new(config: &QuantConfig, outcome: &Result<RunPair, HarnessError>) -> Self {
        let s = outcome.as_ref().ok().map(|p| &p.summary);
        Self {
            name: config.name.clone(),
            lr: config.learning_rate,
            amax_algo: match config.dts_or_cts {
                ScalingMode::Cts => "current",
                ScalingMode::Dts => config.amax_algo.as_str(),
            },
            history: config.history_len,
            warmup: config.warmup_steps,
            scaling: config.dts_or_cts.as_str(),
            quantize: config.quantize,
            status: match outcome {
                Ok(_) => "ok".into(),
                Err(e) => format!("failed: {e}"),
            },
            final_loss: s.map(|s| s.final_loss),
            baseline_final_loss: s.map(|s| s.baseline_final_loss),
            ape: s.map(|s| s.ape_overall),
            ape_final_window: s.map(|s| s.ape_final_window),
            saturation_events: s.map(|s| s.total_saturation_events),
            saturated_elements: s.map(|s| s.total_saturated_elements),
        }
    }
}

pub struct MatrixOutcome {
    pub rows: Vec<MatrixRow>,
    /// Per preset, in input order.
    pub runs: Vec<Result<RunPair, HarnessError>>,
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct BaselineKey {
    lr: u64,
    max_val: u64,
    total_steps: u64,
    batch_size: usize,
    seed: u64,
    data_seed: u64,
}

impl BaselineKey {
    fn of(c: &QuantConfig) -> Self {
        Self {
            lr: c.learning_rate.to_bits(),
            max_val: c.max_val.to_bits(),
            total_steps: c.total_steps,
            batch_size: c.batch_size,
            seed: c.seed,
            data_seed: c.data_seed,
        }
    }
}

/// Runs every preset (in parallel) plus one shared baseline per distinct
/// learning rate and seed combination. A failing preset only fails its row.
pub fn run_matrix(presets: &[QuantConfig]) -> MatrixOutcome {
    let mut by_key: BTreeMap<BaselineKey, QuantConfig> = BTreeMap::new();
    for p in presets.iter().filter(|p| p.validate().is_ok()) {
        by_key.entry(BaselineKey::of(p)).or_insert_with(|| p.baseline());
    }
    let jobs: Vec<(BaselineKey, QuantConfig)> = by_key.into_iter().collect();
    let baselines: BTreeMap<BaselineKey, Result<RunRecord, HarnessError>> =
        jobs.into_par_iter().map(|(k, c)| (k, two_phase_train(&c))).collect();

    let runs: Vec<Result<RunPair, HarnessError>> = presets
        .par_iter()
        .map(|p| {
            p.validate()?;
            let baseline = match &baselines[&BaselineKey::of(p)] {
                Ok(b) => b.clone(),
                Err(e) => return Err(HarnessError::Baseline(e.to_string())),
            };
            let run = if p.quantize {
                two_phase_train(p)?
            } else {
                RunRecord {
                    config: p.clone(),
                    ..baseline.clone()
                }
            };
            let summary = RunSummary::new(&run, &baseline)?;
            Ok(RunPair { run, baseline, summary })
        })
        .collect();
    let rows = presets.iter().zip(&runs).map(|(p, r)| MatrixRow::new(p, r)).collect();
    MatrixOutcome { rows, runs }
}
