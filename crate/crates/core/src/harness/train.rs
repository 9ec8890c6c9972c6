use std::time::{Duration, Instant};

use super::config::QuantConfig;
use super::model::{ToyArch, ToyModel, ToyTask};
use super::HarnessError;
use crate::codec::CodecParams;
use crate::layout::build_layout;
use crate::qat::nn::mse_loss;
use crate::qat::optim::Adam;
use crate::qat::{QuantContext, QuantMode, SaturationReport};
use crate::scaling::trace::AmaxTraceRow;
use crate::scaling::{AmaxAlgo, ScaleRegistry, ScaleState};

/// What a given step does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Quantization disabled for the whole run.
    FullPrecision,
    /// Full precision, amax observed into the histories.
    Warmup,
    Quantized,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: QuantConfig,
    /// One loss per step, index 0 is step 1.
    pub losses: Vec<f64>,
    /// Tensor quantizations with at least one clipped element, per step.
    pub step_saturation_events: Vec<u64>,
    pub saturation: SaturationReport,
    /// Every amax observation made after the warmup reset.
    pub amax_trace: Vec<AmaxTraceRow>,
    pub final_params: Vec<f64>,
    pub wall_time: Duration,
}

impl RunRecord {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("runs have at least one step")
    }

    pub fn total_saturation_events(&self) -> u64 {
        self.step_saturation_events.iter().sum()
    }
}

/// Step-by-step driver for one run.
///
/// With quantization on, steps `1..=warmup` run in full precision while
/// observing amax. Before step `warmup + 1` every state is reset and a
/// calibration pass (forward and backward on that step's batch, no update,
/// traced as step `warmup`) refills the histories, so the first quantized
/// step already has a post-reset observation behind it.
pub struct Trainer {
    config: QuantConfig,
    codec: CodecParams,
    model: ToyModel,
    task: ToyTask,
    optimizer: Adam,
    registry: ScaleRegistry,
    report: SaturationReport,
    trace: Vec<AmaxTraceRow>,
    losses: Vec<f64>,
    step_events: Vec<u64>,
    step: u64,
    started: Instant,
}

impl Trainer {
    pub fn new(config: &QuantConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let arch = ToyArch::default();
        let layout = build_layout(&arch.arch_spec()?, config.high_precision_layers)?;
        let mut model = ToyModel::new(&arch, Some(&layout), config.seed);
        model.set_quantize_gradients(config.quantize_gradients);
        let algo = config.amax_algo();
        let capacity = match algo {
            AmaxAlgo::MaxWindow { window } => window.max(config.history_len),
            _ => config.history_len,
        };
        let mut registry = ScaleRegistry::new();
        for layer in model.quant_layers() {
            for key in layer.state_keys() {
                registry.register(key.clone(), ScaleState::new(algo, capacity)?)?;
            }
        }
        Self::assemble(config, model, registry)
    }

    /// The same network, seeds and optimizer with no quantization machinery.
    pub fn plain(config: &QuantConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let model = ToyModel::new(&ToyArch::default(), None, config.seed);
        Self::assemble(
            &QuantConfig {
                quantize: false,
                ..config.clone()
            },
            model,
            ScaleRegistry::new(),
        )
    }

    fn assemble(config: &QuantConfig, model: ToyModel, registry: ScaleRegistry) -> Result<Self, HarnessError> {
        Ok(Self {
            codec: config.codec()?,
            task: ToyTask::new(&ToyArch::default(), config.data_seed),
            optimizer: Adam::new(config.learning_rate),
            config: config.clone(),
            model,
            registry,
            report: SaturationReport::new(),
            trace: Vec::new(),
            losses: Vec::new(),
            step_events: Vec::new(),
            step: 0,
            started: Instant::now(),
        })
    }

    pub fn phase(&self, step: u64) -> Phase {
        if !self.config.quantize {
            Phase::FullPrecision
        } else if step <= self.config.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Quantized
        }
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn registry(&self) -> &ScaleRegistry {
        &self.registry
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn trace(&self) -> &[AmaxTraceRow] {
        &self.trace
    }

    pub fn model_mut(&mut self) -> &mut ToyModel {
        &mut self.model
    }

    /// Runs the next step and returns its loss.
    pub fn step(&mut self) -> Result<f64, HarnessError> {
        let t = self.step + 1;
        if t > self.config.total_steps {
            return Err(HarnessError::Config(format!(
                "{}: run already finished",
                self.config.name
            )));
        }
        let (x, y) = self.task.batch(t, self.config.batch_size)?;
        let phase = self.phase(t);
        if phase == Phase::Quantized && self.config.warmup_steps > 0 && t == self.config.warmup_steps + 1 {
            self.registry.reset_all();
            self.trace.clear();
            self.model.set_mode(QuantMode::ObserveOnly);
            let mut ctx = QuantContext::new(&mut self.registry, &mut self.report, self.codec, t - 1);
            ctx.trace = Some(&mut self.trace);
            let pred = self.model.forward(&x, &mut ctx)?;
            let (_, grad) = mse_loss(&pred, &y)?;
            self.model.backward(&grad, &mut ctx)?;
        }
        self.model.set_mode(match phase {
            Phase::FullPrecision => QuantMode::Off,
            Phase::Warmup => QuantMode::ObserveOnly,
            Phase::Quantized => QuantMode::Quantize,
        });
        let before = self.report.events().len();
        let mut ctx = QuantContext::new(&mut self.registry, &mut self.report, self.codec, t);
        ctx.trace = Some(&mut self.trace);
        let pred = self.model.forward(&x, &mut ctx)?;
        let (loss, grad) = mse_loss(&pred, &y)?;
        self.model.backward(&grad, &mut ctx)?;
        let events = self.report.events()[before..]
            .iter()
            .filter(|e| e.saturated > 0)
            .count() as u64;
        self.optimizer.step(&mut self.model.params_mut());
        self.losses.push(loss);
        self.step_events.push(events);
        self.step = t;
        Ok(loss)
    }

    pub fn run(mut self) -> Result<RunRecord, HarnessError> {
        while self.step < self.config.total_steps {
            self.step()?;
        }
        Ok(self.finish())
    }

    fn finish(mut self) -> RunRecord {
        RunRecord {
            final_params: self.model.snapshot(),
            config: self.config,
            losses: self.losses,
            step_saturation_events: self.step_events,
            saturation: self.report,
            amax_trace: self.trace,
            wall_time: self.started.elapsed(),
        }
    }
}

/// Full schedule for `config`: warmup, reset, quantized phase.
pub fn two_phase_train(config: &QuantConfig) -> Result<RunRecord, HarnessError> {
    Trainer::new(config)?.run()
}

/// The reference trainer without any quantization layers.
pub fn plain_train(config: &QuantConfig) -> Result<RunRecord, HarnessError> {
    Trainer::plain(config)?.run()
}
