//! Saturation accounting.
//!
//! Every quantization of a tensor appends one event, clipped or not, so the
//! per-tensor totals are always the sum of the log.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::scaling::{StateKey, TensorRole};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SaturationTotals {
    pub saturated: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SaturationEvent {
    pub step: u64,
    pub layer_id: String,
    pub role: TensorRole,
    pub saturated: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SaturationReport {
    cumulative: BTreeMap<StateKey, SaturationTotals>,
    events: Vec<SaturationEvent>,
}

impl SaturationReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, step: u64, key: &StateKey, saturated: u64, total: u64) {
        let t = self.cumulative.entry(key.clone()).or_default();
        t.saturated += saturated;
        t.total += total;
        self.events.push(SaturationEvent {
            step,
            layer_id: key.layer_id.clone(),
            role: key.role,
            saturated,
            total,
        });
    }

    pub fn cumulative(&self) -> &BTreeMap<StateKey, SaturationTotals> {
        &self.cumulative
    }

    pub fn events(&self) -> &[SaturationEvent] {
        &self.events
    }

    /// Quantizations that clipped at least one element.
    pub fn saturation_events(&self) -> impl Iterator<Item = &SaturationEvent> {
        self.events.iter().filter(|e| e.saturated > 0)
    }

    pub fn total_saturated(&self) -> u64 {
        self.cumulative.values().map(|t| t.saturated).sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["step", "layer_id", "role", "saturated", "total"])?;
        for e in &self.events {
            wtr.write_record([
                e.step.to_string(),
                e.layer_id.clone(),
                e.role.to_string(),
                e.saturated.to_string(),
                e.total.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
