//! Serialized run artifacts. Everything here is a pure function of the run
//! record (no timestamps, no wall time), so repeated runs produce identical bytes.

use serde::Serialize;

use super::matrix::{MatrixRow, RunSummary};
use super::train::RunRecord;
use super::HarnessError;

#[derive(Serialize)]
struct LossRow {
    step: u64,
    loss: f64,
    saturation_events_this_step: u64,
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>, header: &[&str]) -> Result<String, HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.serialize(row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn io(e: csv::Error) -> HarnessError {
    HarnessError::Io(e.to_string())
}

/// `step,loss,saturation_events_this_step`.
pub fn run_csv(run: &RunRecord) -> Result<String, HarnessError> {
    let rows = run
        .losses
        .iter()
        .zip(&run.step_saturation_events)
        .enumerate()
        .map(|(i, (&loss, &events))| LossRow {
            step: i as u64 + 1,
            loss,
            saturation_events_this_step: events,
        });
    csv_string(rows, &["step", "loss", "saturation_events_this_step"])
}

pub fn summary_json(summary: &RunSummary) -> Result<String, HarnessError> {
    let mut s = serde_json::to_string_pretty(summary).map_err(|e| HarnessError::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn matrix_csv(rows: &[MatrixRow]) -> Result<String, HarnessError> {
    csv_string(
        rows,
        &[
            "name",
            "lr",
            "amax_algo",
            "history",
            "warmup",
            "scaling",
            "quantize",
            "status",
            "final_loss",
            "baseline_final_loss",
            "ape",
            "ape_final_window",
            "saturation_events",
            "saturated_elements",
        ],
    )
}

/// Saturation event log: `step,layer_id,role,saturated,total`.
pub fn saturation_csv(run: &RunRecord) -> Result<String, HarnessError> {
    let mut buf = Vec::new();
    run.saturation.write_csv(&mut buf).map_err(io)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Post-reset amax observations in the trace format `replay-trace` reads.
pub fn trace_csv(run: &RunRecord) -> Result<String, HarnessError> {
    let mut buf = Vec::new();
    crate::scaling::trace::write_trace(&mut buf, &run.amax_trace).map_err(|e| HarnessError::Io(e.to_string()))?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}
