use std::ops::Range;

use super::HarnessError;

/// Mean of `|q_t - b_t| / |b_t| · 100` over `window` (0-based step indices,
/// the whole series when `None`).
pub fn ape(quant: &[f64], baseline: &[f64], window: Option<Range<usize>>) -> Result<f64, HarnessError> {
    if quant.len() != baseline.len() {
        return Err(HarnessError::Metric(format!(
            "series lengths differ: {} vs {}",
            quant.len(),
            baseline.len()
        )));
    }
    let window = window.unwrap_or(0..quant.len());
    if window.is_empty() || window.end > quant.len() {
        return Err(HarnessError::Metric(format!(
            "window {window:?} invalid for {} steps",
            quant.len()
        )));
    }
    let mut sum = 0.0;
    for i in window.clone() {
        let b = baseline[i];
        if b == 0.0 {
            return Err(HarnessError::Metric(format!("baseline loss is zero at step {}", i + 1)));
        }
        sum += (quant[i] - b).abs() / b.abs();
    }
    Ok(100.0 * sum / window.len() as f64)
}

/// Last tenth of a run (at least one step) as a 0-based range.
pub fn final_window(total_steps: usize) -> Range<usize> {
    let len = (total_steps / 10).max(1).min(total_steps);
    total_steps - len..total_steps
}
