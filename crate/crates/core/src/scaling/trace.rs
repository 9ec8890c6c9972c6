//! Amax trace CSV (`step,layer_id,role,amax`).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{StateKey, TensorRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmaxTraceRow {
    pub step: u64,
    pub layer_id: String,
    pub role: TensorRole,
    pub amax: f64,
}

#[derive(Debug, Error)]
pub enum TraceError {
    /// `row` is 1-based and counts the header as row 1.
    #[error("trace row {row}: {message}")]
    Parse { row: u64, message: String },
    #[error("trace I/O: {0}")]
    Io(String),
}

pub fn read_trace<R: Read>(reader: R) -> Result<Vec<AmaxTraceRow>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| TraceError::Parse {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["step", "layer_id", "role", "amax"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(TraceError::Parse {
            row: 1,
            message: format!(
                "expected header `{}`, got `{}`",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<AmaxTraceRow>().enumerate() {
        let row = i as u64 + 2;
        let rec = rec.map_err(|e| TraceError::Parse {
            row,
            message: e.to_string(),
        })?;
        if !(rec.amax.is_finite() && rec.amax > 0.0) {
            return Err(TraceError::Parse {
                row,
                message: format!("amax must be finite and > 0, got {}", rec.amax),
            });
        }
        rows.push(rec);
    }
    Ok(rows)
}

pub fn write_trace<W: Write>(writer: W, rows: &[AmaxTraceRow]) -> Result<(), TraceError> {
    let mut wtr = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        wtr.write_record(["step", "layer_id", "role", "amax"])
            .map_err(|e| TraceError::Io(e.to_string()))?;
    }
    for r in rows {
        wtr.serialize(r).map_err(|e| TraceError::Io(e.to_string()))?;
    }
    wtr.flush().map_err(|e| TraceError::Io(e.to_string()))
}

/// Groups rows into per-tensor series ordered by step (stable for equal steps).
pub fn split_series(rows: &[AmaxTraceRow]) -> BTreeMap<StateKey, Vec<(u64, f64)>> {
    let mut out: BTreeMap<StateKey, Vec<(u64, f64)>> = BTreeMap::new();
    for r in rows {
        out.entry(StateKey::new(r.layer_id.clone(), r.role))
            .or_default()
            .push((r.step, r.amax));
    }
    for series in out.values_mut() {
        series.sort_by_key(|(step, _)| *step);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rows = vec![
            AmaxTraceRow {
                step: 1,
                layer_id: "block1.up_proj".into(),
                role: TensorRole::Activation,
                amax: 3.25,
            },
            AmaxTraceRow {
                step: 2,
                layer_id: "block1.up_proj".into(),
                role: TensorRole::Gradient,
                amax: 1e-5,
            },
        ];
        let mut buf = Vec::new();
        write_trace(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,layer_id,role,amax\n"));
        assert_eq!(read_trace(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn parse_errors_carry_row_numbers() {
        let bad = "step,layer_id,role,amax\n1,a,weight,2.0\n2,a,bias,2.0\n";
        match read_trace(bad.as_bytes()) {
            Err(TraceError::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
        let neg = "step,layer_id,role,amax\n1,a,weight,-2.0\n";
        assert!(matches!(
            read_trace(neg.as_bytes()),
            Err(TraceError::Parse { row: 2, .. })
        ));
        let header = "step,layer,role,amax\n";
        assert!(matches!(
            read_trace(header.as_bytes()),
            Err(TraceError::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn series_split_sorted() {
        let rows = vec![
            AmaxTraceRow {
                step: 2,
                layer_id: "a".into(),
                role: TensorRole::Weight,
                amax: 2.0,
            },
            AmaxTraceRow {
                step: 1,
                layer_id: "a".into(),
                role: TensorRole::Weight,
                amax: 1.0,
            },
            AmaxTraceRow {
                step: 1,
                layer_id: "b".into(),
                role: TensorRole::Weight,
                amax: 5.0,
            },
        ];
        let s = split_series(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[&StateKey::new("a", TensorRole::Weight)], vec![(1, 1.0), (2, 2.0)]);
    }
}
