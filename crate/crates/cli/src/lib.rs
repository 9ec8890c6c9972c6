//! Command implementations behind the `hif8-lab` binary.
//!
//! Every command is a function of its inputs; file outputs go through
//! [`write_atomic`] so an interrupted run never leaves a partial file.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use hif8_lab::codec::{annotated_grid, CodecParams};
use hif8_lab::harness::output::{matrix_csv, run_csv, saturation_csv, summary_json, trace_csv};
use hif8_lab::harness::{run_matrix, run_with_baseline, HarnessError, QuantConfig, RunPair};
use hif8_lab::layout::{build_layout, ArchSpec, LayoutDump};
use hif8_lab::scaling::trace::{read_trace, split_series, AmaxTraceRow, TraceError};
use hif8_lab::scaling::{AmaxAlgo, ScaleState, StateKey, TensorScale};
use thiserror::Error;

/// Overrides both `seed` and `data_seed` of every config when set.
pub const SEED_ENV: &str = "HIF8_LAB_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error("runtime: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Parse(_) => 4,
            CliError::Runtime(_) => 5,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => CliError::Config(e.to_string()),
            HarnessError::Parse(_) => CliError::Parse(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Parse { .. } => CliError::Parse(e.to_string()),
            TraceError::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Parses the seed override value, if any.
pub fn seed_override(value: Option<&str>) -> Result<Option<u64>, CliError> {
    value
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))
        })
        .transpose()
}

fn apply_seed(mut cfg: QuantConfig, seed: Option<u64>) -> QuantConfig {
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.data_seed = s;
    }
    cfg
}

pub fn load_config(path: &Path) -> Result<QuantConfig, CliError> {
    let cfg = parse_config(path)?;
    cfg.validate()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn parse_config(path: &Path) -> Result<QuantConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    QuantConfig::parse_toml(&text).map_err(|e| match CliError::from(e) {
        CliError::Parse(m) => CliError::Parse(format!("{}: {m}", path.display())),
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Every `*.toml` in `dir`, in file-name order. Files must parse; invalid
/// settings are left for the matrix to report as failed rows.
pub fn load_presets(dir: &Path) -> Result<Vec<QuantConfig>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths.iter().map(|p| parse_config(p)).collect()
}

/// Writes `contents` to a temp file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(contents.as_bytes()).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

fn write_pair(out: &Path, pair: &RunPair) -> Result<Vec<PathBuf>, CliError> {
    let name = &pair.summary.name;
    let files = [
        (format!("{name}.losses.csv"), run_csv(&pair.run)?),
        (format!("{name}.baseline.losses.csv"), run_csv(&pair.baseline)?),
        (format!("{name}.saturation.csv"), saturation_csv(&pair.run)?),
        (format!("{name}.amax_trace.csv"), trace_csv(&pair.run)?),
        (format!("{name}.summary.json"), summary_json(&pair.summary)?),
    ];
    files
        .into_iter()
        .map(|(file, body)| {
            let path = out.join(file);
            write_atomic(&path, &body)?;
            Ok(path)
        })
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Runs one config and its matched baseline; returns the files written.
pub fn run_command(config: &Path, out: &Path, seed: Option<u64>) -> Result<Vec<PathBuf>, CliError> {
    let cfg = apply_seed(load_config(config)?, seed);
    let pair = run_with_baseline(&cfg)?;
    ensure_dir(out)?;
    write_pair(out, &pair)
}

/// Runs every preset in `presets`, writing `matrix.csv` plus per-run files
/// for the rows that completed.
pub fn matrix_command(presets: &Path, out: &Path, seed: Option<u64>) -> Result<Vec<PathBuf>, CliError> {
    let configs: Vec<QuantConfig> = load_presets(presets)?
        .into_iter()
        .map(|c| apply_seed(c, seed))
        .collect();
    let outcome = run_matrix(&configs);
    ensure_dir(out)?;
    let mut written = Vec::new();
    for pair in outcome.runs.iter().flatten() {
        written.extend(write_pair(out, pair)?);
    }
    let path = out.join("matrix.csv");
    write_atomic(&path, &matrix_csv(&outcome.rows)?)?;
    written.push(path);
    Ok(written)
}

/// Outcome of replaying one series (or all of them, `key == None`) under one algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRow {
    pub algo: AmaxAlgo,
    pub key: Option<StateKey>,
    /// Steps at which an estimate was available and compared.
    pub steps: usize,
    pub saturations: usize,
    /// Mean of estimate / true amax over the compared steps.
    pub mean_conservatism: f64,
}

/// Replays each (layer, role) series through each algorithm: at every step
/// the estimate is formed before the step's amax is observed, and the step
/// saturates when the true amax, scaled by `max_val / estimate`, lands
/// beyond `max_val`. Delayed algorithms skip the
/// first step of a series (no history yet).
pub fn replay_trace(rows: &[AmaxTraceRow], algos: &[AmaxAlgo], max_val: f64) -> Result<Vec<ReplayRow>, CliError> {
    let series = split_series(rows);
    if let Some((key, s)) = series.iter().find(|(_, s)| s.len() < 2) {
        return Err(CliError::Parse(format!(
            "series {key} has {} rows; at least 2 are needed",
            s.len()
        )));
    }
    let mut out = Vec::new();
    for &algo in algos {
        let capacity = match algo {
            AmaxAlgo::MaxWindow { window } => window,
            _ => 1,
        };
        let (mut steps, mut sats, mut ratio_sum) = (0, 0, 0.0);
        for (key, s) in &series {
            let mut state = ScaleState::new(algo, capacity).map_err(|e| CliError::Usage(e.to_string()))?;
            let (mut n, mut k, mut r) = (0, 0, 0.0);
            for &(_, amax) in s {
                if !(algo.is_delayed() && state.history().is_empty()) {
                    let estimate = state
                        .estimate(Some(amax))
                        .map_err(|e| CliError::Runtime(e.to_string()))?;
                    n += 1;
                    let scale = TensorScale::new(estimate, max_val).map_err(|e| CliError::Usage(e.to_string()))?;
                    k += usize::from(scale.apply(amax) > max_val);
                    r += estimate / amax;
                }
                state
                    .observe(amax)
                    .map_err(|e| CliError::Parse(format!("series {key}: {e}")))?;
            }
            out.push(ReplayRow {
                algo,
                key: Some(key.clone()),
                steps: n,
                saturations: k,
                mean_conservatism: r / n as f64,
            });
            steps += n;
            sats += k;
            ratio_sum += r;
        }
        out.push(ReplayRow {
            algo,
            key: None,
            steps,
            saturations: sats,
            mean_conservatism: ratio_sum / steps as f64,
        });
    }
    Ok(out)
}

/// `algo,layer_id,role,steps,saturations,mean_conservatism`; the aggregate
/// row per algorithm has `*` in both key columns.
pub fn replay_csv(rows: &[ReplayRow]) -> String {
    let mut s = String::from("algo,layer_id,role,steps,saturations,mean_conservatism\n");
    for r in rows {
        let (layer, role) = match &r.key {
            Some(k) => (k.layer_id.as_str(), k.role.as_str()),
            None => ("*", "*"),
        };
        writeln!(
            s,
            "{},{layer},{role},{},{},{}",
            r.algo, r.steps, r.saturations, r.mean_conservatism
        )
        .unwrap();
    }
    s
}

pub fn replay_command(trace: &Path, algos: &str, max_val: f64) -> Result<String, CliError> {
    let algos: Vec<AmaxAlgo> = algos
        .split(',')
        .map(|a| {
            a.parse()
                .map_err(|e: hif8_lab::scaling::ScalingError| CliError::Usage(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    if algos.is_empty() {
        return Err(CliError::Usage("--algos needs at least one algorithm".into()));
    }
    let file = fs::File::open(trace).map_err(|e| CliError::Config(format!("{}: {e}", trace.display())))?;
    let rows = read_trace(file)?;
    Ok(replay_csv(&replay_trace(&rows, &algos, max_val)?))
}

/// Signed grid, ascending, one point per line after a `#` header.
pub fn grid_dump(params: &CodecParams) -> String {
    let grid = annotated_grid(params);
    let count = 2 * grid.len() - 1;
    let mut s = format!(
        "# hif8 grid max_val={} min_normal_exponent={} count={count}\nvalue,kind,mantissa_bits,step\n",
        params.max_val(),
        params.min_normal_exponent()
    );
    let opt = |v: Option<String>| v.unwrap_or_default();
    let negatives = grid.iter().skip(1).rev().map(|p| (-p.value, p));
    let points = negatives.chain(grid.iter().map(|p| (p.value, p)));
    for (value, p) in points {
        let bits = opt(p.mantissa_bits.map(|b| b.to_string()));
        let step = opt(p.step.map(|v| v.to_string()));
        writeln!(s, "{value},{},{bits},{step}", p.kind.as_str()).unwrap();
    }
    s
}

/// JSON description of the layout for a reference-width model with `blocks` blocks.
pub fn layout_dump(blocks: usize, hp: usize) -> Result<String, CliError> {
    let arch = ArchSpec::reference_with_blocks(blocks).map_err(|e| CliError::Usage(e.to_string()))?;
    let layout = build_layout(&arch, hp).map_err(|e| CliError::Usage(e.to_string()))?;
    let dump = LayoutDump::new(&layout, &arch).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&dump).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.push('\n');
    Ok(s)
}
