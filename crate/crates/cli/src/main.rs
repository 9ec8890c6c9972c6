use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hif8_lab::codec::CodecParams;
use hif8_lab_cli::{
    grid_dump, layout_dump, matrix_command, replay_command, run_command, seed_override, CliError, SEED_ENV,
};

#[derive(Parser)]
#[command(name = "hif8-lab", version, about = "HiF8 fake-quantization and scaling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config and its full-precision baseline.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every *.toml preset in a directory and write matrix.csv.
    Matrix {
        #[arg(long)]
        presets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay an amax trace CSV through scaling algorithms.
    ReplayTrace {
        #[arg(long)]
        trace: PathBuf,
        /// Comma-separated, e.g. `most_recent,exp_smooth:0.9,max:64,current`.
        #[arg(long, default_value = "most_recent,exp_smooth,max:64,current")]
        algos: String,
        /// Quantizer clip point.
        #[arg(long, default_value_t = 15.0)]
        max_val: f64,
    },
    /// List the representable grid.
    GridDump {
        #[arg(long, default_value_t = CodecParams::DEFAULT_MAX_VAL)]
        max_val: f64,
        #[arg(long, default_value_t = CodecParams::DEFAULT_MIN_NORMAL_EXPONENT, allow_hyphen_values = true)]
        min_normal_exponent: i32,
    },
    /// Describe which MLP linears are quantized.
    LayoutDump {
        #[arg(long, default_value_t = 26)]
        blocks: usize,
        #[arg(long, default_value_t = 5)]
        hp: usize,
    },
}

fn print_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| format!("{}\n", p.display())).collect()
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let seed = seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
    match cli.command {
        Command::Run { config, out } => Ok(print_paths(&run_command(&config, &out, seed)?)),
        Command::Matrix { presets, out } => Ok(print_paths(&matrix_command(&presets, &out, seed)?)),
        Command::ReplayTrace { trace, algos, max_val } => {
            CodecParams::with_max_val(max_val).map_err(|e| CliError::Usage(e.to_string()))?;
            replay_command(&trace, &algos, max_val)
        }
        Command::GridDump {
            max_val,
            min_normal_exponent,
        } => {
            let params = CodecParams::new(max_val, min_normal_exponent).map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(grid_dump(&params))
        }
        Command::LayoutDump { blocks, hp } => layout_dump(blocks, hp),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(text) => {
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hif8-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
