//! `reuse-attn`: memory-traffic tables, sweeps, verification, toy forward
//! passes and roofline bounds.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use report::Format;

#[derive(Debug, Parser)]
#[command(name = "reuse-attn", version, about = "Reuse Attention memory-traffic toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MechanismArg {
    Mha,
    Reuse,
}

impl MechanismArg {
    pub fn mechanism(self) -> reuse_attn::attention::Mechanism {
        match self {
            MechanismArg::Mha => reuse_attn::attention::Mechanism::MultiHead,
            MechanismArg::Reuse => reuse_attn::attention::Mechanism::Reuse,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Whole-model attention traffic of the catalog presets.
    Table2 {
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
        /// Only this preset (case-insensitive); repeatable.
        #[arg(long)]
        only: Vec<String>,
        /// Extra presets, one per line.
        #[arg(long)]
        presets: Option<PathBuf>,
    },
    /// Per-layer traffic, FLOPs and intensity across token counts.
    Sweep {
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["mha", "reuse"])]
        mechanisms: Vec<MechanismArg>,
        /// Explicit token counts; overrides --from/--to/--factor.
        #[arg(long, value_delimiter = ',')]
        tokens: Vec<u64>,
        #[arg(long, default_value_t = 64)]
        from: u64,
        #[arg(long, default_value_t = 4096)]
        to: u64,
        #[arg(long, default_value_t = 2)]
        factor: u64,
        #[arg(short = 'd', long = "head-dim", default_value_t = 64)]
        head_dim: u64,
        #[arg(long, default_value_t = 16)]
        heads: u64,
        #[arg(long, default_value_t = 2)]
        bytes: u64,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
    /// Run the property suites.
    Verify {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Forward pass of a randomly initialised UniForm model.
    Forward {
        #[arg(long, default_value = "tiny")]
        variant: String,
        #[arg(long = "res", default_value_t = 224)]
        resolution: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
        /// Report per-stage attention traffic next to the analytic value.
        #[arg(long)]
        traffic: bool,
        /// Save the weights to this file.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Memory-bound execution time lower bounds.
    Roofline {
        #[arg(long, default_value = "Llama2-7B")]
        preset: String,
        /// Device names; all catalog devices when omitted.
        #[arg(long = "device", value_delimiter = ',')]
        devices: Vec<String>,
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["mha", "reuse"])]
        mechanisms: Vec<MechanismArg>,
        #[arg(long)]
        presets: Option<PathBuf>,
        /// Extra devices, one per line.
        #[arg(long = "devices")]
        devices_file: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Table2 { format, only, presets } => commands::table2(format, &only, presets.as_deref()),
        Command::Sweep {
            mechanisms,
            tokens,
            from,
            to,
            factor,
            head_dim,
            heads,
            bytes,
            format,
        } => commands::SweepArgs {
            mechanisms,
            tokens,
            from,
            to,
            factor,
            head_dim,
            heads,
            bytes,
        }
        .run(format),
        Command::Verify { seed, trials } => commands::verify(seed, trials),
        Command::Forward {
            variant,
            resolution,
            batch,
            seed,
            classes,
            traffic,
            save,
        } => commands::ForwardArgs {
            variant,
            resolution,
            batch,
            seed,
            classes,
            traffic,
            save,
        }
        .run(),
        Command::Roofline {
            preset,
            devices,
            mechanisms,
            presets,
            devices_file,
            format,
        } => commands::roofline(
            &preset,
            &devices,
            &mechanisms,
            presets.as_deref(),
            devices_file.as_deref(),
            format,
        ),
    };
    match result {
        Ok(out) => {
            print!("{}", out.stdout);
            ExitCode::from(out.code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
