//! `mxsim`: drive the simulator and performance model from the shell.
//!
//! Exit codes: 0 on success, 1 when a run fails or a reproduced table cell
//! lands outside tolerance, 2 on usage errors (clap's convention).

mod commands;
mod manifest;

use anyhow::Result;
use clap::{Parser, Subcommand};
use commands::{
    cmd_calibrate, cmd_gen_model, cmd_quantize, cmd_run, cmd_sweep, cmd_tables, CalibrateArgs,
    GenModelArgs, QuantizeArgs, RunArgs, SweepCmd, TablesArgs,
};

#[derive(Parser)]
#[command(
    name = "mxsim",
    version,
    about = "Bit-accurate simulator and analytical performance model of a \
             weight-stationary hybrid transformer accelerator"
)]
struct Cli {
    /// Worker threads for sweeps (falls back to the MXSIM_THREADS env var,
    /// then to one thread per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Block-quantize a real-valued matrix and report scale statistics.
    Quantize(QuantizeArgs),
    /// Generate a seeded random model bundle.
    GenModel(GenModelArgs),
    /// Measure per-layer exponent targets on sample tokens.
    Calibrate(CalibrateArgs),
    /// Run forward passes and report accuracy metrics.
    Run(RunArgs),
    /// Parameter sweeps emitting CSV.
    #[command(subcommand)]
    Sweep(SweepCmd),
    /// Reproduce the design-point tables and gate on tolerance.
    Tables(TablesArgs),
}

fn main() {
    let cli = Cli::parse();
    init_threads(cli.threads);
    if let Err(err) = dispatch(&cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Quantize(args) => cmd_quantize(args),
        Command::GenModel(args) => cmd_gen_model(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(cmd) => cmd_sweep(cmd),
        Command::Tables(args) => cmd_tables(args),
    }
}

/// Sizes the global worker pool: flag beats environment beats default.
fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("MXSIM_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = n.filter(|&n| n > 0) {
        // Ignore the error from double initialization; only tests hit it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
