//! Batch front end for the `omnixfer` library.
//!
//! Exit codes: 0 success, 1 a checked invariant failed (including a
//! benchmark whose two topologies disagree), 2 configuration or input error.

pub mod commands;
pub mod config;
pub mod error;
pub mod fixtures;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use omnixfer::invariants::Fault;
use omnixfer::latents::TaskKind;
use omnixfer::numerics::set_parallel;
use omnixfer::DType;

pub use config::{parse_config, ConfigError, FlagOverrides, RunConfig};
pub use error::{CliError, EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "omnixfer", version, about = "Reference-decoupled video transfer: demo runs, invariant checks and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    SwapKvOrder,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Task kind, or a comma-separated list for `compose`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub task: Option<Vec<TaskKind>>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long, global = true, value_enum)]
    pub ref_cross_attention: Option<Switch>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One task end to end: reference pass, sampling, output latent and manifest.
    Demo,
    /// Run the invariant suite and write a pass/fail report.
    Verify {
        /// Inject a deliberate defect; the matching check must fail.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
    },
    /// Time joint against decoupled sampling over a step sweep.
    Bench,
    /// Several tasks over one concatenated reference cache.
    Compose,
    /// Write seeded synthetic clips and a config that uses them.
    GenFixtures,
}

impl CommonArgs {
    pub fn overrides(&self) -> FlagOverrides {
        FlagOverrides {
            seed: self.seed,
            steps: self.steps,
            tasks: self.task.clone(),
            out: self.out.clone(),
            precision: self.precision.map(|p| match p {
                Precision::F32 => DType::F32,
                Precision::F64 => DType::F64,
            }),
            ref_cross_attention: self.ref_cross_attention.map(|s| s == Switch::On),
        }
    }
}

/// Reads `OMNIXFER_THREADS`. Unset or 1 keeps every kernel single-threaded;
/// a larger value sizes the global pool and enables parallel matmul.
pub fn configure_threads(value: Option<&str>) -> Result<usize, ConfigError> {
    let threads = match value {
        None => 1,
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => return Err(ConfigError(vec![format!("OMNIXFER_THREADS must be a positive integer, got {v:?}")])),
        },
    };
    // A second call in the same process finds the pool already built; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    set_parallel(threads > 1);
    Ok(threads)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = parse_config(cli.common.config.as_deref(), &cli.common.overrides())?;
    match &cli.command {
        Command::Demo => {
            let m = commands::demo(&cfg)?;
            println!(
                "demo {}: {} reference pass, {} target passes, output {} ({})",
                m.tasks[0].task,
                m.forward_passes.reference,
                m.forward_passes.target,
                cfg.out.join(&m.output.file).display(),
                m.output.sha256
            );
        }
        Command::Compose => {
            let m = commands::compose(&cfg)?;
            let names: Vec<_> = m.tasks.iter().map(|t| t.task.name()).collect();
            println!(
                "compose {}: {} cached reference tokens, {} context tokens, order-swap diff {:.3e}",
                names.join("+"),
                m.cache.tokens,
                m.cache.context_tokens,
                m.order_swap_max_abs_diff.unwrap_or(0.0)
            );
        }
        Command::Verify { fault } => {
            let fault = fault.map(|f| match f {
                FaultArg::SwapKvOrder => Fault::SwapKvOrder,
            });
            commands::verify(&cfg, fault)?;
        }
        Command::Bench => {
            commands::bench(&cfg, cli.common.steps)?;
        }
        Command::GenFixtures => {
            let m = commands::gen_fixtures(&cfg)?;
            println!("wrote {} fixtures to {}", m.files.len(), cfg.out.display());
        }
    }
    Ok(())
}
