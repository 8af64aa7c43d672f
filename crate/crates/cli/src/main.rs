use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hybridsim_cli::commands::{self, write_csv};
use hybridsim_cli::config::{parse_strategies, Config, ConfigError};

/// Simulator for fused prefill/decode attention on a GPU and for request
/// serving built on top of it.
#[derive(Parser)]
#[command(name = "hybridsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// CSV destination; stdout when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Writes the resolved config here as TOML.
    #[arg(long, global = true, value_name = "PATH")]
    emit_config: Option<PathBuf>,
    /// Comma-separated strategies; overrides the config list of the subcommand.
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Worker threads; 0 lets the pool decide.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Dumps per-CTA dispatch and completion events to stderr (kernel-sim).
    #[arg(long, global = true)]
    trace: bool,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Randomized correctness suites for the attention kernels.
    AttnVerify,
    /// Every prompt chunk next to the decodes, under each execution strategy.
    KernelSim,
    /// Compute-bound and memory-bound kernels co-scheduled.
    Microbench,
    /// Request-level serving over a generated trace.
    ServeSim,
    /// Serial versus fused speedup over a grid of batches.
    Sweep,
}

enum Outcome {
    Pass,
    VerificationFailed,
}

fn resolve(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match &cli.common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.common.threads {
        cfg.threads = threads;
    }
    if let Some(list) = &cli.common.strategies {
        parse_strategies(list).context("--strategies")?;
        match cli.command {
            Command::Microbench => cfg.microbench.strategies = list.clone(),
            _ => cfg.kernel.strategies = list.clone(),
        }
    }
    cfg.validate()?;
    cfg.resolved()
}

fn output(path: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let cfg = resolve(cli)?;
    if let Some(path) = &cli.common.emit_config {
        std::fs::write(path, cfg.to_toml()?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let out = output(&cli.common.out)?;
    match cli.command {
        Command::AttnVerify => {
            let reports = commands::attn_verify(&cfg)?;
            let mut out = out;
            out.write_all(commands::verify_table(&reports).as_bytes())?;
            out.flush()?;
            if reports.iter().all(|r| r.passed()) {
                return Ok(Outcome::Pass);
            }
            return Ok(Outcome::VerificationFailed);
        }
        Command::KernelSim => {
            let result = commands::kernel_sim(&cfg, cli.common.trace)?;
            if cli.common.trace {
                let mut err = io::stderr().lock();
                for (row, lines) in result.rows.iter().zip(&result.traces) {
                    writeln!(err, "# run {} {} {}", row.run_id, row.strategy, row.policy)?;
                    for line in lines {
                        writeln!(err, "{line}")?;
                    }
                }
            }
            write_csv(&result.rows, out)?;
        }
        Command::Microbench => write_csv(&commands::microbench(&cfg)?, out)?,
        Command::ServeSim => write_csv(&commands::serve_sim(&cfg)?, out)?,
        Command::Sweep => {
            let rows = commands::sweep(&cfg)?;
            write_csv(&rows, out)?;
            let mut s: Vec<f64> = rows.iter().map(|r| r.speedup).collect();
            s.sort_by(f64::total_cmp);
            eprintln!(
                "speedup over {} batches: min {:.3} median {:.3} max {:.3}",
                s.len(),
                s[0],
                s[s.len() / 2],
                s[s.len() - 1]
            );
        }
    }
    Ok(Outcome::Pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(1),
        Err(e) => {
            let kind = if e.chain().any(|c| c.is::<ConfigError>()) {
                "config error"
            } else {
                "error"
            };
            eprintln!("{kind}: {e:#}");
            ExitCode::from(2)
        }
    }
}
