use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ringserve_core::config::SystemConfig;
use ringserve_core::harness::{run_bench, write_csv, BenchOptions};
use ringserve_core::scheduler::SchedulerMode;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "ringserve", version, about = "CPU-free LLM serving emulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the OpenAI-compatible API on the wall clock.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8000")]
        listen: SocketAddr,
        #[arg(long, default_value = "ringserve-emulated")]
        model: String,
    },
    /// Sweep offered loads on the virtual clock and write a CSV report.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "device")]
        mode: SchedulerMode,
        #[arg(long, default_value_t = 0)]
        interference_threads: usize,
        /// Comma-separated offered loads before load scaling.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn load(config: Option<PathBuf>) -> Result<SystemConfig> {
    match config {
        Some(p) => SystemConfig::load(&p).with_context(|| format!("loading {}", p.display())),
        None => Ok(SystemConfig::default()),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Serve { config, listen, model } => {
            let cfg = load(config)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(ringserve_core::runtime::serve(&cfg, listen, &model))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench {
            config,
            mode,
            interference_threads,
            rates,
            out,
        } => {
            let cfg = load(config)?;
            let report = run_bench(
                &cfg,
                &BenchOptions {
                    mode,
                    interference_threads,
                    rates,
                },
            )?;
            match out {
                Some(p) => {
                    let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                    let mut w = BufWriter::new(f);
                    write_csv(&report.rows, &mut w)?;
                    w.flush()?;
                }
                None => write_csv(&report.rows, std::io::stdout().lock())?,
            }
            match report.lambda_star {
                Some(l) => eprintln!("saturation knee: {l:.3} req/s"),
                None => eprintln!("saturation knee: not identifiable from this sweep"),
            }
            if let Some(r) = report.range {
                eprintln!(
                    "operating range: geo-mean P99 TTFT {:.3} ms, P99 TPOT {:.3} ms, throughput at knee {:.3} req/s",
                    r.geo_p99_ttft_ms, r.geo_p99_tpot_ms, r.throughput_at_star
                );
            }
            eprintln!("serviceable load: {:.3} req/s", report.serviceable_load);
            if report.invariant_failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for f in &report.invariant_failures {
                    eprintln!("invariant violated: {f}");
                }
                Ok(ExitCode::from(2))
            }
        }
        Command::DefaultConfig => {
            print!("{}", SystemConfig::default().to_toml());
            Ok(ExitCode::SUCCESS)
        }
    }
}
