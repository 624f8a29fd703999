use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use httm::cli::{self, CliError};
use httm::config::Config;

#[derive(Parser)]
#[command(name = "httm", version, about = "Head-wise temporal token merging: sweeps, property checks and cost reports")]
struct Args {
    /// Print informational wall-clock timings to stderr.
    #[arg(long, global = true)]
    time: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene and write it as a tensor dump.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the layout/ratio grid and write one CSV row per point and seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of seeds in the config.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Check the block-merging properties against the exact oracle.
    CheckProps {
        #[arg(long)]
        config: PathBuf,
        /// Override the number of instances in the config.
        #[arg(long)]
        seeds: Option<u64>,
        /// Corrupt one block similarity entry to exercise failure reporting.
        #[arg(long)]
        mutate_submatrix: bool,
    },
    /// Report matching and attention multiply-adds.
    FlopsReport {
        #[arg(long)]
        config: PathBuf,
        /// CSV destination in addition to the text table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(args: Args) -> Result<ExitCode, CliError> {
    let started = Instant::now();
    let code = match args.cmd {
        Cmd::Gen { config, out } => {
            let cfg = Config::load(&config)?;
            print!("{}", cli::cmd_gen(&cfg, &out)?);
            ExitCode::SUCCESS
        }
        Cmd::Sweep { config, out, seeds } => {
            let cfg = Config::load(&config)?;
            let records = cli::run_sweep(&cfg, seeds)?;
            match out {
                Some(p) => {
                    let mut w = create(&p)?;
                    cli::write_sweep_csv(&records, &mut w)?;
                    w.flush()?;
                    let skipped = records.iter().filter(|r| r.result.is_err()).count();
                    println!("wrote {} rows ({} skipped) to {}", records.len(), skipped, p.display());
                }
                None => cli::write_sweep_csv(&records, std::io::stdout().lock())?,
            }
            ExitCode::SUCCESS
        }
        Cmd::CheckProps { config, seeds, mutate_submatrix } => {
            let cfg = Config::load(&config)?;
            let report = cli::cmd_check_props(&cfg, seeds, mutate_submatrix)?;
            print!("{}", report.render());
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Cmd::FlopsReport { config, out } => {
            let cfg = Config::load(&config)?;
            let report = cli::flops_report(&cfg)?;
            print!("{}", report.render());
            if let Some(p) = out {
                let mut w = create(&p)?;
                report.write_csv(&mut w)?;
                w.flush()?;
            }
            ExitCode::SUCCESS
        }
    };
    if args.time {
        eprintln!("elapsed: {:.3}s", started.elapsed().as_secs_f64());
    }
    Ok(code)
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
