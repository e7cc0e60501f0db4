use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use disentangle_core::experiment::{self, ExperimentConfig, ExperimentReport, Pipeline, SweepAxis};
use disentangle_core::util::fmt_opt;

/// Learns per-aspect binary masks over a frozen encoder and evaluates how
/// well they separate the two aspects.
#[derive(Parser)]
#[command(name = "disentangle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Run one experiment per value of a configuration axis.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// alpha, masked_layers, correlation or sparsity.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Summarize every completed run below a directory.
    Report {
        /// Directory holding one or more run directories.
        dir: PathBuf,
    },
    /// Write the test-set representations of a completed run as CSV.
    ExportReps {
        /// A run directory written by `run`.
        run_dir: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the configured global seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Replaces the configured pipeline.
    #[arg(long)]
    pipeline: Option<String>,
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed_override {
            cfg.seed = seed;
        }
        if let Some(p) = &self.pipeline {
            cfg.pipeline = p.parse::<Pipeline>()?;
        }
        cfg.validate()?;
        let Some(out) = self.out.clone().or_else(|| cfg.output_dir.clone()) else {
            bail!("no output directory: pass --out or set output_dir in the configuration");
        };
        Ok((cfg, out))
    }
}

fn print_run(report: &ExperimentReport, out: &Path) {
    println!(
        "{} seed {} finished in {:.1}s, outputs in {}",
        report.pipeline.as_str(),
        report.seed,
        report.wall_clock_seconds,
        out.display()
    );
    for arm in &report.arms {
        let m = &arm.aspect_a.main;
        println!(
            "  {:<18} level {:>4}  main {}  worst {}  leakage a {:.4} b {:.4}",
            arm.pipeline,
            fmt_opt(arm.level),
            fmt_opt(m.avg_acc),
            fmt_opt(m.worst_acc),
            arm.aspect_a.leakage,
            arm.aspect_b.leakage
        );
    }
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, out) = args.load()?;
            let report = experiment::run(&cfg, &out)?;
            print_run(&report, &out);
        }
        Command::Sweep { run, axis, values } => {
            let (cfg, out) = run.load()?;
            let axis: SweepAxis = axis.parse()?;
            let entries = experiment::sweep(&cfg, axis, &values, &out)?;
            let mut failed = 0;
            for e in &entries {
                match &e.outcome {
                    Ok(r) => println!(
                        "{}={}: ok ({:.1}s)",
                        axis.as_str(),
                        e.value,
                        r.wall_clock_seconds
                    ),
                    Err(msg) => {
                        failed += 1;
                        println!("{}={}: failed: {msg}", axis.as_str(), e.value);
                    }
                }
            }
            println!("merged results in {}", out.join("sweep.csv").display());
            if failed > 0 {
                bail!("{failed} of {} sweep runs failed", entries.len());
            }
        }
        Command::Report { dir } => {
            let (runs, table) = experiment::report(&dir)?;
            print!("{table}");
            println!(
                "{} run(s); tidy CSVs written to {}",
                runs.len(),
                dir.display()
            );
        }
        Command::ExportReps { run_dir, out } => {
            let n = experiment::export_run_representations(&run_dir, &out)
                .with_context(|| format!("exporting representations of {}", run_dir.display()))?;
            println!("wrote {n} examples to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
