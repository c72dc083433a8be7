use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use icot_core::harness::{
    compare_policies, convert_dataset, load_dataset, parse_grid, parse_policies, run_benchmark, sweep_tau,
    write_dataset, ConvertOptions, HarnessError, RunConfig, RunOptions, RunReport, SourceFormat, Split, TauSentinel,
    TauSetting,
};
use icot_core::tracestore::{self, DocumentKind, StoredDocument};

#[derive(Parser)]
#[command(
    name = "icot",
    version,
    about = "Confidence-gated visual-thought insertion for stepwise multimodal reasoning"
)]
struct Cli {
    /// Log progress (-v) or everything (-vv). `RUST_LOG` overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Gated,
    Always,
    Never,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(clap::Args)]
struct Inputs {
    /// Normalized dataset (JSON lines).
    #[arg(long)]
    dataset: PathBuf,
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration over a dataset and write traces plus a report.
    Run {
        #[command(flatten)]
        inputs: Inputs,
        /// Override the configured threshold.
        #[arg(long, conflicts_with = "policy")]
        tau: Option<f64>,
        /// Override the configured policy (`gated` keeps the configured tau).
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Serve all provider calls from cassettes in DIR.
        #[arg(long, value_name = "DIR", conflicts_with = "record")]
        replay: Option<PathBuf>,
        /// Record provider calls into cassettes under DIR.
        #[arg(long, value_name = "DIR")]
        record: Option<PathBuf>,
        /// Root directory for run output.
        #[arg(long, value_name = "DIR", default_value = "runs")]
        runs: PathBuf,
    },
    /// Run the gated policy at every threshold in a grid.
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        /// `start:end:step` (inclusive) or a comma-separated list.
        #[arg(long, default_value = "0.1:1.0:0.1")]
        grid: String,
        #[arg(long, value_name = "DIR")]
        replay: Option<PathBuf>,
        /// Also write each run's traces under DIR.
        #[arg(long, value_name = "DIR")]
        runs: Option<PathBuf>,
        /// Write the sweep table as a stored document.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare insertion policies on the same dataset.
    Compare {
        #[command(flatten)]
        inputs: Inputs,
        /// e.g. `gated,always,never` or `gated:0.3,always`.
        #[arg(long, default_value = "gated,always")]
        policies: String,
        #[arg(long, value_name = "DIR")]
        replay: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        runs: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Convert a public benchmark layout into the normalized dataset format.
    ConvertDataset {
        #[arg(long, value_name = "FORMAT")]
        from: SourceFormat,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Directory the source's image paths are relative to.
        #[arg(long, value_name = "DIR")]
        image_root: PathBuf,
        /// Split for items that carry none.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Verify a finished run and print its summary.
    Report {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// Another run to report the token reduction against.
        #[arg(long, value_name = "DIR")]
        baseline: Option<PathBuf>,
        /// Also print one line per sample.
        #[arg(long)]
        rows: bool,
    },
}

fn io_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(e.to_string())
}

fn load_inputs(inputs: &Inputs) -> Result<(Vec<icot_core::harness::Sample>, RunConfig), HarnessError> {
    let cfg = RunConfig::load(&inputs.config)?;
    let samples = load_dataset(&inputs.dataset)?;
    Ok((samples, cfg))
}

fn write_output<T: serde::Serialize>(path: &Path, kind: DocumentKind, payload: &T) -> Result<(), HarnessError> {
    let doc = StoredDocument::new(kind, payload).map_err(io_err)?;
    tracestore::write_document_to(path, &doc).map_err(io_err)
}

fn read_report(run_dir: &Path) -> Result<RunReport, HarnessError> {
    tracestore::read_payload(&run_dir.join("report.json"), DocumentKind::Report).map_err(io_err)
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run {
            inputs,
            tau,
            policy,
            replay,
            record,
            runs,
        } => {
            let (samples, mut cfg) = load_inputs(&inputs)?;
            if let Some(tau) = tau {
                cfg.tau = TauSetting::Value(tau);
            }
            match policy {
                Some(PolicyArg::Always) => cfg.tau = TauSetting::Sentinel(TauSentinel::Always),
                Some(PolicyArg::Never) => cfg.tau = TauSetting::Sentinel(TauSentinel::Never),
                Some(PolicyArg::Gated) | None => {}
            }
            let options = RunOptions {
                runs_root: Some(runs),
                replay,
                record,
            };
            let run = run_benchmark(&samples, &cfg, &options)?;
            println!("{}", run.report.summary());
            if let Some(dir) = run.run_dir {
                println!("run written to {}", dir.display());
            }
        }
        Command::Sweep {
            inputs,
            grid,
            replay,
            runs,
            output,
        } => {
            let (samples, cfg) = load_inputs(&inputs)?;
            let grid = parse_grid(&grid)?;
            let options = RunOptions {
                runs_root: runs,
                replay,
                record: None,
            };
            let table = sweep_tau(&samples, &cfg, &grid, &options)?;
            println!(
                "{:>6} {:>9} {:>11} {:>12}",
                "tau", "accuracy", "insertions", "mean tokens"
            );
            for r in &table.rows {
                println!(
                    "{:>6.2} {:>8.1}% {:>11.2} {:>12.1}",
                    r.tau, r.accuracy, r.mean_insertions, r.mean_total_tokens
                );
            }
            println!("best tau: {}", table.best_tau);
            if let Some(path) = output {
                write_output(&path, DocumentKind::Report, &table)?;
            }
        }
        Command::Compare {
            inputs,
            policies,
            replay,
            runs,
            output,
        } => {
            let (samples, cfg) = load_inputs(&inputs)?;
            let default_tau = match cfg.tau {
                TauSetting::Value(t) => t,
                TauSetting::Sentinel(_) => icot_core::gating::DEFAULT_TAU,
            };
            let policies = parse_policies(&policies, default_tau)?;
            let options = RunOptions {
                runs_root: runs,
                replay,
                record: None,
            };
            let cmp = compare_policies(&samples, &cfg, &policies, &options)?;
            println!(
                "{:<16} {:>9} {:>12} {:>10} {:>10} {:>11}",
                "policy", "accuracy", "mean tokens", "text", "image", "insertions"
            );
            for r in &cmp.rows {
                println!(
                    "{:<16} {:>8.1}% {:>12.1} {:>10.1} {:>10.1} {:>11.2}",
                    r.policy,
                    r.accuracy,
                    r.mean_total_tokens,
                    r.mean_text_tokens,
                    r.mean_image_tokens,
                    r.mean_insertions
                );
            }
            if let Some(r) = cmp.gated_vs_always_reduction {
                println!("gated uses {r:.1}% fewer tokens than always");
            }
            if let Some(path) = output {
                write_output(&path, DocumentKind::Report, &cmp)?;
            }
        }
        Command::ConvertDataset {
            from,
            input,
            output,
            image_root,
            split,
        } => {
            let opts = ConvertOptions {
                image_root,
                default_split: match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Val => Split::Val,
                    SplitArg::Test => Split::Test,
                },
            };
            let (samples, summary) = convert_dataset(from, &input, &opts)?;
            write_dataset(&output, &samples).map_err(|e| io_err(format!("{}: {e}", output.display())))?;
            println!(
                "converted {} samples ({} skipped) into {}",
                summary.converted,
                summary.skipped,
                output.display()
            );
        }
        Command::Report { run, baseline, rows } => {
            let mut report = read_report(&run)?;
            // Every trace must still verify.
            let traces = run.join("traces");
            for row in &report.rows {
                let path = traces.join(icot_core::harness::trace_file_name(&row.sample_id));
                tracestore::read_document(&path).map_err(io_err)?;
            }
            if let Some(dir) = baseline {
                let base = read_report(&dir)?;
                report.compare_to(dir.display().to_string(), &base);
            }
            println!("{}", report.summary());
            if rows {
                for r in &report.rows {
                    println!(
                        "{} gold={} predicted={} {:?} steps={} tokens={} insertions={}",
                        r.sample_id,
                        r.gold_label,
                        r.predicted.as_deref().unwrap_or("-"),
                        r.verdict,
                        r.steps,
                        r.ledger.total_tokens,
                        r.ledger.insertions
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
