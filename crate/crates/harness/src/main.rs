use std::path::PathBuf;
use std::process::ExitCode;

use adafish_harness::compare::{compare, load_config_dir};
use adafish_harness::config::ExperimentConfig;
use adafish_harness::train::{train, OutputPaths, RunStatus};
use adafish_harness::verify::{run_suite, Suite, VerifyOptions};
use adafish_harness::{plot, HarnessError, Result};
use clap::{Parser, Subcommand};

/// Exit status for a run that stopped on a non-finite loss.
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "adafish", version, about = "Train, compare and check the AdaFish optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output prefix.
        #[arg(long)]
        out_prefix: Option<PathBuf>,
    },
    /// Run every *.toml in a directory over seeds 0..n and compare them.
    Compare {
        #[arg(long)]
        config_dir: PathBuf,
        #[arg(long)]
        seeds: u64,
        /// Config name (file stem) to use as the baseline.
        #[arg(long)]
        baseline: Option<String>,
        /// Output directory; defaults to <config-dir>/comparison.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the numerical self-checks.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        /// Corrupt the fast SMW solve (negative control).
        #[arg(long)]
        mutate_smw: bool,
    },
    /// Plot metrics CSVs to an SVG file.
    Plot {
        #[arg(long)]
        out: PathBuf,
        csv: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train { config, seed, out_prefix } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = out_prefix {
                cfg.output_prefix = p;
            }
            let outcome = train(&cfg)?;
            let paths = OutputPaths::for_prefix(&cfg.output_prefix);
            let d = &outcome.diagnostics;
            println!(
                "steps={} final_train_loss={:e} final_test_accuracy={:.6} avg_dyn_grad_norm_sq={:e} metrics={}",
                d.steps,
                d.final_train_loss,
                d.final_test_accuracy,
                d.running_avg_dyn_grad_norm_sq,
                paths.metrics.display()
            );
            match outcome.status {
                RunStatus::Completed => Ok(0),
                RunStatus::Diverged { step, reason } => {
                    eprintln!("error: run diverged at step {step}: {reason}");
                    Ok(EXIT_DIVERGED)
                }
            }
        }
        Command::Compare {
            config_dir,
            seeds,
            baseline,
            out,
        } => {
            let configs = load_config_dir(&config_dir)?;
            let out = out.unwrap_or_else(|| config_dir.join("comparison"));
            let report = compare(&configs, seeds, baseline.as_deref(), &out)?;
            print!("{}", report.summary_table());
            Ok(0)
        }
        Command::Verify { suite, mutate_smw } => {
            let suite: Suite = suite.parse()?;
            let report = run_suite(suite, VerifyOptions { mutate_smw })?;
            println!("{report}");
            if report.all_passed() {
                Ok(0)
            } else {
                Err(HarnessError::VerifyFailed {
                    failed: report.failed(),
                })
            }
        }
        Command::Plot { out, csv } => {
            plot::plot(&csv, &out)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
