use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kdpl_core::config::load_config;
use kdpl_core::data::{generate_synthetic, SyntheticVLConfig};
use kdpl_core::eval::ReportSplit;
use kdpl_core::experiment::{evaluate_experiment, run_experiment, run_sweep, warm_cache};
use kdpl_core::plot::write_comparison_plot;
use kdpl_core::Error;

/// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration, 3 some seeds failed.
#[derive(Parser)]
#[command(name = "kdpl", version, about = "Prompt learning for small vision-language students, supervised by a frozen teacher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override a config key, e.g. `--set coop.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed, evaluate, and write results, summary and plot.
    Train(ConfigArgs),
    /// Re-evaluate the prompts saved by a previous `train`.
    Eval(ConfigArgs),
    /// Repeat `train` for each value of one config key.
    Sweep {
        #[command(flatten)]
        args: ConfigArgs,
        /// Config key to vary, e.g. `top_k`.
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Grouped per-dataset bar chart from one or more results files.
    Plot {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        /// Which rows to plot: test, base or new.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Teacher cache maintenance.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Write a synthetic world (datasets, models, vocabulary) to a directory.
    Synth {
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    /// Precompute teacher predictions for the source training images.
    Warm(ConfigArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Validation(_)
        | Error::Parse { .. }
        | Error::UnsupportedBackbone(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train(a) => {
            let cfg = load_config(&a.config, &a.overrides)?;
            let out = run_experiment(&cfg)?;
            print!("{}", out.table.summary_markdown());
            println!("results in {}", cfg.output_dir.display());
            if !out.complete() {
                for f in &out.stats.failed_seeds {
                    eprintln!("seed {} failed: {}", f.seed, f.error);
                }
                return Ok(3);
            }
        }
        Command::Eval(a) => {
            let cfg = load_config(&a.config, &a.overrides)?;
            let table = evaluate_experiment(&cfg)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            table.write_csv(&cfg.output_dir.join("eval_results.csv"))?;
            print!("{}", table.summary_markdown());
        }
        Command::Sweep { args, key, values } => {
            let text = std::fs::read_to_string(&args.config).map_err(|e| Error::Data {
                path: args.config.display().to_string(),
                msg: e.to_string(),
            })?;
            let (table, outcomes) = run_sweep(&text, &args.overrides, &key, &values)?;
            print!("{}", table.summary_markdown());
            if outcomes.iter().any(|o| !o.complete()) {
                return Ok(3);
            }
        }
        Command::Plot { results, output, split } => {
            let split = match split.as_str() {
                "test" => ReportSplit::Test,
                "base" => ReportSplit::Base,
                "new" => ReportSplit::New,
                other => return Err(Error::Config(format!("unknown split {other:?}"))),
            };
            let paths: Vec<&std::path::Path> = results.iter().map(|p| p.as_path()).collect();
            write_comparison_plot(&paths, &output, split)?;
            println!("wrote {}", output.display());
        }
        Command::Cache {
            action: CacheAction::Warm(a),
        } => {
            let cfg = load_config(&a.config, &a.overrides)?;
            let s = warm_cache(&cfg)?;
            println!(
                "cache: {} entries ({} computed, {} already present, {} corrupt records dropped)",
                s.entries, s.misses, s.hits, s.corrupt_records
            );
        }
        Command::Synth { output, seed } => {
            let world = generate_synthetic(&SyntheticVLConfig {
                seed,
                ..Default::default()
            })?;
            world.write_to(&output)?;
            println!(
                "wrote {} datasets to {} (teacher accuracy {:.2}%)",
                world.datasets().count(),
                output.display(),
                world.teacher_accuracy * 100.0
            );
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
