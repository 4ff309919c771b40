use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use evolver_core::config::PipelineConfig;
use evolver_core::pipeline::{self, PipelineError};

#[derive(Parser)]
#[command(name = "evolver", version, about = "Optimize evolving methods and evolve instruction datasets")]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(short, long, global = true, default_value = "evolver.toml")]
    config: PathBuf,
    /// Name of the run directory instead of a timestamp.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Overrides paths.output_dir.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides rng_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Emit JSON log lines on stderr.
    #[arg(long, global = true)]
    log_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the evolving method on the seed dataset.
    Optimize,
    /// Evolve a dataset with a method file.
    Evolve {
        #[arg(long)]
        method: PathBuf,
        /// Dataset to evolve; defaults to paths.seed_dataset.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        rounds: u32,
    },
    /// Combine the records of chosen evolution rounds.
    Mix {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Comma-separated round numbers, e.g. 1,2,3.
        #[arg(long, value_delimiter = ',', required = true)]
        rounds: Vec<u32>,
    },
    /// Contamination and tag metrics for a dataset.
    Analyze {
        #[arg(long)]
        dataset: PathBuf,
        /// Benchmark items: plain text (one per line) or JSONL.
        #[arg(long)]
        test_set: PathBuf,
        /// Precomputed tags (JSONL of {"id", "tags"}); skips tagger calls.
        #[arg(long)]
        tags: Option<PathBuf>,
    },
    /// Print the API-call estimate for evolving a dataset.
    EstimateCost {
        #[arg(long)]
        datasize: u64,
        #[arg(long, default_value_t = 1)]
        rounds: u64,
    },
}

fn init_logging(json: bool) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    if json {
        builder.json().init();
    } else {
        builder.init();
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    // estimate-cost only needs optimizer defaults, so a config file is optional there.
    let mut config = if matches!(cli.command, Command::EstimateCost { .. }) && !cli.config.exists() {
        PipelineConfig::default()
    } else {
        PipelineConfig::load(&cli.config)?
    };
    if let Some(dir) = cli.output_dir {
        config.paths.output_dir = dir;
    }
    if let Some(seed) = cli.seed {
        config.rng_seed = seed;
    }
    let run_id = cli.run_id.as_deref();
    match cli.command {
        Command::Optimize => {
            let s = pipeline::cmd_optimize(&config, run_id)?;
            println!(
                "{}: {:?} after {} steps, best {} (failure rate {:.4} -> {:.4}), {} calls",
                s.run_dir.display(),
                s.termination,
                s.steps,
                s.best_version,
                s.initial_lambda,
                s.best_lambda,
                s.ledger.total_calls()
            );
        }
        Command::Evolve { method, input, rounds } => {
            let r = pipeline::cmd_evolve(&config, &method, input.as_deref(), rounds, run_id)?;
            println!(
                "{}: {} records evolved from {}, {} failed",
                r.run_dir.display(),
                r.evolved_records,
                r.input_records,
                r.failed_records
            );
        }
        Command::Mix { input, rounds } => {
            let rounds: BTreeSet<u32> = rounds.into_iter().collect();
            let r = pipeline::cmd_mix(&config, &input, &rounds, run_id)?;
            println!("{}: {} records mixed", r.run_dir.display(), r.mixed_records);
        }
        Command::Analyze { dataset, test_set, tags } => {
            let r = pipeline::cmd_analyze(&config, &dataset, &test_set, tags.as_deref(), run_id)?;
            print!("{}", std::fs::read_to_string(r.run_dir.join(pipeline::ANALYSIS_REPORT_FILE)).unwrap_or_default());
        }
        Command::EstimateCost { datasize, rounds } => {
            let report = pipeline::cmd_estimate_cost(&config, datasize, rounds)?;
            print!("{}", pipeline::render_cost(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log_json);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
