use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use psyfield::benchmark::{export_csv, median_metric, run_benchmark, RunResult};
use psyfield::config::load_experiment;
use psyfield::testfuns::TestFunction;
use psyfield::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "bench", about = "Simulated psychophysics experiments against known test functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run replicated simulations and write trials.csv and metrics.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replications (overrides the config).
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        /// Base seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate metrics without the outermost grid ring.
        #[arg(long)]
        interior_only: bool,
    },
    /// List built-in test functions.
    ListTestfuns,
}

fn summarize(results: &[RunResult], checkpoints: &[usize]) {
    println!("checkpoint  median_prob_mae  median_threshold_mae");
    for c in checkpoints {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{c:>10}  {:>15}  {:>20}",
            fmt(median_metric(results, *c, "prob_mae")),
            fmt(median_metric(results, *c, "threshold_mae"))
        );
    }
}

fn run(
    config: PathBuf,
    out: PathBuf,
    reps: Option<usize>,
    workers: Option<usize>,
    seed: Option<u64>,
    interior_only: bool,
) -> Result<(), (u8, Error)> {
    let as_config = |e: Error| (EXIT_CONFIG, e);
    let exp = load_experiment(&config).map_err(as_config)?;
    let mut cfg = exp.benchmark_config().map_err(as_config)?;
    if let Some(r) = reps {
        cfg.replications = r;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if let Some(s) = seed {
        cfg.base_seed = s;
    }
    cfg.interior_only |= interior_only;
    cfg.validate().map_err(as_config)?;

    let start = Instant::now();
    let results = run_benchmark(&cfg).map_err(|e| (EXIT_RUNTIME, e))?;
    log::info!("{} replications in {:.1}s", results.len(), start.elapsed().as_secs_f64());
    export_csv(&results, &cfg.test_function.domain, &out).map_err(|e| (EXIT_RUNTIME, e))?;

    let failed: Vec<&RunResult> = results.iter().filter(|r| r.failure.is_some()).collect();
    for r in &failed {
        log::warn!("replication {} failed: {}", r.rep, r.failure.as_deref().unwrap_or_default());
    }
    summarize(&results, &cfg.checkpoints);
    if failed.len() == results.len() {
        return Err((EXIT_RUNTIME, Error::Numerical("every replication failed".into())));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::ListTestfuns => {
            for (name, description) in TestFunction::names() {
                println!("{name}\t{description}");
            }
            ExitCode::SUCCESS
        }
        Command::Run {
            config,
            out,
            reps,
            workers,
            seed,
            interior_only,
        } => match run(config, out, reps, workers, seed, interior_only) {
            Ok(()) => ExitCode::SUCCESS,
            Err((code, e)) => {
                eprintln!("bench: {e}");
                ExitCode::from(code)
            }
        },
    }
}
