use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kafal::harness::config::parse_strategies;
use kafal::harness::experiment::{partition_experiment, score_experiment};
use kafal::harness::report::{read_metrics, rounds_to_target, summarize, MetricsRow};
use kafal::harness::{run_experiment, ExperimentConfig};
use kafal::{Error, Result};

#[derive(Parser)]
#[command(name = "kafal", version, about = "Federated active learning simulator")]
struct Cli {
    /// Worker threads for client updates (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed_override: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated strategies, replacing the config's list.
    #[arg(long)]
    strategies: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed and strategy in a config.
    Run(ExperimentArgs),
    /// Write the Dirichlet partition plan for the first seed.
    Partition(ExperimentArgs),
    /// Train one cycle and dump each client's acquisition scores.
    Score(ExperimentArgs),
    /// Summarise metrics CSVs; with --target, print rounds needed to reach it.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        target: Option<f64>,
    },
}

fn load(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed_override {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(list) = &args.strategies {
        cfg.strategies = parse_strategies(list)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(paths: &[PathBuf], target: Option<f64>) -> Result<()> {
    let mut rows: Vec<MetricsRow> = Vec::new();
    for p in paths {
        rows.extend(read_metrics(p)?);
    }
    println!("{}", serde_json::to_string_pretty(&summarize(&rows))?);
    if let Some(target) = target {
        println!("seed,strategy,cycle,rounds_to_target");
        let mut start = 0;
        while start < rows.len() {
            let key = |r: &MetricsRow| (r.seed, r.strategy.clone(), r.cycle);
            let end = start + rows[start..].iter().take_while(|r| key(r) == key(&rows[start])).count();
            let run = &rows[start..end];
            let reached = rounds_to_target(run, target).map_or("none".to_string(), |r| r.to_string());
            println!("{},{},{},{reached}", run[0].seed, run[0].strategy, run[0].cycle);
            start = end;
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Run(args) => {
            let out = run_experiment(&load(&args)?)?;
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
        }
        Command::Partition(args) => {
            let cfg = load(&args)?;
            let plan = partition_experiment(&cfg)?;
            for (k, ids) in plan.client_indices.iter().enumerate() {
                println!("client {k}: {} samples", ids.len());
            }
        }
        Command::Score(args) => {
            let cfg = load(&args)?;
            let acquisitions = score_experiment(&cfg)?;
            for (k, a) in acquisitions.iter().enumerate() {
                println!("client {k}: scored {}, selected {}", a.scores.len(), a.selected.len());
            }
        }
        Command::Report { metrics, target } => report(&metrics, target)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
