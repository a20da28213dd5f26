use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use layershap::experiment::{
    load_config, run_ablate, run_report, run_shapley, run_train, ExperimentConfig, ExperimentError,
    OracleSpec,
};

/// Layer attribution with Shapley values and single-layer ablation.
#[derive(Parser)]
#[command(name = "layershap", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy transformer and write a checkpoint.
    Train(RunArgs),
    /// Compute exact and/or estimated Shapley values plus the ablation sweep.
    Shapley(RunArgs),
    /// Leave-one-out ablation sweep.
    Ablate(RunArgs),
    /// Merge finished runs into cross-task tables.
    Report {
        /// Run directories containing summary.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `builtin` or `external:ADDR` (overrides the config).
    #[arg(long)]
    oracle: Option<OracleSpec>,
    /// Checkpoint to evaluate (default: OUT/checkpoint.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(oracle) = &self.oracle {
            cfg.oracle = oracle.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Train(args) => {
            let s = run_train(&args.resolve()?)?;
            println!(
                "{}: eval accuracy {} (baseline {}) after {} steps",
                s.task, s.eval_accuracy, s.random_baseline, s.steps
            );
        }
        Command::Shapley(args) => {
            let cfg = args.resolve()?;
            let r = run_shapley(&cfg, args.checkpoint.as_deref())?;
            eprintln!("oracle evaluations: {}", r.oracle_evaluations);
            let s = &r.summary;
            for t in &s.top_k {
                println!("top-{} share: {:.4}", t.k, t.share);
            }
            let set = s.cornerstone.label();
            println!(
                "cornerstone: {}",
                if set.is_empty() { "none" } else { &set }
            );
            if let Some(a) = &s.rank_agreement {
                println!(
                    "exact vs estimate: spearman {:.4}, argmax match {}",
                    a.spearman, a.argmax_match
                );
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Ablate(args) => {
            let cfg = args.resolve()?;
            let r = run_ablate(&cfg, args.checkpoint.as_deref())?;
            eprintln!("oracle evaluations: {}", r.oracle_evaluations);
            let collapsed = (0..r.report.n_players())
                .filter(|&i| r.report.collapsed(i))
                .count();
            println!(
                "{} players, {collapsed} collapse on removal",
                r.report.n_players()
            );
        }
        Command::Report { runs, out } => {
            let report = run_report(&runs, &out)?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
