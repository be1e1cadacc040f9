//! `e2c` — train, sweep, evaluate, verify, and aggregate from the command
//! line. Every subcommand exits nonzero on failure with a message on stderr;
//! machine-readable output (plot data) goes to stdout alone.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use e2c_core::config::{load_run_config, RunConfig};
use e2c_core::harness;
use e2c_core::metrics::{aggregate_to_csv, aggregate_to_json};
use e2c_core::tabular::{gen_instance, perturb_one_agent, verify_team_bound, InstanceLimits};

#[derive(Parser)]
#[command(name = "e2c", version, about = "Constrained multi-agent training runs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one seed of a configuration and write its archive.
    Train(TrainArgs),
    /// Train every configured seed, one archive per seed.
    Sweep(SweepArgs),
    /// Greedily replay a checkpoint and report mean episodic reward and costs.
    Eval(EvalArgs),
    /// Check the trust-region cost bound on randomized exact tabular instances.
    VerifyBounds(VerifyBoundsArgs),
    /// Aggregate a sweep's metrics into smoothed mean ± standard-error curves.
    PlotData(PlotDataArgs),
    /// Parse and validate a configuration, reporting the first problem found.
    ValidateConfig(ValidateConfigArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed to train (default: the first seed in the configuration).
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (default: $E2C_OUT_ROOT or `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured iteration budget.
    #[arg(long)]
    iterations: Option<u64>,
    /// Skip the run if its archive is already complete.
    #[arg(long)]
    resume: bool,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured iteration budget.
    #[arg(long)]
    iterations: Option<u64>,
    /// Skip seeds whose archives are already complete.
    #[arg(long)]
    resume: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint file to replay.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episodes to average over.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Seed for the evaluation episode stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct VerifyBoundsArgs {
    /// Randomized instances to check.
    #[arg(long, default_value_t = 1000)]
    instances: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Slack below the negative of this tolerance counts as a violation.
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
}

#[derive(clap::Args)]
struct PlotDataArgs {
    /// Configuration whose sweep output should be aggregated.
    #[arg(long)]
    config: PathBuf,
    /// Output root the sweep wrote into (default: $E2C_OUT_ROOT or `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(clap::Args)]
struct ValidateConfigArgs {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &PathBuf) -> anyhow::Result<(RunConfig, String)> {
    let (cfg, raw) = load_run_config(path)?;
    cfg.validate()?;
    Ok((cfg, raw))
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(harness::default_out_root)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Train(args) => {
            let (cfg, raw) = load(&args.config)?;
            let seed = args.seed.unwrap_or(cfg.seeds[0]);
            let iterations = args.iterations.unwrap_or(cfg.iterations);
            let out = out_root(args.out);
            let outcome =
                harness::run_single(&cfg, &raw, seed, &out, iterations, args.resume)?;
            if outcome.skipped {
                println!("seed {} already complete at {}", outcome.seed, outcome.dir.display());
            } else {
                println!(
                    "trained seed {} for {} iterations in {:.1} s → {}",
                    outcome.seed,
                    outcome.iterations,
                    outcome.wall_time_s,
                    outcome.dir.display()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep(args) => {
            let (cfg, raw) = load(&args.config)?;
            let iterations = args.iterations.unwrap_or(cfg.iterations);
            let out = out_root(args.out);
            let report = harness::sweep(&cfg, &raw, &out, iterations, args.resume)?;
            for o in &report.outcomes {
                if o.skipped {
                    println!("seed {}: already complete", o.seed);
                } else {
                    println!("seed {}: {} iterations in {:.1} s", o.seed, o.iterations, o.wall_time_s);
                }
            }
            if report.all_succeeded() {
                println!("sweep complete: {} archives under {}", report.outcomes.len(), out.display());
                Ok(ExitCode::SUCCESS)
            } else {
                for (seed, msg) in &report.failures {
                    eprintln!("seed {seed} failed: {msg}");
                }
                eprintln!(
                    "sweep finished with {} of {} seeds failed",
                    report.failures.len(),
                    report.failures.len() + report.outcomes.len()
                );
                Ok(ExitCode::FAILURE)
            }
        }
        Cmd::Eval(args) => {
            let (cfg, _) = load(&args.config)?;
            let report =
                harness::eval_checkpoint(&cfg, &args.checkpoint, args.episodes, args.seed)?;
            println!("episodes: {}", report.episodes);
            println!("mean_reward: {:.6}", report.mean_reward);
            for (channel, cost) in &report.mean_costs {
                println!("mean_cost_{channel}: {cost:.6}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::VerifyBounds(args) => {
            let limits = InstanceLimits::default();
            let mut min_slack = f64::INFINITY;
            let mut violations = 0u64;
            for i in 0..args.instances {
                let (mdp, pi) = gen_instance::<f64>(args.seed, i, &limits)?;
                let (pi_bar, agent) = perturb_one_agent(&pi, args.seed, i);
                let check = verify_team_bound(&mdp, &pi, &pi_bar, agent, 0)?;
                min_slack = min_slack.min(check.slack);
                if check.slack < -args.tolerance {
                    violations += 1;
                    eprintln!(
                        "instance {i}: slack {:.3e} (J_new {:.6} > rhs {:.6})",
                        check.slack, check.j_new, check.rhs
                    );
                }
            }
            println!(
                "checked {} instances: min slack {:.3e}, violations below -{:.0e}: {}",
                args.instances, min_slack, args.tolerance, violations
            );
            Ok(if violations == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::PlotData(args) => {
            let (cfg, _) = load(&args.config)?;
            let out = out_root(args.out);
            let (seeds, agg) = harness::plot_data(&out, &cfg.name)?;
            eprintln!("aggregating {} seeds: {seeds:?}", seeds.len());
            match args.format {
                Format::Csv => print!("{}", aggregate_to_csv(&agg)),
                Format::Json => {
                    println!("{}", serde_json::to_string_pretty(&aggregate_to_json(&agg))?)
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::ValidateConfig(args) => {
            let (cfg, _) = load(&args.config)?;
            println!(
                "ok: {} ({}, {} seed{}, {} iterations)",
                cfg.name,
                cfg.variant,
                cfg.seeds.len(),
                if cfg.seeds.len() == 1 { "" } else { "s" },
                cfg.iterations
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
