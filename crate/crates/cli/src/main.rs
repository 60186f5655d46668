//! `a2d-lab`: train and compare asymmetric-information policies on paired
//! fully/partially observed gridworlds.

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use a2d_core::a2d::MetricsRecord;
use a2d_core::envpair::pair_by_name;
use a2d_core::harness::{
    checkpoint_load, evaluate, load_config, oracle_report, parse_override, resolve_run_dir,
    run_with, sweep_lambda, EVAL_INTERACTIONS,
};

#[derive(Parser)]
#[command(name = "a2d-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a JSON config file
    Run {
        /// Path to the JSON run config
        #[arg(long)]
        config: PathBuf,
        /// key=value override applied on top of the config (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print the exact reference report for an environment as JSON
    Oracle {
        /// Environment name, e.g. frozen_lake or tiger_door_0
        #[arg(long)]
        env: String,
    },
    /// Run the full mixing-parameter grid from a base config
    SweepLambda {
        /// Path to the base JSON run config (method must be a2d)
        #[arg(long)]
        config: PathBuf,
        /// key=value override applied on top of the config (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Inspect environments
    #[command(subcommand)]
    Env(EnvCommand),
    /// Evaluate the policy stored in a run checkpoint
    Eval {
        /// Path to a checkpoint.json written by `run`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Interaction budget for the stochastic half of the evaluation
        #[arg(long, default_value_t = EVAL_INTERACTIONS)]
        interactions: usize,
        /// Seed for the stochastic half of the evaluation
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum EnvCommand {
    /// Print the grid render and the enumerated state space
    Dump {
        /// Environment name, e.g. frozen_lake or tiger_door_0
        #[arg(long)]
        env: String,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, set } => cmd_run(&config, &set),
        Command::Oracle { env } => cmd_oracle(&env),
        Command::SweepLambda { config, set } => cmd_sweep(&config, &set),
        Command::Env(EnvCommand::Dump { env }) => cmd_env_dump(&env),
        Command::Eval {
            checkpoint,
            interactions,
            seed,
        } => cmd_eval(&checkpoint, interactions, seed),
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter().map(|s| Ok(parse_override(s)?)).collect()
}

fn progress_line(r: &MetricsRecord) -> Option<String> {
    let det = r.deterministic_return?;
    let stoch = match (r.stochastic_return_mean, r.stochastic_return_std) {
        (Some(m), Some(s)) => format!("{m:>9.2} +-{s:<8.2}"),
        _ => format!("{:>20}", "-"),
    };
    Some(format!(
        "iter {:>4}  steps {:>7}  det {:>10.4}  stoch {stoch}  beta {:.3}  buffer_kl {:.5}",
        r.iteration, r.env_steps_total, det, r.beta, r.buffer_kl
    ))
}

fn cmd_run(config: &Path, set: &[String]) -> Result<()> {
    let overrides = parse_overrides(set)?;
    let cfg = load_config(config, &overrides)?;
    let run_dir = resolve_run_dir(&cfg);
    println!(
        "{} on {} (seed {}) -> {}",
        cfg.method,
        cfg.environment,
        cfg.seed,
        run_dir.display()
    );
    let outcome = run_with(&cfg, |r| {
        if let Some(line) = progress_line(r) {
            println!("{line}");
        }
    })?;

    if let Some(report) = &outcome.oracle {
        println!("{}", serde_json::to_string_pretty(report)?);
        println!("report written to {}", outcome.run_dir.join("oracle.json").display());
        return Ok(());
    }

    let steps = outcome.records.last().map_or(0, |r| r.env_steps_total);
    println!(
        "done: {} iterations, {} env steps{}",
        outcome.records.len(),
        steps,
        if outcome.early_stopped {
            ", stopped early at the optimum"
        } else {
            ""
        }
    );
    if let Some(target) = outcome.optimum_target {
        println!("target optimum: {target}");
    }
    if let Some(det) = outcome.records.iter().rev().find_map(|r| r.deterministic_return) {
        println!("final deterministic return: {det}");
    }
    if let Some(s) = outcome.steps_to_optimum {
        println!("first reached the optimum after {s} env steps");
    }
    println!("artifacts in {}", outcome.run_dir.display());
    Ok(())
}

fn cmd_oracle(env: &str) -> Result<()> {
    let pair = pair_by_name(env)?;
    let report = oracle_report(&pair);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_sweep(config: &Path, set: &[String]) -> Result<()> {
    let overrides = parse_overrides(set)?;
    let base = load_config(config, &overrides)?;
    let root = resolve_run_dir(&base);
    println!(
        "sweeping the mixing parameter on {} (seed {}) under {}",
        base.environment,
        base.seed,
        root.display()
    );
    let (_rows, table) = sweep_lambda(&base)?;
    print!("{table}");
    println!("summary written to {}", root.join("sweep.json").display());
    Ok(())
}

fn cmd_env_dump(env: &str) -> Result<()> {
    let pair = pair_by_name(env)?;
    println!("{}", pair.name);
    println!(
        "states {}  beliefs {}  actions {}  horizon {}  gamma {}",
        pair.n_states, pair.n_beliefs, pair.n_actions, pair.horizon, pair.gamma
    );
    println!("observation length {}  state length {}", pair.obs_len(), pair.state_len());
    println!();
    print!("{}", pair.render_ascii());
    println!();
    println!("initial configurations:");
    for (s, p) in pair.init_support() {
        println!("  state {s}: p = {p}");
    }
    println!();
    println!("{:>5}  {:>6}  {:>8}", "state", "belief", "terminal");
    for s in pair.enumerate_states() {
        println!(
            "{:>5}  {:>6}  {:>8}",
            s,
            pair.belief_id(s),
            if pair.is_terminal(s) { "yes" } else { "" }
        );
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, interactions: usize, seed: u64) -> Result<()> {
    let checkpoint = checkpoint_load(checkpoint)?;
    let pair = pair_by_name(&checkpoint.environment)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let summary = evaluate(&pair, checkpoint.state.primary_policy(), interactions, &mut rng);
    let out = serde_json::json!({
        "environment": checkpoint.environment,
        "method": checkpoint.method.to_string(),
        "iteration": checkpoint.iteration,
        "deterministic_return": summary.deterministic_return,
        "stochastic_mean": summary.stochastic_mean,
        "stochastic_std": summary.stochastic_std,
        "episodes": summary.episodes,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
