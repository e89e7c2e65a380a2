use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use memdp::config::RunConfig;
use memdp::data::{generate_dataset, load_dataset, save_dataset};
use memdp::harness::{
    bench_constant_cost, evaluate, gradcheck, train_run_with, write_json, BENCH_FILE, CHECKPOINT_FILE, EVAL_FILE,
};
use memdp::policy::Policy;

/// Diffusion policy with working and episodic memory.
#[derive(Debug, Parser)]
#[command(name = "memdp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for datasets, checkpoints and metrics.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out the scripted expert and write the demonstration dataset.
    GenData(Common),
    /// Train on the dataset; writes metrics.csv and checkpoint.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Print a progress line every this many steps (0: silent).
        #[arg(long, default_value_t = 1000)]
        log_every: usize,
    },
    /// Closed-loop evaluation of a checkpoint; writes eval.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: OUT/checkpoint.json).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Per-decision cost at probe steps of one long episode; writes bench.json.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated probe steps.
        #[arg(long, value_delimiter = ',', default_value = "50,500")]
        probes: Vec<usize>,
        /// Timed repeats per probe (the median is reported).
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
    /// Finite-difference gradient check at tiny dimensions.
    Gradcheck(Common),
}

fn load_config(common: &Common, required: bool) -> Result<Option<RunConfig>> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("cannot load config {}", path.display()))?,
        None if required => bail!("--config PATH is required for this command"),
        None => return Ok(None),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(Some(cfg))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

/// Loads a checkpoint and applies the evaluation-time settings of `cfg`
/// (episodes, replanning, ablation switches, seed) when one is given.
fn load_policy(common: &Common, checkpoint: &Option<PathBuf>) -> Result<(Policy, memdp::nn::ParamStore, RunConfig)> {
    let path = checkpoint.clone().unwrap_or_else(|| common.out.join(CHECKPOINT_FILE));
    let (mut policy, params) =
        Policy::load_checkpoint(&path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let mut run = policy.config.clone();
    if let Some(cfg) = load_config(common, false)? {
        run.eval_episodes = cfg.eval_episodes;
        run.replan_interval = cfg.replan_interval;
        run.zero_episodic = cfg.zero_episodic;
        run.window_only = cfg.window_only;
        run.seed = cfg.seed;
    } else if let Some(seed) = common.seed {
        run.seed = seed;
    }
    run.validate()?;
    policy.config.replan_interval = run.replan_interval;
    policy.config.zero_episodic = run.zero_episodic;
    policy.config.window_only = run.window_only;
    Ok((policy, params, run))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = load_config(&common, true)?.expect("required");
            ensure_dir(&common.out)?;
            let spec = cfg.env_spec()?;
            let ds = generate_dataset(&spec, cfg.num_demos, cfg.seed, cfg.expert_noise)?;
            let path = cfg.dataset_path(&common.out);
            save_dataset(&ds, &path)?;
            println!("wrote {} trajectories ({} samples) to {}", ds.trajectories.len(), ds.num_samples(), path.display());
        }
        Command::Train { common, log_every } => {
            let cfg = load_config(&common, true)?.expect("required");
            ensure_dir(&common.out)?;
            let path = cfg.dataset_path(&common.out);
            let ds = load_dataset(&path).with_context(|| format!("cannot load dataset {}", path.display()))?;
            let outcome = train_run_with(&cfg, &ds, Some(&common.out), |row| {
                if log_every > 0 && row.step % log_every == 0 {
                    eprintln!("step {:>7}  loss {:.5}  grad_norm {:.4}", row.step, row.loss, row.grad_norm);
                }
            })?;
            println!(
                "trained {} steps ({} parameters); checkpoint in {}",
                outcome.rows.len(),
                outcome.ema.num_scalars(),
                common.out.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let (policy, params, run) = load_policy(&common, &checkpoint)?;
            ensure_dir(&common.out)?;
            let report = evaluate(&policy, &params, run.eval_episodes, run.seed)?;
            write_json(&report, &common.out.join(EVAL_FILE))?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Bench { common, checkpoint, probes, repeats } => {
            let (policy, params, run) = load_policy(&common, &checkpoint)?;
            ensure_dir(&common.out)?;
            let rows = bench_constant_cost(&policy, &params, &probes, repeats, run.seed)?;
            write_json(&rows, &common.out.join(BENCH_FILE))?;
            for r in &rows {
                println!("step {:>6}  tokens {:>4}  {:.3} ms/decision", r.probe_step, r.tokens_live, r.ms_per_decision);
            }
        }
        Command::Gradcheck(common) => {
            let cfg = load_config(&common, false)?.unwrap_or_else(|| {
                let mut c = RunConfig::desk(memdp::envs::Task::ShellGame);
                if let Some(seed) = common.seed {
                    c.seed = seed;
                }
                c
            });
            ensure_dir(&common.out)?;
            let report = gradcheck(&cfg)?;
            write_json(&report, &common.out.join("gradcheck.json"))?;
            for g in &report.groups {
                let pass = g.max_rel_error < report.threshold;
                println!(
                    "{:<12} {:>6} values  max rel error {:.3e}  {}",
                    g.group,
                    g.checked,
                    g.max_rel_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            println!("{:.2}s", report.seconds);
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
