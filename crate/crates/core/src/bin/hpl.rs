//! `hpl` command-line tool: pipeline stages and experiment recipes.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hpl_core::config::{ExperimentConfig, Method};
use hpl_core::experiments::{cmd_exp_gambling, cmd_exp_mismatch, cmd_sweep, GamblingConfig, SweepAxis};
use hpl_core::pipeline::{self, CONFIG_FILE};
use hpl_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "hpl", version, about = "Hindsight preference learning on tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config's `run.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the MDP, the unlabeled dataset and the preference dataset.
    GenData(Common),
    /// Train the future-segment VAE.
    TrainVae(Common),
    /// Train the reward model(s) of the configured method.
    TrainReward(Common),
    /// Label the unlabeled dataset with rewards.
    Label(Common),
    /// Train the offline policy.
    TrainRl(Common),
    /// Evaluate the trained policy.
    Eval(Common),
    /// Run every stage of the configured method.
    Pipeline(Common),
    /// Gambling credit-assignment study (MR vs HPL).
    ExpGambling {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        num_seeds: usize,
        /// Exit with status 3 unless the summary meets its thresholds.
        #[arg(long)]
        check: bool,
    },
    /// Methods compared under a preference/unlabeled policy shift.
    ExpMismatch {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, value_delimiter = ',', default_value = "oracle,sft,mr,hpl")]
        methods: Vec<Method>,
        /// Policy whose segments are annotated.
        #[arg(long)]
        pref_policy: Option<String>,
        /// Policy that collects the unlabeled dataset.
        #[arg(long)]
        unlabeled_policy: Option<String>,
    },
    /// One pipeline per (value, seed) along a hyperparameter axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

enum Failure {
    Config(Error),
    Runtime(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

/// Config from `--config`, else the run directory's saved config, else
/// defaults; then `--seed` and `--set` applied in order.
fn resolve_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let saved = common.out.join(CONFIG_FILE);
    let path = common.config.as_deref().or_else(|| saved.exists().then_some(saved.as_path()));
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).map_err(Failure::Config)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for s in &common.set {
        cfg.apply_override(s).map_err(Failure::Config)?;
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

/// Gambling recipe with `vae.*`, `reward.*` and `data.num_unlabeled`
/// overrides taken from the generic config machinery.
fn gambling_config(common: &Common) -> Result<(GamblingConfig, u64), Failure> {
    let base = GamblingConfig::default();
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).map_err(Failure::Config)?,
        None => ExperimentConfig {
            vae: base.vae.clone(),
            reward: base.reward.clone(),
            seed: 0,
            ..ExperimentConfig::default()
        },
    };
    cfg.data.num_unlabeled = base.num_unlabeled;
    for s in &common.set {
        cfg.apply_override(s).map_err(Failure::Config)?;
    }
    cfg.vae.validate().map_err(Failure::Config)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    Ok((GamblingConfig { num_unlabeled: cfg.data.num_unlabeled, vae: cfg.vae, reward: cfg.reward }, seed))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData(c) => {
            let cfg = resolve_config(&c)?;
            pipeline::gen_data(&cfg, &c.out)?;
            println!("data written to {}", c.out.display());
        }
        Command::TrainVae(c) => {
            let cfg = resolve_config(&c)?;
            pipeline::train_vae_stage(&cfg, &c.out)?;
            println!("VAE written to {}", c.out.join(pipeline::VAE_DIR).display());
        }
        Command::TrainReward(c) => {
            let cfg = resolve_config(&c)?;
            for (i, d) in pipeline::train_reward_stage(&cfg, &c.out)?.iter().enumerate() {
                let acc = d.train_accuracy.map_or("n/a".to_string(), |a| format!("{a:.3}"));
                println!("member {i}: final loss {:.4}, train accuracy {acc}", d.final_loss);
            }
        }
        Command::Label(c) => {
            let cfg = resolve_config(&c)?;
            let data = pipeline::label_stage(&cfg, &c.out)?;
            println!("{} transitions labelled", data.transitions.len());
        }
        Command::TrainRl(c) => {
            let cfg = resolve_config(&c)?;
            pipeline::train_rl_stage(&cfg, &c.out)?;
            println!("policy written to {}", c.out.join(pipeline::POLICY_DIR).display());
        }
        Command::Eval(c) => {
            let cfg = resolve_config(&c)?;
            let s = pipeline::eval_stage(&cfg, &c.out)?;
            println!("mean return {:.4} ± {:.4} over {} episodes", s.mean_return, s.std_return, s.num_episodes);
        }
        Command::Pipeline(c) => {
            let cfg = resolve_config(&c)?;
            let o = pipeline::run_pipeline(&cfg, &c.out)?;
            println!("{}: mean return {:.4} ± {:.4}", cfg.method, o.eval.mean_return, o.eval.std_return);
        }
        Command::ExpGambling { common, num_seeds, check } => {
            let (cfg, seed) = gambling_config(&common)?;
            ensure_dir(&common.out)?;
            let s = cmd_exp_gambling(seed, num_seeds, &cfg, &common.out)?;
            println!(
                "{} seeds: all accurate {}, HPL prefers a2 {:.2}, MR prefers a1 {:.2}, failures {}",
                s.num_seeds, s.all_accurate, s.hpl_prefers_safe, s.mr_prefers_risky, s.failures
            );
            if check && !s.passes() {
                return Err(Failure::Check("gambling summary is below its thresholds".into()));
            }
        }
        Command::ExpMismatch { common, seeds, methods, pref_policy, unlabeled_policy } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(p) = pref_policy {
                cfg.set("data.pref_policy", &p).map_err(Failure::Config)?;
            }
            if let Some(p) = unlabeled_policy {
                cfg.set("data.behavior_policy", &p).map_err(Failure::Config)?;
            }
            ensure_dir(&common.out)?;
            let (_, report) = cmd_exp_mismatch(&cfg, &methods, seeds, &common.out)?;
            if report.no_shift {
                println!("no-shift control: both datasets come from {}", report.unlabeled_policy);
            }
            for m in &report.methods {
                println!("{}: {:.4} ± {:.4} ({} failed)", m.method, m.mean_return, m.std_across_seeds, m.failures);
            }
        }
        Command::Sweep { common, axis, values, seeds } => {
            let cfg = resolve_config(&common)?;
            ensure_dir(&common.out)?;
            let rows = cmd_sweep(&cfg, axis, &values, seeds, &common.out)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} runs, {failed} failed", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let informational = !e.use_stderr();
            let _ = e.print();
            return if informational { ExitCode::SUCCESS } else { ExitCode::from(EXIT_CONFIG) };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}
