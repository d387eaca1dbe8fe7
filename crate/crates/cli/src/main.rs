use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mabe::agent::{policy_checkpoint, train_mabe, ActionBox, TrainOptions};
use mabe::checkpoint::Checkpoint;
use mabe::dataset::{generate_dataset, read_dataset, write_csv, write_dataset, Dataset};
use mabe::dynamics::{train_dynamics, DynamicsEnsemble};
use mabe::env::{scripted_action, ControllerKind};
use mabe::experiment::{
    arm_agent_config, emit_metrics, evaluate_policy, evaluate_with, normalized_score, resolve_refs,
    run_ablation, run_pipeline, run_transfer, Arm, ExperimentConfig, RunContext, RunOutput, Trace,
};
use mabe::policy::GaussianPolicy;
use mabe::prior::{build_prior, PriorParams};
use mabe::rng::derive_seed;
use mabe::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mabe",
    version,
    about = "Offline model-based RL with adaptive behavioral priors"
)]
struct Cli {
    /// Experiment configuration (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run a single seed instead of the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: runs/<experiment name>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Recompute artifacts even when they already exist.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the offline dataset.
    GenData {
        /// Also write a CSV copy next to the binary file.
        #[arg(long)]
        csv: bool,
    },
    /// Train the dynamics ensemble.
    TrainDynamics {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fit the dataset Q-function and train the behavioral prior.
    TrainPrior {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a policy from a dataset, dynamics model and prior.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        dynamics: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ArmArg::Full)]
        arm: ArmArg,
    },
    /// Evaluate a policy checkpoint or a scripted controller.
    Eval {
        #[arg(long, conflicts_with = "controller")]
        policy: Option<PathBuf>,
        #[arg(long, value_enum)]
        controller: Option<ControllerArg>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Sample actions instead of using the policy mean.
        #[arg(long)]
        stochastic: bool,
    },
    /// Component ablation (full, no_prior, no_rl, no_uncertainty by default).
    Ablate,
    /// Cross-domain transfer arms.
    Transfer,
    /// End-to-end run of full MABE.
    Pipeline,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Full,
    NoPrior,
    NoRl,
    NoUncertainty,
}

impl From<ArmArg> for Arm {
    fn from(a: ArmArg) -> Self {
        match a {
            ArmArg::Full => Arm::Full,
            ArmArg::NoPrior => Arm::NoPrior,
            ArmArg::NoRl => Arm::NoRl,
            ArmArg::NoUncertainty => Arm::NoUncertainty,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Expert,
    Medium,
    Random,
}

struct Session {
    cfg: ExperimentConfig,
    out: PathBuf,
    force: bool,
}

impl Session {
    fn seed(&self) -> u64 {
        self.cfg.seeds[0]
    }

    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }

    /// True when `path` should be (re)computed.
    fn should_write(&self, path: &Path, stage: &str) -> bool {
        if path.exists() && !self.force {
            log::info!(
                "{stage}: {} exists, skipping (use --force to recompute)",
                path.display()
            );
            return false;
        }
        true
    }

    fn prepare(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn load_data(&self, given: &Option<PathBuf>) -> Result<Dataset> {
        read_dataset(self.path(given, "dataset.mabd"))
    }
}

fn gen_data(s: &Session, csv: bool) -> Result<()> {
    let path = s.out.join("dataset.mabd");
    if s.should_write(&path, "gen-data") {
        s.prepare()?;
        let d = generate_dataset(
            &s.cfg.env,
            s.cfg.data.recipe,
            s.cfg.data.size,
            derive_seed(s.seed(), 1),
        )?;
        write_dataset(&path, &d)?;
        println!(
            "wrote {} ({} transitions, {} trajectories)",
            path.display(),
            d.len(),
            d.num_trajectories()
        );
    }
    if csv {
        let d = read_dataset(&path)?;
        let csv_path = path.with_extension("csv");
        write_csv(&csv_path, &d)?;
        println!("wrote {}", csv_path.display());
    }
    Ok(())
}

fn train_dynamics_cmd(s: &Session, data: &Option<PathBuf>) -> Result<()> {
    let path = s.out.join("dynamics.mabm");
    if !s.should_write(&path, "train-dynamics") {
        return Ok(());
    }
    let d = s.load_data(data)?;
    let (e, logs) = train_dynamics(&d, &s.cfg.dynamics, derive_seed(s.seed(), 2))?;
    s.prepare()?;
    e.to_checkpoint().write(&path)?;
    for (i, l) in logs.iter().enumerate() {
        println!(
            "member {i}: holdout nll {:.4} after {} epochs",
            e.holdout_nll[i], l.epochs_run
        );
    }
    println!("elites {:?}; wrote {}", e.elites, path.display());
    Ok(())
}

fn train_prior_cmd(s: &Session, data: &Option<PathBuf>) -> Result<()> {
    let path = s.out.join("prior.mabm");
    if !s.should_write(&path, "train-prior") {
        return Ok(());
    }
    let d = s.load_data(data)?;
    let (p, q) = build_prior(
        &d,
        s.cfg.agent.gamma,
        &s.cfg.prior,
        derive_seed(s.seed(), 3),
    )?;
    s.prepare()?;
    if let Some(q) = q {
        q.to_checkpoint().write(s.out.join("q.mabm"))?;
    }
    p.to_checkpoint().write(&path)?;
    println!(
        "prior ({}) validation nll {:.4} (initial {:.4}); wrote {}",
        p.weighting.tag(),
        p.val_nll,
        p.init_val_nll,
        path.display()
    );
    Ok(())
}

fn train_cmd(
    s: &Session,
    data: &Option<PathBuf>,
    dynamics: &Option<PathBuf>,
    prior: &Option<PathBuf>,
    arm: Arm,
) -> Result<()> {
    let path = s.out.join("policy.mabm");
    if !s.should_write(&path, "train") {
        return Ok(());
    }
    let d = s.load_data(data)?;
    let e = DynamicsEnsemble::from_checkpoint(&Checkpoint::read_kind(
        s.path(dynamics, "dynamics.mabm"),
        "dynamics",
    )?)?;
    let p = PriorParams::from_checkpoint(&Checkpoint::read_kind(
        s.path(prior, "prior.mabm"),
        "prior",
    )?)?;
    let agent = arm_agent_config(arm, &s.cfg.agent);
    let opts = TrainOptions {
        action_box: Some(ActionBox {
            low: s.cfg.env.action_low.clone(),
            high: s.cfg.env.action_high.clone(),
        }),
    };
    let ev = &s.cfg.eval;
    let first_eval = agent.epochs.saturating_sub(ev.final_evals);
    let (policy, metrics) = train_mabe(
        &d,
        &e,
        &p,
        &agent,
        derive_seed(s.seed(), 4),
        &opts,
        |epoch, policy| {
            if epoch < first_eval {
                return Ok(None);
            }
            let r = evaluate_policy(
                &s.cfg.env,
                policy,
                ev.episodes,
                ev.deterministic,
                derive_seed(s.seed(), epoch as u64),
            )?;
            log::info!("epoch {epoch}: eval return {:.3}", r.mean());
            Ok(Some(r.mean()))
        },
    )?;
    s.prepare()?;
    policy_checkpoint(&policy, &metrics).write(&path)?;
    let refs = resolve_refs(&s.cfg, &s.cfg.env)?;
    let r = evaluate_policy(
        &s.cfg.env,
        &policy,
        ev.episodes,
        ev.deterministic,
        derive_seed(s.seed(), 0xe7a1),
    )?;
    let row = mabe::experiment::ResultRow {
        experiment: s.cfg.name.clone(),
        arm: arm.label().into(),
        seed: s.seed(),
        raw_return: r.mean(),
        return_std: r.std(),
        normalized_score: normalized_score(r.mean(), refs.random_ref, refs.expert_ref)?,
    };
    let trace = Trace {
        arm: arm.label().into(),
        seed: s.seed(),
        metrics,
    };
    emit_metrics(&[row.clone()], &[trace], &refs, &s.out)?;
    println!(
        "wrote {}; final return {:.3} ± {:.3} (normalized {:.1})",
        path.display(),
        row.raw_return,
        row.return_std,
        row.normalized_score
    );
    Ok(())
}

fn eval_cmd(
    s: &Session,
    policy: &Option<PathBuf>,
    controller: Option<ControllerArg>,
    episodes: Option<usize>,
    stochastic: bool,
) -> Result<()> {
    let env = &s.cfg.env;
    let episodes = episodes.unwrap_or(s.cfg.eval.episodes);
    let seed = derive_seed(s.seed(), 0xe7a1);
    let (label, r) = match controller {
        Some(c) => {
            let kind = match c {
                ControllerArg::Expert => ControllerKind::Expert,
                ControllerArg::Medium => ControllerKind::Medium,
                ControllerArg::Random => ControllerKind::Random,
            };
            let noise = if stochastic {
                kind.default_noise()
            } else {
                0.0
            };
            let r = evaluate_with(
                env,
                |obs, rng| scripted_action(kind, env, obs, noise, rng),
                episodes,
                seed,
            )?;
            (kind.tag().to_string(), r)
        }
        None => {
            let path = s.path(policy, "policy.mabm");
            let c = Checkpoint::read(&path)?;
            let p = match c.kind.as_str() {
                "prior" => PriorParams::from_checkpoint(&c)?.policy,
                _ => GaussianPolicy::from_checkpoint(&c)?,
            };
            (
                path.display().to_string(),
                evaluate_policy(env, &p, episodes, !stochastic, seed)?,
            )
        }
    };
    let refs = resolve_refs(&s.cfg, env)?;
    println!(
        "{label}: return {:.3} ± {:.3} over {episodes} episodes (normalized {:.1}; random {:.3}, expert {:.3})",
        r.mean(),
        r.std(),
        normalized_score(r.mean(), refs.random_ref, refs.expert_ref)?,
        refs.random_ref,
        refs.expert_ref
    );
    Ok(())
}

fn report(out: &RunOutput) {
    for (arm, mean, std, n) in mabe::experiment::arm_means(&out.rows) {
        println!("{arm:<16} {mean:>8.1} ± {std:<6.1} ({n} seeds)");
    }
    for f in &out.files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| e.in_stage("config"))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    let s = Session {
        cfg,
        out,
        force: cli.force,
    };
    let ctx = RunContext::new(&s.out, s.force);
    match &cli.command {
        Command::GenData { csv } => gen_data(&s, *csv).map_err(|e| e.in_stage("gen-data")),
        Command::TrainDynamics { data } => {
            train_dynamics_cmd(&s, data).map_err(|e| e.in_stage("train-dynamics"))
        }
        Command::TrainPrior { data } => {
            train_prior_cmd(&s, data).map_err(|e| e.in_stage("train-prior"))
        }
        Command::Train {
            data,
            dynamics,
            prior,
            arm,
        } => train_cmd(&s, data, dynamics, prior, (*arm).into()).map_err(|e| e.in_stage("train")),
        Command::Eval {
            policy,
            controller,
            episodes,
            stochastic,
        } => eval_cmd(&s, policy, *controller, *episodes, *stochastic)
            .map_err(|e| e.in_stage("eval")),
        Command::Ablate => run_ablation(&ctx, &s.cfg).map(|o| report(&o)),
        Command::Transfer => run_transfer(&ctx, &s.cfg).map(|o| report(&o)),
        Command::Pipeline => run_pipeline(&ctx, &s.cfg).map(|o| report(&o)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
