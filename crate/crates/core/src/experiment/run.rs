use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::agent::{train_mabe, ActionBox, AgentConfig, TrainMetrics, TrainOptions};
use crate::checkpoint::Checkpoint;
use crate::dataset::{generate_dataset, read_dataset, write_dataset, Dataset};
use crate::dynamics::{train_dynamics, DynamicsConfig, DynamicsEnsemble};
use crate::env::{EnvSpec, RewardSpec};
use crate::error::{Error, Result};
use crate::policy::GaussianPolicy;
use crate::prior::{build_prior, PriorConfig, PriorParams, Weighting};
use crate::rng::derive_seed;

use super::config::{DataConfig, ExperimentConfig, References};
use super::eval::{evaluate_policy, normalized_score, reference_scores, sample_std};
use super::metrics::{emit_metrics, ResultRow, Trace};
use super::Arm;

/// Where artifacts live and whether cached ones may be reused.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub out_dir: PathBuf,
    pub force: bool,
}

impl RunContext {
    pub fn new(out_dir: impl Into<PathBuf>, force: bool) -> Self {
        RunContext {
            out_dir: out_dir.into(),
            force,
        }
    }

    pub fn artifact_path(&self, stage: &str, hash: &str, ext: &str) -> PathBuf {
        self.out_dir
            .join("artifacts")
            .join(format!("{stage}-{hash}.{ext}"))
    }

    fn reusable(&self, path: &Path, stage: &str) -> bool {
        let hit = !self.force && path.exists();
        if hit {
            log::info!("{stage}: reusing {}", path.display());
        }
        hit
    }

    fn prepare(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }
}

/// Hex digest (16 chars) over labelled parts.
pub fn content_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn toml_of<T: serde::Serialize>(v: &T) -> String {
    toml::to_string(v).expect("config serializes")
}

/// A stage output with the hash that addresses it.
#[derive(Clone, Debug)]
pub struct Staged<T> {
    pub value: T,
    pub hash: String,
    pub path: PathBuf,
}

pub fn stage_dataset(
    ctx: &RunContext,
    env: &EnvSpec,
    data: &DataConfig,
    seed: u64,
) -> Result<Staged<Dataset>> {
    let hash = content_hash(&["dataset", &toml_of(env), &toml_of(data), &seed.to_string()]);
    let path = ctx.artifact_path("dataset", &hash, "mabd");
    let value = if ctx.reusable(&path, "gen-data") {
        read_dataset(&path)?
    } else {
        let d = generate_dataset(env, data.recipe, data.size, seed)?;
        ctx.prepare(&path)?;
        write_dataset(&path, &d)?;
        // Reload so fresh and cached runs see the same stored precision.
        read_dataset(&path)?
    };
    Ok(Staged { value, hash, path })
}

/// Dataset relabeled with another reward function (content-addressed).
pub fn stage_relabel(
    ctx: &RunContext,
    src: &Staged<Dataset>,
    env: &EnvSpec,
) -> Result<Staged<Dataset>> {
    let hash = content_hash(&[
        "relabel",
        &src.hash,
        &toml_of(&env.reward),
        &env.action_penalty.to_string(),
    ]);
    let path = ctx.artifact_path("dataset", &hash, "mabd");
    let value = if ctx.reusable(&path, "relabel") {
        read_dataset(&path)?
    } else {
        let d = src
            .value
            .relabeled(|next, a| env.reward(next, a))
            .with_meta("relabeled_from", &src.hash);
        ctx.prepare(&path)?;
        write_dataset(&path, &d)?;
        read_dataset(&path)?
    };
    Ok(Staged { value, hash, path })
}

pub fn stage_dynamics(
    ctx: &RunContext,
    d: &Staged<Dataset>,
    cfg: &DynamicsConfig,
    seed: u64,
) -> Result<Staged<DynamicsEnsemble>> {
    let hash = content_hash(&["dynamics", &d.hash, &toml_of(cfg), &seed.to_string()]);
    let path = ctx.artifact_path("dynamics", &hash, "mabm");
    let value = if ctx.reusable(&path, "train-dynamics") {
        DynamicsEnsemble::from_checkpoint(&Checkpoint::read_kind(&path, "dynamics")?)?
    } else {
        let (e, _) = train_dynamics(&d.value, cfg, seed)?;
        ctx.prepare(&path)?;
        let mut c = e.to_checkpoint();
        c.set_meta("dataset", &d.hash);
        c.write(&path)?;
        e
    };
    Ok(Staged { value, hash, path })
}

pub fn stage_prior(
    ctx: &RunContext,
    d: &Staged<Dataset>,
    cfg: &PriorConfig,
    gamma: f64,
    seed: u64,
) -> Result<Staged<PriorParams>> {
    let hash = content_hash(&[
        "prior",
        &d.hash,
        &toml_of(cfg),
        &gamma.to_string(),
        &seed.to_string(),
    ]);
    let path = ctx.artifact_path("prior", &hash, "mabm");
    let value = if ctx.reusable(&path, "train-prior") {
        PriorParams::from_checkpoint(&Checkpoint::read_kind(&path, "prior")?)?
    } else {
        let (p, q) = build_prior(&d.value, gamma, cfg, seed)?;
        ctx.prepare(&path)?;
        if let Some(q) = q {
            q.to_checkpoint()
                .write(ctx.artifact_path("q", &hash, "mabm"))?;
        }
        let mut c = p.to_checkpoint();
        c.set_meta("dataset", &d.hash);
        c.write(&path)?;
        p
    };
    Ok(Staged { value, hash, path })
}

/// Everything one trained arm needs.
pub struct ArmInputs<'a> {
    pub arm: Arm,
    pub data: &'a Staged<Dataset>,
    pub model: &'a Staged<DynamicsEnsemble>,
    pub prior: &'a Staged<PriorParams>,
    pub agent: AgentConfig,
    pub train_env: &'a EnvSpec,
    pub eval_env: &'a EnvSpec,
    /// Hash of the dataset the dynamics model was trained on.
    pub model_source: Option<String>,
    /// Hash of the dataset the prior was trained on.
    pub prior_source: Option<String>,
}

/// Trained (or cached) policy, traces and final evaluation returns.
#[derive(Clone, Debug)]
pub struct ArmOutcome {
    pub policy: GaussianPolicy,
    pub metrics: TrainMetrics,
    pub returns: Vec<f64>,
    pub hash: String,
}

const CURVES: [&str; 6] = [
    "critic_loss",
    "policy_obj",
    "mean_kl",
    "beta",
    "buffer_size",
    "eval_return",
];

fn store_run(c: &mut Checkpoint, m: &TrainMetrics, returns: &[f64]) {
    let columns: [Vec<f64>; 6] = [
        m.critic_loss.clone(),
        m.policy_obj.clone(),
        m.mean_kl.clone(),
        m.beta.clone(),
        m.buffer_size.iter().map(|&v| v as f64).collect(),
        m.eval_return.clone(),
    ];
    for (name, col) in CURVES.iter().zip(columns) {
        c.push(format!("curve.{name}"), vec![col.len()], col);
    }
    c.push("eval.returns", vec![returns.len()], returns.to_vec());
}

fn load_run(c: &Checkpoint) -> Result<(TrainMetrics, Vec<f64>)> {
    let col = |name: &str| c.tensor(&format!("curve.{name}")).map(|t| t.data.clone());
    let m = TrainMetrics {
        critic_loss: col("critic_loss")?,
        policy_obj: col("policy_obj")?,
        mean_kl: col("mean_kl")?,
        beta: col("beta")?,
        buffer_size: col("buffer_size")?
            .into_iter()
            .map(|v| v as usize)
            .collect(),
        eval_return: col("eval_return")?,
        ..Default::default()
    };
    Ok((m, c.tensor("eval.returns")?.data.clone()))
}

fn eval_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, 0xe7a1_0000 + k as u64)
}

pub fn stage_policy(
    ctx: &RunContext,
    cfg: &ExperimentConfig,
    inputs: &ArmInputs,
    seed: u64,
) -> Result<ArmOutcome> {
    let hash = content_hash(&[
        "policy",
        inputs.arm.label(),
        &inputs.data.hash,
        &inputs.model.hash,
        &inputs.prior.hash,
        &toml_of(&inputs.agent),
        &toml_of(&cfg.eval),
        &toml_of(inputs.train_env),
        &toml_of(inputs.eval_env),
        &seed.to_string(),
    ]);
    let path = ctx.artifact_path("policy", &hash, "mabm");
    if ctx.reusable(&path, "train") {
        let c = Checkpoint::read_kind(&path, "policy")?;
        let (metrics, returns) = load_run(&c)?;
        return Ok(ArmOutcome {
            policy: GaussianPolicy::from_checkpoint(&c)?,
            metrics,
            returns,
            hash,
        });
    }
    let ev = &cfg.eval;
    let mut returns = Vec::new();
    let (policy, metrics) = if inputs.agent.no_rl {
        for k in 0..ev.final_evals {
            let r = evaluate_policy(
                inputs.eval_env,
                &inputs.prior.value.policy,
                ev.episodes,
                ev.deterministic,
                eval_seed(seed, k),
            )?;
            returns.extend(r.returns);
        }
        (inputs.prior.value.policy.clone(), TrainMetrics::default())
    } else {
        let n = inputs.agent.epochs;
        let first_eval = n.saturating_sub(ev.final_evals);
        let opts = TrainOptions {
            action_box: Some(ActionBox {
                low: inputs.train_env.action_low.clone(),
                high: inputs.train_env.action_high.clone(),
            }),
        };
        let (policy, metrics) = train_mabe(
            &inputs.data.value,
            &inputs.model.value,
            &inputs.prior.value,
            &inputs.agent,
            derive_seed(seed, 4),
            &opts,
            |epoch, policy| {
                if epoch < first_eval {
                    return Ok(None);
                }
                let r = evaluate_policy(
                    inputs.eval_env,
                    policy,
                    ev.episodes,
                    ev.deterministic,
                    eval_seed(seed, epoch - first_eval),
                )?;
                let mean = r.mean();
                returns.extend(r.returns);
                Ok(Some(mean))
            },
        )?;
        if n == 0 {
            let r = evaluate_policy(
                inputs.eval_env,
                &policy,
                ev.episodes,
                ev.deterministic,
                eval_seed(seed, 0),
            )?;
            returns.extend(r.returns);
        }
        (policy, metrics)
    };
    ctx.prepare(&path)?;
    let mut c = crate::agent::policy_checkpoint(&policy, &metrics);
    c.set_meta("arm", inputs.arm.label());
    c.set_meta("dataset", &inputs.data.hash);
    c.set_meta("dynamics", &inputs.model.hash);
    c.set_meta("prior", &inputs.prior.hash);
    store_run(&mut c, &metrics, &returns);
    c.write(&path)?;
    Ok(ArmOutcome {
        policy,
        metrics,
        returns,
        hash,
    })
}

/// Artifact hashes an arm was trained from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub arm: Arm,
    pub seed: u64,
    /// Dataset the agent trained on (synthetic-rollout starts and real batch).
    pub agent_data: String,
    pub dynamics_data: String,
    pub prior_data: String,
    pub dynamics: String,
    pub prior: String,
    pub policy: String,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub traces: Vec<Trace>,
    pub refs: References,
    pub provenance: Vec<Provenance>,
    pub files: Vec<PathBuf>,
}

fn finish(
    ctx: &RunContext,
    cfg: &ExperimentConfig,
    refs: References,
    results: Vec<(Arm, u64, ArmOutcome, Provenance)>,
) -> Result<RunOutput> {
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut provenance = Vec::new();
    for (arm, seed, out, prov) in results {
        let raw = out.returns.iter().sum::<f64>() / out.returns.len().max(1) as f64;
        rows.push(ResultRow {
            experiment: cfg.name.clone(),
            arm: arm.label().to_string(),
            seed,
            raw_return: raw,
            return_std: sample_std(&out.returns),
            normalized_score: normalized_score(raw, refs.random_ref, refs.expert_ref)?,
        });
        traces.push(Trace {
            arm: arm.label().to_string(),
            seed,
            metrics: out.metrics,
        });
        provenance.push(prov);
    }
    let mut files =
        emit_metrics(&rows, &traces, &refs, &ctx.out_dir).map_err(|e| e.in_stage("emit"))?;
    let mut resolved = cfg.clone();
    resolved.refs = Some(refs);
    let echo = ctx.out_dir.join("config.toml");
    std::fs::write(&echo, resolved.to_toml()).map_err(|e| Error::io(&echo, e))?;
    files.push(echo);
    rows.sort_by(|a, b| (&a.arm, a.seed).cmp(&(&b.arm, b.seed)));
    traces.sort_by(|a, b| (&a.arm, a.seed).cmp(&(&b.arm, b.seed)));
    Ok(RunOutput {
        rows,
        traces,
        refs,
        provenance,
        files,
    })
}

pub fn resolve_refs(cfg: &ExperimentConfig, env: &EnvSpec) -> Result<References> {
    match cfg.refs {
        Some(r) => Ok(r),
        None => reference_scores(env, cfg.eval.reference_episodes),
    }
}

fn provenance(arm: Arm, seed: u64, i: &ArmInputs, out: &ArmOutcome) -> Provenance {
    Provenance {
        arm,
        seed,
        agent_data: i.data.hash.clone(),
        dynamics_data: i.model_data_hash(),
        prior_data: i.prior_data_hash(),
        dynamics: i.model.hash.clone(),
        prior: i.prior.hash.clone(),
        policy: out.hash.clone(),
    }
}

impl ArmInputs<'_> {
    fn model_data_hash(&self) -> String {
        self.model_source.clone().unwrap_or_default()
    }

    fn prior_data_hash(&self) -> String {
        self.prior_source.clone().unwrap_or_default()
    }
}

/// Shared per-seed artifacts for the single-domain harnesses.
struct SeedArtifacts {
    data: Staged<Dataset>,
    model: Staged<DynamicsEnsemble>,
    prior: Staged<PriorParams>,
}

fn seed_artifacts(
    ctx: &RunContext,
    cfg: &ExperimentConfig,
    prior_cfg: &PriorConfig,
    seed: u64,
) -> Result<SeedArtifacts> {
    let data = stage_dataset(ctx, &cfg.env, &cfg.data, derive_seed(seed, 1))
        .map_err(|e| e.in_stage("gen-data"))?;
    let model = stage_dynamics(ctx, &data, &cfg.dynamics, derive_seed(seed, 2))
        .map_err(|e| e.in_stage("train-dynamics"))?;
    let prior = stage_prior(ctx, &data, prior_cfg, cfg.agent.gamma, derive_seed(seed, 3))
        .map_err(|e| e.in_stage("train-prior"))?;
    Ok(SeedArtifacts { data, model, prior })
}

/// Agent settings for a single-domain arm.
pub fn arm_agent_config(arm: Arm, base: &AgentConfig) -> AgentConfig {
    let mut a = base.clone();
    match arm {
        Arm::NoPrior | Arm::TransferI => {
            a.no_prior = true;
            a.init_from_prior = false;
        }
        Arm::NoRl => a.no_rl = true,
        Arm::NoUncertainty => a.xi = 0.0,
        Arm::TransferIii => {
            a.no_prior = true;
            a.init_from_prior = true;
        }
        Arm::Full | Arm::Unweighted | Arm::TransferIi | Arm::TransferIv => {}
    }
    a
}

/// Runs the given single-domain arms for every seed.
pub fn run_arms(ctx: &RunContext, cfg: &ExperimentConfig, arms: &[Arm]) -> Result<RunOutput> {
    cfg.validate()?;
    if let Some(a) = arms.iter().find(|a| a.is_transfer()) {
        return Err(Error::Config(format!("{} is a transfer arm", a.label())));
    }
    let refs = resolve_refs(cfg, &cfg.env).map_err(|e| e.in_stage("references"))?;
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let shared = seed_artifacts(ctx, cfg, &cfg.prior, seed)?;
        let uniform = if arms.contains(&Arm::Unweighted) {
            let p = PriorConfig {
                weighting: Weighting::Uniform,
                ..cfg.prior.clone()
            };
            Some(
                stage_prior(ctx, &shared.data, &p, cfg.agent.gamma, derive_seed(seed, 3))
                    .map_err(|e| e.in_stage("train-prior"))?,
            )
        } else {
            None
        };
        for &arm in arms {
            let prior = match arm {
                Arm::Unweighted => uniform.as_ref().expect("staged above"),
                _ => &shared.prior,
            };
            let inputs = ArmInputs {
                arm,
                data: &shared.data,
                model: &shared.model,
                prior,
                agent: arm_agent_config(arm, &cfg.agent),
                train_env: &cfg.env,
                eval_env: &cfg.env,
                model_source: Some(shared.data.hash.clone()),
                prior_source: Some(shared.data.hash.clone()),
            };
            let out = stage_policy(ctx, cfg, &inputs, seed).map_err(|e| e.in_stage("train"))?;
            let prov = provenance(arm, seed, &inputs, &out);
            results.push((arm, seed, out, prov));
        }
    }
    finish(ctx, cfg, refs, results)
}

/// Full MABE for every seed.
pub fn run_pipeline(ctx: &RunContext, cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_arms(ctx, cfg, &[Arm::Full])
}

/// Component ablation over `cfg.ablation.arms`.
pub fn run_ablation(ctx: &RunContext, cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_arms(ctx, cfg, &cfg.ablation.arms)
}

fn with_domain(base: &EnvSpec, friction: f64, direction: [f64; 2]) -> EnvSpec {
    EnvSpec {
        friction,
        reward: RewardSpec::Directional {
            direction: direction.to_vec(),
        },
        ..base.clone()
    }
}

/// Cross-domain transfer: forward data under normal friction (`D₁`) and
/// backward data under shifted friction (`D₂`); every arm is scored on the
/// backward task under normal friction.
pub fn run_transfer(ctx: &RunContext, cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let t = &cfg.transfer;
    let source_env = with_domain(&cfg.env, t.normal_friction, t.source_direction);
    let target_env = with_domain(&cfg.env, t.normal_friction, t.target_direction);
    let prior_env = with_domain(&cfg.env, t.shifted_friction, t.target_direction);
    source_env.validate()?;
    prior_env.validate()?;
    let refs = resolve_refs(cfg, &target_env).map_err(|e| e.in_stage("references"))?;
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let d1_cfg = DataConfig {
            recipe: t.source_recipe,
            size: t.source_size,
        };
        let d2_cfg = DataConfig {
            recipe: t.prior_recipe,
            size: t.prior_size,
        };
        let d1 = stage_dataset(ctx, &source_env, &d1_cfg, derive_seed(seed, 11))
            .map_err(|e| e.in_stage("gen-data"))?;
        let d1 = stage_relabel(ctx, &d1, &target_env).map_err(|e| e.in_stage("gen-data"))?;
        let d2 = stage_dataset(ctx, &prior_env, &d2_cfg, derive_seed(seed, 12))
            .map_err(|e| e.in_stage("gen-data"))?;
        let m1 = stage_dynamics(ctx, &d1, &cfg.dynamics, derive_seed(seed, 2))
            .map_err(|e| e.in_stage("train-dynamics"))?;
        let p2 = stage_prior(ctx, &d2, &cfg.prior, cfg.agent.gamma, derive_seed(seed, 3))
            .map_err(|e| e.in_stage("train-prior"))?;
        let m2 = if t.arms.contains(&Arm::TransferIi) {
            Some(
                stage_dynamics(ctx, &d2, &cfg.dynamics, derive_seed(seed, 2))
                    .map_err(|e| e.in_stage("train-dynamics"))?,
            )
        } else {
            None
        };
        for &arm in &t.arms {
            let (data, model, model_source, train_env) = match arm {
                Arm::TransferIi => (
                    &d2,
                    m2.as_ref().expect("staged above"),
                    &d2.hash,
                    &prior_env,
                ),
                Arm::TransferI | Arm::TransferIii | Arm::TransferIv => {
                    (&d1, &m1, &d1.hash, &target_env)
                }
                other => {
                    return Err(Error::Config(format!(
                        "{} is not a transfer arm",
                        other.label()
                    )))
                }
            };
            let inputs = ArmInputs {
                arm,
                data,
                model,
                prior: &p2,
                agent: arm_agent_config(arm, &cfg.agent),
                train_env,
                eval_env: &target_env,
                model_source: Some(model_source.clone()),
                prior_source: Some(d2.hash.clone()),
            };
            let out = stage_policy(ctx, cfg, &inputs, seed).map_err(|e| e.in_stage("train"))?;
            let prov = provenance(arm, seed, &inputs, &out);
            results.push((arm, seed, out, prov));
        }
    }
    finish(ctx, cfg, refs, results)
}
