use crate::env::{rollout_episode, scripted_action, ControllerKind, EnvSpec};
use crate::error::{Error, Result};
use crate::policy::GaussianPolicy;
use crate::rng::{derive_seed, Rng};

use super::config::References;

/// Undiscounted returns of an evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub returns: Vec<f64>,
}

impl EvalResult {
    pub fn mean(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }

    /// Sample standard deviation (0 for a single episode).
    pub fn std(&self) -> f64 {
        sample_std(&self.returns)
    }
}

pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Runs `episodes` full episodes; episode `i` uses seed `derive_seed(seed, i)`.
pub fn evaluate_with<P>(
    spec: &EnvSpec,
    mut policy: P,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult>
where
    P: FnMut(&[f64], &mut Rng) -> Vec<f64>,
{
    if episodes == 0 {
        return Err(Error::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    let returns = (0..episodes)
        .map(|i| {
            rollout_episode(spec, &mut policy, spec.horizon, derive_seed(seed, i as u64))
                .map(|t| t.undiscounted_return())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult { returns })
}

/// Evaluates a Gaussian policy with mean actions (or samples).
pub fn evaluate_policy(
    spec: &EnvSpec,
    policy: &GaussianPolicy,
    episodes: usize,
    deterministic: bool,
    seed: u64,
) -> Result<EvalResult> {
    let mut failure = None;
    let res = evaluate_with(
        spec,
        |obs, r| match policy.act(obs, deterministic, r) {
            Ok(a) => a,
            Err(e) => {
                failure.get_or_insert(e);
                vec![0.0; policy.act_dim()]
            }
        },
        episodes,
        seed,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(res),
    }
}

/// `100·(raw − random)/(expert − random)`.
pub fn normalized_score(raw: f64, random_ref: f64, expert_ref: f64) -> Result<f64> {
    let span = expert_ref - random_ref;
    if !(span.abs() > 0.0) || !span.is_finite() {
        return Err(Error::Config(format!(
            "degenerate reference scores (random {random_ref}, expert {expert_ref})"
        )));
    }
    Ok(100.0 * (raw - random_ref) / span)
}

/// Mean returns of the uniform-random and noise-free expert controllers.
pub fn reference_scores(spec: &EnvSpec, episodes: usize) -> Result<References> {
    const SEED: u64 = 0x00ef_5c0e;
    let run = |kind: ControllerKind| {
        evaluate_with(
            spec,
            |obs, r| scripted_action(kind, spec, obs, 0.0, r),
            episodes,
            derive_seed(SEED, kind as u64),
        )
    };
    let refs = References {
        random_ref: run(ControllerKind::Random)?.mean(),
        expert_ref: run(ControllerKind::Expert)?.mean(),
    };
    if !(refs.expert_ref > refs.random_ref) {
        return Err(Error::Config(format!(
            "expert reference {} does not exceed random reference {}",
            refs.expert_ref, refs.random_ref
        )));
    }
    Ok(refs)
}
