//! Behavior-regularized actor-critic trained on model rollouts.
//!
//! The policy maximizes `min Q(s, a) − β·KL(π(·|s) ‖ p(·|s))` while `β` is
//! adapted by dual ascent so the measured divergence tracks a target `δ`.

use std::time::Instant;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{AugmentedBuffer, Batch, Dataset, Normalizer};
use crate::dynamics::DynamicsEnsemble;
use crate::error::{Error, Result};
use crate::numeric::{kl_rows, polyak, AdamConfig, AdamState, Head, Mlp, MlpGrads};
use crate::policy::GaussianPolicy;
use crate::prior::PriorParams;
use crate::rng::{derive_seed, rng, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub epochs: usize,
    /// Rollout branches per epoch.
    pub branches: usize,
    pub horizon: usize,
    pub grad_steps: usize,
    pub batch_size: usize,
    pub real_fraction: f64,
    pub gamma: f64,
    pub lr_policy: f64,
    pub lr_critic: f64,
    pub lr_beta: f64,
    pub tau: f64,
    pub beta_init: f64,
    /// Target divergence `δ`.
    pub delta: f64,
    /// Uncertainty penalty coefficient; 0 disables the penalty.
    pub xi: f64,
    pub twin_q: bool,
    pub entropy_coef: f64,
    pub hidden: Vec<usize>,
    /// Synthetic buffer capacity; 0 means 100 × dataset size.
    pub buffer_capacity: usize,
    /// Drop the behavioral prior: no KL terms, `β` frozen at 0.
    pub no_prior: bool,
    /// Return the prior itself without any training.
    pub no_rl: bool,
    /// Start the policy from the prior's parameters rather than from a
    /// fresh initialization.
    pub init_from_prior: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            epochs: 100,
            branches: 400,
            horizon: 5,
            grad_steps: 200,
            batch_size: 256,
            real_fraction: 0.05,
            gamma: 0.99,
            lr_policy: 3e-4,
            lr_critic: 3e-4,
            lr_beta: 1e-2,
            tau: 5e-3,
            beta_init: 1.0,
            delta: 0.5,
            xi: 1.0,
            twin_q: true,
            entropy_coef: 0.0,
            hidden: vec![64, 64],
            buffer_capacity: 0,
            no_prior: false,
            no_rl: false,
            init_from_prior: true,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("agent discount must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("polyak rate must lie in [0, 1]");
        }
        if !(self.delta > 0.0) || !(self.lr_beta > 0.0) {
            return bad("target divergence and dual learning rate must be positive");
        }
        if self.beta_init < 0.0 || self.xi < 0.0 || self.entropy_coef < 0.0 {
            return bad("beta_init, xi and entropy_coef must be non-negative");
        }
        if self.batch_size == 0 || self.horizon == 0 {
            return bad("batch size and rollout horizon must be positive");
        }
        if !(0.0..=1.0).contains(&self.real_fraction) {
            return bad("real fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Per-epoch training traces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMetrics {
    pub critic_loss: Vec<f64>,
    pub policy_obj: Vec<f64>,
    pub mean_kl: Vec<f64>,
    /// `β` at the end of each epoch.
    pub beta: Vec<f64>,
    pub buffer_size: Vec<usize>,
    /// NaN when the epoch was not evaluated.
    pub eval_return: Vec<f64>,
    pub wall_clock: Vec<f64>,
    /// `β` after every gradient step.
    pub beta_steps: Vec<f64>,
    /// Batch-mean KL measured at every gradient step.
    pub kl_steps: Vec<f64>,
}

impl TrainMetrics {
    pub fn epochs(&self) -> usize {
        self.critic_loss.len()
    }
}

pub fn penalized_reward(r: f64, u: f64, xi: f64) -> f64 {
    r - xi * u
}

/// Dual ascent on `β` toward `KL = δ`, clamped at zero.
pub fn update_beta(beta: f64, measured_kl: f64, delta: f64, lr_beta: f64) -> f64 {
    (beta + lr_beta * (measured_kl - delta)).max(0.0)
}

/// Action box applied before any critic or model query.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

/// Critic inputs `normalized(s) ⊕ clip(a)` and the mask of unclipped
/// action coordinates (where `∂clip/∂a = 1`).
pub fn critic_input(
    norm: &Normalizer,
    obs: &Array2<f64>,
    act: &Array2<f64>,
    clip: Option<&ActionBox>,
) -> (Array2<f64>, Array2<f64>) {
    let mut a = act.clone();
    let mut mask = Array2::ones(act.raw_dim());
    if let Some(b) = clip {
        for ((i, j), v) in a.indexed_iter_mut() {
            if *v < b.low[j] || *v > b.high[j] {
                *v = v.clamp(b.low[j], b.high[j]);
                mask[[i, j]] = 0.0;
            }
        }
    }
    (concatenate![Axis(1), norm.apply_rows(obs), a], mask)
}

/// Critic ensemble sharing input normalization and output scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Critics {
    pub nets: Vec<Mlp<f64>>,
    pub obs_norm: Normalizer,
    pub q_scale: f64,
    pub clip: Option<ActionBox>,
}

impl Critics {
    /// Per-critic Q values, `(critics × n)`.
    pub fn values(&self, obs: &Array2<f64>, act: &Array2<f64>) -> Result<Array2<f64>> {
        let (x, _) = critic_input(&self.obs_norm, obs, act, self.clip.as_ref());
        let mut out = Array2::zeros((self.nets.len(), obs.nrows()));
        for (k, net) in self.nets.iter().enumerate() {
            let q = net.forward_batch(x.view())?;
            out.row_mut(k)
                .assign(&(q.column(0).to_owned() * self.q_scale));
        }
        Ok(out)
    }

    pub fn min_values(&self, obs: &Array2<f64>, act: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self
            .values(obs, act)?
            .fold_axis(Axis(0), f64::INFINITY, |a, &b| a.min(b)))
    }

    /// `min_k Q_k(s, a)` and its gradient w.r.t. the raw actions.
    pub fn min_values_and_action_grad(
        &self,
        obs: &Array2<f64>,
        act: &Array2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let (x, mask) = critic_input(&self.obs_norm, obs, act, self.clip.as_ref());
        let n = obs.nrows();
        let od = obs.ncols();
        let mut best = Array1::from_elem(n, f64::INFINITY);
        let mut grad = Array2::zeros(act.raw_dim());
        for net in &self.nets {
            let (q, trace) = net.forward_train(x.view())?;
            let (_, dx) = net.backward(&trace, Array2::from_elem((n, 1), self.q_scale).view());
            for i in 0..n {
                let v = q[[i, 0]] * self.q_scale;
                if v < best[i] {
                    best[i] = v;
                    grad.row_mut(i).assign(&dx.slice(s![i, od..]));
                }
            }
        }
        Ok((best, grad * mask))
    }
}

/// Gradients of `½·mean((Q(s,a) − y)²)` for one critic, in raw Q units.
pub fn critic_loss_and_grads(
    net: &Mlp<f64>,
    q_scale: f64,
    inputs: &Array2<f64>,
    targets: &Array1<f64>,
) -> Result<(f64, MlpGrads<f64>)> {
    net.loss_gradients(inputs.view(), |i, out| {
        let e = out[0] * q_scale - targets[i];
        (0.5 * e * e, Array1::from_elem(1, e * q_scale))
    })
}

/// Policy objective on a batch with explicit reparameterization noise.
pub struct PolicyObjective {
    /// `mean(min Q(s, a_θ) − β·KL − α·log π(a_θ|s))`.
    pub objective: f64,
    pub mean_kl: f64,
    /// Gradient of the negated objective (a loss to descend).
    pub grads: MlpGrads<f64>,
}

pub fn policy_objective(
    policy: &GaussianPolicy,
    critics: &Critics,
    prior: Option<(&Array2<f64>, &Array2<f64>)>,
    beta: f64,
    entropy_coef: f64,
    obs: &Array2<f64>,
    noise: &Array2<f64>,
) -> Result<PolicyObjective> {
    let n = obs.nrows();
    if n == 0 {
        return Err(Error::Config("empty policy batch".into()));
    }
    let x = policy.obs_norm.apply_rows(obs);
    let (raw, trace) = policy.net.forward_train(x.view())?;
    let (mean, log_std) = policy.net.split_gaussian(&raw);
    let std = log_std.mapv(f64::exp);
    let act = &mean + &(&std * noise);
    let (q, dq_da) = critics.min_values_and_action_grad(obs, &act)?;
    let mut d_mean = dq_da.clone();
    let mut d_log_std = &dq_da * &std * noise;
    let mut total = q.sum();
    let mut mean_kl = 0.0;
    if let Some((pm, pls)) = prior {
        let (kl, dkl_m, dkl_ls) = kl_rows(mean.view(), log_std.view(), pm.view(), pls.view());
        mean_kl = kl.mean().unwrap_or(0.0);
        if beta != 0.0 {
            total -= beta * kl.sum();
            d_mean = d_mean - dkl_m * beta;
            d_log_std = d_log_std - dkl_ls * beta;
        }
    }
    if entropy_coef != 0.0 {
        // log π(μ + σε) = Σ(−½ε² − log σ) − k·½ln2π, so ∂/∂log σ = −1.
        let k = mean.ncols() as f64;
        let lp: f64 = noise.mapv(|e| -0.5 * e * e).sum()
            - log_std.sum()
            - n as f64 * k * crate::numeric::scalar::half_ln_two_pi::<f64>();
        total -= entropy_coef * lp;
        d_log_std = d_log_std + entropy_coef;
    }
    let scale = -1.0 / n as f64;
    let g =
        policy
            .net
            .gaussian_output_grad(&raw, (d_mean * scale).view(), (d_log_std * scale).view());
    let (grads, _) = policy.net.backward(&trace, g.view());
    if !total.is_finite() {
        return Err(Error::NonFinite {
            what: "policy objective",
            index: 0,
        });
    }
    Ok(PolicyObjective {
        objective: total / n as f64,
        mean_kl,
        grads,
    })
}

/// Everything the actor-critic updates.
pub struct AgentState {
    pub policy: GaussianPolicy,
    pub critics: Critics,
    pub targets: Vec<Mlp<f64>>,
    pub beta: f64,
    pub cfg: AgentConfig,
    policy_opt: AdamState<f64>,
    critic_opts: Vec<AdamState<f64>>,
}

/// Outcome of one gradient step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub critic_loss: f64,
    pub policy_obj: f64,
    pub mean_kl: f64,
}

impl AgentState {
    /// `obs_norm` normalizes critic inputs and, unless the policy starts
    /// from the prior, policy inputs.
    pub fn new(
        prior: &PriorParams,
        cfg: &AgentConfig,
        obs_norm: Normalizer,
        q_scale: f64,
        clip: Option<ActionBox>,
        r: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let od = prior.policy.net.input_dim();
        let ad = prior.policy.act_dim();
        let policy = if cfg.init_from_prior {
            prior.policy.clone()
        } else {
            let mut sizes = vec![od];
            sizes.extend(&cfg.hidden);
            sizes.push(ad);
            let p = &prior.policy.net;
            GaussianPolicy {
                net: Mlp::new(&sizes, Head::GaussianTwoHead, r)?
                    .with_log_std_bounds(p.log_std_min, p.log_std_max),
                obs_norm: obs_norm.clone(),
            }
        };
        let mut sizes = vec![od + ad];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        let n_critics = if cfg.twin_q { 2 } else { 1 };
        let nets = (0..n_critics)
            .map(|_| Mlp::new(&sizes, Head::Linear, r))
            .collect::<Result<Vec<_>>>()?;
        let critic_opts = nets
            .iter()
            .map(|n| AdamState::new(n, AdamConfig::with_lr(cfg.lr_critic)))
            .collect();
        Ok(AgentState {
            policy_opt: AdamState::new(&policy.net, AdamConfig::with_lr(cfg.lr_policy)),
            targets: nets.clone(),
            critics: Critics {
                nets,
                obs_norm,
                q_scale,
                clip,
            },
            policy,
            beta: if cfg.no_prior { 0.0 } else { cfg.beta_init },
            cfg: cfg.clone(),
            critic_opts,
        })
    }

    fn target_critics(&self) -> Critics {
        Critics {
            nets: self.targets.clone(),
            ..self.critics.clone()
        }
    }

    /// `y = r + γ(1−done)[min Q̄(s′, a′) − β·KL(π(s′) ‖ p(s′)) − α·log π(a′|s′)]`
    /// with `a′` sampled from the current policy.
    /// β and the entropy coefficient are measured in units of the return
    /// scale, so the same δ and β trace work across reward magnitudes.
    pub fn kl_weight(&self) -> f64 {
        self.beta * self.critics.q_scale
    }

    pub fn critic_target(
        &self,
        batch: &Batch,
        prior: &PriorParams,
        r: &mut Rng,
    ) -> Result<Array1<f64>> {
        let (m, ls) = self.policy.dist_rows(&batch.next_obs)?;
        let noise =
            Array2::from_shape_simple_fn(m.raw_dim(), || r.sample::<f64, _>(StandardNormal));
        let a = &m + &(ls.mapv(f64::exp) * &noise);
        let mut v = self.target_critics().min_values(&batch.next_obs, &a)?;
        if !self.cfg.no_prior && self.beta != 0.0 {
            let (pm, pls) = prior.dist_rows(&batch.next_obs)?;
            let (kl, _, _) = kl_rows(m.view(), ls.view(), pm.view(), pls.view());
            v = v - kl * self.kl_weight();
        }
        if self.cfg.entropy_coef != 0.0 {
            let k = m.ncols() as f64;
            let c = crate::numeric::scalar::half_ln_two_pi::<f64>();
            let lp = (noise.mapv(|e| -0.5 * e * e) - &ls).sum_axis(Axis(1)) - k * c;
            v = v - lp * (self.cfg.entropy_coef * self.critics.q_scale);
        }
        let cont = batch.dones.mapv(|d| self.cfg.gamma * (1.0 - d));
        Ok(&batch.rewards + &(cont * v))
    }

    /// One optimizer step per critic toward shared targets; returns the
    /// mean loss before the step.
    pub fn update_critic(&mut self, batch: &Batch, targets: &Array1<f64>) -> Result<f64> {
        let (x, _) = critic_input(
            &self.critics.obs_norm,
            &batch.obs,
            &batch.actions,
            self.critics.clip.as_ref(),
        );
        let mut total = 0.0;
        for (net, opt) in self.critics.nets.iter_mut().zip(&mut self.critic_opts) {
            let (loss, g) = critic_loss_and_grads(net, self.critics.q_scale, &x, targets)?;
            opt.step(net, &g)?;
            total += loss;
        }
        Ok(total / self.critics.nets.len() as f64)
    }

    /// One ascent step on the policy objective; returns the objective and
    /// the batch-mean KL measured before the step.
    pub fn update_policy(
        &mut self,
        obs: &Array2<f64>,
        prior: &PriorParams,
        r: &mut Rng,
    ) -> Result<(f64, f64)> {
        let noise = Array2::from_shape_simple_fn((obs.nrows(), self.policy.act_dim()), || {
            r.sample::<f64, _>(StandardNormal)
        });
        let prior_rows = prior.dist_rows(obs)?;
        let beta = if self.cfg.no_prior {
            0.0
        } else {
            self.kl_weight()
        };
        let po = policy_objective(
            &self.policy,
            &self.critics,
            Some((&prior_rows.0, &prior_rows.1)),
            beta,
            self.cfg.entropy_coef * self.critics.q_scale,
            obs,
            &noise,
        )?;
        self.policy_opt.step(&mut self.policy.net, &po.grads)?;
        Ok((po.objective, po.mean_kl))
    }

    pub fn polyak_update(&mut self) -> Result<()> {
        for (t, o) in self.targets.iter_mut().zip(&self.critics.nets) {
            polyak(t, o, self.cfg.tau)?;
        }
        Ok(())
    }

    pub fn train_step(
        &mut self,
        batch: &Batch,
        prior: &PriorParams,
        r: &mut Rng,
    ) -> Result<StepStats> {
        let y = self.critic_target(batch, prior, r)?;
        let critic_loss = self.update_critic(batch, &y)?;
        let (policy_obj, mean_kl) = self.update_policy(&batch.obs, prior, r)?;
        if !self.cfg.no_prior {
            self.beta = update_beta(self.beta, mean_kl, self.cfg.delta, self.cfg.lr_beta);
        }
        self.polyak_update()?;
        Ok(StepStats {
            critic_loss,
            policy_obj,
            mean_kl,
        })
    }
}

/// Environment facts the agent needs but the dataset does not carry.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub action_box: Option<ActionBox>,
}

/// Runs the full offline training loop. `on_epoch(epoch, policy)` may
/// return an evaluation return to record for that epoch.
pub fn train_mabe<F>(
    d: &Dataset,
    model: &DynamicsEnsemble,
    prior: &PriorParams,
    cfg: &AgentConfig,
    seed: u64,
    opts: &TrainOptions,
    mut on_epoch: F,
) -> Result<(GaussianPolicy, TrainMetrics)>
where
    F: FnMut(usize, &GaussianPolicy) -> Result<Option<f64>>,
{
    cfg.validate()?;
    if cfg.no_rl {
        return Ok((prior.policy.clone(), TrainMetrics::default()));
    }
    if d.obs_dim() != model.obs_dim()
        || d.act_dim() != model.act_dim()
        || prior.policy.act_dim() != d.act_dim()
    {
        return Err(Error::Inconsistent(
            "dataset, dynamics and prior dimensions disagree".into(),
        ));
    }
    let stats = d.stats()?;
    let r_abs = stats.r_max.abs().max(stats.r_min.abs());
    let q_scale = if r_abs > 0.0 {
        r_abs / (1.0 - cfg.gamma)
    } else {
        1.0
    };
    let mut r = rng(derive_seed(seed, 0xa6e));
    let mut agent = AgentState::new(
        prior,
        cfg,
        stats.obs_normalizer(),
        q_scale,
        opts.action_box.clone(),
        &mut r,
    )?;
    let mut buffer = if cfg.buffer_capacity == 0 {
        AugmentedBuffer::with_default_capacity(d)
    } else {
        AugmentedBuffer::new(d, cfg.buffer_capacity)
    };
    let clip = opts
        .action_box
        .as_ref()
        .map(|b| (b.low.as_slice(), b.high.as_slice()));
    let mut m = TrainMetrics::default();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let policy = agent.policy.clone();
        let rollouts = model.synth_rollouts(
            |obs, r| policy.sample_rows(obs, r),
            d,
            cfg.horizon,
            cfg.branches,
            clip,
            derive_seed(seed, 0x5000 + epoch as u64),
        )?;
        let mut synthetic = rollouts.transitions;
        for (t, &u) in synthetic.iter_mut().zip(&rollouts.uncertainty) {
            t.reward = penalized_reward(t.reward, u, cfg.xi);
        }
        buffer.extend(synthetic);

        let (mut cl, mut po, mut kl) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.grad_steps {
            let batch = buffer.sample_batch(cfg.batch_size, cfg.real_fraction, &mut r)?;
            let s = agent.train_step(&batch, prior, &mut r)?;
            cl += s.critic_loss;
            po += s.policy_obj;
            kl += s.mean_kl;
            m.beta_steps.push(agent.beta);
            m.kl_steps.push(s.mean_kl);
        }
        let g = cfg.grad_steps.max(1) as f64;
        m.critic_loss.push(cl / g);
        m.policy_obj.push(po / g);
        m.mean_kl.push(kl / g);
        m.beta.push(agent.beta);
        m.buffer_size.push(buffer.synthetic_len());
        m.eval_return
            .push(on_epoch(epoch, &agent.policy)?.unwrap_or(f64::NAN));
        m.wall_clock.push(start.elapsed().as_secs_f64());
        log::debug!(
            "epoch {epoch}: critic {:.4} objective {:.3} kl {:.3} beta {:.3}",
            m.critic_loss[epoch],
            m.policy_obj[epoch],
            m.mean_kl[epoch],
            agent.beta
        );
    }
    Ok((agent.policy, m))
}

pub fn policy_checkpoint(policy: &GaussianPolicy, metrics: &TrainMetrics) -> Checkpoint {
    let mut c = policy.to_checkpoint();
    c.set_meta("epochs", metrics.epochs());
    if let Some(b) = metrics.beta.last() {
        c.set_meta("final_beta", b);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_penalty() {
        assert_eq!(penalized_reward(1.3, 0.7, 0.0), 1.3);
        assert_eq!(penalized_reward(1.0, 0.5, 2.0), 0.0);
        assert!(penalized_reward(1.0, 0.6, 1.0) < penalized_reward(1.0, 0.5, 1.0));
    }

    #[test]
    fn dual_ascent_rule() {
        assert_eq!(update_beta(0.7, 0.5, 0.5, 0.1), 0.7);
        assert!((update_beta(0.7, 1.5, 0.5, 0.1) - 0.8).abs() < 1e-15);
        assert_eq!(update_beta(0.0, 0.2, 0.5, 0.1), 0.0);
        assert_eq!(update_beta(0.01, 0.0, 0.5, 0.1), 0.0);
    }

    #[test]
    fn clipped_actions_mask_gradient() {
        let b = ActionBox {
            low: vec![-1.0],
            high: vec![1.0],
        };
        let (x, mask) = critic_input(
            &Normalizer::identity(1),
            &ndarray::array![[0.0], [0.0]],
            &ndarray::array![[2.0], [0.5]],
            Some(&b),
        );
        assert_eq!(x, ndarray::array![[0.0, 1.0], [0.0, 0.5]]);
        assert_eq!(mask, ndarray::array![[0.0], [1.0]]);
    }
}
