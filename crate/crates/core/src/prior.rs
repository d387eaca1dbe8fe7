//! Dataset Q-function and the (advantage-weighted) behavioral prior.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::numeric::{
    log_prob_rows, polyak, AdamConfig, AdamState, DiagGaussian, Head, Mlp, MlpGrads,
};
use crate::policy::GaussianPolicy;
use crate::rng::{derive_seed, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QFitConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    /// Gradient steps between plateau checks.
    pub check_every: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    /// Checks without relative improvement `min_rel_improvement` before stopping.
    pub patience: usize,
    pub min_rel_improvement: f64,
}

impl Default for QFitConfig {
    fn default() -> Self {
        QFitConfig {
            hidden: vec![64, 64],
            lr: 1e-3,
            batch_size: 256,
            tau: 0.02,
            check_every: 250,
            min_steps: 3000,
            max_steps: 20000,
            patience: 4,
            min_rel_improvement: 1e-2,
        }
    }
}

/// Q-function of the data-collecting behavior.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetQ {
    pub net: Mlp<f64>,
    pub target: Mlp<f64>,
    pub input_norm: Normalizer,
    /// Network outputs are multiplied by this before use.
    pub q_scale: f64,
    pub gamma: f64,
    /// Mean TD loss per plateau check (in `q_scale` units squared).
    pub loss_log: Vec<f64>,
}

impl DatasetQ {
    pub fn values(&self, obs: &Array2<f64>, act: &Array2<f64>) -> Result<Array1<f64>> {
        let x = self
            .input_norm
            .apply_rows(&concatenate![Axis(1), *obs, *act]);
        Ok(self
            .net
            .forward_batch(x.view())?
            .column(0)
            .mapv(|v| v * self.q_scale))
    }

    pub fn dataset_values(&self, d: &Dataset) -> Result<Array1<f64>> {
        self.values(&d.obs_matrix(), &d.action_matrix())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("dataset-q");
        c.push_mlp("q", &self.net);
        c.push_mlp("q_target", &self.target);
        c.push_vec("input_mean", &self.input_norm.mean);
        c.push_vec("input_std", &self.input_norm.std);
        c.set_meta("q_scale", self.q_scale);
        c.set_meta("gamma", self.gamma);
        c.push("loss_log", vec![self.loss_log.len()], self.loss_log.clone());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Ok(DatasetQ {
            net: c.mlp("q")?,
            target: c.mlp("q_target")?,
            input_norm: Normalizer {
                mean: c.vec("input_mean")?,
                std: c.vec("input_std")?,
            },
            q_scale: c.meta_parse("q_scale")?,
            gamma: c.meta_parse("gamma")?,
            loss_log: c.tensor("loss_log")?.data.clone(),
        })
    }
}

/// Fits `Q(s, a)` by minimizing the SARSA TD error on the dataset.
///
/// The bootstrap action is the dataset's next action in the same
/// trajectory. A trajectory that ends without a terminal flag bootstraps
/// from its own last action.
pub fn fit_q_dataset(d: &Dataset, gamma: f64, cfg: &QFitConfig, seed: u64) -> Result<DatasetQ> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount {gamma} outside [0, 1)")));
    }
    if cfg.batch_size == 0 || cfg.check_every == 0 {
        return Err(Error::Config(
            "q-fit batch size and check interval must be positive".into(),
        ));
    }
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ts = d.transitions();
    let obs = d.obs_matrix();
    let act = d.action_matrix();
    let x = concatenate![Axis(1), obs, act];
    let input_norm = Normalizer::fit(&x);
    let x = input_norm.apply_rows(&x);
    let next_act: Vec<&[f64]> = (0..ts.len())
        .map(|i| d.next_action(i).unwrap_or(ts[i].action.as_slice()))
        .collect();
    let next_obs = crate::dataset::rows(ts.iter().map(|t| t.next_obs.as_slice()), d.obs_dim());
    let next_act = crate::dataset::rows(next_act.into_iter(), d.act_dim());
    let x_next = input_norm.apply_rows(&concatenate![Axis(1), next_obs, next_act]);
    let r_abs = ts.iter().map(|t| t.reward.abs()).fold(0.0, f64::max);
    let q_scale = if r_abs > 0.0 {
        r_abs / (1.0 - gamma)
    } else {
        1.0
    };
    let rewards: Array1<f64> = ts.iter().map(|t| t.reward / q_scale).collect();
    let cont: Array1<f64> = ts
        .iter()
        .map(|t| if t.done { 0.0 } else { gamma })
        .collect();

    let mut r = rng(derive_seed(seed, 0x9f1));
    let mut sizes = vec![d.obs_dim() + d.act_dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let mut net = Mlp::new(&sizes, Head::Linear, &mut r)?;
    let mut target = net.clone();
    let mut opt = AdamState::new(&net, AdamConfig::with_lr(cfg.lr));
    let n = ts.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut loss_log = Vec::new();
    let (mut best, mut stale, mut window) = (f64::INFINITY, 0, 0.0);
    for step in 1..=cfg.max_steps {
        let mut idx = Vec::with_capacity(cfg.batch_size.min(n));
        while idx.len() < cfg.batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut r);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let xb = x.select(Axis(0), &idx);
        let qn = target.forward_batch(x_next.select(Axis(0), &idx).view())?;
        let y: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| rewards[i] + cont[i] * qn[[k, 0]])
            .collect();
        let (loss, g) = net.loss_gradients(xb.view(), |k, out| {
            let e = out[0] - y[k];
            (0.5 * e * e, Array1::from_elem(1, e))
        })?;
        opt.step(&mut net, &g)?;
        polyak(&mut target, &net, cfg.tau)?;
        window += loss;
        if step % cfg.check_every == 0 {
            let mean = window / cfg.check_every as f64;
            window = 0.0;
            loss_log.push(mean);
            if mean < best * (1.0 - cfg.min_rel_improvement) {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
            }
            if step >= cfg.min_steps && stale >= cfg.patience {
                log::debug!("q-fit plateaued after {step} steps (loss {mean:.3e})");
                break;
            }
        }
    }
    Ok(DatasetQ {
        net,
        target,
        input_norm,
        q_scale,
        gamma,
        loss_log,
    })
}

/// How `Q̂` values become `ω` before exponentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QNorm {
    /// `ω = Q̂·(1−γ)/r_max`.
    #[default]
    RMax,
    /// `ω = Q̂ / max Q̂` over the dataset.
    MaxQ,
}

/// `w_i = exp(ω_i/η)` from precomputed Q̂ values.
pub fn weights_from_q(
    q: &[f64],
    gamma: f64,
    r_max: f64,
    eta: f64,
    norm: QNorm,
    fallback_r: f64,
) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::Config(format!("temperature {eta} must be positive")));
    }
    let denom = match norm {
        QNorm::RMax => {
            let r = if r_max > 0.0 {
                r_max
            } else {
                log::warn!(
                    "r_max = {r_max} is not positive; normalizing by max |reward| = {fallback_r}"
                );
                if fallback_r > 0.0 {
                    fallback_r
                } else {
                    1.0
                }
            };
            r / (1.0 - gamma)
        }
        QNorm::MaxQ => {
            let m = q.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.abs()));
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let w: Vec<f64> = q.iter().map(|&v| (v / denom / eta).exp()).collect();
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "advantage weight",
            index: i,
        });
    }
    Ok(w)
}

pub fn advantage_weights(
    q: &DatasetQ,
    d: &Dataset,
    r_max: f64,
    eta: f64,
    norm: QNorm,
) -> Result<Vec<f64>> {
    let values = q.dataset_values(d)?;
    let fallback = d
        .transitions()
        .iter()
        .map(|t| t.reward.abs())
        .fold(0.0, f64::max);
    weights_from_q(
        values.as_slice().expect("contiguous"),
        q.gamma,
        r_max,
        eta,
        norm,
        fallback,
    )
}

/// Per-trajectory weights `exp(R_τ / max R / η)`.
pub fn return_weights(d: &Dataset, eta: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::Config(format!("temperature {eta} must be positive")));
    }
    let ranges = d.trajectory_ranges();
    let returns: Vec<f64> = ranges
        .iter()
        .map(|r| d.transitions()[r.clone()].iter().map(|t| t.reward).sum())
        .collect();
    let max = returns
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b.abs()));
    let mut w = vec![0.0; d.len()];
    for (r, ret) in ranges.into_iter().zip(returns) {
        let normalized = if max > 0.0 { ret / max } else { 1.0 };
        let v = (normalized / eta).exp();
        w[r].fill(v);
    }
    Ok(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Uniform,
    #[default]
    QAdvantage,
    TrajectoryReturn,
}

impl Weighting {
    pub fn tag(self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::QAdvantage => "q-advantage",
            Weighting::TrajectoryReturn => "trajectory-return",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub weighting: Weighting,
    pub eta: f64,
    pub q_norm: QNorm,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub q_fit: QFitConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            weighting: Weighting::QAdvantage,
            eta: 1.0,
            q_norm: QNorm::RMax,
            hidden: vec![64, 64],
            lr: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            patience: 8,
            val_fraction: 0.1,
            log_std_min: -2.0,
            log_std_max: 2.0,
            q_fit: QFitConfig::default(),
        }
    }
}

/// Gaussian behavioral prior `p_α(a|s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorParams {
    pub policy: GaussianPolicy,
    pub weighting: Weighting,
    pub eta: f64,
    pub val_nll: f64,
    pub init_val_nll: f64,
}

impl PriorParams {
    pub fn dist_rows(&self, obs: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.policy.dist_rows(obs)
    }

    pub fn dist(&self, obs: &[f64]) -> Result<DiagGaussian<f64>> {
        self.policy.dist(obs)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("prior");
        self.policy.write_into(&mut c, "prior");
        c.set_meta("weighting", self.weighting.tag());
        c.set_meta("eta", self.eta);
        c.set_meta("val_nll", self.val_nll);
        c.set_meta("init_val_nll", self.init_val_nll);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let weighting = match c.meta("weighting")? {
            "uniform" => Weighting::Uniform,
            "q-advantage" => Weighting::QAdvantage,
            "trajectory-return" => Weighting::TrajectoryReturn,
            other => return Err(Error::Inconsistent(format!("unknown weighting {other:?}"))),
        };
        Ok(PriorParams {
            policy: GaussianPolicy::read_from(c, "prior")?,
            weighting,
            eta: c.meta_parse("eta")?,
            val_nll: c.meta_parse("val_nll")?,
            init_val_nll: c.meta_parse("init_val_nll")?,
        })
    }
}

/// Weighted NLL `Σ w·(−log p) / Σ w` with gradients w.r.t. raw network outputs.
fn weighted_nll(
    net: &Mlp<f64>,
    raw: &Array2<f64>,
    act: ArrayView2<f64>,
    w: &[f64],
) -> (f64, Array2<f64>) {
    let (mean, log_std) = net.split_gaussian(raw);
    let (lp, dm, dls) = log_prob_rows(mean.view(), log_std.view(), act);
    let total: f64 = w.iter().sum();
    let scale = Array1::from_iter(w.iter().map(|&v| -v / total)).insert_axis(Axis(1));
    let loss = -lp.iter().zip(w).map(|(l, v)| l * v).sum::<f64>() / total;
    let g = net.gaussian_output_grad(raw, (&dm * &scale).view(), (&dls * &scale).view());
    (loss, g)
}

/// Weighted NLL of a batch of (normalized) observations and its parameter
/// gradients.
pub fn prior_loss_and_grads(
    net: &Mlp<f64>,
    x: &Array2<f64>,
    act: &Array2<f64>,
    w: &[f64],
) -> Result<(f64, MlpGrads<f64>)> {
    let (raw, trace) = net.forward_train(x.view())?;
    let (loss, g) = weighted_nll(net, &raw, act.view(), w);
    Ok((loss, net.backward(&trace, g.view()).0))
}

fn eval_nll(net: &Mlp<f64>, x: &Array2<f64>, a: &Array2<f64>, w: &[f64]) -> Result<f64> {
    if x.nrows() == 0 {
        return Ok(f64::NAN);
    }
    let raw = net.forward_batch(x.view())?;
    Ok(weighted_nll(net, &raw, a.view(), w).0)
}

/// Fits the prior by weighted maximum likelihood on a 90/10 split, keeping
/// the parameters with the best validation loss.
///
/// Weights are used relative to each other; scaling all of them by a
/// constant leaves the result unchanged.
pub fn train_prior(
    d: &Dataset,
    weights: &[f64],
    cfg: &PriorConfig,
    seed: u64,
) -> Result<PriorParams> {
    if weights.len() != d.len() {
        return Err(Error::Dimension {
            what: "prior weights",
            expected: d.len(),
            got: weights.len(),
        });
    }
    if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::NonFinite {
            what: "prior weight",
            index: i,
        });
    }
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config(
            "prior batch size and epochs must be positive".into(),
        ));
    }
    let obs_norm = d.stats()?.obs_normalizer();
    let x = obs_norm.apply_rows(&d.obs_matrix());
    let a = d.action_matrix();
    let mut r = rng(derive_seed(seed, 0x7a1));
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut r);
    let n_val = ((d.len() as f64 * cfg.val_fraction).round() as usize).min(d.len() - 1);
    let (val, train) = order.split_at(n_val);
    // Tiny datasets validate on the training set.
    let held = if n_val > 0 && val.iter().any(|&i| weights[i] > 0.0) {
        val
    } else {
        train
    };
    let (x_val, a_val) = (x.select(Axis(0), held), a.select(Axis(0), held));
    let w_val: Vec<f64> = held.iter().map(|&i| weights[i]).collect();
    let mut train = train.to_vec();

    let mut sizes = vec![d.obs_dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(d.act_dim());
    let mut net = Mlp::new(&sizes, Head::GaussianTwoHead, &mut r)?
        .with_log_std_bounds(cfg.log_std_min, cfg.log_std_max);
    let mut opt = AdamState::new(&net, AdamConfig::with_lr(cfg.lr));
    let val_score = |net: &Mlp<f64>| eval_nll(net, &x_val, &a_val, &w_val);
    let init_val_nll = val_score(&net)?;
    let (mut best, mut best_net, mut stale) = (init_val_nll, net.clone(), 0);
    for epoch in 0..cfg.max_epochs {
        train.shuffle(&mut r);
        for chunk in train.chunks(cfg.batch_size) {
            let w: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
            if w.iter().sum::<f64>() <= 0.0 {
                continue;
            }
            let (loss, grads) = prior_loss_and_grads(
                &net,
                &x.select(Axis(0), chunk),
                &a.select(Axis(0), chunk),
                &w,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "prior loss",
                    index: epoch,
                });
            }
            opt.step(&mut net, &grads)?;
        }
        let score = val_score(&net)?;
        if score < best {
            best = score;
            best_net = net.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    log::debug!("prior validation nll {init_val_nll:.4} -> {best:.4}");
    Ok(PriorParams {
        policy: GaussianPolicy {
            net: best_net,
            obs_norm,
        },
        weighting: cfg.weighting,
        eta: cfg.eta,
        val_nll: best,
        init_val_nll,
    })
}

/// Computes weights for `cfg.weighting` (fitting `Q̂` when needed) and trains
/// the prior. Returns the dataset Q-function when one was fitted.
pub fn build_prior(
    d: &Dataset,
    gamma: f64,
    cfg: &PriorConfig,
    seed: u64,
) -> Result<(PriorParams, Option<DatasetQ>)> {
    let (weights, q) = match cfg.weighting {
        Weighting::Uniform => (vec![1.0; d.len()], None),
        Weighting::TrajectoryReturn => (return_weights(d, cfg.eta)?, None),
        Weighting::QAdvantage => {
            let q = fit_q_dataset(d, gamma, &cfg.q_fit, derive_seed(seed, 1))?;
            let r_max = d.stats()?.r_max;
            (
                advantage_weights(&q, d, r_max, cfg.eta, cfg.q_norm)?,
                Some(q),
            )
        }
    };
    Ok((train_prior(d, &weights, cfg, derive_seed(seed, 2))?, q))
}

/// Mean `log p(a|s)` of the prior over a set of transitions.
pub fn mean_log_likelihood(prior: &PriorParams, d: &Dataset, idx: &[usize]) -> Result<f64> {
    let ts = d.transitions();
    let obs = crate::dataset::rows(idx.iter().map(|&i| ts[i].obs.as_slice()), d.obs_dim());
    let act = crate::dataset::rows(idx.iter().map(|&i| ts[i].action.as_slice()), d.act_dim());
    let (m, ls) = prior.dist_rows(&obs)?;
    let (lp, _, _) = log_prob_rows(m.view(), ls.view(), act.view());
    Ok(lp.mean().unwrap_or(f64::NAN))
}
