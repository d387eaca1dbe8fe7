//! Probabilistic ensemble of next-state and reward models.
//!
//! Every member maps a normalized `(s, a)` to a Gaussian over the normalized
//! `(Δs, r)` target with a learned, state-independent log-std vector.
//! Members are trained by maximum likelihood on bootstrap resamples and
//! ranked by holdout negative log-likelihood; the best `k` are elites.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{rows, Dataset, Normalizer, Transition};
use crate::error::{Error, Result};
use crate::numeric::gaussian::log_prob_rows;
use crate::numeric::{AdamConfig, AdamState, DiagGaussian, Head, Mlp, MlpGrads, Params};
use crate::rng::{derive_seed, rng, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub members: usize,
    pub elites: usize,
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub max_holdout: usize,
    /// Epochs without holdout improvement before a member stops.
    pub patience: usize,
    pub min_log_std: f64,
    pub max_log_std: f64,
    /// Rollout states outside `[min − m·range, max + m·range]` of the
    /// dataset truncate the branch.
    pub bound_margin: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            members: 5,
            elites: 3,
            hidden: vec![64, 64],
            max_epochs: 60,
            batch_size: 256,
            lr: 1e-3,
            holdout_fraction: 0.1,
            max_holdout: 2000,
            patience: 5,
            min_log_std: -10.0,
            max_log_std: 2.0,
            bound_margin: 1.0,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.elites == 0 || self.members < self.elites {
            return Err(Error::Config(format!(
                "ensemble needs 1 <= elites <= members (got {} of {})",
                self.elites, self.members
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "dynamics batch size and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub net: Mlp<f64>,
    /// Raw log-std per target dimension, clamped on use.
    pub log_std: Array1<f64>,
}

impl Member {
    fn clamped_log_std(&self) -> Array1<f64> {
        self.log_std
            .mapv(|v| v.clamp(self.net.log_std_min, self.net.log_std_max))
    }
}

impl Params<f64> for Member {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.net.slices();
        v.push(self.log_std.as_slice().expect("contiguous"));
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.net.slices_mut();
        v.push(self.log_std.as_slice_mut().expect("contiguous"));
        v
    }
}

pub struct MemberGrads {
    pub net: MlpGrads<f64>,
    pub log_std: Array1<f64>,
}

impl Params<f64> for MemberGrads {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.net.slices();
        v.push(self.log_std.as_slice().expect("contiguous"));
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.net.slices_mut();
        v.push(self.log_std.as_slice_mut().expect("contiguous"));
        v
    }
}

/// Denormalized prediction of one elite for a batch.
pub struct ElitePrediction {
    /// `(n × obs_dim)` mean next state.
    pub next_mean: Array2<f64>,
    /// `obs_dim` standard deviation of the next state.
    pub next_std: Array1<f64>,
    pub reward: Array1<f64>,
    /// Full `(Δs, r)` mean, used for disagreement.
    pub target_mean: Array2<f64>,
    pub target_std: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsEnsemble {
    pub members: Vec<Member>,
    pub elites: Vec<usize>,
    pub input_norm: Normalizer,
    pub target_norm: Normalizer,
    pub holdout_nll: Vec<f64>,
    pub obs_low: Array1<f64>,
    pub obs_high: Array1<f64>,
    obs_dim: usize,
    act_dim: usize,
}

/// Indices of the `k` smallest scores (ties broken by index).
pub fn select_elites(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn inputs(obs: &Array2<f64>, act: &Array2<f64>) -> Array2<f64> {
    concatenate![Axis(1), *obs, *act]
}

fn targets(d: &[&Transition]) -> Array2<f64> {
    let od = d.first().map(|t| t.obs.len()).unwrap_or(0);
    let mut y = Array2::zeros((d.len(), od + 1));
    for (i, t) in d.iter().enumerate() {
        for j in 0..od {
            y[[i, j]] = t.next_obs[j] - t.obs[j];
        }
        y[[i, od]] = t.reward;
    }
    y
}

/// Mean Gaussian NLL of normalized targets and its gradients.
pub fn member_nll_and_grads(
    member: &Member,
    x: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<(f64, MemberGrads)> {
    let n = x.nrows() as f64;
    let (mu, trace) = member.net.forward_train(x.view())?;
    let ls = member.clamped_log_std();
    let ls_rows = ls.broadcast(mu.raw_dim()).expect("broadcast").to_owned();
    let (lp, d_mu, d_ls) = log_prob_rows(mu.view(), ls_rows.view(), y.view());
    let nll = -lp.sum() / n;
    if !nll.is_finite() {
        let i = lp.iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(Error::NonFinite {
            what: "dynamics nll",
            index: i,
        });
    }
    let (net, _) = member.net.backward(&trace, (d_mu * (-1.0 / n)).view());
    let mut log_std = d_ls.sum_axis(Axis(0)) * (-1.0 / n);
    for (g, &raw) in log_std.iter_mut().zip(&member.log_std) {
        if raw < member.net.log_std_min || raw > member.net.log_std_max {
            *g = 0.0;
        }
    }
    Ok((nll, MemberGrads { net, log_std }))
}

fn holdout_nll(member: &Member, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if x.nrows() == 0 {
        return Ok(f64::NAN);
    }
    let mu = member.net.forward_batch(x.view())?;
    let ls = member.clamped_log_std();
    let ls_rows = ls.broadcast(mu.raw_dim()).expect("broadcast").to_owned();
    let (lp, _, _) = log_prob_rows(mu.view(), ls_rows.view(), y.view());
    Ok(-lp.mean().unwrap_or(f64::NAN))
}

/// Per-member training summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberLog {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Holdout NLL after every epoch.
    pub holdout_trace: Vec<f64>,
}

pub fn train_dynamics(
    d: &Dataset,
    cfg: &DynamicsConfig,
    seed: u64,
) -> Result<(DynamicsEnsemble, Vec<MemberLog>)> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (od, ad) = (d.obs_dim(), d.act_dim());
    let all: Vec<&Transition> = d.transitions().iter().collect();
    let x_all = inputs(&d.obs_matrix(), &d.action_matrix());
    let y_all = targets(&all);
    let input_norm = Normalizer::fit(&x_all);
    let target_norm = Normalizer::fit(&y_all);
    let x_all = input_norm.apply_rows(&x_all);
    let y_all = target_norm.apply_rows(&y_all);

    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut rng(derive_seed(seed, 0x401d)));
    let n_hold = ((d.len() as f64 * cfg.holdout_fraction).round() as usize)
        .min(cfg.max_holdout)
        .min(d.len().saturating_sub(1));
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let x_hold = x_all.select(Axis(0), hold_idx);
    let y_hold = y_all.select(Axis(0), hold_idx);

    let mut sizes = vec![od + ad];
    sizes.extend(&cfg.hidden);
    sizes.push(od + 1);

    let mut members = Vec::with_capacity(cfg.members);
    let mut scores = Vec::with_capacity(cfg.members);
    let mut logs = Vec::with_capacity(cfg.members);
    for m in 0..cfg.members {
        let mut r = rng(derive_seed(seed, 0x1000 + m as u64));
        let net = Mlp::new(&sizes, Head::Linear, &mut r)?
            .with_log_std_bounds(cfg.min_log_std, cfg.max_log_std);
        let mut member = Member {
            net,
            log_std: Array1::zeros(od + 1),
        };
        let boot: Vec<usize> = (0..train_idx.len())
            .map(|_| train_idx[r.gen_range(0..train_idx.len())])
            .collect();
        let x_boot = x_all.select(Axis(0), &boot);
        let y_boot = y_all.select(Axis(0), &boot);
        let mut opt = AdamState::new(&member, AdamConfig::with_lr(cfg.lr));
        let mut best = (f64::INFINITY, member.clone(), 0);
        let mut stale = 0;
        let mut log = MemberLog {
            epochs_run: 0,
            best_epoch: 0,
            holdout_trace: Vec::new(),
        };
        let mut perm: Vec<usize> = (0..boot.len()).collect();
        for epoch in 0..cfg.max_epochs {
            perm.shuffle(&mut r);
            for chunk in perm.chunks(cfg.batch_size) {
                let xb = x_boot.select(Axis(0), chunk);
                let yb = y_boot.select(Axis(0), chunk);
                let (_, g) = member_nll_and_grads(&member, &xb, &yb)?;
                opt.step(&mut member, &g)?;
            }
            let score = if n_hold > 0 {
                holdout_nll(&member, &x_hold, &y_hold)?
            } else {
                holdout_nll(&member, &x_boot, &y_boot)?
            };
            log.holdout_trace.push(score);
            log.epochs_run = epoch + 1;
            if score < best.0 {
                best = (score, member.clone(), epoch);
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
        log.best_epoch = best.2;
        log::debug!(
            "dynamics member {m}: holdout nll {:.4} after {} epochs",
            best.0,
            log.epochs_run
        );
        scores.push(best.0);
        members.push(best.1);
        logs.push(log);
    }
    let elites = select_elites(&scores, cfg.elites);

    let obs = d.obs_matrix();
    let lo = obs.fold_axis(Axis(0), f64::INFINITY, |a, &b| a.min(b));
    let hi = obs.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = (&hi - &lo).mapv(|v| v.max(1e-3)) * cfg.bound_margin;
    Ok((
        DynamicsEnsemble {
            members,
            elites,
            input_norm,
            target_norm,
            holdout_nll: scores,
            obs_low: &lo - &span,
            obs_high: &hi + &span,
            obs_dim: od,
            act_dim: ad,
        },
        logs,
    ))
}

/// Output of [`DynamicsEnsemble::synth_rollouts`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rollouts {
    /// Branch-major synthetic transitions with the raw model reward.
    pub transitions: Vec<Transition>,
    /// `u(s, a)` of every transition, aligned with `transitions`.
    pub uncertainty: Vec<f64>,
    /// Branches cut short by a non-finite or out-of-bounds prediction.
    pub truncated: usize,
}

impl DynamicsEnsemble {
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Denormalized predictions of every elite (elite order) for a batch.
    pub fn elite_predictions(
        &self,
        obs: &Array2<f64>,
        act: &Array2<f64>,
    ) -> Result<Vec<ElitePrediction>> {
        if obs.ncols() != self.obs_dim || act.ncols() != self.act_dim {
            return Err(Error::Dimension {
                what: "dynamics input",
                expected: self.obs_dim + self.act_dim,
                got: obs.ncols() + act.ncols(),
            });
        }
        let x = self.input_norm.apply_rows(&inputs(obs, act));
        let od = self.obs_dim;
        self.elites
            .iter()
            .map(|&m| {
                let member = &self.members[m];
                let mu = member.net.forward_batch(x.view())?;
                let target_mean = self.target_norm.invert_rows(&mu);
                let target_std = member.clamped_log_std().mapv(f64::exp) * &self.target_norm.std;
                let next_mean = obs + &target_mean.slice(s![.., ..od]);
                Ok(ElitePrediction {
                    next_std: target_std.slice(s![..od]).to_owned(),
                    reward: target_mean.column(od).to_owned(),
                    next_mean,
                    target_mean,
                    target_std,
                })
            })
            .collect()
    }

    /// Next-state distribution and reward mean of elite member `member`.
    pub fn predict(
        &self,
        member: usize,
        s: ArrayView1<f64>,
        a: ArrayView1<f64>,
    ) -> Result<(DiagGaussian<f64>, f64)> {
        if !self.elites.contains(&member) {
            return Err(Error::Input(format!(
                "member {member} is not an elite ({:?})",
                self.elites
            )));
        }
        let obs = s.to_owned().insert_axis(Axis(0));
        let act = a.to_owned().insert_axis(Axis(0));
        let x = self.input_norm.apply_rows(&inputs(&obs, &act));
        let m = &self.members[member];
        let mu = self
            .target_norm
            .invert_rows(&m.net.forward_batch(x.view())?);
        let od = self.obs_dim;
        let mean = &s + &mu.slice(s![0, ..od]);
        let log_std = m.clamped_log_std().slice(s![..od]).to_owned()
            + self.target_norm.std.slice(s![..od]).mapv(f64::ln);
        let dist = DiagGaussian::with_bounds(mean, log_std, f64::NEG_INFINITY, f64::INFINITY)?;
        Ok((dist, mu[[0, od]]))
    }

    /// `u = max(max_e ‖σ_e‖₂, ‖std_e(μ_e)‖₂)` over the `(Δs, r)` outputs.
    pub fn uncertainty_from(preds: &[ElitePrediction]) -> Array1<f64> {
        let n = preds.first().map(|p| p.target_mean.nrows()).unwrap_or(0);
        let aleatoric = preds
            .iter()
            .map(|p| p.target_std.dot(&p.target_std).sqrt())
            .fold(0.0, f64::max);
        let k = preds.len() as f64;
        let mut u = Array1::from_elem(n, aleatoric);
        if preds.len() < 2 {
            return u;
        }
        let dim = preds[0].target_mean.ncols();
        for i in 0..n {
            let mut total = 0.0;
            for j in 0..dim {
                let mean = preds.iter().map(|p| p.target_mean[[i, j]]).sum::<f64>() / k;
                let var = preds
                    .iter()
                    .map(|p| (p.target_mean[[i, j]] - mean).powi(2))
                    .sum::<f64>()
                    / k;
                total += var;
            }
            u[i] = u[i].max(total.sqrt());
        }
        u
    }

    pub fn uncertainty_batch(&self, obs: &Array2<f64>, act: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(Self::uncertainty_from(&self.elite_predictions(obs, act)?))
    }

    pub fn uncertainty(&self, s: ArrayView1<f64>, a: ArrayView1<f64>) -> Result<f64> {
        let obs = s.to_owned().insert_axis(Axis(0));
        let act = a.to_owned().insert_axis(Axis(0));
        Ok(self.uncertainty_batch(&obs, &act)?[0])
    }

    fn in_bounds(&self, s: ArrayView1<f64>) -> bool {
        s.iter()
            .zip(self.obs_low.iter().zip(&self.obs_high))
            .all(|(&v, (&lo, &hi))| v.is_finite() && v >= lo && v <= hi)
    }

    /// Generates `n_branches` model rollouts of up to `h` steps from
    /// uniformly drawn dataset states.
    ///
    /// `policy(obs, rng)` returns the raw action for every row; the model is
    /// queried with `clip(action)` (the identity when `clip` is `None`)
    /// while the transition stores the raw action. Each step draws an elite
    /// uniformly per branch and samples the next state from its Gaussian.
    pub fn synth_rollouts<P>(
        &self,
        mut policy: P,
        d: &Dataset,
        h: usize,
        n_branches: usize,
        clip: Option<(&[f64], &[f64])>,
        seed: u64,
    ) -> Result<Rollouts>
    where
        P: FnMut(&Array2<f64>, &mut Rng) -> Result<Array2<f64>>,
    {
        if h == 0 {
            return Err(Error::Config("rollout length must be at least 1".into()));
        }
        if n_branches == 0 || d.is_empty() {
            return Ok(Rollouts::default());
        }
        let mut r = rng(seed);
        let ts = d.transitions();
        let starts: Vec<&[f64]> = (0..n_branches)
            .map(|_| ts[r.gen_range(0..ts.len())].obs.as_slice())
            .collect();
        let mut state = rows(starts.into_iter(), self.obs_dim);
        let mut active: Vec<usize> = (0..n_branches).collect();
        let mut per_branch: Vec<Vec<(Transition, f64)>> = vec![Vec::new(); n_branches];
        let mut truncated = 0;
        let od = self.obs_dim;
        for step in 0..h {
            if active.is_empty() {
                break;
            }
            let raw = policy(&state, &mut r)?;
            let mut act = raw.clone();
            if let Some((lo, hi)) = clip {
                for mut row in act.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = v.clamp(lo[j], hi[j]);
                    }
                }
            }
            let preds = self.elite_predictions(&state, &act)?;
            let u = Self::uncertainty_from(&preds);
            let mut next = Array2::zeros(state.raw_dim());
            let mut keep = Vec::with_capacity(active.len());
            let mut keep_rows = Vec::with_capacity(active.len());
            for (row, &b) in active.iter().enumerate() {
                let p = &preds[r.gen_range(0..preds.len())];
                for j in 0..od {
                    let e: f64 = r.sample(StandardNormal);
                    next[[row, j]] = p.next_mean[[row, j]] + p.next_std[j] * e;
                }
                let reward = p.reward[row];
                let ok = reward.is_finite() && u[row].is_finite() && self.in_bounds(next.row(row));
                if !ok {
                    truncated += 1;
                    log::debug!("rollout branch {b} truncated at step {step}");
                    if let Some((last, _)) = per_branch[b].last_mut() {
                        last.traj_end = true;
                    }
                    continue;
                }
                let last = step + 1 == h;
                per_branch[b].push((
                    Transition {
                        obs: state.row(row).to_vec(),
                        action: raw.row(row).to_vec(),
                        reward,
                        next_obs: next.row(row).to_vec(),
                        done: false,
                        traj_end: last,
                    },
                    u[row],
                ));
                keep.push(b);
                keep_rows.push(row);
            }
            state = next.select(Axis(0), &keep_rows);
            active = keep;
        }
        let mut out = Rollouts {
            truncated,
            ..Default::default()
        };
        for (t, u) in per_branch.into_iter().flatten() {
            out.transitions.push(t);
            out.uncertainty.push(u);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("dynamics");
        c.set_meta("members", self.members.len());
        c.set_meta("obs_dim", self.obs_dim);
        c.set_meta("act_dim", self.act_dim);
        c.set_meta(
            "elites",
            self.elites
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        for (i, m) in self.members.iter().enumerate() {
            c.push_mlp(&format!("member{i}"), &m.net);
            c.push_vec(format!("member{i}.log_std"), &m.log_std);
        }
        c.push_vec("input_mean", &self.input_norm.mean);
        c.push_vec("input_std", &self.input_norm.std);
        c.push_vec("target_mean", &self.target_norm.mean);
        c.push_vec("target_std", &self.target_norm.std);
        c.push(
            "holdout_nll",
            vec![self.holdout_nll.len()],
            self.holdout_nll.clone(),
        );
        c.push_vec("obs_low", &self.obs_low);
        c.push_vec("obs_high", &self.obs_high);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let n: usize = c.meta_parse("members")?;
        let elites = c
            .meta("elites")?
            .split(',')
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Inconsistent("bad elite list".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        if elites.iter().any(|&e| e >= n) {
            return Err(Error::Inconsistent("elite index out of range".into()));
        }
        let members = (0..n)
            .map(|i| {
                Ok(Member {
                    net: c.mlp(&format!("member{i}"))?,
                    log_std: c.vec(&format!("member{i}.log_std"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DynamicsEnsemble {
            members,
            elites,
            input_norm: Normalizer {
                mean: c.vec("input_mean")?,
                std: c.vec("input_std")?,
            },
            target_norm: Normalizer {
                mean: c.vec("target_mean")?,
                std: c.vec("target_std")?,
            },
            holdout_nll: c.tensor("holdout_nll")?.data.clone(),
            obs_low: c.vec("obs_low")?,
            obs_high: c.vec("obs_high")?,
            obs_dim: c.meta_parse("obs_dim")?,
            act_dim: c.meta_parse("act_dim")?,
        })
    }

    /// Builds an ensemble from explicit members (normalizers must match the
    /// member input/output widths).
    pub fn from_parts(
        members: Vec<Member>,
        elites: Vec<usize>,
        input_norm: Normalizer,
        target_norm: Normalizer,
        obs_bounds: (Array1<f64>, Array1<f64>),
    ) -> Result<Self> {
        let od = target_norm
            .dim()
            .checked_sub(1)
            .ok_or_else(|| Error::Config("empty target".into()))?;
        let ad = input_norm
            .dim()
            .checked_sub(od)
            .ok_or_else(|| Error::Config("input narrower than observation".into()))?;
        if elites.is_empty() || elites.iter().any(|&e| e >= members.len()) {
            return Err(Error::Config("invalid elite set".into()));
        }
        for m in &members {
            if m.net.input_dim() != od + ad
                || m.net.output_dim() != od + 1
                || m.log_std.len() != od + 1
            {
                return Err(Error::Config(
                    "member shape does not match normalizers".into(),
                ));
            }
        }
        Ok(DynamicsEnsemble {
            holdout_nll: vec![f64::NAN; members.len()],
            members,
            elites,
            input_norm,
            target_norm,
            obs_low: obs_bounds.0,
            obs_high: obs_bounds.1,
            obs_dim: od,
            act_dim: ad,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Dense;
    use ndarray::array;

    #[test]
    fn elites_are_lowest_nll_members() {
        let scores = [3.0, 7.0, 1.0, 6.0, 2.0, 5.0, 4.0];
        assert_eq!(select_elites(&scores, 5), vec![0, 2, 4, 5, 6]);
    }

    #[test]
    fn k_above_members_is_config_error() {
        let cfg = DynamicsConfig {
            members: 3,
            elites: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    /// Single-layer member predicting a fixed `(Δs, r)` with floor std.
    fn constant_member(delta: &[f64]) -> Member {
        let dim = delta.len();
        let mut l = Dense::<f64>::zeros(3, dim);
        l.bias = Array1::from(delta.to_vec());
        Member {
            net: Mlp::from_layers(vec![l], Head::Linear).unwrap(),
            log_std: Array1::from_elem(dim, -100.0),
        }
    }

    fn toy(members: Vec<Member>, elites: Vec<usize>) -> DynamicsEnsemble {
        DynamicsEnsemble::from_parts(
            members,
            elites,
            Normalizer::identity(3),
            Normalizer::identity(3),
            (array![-100.0, -100.0], array![100.0, 100.0]),
        )
        .unwrap()
    }

    #[test]
    fn identical_elites_have_floor_uncertainty_only() {
        let e = toy(vec![constant_member(&[0.1, 0.0, 0.5]); 3], vec![0, 1, 2]);
        let u = e
            .uncertainty(array![0.0, 0.0].view(), array![0.0].view())
            .unwrap();
        let floor = (3.0f64).sqrt() * (-10.0f64).exp();
        assert!((u - floor).abs() < 1e-15);
    }

    #[test]
    fn two_point_disagreement() {
        let v = [0.3, -0.4, 0.0];
        let e = toy(
            vec![constant_member(&[0.0, 0.0, 0.0]), constant_member(&v)],
            vec![0, 1],
        );
        let u = e
            .uncertainty(array![0.5, 0.5].view(), array![0.0].view())
            .unwrap();
        // Population std of {0, v_j} is |v_j|/2, so the norm is ‖v‖/2.
        let expect = (v.iter().map(|x| x * x).sum::<f64>()).sqrt() / 2.0;
        assert!((u - expect).abs() < 1e-12);
        let swapped = toy(
            vec![constant_member(&v), constant_member(&[0.0, 0.0, 0.0])],
            vec![0, 1],
        );
        assert_eq!(
            swapped
                .uncertainty(array![0.5, 0.5].view(), array![0.0].view())
                .unwrap(),
            u
        );
    }

    #[test]
    fn predict_rejects_non_elite() {
        let e = toy(vec![constant_member(&[0.0; 3]); 3], vec![0, 2]);
        assert!(e
            .predict(1, array![0.0, 0.0].view(), array![0.0].view())
            .is_err());
        let (g, r) = e
            .predict(2, array![1.0, 2.0].view(), array![0.0].view())
            .unwrap();
        assert_eq!(g.mean(), &array![1.0, 2.0]);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn rollout_counts() {
        let e = toy(vec![constant_member(&[0.01, 0.0, 1.0]); 2], vec![0, 1]);
        let d = Dataset::new(
            2,
            1,
            vec![Transition {
                obs: vec![0.0, 0.0],
                action: vec![0.0],
                reward: 0.0,
                next_obs: vec![0.0, 0.0],
                done: true,
                traj_end: true,
            }],
        )
        .unwrap();
        let pol = |o: &Array2<f64>, _: &mut Rng| Ok(Array2::zeros((o.nrows(), 1)));
        let r1 = e.synth_rollouts(pol, &d, 1, 7, None, 0).unwrap();
        assert_eq!(r1.transitions.len(), 7);
        let r0 = e.synth_rollouts(pol, &d, 3, 0, None, 0).unwrap();
        assert!(r0.transitions.is_empty());
        let r5 = e.synth_rollouts(pol, &d, 5, 4, None, 0).unwrap();
        assert_eq!(r5.transitions.len(), 20);
        assert_eq!(r5.transitions.iter().filter(|t| t.traj_end).count(), 4);
        // Sampling noise is at the log-std floor.
        assert!((r5.transitions[4].obs[0] - 0.04).abs() < 1e-3);
        assert_eq!(r5.transitions[0].reward, 1.0);
    }

    #[test]
    fn out_of_bounds_truncates() {
        let e = toy(vec![constant_member(&[60.0, 0.0, 0.0]); 2], vec![0, 1]);
        let d = Dataset::new(
            2,
            1,
            vec![Transition {
                obs: vec![0.0, 0.0],
                action: vec![0.0],
                reward: 0.0,
                next_obs: vec![0.0, 0.0],
                done: true,
                traj_end: true,
            }],
        )
        .unwrap();
        let pol = |o: &Array2<f64>, _: &mut Rng| Ok(Array2::zeros((o.nrows(), 1)));
        let r = e.synth_rollouts(pol, &d, 5, 3, None, 0).unwrap();
        assert_eq!(r.transitions.len(), 3);
        assert_eq!(r.truncated, 3);
        assert!(r.transitions.iter().all(|t| t.traj_end));
    }

    #[test]
    fn checkpoint_round_trip() {
        let e = toy(vec![constant_member(&[0.3, 0.1, 0.2]); 3], vec![1, 2]);
        let back = DynamicsEnsemble::from_checkpoint(
            &Checkpoint::decode(&e.to_checkpoint().encode()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.elites, e.elites);
        assert_eq!(back.members, e.members);
    }
}
