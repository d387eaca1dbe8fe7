//! Offline transitions, trajectories and dataset statistics.

mod buffer;
mod format;
mod generate;

pub use buffer::{AugmentedBuffer, Batch};
pub use format::{read_dataset, write_csv, write_dataset, MAGIC, VERSION};
pub use generate::{env_hash, generate_dataset, Recipe};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub traj_end: bool,
}

impl Transition {
    fn is_finite(&self) -> bool {
        self.obs
            .iter()
            .chain(&self.action)
            .chain(&self.next_obs)
            .chain(std::iter::once(&self.reward))
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn undiscounted_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.transitions
            .iter()
            .rev()
            .fold(0.0, |acc, t| t.reward + gamma * acc)
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// An ordered set of transitions grouped into trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    obs_dim: usize,
    act_dim: usize,
    transitions: Vec<Transition>,
    traj_starts: Vec<usize>,
    /// Free-form provenance (`env_hash`, `recipe`, `gamma`, `seed`, ...).
    pub meta: BTreeMap<String, String>,
}

impl Dataset {
    /// Validates and indexes a transition list. Trajectory boundaries come
    /// from the `traj_end` flags; the final transition must close one.
    pub fn new(obs_dim: usize, act_dim: usize, transitions: Vec<Transition>) -> Result<Self> {
        let mut traj_starts = Vec::new();
        let mut open = false;
        for (i, t) in transitions.iter().enumerate() {
            if t.obs.len() != obs_dim || t.next_obs.len() != obs_dim {
                return Err(Error::Dimension {
                    what: "transition observation",
                    expected: obs_dim,
                    got: if t.obs.len() != obs_dim {
                        t.obs.len()
                    } else {
                        t.next_obs.len()
                    },
                });
            }
            if t.action.len() != act_dim {
                return Err(Error::Dimension {
                    what: "transition action",
                    expected: act_dim,
                    got: t.action.len(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    what: "transition",
                    index: i,
                });
            }
            if !open {
                traj_starts.push(i);
                open = true;
            }
            if t.traj_end {
                open = false;
            }
        }
        if open {
            return Err(Error::Inconsistent(
                "last trajectory is not terminated by traj_end".into(),
            ));
        }
        Ok(Dataset {
            obs_dim,
            act_dim,
            transitions,
            traj_starts,
            meta: BTreeMap::new(),
        })
    }

    pub fn from_trajectories(
        obs_dim: usize,
        act_dim: usize,
        trajs: Vec<Trajectory>,
    ) -> Result<Self> {
        let mut all = Vec::new();
        for mut t in trajs {
            if t.is_empty() {
                continue;
            }
            for tr in &mut t.transitions {
                tr.traj_end = false;
            }
            t.transitions.last_mut().expect("non-empty").traj_end = true;
            all.extend(t.transitions);
        }
        Self::new(obs_dim, act_dim, all)
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn num_trajectories(&self) -> usize {
        self.traj_starts.len()
    }

    /// Index range of every trajectory, in order.
    pub fn trajectory_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.traj_starts.len());
        for (k, &s) in self.traj_starts.iter().enumerate() {
            let e = self
                .traj_starts
                .get(k + 1)
                .copied()
                .unwrap_or(self.transitions.len());
            out.push(s..e);
        }
        out
    }

    /// Trajectory id of every transition.
    pub fn trajectory_ids(&self) -> Vec<usize> {
        let mut ids = vec![0; self.len()];
        for (k, r) in self.trajectory_ranges().into_iter().enumerate() {
            for i in r {
                ids[i] = k;
            }
        }
        ids
    }

    /// Dataset action of the transition that follows `i` within its
    /// trajectory, if any.
    pub fn next_action(&self, i: usize) -> Option<&[f64]> {
        if self.transitions[i].traj_end {
            None
        } else {
            self.transitions.get(i + 1).map(|t| t.action.as_slice())
        }
    }

    /// Relabels rewards with `f(next_obs, action)`.
    pub fn relabeled<F: Fn(&[f64], &[f64]) -> f64>(&self, f: F) -> Dataset {
        let mut d = self.clone();
        for t in &mut d.transitions {
            t.reward = f(&t.next_obs, &t.action);
        }
        d
    }

    pub fn stats(&self) -> Result<Stats> {
        dataset_stats(self)
    }

    pub fn obs_matrix(&self) -> Array2<f64> {
        rows(
            self.transitions.iter().map(|t| t.obs.as_slice()),
            self.obs_dim,
        )
    }

    pub fn action_matrix(&self) -> Array2<f64> {
        rows(
            self.transitions.iter().map(|t| t.action.as_slice()),
            self.act_dim,
        )
    }
}

pub(crate) fn rows<'a, I: Iterator<Item = &'a [f64]>>(it: I, width: usize) -> Array2<f64> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in it {
        data.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, width), data).expect("rows have uniform width")
}

/// Zero-mean, unit-variance input transform. Columns with zero spread use a
/// unit scale so constant features pass through centred but unscaled.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: Array1::zeros(dim),
            std: Array1::ones(dim),
        }
    }

    /// Fits per-column statistics; degenerate columns get scale 1.
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(ndarray::Axis(0)) / n;
        let mut std = Array1::zeros(x.ncols());
        for (j, col) in x.columns().into_iter().enumerate() {
            let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
            std[j] = var.sqrt();
        }
        Normalizer::from_moments(mean, std)
    }

    pub fn from_moments(mean: Array1<f64>, std: Array1<f64>) -> Self {
        let std = std.mapv(|s| if s > 1e-8 && s.is_finite() { s } else { 1.0 });
        Normalizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        (&x - &self.mean) / &self.std
    }

    pub fn apply_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.std
    }

    pub fn invert_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        x * &self.std + &self.mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stats {
    pub r_max: f64,
    pub r_min: f64,
    /// Undiscounted return of every trajectory, in dataset order.
    pub trajectory_returns: Vec<f64>,
    pub obs_mean: Array1<f64>,
    /// Raw per-column standard deviation (zero for constant columns).
    pub obs_std: Array1<f64>,
}

impl Stats {
    pub fn obs_normalizer(&self) -> Normalizer {
        Normalizer::from_moments(self.obs_mean.clone(), self.obs_std.clone())
    }
}

pub fn dataset_stats(d: &Dataset) -> Result<Stats> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rewards = d.transitions.iter().map(|t| t.reward);
    let r_max = rewards.clone().fold(f64::NEG_INFINITY, f64::max);
    let r_min = rewards.fold(f64::INFINITY, f64::min);
    let trajectory_returns = d
        .trajectory_ranges()
        .into_iter()
        .map(|r| d.transitions[r].iter().map(|t| t.reward).sum())
        .collect();
    let obs = d.obs_matrix();
    let n = obs.nrows() as f64;
    let obs_mean = obs.sum_axis(ndarray::Axis(0)) / n;
    let obs_std = Array1::from_iter(
        obs.columns()
            .into_iter()
            .zip(&obs_mean)
            .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()),
    );
    Ok(Stats {
        r_max,
        r_min,
        trajectory_returns,
        obs_mean,
        obs_std,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn tr(obs: f64, reward: f64, end: bool) -> Transition {
        Transition {
            obs: vec![obs],
            action: vec![0.0],
            reward,
            next_obs: vec![obs + 1.0],
            done: end,
            traj_end: end,
        }
    }

    #[test]
    fn r_max_is_largest_reward() {
        let d = Dataset::new(
            1,
            1,
            vec![tr(0.0, 0.0, false), tr(1.0, 2.0, false), tr(2.0, 1.0, true)],
        )
        .unwrap();
        assert_eq!(d.stats().unwrap().r_max, 2.0);
    }

    #[test]
    fn single_trajectory_return() {
        let d = Dataset::new(
            1,
            1,
            vec![tr(0.0, 1.0, false), tr(1.0, 1.0, false), tr(2.0, 1.0, true)],
        )
        .unwrap();
        assert_eq!(d.stats().unwrap().trajectory_returns, vec![3.0]);
    }

    #[test]
    fn constant_column_has_zero_std_and_unit_scale() {
        let d = Dataset::new(1, 1, vec![tr(5.0, 1.0, false), tr(5.0, 1.0, true)]).unwrap();
        let s = d.stats().unwrap();
        assert_eq!(s.obs_std[0], 0.0);
        assert_eq!(s.obs_normalizer().std[0], 1.0);
    }

    #[test]
    fn empty_dataset_has_no_stats() {
        let d = Dataset::new(1, 1, vec![]).unwrap();
        assert!(matches!(d.stats(), Err(Error::EmptyDataset)));
    }

    #[test]
    fn trajectory_index_follows_flags() {
        let d = Dataset::new(
            1,
            1,
            vec![
                tr(0.0, 0.0, false),
                tr(1.0, 0.0, true),
                tr(2.0, 0.0, true),
                tr(3.0, 0.0, false),
                tr(4.0, 0.0, true),
            ],
        )
        .unwrap();
        assert_eq!(d.trajectory_ranges(), vec![0..2, 2..3, 3..5]);
        assert_eq!(d.next_action(0), Some(&[0.0][..]));
        assert_eq!(d.next_action(1), None);
    }

    #[test]
    fn unterminated_trajectory_rejected() {
        assert!(Dataset::new(1, 1, vec![tr(0.0, 0.0, false)]).is_err());
    }
}
