//! Real-plus-synthetic replay buffer for agent training.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::Rng as _;

use super::{rows, Dataset, Transition};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Column-major view of a batch of transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    /// 1.0 for terminal transitions.
    pub dones: Array1<f64>,
    pub is_real: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition], real: &[bool]) -> Self {
        let od = ts.first().map(|t| t.obs.len()).unwrap_or(0);
        let ad = ts.first().map(|t| t.action.len()).unwrap_or(0);
        Batch {
            obs: rows(ts.iter().map(|t| t.obs.as_slice()), od),
            actions: rows(ts.iter().map(|t| t.action.as_slice()), ad),
            rewards: ts.iter().map(|t| t.reward).collect(),
            next_obs: rows(ts.iter().map(|t| t.next_obs.as_slice()), od),
            dones: ts.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
            is_real: real.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// The offline dataset plus a FIFO ring of model-generated transitions.
/// Real transitions are never evicted.
pub struct AugmentedBuffer<'a> {
    real: &'a Dataset,
    synthetic: VecDeque<Transition>,
    capacity: usize,
    inserted: u64,
    fallback_noted: bool,
}

impl<'a> AugmentedBuffer<'a> {
    pub fn new(real: &'a Dataset, capacity: usize) -> Self {
        AugmentedBuffer {
            real,
            synthetic: VecDeque::with_capacity(capacity.min(1 << 20)),
            capacity,
            inserted: 0,
            fallback_noted: false,
        }
    }

    /// Capacity of `100·|D|` synthetic transitions.
    pub fn with_default_capacity(real: &'a Dataset) -> Self {
        Self::new(real, 100 * real.len().max(1))
    }

    pub fn real(&self) -> &Dataset {
        self.real
    }

    pub fn real_len(&self) -> usize {
        self.real.len()
    }

    pub fn synthetic_len(&self) -> usize {
        self.synthetic.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total synthetic transitions ever inserted.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn extend<I: IntoIterator<Item = Transition>>(&mut self, items: I) {
        for t in items {
            if self.capacity == 0 {
                return;
            }
            if self.synthetic.len() == self.capacity {
                self.synthetic.pop_front();
            }
            self.synthetic.push_back(t);
            self.inserted += 1;
        }
    }

    /// Draws `round(f·n)` real transitions and the rest synthetic, each
    /// uniformly with replacement. With no synthetic data the whole batch is
    /// real.
    pub fn sample_batch(&mut self, n: usize, real_fraction: f64, rng: &mut Rng) -> Result<Batch> {
        if n == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.real.is_empty() && self.synthetic.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let f = real_fraction.clamp(0.0, 1.0);
        let mut n_real = (f * n as f64).round() as usize;
        if self.synthetic.is_empty() {
            if !self.fallback_noted && n_real < n {
                log::info!("synthetic buffer empty; sampling real transitions only");
                self.fallback_noted = true;
            }
            n_real = n;
        }
        if self.real.is_empty() {
            n_real = 0;
        }
        let mut picked: Vec<&Transition> = Vec::with_capacity(n);
        let mut real = Vec::with_capacity(n);
        let rt = self.real.transitions();
        for _ in 0..n_real {
            picked.push(&rt[rng.gen_range(0..rt.len())]);
            real.push(true);
        }
        for _ in n_real..n {
            picked.push(&self.synthetic[rng.gen_range(0..self.synthetic.len())]);
            real.push(false);
        }
        Ok(Batch::from_transitions(&picked, &real))
    }
}
