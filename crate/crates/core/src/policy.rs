//! State-conditioned diagonal-Gaussian action distributions.

use ndarray::{Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::dataset::Normalizer;
use crate::error::Result;
use crate::numeric::{DiagGaussian, Mlp};
use crate::rng::Rng;

/// Gaussian two-head network over actions with its own observation
/// normalizer. Both the behavioral prior and the learned policy use it.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp<f64>,
    pub obs_norm: Normalizer,
}

impl GaussianPolicy {
    pub fn act_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// `(mean, clamped log_std)` rows for a batch of raw observations.
    pub fn dist_rows(&self, obs: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let raw = self
            .net
            .forward_batch(self.obs_norm.apply_rows(obs).view())?;
        Ok(self.net.split_gaussian(&raw))
    }

    pub fn dist(&self, obs: &[f64]) -> Result<DiagGaussian<f64>> {
        self.net
            .forward_gaussian(self.obs_norm.apply(ArrayView1::from(obs)).view())
    }

    /// Mean action, or a sample when `deterministic` is false.
    pub fn act(&self, obs: &[f64], deterministic: bool, rng: &mut Rng) -> Result<Vec<f64>> {
        let g = self.dist(obs)?;
        if deterministic {
            return Ok(g.mean().to_vec());
        }
        let noise =
            ndarray::Array1::from_iter((0..g.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        Ok(g.sample(noise.view())?.to_vec())
    }

    /// Sampled actions for a batch.
    pub fn sample_rows(&self, obs: &Array2<f64>, rng: &mut Rng) -> Result<Array2<f64>> {
        let (m, ls) = self.dist_rows(obs)?;
        let noise =
            Array2::from_shape_simple_fn(m.raw_dim(), || rng.sample::<f64, _>(StandardNormal));
        Ok(m + ls.mapv(f64::exp) * noise)
    }

    pub fn write_into(&self, c: &mut Checkpoint, prefix: &str) {
        c.push_mlp(prefix, &self.net);
        c.push_vec(format!("{prefix}.obs_mean"), &self.obs_norm.mean);
        c.push_vec(format!("{prefix}.obs_std"), &self.obs_norm.std);
    }

    pub fn read_from(c: &Checkpoint, prefix: &str) -> Result<Self> {
        Ok(GaussianPolicy {
            net: c.mlp(prefix)?,
            obs_norm: Normalizer {
                mean: c.vec(&format!("{prefix}.obs_mean"))?,
                std: c.vec(&format!("{prefix}.obs_std"))?,
            },
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("policy");
        self.write_into(&mut c, "policy");
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Self::read_from(c, "policy")
    }
}
