use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::dataset::Recipe;
use crate::dynamics::DynamicsConfig;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::prior::PriorConfig;

use super::Arm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub recipe: Recipe,
    pub size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            recipe: Recipe::Mixed,
            size: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Episodes per evaluation.
    pub episodes: usize,
    /// Use the policy mean instead of sampling.
    pub deterministic: bool,
    /// The reported score averages evaluations after each of the last
    /// `final_evals` epochs.
    pub final_evals: usize,
    /// Episodes used to measure the random and expert reference scores.
    pub reference_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 10,
            deterministic: true,
            final_evals: 10,
            reference_episodes: 100,
        }
    }
}

/// Reference returns used for normalized scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct References {
    pub random_ref: f64,
    pub expert_ref: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub arms: Vec<Arm>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            arms: vec![Arm::Full, Arm::NoPrior, Arm::NoRl, Arm::NoUncertainty],
        }
    }
}

/// Two (domain, task) corners: `D₁` forward data under normal friction and
/// `D₂` backward data under the altered friction. The target is the
/// backward task under normal friction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub normal_friction: f64,
    pub shifted_friction: f64,
    pub source_direction: [f64; 2],
    pub target_direction: [f64; 2],
    pub source_recipe: Recipe,
    pub source_size: usize,
    pub prior_recipe: Recipe,
    pub prior_size: usize,
    pub arms: Vec<Arm>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            normal_friction: 0.05,
            shifted_friction: 0.45,
            source_direction: [1.0, 0.0],
            target_direction: [-1.0, 0.0],
            source_recipe: Recipe::Mixed,
            source_size: 20_000,
            prior_recipe: Recipe::Expert,
            prior_size: 10_000,
            arms: vec![
                Arm::TransferI,
                Arm::TransferIi,
                Arm::TransferIii,
                Arm::TransferIv,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub env: EnvSpec,
    pub data: DataConfig,
    pub dynamics: DynamicsConfig,
    pub prior: PriorConfig,
    pub agent: AgentConfig,
    pub eval: EvalConfig,
    /// Measured from the scripted controllers when absent.
    pub refs: Option<References>,
    pub ablation: AblationConfig,
    pub transfer: TransferConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "mabe".into(),
            seeds: vec![0],
            env: EnvSpec::point_mass(0.05, [1.0, 0.0]),
            data: DataConfig::default(),
            dynamics: DynamicsConfig::default(),
            prior: PriorConfig::default(),
            agent: AgentConfig::default(),
            eval: EvalConfig::default(),
            refs: None,
            ablation: AblationConfig::default(),
            transfer: TransferConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.dynamics.validate()?;
        self.agent.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.data.size == 0 || self.transfer.source_size == 0 || self.transfer.prior_size == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if self.eval.episodes == 0
            || self.eval.final_evals == 0
            || self.eval.reference_episodes == 0
        {
            return Err(Error::Config(
                "evaluation episode counts must be positive".into(),
            ));
        }
        if let Some(r) = self.refs {
            if !(r.expert_ref > r.random_ref) {
                return Err(Error::Config(format!(
                    "expert_ref {} must exceed random_ref {}",
                    r.expert_ref, r.random_ref
                )));
            }
        }
        Ok(())
    }
}
