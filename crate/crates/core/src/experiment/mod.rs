//! Experiment configuration, evaluation and the pipeline, ablation and
//! transfer harnesses.

mod config;
mod eval;
mod metrics;
mod run;

use serde::{Deserialize, Serialize};

pub use config::{
    AblationConfig, DataConfig, EvalConfig, ExperimentConfig, References, TransferConfig,
};
pub use eval::{
    evaluate_policy, evaluate_with, normalized_score, reference_scores, sample_std, EvalResult,
};
pub use metrics::{arm_means, emit_metrics, ResultRow, Trace, CURVES_HEADER, RESULTS_HEADER};
pub use run::{
    arm_agent_config, content_hash, resolve_refs, run_ablation, run_arms, run_pipeline,
    run_transfer, stage_dataset, stage_dynamics, stage_policy, stage_prior, stage_relabel,
    ArmInputs, ArmOutcome, Provenance, RunContext, RunOutput, Staged,
};

/// Experimental arm; the label is what appears in result files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoPrior,
    NoRl,
    NoUncertainty,
    /// Full MABE with a uniformly weighted prior.
    Unweighted,
    /// Task transfer only: source dynamics, no prior.
    #[serde(rename = "transfer_i")]
    TransferI,
    /// Domain transfer only: trained in the shifted domain, scored zero-shot.
    #[serde(rename = "transfer_ii")]
    TransferIi,
    /// Task transfer with the policy initialized from the prior.
    #[serde(rename = "transfer_iii")]
    TransferIii,
    /// Source dynamics with the shifted-domain prior.
    #[serde(rename = "transfer_iv")]
    TransferIv,
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoPrior => "no_prior",
            Arm::NoRl => "no_rl",
            Arm::NoUncertainty => "no_uncertainty",
            Arm::Unweighted => "unweighted",
            Arm::TransferI => "transfer_i",
            Arm::TransferIi => "transfer_ii",
            Arm::TransferIii => "transfer_iii",
            Arm::TransferIv => "transfer_iv",
        }
    }

    pub fn is_transfer(self) -> bool {
        matches!(
            self,
            Arm::TransferI | Arm::TransferIi | Arm::TransferIii | Arm::TransferIv
        )
    }
}
