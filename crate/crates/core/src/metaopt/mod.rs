//! Outer loop: plain meta-gradients through the last K inner updates,
//! bootstrapped meta-gradients against a target L−1 updates ahead, and the
//! ε-greedy variant for Q(λ), plus the drivers that run a whole lifetime.

mod ac_runner;
mod objectives;
mod q_runner;
mod state;

pub use ac_runner::{unroll_ac, AcRunner};
pub use objectives::{bmg_outer_loss_ac, bmg_outer_loss_q, kl_categorical, mg_outer_loss, EPS_CLAMP, LOG_FLOOR};
pub use q_runner::QRunner;
pub use state::{direct_init, ContextState, MetaKind, MetaState};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentError;
use crate::context::{ContextError, LearnerKind};
use crate::diffkit::DiffError;
use crate::envs::EnvError;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum MetaError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{0}")]
    Usage(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mg,
    Bmg,
}

/// A meta-parameter the outer loop may tune.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaParam {
    AlphaEnt,
    AlphaL2,
    Epsilon,
}

impl MetaParam {
    /// Upper end of the range; also the meta-network output scale.
    pub fn scale(self) -> f64 {
        match self {
            MetaParam::AlphaL2 => crate::agents::ALPHA_L2_MAX,
            _ => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetaParam::AlphaEnt => "alpha_ent",
            MetaParam::AlphaL2 => "alpha_l2",
            MetaParam::Epsilon => "epsilon",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub objective: Objective,
    /// Inner updates differentiated through.
    pub k: usize,
    /// Target length (BMG only).
    #[serde(default = "default_l")]
    pub l: usize,
    /// Entropy weight of the MG outer loss.
    #[serde(default)]
    pub alpha_outer_ent: f64,
    pub meta_lr: f64,
}

fn default_l() -> usize {
    1
}

impl MetaConfig {
    pub fn validate(&self, kind: LearnerKind) -> Result<(), MetaError> {
        let bad = |m: String| Err(MetaError::Usage(m));
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            return bad(format!("meta_lr = {} must be positive", self.meta_lr));
        }
        if !(0.0..=1.0).contains(&self.alpha_outer_ent) {
            return bad(format!("alpha_outer_ent = {} outside [0, 1]", self.alpha_outer_ent));
        }
        match (kind, self.objective) {
            (LearnerKind::ActorCritic, Objective::Mg) if self.k == 0 => bad("MG needs k >= 1".into()),
            (LearnerKind::ActorCritic, Objective::Bmg) if self.k == 0 || self.l == 0 => {
                bad("actor-critic BMG needs k >= 1 and l >= 1".into())
            }
            (LearnerKind::QLambda, Objective::Mg) => {
                bad("Q(lambda) updates are not differentiable in epsilon; use the bmg objective".into())
            }
            (LearnerKind::QLambda, Objective::Bmg) if self.k != 0 => bad("Q(lambda) BMG uses k = 0".into()),
            (LearnerKind::QLambda, Objective::Bmg) if self.l < 2 => {
                bad("Q(lambda) BMG needs l >= 2 so the target differs from the current q".into())
            }
            _ => Ok(()),
        }
    }
}

/// Statistics of one inner update.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerRecord {
    pub env_step: u64,
    pub task_index: u64,
    pub mean_reward: f64,
    pub meta_values: Vec<f64>,
    pub inner_loss: f64,
}

/// Summary of one outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub outer_iteration: u64,
    /// Environment steps consumed so far, including this iteration.
    pub env_step: u64,
    pub task_index: u64,
    pub steps: u64,
    pub reward_sum: f64,
    /// Mean of the meta-parameter values used during the iteration.
    pub meta_values: Vec<f64>,
    pub inner_loss: Option<f64>,
    pub outer_loss: Option<f64>,
    /// Per-update records, filled only when requested.
    pub inner: Vec<InnerRecord>,
}

impl IterationMetrics {
    pub fn mean_reward(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.reward_sum / self.steps as f64
        }
    }
}

/// Accumulates per-update values into an [`IterationMetrics`].
#[derive(Debug, Default)]
struct IterationAcc {
    steps: u64,
    reward_sum: f64,
    meta_sum: Vec<f64>,
    meta_n: usize,
    loss_sum: f64,
    loss_n: usize,
    inner: Vec<InnerRecord>,
}

impl IterationAcc {
    fn add_meta(&mut self, values: &[f64]) {
        if self.meta_sum.is_empty() {
            self.meta_sum = vec![0.0; values.len()];
        }
        self.meta_sum.iter_mut().zip(values).for_each(|(s, v)| *s += v);
        self.meta_n += 1;
    }

    fn add_loss(&mut self, loss: f64) {
        self.loss_sum += loss;
        self.loss_n += 1;
    }

    fn finish(
        self,
        outer_iteration: u64,
        env_step: u64,
        task_index: u64,
        fallback_meta: Vec<f64>,
        outer_loss: Option<f64>,
    ) -> IterationMetrics {
        let meta_values = if self.meta_n == 0 {
            fallback_meta
        } else {
            self.meta_sum.iter().map(|s| s / self.meta_n as f64).collect()
        };
        IterationMetrics {
            outer_iteration,
            env_step,
            task_index,
            steps: self.steps,
            reward_sum: self.reward_sum,
            meta_values,
            inner_loss: (self.loss_n > 0).then(|| self.loss_sum / self.loss_n as f64),
            outer_loss,
            inner: self.inner,
        }
    }
}

/// A learner and its outer loop driven over one lifetime.
pub trait Runner {
    /// Runs one outer iteration; `None` once the lifetime is used up.
    fn next_iteration(&mut self) -> Result<Option<IterationMetrics>, MetaError>;
    fn env_steps(&self) -> u64;
    fn lifetime(&self) -> u64;
    fn cumulative_return(&self) -> f64;
    fn meta(&self) -> &MetaState;
    /// Keep per-update records in the returned metrics.
    fn set_record_inner(&mut self, on: bool);
}
