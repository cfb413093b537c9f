//! Inner learners: an entropy-regularized actor-critic updated from 16-step
//! rollouts and a per-step Peng's Q(λ) learner with ε-greedy exploration.

pub(crate) mod ac;
mod policy;
mod qlambda;
mod returns;

pub use ac::{ac_act, ac_inner_loss, ac_update, ac_update_plain, AcLoss, AcParams, AcStepInfo, RolloutBatch};
pub use policy::{argmax, epsilon_greedy, sample_categorical, softmax};
pub use qlambda::{q_act, QLearner, QParams, QStepInfo, TRACE_WINDOW};
pub use returns::{n_step_returns, peng_q_targets, peng_q_targets_naive};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::DiffError;
use crate::envs::EnvError;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{0}")]
    Usage(String),
}

/// Inner-loop hyperparameters. `alpha_ent`, `alpha_l2` and `epsilon` are the
/// ones a meta-learner may adapt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerHyper {
    pub alpha_ent: f64,
    pub alpha_l2: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub gamma: f64,
    pub lambda: f64,
}

pub const ALPHA_L2_MAX: f64 = 1e-4;

impl InnerHyper {
    pub fn actor_critic(alpha_ent: f64) -> Self {
        Self { alpha_ent, alpha_l2: 0.0, epsilon: 0.0, lr: 0.1, gamma: 0.99, lambda: 0.9 }
    }

    pub fn q_lambda(epsilon: f64, lr: f64) -> Self {
        Self { alpha_ent: 0.0, alpha_l2: 0.0, epsilon, lr, gamma: 0.99, lambda: 0.9 }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let check = |name: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(AgentError::Usage(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        check("alpha_ent", self.alpha_ent, 0.0, 1.0)?;
        check("alpha_l2", self.alpha_l2, 0.0, ALPHA_L2_MAX)?;
        check("epsilon", self.epsilon, 0.0, 1.0)?;
        check("gamma", self.gamma, 0.0, 1.0)?;
        check("lambda", self.lambda, 0.0, 1.0)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AgentError::Usage(format!("lr = {} must be positive", self.lr)));
        }
        Ok(())
    }
}
