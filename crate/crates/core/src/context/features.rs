use serde::{Deserialize, Serialize};

use super::ContextError;
use crate::agents::{AcParams, RolloutBatch};
use crate::envs::NUM_ACTIONS;

/// Kinds of statistic a context may be built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Reward,
    Value,
    TdError,
    ActionProbs,
    States,
    GradCosine,
    PrevMeta,
}

impl Family {
    /// Layout order of the families inside a frame.
    pub const ALL: [Family; 7] = [
        Family::Reward,
        Family::Value,
        Family::TdError,
        Family::ActionProbs,
        Family::States,
        Family::GradCosine,
        Family::PrevMeta,
    ];

    /// Order in which the richness ablation adds families.
    pub const ABLATION_ORDER: [Family; 7] = [
        Family::Value,
        Family::Reward,
        Family::TdError,
        Family::ActionProbs,
        Family::GradCosine,
        Family::PrevMeta,
        Family::States,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Reward => "reward",
            Family::Value => "value",
            Family::TdError => "td_error",
            Family::ActionProbs => "action_probs",
            Family::States => "states",
            Family::GradCosine => "grad_cosine",
            Family::PrevMeta => "prev_meta",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }

    /// Families summarised as per-update mean and spread.
    fn has_spread(self) -> bool {
        matches!(self, Family::Reward | Family::Value | Family::TdError | Family::ActionProbs | Family::States)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    ActorCritic,
    QLambda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stat {
    Mean,
    Std,
}

/// One entry of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Channel {
    pub family: Family,
    pub stat: Stat,
    pub index: usize,
}

/// Sizes the frame layout depends on besides the spec itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayoutInfo {
    pub kind: LearnerKind,
    /// Grid cells of the environment (state-visitation channels).
    pub num_cells: usize,
    /// Number of tuned meta-parameters (previous-value channels).
    pub num_meta: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub families: Vec<Family>,
    pub history: usize,
    #[serde(default)]
    pub include_std: bool,
}

impl FeatureSpec {
    /// Mean reward only.
    pub fn reward(history: usize) -> Self {
        Self { families: vec![Family::Reward], history, include_std: false }
    }

    /// Reward, value and TD error with spreads.
    pub fn rich(history: usize) -> Self {
        Self { families: vec![Family::Reward, Family::Value, Family::TdError], history, include_std: true }
    }

    pub fn all(history: usize) -> Self {
        Self { families: Family::ALL.to_vec(), history, include_std: true }
    }

    pub fn has(&self, f: Family) -> bool {
        self.families.contains(&f)
    }

    pub fn validate(&self, kind: LearnerKind) -> Result<(), ContextError> {
        if self.history == 0 {
            return Err(ContextError::Spec("history length must be at least 1".into()));
        }
        if self.families.is_empty() {
            return Err(ContextError::Spec("a context needs at least one feature family".into()));
        }
        for (i, f) in self.families.iter().enumerate() {
            if self.families[..i].contains(f) {
                return Err(ContextError::Spec(format!("feature family {} listed twice", f.name())));
            }
            if kind == LearnerKind::QLambda && !matches!(f, Family::Reward | Family::Value | Family::TdError) {
                return Err(ContextError::Spec(format!(
                    "feature family {} is not available for Q(lambda) agents",
                    f.name()
                )));
            }
        }
        Ok(())
    }

    /// Frame channels in layout order: families in [`Family::ALL`] order,
    /// means before spreads inside a family.
    pub fn channels(&self, info: LayoutInfo) -> Vec<Channel> {
        let mut out = Vec::new();
        for f in Family::ALL.into_iter().filter(|f| self.has(*f)) {
            let width = match (info.kind, f) {
                (LearnerKind::QLambda, _) => 1,
                (_, Family::ActionProbs) => NUM_ACTIONS,
                (_, Family::States) => info.num_cells,
                (_, Family::PrevMeta) => info.num_meta.max(1),
                _ => 1,
            };
            let spread = info.kind == LearnerKind::ActorCritic && f.has_spread() && self.include_std;
            let stats: &[Stat] = if spread { &[Stat::Mean, Stat::Std] } else { &[Stat::Mean] };
            for stat in stats {
                out.extend((0..width).map(|index| Channel { family: f, stat: *stat, index }));
            }
        }
        out
    }

    pub fn frame_dim(&self, info: LayoutInfo) -> usize {
        self.channels(info).len()
    }

    /// Flattened meta-network input size.
    pub fn input_dim(&self, info: LayoutInfo) -> usize {
        self.frame_dim(info) * self.history
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.max(0.0).sqrt())
}

/// `1 − cos(a, b)`; 0 when either vector is zero.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    1.0 - (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Learner statistics that are not in the rollout itself.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AcExtras {
    /// Cosine distance between the two previous inner gradients (0 if unknown).
    pub grad_cosine: f64,
    /// Meta-parameter values used by the previous update.
    pub prev_meta: Vec<f64>,
}

fn push_stats(out: &mut Vec<f64>, cols: &[Vec<f64>], spread: bool) {
    let stats: Vec<(f64, f64)> = cols.iter().map(|c| mean_std(c)).collect();
    out.extend(stats.iter().map(|s| s.0));
    if spread {
        out.extend(stats.iter().map(|s| s.1));
    }
}

/// Raw (unnormalized) actor-critic frame for the rollout used by one update,
/// evaluated under the parameters that update starts from.
pub fn compute_ac_frame(
    spec: &FeatureSpec,
    info: LayoutInfo,
    batch: &RolloutBatch,
    params: &AcParams,
    gamma: f64,
    extras: &AcExtras,
) -> Vec<f64> {
    let n = batch.len();
    let spread = spec.include_std;
    let need_values = spec.has(Family::Value) || spec.has(Family::TdError);
    let values = if need_values {
        let mut x = batch.obs.clone();
        x.extend_from_slice(&batch.bootstrap_obs);
        params.value.eval_batch(&x, n + 1)
    } else {
        Vec::new()
    };
    let mut out = Vec::with_capacity(spec.frame_dim(info));
    for f in Family::ALL.into_iter().filter(|f| spec.has(*f)) {
        match f {
            Family::Reward => push_stats(&mut out, &[batch.rewards.clone()], spread),
            Family::Value => push_stats(&mut out, &[values[..n].to_vec()], spread),
            Family::TdError => {
                let td: Vec<f64> = (0..n)
                    .map(|t| batch.rewards[t] + gamma * batch.continuations[t] * values[t + 1] - values[t])
                    .collect();
                push_stats(&mut out, &[td], spread);
            }
            Family::ActionProbs => {
                let logits = params.policy.eval_batch(&batch.obs, n);
                let mut cols = vec![Vec::with_capacity(n); NUM_ACTIONS];
                for row in logits.chunks(NUM_ACTIONS) {
                    for (a, p) in crate::agents::softmax(row).into_iter().enumerate() {
                        cols[a].push(p);
                    }
                }
                push_stats(&mut out, &cols, spread);
            }
            Family::States => {
                let mut cols = vec![vec![0.0; n]; info.num_cells];
                for (t, c) in batch.cells.iter().enumerate() {
                    cols[*c][t] = 1.0;
                }
                push_stats(&mut out, &cols, spread);
            }
            Family::GradCosine => out.push(extras.grad_cosine),
            Family::PrevMeta => {
                let k = info.num_meta.max(1);
                out.extend((0..k).map(|i| extras.prev_meta.get(i).copied().unwrap_or(0.0)));
            }
        }
    }
    out
}

/// `r + γ·c·max_a q(s', a) − q(s, a)`.
pub fn q_td_error(reward: f64, continuation: f64, q_sa: f64, next_q: &[f64], gamma: f64) -> f64 {
    let max_next = next_q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    reward + gamma * continuation * max_next - q_sa
}

/// Raw Q(λ) frame for one environment step.
pub fn compute_q_frame(spec: &FeatureSpec, reward: f64, q_sa: f64, td_error: f64) -> Vec<f64> {
    Family::ALL
        .into_iter()
        .filter(|f| spec.has(*f))
        .map(|f| match f {
            Family::Reward => reward,
            Family::Value => q_sa,
            _ => td_error,
        })
        .collect()
}
