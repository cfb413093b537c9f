use rand::Rng;

use super::policy::{sample_categorical, softmax};
use super::returns::n_step_returns;
use super::{AgentError, InnerHyper};
use crate::diffkit::{sgd_step, Mlp, Tape, Tensor, Var};
use crate::envs::{Transition, NUM_ACTIONS};

/// Separate policy and value networks.
#[derive(Clone, Debug, PartialEq)]
pub struct AcParams {
    pub policy: Mlp,
    pub value: Mlp,
}

impl AcParams {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: usize, layers: usize, rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend(std::iter::repeat(hidden).take(layers));
        let mut policy_sizes = sizes.clone();
        policy_sizes.push(NUM_ACTIONS);
        sizes.push(1);
        Self { policy: Mlp::new(&policy_sizes, rng), value: Mlp::new(&sizes, rng) }
    }

    pub fn probs(&self, obs: &[f64]) -> Vec<f64> {
        softmax(&self.policy.eval(obs))
    }

    pub fn value_of(&self, obs: &[f64]) -> f64 {
        self.value.eval(obs)[0]
    }

    /// Tape leaves for `[policy.., value..]` and the split point.
    pub fn on_tape(&self, tape: &mut Tape) -> (Vec<Var>, usize) {
        let mut vars = self.policy.on_tape(tape);
        let split = vars.len();
        vars.extend(self.value.on_tape(tape));
        (vars, split)
    }

    pub fn from_tape(&self, tape: &Tape, vars: &[Var]) -> Self {
        let split = self.policy.params().len();
        Self {
            policy: Mlp::from_tape(self.policy.sizes(), tape, &vars[..split]),
            value: Mlp::from_tape(self.value.sizes(), tape, &vars[split..]),
        }
    }

    pub fn num_tensors(&self) -> usize {
        self.policy.params().len() + self.value.params().len()
    }
}

/// Consecutive transitions collected with fixed parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub obs_dim: usize,
    /// Row-major `[len, obs_dim]`.
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub continuations: Vec<f64>,
    /// Observation after the last transition, used for bootstrapping.
    pub bootstrap_obs: Vec<f64>,
    /// Behaviour-policy action probabilities, row-major `[len, NUM_ACTIONS]`.
    pub behaviour_probs: Vec<f64>,
    /// Agent cell at each step (state-visitation statistics).
    pub cells: Vec<usize>,
}

impl RolloutBatch {
    pub fn new(obs_dim: usize) -> Self {
        Self { obs_dim, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, t: &Transition, probs: &[f64], cell: usize) {
        assert_eq!(t.obs.len(), self.obs_dim);
        self.obs.extend_from_slice(&t.obs);
        self.actions.push(t.action);
        self.rewards.push(t.reward);
        self.continuations.push(t.continuation);
        self.bootstrap_obs = t.next_obs.clone();
        self.behaviour_probs.extend_from_slice(probs);
        self.cells.push(cell);
    }

    pub fn obs_row(&self, t: usize) -> &[f64] {
        &self.obs[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    /// Observation following step `t`.
    pub fn next_obs_row(&self, t: usize) -> &[f64] {
        if t + 1 < self.len() {
            self.obs_row(t + 1)
        } else {
            &self.bootstrap_obs
        }
    }
}

/// Individual loss terms recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct AcLoss {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    pub l2: Option<Var>,
    /// Row-wise log-probabilities `[len, NUM_ACTIONS]`.
    pub log_probs: Var,
}

/// Policy term `-mean(log π(a|s) Â)` and negative-entropy term for the given
/// log-probabilities; advantages are constants.
pub(crate) fn policy_and_entropy_terms(tape: &mut Tape, log_probs: Var, actions: &[usize], advantages: &[f64]) -> (Var, Var) {
    let lp_a = tape.gather(log_probs, actions);
    let adv = tape.constant(Tensor::vector(advantages.to_vec()));
    let weighted = tape.mul(lp_a, adv);
    let mean = tape.mean(weighted);
    let policy = tape.neg(mean);

    let p = tape.exp(log_probs);
    let plogp = tape.mul(p, log_probs);
    let per_row = tape.row_sum(plogp);
    let entropy = tape.mean(per_row);
    (policy, entropy)
}

/// Forward pass of the policy network on the batch observations.
pub(crate) fn batch_log_probs(tape: &mut Tape, policy: &[Var], batch: &RolloutBatch) -> Var {
    let x = tape.constant(Tensor::from_parts(vec![batch.len(), batch.obs_dim], batch.obs.clone()));
    let logits = Mlp::forward(tape, policy, x);
    tape.log_softmax(logits)
}

/// n-step returns and advantages under the value network `value` (constants).
pub(crate) fn returns_and_advantages(
    tape: &mut Tape,
    value: &[Var],
    batch: &RolloutBatch,
    gamma: f64,
) -> (Vec<f64>, Vec<f64>, Var) {
    let n = batch.len();
    let x = tape.constant(Tensor::from_parts(vec![n, batch.obs_dim], batch.obs.clone()));
    let v = Mlp::forward(tape, value, x);
    let v = tape.reshape(v, &[n]);
    let bootstrap = tape.detached(|t| {
        let xb = t.constant(Tensor::from_parts(vec![1, batch.obs_dim], batch.bootstrap_obs.clone()));
        let vb = Mlp::forward(t, value, xb);
        t.value(vb).data()[0]
    });
    let returns = n_step_returns(&batch.rewards, &batch.continuations, bootstrap, gamma);
    let advantages = returns.iter().zip(tape.value(v).data()).map(|(g, v)| g - v).collect();
    (returns, advantages, v)
}

/// `L_π + L_v + α_ent·L_ent + α_L2·L_L2`, recorded on `tape`.
///
/// `params` holds the policy tensors followed by the value tensors, split at
/// `split`. `alpha_ent` and `alpha_l2` are scalar tape variables so a
/// meta-learner can differentiate through them; `alpha_l2 = None` drops the
/// L2 term altogether.
pub fn ac_inner_loss(
    tape: &mut Tape,
    params: &[Var],
    split: usize,
    batch: &RolloutBatch,
    alpha_ent: Var,
    alpha_l2: Option<Var>,
    gamma: f64,
) -> Result<AcLoss, AgentError> {
    if batch.is_empty() {
        return Err(AgentError::Usage("empty rollout".into()));
    }
    let (policy_p, value_p) = params.split_at(split);
    let log_probs = batch_log_probs(tape, policy_p, batch);
    let (returns, advantages, v) = returns_and_advantages(tape, value_p, batch, gamma);
    let (policy, entropy) = policy_and_entropy_terms(tape, log_probs, &batch.actions, &advantages);

    let g = tape.constant(Tensor::vector(returns));
    let err = tape.sub(g, v);
    let sq = tape.square(err);
    let msq = tape.mean(sq);
    let value = tape.scale(msq, 0.5);

    let mut total = tape.add(policy, value);
    let ent_term = tape.scale_by(entropy, alpha_ent);
    total = tape.add(total, ent_term);

    let l2 = alpha_l2.map(|a| {
        // weight matrices of both networks; biases are not regularized
        let mut acc: Option<Var> = None;
        for (i, w) in params.iter().enumerate() {
            let local = if i < split { i } else { i - split };
            if local % 2 == 1 {
                continue;
            }
            let sq = tape.square(*w);
            let s = tape.sum(sq);
            acc = Some(match acc {
                Some(prev) => tape.add(prev, s),
                None => s,
            });
        }
        let l2 = acc.expect("networks have weights");
        let term = tape.scale_by(l2, a);
        total = tape.add(total, term);
        l2
    });

    tape.check()?;
    Ok(AcLoss { total, policy, value, entropy, l2, log_probs })
}

/// One SGD step on the inner loss, recorded so that the new parameters stay
/// differentiable with respect to the α variables (when `create_graph`).
pub fn ac_update(
    tape: &mut Tape,
    params: &[Var],
    split: usize,
    batch: &RolloutBatch,
    alpha_ent: Var,
    alpha_l2: Option<Var>,
    hyper: &InnerHyper,
    create_graph: bool,
) -> Result<(Vec<Var>, AcLoss, Vec<Var>), AgentError> {
    let loss = ac_inner_loss(tape, params, split, batch, alpha_ent, alpha_l2, hyper.gamma)?;
    let grads = tape.grad(loss.total, params, create_graph)?;
    let next = sgd_step(tape, params, &grads, hyper.lr);
    tape.check()?;
    Ok((next, loss, grads))
}

/// Diagnostics of an untracked update.
#[derive(Clone, Debug, PartialEq)]
pub struct AcStepInfo {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy_loss: f64,
    /// Flattened gradient of the inner loss.
    pub grad: Vec<f64>,
}

/// Applies one inner update in place with fixed coefficients and no meta-gradient tracking.
pub fn ac_update_plain(params: &mut AcParams, batch: &RolloutBatch, hyper: &InnerHyper) -> Result<AcStepInfo, AgentError> {
    let mut tape = Tape::new();
    let (vars, split) = params.on_tape(&mut tape);
    let alpha_ent = tape.scalar(hyper.alpha_ent);
    let alpha_l2 = (hyper.alpha_l2 != 0.0).then(|| tape.scalar(hyper.alpha_l2));
    let loss = ac_inner_loss(&mut tape, &vars, split, batch, alpha_ent, alpha_l2, hyper.gamma)?;
    let grads = tape.grad(loss.total, &vars, false)?;
    let mut flat = Vec::new();
    for g in &grads {
        flat.extend_from_slice(tape.value(*g).data());
    }
    let tensors = params.policy.params_mut().iter_mut().chain(params.value.params_mut().iter_mut());
    for (p, g) in tensors.zip(&grads) {
        let gd = tape.value(*g).data();
        p.data_mut().iter_mut().zip(gd).for_each(|(x, d)| *x -= hyper.lr * d);
    }
    Ok(AcStepInfo {
        loss: tape.item(loss.total),
        policy_loss: tape.item(loss.policy),
        value_loss: tape.item(loss.value),
        entropy_loss: tape.item(loss.entropy),
        grad: flat,
    })
}

/// Samples an action from the softmax policy; returns the action, its
/// log-probability and the full distribution.
pub fn ac_act<R: Rng + ?Sized>(params: &AcParams, obs: &[f64], rng: &mut R) -> (usize, f64, Vec<f64>) {
    let probs = params.probs(obs);
    let a = sample_categorical(&probs, rng);
    (a, probs[a].ln(), probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Networks with every weight zero: uniform policy, zero values.
    fn zero_params(obs_dim: usize) -> AcParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = AcParams::new(obs_dim, 4, 2, &mut rng);
        for t in p.policy.params_mut().iter_mut().chain(p.value.params_mut().iter_mut()) {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        p
    }

    fn single(reward: f64) -> RolloutBatch {
        let mut b = RolloutBatch::new(3);
        let t = Transition { obs: vec![1.0, 0.0, 0.0], action: 2, reward, next_obs: vec![0.0, 1.0, 0.0], continuation: 1.0 };
        b.push(&t, &[0.25; 4], 0);
        b
    }

    #[test]
    fn uniform_policy_single_transition() {
        let p = zero_params(3);
        let mut tape = Tape::new();
        let (vars, split) = p.on_tape(&mut tape);
        let a = tape.scalar(0.0);
        let loss = ac_inner_loss(&mut tape, &vars, split, &single(1.0), a, None, 0.0).unwrap();
        assert!((tape.item(loss.policy) - 4f64.ln()).abs() < 1e-12);
        assert!((tape.item(loss.value) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_only_loss() {
        let p = zero_params(3);
        let mut tape = Tape::new();
        let (vars, split) = p.on_tape(&mut tape);
        let a = tape.scalar(1.0);
        let l2 = tape.scalar(0.0);
        let loss = ac_inner_loss(&mut tape, &vars, split, &single(0.0), a, Some(l2), 0.99).unwrap();
        assert!((tape.item(loss.total) + 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn update_is_identity_when_gradient_vanishes() {
        // Zero networks, zero reward: advantage, value error and entropy gradient all vanish.
        let mut p = zero_params(3);
        let before = p.clone();
        let info = ac_update_plain(&mut p, &single(0.0), &InnerHyper::actor_critic(0.3)).unwrap();
        assert!(info.grad.iter().all(|g| *g == 0.0));
        assert_eq!(p, before);
    }

    #[test]
    fn alpha_ent_changes_the_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AcParams::new(3, 8, 2, &mut rng);
        let mut batch = RolloutBatch::new(3);
        for k in 0..4 {
            let obs = vec![k as f64 * 0.3, 1.0, -0.5];
            let t = Transition { obs: obs.clone(), action: k % 4, reward: 0.5, next_obs: obs, continuation: 1.0 };
            batch.push(&t, &[0.25; 4], 0);
        }
        let mut tape = Tape::new();
        let (vars, split) = p.on_tape(&mut tape);
        let alpha = tape.param(Tensor::scalar(0.2));
        let hyper = InnerHyper::actor_critic(0.2);
        let (next, _, _) = ac_update(&mut tape, &vars, split, &batch, alpha, None, &hyper, true).unwrap();
        let probe = tape.sum(next[0]);
        let d = tape.grad(probe, &[alpha], false).unwrap()[0];
        assert!(tape.item(d).abs() > 0.0);
    }
}
