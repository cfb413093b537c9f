use std::collections::VecDeque;

use rand::Rng;

use super::policy::{argmax, epsilon_greedy, sample_categorical};
use super::returns::peng_q_targets;
use super::{AgentError, InnerHyper};
use crate::diffkit::{adam_step, flush_tiny, AdamState, Mlp, Tensor};
use crate::envs::{Transition, NUM_ACTIONS};

/// Longest trailing trace used for a single λ-return.
pub const TRACE_WINDOW: usize = 16;
const GRAD_EMA_DECAY: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct QParams {
    pub q: Mlp,
}

impl QParams {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: usize, layers: usize, rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend(std::iter::repeat(hidden).take(layers));
        sizes.push(NUM_ACTIONS);
        Self { q: Mlp::new(&sizes, rng) }
    }

    pub fn q_values(&self, obs: &[f64]) -> Vec<f64> {
        self.q.eval(obs)
    }
}

#[derive(Clone, Debug)]
struct Pending {
    obs: Vec<f64>,
    action: usize,
    reward: f64,
    continuation: f64,
    next_q: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QStepInfo {
    pub loss: f64,
    pub target: f64,
    pub q_sa: f64,
}

/// Online Peng's Q(λ): every environment step adds one transition to a
/// trailing trace; once the trace holds [`TRACE_WINDOW`] steps its oldest
/// transition is regressed towards its λ-return. Continuation breaks inside
/// the trace cut the return off there.
#[derive(Clone, Debug)]
pub struct QLearner {
    pub params: QParams,
    grad_ema: Vec<Tensor>,
    scratch: Vec<Tensor>,
    adam: AdamState,
    pub lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    window: VecDeque<Pending>,
    updates: u64,
}

impl QLearner {
    pub fn new(params: QParams, hyper: &InnerHyper) -> Self {
        let grad_ema: Vec<Tensor> = params.q.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let adam = AdamState::new(params.q.params());
        let scratch = grad_ema.clone();
        Self {
            params,
            grad_ema,
            scratch,
            adam,
            lr: hyper.lr,
            gamma: hyper.gamma,
            lambda: hyper.lambda,
            window: VecDeque::with_capacity(TRACE_WINDOW),
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn grad_ema(&self) -> &[Tensor] {
        &self.grad_ema
    }

    /// Records a transition together with the q-values of its next state and
    /// performs the per-step update once the trace is long enough.
    pub fn observe(&mut self, t: &Transition, next_q: Vec<f64>) -> Result<Option<QStepInfo>, AgentError> {
        self.window.push_back(Pending {
            obs: t.obs.clone(),
            action: t.action,
            reward: t.reward,
            continuation: t.continuation,
            next_q,
        });
        if self.window.len() < TRACE_WINDOW {
            return Ok(None);
        }
        let rewards: Vec<f64> = self.window.iter().map(|p| p.reward).collect();
        let conts: Vec<f64> = self.window.iter().map(|p| p.continuation).collect();
        let next_q: Vec<Vec<f64>> = self.window.iter().map(|p| p.next_q.clone()).collect();
        let targets = peng_q_targets(&rewards, &conts, &next_q, self.lambda, self.gamma)?;
        let oldest = self.window.pop_front().expect("window is full");
        self.q_update(&oldest.obs, oldest.action, targets[0]).map(Some)
    }

    /// Squared-error step towards a fixed target: the raw gradient is smoothed
    /// by an exponential moving average (decay 0.9, no bias correction) and
    /// the average is fed to Adam.
    pub fn q_update(&mut self, obs: &[f64], action: usize, target: f64) -> Result<QStepInfo, AgentError> {
        let acts = self.params.q.forward_trace(obs);
        let q_sa = acts.last().expect("network has layers")[action];
        let err = q_sa - target;
        let mut delta = vec![0.0; NUM_ACTIONS];
        delta[action] = err;
        self.params.q.backward_into(&acts, &delta, &mut self.scratch);
        for (m, g) in self.grad_ema.iter_mut().zip(&self.scratch) {
            m.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(mi, gi)| *mi = flush_tiny(GRAD_EMA_DECAY * *mi + (1.0 - GRAD_EMA_DECAY) * gi));
        }
        adam_step(self.params.q.params_mut(), &self.grad_ema, &mut self.adam, self.lr)?;
        self.updates += 1;
        Ok(QStepInfo { loss: 0.5 * err * err, target, q_sa })
    }
}

/// ε-greedy action for `obs`; also returns the q-values it was based on.
pub fn q_act<R: Rng + ?Sized>(params: &QParams, obs: &[f64], epsilon: f64, rng: &mut R) -> (usize, Vec<f64>) {
    let q = params.q_values(obs);
    let a = if epsilon <= 0.0 { argmax(&q) } else { sample_categorical(&epsilon_greedy(&q, epsilon), rng) };
    (a, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn learner(lr: f64) -> QLearner {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        QLearner::new(QParams::new(3, 16, 2, &mut rng), &InnerHyper::q_lambda(0.1, lr))
    }

    #[test]
    fn zero_error_shrinks_updates() {
        let mut l = learner(1e-3);
        let obs = [1.0, 0.0, 0.0];
        // build up momentum to its steady state first
        for _ in 0..200 {
            l.q_update(&obs, 1, 5.0).unwrap();
        }
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let before = l.params.clone();
            let q_sa = l.params.q_values(&obs)[1];
            l.q_update(&obs, 1, q_sa).unwrap();
            let moved: f64 = before
                .q
                .params()
                .iter()
                .zip(l.params.q.params())
                .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>())
                .sum();
            assert!(moved <= prev + 1e-15);
            prev = moved;
        }
    }

    #[test]
    fn constant_gradient_ema_fixed_point() {
        // Feed the same gradient directly through the EMA rule.
        let g = 2.5;
        let mut m = 0.0;
        for n in 1..=50 {
            m = GRAD_EMA_DECAY * m + (1.0 - GRAD_EMA_DECAY) * g;
            let expected = g * (1.0 - GRAD_EMA_DECAY.powi(n));
            assert!((m - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_converges_on_toy_states() {
        let mut l = learner(3e-3);
        let states = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let targets = [0.5, -0.3, 1.0];
        for i in 0..6000 {
            let s = i % 3;
            l.q_update(&states[s], s, targets[s]).unwrap();
        }
        for s in 0..3 {
            let q = l.params.q_values(&states[s])[s];
            assert!(0.5 * (q - targets[s]).powi(2) < 1e-3, "state {s}: q={q}");
        }
    }

    #[test]
    fn greedy_act_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = learner(1e-3);
        let obs = [0.2, -0.1, 0.7];
        let best = argmax(&l.params.q_values(&obs));
        for _ in 0..50 {
            assert_eq!(q_act(&l.params, &obs, 0.0, &mut rng).0, best);
        }
    }

    #[test]
    fn update_starts_after_full_window() {
        let mut l = learner(1e-3);
        let t = Transition { obs: vec![1.0, 0.0, 0.0], action: 0, reward: 1.0, next_obs: vec![0.0, 1.0, 0.0], continuation: 1.0 };
        for k in 0..TRACE_WINDOW {
            let r = l.observe(&t, vec![0.0; 4]).unwrap();
            assert_eq!(r.is_some(), k + 1 == TRACE_WINDOW);
        }
        assert_eq!(l.updates(), 1);
    }
}
