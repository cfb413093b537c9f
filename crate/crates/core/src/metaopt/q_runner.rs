use rand_chacha::ChaCha8Rng;

use super::objectives::bmg_outer_loss_q;
use super::state::MetaState;
use super::{InnerRecord, IterationAcc, IterationMetrics, MetaConfig, MetaError, MetaParam, Runner};
use crate::agents::{epsilon_greedy, sample_categorical, QLearner, QParams, TRACE_WINDOW};
use crate::context::{compute_q_frame, q_td_error};
use crate::diffkit::Tape;
use crate::envs::{Environment, NUM_ACTIONS};

/// Q(λ) learner with a fixed, directly meta-learned or contextual ε.
///
/// Every environment step is one inner update. With BMG an outer iteration
/// spans L−1 steps: the q-function at its start is compared with the one
/// reached at its end.
pub struct QRunner {
    env: Box<dyn Environment>,
    rng: ChaCha8Rng,
    learner: QLearner,
    epsilon: f64,
    meta: MetaState,
    config: Option<MetaConfig>,
    obs: Vec<f64>,
    /// q-values of `obs` under the current parameters.
    q_obs: Vec<f64>,
    steps: u64,
    lifetime: u64,
    cumulative: f64,
    outer_iteration: u64,
    last_eps: f64,
    record_inner: bool,
}

impl QRunner {
    pub fn new(
        env: Box<dyn Environment>,
        learner: QLearner,
        epsilon: f64,
        lifetime: u64,
        meta: MetaState,
        config: Option<MetaConfig>,
        explore_rng: ChaCha8Rng,
    ) -> Result<Self, MetaError> {
        if meta.is_learned() != config.is_some() {
            return Err(MetaError::Usage("learned meta-parameters need a meta config and vice versa".into()));
        }
        if meta.is_learned() && meta.tuned != [MetaParam::Epsilon] {
            return Err(MetaError::Usage("the Q(lambda) agent tunes epsilon only".into()));
        }
        let obs = env.observe();
        let q_obs = learner.params.q_values(&obs);
        Ok(Self {
            env,
            rng: explore_rng,
            learner,
            epsilon,
            meta,
            config,
            obs,
            q_obs,
            steps: 0,
            lifetime,
            cumulative: 0.0,
            outer_iteration: 0,
            last_eps: epsilon,
            record_inner: false,
        })
    }

    pub fn params(&self) -> &QParams {
        &self.learner.params
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    fn current_epsilon(&self, context: Option<&[f64]>) -> f64 {
        if self.meta.is_learned() {
            self.meta.values(context)[0]
        } else {
            self.epsilon
        }
    }

    /// One act-observe-update step; returns the ε used.
    fn env_step(&mut self, context: Option<&[f64]>, acc: &mut IterationAcc) -> Result<f64, MetaError> {
        let eps = self.current_epsilon(context);
        let a = sample_categorical(&epsilon_greedy(&self.q_obs, eps), &mut self.rng);
        let t = self.env.step(a)?;
        self.steps += 1;
        self.cumulative += t.reward;
        acc.steps += 1;
        acc.reward_sum += t.reward;

        let next_q = self.learner.params.q_values(&t.next_obs);
        let q_sa = self.q_obs[a];
        if let Some(ctx) = self.meta.context_mut() {
            let td = q_td_error(t.reward, t.continuation, q_sa, &next_q, self.learner.gamma);
            let raw = compute_q_frame(&ctx.spec, t.reward, q_sa, td);
            ctx.push_raw(&raw);
        }
        let info = self.learner.observe(&t, next_q.clone())?;
        acc.add_meta(&[eps]);
        if let Some(i) = &info {
            acc.add_loss(i.loss);
        }
        if self.record_inner {
            acc.inner.push(InnerRecord {
                env_step: self.steps,
                task_index: self.env.task_index(),
                mean_reward: t.reward,
                meta_values: vec![eps],
                inner_loss: info.as_ref().map_or(0.0, |i| i.loss),
            });
        }
        self.q_obs = if info.is_some() { self.learner.params.q_values(&t.next_obs) } else { next_q };
        self.obs = t.next_obs;
        self.last_eps = eps;
        Ok(eps)
    }

    fn finish(&mut self, acc: IterationAcc, outer_loss: Option<f64>) -> IterationMetrics {
        self.outer_iteration += 1;
        acc.finish(self.outer_iteration, self.steps, self.env.task_index(), vec![self.last_eps], outer_loss)
    }

    fn fixed_iteration(&mut self) -> Result<IterationMetrics, MetaError> {
        let mut acc = IterationAcc::default();
        for _ in 0..TRACE_WINDOW {
            if self.steps >= self.lifetime {
                break;
            }
            self.env_step(None, &mut acc)?;
        }
        Ok(self.finish(acc, None))
    }

    fn meta_iteration(&mut self, cfg: MetaConfig) -> Result<IterationMetrics, MetaError> {
        let mut acc = IterationAcc::default();
        let span = cfg.l - 1;
        let start = self.learner.params.clone();
        let contextual = self.meta.context().is_some();
        let mut states = Vec::with_capacity(span * self.obs.len());
        let mut contexts = Vec::new();
        for _ in 0..span {
            if self.steps >= self.lifetime {
                return Ok(self.finish(acc, None));
            }
            let ctx = self.meta.context().map(|c| c.current());
            states.extend_from_slice(&self.obs);
            if let Some(c) = &ctx {
                contexts.extend_from_slice(c);
            }
            self.env_step(ctx.as_deref(), &mut acc)?;
        }

        let dim = self.obs.len();
        let mut q_cur = Vec::with_capacity(span * NUM_ACTIONS);
        let mut q_tgt = Vec::with_capacity(span * NUM_ACTIONS);
        for s in states.chunks(dim) {
            q_cur.extend(start.q_values(s));
            q_tgt.extend(self.learner.params.q_values(s));
        }
        let mut tape = Tape::new();
        let groups = self.meta.on_tape(&mut tape);
        let rows = if contextual { span } else { 1 };
        let eps = self.meta.values_on_tape(&mut tape, &groups, &contexts, rows)[0];
        let loss = bmg_outer_loss_q(&mut tape, &q_cur, &q_tgt, eps, NUM_ACTIONS)?;
        let value = tape.item(loss);
        self.meta.step(&mut tape, &groups, loss, cfg.meta_lr)?;
        Ok(self.finish(acc, Some(value)))
    }
}

impl Runner for QRunner {
    fn next_iteration(&mut self) -> Result<Option<IterationMetrics>, MetaError> {
        if self.steps >= self.lifetime {
            return Ok(None);
        }
        let m = match self.config.clone() {
            Some(cfg) => self.meta_iteration(cfg)?,
            None => self.fixed_iteration()?,
        };
        Ok(Some(m))
    }

    fn env_steps(&self) -> u64 {
        self.steps
    }

    fn lifetime(&self) -> u64 {
        self.lifetime
    }

    fn cumulative_return(&self) -> f64 {
        self.cumulative
    }

    fn meta(&self) -> &MetaState {
        &self.meta
    }

    fn set_record_inner(&mut self, on: bool) {
        self.record_inner = on;
    }
}
