use rand_chacha::ChaCha8Rng;

use super::objectives::{bmg_outer_loss_ac, mg_outer_loss};
use super::state::MetaState;
use super::{InnerRecord, IterationAcc, IterationMetrics, MetaConfig, MetaError, MetaParam, Objective, Runner};
use crate::agents::{ac_act, ac_update, ac_update_plain, AcParams, InnerHyper, RolloutBatch};
use crate::context::{compute_ac_frame, cosine_distance, AcExtras};
use crate::diffkit::{Tape, Var};
use crate::envs::Environment;

/// Records `batches.len()` differentiable inner updates starting from
/// `params`; `metas[i]` holds the (α_ent, α_L2) variables used by update i.
pub fn unroll_ac(
    tape: &mut Tape,
    params: &[Var],
    split: usize,
    batches: &[RolloutBatch],
    metas: &[(Var, Option<Var>)],
    hyper: &InnerHyper,
) -> Result<Vec<Var>, MetaError> {
    if batches.len() != metas.len() {
        return Err(MetaError::Usage("one meta-parameter set per batch is required".into()));
    }
    let mut vars = params.to_vec();
    for (b, (ent, l2)) in batches.iter().zip(metas) {
        vars = ac_update(tape, &vars, split, b, *ent, *l2, hyper, true)?.0;
    }
    Ok(vars)
}

/// The environment side of a lifetime: one continuing stream with an exact
/// step budget.
struct Stream {
    env: Box<dyn Environment>,
    rng: ChaCha8Rng,
    obs: Vec<f64>,
    steps: u64,
    lifetime: u64,
    cumulative: f64,
    rollout_len: usize,
}

impl Stream {
    /// Acts for one rollout. A rollout cut short by the end of the lifetime
    /// still consumes its steps but is not returned.
    fn collect(&mut self, params: &AcParams, acc: &mut IterationAcc) -> Result<Option<RolloutBatch>, MetaError> {
        let n = (self.lifetime - self.steps).min(self.rollout_len as u64) as usize;
        let mut batch = RolloutBatch::new(self.obs.len());
        for _ in 0..n {
            let cell = self.env.agent_cell();
            let (a, _, probs) = ac_act(params, &self.obs, &mut self.rng);
            let t = self.env.step(a)?;
            self.steps += 1;
            self.cumulative += t.reward;
            acc.steps += 1;
            acc.reward_sum += t.reward;
            batch.push(&t, &probs, cell);
            self.obs = t.next_obs;
        }
        Ok((n == self.rollout_len).then_some(batch))
    }

    fn done(&self) -> bool {
        self.steps >= self.lifetime
    }
}

/// Actor-critic learner with a fixed, directly meta-learned or contextual
/// entropy (and optionally L2) coefficient.
pub struct AcRunner {
    stream: Stream,
    params: AcParams,
    hyper: InnerHyper,
    meta: MetaState,
    config: Option<MetaConfig>,
    /// Flattened gradients of the last two inner updates, newest first.
    grads: (Option<Vec<f64>>, Option<Vec<f64>>),
    prev_meta: Vec<f64>,
    outer_iteration: u64,
    record_inner: bool,
}

impl AcRunner {
    pub fn new(
        env: Box<dyn Environment>,
        params: AcParams,
        hyper: InnerHyper,
        rollout_len: usize,
        lifetime: u64,
        meta: MetaState,
        config: Option<MetaConfig>,
        explore_rng: ChaCha8Rng,
    ) -> Result<Self, MetaError> {
        hyper.validate()?;
        if rollout_len == 0 {
            return Err(MetaError::Usage("rollout length must be positive".into()));
        }
        if meta.is_learned() != config.is_some() {
            return Err(MetaError::Usage("learned meta-parameters need a meta config and vice versa".into()));
        }
        if meta.tuned.iter().any(|p| *p == MetaParam::Epsilon) {
            return Err(MetaError::Usage("epsilon is not a meta-parameter of the actor-critic".into()));
        }
        let obs = env.observe();
        let prev_meta = meta.values(None);
        Ok(Self {
            stream: Stream { env, rng: explore_rng, obs, steps: 0, lifetime, cumulative: 0.0, rollout_len },
            params,
            hyper,
            meta,
            config,
            grads: (None, None),
            prev_meta,
            outer_iteration: 0,
            record_inner: false,
        })
    }

    pub fn params(&self) -> &AcParams {
        &self.params
    }

    pub fn env(&self) -> &dyn Environment {
        self.stream.env.as_ref()
    }

    fn hyper_with(&self, values: &[f64]) -> InnerHyper {
        let mut h = self.hyper.clone();
        for (p, v) in self.meta.tuned.iter().zip(values) {
            match p {
                MetaParam::AlphaEnt => h.alpha_ent = *v,
                MetaParam::AlphaL2 => h.alpha_l2 = *v,
                MetaParam::Epsilon => {}
            }
        }
        h
    }

    /// Pushes the frame for an update about to use `batch` from `theta`
    /// and returns the new context (contextual runs only).
    fn observe_context(&mut self, batch: &RolloutBatch, theta: &AcParams) -> Option<Vec<f64>> {
        let grad_cosine = match &self.grads {
            (Some(a), Some(b)) => cosine_distance(a, b),
            _ => 0.0,
        };
        let extras = AcExtras { grad_cosine, prev_meta: self.prev_meta.clone() };
        let gamma = self.hyper.gamma;
        let ctx = self.meta.context_mut()?;
        let raw = compute_ac_frame(&ctx.spec, ctx.info, batch, theta, gamma, &extras);
        ctx.push_raw(&raw);
        Some(ctx.current())
    }

    fn after_update(&mut self, grad: Vec<f64>, values: Vec<f64>, loss: f64, batch: &RolloutBatch, acc: &mut IterationAcc) {
        self.grads = (Some(grad), self.grads.0.take());
        acc.add_meta(&values);
        acc.add_loss(loss);
        if self.record_inner {
            acc.inner.push(InnerRecord {
                env_step: self.stream.steps,
                task_index: self.stream.env.task_index(),
                mean_reward: batch.rewards.iter().sum::<f64>() / batch.len() as f64,
                meta_values: values.clone(),
                inner_loss: loss,
            });
        }
        self.prev_meta = values;
    }

    /// One untracked update of `theta` on `batch` under the current meta
    /// state.
    fn plain_update(&mut self, theta: &mut AcParams, batch: &RolloutBatch, acc: &mut IterationAcc) -> Result<(), MetaError> {
        let ctx = self.observe_context(batch, theta);
        let values = self.meta.values(ctx.as_deref());
        let h = self.hyper_with(&values);
        let info = ac_update_plain(theta, batch, &h)?;
        self.after_update(info.grad, values, info.loss, batch, acc);
        Ok(())
    }

    fn finish(&mut self, acc: IterationAcc, outer_loss: Option<f64>) -> IterationMetrics {
        self.outer_iteration += 1;
        acc.finish(
            self.outer_iteration,
            self.stream.steps,
            self.stream.env.task_index(),
            self.prev_meta.clone(),
            outer_loss,
        )
    }

    fn fixed_iteration(&mut self) -> Result<IterationMetrics, MetaError> {
        let mut acc = IterationAcc::default();
        let mut theta = self.params.clone();
        if let Some(b) = self.stream.collect(&theta, &mut acc)? {
            self.plain_update(&mut theta, &b, &mut acc)?;
        }
        self.params = theta;
        Ok(self.finish(acc, None))
    }

    fn meta_iteration(&mut self, cfg: MetaConfig) -> Result<IterationMetrics, MetaError> {
        let mut acc = IterationAcc::default();
        let mut tape = Tape::new();
        let (mut vars, split) = self.params.on_tape(&mut tape);
        let groups = self.meta.on_tape(&mut tape);
        let mut theta = self.params.clone();
        let mut last = None;

        for _ in 0..cfg.k {
            let Some(batch) = self.stream.collect(&theta, &mut acc)? else {
                self.params = theta;
                return Ok(self.finish(acc, None));
            };
            let ctx = self.observe_context(&batch, &theta);
            let etas = match ctx {
                Some(c) => self.meta.values_on_tape(&mut tape, &groups, &c, 1),
                None => self.meta.values_on_tape(&mut tape, &groups, &[], 1),
            };
            let values: Vec<f64> = etas.iter().map(|v| tape.item(*v)).collect();
            let mut alpha_ent = None;
            let mut alpha_l2 = None;
            for (p, v) in self.meta.tuned.iter().zip(&etas) {
                match p {
                    MetaParam::AlphaEnt => alpha_ent = Some(*v),
                    MetaParam::AlphaL2 => alpha_l2 = Some(*v),
                    MetaParam::Epsilon => {}
                }
            }
            let alpha_ent = alpha_ent.unwrap_or_else(|| tape.scalar(self.hyper.alpha_ent));
            if alpha_l2.is_none() && self.hyper.alpha_l2 != 0.0 {
                alpha_l2 = Some(tape.scalar(self.hyper.alpha_l2));
            }
            let (next, loss, grads) = ac_update(&mut tape, &vars, split, &batch, alpha_ent, alpha_l2, &self.hyper, true)?;
            let mut flat = Vec::new();
            for g in &grads {
                flat.extend_from_slice(tape.value(*g).data());
            }
            let loss = tape.item(loss.total);
            self.after_update(flat, values, loss, &batch, &mut acc);
            vars = next;
            theta = self.params.from_tape(&tape, &vars);
            last = Some(batch);
        }

        let outer = match cfg.objective {
            Objective::Mg => {
                let batch = last.expect("k >= 1");
                self.params = theta;
                mg_outer_loss(&mut tape, &vars, split, &batch, cfg.alpha_outer_ent, self.hyper.gamma)?
            }
            Objective::Bmg => {
                let mut target = theta.clone();
                let mut batch = last.expect("k >= 1");
                for _ in 1..cfg.l {
                    let Some(b) = self.stream.collect(&target, &mut acc)? else {
                        self.params = target;
                        return Ok(self.finish(acc, None));
                    };
                    self.plain_update(&mut target, &b, &mut acc)?;
                    batch = b;
                }
                let loss = bmg_outer_loss_ac(&mut tape, &vars, split, &target, &batch)?;
                self.params = target;
                loss
            }
        };
        let outer_value = tape.item(outer);
        self.meta.step(&mut tape, &groups, outer, cfg.meta_lr)?;
        Ok(self.finish(acc, Some(outer_value)))
    }
}

impl Runner for AcRunner {
    fn next_iteration(&mut self) -> Result<Option<IterationMetrics>, MetaError> {
        if self.stream.done() {
            return Ok(None);
        }
        let m = match self.config.clone() {
            Some(cfg) => self.meta_iteration(cfg)?,
            None => self.fixed_iteration()?,
        };
        Ok(Some(m))
    }

    fn env_steps(&self) -> u64 {
        self.stream.steps
    }

    fn lifetime(&self) -> u64 {
        self.stream.lifetime
    }

    fn cumulative_return(&self) -> f64 {
        self.stream.cumulative
    }

    fn meta(&self) -> &MetaState {
        &self.meta
    }

    fn set_record_inner(&mut self, on: bool) {
        self.record_inner = on;
    }
}
