use super::MetaError;
use crate::agents::{argmax, AcParams, RolloutBatch};
use crate::diffkit::{Tape, Tensor, Var};
use crate::envs::NUM_ACTIONS;

/// Floor applied to probabilities before taking logs in the KL objectives.
pub const LOG_FLOOR: f64 = 1e-12;
/// ε is kept inside `[EPS_CLAMP, 1 − EPS_CLAMP]` inside the ε-greedy KL.
pub const EPS_CLAMP: f64 = 1e-6;

/// `L_π(θ_K, D) + α_outer·L_ent(θ_K, D)` with the inner-loss conventions;
/// `params` are the unrolled tape variables (policy first, value from `split`).
pub fn mg_outer_loss(
    tape: &mut Tape,
    params: &[Var],
    split: usize,
    batch: &RolloutBatch,
    alpha_outer_ent: f64,
    gamma: f64,
) -> Result<Var, MetaError> {
    if batch.is_empty() {
        return Err(MetaError::Usage("outer loss needs a nonempty rollout".into()));
    }
    let (policy, value) = params.split_at(split);
    let log_probs = crate::agents::ac::batch_log_probs(tape, policy, batch);
    let (_, adv, _) = crate::agents::ac::returns_and_advantages(tape, value, batch, gamma);
    let (pl, ent) = crate::agents::ac::policy_and_entropy_terms(tape, log_probs, &batch.actions, &adv);
    let e = tape.scale(ent, alpha_outer_ent);
    let loss = tape.add(pl, e);
    tape.check()?;
    Ok(loss)
}

/// Mean over the batch states of `KL(π_target ‖ π_θK)`. The target is a
/// constant; gradient reaches only the policy variables in `params`.
pub fn bmg_outer_loss_ac(
    tape: &mut Tape,
    params: &[Var],
    split: usize,
    target: &AcParams,
    batch: &RolloutBatch,
) -> Result<Var, MetaError> {
    if batch.is_empty() {
        return Err(MetaError::Usage("outer loss needs a nonempty rollout".into()));
    }
    let n = batch.len();
    let log_q = crate::agents::ac::batch_log_probs(tape, &params[..split], batch);
    let log_q = tape.clamp(log_q, LOG_FLOOR.ln(), 0.0);
    let logits = target.policy.eval_batch(&batch.obs, n);
    let mut p = Vec::with_capacity(n * NUM_ACTIONS);
    for row in logits.chunks(NUM_ACTIONS) {
        p.extend(crate::agents::softmax(row));
    }
    // Σ p log p is constant in θ_K
    let neg_entropy: f64 = p.iter().map(|pi| if *pi > 0.0 { pi * pi.max(LOG_FLOOR).ln() } else { 0.0 }).sum();
    let pv = tape.constant(Tensor::from_parts(vec![n, NUM_ACTIONS], p));
    let cross = tape.mul(pv, log_q);
    let cross = tape.sum(cross);
    let kl = tape.affine(cross, -1.0 / n as f64, neg_entropy / n as f64);
    tape.check()?;
    Ok(kl)
}

/// `Σ p log(p/q)` with both sides floored at [`LOG_FLOOR`] inside the logs.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(pi, qi)| if *pi > 0.0 { pi * (pi.max(LOG_FLOOR).ln() - qi.max(LOG_FLOOR).ln()) } else { 0.0 })
        .sum()
}

/// Mean over states of `KL(greedy(q_target) ‖ ε-greedy(q_current, ε))`,
/// i.e. `−log(1 − ε + ε/|A|)` where the argmaxes agree and `−log(ε/|A|)`
/// where they differ. `q_current`/`q_target` are row-major `[n, |A|]`;
/// `epsilon` is a length-`n` (or length-1, shared) tape variable.
pub fn bmg_outer_loss_q(
    tape: &mut Tape,
    q_current: &[f64],
    q_target: &[f64],
    epsilon: Var,
    num_actions: usize,
) -> Result<Var, MetaError> {
    if q_current.is_empty() || q_current.len() != q_target.len() || q_current.len() % num_actions != 0 {
        return Err(MetaError::Usage("q rows must be nonempty and of equal shape".into()));
    }
    let n = q_current.len() / num_actions;
    let eps = match tape.value(epsilon).len() {
        1 if n != 1 => tape.broadcast(epsilon, &[n]),
        len if len == n => tape.reshape(epsilon, &[n]),
        len => return Err(MetaError::Usage(format!("{len} ε values for {n} states"))),
    };
    let eps = tape.clamp(eps, EPS_CLAMP, 1.0 - EPS_CLAMP);
    let inv = 1.0 / num_actions as f64;
    let (mut coef, mut offset) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (cur, tgt) in q_current.chunks(num_actions).zip(q_target.chunks(num_actions)) {
        if argmax(cur) == argmax(tgt) {
            coef.push(inv - 1.0);
            offset.push(1.0);
        } else {
            coef.push(inv);
            offset.push(0.0);
        }
    }
    let c = tape.constant(Tensor::vector(coef));
    let o = tape.constant(Tensor::vector(offset));
    let scaled = tape.mul(eps, c);
    let prob = tape.add(scaled, o);
    let lp = tape.ln(prob);
    let m = tape.mean(lp);
    let loss = tape.neg(m);
    tape.check()?;
    Ok(loss)
}
