use super::AgentError;

/// Discounted n-step returns over a rollout, bootstrapped from `bootstrap`
/// at its end. A zero continuation cuts the bootstrap at that step.
pub fn n_step_returns(rewards: &[f64], continuations: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = bootstrap;
    for t in (0..rewards.len()).rev() {
        g = rewards[t] + gamma * continuations[t] * g;
        out[t] = g;
    }
    out
}

/// Peng's Q(λ) returns by backward recursion:
/// `G_t = r_t + γ c_t [λ G_{t+1} + (1-λ) max_a q(s_{t+1}, a)]`, where the
/// return after the last step is `max_a q(s_T, a)`.
///
/// `next_q[t]` holds the q-values of the state reached by step `t`.
pub fn peng_q_targets(
    rewards: &[f64],
    continuations: &[f64],
    next_q: &[Vec<f64>],
    lambda: f64,
    gamma: f64,
) -> Result<Vec<f64>, AgentError> {
    let n = rewards.len();
    if n == 0 {
        return Err(AgentError::Usage("Peng's Q(λ) needs at least one transition".into()));
    }
    if continuations.len() != n || next_q.len() != n {
        return Err(AgentError::Usage(format!(
            "trajectory lengths differ: {} rewards, {} continuations, {} q rows",
            n,
            continuations.len(),
            next_q.len()
        )));
    }
    let max_q: Vec<f64> = next_q.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let mut out = vec![0.0; n];
    let mut next_g = max_q[n - 1];
    for t in (0..n).rev() {
        let g = rewards[t] + gamma * continuations[t] * (lambda * next_g + (1.0 - lambda) * max_q[t]);
        out[t] = g;
        next_g = g;
    }
    Ok(out)
}

/// Element-by-element forward expansion of the same return, kept as an
/// independent reference for the recursion above.
pub fn peng_q_targets_naive(
    rewards: &[f64],
    continuations: &[f64],
    next_q: &[Vec<f64>],
    lambda: f64,
    gamma: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let max_q = |t: usize| next_q[t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..n)
        .map(|t| {
            // Expand G_t = Σ_k (γλ)^(k-t) · discount-mask · [r_k + γ c_k (1-λ) maxq_k] + tail.
            let mut total = 0.0;
            let mut weight = 1.0;
            for k in t..n {
                let bootstrap_share = if k + 1 == n { 1.0 } else { 1.0 - lambda };
                total += weight * (rewards[k] + gamma * continuations[k] * bootstrap_share * max_q(k));
                weight *= gamma * lambda * continuations[k];
                if weight == 0.0 {
                    break;
                }
            }
            total
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_zero_is_one_step() {
        let r = [0.5, -1.0, 2.0];
        let c = [1.0, 1.0, 1.0];
        let q = vec![vec![1.0, 3.0], vec![0.0, -1.0], vec![2.0, 2.5]];
        let g = peng_q_targets(&r, &c, &q, 0.0, 0.9).unwrap();
        assert!((g[0] - (0.5 + 0.9 * 3.0)).abs() < 1e-12);
        assert!((g[1] - (-1.0 + 0.0)).abs() < 1e-12);
        assert!((g[2] - (2.0 + 0.9 * 2.5)).abs() < 1e-12);
    }

    #[test]
    fn lambda_one_gamma_one_is_suffix_sum() {
        let r = [1.0, 2.0, 3.0, 4.0];
        let c = [1.0; 4];
        let q = vec![vec![9.0], vec![9.0], vec![9.0], vec![0.0]];
        let g = peng_q_targets(&r, &c, &q, 1.0, 1.0).unwrap();
        assert_eq!(g, vec![10.0, 9.0, 7.0, 4.0]);
    }

    #[test]
    fn three_steps_match_direct_recursion() {
        let r = [0.2, -0.4, 1.0];
        let c = [1.0, 1.0, 1.0];
        let q = vec![vec![0.3, 0.7, -0.1], vec![1.2, 0.4, 0.0], vec![-0.5, -0.2, 0.6]];
        let (lam, gam) = (0.9, 0.99);
        // hand recursion
        let g2 = 1.0 + gam * 0.6;
        let g1 = -0.4 + gam * (lam * g2 + (1.0 - lam) * 1.2);
        let g0 = 0.2 + gam * (lam * g1 + (1.0 - lam) * 0.7);
        let g = peng_q_targets(&r, &c, &q, lam, gam).unwrap();
        for (a, b) in g.iter().zip([g0, g1, g2]) {
            assert!((a - b).abs() < 1e-12);
        }
        let naive = peng_q_targets_naive(&r, &c, &q, lam, gam);
        for (a, b) in g.iter().zip(naive) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_trajectory_is_usage_error() {
        assert!(matches!(peng_q_targets(&[], &[], &[], 0.9, 0.99), Err(AgentError::Usage(_))));
    }

    #[test]
    fn n_step_masking() {
        let g = n_step_returns(&[1.0, 1.0, 1.0], &[1.0, 0.0, 1.0], 10.0, 0.5);
        assert_eq!(g, vec![1.5, 1.0, 6.0]);
    }
}
