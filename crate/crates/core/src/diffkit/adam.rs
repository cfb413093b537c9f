use super::{DiffError, Tensor};

/// Bias-corrected Adam moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero moments shaped like `params`, with the optimizer constants used throughout
    /// this crate (β1 = 0.9, β2 = 0.999, ε = 1e-4).
    pub fn new(params: &[Tensor]) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-4)
    }

    pub fn with_hyper(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self { first_moment: zeros(), second_moment: zeros(), step_count: 0, beta1, beta2, eps }
    }
}

/// Moments below this magnitude are set to zero. Moments of units that stop
/// receiving gradient decay geometrically and would otherwise end up as
/// subnormal floats, which are very slow on common hardware.
pub const FLUSH_BELOW: f64 = 1e-150;

#[inline]
pub fn flush_tiny(x: f64) -> f64 {
    if x.abs() < FLUSH_BELOW {
        0.0
    } else {
        x
    }
}

/// One Adam update applied in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<(), DiffError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(DiffError::Structural(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(DiffError::Structural(format!(
                "adam: slot {i} param {:?} grad {:?} moment {:?}",
                p.shape(),
                g.shape(),
                state.first_moment[i].shape()
            )));
        }
        if !g.is_finite() {
            return Err(DiffError::NumericFault { op: "adam_step", detail: format!("non-finite gradient in slot {i}") });
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        let (inv_c1, inv_sqrt_c2) = (1.0 / c1, 1.0 / c2.sqrt());
        for ((pj, &gj), (mj, vj)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mj = flush_tiny(b1 * *mj + (1.0 - b1) * gj);
            *vj = flush_tiny(b2 * *vj + (1.0 - b2) * gj * gj);
            *pj -= lr * (*mj * inv_c1) / (vj.sqrt() * inv_sqrt_c2 + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight transcription of the textbook update, kept independent of `adam_step`.
    struct Reference {
        m: f64,
        v: f64,
        t: i32,
    }

    impl Reference {
        fn step(&mut self, x: f64, g: f64, lr: f64) -> f64 {
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let m_hat = self.m / (1.0 - 0.9f64.powi(self.t));
            let v_hat = self.v / (1.0 - 0.999f64.powi(self.t));
            x - lr * m_hat / (v_hat.sqrt() + 1e-4)
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut s = AdamState::new(&p);
        s.first_moment[0] = Tensor::vector(vec![0.5, 0.5]);
        s.second_moment[0] = Tensor::vector(vec![0.25, 0.25]);
        s.step_count = 3;
        let before = p.clone();
        let g = vec![Tensor::vector(vec![0.0, 0.0])];
        adam_step(&mut p, &g, &mut s, 0.001).unwrap();
        // m decays toward 0 but remains nonzero, so params move slightly; with zero moments they would not.
        assert!(s.first_moment[0].data()[0] < 0.5);
        assert!(s.second_moment[0].data()[0] < 0.25);

        let mut p2 = before.clone();
        let mut s2 = AdamState::new(&p2);
        adam_step(&mut p2, &g, &mut s2, 0.001).unwrap();
        assert_eq!(p2, before);
        assert_eq!(s2.step_count, 1);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 0.001).unwrap();
        let expected = -0.001 / (1.0 + 1e-4);
        assert!((p[0].item() - expected).abs() < 1e-15);
        assert!((p[0].item() + 9.999e-4).abs() < 1e-7);
    }

    #[test]
    fn quadratic_trajectory_matches_reference() {
        let mut p = vec![Tensor::vector(vec![3.0, -1.5])];
        let mut s = AdamState::new(&p);
        let mut refs = [Reference { m: 0.0, v: 0.0, t: 0 }, Reference { m: 0.0, v: 0.0, t: 0 }];
        let mut xs = [3.0, -1.5];
        let curv = [1.0, 4.0];
        for _ in 0..100 {
            let g: Vec<f64> = p[0].data().iter().zip(curv).map(|(x, c)| c * x).collect();
            adam_step(&mut p, &[Tensor::vector(g)], &mut s, 0.01).unwrap();
            for k in 0..2 {
                xs[k] = refs[k].step(xs[k], curv[k] * xs[k], 0.01);
            }
        }
        for k in 0..2 {
            assert!((p[0].data()[k] - xs[k]).abs() < 1e-12);
        }
        assert_eq!(s.step_count, 100);
        assert!(s.second_moment[0].data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::vector(vec![1.0])], &mut s, 0.1).unwrap_err();
        assert!(matches!(err, DiffError::Structural(_)));
    }
}
