use rand::Rng;

use super::ContextError;
use crate::diffkit::{adam_step, sigmoid, AdamState, Mlp, Tape, Tensor, Var};

/// Target of pretraining for the unscaled sigmoid output.
pub const PRETRAIN_TARGET: f64 = 0.5;
pub const PRETRAIN_TOLERANCE: f64 = 0.02;
pub const PRETRAIN_MAX_STEPS: usize = 10_000;
const PRETRAIN_BATCH: usize = 32;
const PRETRAIN_LR: f64 = 1e-3;

/// `output_scale · sigmoid(MLP(c))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaNet {
    pub mlp: Mlp,
    pub output_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub steps: usize,
    /// Mean |sigmoid output − 0.5| on the last check batch (unscaled).
    pub mean_abs_error: f64,
    pub converged: bool,
}

impl MetaNet {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        layers: usize,
        output_scale: f64,
        rng: &mut R,
    ) -> Result<Self, ContextError> {
        if input_dim == 0 {
            return Err(ContextError::Spec("meta-network input is empty".into()));
        }
        if !(output_scale > 0.0 && output_scale.is_finite()) {
            return Err(ContextError::Spec(format!("output scale {output_scale} must be positive")));
        }
        let mut sizes = vec![input_dim];
        sizes.extend(std::iter::repeat(hidden).take(layers));
        sizes.push(1);
        Ok(Self { mlp: Mlp::new(&sizes, rng), output_scale })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Untracked prediction for one context vector.
    pub fn predict(&self, context: &[f64]) -> f64 {
        self.output_scale * sigmoid(self.mlp.eval(context)[0])
    }

    /// Recorded predictions for `rows` contexts packed row-major; the
    /// contexts enter as constants, so only `weights` receive gradient.
    pub fn predict_on_tape(&self, tape: &mut Tape, weights: &[Var], contexts: &[f64], rows: usize) -> Var {
        let x = tape.constant(Tensor::from_parts(vec![rows, self.input_dim()], contexts.to_vec()));
        let z = Mlp::forward(tape, weights, x);
        let z = tape.reshape(z, &[rows]);
        let s = tape.sigmoid(z);
        tape.scale(s, self.output_scale)
    }

    /// Regresses the unscaled output towards 0.5 on uniform `[-1, 1]`
    /// contexts until the mean absolute error drops below 0.02 or the step
    /// cap is hit.
    pub fn pretrain<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<PretrainReport, ContextError> {
        let dim = self.input_dim();
        let mut adam = AdamState::new(self.mlp.params());
        let mut mae = f64::INFINITY;
        for step in 0..=PRETRAIN_MAX_STEPS {
            let xs: Vec<f64> = (0..PRETRAIN_BATCH * dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let mut tape = Tape::new();
            let w = self.mlp.on_tape(&mut tape);
            let x = tape.constant(Tensor::from_parts(vec![PRETRAIN_BATCH, dim], xs));
            let z = Mlp::forward(&mut tape, &w, x);
            let p = tape.sigmoid(z);
            mae = tape.value(p).data().iter().map(|v| (v - PRETRAIN_TARGET).abs()).sum::<f64>() / PRETRAIN_BATCH as f64;
            if mae < PRETRAIN_TOLERANCE {
                return Ok(PretrainReport { steps: step, mean_abs_error: mae, converged: true });
            }
            if step == PRETRAIN_MAX_STEPS {
                break;
            }
            let err = tape.affine(p, 1.0, -PRETRAIN_TARGET);
            let sq = tape.square(err);
            let loss = tape.mean(sq);
            let grads = tape.grad(loss, &w, false)?;
            let g: Vec<Tensor> = grads.iter().map(|v| tape.value(*v).clone()).collect();
            adam_step(self.mlp.params_mut(), &g, &mut adam, PRETRAIN_LR)?;
        }
        log::warn!("meta-network pretraining stopped at the step cap with error {mae:.4}");
        Ok(PretrainReport { steps: PRETRAIN_MAX_STEPS, mean_abs_error: mae, converged: false })
    }
}
