//! Reverse-mode differentiation over dense `f64` tensors, with enough
//! structure to differentiate through recorded optimizer steps.

mod adam;
mod mlp;
mod tape;
mod tensor;
mod unroll;

pub use adam::{adam_step, flush_tiny, AdamState, FLUSH_BELOW};
pub use mlp::Mlp;
pub use tape::{log_sum_exp, sigmoid, Tape, Var};
pub use tensor::Tensor;
pub use unroll::{grad_through_updates, sgd_step, sgd_step_var_lr, UnrollStep, UnrollTrace};

use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("numeric fault in {op}: {detail}")]
    NumericFault { op: &'static str, detail: String },
    #[error("structural error: {0}")]
    Structural(String),
}

/// Runs `f` on fresh leaves for `inputs` and returns its output, failing if
/// any recorded intermediate went non-finite.
pub fn record_forward<F>(tape: &mut Tape, inputs: &[Tensor], f: F) -> Result<(Var, Vec<Var>), DiffError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    if let Some(i) = inputs.iter().position(|t| !t.is_finite()) {
        return Err(DiffError::NumericFault { op: "input", detail: format!("input {i} is not finite") });
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(tape, &vars);
    tape.check()?;
    Ok((out, vars))
}
