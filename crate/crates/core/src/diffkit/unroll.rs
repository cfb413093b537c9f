use super::{DiffError, Tape, Var};

/// One recorded inner update: the parameters it started from and the
/// meta-parameter tensors it consumed.
#[derive(Clone, Debug)]
pub struct UnrollStep {
    pub params_before: Vec<Var>,
    pub meta: Vec<Var>,
    pub checkpoint: usize,
}

/// The last K inner updates recorded on a single tape.
#[derive(Clone, Debug)]
pub struct UnrollTrace {
    tape_id: u64,
    steps: Vec<UnrollStep>,
    final_params: Vec<Var>,
}

impl UnrollTrace {
    pub fn new(tape: &Tape, initial: Vec<Var>) -> Self {
        Self { tape_id: tape.id(), steps: Vec::new(), final_params: initial }
    }

    /// Appends an update that consumed `meta` and produced `after`.
    pub fn record(&mut self, tape: &mut Tape, meta: Vec<Var>, after: Vec<Var>) {
        assert_eq!(tape.id(), self.tape_id, "trace and tape differ");
        let checkpoint = tape.checkpoint();
        let before = std::mem::replace(&mut self.final_params, after);
        self.steps.push(UnrollStep { params_before: before, meta, checkpoint });
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[UnrollStep] {
        &self.steps
    }

    pub fn final_params(&self) -> &[Var] {
        &self.final_params
    }

    pub fn tape_id(&self) -> u64 {
        self.tape_id
    }
}

/// Plain SGD step recorded on the tape: `θ - lr·g` for each parameter.
pub fn sgd_step(tape: &mut Tape, params: &[Var], grads: &[Var], lr: f64) -> Vec<Var> {
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            let step = tape.scale(*g, lr);
            tape.sub(*p, step)
        })
        .collect()
}

/// SGD step whose learning rate is itself a tape variable.
pub fn sgd_step_var_lr(tape: &mut Tape, params: &[Var], grads: &[Var], lr: Var) -> Vec<Var> {
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            let step = tape.scale_by(*g, lr);
            tape.sub(*p, step)
        })
        .collect()
}

/// Gradient of an outer loss with respect to meta-parameters (or meta-network
/// weights), flowing through every recorded inner update in `trace`.
pub fn grad_through_updates(
    tape: &mut Tape,
    trace: &UnrollTrace,
    outer_loss: Var,
    wrt_meta: &[Var],
) -> Result<Vec<Var>, DiffError> {
    if trace.tape_id != tape.id() {
        return Err(DiffError::Structural("unroll trace was recorded on a different tape".into()));
    }
    if trace.is_empty() {
        return Err(DiffError::Structural("unroll trace holds no inner updates".into()));
    }
    let all_owned = trace
        .steps
        .iter()
        .flat_map(|s| s.params_before.iter().chain(&s.meta))
        .chain(&trace.final_params)
        .all(|v| tape.owns(*v));
    if !all_owned {
        return Err(DiffError::Structural("unroll trace refers to variables outside the tape".into()));
    }
    if !tape.owns(outer_loss) {
        return Err(DiffError::Structural("outer loss is not on the unroll tape".into()));
    }
    tape.grad(outer_loss, wrt_meta, false)
}
