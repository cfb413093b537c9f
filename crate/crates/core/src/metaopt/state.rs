use rand::Rng;

use super::{MetaError, MetaParam};
use crate::context::{
    normalize_and_push, probe_inputs, ContextBuffer, FeatureSpec, LayoutInfo, MetaNet, PretrainReport,
    RunningNormalizer,
};
use crate::diffkit::{adam_step, AdamState, Tape, Tensor, Var};

/// Context pipeline owned by one run.
#[derive(Clone, Debug)]
pub struct ContextState {
    pub spec: FeatureSpec,
    pub info: LayoutInfo,
    pub buffer: ContextBuffer,
    pub normalizer: RunningNormalizer,
}

impl ContextState {
    pub fn new(spec: FeatureSpec, info: LayoutInfo) -> Self {
        let dim = spec.frame_dim(info);
        let buffer = ContextBuffer::new(spec.history, dim);
        Self { spec, info, buffer, normalizer: RunningNormalizer::new(dim) }
    }

    pub fn push_raw(&mut self, raw: &[f64]) {
        normalize_and_push(&mut self.buffer, &mut self.normalizer, raw);
    }

    pub fn current(&self) -> Vec<f64> {
        self.buffer.flatten()
    }
}

#[derive(Clone, Debug)]
pub enum MetaKind {
    /// Hand-set values, never updated.
    Fixed(Vec<f64>),
    /// One free variable per tuned parameter, clamped into its range.
    Direct { values: Vec<Tensor>, adam: AdamState },
    /// One meta-network per tuned parameter over a shared context.
    Contextual { nets: Vec<MetaNet>, adams: Vec<AdamState>, ctx: ContextState },
}

/// How the tuned meta-parameters are produced and updated.
#[derive(Clone, Debug)]
pub struct MetaState {
    pub tuned: Vec<MetaParam>,
    pub kind: MetaKind,
}

/// Initial value of a free meta-parameter: the middle of its range.
pub fn direct_init(p: MetaParam) -> f64 {
    0.5 * p.scale()
}

impl MetaState {
    pub fn fixed(tuned: Vec<MetaParam>, values: Vec<f64>) -> Self {
        Self { tuned, kind: MetaKind::Fixed(values) }
    }

    pub fn direct(tuned: Vec<MetaParam>) -> Self {
        let init = tuned.iter().map(|p| direct_init(*p)).collect();
        Self::direct_from(tuned, init)
    }

    /// Free meta-parameters starting from `init`, clamped into range.
    pub fn direct_from(tuned: Vec<MetaParam>, init: Vec<f64>) -> Self {
        let values: Vec<Tensor> =
            tuned.iter().zip(&init).map(|(p, v)| Tensor::vector(vec![v.clamp(0.0, p.scale())])).collect();
        let adam = AdamState::new(&values);
        Self { tuned, kind: MetaKind::Direct { values, adam } }
    }

    /// Builds and pretrains one network per tuned parameter.
    pub fn contextual<R: Rng + ?Sized>(
        tuned: Vec<MetaParam>,
        spec: FeatureSpec,
        info: LayoutInfo,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<(Self, Vec<PretrainReport>), MetaError> {
        let input = spec.input_dim(info);
        let mut nets = Vec::new();
        let mut reports = Vec::new();
        for p in &tuned {
            let mut net = MetaNet::new(input, hidden, layers, p.scale(), rng)?;
            reports.push(net.pretrain(rng)?);
            nets.push(net);
        }
        let adams = nets.iter().map(|n| AdamState::new(n.mlp.params())).collect();
        let ctx = ContextState::new(spec, info);
        Ok((Self { tuned, kind: MetaKind::Contextual { nets, adams, ctx } }, reports))
    }

    pub fn is_learned(&self) -> bool {
        !matches!(self.kind, MetaKind::Fixed(_))
    }

    pub fn context(&self) -> Option<&ContextState> {
        match &self.kind {
            MetaKind::Contextual { ctx, .. } => Some(ctx),
            _ => None,
        }
    }

    pub fn context_mut(&mut self) -> Option<&mut ContextState> {
        match &mut self.kind {
            MetaKind::Contextual { ctx, .. } => Some(ctx),
            _ => None,
        }
    }

    /// Untracked values for the given context (ignored unless contextual).
    pub fn values(&self, context: Option<&[f64]>) -> Vec<f64> {
        match &self.kind {
            MetaKind::Fixed(v) => v.clone(),
            MetaKind::Direct { values, .. } => values.iter().map(Tensor::item).collect(),
            MetaKind::Contextual { nets, ctx, .. } => {
                let owned;
                let c = match context {
                    Some(c) => c,
                    None => {
                        owned = ctx.current();
                        &owned
                    }
                };
                nets.iter().map(|n| n.predict(c)).collect()
            }
        }
    }

    /// Places the learnable quantities on `tape`: one group per tuned
    /// parameter (a single scalar leaf, or the network weights).
    pub fn on_tape(&self, tape: &mut Tape) -> Vec<Vec<Var>> {
        match &self.kind {
            MetaKind::Fixed(v) => v.iter().map(|x| vec![tape.constant(Tensor::vector(vec![*x]))]).collect(),
            MetaKind::Direct { values, .. } => values.iter().map(|t| vec![tape.param(t.clone())]).collect(),
            MetaKind::Contextual { nets, .. } => nets.iter().map(|n| n.mlp.on_tape(tape)).collect(),
        }
    }

    /// Recorded values for `rows` contexts (row-major). Non-contextual
    /// values come back as length-1 variables.
    pub fn values_on_tape(&self, tape: &mut Tape, groups: &[Vec<Var>], contexts: &[f64], rows: usize) -> Vec<Var> {
        match &self.kind {
            MetaKind::Contextual { nets, .. } => {
                nets.iter().zip(groups).map(|(n, w)| n.predict_on_tape(tape, w, contexts, rows)).collect()
            }
            _ => groups.iter().map(|g| g[0]).collect(),
        }
    }

    /// Differentiates `loss` into the learnable groups and takes one Adam
    /// step; free values are clamped back into range. Returns the squared
    /// gradient norm.
    pub fn step(&mut self, tape: &mut Tape, groups: &[Vec<Var>], loss: Var, lr: f64) -> Result<f64, MetaError> {
        let flat: Vec<Var> = groups.iter().flatten().copied().collect();
        let grads = tape.grad(loss, &flat, false)?;
        let mut g: Vec<Tensor> = grads.iter().map(|v| tape.value(*v).clone()).collect();
        let norm: f64 = g.iter().map(Tensor::sq_norm).sum();
        if !norm.is_finite() {
            return Err(MetaError::Diff(crate::diffkit::DiffError::NumericFault {
                op: "meta_step",
                detail: "outer gradient is not finite".into(),
            }));
        }
        match &mut self.kind {
            MetaKind::Fixed(_) => {}
            MetaKind::Direct { values, adam } => {
                adam_step(values, &g, adam, lr)?;
                for (v, p) in values.iter_mut().zip(&self.tuned) {
                    let x = &mut v.data_mut()[0];
                    *x = x.clamp(0.0, p.scale());
                }
            }
            MetaKind::Contextual { nets, adams, .. } => {
                for (net, adam) in nets.iter_mut().zip(adams.iter_mut()) {
                    let rest = g.split_off(net.mlp.params().len());
                    adam_step(net.mlp.params_mut(), &g, adam, lr)?;
                    g = rest;
                }
            }
        }
        Ok(norm)
    }

    /// Predictions of the first network on the five canonical probes.
    pub fn probes(&self) -> Option<[f64; 5]> {
        match &self.kind {
            MetaKind::Contextual { nets, ctx, .. } => {
                let mut out = [0.0; 5];
                for (o, (_, c)) in out.iter_mut().zip(probe_inputs(&ctx.spec, ctx.info)) {
                    *o = nets[0].predict(&c);
                }
                Some(out)
            }
            _ => None,
        }
    }
}
