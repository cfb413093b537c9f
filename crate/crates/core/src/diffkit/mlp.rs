use rand::Rng;

use super::{Tape, Tensor, Var};

/// Fully connected ReLU network with a linear head.
///
/// Parameters are stored as `[w0, b0, w1, b1, ...]` with `w` of shape
/// `[fan_in, fan_out]`, so a batch `x: [m, fan_in]` maps to `x·w + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Uniform fan-in initialization, bound `1/sqrt(fan_in)`, for weights and biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut params = Vec::with_capacity(2 * (sizes.len() - 1));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weights = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let bias = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Tensor::from_parts(vec![fan_in, fan_out], weights));
            params.push(Tensor::from_parts(vec![fan_out], bias));
        }
        Self { sizes: sizes.to_vec(), params }
    }

    pub fn from_params(sizes: &[usize], params: Vec<Tensor>) -> Self {
        assert_eq!(params.len(), 2 * (sizes.len() - 1));
        for (l, w) in sizes.windows(2).enumerate() {
            assert_eq!(params[2 * l].shape(), &[w[0], w[1]]);
            assert_eq!(params[2 * l + 1].shape(), &[w[1]]);
        }
        Self { sizes: sizes.to_vec(), params }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn on_tape(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Reads parameter values back from the tape.
    pub fn from_tape(sizes: &[usize], tape: &Tape, vars: &[Var]) -> Self {
        Self::from_params(sizes, vars.iter().map(|v| tape.value(*v).clone()).collect())
    }

    /// Recorded forward pass for `x: [m, input_dim]`.
    pub fn forward(tape: &mut Tape, params: &[Var], x: Var) -> Var {
        let layers = params.len() / 2;
        let mut h = x;
        for l in 0..layers {
            let z = tape.matmul(h, params[2 * l]);
            h = tape.add_row(z, params[2 * l + 1]);
            if l + 1 < layers {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Untracked forward pass for a single input vector.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim());
        let layers = self.params.len() / 2;
        let mut h = x.to_vec();
        for l in 0..layers {
            let w = &self.params[2 * l];
            let b = self.params[2 * l + 1].data();
            let fan_out = b.len();
            let mut out = b.to_vec();
            for (i, hi) in h.iter().enumerate() {
                if *hi == 0.0 {
                    continue;
                }
                let row = &w.data()[i * fan_out..(i + 1) * fan_out];
                out.iter_mut().zip(row).for_each(|(o, wij)| *o += hi * wij);
            }
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        h
    }

    /// Untracked forward pass for one input keeping every layer's output
    /// (post-activation); the first entry is the input itself.
    pub fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(x.len(), self.input_dim());
        let layers = self.params.len() / 2;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        for l in 0..layers {
            let w = self.params[2 * l].data();
            let b = self.params[2 * l + 1].data();
            let fan_out = b.len();
            let mut out = b.to_vec();
            for (i, hi) in acts[l].iter().enumerate() {
                if *hi == 0.0 {
                    continue;
                }
                let row = &w[i * fan_out..(i + 1) * fan_out];
                out.iter_mut().zip(row).for_each(|(o, wij)| *o += hi * wij);
            }
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    /// Parameter gradient of `Σ_j delta_j · y_j` for the traced input, written
    /// into `grads` (shaped like the parameters). Matches the recorded
    /// backward pass, including the zero ReLU subgradient at 0.
    pub fn backward_into(&self, acts: &[Vec<f64>], delta: &[f64], grads: &mut [Tensor]) {
        let layers = self.params.len() / 2;
        assert_eq!(acts.len(), layers + 1);
        assert_eq!(grads.len(), self.params.len());
        let mut d = delta.to_vec();
        for l in (0..layers).rev() {
            let h = &acts[l];
            let fan_out = d.len();
            {
                let gw = grads[2 * l].data_mut();
                for (i, hi) in h.iter().enumerate() {
                    let row = &mut gw[i * fan_out..(i + 1) * fan_out];
                    if *hi == 0.0 {
                        row.iter_mut().for_each(|g| *g = 0.0);
                    } else {
                        row.iter_mut().zip(&d).for_each(|(g, dj)| *g = hi * dj);
                    }
                }
            }
            grads[2 * l + 1].data_mut().copy_from_slice(&d);
            if l > 0 {
                let w = self.params[2 * l].data();
                d = h
                    .iter()
                    .enumerate()
                    .map(|(i, hi)| {
                        if *hi > 0.0 {
                            w[i * fan_out..(i + 1) * fan_out].iter().zip(&d).map(|(a, b)| a * b).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
    }

    /// Untracked forward pass for `rows` inputs packed row-major.
    pub fn eval_batch(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        tape.detached(|t| {
            let xv = t.constant(Tensor::from_parts(vec![rows, self.input_dim()], x.to_vec()));
            let ps: Vec<Var> = self.params.iter().map(|p| t.constant(p.clone())).collect();
            let y = Self::forward(t, &ps, xv);
            t.value(y).data().to_vec()
        })
    }
}
