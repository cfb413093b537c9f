use std::collections::VecDeque;

/// Streaming per-channel mean and (population) variance, Welford style.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNormalizer {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

pub const NORMALIZER_EPS: f64 = 1e-8;

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Running means; zeros before any data.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Running variances; ones before any data.
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![1.0; self.dim()];
        }
        self.m2.iter().map(|m| (m / self.count as f64).max(0.0)).collect()
    }

    pub fn update(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.dim(), "normalizer width mismatch");
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    /// `tanh((x − mean)/sqrt(var + 1e-8))` under the current statistics.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let var = self.variance();
        x.iter()
            .zip(&self.mean)
            .zip(var)
            .map(|((v, m), s)| ((v - m) / (s + NORMALIZER_EPS).sqrt()).tanh())
            .collect()
    }
}

/// The last `history` normalized frames, newest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBuffer {
    history: usize,
    frame_dim: usize,
    frames: VecDeque<Vec<f64>>,
}

impl ContextBuffer {
    pub fn new(history: usize, frame_dim: usize) -> Self {
        Self { history, frame_dim, frames: VecDeque::with_capacity(history + 1) }
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_dim
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, frame: Vec<f64>) {
        assert_eq!(frame.len(), self.frame_dim, "frame width mismatch");
        self.frames.push_front(frame);
        self.frames.truncate(self.history);
    }

    /// Newest frame first, zero-filled up to `history` frames.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.history * self.frame_dim);
        for f in &self.frames {
            out.extend_from_slice(f);
        }
        out.resize(self.history * self.frame_dim, 0.0);
        out
    }
}

/// Normalizes `raw` with the statistics seen so far, then folds `raw` into
/// them and pushes the normalized frame.
pub fn normalize_and_push(buffer: &mut ContextBuffer, normalizer: &mut RunningNormalizer, raw: &[f64]) {
    let frame = normalizer.normalize(raw);
    normalizer.update(raw);
    buffer.push(frame);
}
