//! Context features for meta-parameter functions: per-update statistics,
//! their running normalization into `[-1, 1]`, the history buffer and the
//! network mapping a context to a meta-parameter value.

mod buffer;
mod features;
mod metanet;

pub use buffer::{normalize_and_push, ContextBuffer, RunningNormalizer, NORMALIZER_EPS};
pub use features::{
    compute_ac_frame, compute_q_frame, cosine_distance, mean_std, q_td_error, AcExtras, Channel, Family, FeatureSpec,
    LayoutInfo, LearnerKind, Stat,
};
pub use metanet::{MetaNet, PretrainReport, PRETRAIN_MAX_STEPS, PRETRAIN_TARGET, PRETRAIN_TOLERANCE};

use thiserror::Error;

use crate::diffkit::DiffError;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ContextError {
    #[error("invalid context: {0}")]
    Spec(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub const PROBE_NAMES: [&str; 5] = ["high", "increasing", "zero", "decreasing", "low"];

/// Canonical probe contexts as flattened buffers (newest frame first).
///
/// Every mean channel follows the named pattern over time and every spread
/// channel is zero. "increasing" ramps from −1 at the oldest frame to 1 at
/// the newest.
pub fn probe_inputs(spec: &FeatureSpec, info: LayoutInfo) -> Vec<(&'static str, Vec<f64>)> {
    let channels = spec.channels(info);
    let h = spec.history;
    // value at age k (0 = newest)
    let ramp = |k: usize| if h == 1 { 0.0 } else { 1.0 - 2.0 * k as f64 / (h - 1) as f64 };
    PROBE_NAMES
        .into_iter()
        .map(|name| {
            let mut out = Vec::with_capacity(h * channels.len());
            for k in 0..h {
                let v = match name {
                    "high" => 1.0,
                    "low" => -1.0,
                    "zero" => 0.0,
                    "increasing" => ramp(k),
                    _ => -ramp(k),
                };
                out.extend(channels.iter().map(|c| if c.stat == Stat::Mean { v } else { 0.0 }));
            }
            (name, out)
        })
        .collect()
}
