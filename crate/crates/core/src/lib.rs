//! Contextual meta-gradient reinforcement learning in non-stationary gridworlds.

pub mod diffkit;
pub mod envs;
pub mod agents;
pub mod context;
pub mod metaopt;
pub mod lab;
