use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LabError;
use crate::agents::InnerHyper;
use crate::context::{Family, FeatureSpec, LearnerKind};
use crate::metaopt::{MetaConfig, MetaParam, Objective};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    TwoColors,
    SwitchingMdps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Steps between task switches.
    pub period: u64,
    /// Total environment steps of the run.
    pub lifetime: u64,
    /// Switching MDPs only.
    #[serde(default = "default_grid")]
    pub width: usize,
    #[serde(default = "default_grid")]
    pub height: usize,
    #[serde(default = "default_n_mdps")]
    pub n_mdps: usize,
}

fn default_grid() -> usize {
    10
}

fn default_n_mdps() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub kind: LearnerKind,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    pub lr: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub alpha_ent: f64,
    #[serde(default)]
    pub alpha_l2: f64,
    #[serde(default)]
    pub epsilon: f64,
    /// Actor-critic rollout length.
    #[serde(default = "default_rollout")]
    pub rollout: usize,
}

fn default_hidden() -> usize {
    256
}

fn default_layers() -> usize {
    2
}

fn default_gamma() -> f64 {
    0.99
}

fn default_lambda() -> f64 {
    0.9
}

fn default_rollout() -> usize {
    16
}

impl AgentConfig {
    pub fn hyper(&self) -> InnerHyper {
        InnerHyper {
            alpha_ent: self.alpha_ent,
            alpha_l2: self.alpha_l2,
            epsilon: self.epsilon,
            lr: self.lr,
            gamma: self.gamma,
            lambda: self.lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    pub objective: Objective,
    pub k: usize,
    #[serde(default = "default_l")]
    pub l: usize,
    pub meta_lr: f64,
    #[serde(default)]
    pub alpha_outer_ent: f64,
    /// Parameters to adapt; defaults to α_ent (actor-critic) or ε (Q(λ)).
    #[serde(default)]
    pub tune: Vec<MetaParam>,
    /// Starting values of free meta-parameters (no-context runs only);
    /// the middle of each range when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

fn default_l() -> usize {
    1
}

impl MetaSection {
    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            objective: self.objective,
            k: self.k,
            l: self.l,
            alpha_outer_ent: self.alpha_outer_ent,
            meta_lr: self.meta_lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSection {
    pub families: Vec<Family>,
    pub history: usize,
    #[serde(default)]
    pub include_std: bool,
    #[serde(default = "default_meta_hidden")]
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
}

fn default_meta_hidden() -> usize {
    64
}

impl ContextSection {
    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec { families: self.families.clone(), history: self.history, include_std: self.include_std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggingConfig {
    /// Log every `stride`-th outer iteration (the final one always).
    #[serde(default = "default_stride")]
    pub stride: u64,
    /// One row per inner update instead of per outer iteration.
    #[serde(default)]
    pub per_inner: bool,
    /// Probe columns; defaults to on for contextual runs.
    #[serde(default)]
    pub probes: Option<bool>,
}

fn default_stride() -> u64 {
    1
}

impl Default for LoggingConfig {
    fn default() -> Self {
        Self { stride: 1, per_inner: false, probes: None }
    }
}

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Accept values outside the built-in candidate lists.
    #[serde(default)]
    pub off_grid: bool,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    #[serde(default)]
    pub meta: Option<MetaSection>,
    #[serde(default)]
    pub context: Option<ContextSection>,
    #[serde(default)]
    pub logging: LoggingConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

const AC_ALPHA_ENT: &[f64] = &[0.0, 0.1, 0.2, 0.4, 0.8];
const AC_META_LR: &[f64] = &[1e-3, 1e-4, 1e-5, 1e-6];
const AC_K: &[usize] = &[1, 3, 6];
const AC_L: &[usize] = &[8, 16];
const OUTER_ENT: &[f64] = &[0.0, 0.1];
const Q_LR: &[f64] = &[3e-3, 1e-4, 3e-5, 1e-5];
const Q_EPSILON: &[f64] = &[0.3, 0.1, 0.03, 0.01];
const Q_META_LR_DIRECT: &[f64] = &[1e-2, 3e-3, 1e-3, 3e-4];
const Q_META_LR_CONTEXT: &[f64] = &[1e-3, 1e-4, 1e-5, 1e-6];
const Q_L: &[usize] = &[16, 32, 128];
/// Inner learning rate of Q(λ) when ε is meta-learned.
pub const Q_META_INNER_LR: f64 = 3e-5;

fn on_list(x: f64, list: &[f64]) -> bool {
    list.iter().any(|c| (x - c).abs() <= 1e-12 * c.abs().max(1e-300))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, LabError> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String, LabError> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    /// Parameters the outer loop adapts (empty for baselines).
    pub fn tuned(&self) -> Vec<MetaParam> {
        match &self.meta {
            None => Vec::new(),
            Some(m) if !m.tune.is_empty() => m.tune.clone(),
            Some(_) => vec![match self.agent.kind {
                LearnerKind::ActorCritic => MetaParam::AlphaEnt,
                LearnerKind::QLambda => MetaParam::Epsilon,
            }],
        }
    }

    /// Names of the logged meta-parameter columns.
    pub fn meta_columns(&self) -> Vec<MetaParam> {
        match (&self.meta, self.agent.kind) {
            (Some(_), _) => self.tuned(),
            (None, LearnerKind::ActorCritic) => vec![MetaParam::AlphaEnt],
            (None, LearnerKind::QLambda) => vec![MetaParam::Epsilon],
        }
    }

    pub fn probes_enabled(&self) -> bool {
        self.logging.probes.unwrap_or(self.context.is_some())
    }

    /// Checks every field; called before any simulation starts.
    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: String| Err(LabError::Config(m));
        let kind = self.agent.kind;
        let e = &self.env;
        if e.period == 0 || e.lifetime == 0 {
            return bad("env.period and env.lifetime must be positive".into());
        }
        if e.kind == EnvKind::SwitchingMdps {
            if e.n_mdps == 0 {
                return bad("env.n_mdps must be positive".into());
            }
            if e.width * e.height <= 17 {
                return bad(format!("a {}x{} grid has no room for walls, start and goal", e.width, e.height));
            }
        }
        let a = &self.agent;
        if a.hidden == 0 || a.layers == 0 {
            return bad("agent.hidden and agent.layers must be positive".into());
        }
        if a.rollout == 0 {
            return bad("agent.rollout must be positive".into());
        }
        a.hyper().validate().map_err(|e| LabError::Config(format!("agent: {e}")))?;
        if self.logging.stride == 0 {
            return bad("logging.stride must be at least 1".into());
        }
        if self.logging.probes == Some(true) && self.context.is_none() {
            return bad("logging.probes needs a [context] section".into());
        }
        if let Some(m) = &self.meta {
            m.meta_config().validate(kind).map_err(|e| LabError::Config(format!("meta: {e}")))?;
            let tuned = self.tuned();
            for (i, p) in tuned.iter().enumerate() {
                if tuned[..i].contains(p) {
                    return bad(format!("meta.tune lists {} twice", p.name()));
                }
                let ok = match kind {
                    LearnerKind::ActorCritic => *p != MetaParam::Epsilon,
                    LearnerKind::QLambda => *p == MetaParam::Epsilon,
                };
                if !ok {
                    return bad(format!("meta.tune: {} cannot be adapted for this agent", p.name()));
                }
            }
        }
        if let Some(init) = self.meta.as_ref().and_then(|m| m.init.as_ref()) {
            if self.context.is_some() {
                return bad("meta.init applies to runs without context".into());
            }
            let tuned = self.tuned();
            if init.len() != tuned.len() {
                return bad(format!("meta.init has {} values for {} tuned parameters", init.len(), tuned.len()));
            }
            for (v, p) in init.iter().zip(&tuned) {
                if !(0.0..=p.scale()).contains(v) {
                    return bad(format!("meta.init: {} = {v} outside [0, {}]", p.name(), p.scale()));
                }
            }
        }
        if let Some(c) = &self.context {
            if self.meta.is_none() {
                return bad("[context] needs a [meta] section".into());
            }
            if c.hidden == 0 || c.layers == 0 {
                return bad("context.hidden and context.layers must be positive".into());
            }
            c.feature_spec().validate(kind).map_err(|e| LabError::Config(format!("context: {e}")))?;
        }
        if !self.off_grid {
            self.check_candidates()?;
        }
        Ok(())
    }

    fn check_candidates(&self) -> Result<(), LabError> {
        let off = |name: &str, v: String| {
            Err(LabError::Config(format!(
                "{name} = {v} is not on the candidate list; set off_grid = true to allow it"
            )))
        };
        let a = &self.agent;
        match a.kind {
            LearnerKind::ActorCritic => {
                if !on_list(a.alpha_ent, AC_ALPHA_ENT) {
                    return off("agent.alpha_ent", a.alpha_ent.to_string());
                }
                if !on_list(a.lr, &[0.1]) {
                    return off("agent.lr", a.lr.to_string());
                }
                if let Some(m) = &self.meta {
                    if !on_list(m.meta_lr, AC_META_LR) {
                        return off("meta.meta_lr", m.meta_lr.to_string());
                    }
                    if !AC_K.contains(&m.k) {
                        return off("meta.k", m.k.to_string());
                    }
                    if m.objective == Objective::Bmg && !AC_L.contains(&m.l) {
                        return off("meta.l", m.l.to_string());
                    }
                    if !on_list(m.alpha_outer_ent, OUTER_ENT) {
                        return off("meta.alpha_outer_ent", m.alpha_outer_ent.to_string());
                    }
                }
            }
            LearnerKind::QLambda => {
                if !on_list(a.epsilon, Q_EPSILON) {
                    return off("agent.epsilon", a.epsilon.to_string());
                }
                match &self.meta {
                    None if !on_list(a.lr, Q_LR) => return off("agent.lr", a.lr.to_string()),
                    None => {}
                    Some(m) => {
                        if !on_list(a.lr, &[Q_META_INNER_LR]) {
                            return off("agent.lr", a.lr.to_string());
                        }
                        let list = if self.context.is_some() { Q_META_LR_CONTEXT } else { Q_META_LR_DIRECT };
                        if !on_list(m.meta_lr, list) {
                            return off("meta.meta_lr", m.meta_lr.to_string());
                        }
                        if !Q_L.contains(&m.l) {
                            return off("meta.l", m.l.to_string());
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Independent sub-seeds of a run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Env,
    Init,
    Explore,
    Meta,
}

/// Derives the seed of one random stream from the run seed (splitmix64).
pub fn sub_seed(seed: u64, stream: Stream) -> u64 {
    let tag = match stream {
        Stream::Env => 1u64,
        Stream::Init => 2,
        Stream::Explore => 3,
        Stream::Meta => 4,
    };
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
