use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use metalab::context::{FeatureSpec, Family, LayoutInfo, LearnerKind};
use metalab::diffkit::{Tape, Tensor};
use metalab::envs::{Environment, SwitchingSchedule};
use metalab::lab::{self, LabError};

fn lab_err(e: LabError) -> PyErr {
    if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Experiment configuration, read from and written to TOML.
#[pyclass(module = "metalab_py", skip_from_py_object)]
#[derive(Clone)]
struct ExperimentConfig {
    inner: lab::ExperimentConfig,
}

#[pymethods]
impl ExperimentConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: lab::ExperimentConfig::from_toml(text).map_err(lab_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: lab::ExperimentConfig::load(path.as_ref()).map_err(lab_err)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(lab_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(lab_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn lifetime(&self) -> u64 {
        self.inner.env.lifetime
    }

    #[setter]
    fn set_lifetime(&mut self, steps: u64) {
        self.inner.env.lifetime = steps;
    }

    #[getter]
    fn period(&self) -> u64 {
        self.inner.env.period
    }

    #[setter]
    fn set_period(&mut self, steps: u64) {
        self.inner.env.period = steps;
    }

    /// CSV column names of a run with this config.
    fn header(&self) -> Vec<String> {
        lab::Schema::of(&self.inner).header()
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(seed={}, lifetime={})", self.inner.seed, self.inner.env.lifetime)
    }
}

/// Summary of one run.
#[pyclass(module = "metalab_py", get_all)]
struct RunSummary {
    total_return: f64,
    env_steps: u64,
    outer_iterations: u64,
    rows: u64,
    return_per_100k: f64,
    final_meta: Vec<f64>,
    final_probes: Option<Vec<f64>>,
}

#[pymethods]
impl RunSummary {
    fn __repr__(&self) -> String {
        format!("RunSummary(total_return={}, env_steps={})", self.total_return, self.env_steps)
    }
}

impl From<lab::RunSummary> for RunSummary {
    fn from(s: lab::RunSummary) -> Self {
        Self {
            return_per_100k: s.return_per_100k(),
            total_return: s.total_return,
            env_steps: s.env_steps,
            outer_iterations: s.outer_iterations,
            rows: s.rows,
            final_meta: s.final_meta,
            final_probes: s.final_probes.map(|p| p.to_vec()),
        }
    }
}

/// Runs a whole lifetime; returns the summary and the metrics CSV text.
#[pyfunction]
fn run(py: Python<'_>, config: &ExperimentConfig) -> PyResult<(RunSummary, String)> {
    let cfg = config.inner.clone();
    let (summary, bytes) = py.detach(move || lab::run_to_bytes(&cfg)).map_err(lab_err)?;
    let text = String::from_utf8(bytes).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((summary.into(), text))
}

/// Runs a lifetime and writes its CSV to `path`.
#[pyfunction]
fn run_to_file(py: Python<'_>, config: &ExperimentConfig, path: &str) -> PyResult<RunSummary> {
    let cfg = config.inner.clone();
    let path = std::path::PathBuf::from(path);
    Ok(py.detach(move || lab::run_to_file(&cfg, &path)).map_err(lab_err)?.into())
}

type Step = (Vec<f64>, usize, f64, Vec<f64>, f64);

fn step_tuple(t: metalab::envs::Transition) -> Step {
    (t.obs, t.action, t.reward, t.next_obs, t.continuation)
}

/// Two Colors gridworld.
#[pyclass(module = "metalab_py")]
struct TwoColors {
    env: metalab::envs::TwoColors,
}

#[pymethods]
impl TwoColors {
    #[new]
    fn new(switch_period: u64, seed: u64) -> PyResult<Self> {
        Ok(Self { env: metalab::envs::TwoColors::new(switch_period, seed).map_err(value_err)? })
    }

    fn observe(&self) -> Vec<f64> {
        self.env.observe()
    }

    /// Returns (obs, action, reward, next_obs, continuation).
    fn step(&mut self, action: usize) -> PyResult<Step> {
        Ok(step_tuple(self.env.step(action).map_err(value_err)?))
    }

    #[getter]
    fn task_index(&self) -> u64 {
        self.env.task_index()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.env.obs_dim()
    }
}

/// Switching-MDPs gridworld.
#[pyclass(module = "metalab_py")]
struct SwitchingMdps {
    env: metalab::envs::SwitchingMdps,
}

#[pymethods]
impl SwitchingMdps {
    #[new]
    #[pyo3(signature = (period, n_mdps, seed, width = 10, height = 10))]
    fn new(period: u64, n_mdps: usize, seed: u64, width: usize, height: usize) -> PyResult<Self> {
        let schedule = SwitchingSchedule { period, n_mdps, seed };
        Ok(Self { env: metalab::envs::SwitchingMdps::new(schedule, width, height).map_err(value_err)? })
    }

    fn observe(&self) -> Vec<f64> {
        self.env.observe()
    }

    fn step(&mut self, action: usize) -> PyResult<Step> {
        Ok(step_tuple(self.env.step(action).map_err(value_err)?))
    }

    #[getter]
    fn task_index(&self) -> u64 {
        self.env.task_index()
    }

    #[getter]
    fn current_index(&self) -> usize {
        self.env.current_index()
    }
}

/// Streaming mean and variance with the squashing used for context features.
#[pyclass(module = "metalab_py")]
struct RunningNormalizer {
    inner: metalab::context::RunningNormalizer,
}

#[pymethods]
impl RunningNormalizer {
    #[new]
    fn new(dim: usize) -> Self {
        Self { inner: metalab::context::RunningNormalizer::new(dim) }
    }

    fn update(&mut self, x: Vec<f64>) -> PyResult<()> {
        if x.len() != self.inner.dim() {
            return Err(PyValueError::new_err("wrong dimension"));
        }
        self.inner.update(&x);
        Ok(())
    }

    fn normalize(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.inner.dim() {
            return Err(PyValueError::new_err("wrong dimension"));
        }
        Ok(self.inner.normalize(&x))
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean().to_vec()
    }

    #[getter]
    fn variance(&self) -> Vec<f64> {
        self.inner.variance()
    }

    #[getter]
    fn count(&self) -> u64 {
        self.inner.count()
    }
}

/// BMG loss of an ε-greedy policy against greedy targets, and dL/dε.
#[pyfunction]
fn bmg_outer_loss_q(q_current: Vec<Vec<f64>>, q_target: Vec<Vec<f64>>, epsilon: f64) -> PyResult<(f64, f64)> {
    let a = q_current.first().map_or(0, Vec::len);
    if a == 0 || q_current.iter().chain(&q_target).any(|r| r.len() != a) {
        return Err(PyValueError::new_err("q rows must be nonempty and of equal length"));
    }
    let flat = |rows: &[Vec<f64>]| rows.concat();
    let mut tape = Tape::new();
    let eps = tape.param(Tensor::vector(vec![epsilon]));
    let loss = metalab::metaopt::bmg_outer_loss_q(&mut tape, &flat(&q_current), &flat(&q_target), eps, a)
        .map_err(value_err)?;
    let g = tape.grad(loss, &[eps], false).map_err(value_err)?;
    Ok((tape.item(loss), tape.item(g[0])))
}

#[pyfunction]
fn kl_categorical(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    if p.len() != q.len() {
        return Err(PyValueError::new_err("p and q differ in length"));
    }
    Ok(metalab::metaopt::kl_categorical(&p, &q))
}

#[pyfunction]
fn n_step_returns(rewards: Vec<f64>, continuations: Vec<f64>, bootstrap: f64, gamma: f64) -> PyResult<Vec<f64>> {
    if rewards.len() != continuations.len() {
        return Err(PyValueError::new_err("rewards and continuations differ in length"));
    }
    Ok(metalab::agents::n_step_returns(&rewards, &continuations, bootstrap, gamma))
}

#[pyfunction]
fn peng_q_targets(
    rewards: Vec<f64>,
    continuations: Vec<f64>,
    next_q: Vec<Vec<f64>>,
    lam: f64,
    gamma: f64,
) -> PyResult<Vec<f64>> {
    metalab::agents::peng_q_targets(&rewards, &continuations, &next_q, lam, gamma).map_err(value_err)
}

fn parse_spec(families: &[String], history: usize, include_std: bool) -> PyResult<FeatureSpec> {
    let families = families.iter().map(|f| Family::parse(f).ok_or_else(|| PyValueError::new_err(format!("unknown feature family {f:?}")))).collect::<PyResult<Vec<_>>>()?;
    Ok(FeatureSpec { families, history, include_std })
}

fn parse_kind(kind: &str) -> PyResult<LearnerKind> {
    match kind {
        "actor_critic" => Ok(LearnerKind::ActorCritic),
        "q_lambda" => Ok(LearnerKind::QLambda),
        _ => Err(PyValueError::new_err(format!("unknown agent kind {kind:?}"))),
    }
}

/// Flattened context size for a feature selection.
#[pyfunction]
#[pyo3(signature = (families, history, include_std, kind = "actor_critic", num_cells = 25, num_meta = 1))]
fn context_input_dim(
    families: Vec<String>,
    history: usize,
    include_std: bool,
    kind: &str,
    num_cells: usize,
    num_meta: usize,
) -> PyResult<usize> {
    let spec = parse_spec(&families, history, include_std)?;
    let kind = parse_kind(kind)?;
    spec.validate(kind).map_err(value_err)?;
    Ok(spec.input_dim(LayoutInfo { kind, num_cells, num_meta }))
}

/// The five canonical probe contexts, keyed by name.
#[pyfunction]
#[pyo3(signature = (families, history, include_std, kind = "actor_critic", num_cells = 25, num_meta = 1))]
fn probe_inputs(
    families: Vec<String>,
    history: usize,
    include_std: bool,
    kind: &str,
    num_cells: usize,
    num_meta: usize,
) -> PyResult<Vec<(String, Vec<f64>)>> {
    let spec = parse_spec(&families, history, include_std)?;
    let kind = parse_kind(kind)?;
    spec.validate(kind).map_err(value_err)?;
    let info = LayoutInfo { kind, num_cells, num_meta };
    Ok(metalab::context::probe_inputs(&spec, info).into_iter().map(|(n, v)| (n.to_string(), v)).collect())
}

/// Percent change of the method mean over the baseline mean, and per seed.
#[pyfunction]
fn relative_improvement(method: Vec<f64>, baseline: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    let i = lab::relative_improvement(&method, &baseline).map_err(lab_err)?;
    Ok((i.percent, i.per_seed))
}

#[pymodule]
fn metalab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ExperimentConfig>()?;
    m.add_class::<RunSummary>()?;
    m.add_class::<TwoColors>()?;
    m.add_class::<SwitchingMdps>()?;
    m.add_class::<RunningNormalizer>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_to_file, m)?)?;
    m.add_function(wrap_pyfunction!(bmg_outer_loss_q, m)?)?;
    m.add_function(wrap_pyfunction!(kl_categorical, m)?)?;
    m.add_function(wrap_pyfunction!(n_step_returns, m)?)?;
    m.add_function(wrap_pyfunction!(peng_q_targets, m)?)?;
    m.add_function(wrap_pyfunction!(context_input_dim, m)?)?;
    m.add_function(wrap_pyfunction!(probe_inputs, m)?)?;
    m.add_function(wrap_pyfunction!(relative_improvement, m)?)?;
    Ok(())
}
