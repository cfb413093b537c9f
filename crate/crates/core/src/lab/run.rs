use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{sub_seed, EnvKind, ExperimentConfig, Stream};
use super::LabError;
use crate::agents::{AcParams, QLearner, QParams};
use crate::context::{LayoutInfo, LearnerKind, PretrainReport, PROBE_NAMES};
use crate::envs::{Environment, SwitchingMdps, SwitchingSchedule, TwoColors};
use crate::metaopt::{AcRunner, IterationMetrics, MetaParam, MetaState, QRunner, Runner};

/// One logged line of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub env_step: u64,
    pub outer_iteration: u64,
    pub mean_rollout_reward: f64,
    pub cumulative_return: f64,
    pub meta_values: Vec<f64>,
    pub inner_loss: Option<f64>,
    pub outer_loss: Option<f64>,
    pub probes: Option<[f64; 5]>,
    pub task_index: u64,
}

impl MetricsRow {
    pub fn return_per_100k(&self) -> f64 {
        per_100k(self.cumulative_return, self.env_step)
    }
}

pub fn per_100k(total: f64, steps: u64) -> f64 {
    if steps == 0 {
        0.0
    } else {
        total * 1e5 / steps as f64
    }
}

/// Column layout of a metrics file; depends on the config only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schema {
    pub meta: Vec<MetaParam>,
    pub probes: bool,
}

impl Schema {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Self { meta: cfg.meta_columns(), probes: cfg.probes_enabled() }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> =
            ["env_step", "outer_iteration", "mean_rollout_reward", "cumulative_return", "return_per_100k"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        h.extend(self.meta.iter().map(|p| p.name().to_string()));
        h.push("inner_loss".into());
        h.push("outer_loss".into());
        if self.probes {
            h.extend(PROBE_NAMES.iter().map(|n| format!("probe_{n}")));
        }
        h.push("task_index".into());
        h
    }

    pub fn record(&self, row: &MetricsRow) -> Vec<String> {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        let mut r = vec![
            row.env_step.to_string(),
            row.outer_iteration.to_string(),
            row.mean_rollout_reward.to_string(),
            row.cumulative_return.to_string(),
            row.return_per_100k().to_string(),
        ];
        r.extend(row.meta_values.iter().map(f64::to_string));
        r.push(opt(row.inner_loss));
        r.push(opt(row.outer_loss));
        if self.probes {
            match row.probes {
                Some(p) => r.extend(p.iter().map(f64::to_string)),
                None => r.extend(std::iter::repeat(String::new()).take(5)),
            }
        }
        r.push(row.task_index.to_string());
        r
    }
}

/// Writes metric rows as CSV with LF line endings.
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
    schema: Schema,
}

impl<W: Write> CsvSink<W> {
    pub fn new(inner: W, schema: Schema) -> Result<Self, LabError> {
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(inner);
        writer.write_record(schema.header())?;
        Ok(Self { writer, schema })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<(), LabError> {
        self.writer.write_record(self.schema.record(row))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, LabError> {
        self.writer.flush()?;
        self.writer.into_inner().map_err(|e| LabError::Io(e.to_string()))
    }
}

/// Outcome of one lifetime.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub total_return: f64,
    pub env_steps: u64,
    pub outer_iterations: u64,
    pub rows: u64,
    pub final_meta: Vec<f64>,
    pub final_probes: Option<[f64; 5]>,
    pub pretrain: Vec<PretrainReport>,
}

impl RunSummary {
    pub fn return_per_100k(&self) -> f64 {
        per_100k(self.total_return, self.env_steps)
    }
}

fn build_env(cfg: &ExperimentConfig) -> Result<Box<dyn Environment>, LabError> {
    let e = &cfg.env;
    let seed = sub_seed(cfg.seed, Stream::Env);
    Ok(match e.kind {
        EnvKind::TwoColors => Box::new(TwoColors::new(e.period, seed)?),
        EnvKind::SwitchingMdps => Box::new(SwitchingMdps::new(
            SwitchingSchedule { period: e.period, n_mdps: e.n_mdps, seed },
            e.width,
            e.height,
        )?),
    })
}

/// Builds the learner, its meta state and the environment for `cfg`.
pub fn build_runner(cfg: &ExperimentConfig) -> Result<(Box<dyn Runner>, Vec<PretrainReport>), LabError> {
    cfg.validate()?;
    let env = build_env(cfg)?;
    let mut init = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, Stream::Init));
    let mut meta_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, Stream::Meta));
    let explore = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, Stream::Explore));
    let a = &cfg.agent;
    let hyper = a.hyper();
    let tuned = cfg.tuned();
    let info = LayoutInfo { kind: a.kind, num_cells: env.num_cells(), num_meta: tuned.len() };
    let mut reports = Vec::new();
    let meta = match (&cfg.meta, &cfg.context) {
        (None, _) => {
            let values = match a.kind {
                LearnerKind::ActorCritic => vec![a.alpha_ent],
                LearnerKind::QLambda => vec![a.epsilon],
            };
            MetaState::fixed(cfg.meta_columns(), values)
        }
        (Some(m), None) => match &m.init {
            Some(v) => MetaState::direct_from(tuned, v.clone()),
            None => MetaState::direct(tuned),
        },
        (Some(_), Some(c)) => {
            let (state, r) = MetaState::contextual(tuned, c.feature_spec(), info, c.hidden, c.layers, &mut meta_rng)?;
            reports = r;
            state
        }
    };
    let config = cfg.meta.as_ref().map(|m| m.meta_config());
    let obs_dim = env.obs_dim();
    let runner: Box<dyn Runner> = match a.kind {
        LearnerKind::ActorCritic => {
            let params = AcParams::new(obs_dim, a.hidden, a.layers, &mut init);
            Box::new(AcRunner::new(env, params, hyper, a.rollout, cfg.env.lifetime, meta, config, explore)?)
        }
        LearnerKind::QLambda => {
            let learner = QLearner::new(QParams::new(obs_dim, a.hidden, a.layers, &mut init), &hyper);
            Box::new(QRunner::new(env, learner, a.epsilon, cfg.env.lifetime, meta, config, explore)?)
        }
    };
    Ok((runner, reports))
}

/// Runs the whole lifetime of `cfg`, handing every logged row to `sink`.
pub fn execute<F>(cfg: &ExperimentConfig, mut sink: F) -> Result<RunSummary, LabError>
where
    F: FnMut(&MetricsRow) -> Result<(), LabError>,
{
    let (mut runner, pretrain) = build_runner(cfg)?;
    let per_inner = cfg.logging.per_inner;
    let probes_on = cfg.probes_enabled();
    runner.set_record_inner(per_inner);
    let lifetime = runner.lifetime();
    let mut cumulative = 0.0;
    let mut rows = 0u64;
    let mut last: Option<IterationMetrics> = None;
    while let Some(m) = runner.next_iteration()? {
        let before = cumulative;
        cumulative = runner.cumulative_return();
        let is_final = m.env_step >= lifetime;
        if m.outer_iteration % cfg.logging.stride == 0 || is_final {
            let probes = if probes_on { runner.meta().probes() } else { None };
            let mut emitted_step = None;
            if per_inner {
                let mut cum = before;
                let mut prev_step = m.env_step - m.steps;
                let n = m.inner.len();
                for (i, r) in m.inner.iter().enumerate() {
                    cum += r.mean_reward * (r.env_step - prev_step) as f64;
                    prev_step = r.env_step;
                    let exact = r.env_step == m.env_step;
                    sink(&MetricsRow {
                        env_step: r.env_step,
                        outer_iteration: m.outer_iteration,
                        mean_rollout_reward: r.mean_reward,
                        cumulative_return: if exact { cumulative } else { cum },
                        meta_values: r.meta_values.clone(),
                        inner_loss: Some(r.inner_loss),
                        outer_loss: if i + 1 == n { m.outer_loss } else { None },
                        probes,
                        task_index: r.task_index,
                    })?;
                    rows += 1;
                    emitted_step = Some(r.env_step);
                }
            }
            if emitted_step != Some(m.env_step) {
                sink(&MetricsRow {
                    env_step: m.env_step,
                    outer_iteration: m.outer_iteration,
                    mean_rollout_reward: m.mean_reward(),
                    cumulative_return: cumulative,
                    meta_values: m.meta_values.clone(),
                    inner_loss: m.inner_loss,
                    outer_loss: if per_inner && !m.inner.is_empty() { None } else { m.outer_loss },
                    probes,
                    task_index: m.task_index,
                })?;
                rows += 1;
            }
        }
        last = Some(m);
    }
    let outer_iterations = last.as_ref().map_or(0, |m| m.outer_iteration);
    let final_meta = last.map(|m| m.meta_values).unwrap_or_default();
    Ok(RunSummary {
        total_return: runner.cumulative_return(),
        env_steps: runner.env_steps(),
        outer_iterations,
        rows,
        final_meta,
        final_probes: runner.meta().probes(),
        pretrain,
    })
}

/// Runs `cfg` and writes its metrics CSV to `path`.
pub fn run_to_file(cfg: &ExperimentConfig, path: &Path) -> Result<RunSummary, LabError> {
    cfg.validate()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| LabError::Io(format!("{}: {e}", dir.display())))?;
    }
    let file = File::create(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
    let mut csv = CsvSink::new(BufWriter::new(file), Schema::of(cfg))?;
    let summary = execute(cfg, |row| csv.write(row))?;
    csv.finish()?.flush().map_err(|e| LabError::Io(e.to_string()))?;
    Ok(summary)
}

/// Runs `cfg` and returns the CSV as bytes.
pub fn run_to_bytes(cfg: &ExperimentConfig) -> Result<(RunSummary, Vec<u8>), LabError> {
    let mut csv = CsvSink::new(Vec::new(), Schema::of(cfg))?;
    let summary = execute(cfg, |row| csv.write(row))?;
    Ok((summary, csv.finish()?))
}

/// Runs `cfg` keeping every logged row in memory.
pub fn run_collect(cfg: &ExperimentConfig) -> Result<(RunSummary, Vec<MetricsRow>), LabError> {
    let mut rows = Vec::new();
    let summary = execute(cfg, |row| {
        rows.push(row.clone());
        Ok(())
    })?;
    Ok((summary, rows))
}
