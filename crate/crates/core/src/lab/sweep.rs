use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ContextSection, ExperimentConfig};
use super::run::{execute, per_100k, run_to_file};
use super::stats::{mean_std, quantile};
use super::LabError;
use crate::context::{Family, LearnerKind};

/// Seeds used when a sweep does not say otherwise.
pub const DEFAULT_SEEDS: usize = 10;

/// One method with a grid of overrides on its base config.
///
/// Grid keys are dotted paths into the config (`"meta.meta_lr"`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub base: ExperimentConfig,
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Seeds 0..seeds for every cell.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(rename = "variant")]
    pub variants: Vec<Variant>,
}

fn default_seeds() -> usize {
    DEFAULT_SEEDS
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
    }
}

/// A grid point: the overrides and the resulting config.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub config: ExperimentConfig,
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), LabError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| LabError::Config(format!("grid key {key}: {part} is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(LabError::Config("empty grid key".into()))
}

/// Applies overrides to a config; unknown keys are rejected.
pub fn apply_overrides(base: &ExperimentConfig, overrides: &[(String, toml::Value)]) -> Result<ExperimentConfig, LabError> {
    let mut root = toml::Value::try_from(base).map_err(|e| LabError::Config(e.to_string()))?;
    for (k, v) in overrides {
        set_path(&mut root, k, v.clone())?;
    }
    let label = overrides.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join(", ");
    root.try_into().map_err(|e: toml::de::Error| LabError::Config(format!("grid ({label}): {e}")))
}

/// Cartesian product of the grid in key order, last key varying fastest.
pub fn expand(variant: &Variant) -> Result<Vec<Cell>, LabError> {
    let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for (key, values) in &variant.grid {
        if values.is_empty() {
            return Err(LabError::Config(format!("grid key {key} has no candidates")));
        }
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|c| {
            let config = apply_overrides(&variant.base, &c)?;
            config.validate()?;
            let label = if c.is_empty() {
                "base".to_string()
            } else {
                c.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
            };
            Ok(Cell { label, config })
        })
        .collect()
}

/// Result of one (cell, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub outcome: Result<f64, String>,
}

/// Per-cell aggregate over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub variant: String,
    pub index: usize,
    pub label: String,
    pub config: ExperimentConfig,
    pub results: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
}

impl CellSummary {
    pub fn failed(&self) -> bool {
        self.results.iter().any(|r| r.outcome.is_err())
    }

    pub fn totals(&self) -> Vec<f64> {
        self.results.iter().filter_map(|r| r.outcome.as_ref().ok().copied()).collect()
    }

    pub fn first_error(&self) -> Option<&str> {
        self.results.iter().find_map(|r| r.outcome.as_ref().err().map(String::as_str))
    }

    fn meta_lr(&self) -> f64 {
        self.config.meta.as_ref().map_or(0.0, |m| m.meta_lr)
    }
}

/// Index of the best non-failed cell: highest mean, then lower meta_lr,
/// then the lexicographically smaller label.
pub fn select_best(cells: &[CellSummary]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        if c.failed() || c.totals().is_empty() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let o = &cells[b];
                let better = c.mean > o.mean
                    || (c.mean == o.mean
                        && (c.meta_lr() < o.meta_lr() || (c.meta_lr() == o.meta_lr() && c.label < o.label)));
                Some(if better { i } else { b })
            }
        };
    }
    best
}

/// How and where runs are executed.
#[derive(Clone, Debug, PartialEq)]
pub struct Execution {
    pub workers: usize,
    /// Per-run CSVs are written below this directory when set.
    pub out: Option<PathBuf>,
    /// Overrides every run's `logging.stride`.
    pub log_stride: Option<u64>,
}

impl Default for Execution {
    fn default() -> Self {
        Self { workers: 1, out: None, log_stride: None }
    }
}

impl Execution {
    fn run(&self, mut jobs: Vec<(ExperimentConfig, Option<PathBuf>)>) -> Result<Vec<Result<f64, String>>, LabError> {
        if let Some(stride) = self.log_stride {
            for (cfg, _) in &mut jobs {
                cfg.logging.stride = stride;
            }
        }
        run_jobs(&jobs, self.workers)
    }
}

/// Runs `jobs` on a pool of `workers` threads; results come back in job
/// order whatever the scheduling.
pub fn run_jobs(jobs: &[(ExperimentConfig, Option<PathBuf>)], workers: usize) -> Result<Vec<Result<f64, String>>, LabError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| LabError::Io(e.to_string()))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|(cfg, path)| {
                let r = match path {
                    Some(p) => run_to_file(cfg, p),
                    None => execute(cfg, |_| Ok(())),
                };
                r.map(|s| s.total_return).map_err(|e| e.to_string())
            })
            .collect()
    }))
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn run_cells(
    variant: &str,
    cells: Vec<Cell>,
    seeds: &[u64],
    exec: &Execution,
) -> Result<Vec<CellSummary>, LabError> {
    let mut jobs = Vec::with_capacity(cells.len() * seeds.len());
    for (i, cell) in cells.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = cell.config.clone();
            cfg.seed = seed;
            let path = exec
                .out
                .as_ref()
                .map(|d| d.join(file_safe(variant)).join(format!("cell{i:03}")).join(format!("seed{seed}.csv")));
            jobs.push((cfg, path));
        }
    }
    let outcomes = exec.run(jobs)?;
    let mut out = Vec::with_capacity(cells.len());
    let mut it = outcomes.into_iter();
    for (index, cell) in cells.into_iter().enumerate() {
        let results: Vec<SeedResult> =
            seeds.iter().map(|&seed| SeedResult { seed, outcome: it.next().expect("one outcome per job") }).collect();
        let totals: Vec<f64> = results.iter().filter_map(|r| r.outcome.as_ref().ok().copied()).collect();
        let (mean, std) = mean_std(&totals);
        out.push(CellSummary {
            variant: variant.to_string(),
            index,
            label: cell.label,
            config: cell.config,
            results,
            mean,
            std,
        });
    }
    Ok(out)
}

/// Sweep outcome of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantReport {
    pub name: String,
    pub is_meta: bool,
    pub cells: Vec<CellSummary>,
    pub best: Option<usize>,
}

impl VariantReport {
    pub fn best_cell(&self) -> Option<&CellSummary> {
        self.best.map(|b| &self.cells[b])
    }
}

/// Refuses comparisons between meta-gradient variants swept over grids of
/// different sizes.
pub fn audit_fairness(variants: &[(String, bool, usize)]) -> Result<(), LabError> {
    let meta: Vec<&(String, bool, usize)> = variants.iter().filter(|v| v.1).collect();
    if let Some(first) = meta.first() {
        for v in &meta[1..] {
            if v.2 != first.2 {
                return Err(LabError::Fairness(format!(
                    "{} sweeps {} configurations but {} sweeps {}",
                    first.0, first.2, v.0, v.2
                )));
            }
        }
    }
    Ok(())
}

/// Runs every variant of `spec`. With more than one variant the fairness
/// audit runs first.
pub fn sweep(spec: &SweepSpec, exec: &Execution) -> Result<Vec<VariantReport>, LabError> {
    if spec.variants.is_empty() {
        return Err(LabError::Config("a sweep needs at least one [[variant]]".into()));
    }
    if spec.seeds == 0 {
        return Err(LabError::Config("seeds must be positive".into()));
    }
    let mut expanded = Vec::new();
    for v in &spec.variants {
        if spec.variants.iter().filter(|o| o.name == v.name).count() > 1 {
            return Err(LabError::Config(format!("variant name {} is used twice", v.name)));
        }
        expanded.push((v, expand(v)?));
    }
    if expanded.len() > 1 {
        let sizes: Vec<(String, bool, usize)> =
            expanded.iter().map(|(v, c)| (v.name.clone(), v.base.meta.is_some(), c.len())).collect();
        audit_fairness(&sizes)?;
    }
    let seeds: Vec<u64> = (0..spec.seeds as u64).collect();
    let mut reports = Vec::new();
    for (v, cells) in expanded {
        let cells = run_cells(&v.name, cells, &seeds, exec)?;
        let best = select_best(&cells);
        reports.push(VariantReport { name: v.name.clone(), is_meta: v.base.meta.is_some(), cells, best });
    }
    Ok(reports)
}

/// Percent change of the method mean over the baseline mean, plus one
/// value per method seed against the same baseline mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Improvement {
    pub percent: f64,
    pub per_seed: Vec<f64>,
}

pub fn relative_improvement(method: &[f64], baseline: &[f64]) -> Result<Improvement, LabError> {
    if method.is_empty() || baseline.is_empty() {
        return Err(LabError::Config("relative improvement needs samples on both sides".into()));
    }
    let mb = baseline.iter().sum::<f64>() / baseline.len() as f64;
    if mb.abs() < 1e-9 {
        return Err(LabError::UndefinedImprovement(mb));
    }
    let mm = method.iter().sum::<f64>() / method.len() as f64;
    let rel = |x: f64| 100.0 * (x - mb) / mb.abs();
    Ok(Improvement { percent: rel(mm), per_seed: method.iter().map(|&x| rel(x)).collect() })
}

/// Method and baseline configs compared across change periods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreqSpec {
    pub periods: Vec<u64>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    pub baseline: ExperimentConfig,
    #[serde(rename = "method")]
    pub methods: Vec<NamedConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedConfig {
    pub name: String,
    pub config: ExperimentConfig,
}

impl FreqSpec {
    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreqRow {
    pub period: u64,
    pub method: String,
    pub totals: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Against the baseline at the same period (`None` for the baseline).
    pub improvement: Option<Improvement>,
}

pub const BASELINE_NAME: &str = "baseline";

fn distribution(period: u64, method: &str, totals: Vec<(u64, f64)>) -> FreqRow {
    let xs: Vec<f64> = totals.iter().map(|t| t.1).collect();
    let (mean, std) = mean_std(&xs);
    FreqRow {
        period,
        method: method.to_string(),
        mean,
        std,
        median: quantile(&xs, 0.5),
        q1: quantile(&xs, 0.25),
        q3: quantile(&xs, 0.75),
        totals,
        improvement: None,
    }
}

/// Runs the baseline and each method at every period; one row per
/// (period, method), baseline first.
pub fn nonstationarity_sweep(spec: &FreqSpec, exec: &Execution) -> Result<Vec<FreqRow>, LabError> {
    if spec.periods.is_empty() || spec.periods.contains(&0) {
        return Err(LabError::Config("periods must be a nonempty list of positive integers".into()));
    }
    if spec.methods.is_empty() {
        return Err(LabError::Config("a frequency sweep needs at least one [[method]]".into()));
    }
    if spec.seeds == 0 {
        return Err(LabError::Config("seeds must be positive".into()));
    }
    let mut named = vec![(BASELINE_NAME.to_string(), spec.baseline.clone())];
    for m in &spec.methods {
        if m.name == BASELINE_NAME || named.iter().any(|(n, _)| *n == m.name) {
            return Err(LabError::Config(format!("method name {} is reserved or repeated", m.name)));
        }
        named.push((m.name.clone(), m.config.clone()));
    }
    let seeds: Vec<u64> = (0..spec.seeds as u64).collect();
    let mut jobs = Vec::new();
    for &period in &spec.periods {
        for (name, cfg) in &named {
            for &seed in &seeds {
                let mut c = cfg.clone();
                c.env.period = period;
                c.seed = seed;
                c.validate()?;
                let path = exec.out.as_ref().map(|d| {
                    d.join(format!("period{period}")).join(file_safe(name)).join(format!("seed{seed}.csv"))
                });
                jobs.push((c, path));
            }
        }
    }
    let mut outcomes = exec.run(jobs)?.into_iter();
    let mut rows = Vec::new();
    for &period in &spec.periods {
        let mut base_totals: Vec<f64> = Vec::new();
        for (name, _) in &named {
            let mut totals = Vec::new();
            for &seed in &seeds {
                let r = outcomes.next().expect("one outcome per job");
                let t = r.map_err(|e| LabError::Run(format!("{name}, period {period}, seed {seed}: {e}")))?;
                totals.push((seed, t));
            }
            let mut row = distribution(period, name, totals);
            if name == BASELINE_NAME {
                base_totals = row.totals.iter().map(|t| t.1).collect();
            } else {
                let xs: Vec<f64> = row.totals.iter().map(|t| t.1).collect();
                row.improvement = Some(relative_improvement(&xs, &base_totals)?);
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Families added one by one in the fixed order.
    Prefix,
    /// Each family on its own.
    Individual,
}

/// Order in which families are added in the prefix mode.
pub const ABLATION_ORDER: [Family; 7] = crate::context::Family::ABLATION_ORDER;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub families: Vec<Family>,
    pub input_dim: usize,
    pub totals: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

/// Context configurations of a richness ablation: "none" (plain meta
/// state) followed by the prefixes or single families.
pub fn ablation_configs(
    base: &ExperimentConfig,
    mode: AblationMode,
    history: usize,
) -> Result<Vec<(String, ExperimentConfig)>, LabError> {
    if base.meta.is_none() {
        return Err(LabError::Config("a context ablation needs a [meta] section".into()));
    }
    if base.agent.kind != LearnerKind::ActorCritic {
        return Err(LabError::Config("the context ablation is defined for the actor-critic agent".into()));
    }
    let (hidden, layers) = base.context.as_ref().map_or((64, 2), |c| (c.hidden, c.layers));
    let mut none = base.clone();
    none.context = None;
    if none.logging.probes == Some(true) {
        none.logging.probes = None;
    }
    let mut out = vec![("none".to_string(), none)];
    let sets: Vec<Vec<Family>> = match mode {
        AblationMode::Prefix => (1..=ABLATION_ORDER.len()).map(|n| ABLATION_ORDER[..n].to_vec()).collect(),
        AblationMode::Individual => ABLATION_ORDER.iter().map(|f| vec![*f]).collect(),
    };
    for families in sets {
        let mut cfg = base.clone();
        let label = match mode {
            AblationMode::Prefix => format!("+{}", families.last().expect("nonempty").name()),
            AblationMode::Individual => families[0].name().to_string(),
        };
        cfg.context = Some(ContextSection { families, history, include_std: true, hidden, layers });
        out.push((label, cfg));
    }
    for (_, c) in &out {
        c.validate()?;
    }
    Ok(out)
}

pub fn richness_ablation(
    base: &ExperimentConfig,
    mode: AblationMode,
    history: usize,
    seeds: usize,
    exec: &Execution,
) -> Result<Vec<AblationRow>, LabError> {
    if seeds == 0 {
        return Err(LabError::Config("seeds must be positive".into()));
    }
    let configs = ablation_configs(base, mode, history)?;
    let mut jobs = Vec::new();
    for (label, cfg) in &configs {
        for seed in 0..seeds as u64 {
            let mut c = cfg.clone();
            c.seed = seed;
            let path = exec.out.as_ref().map(|d| d.join(file_safe(label)).join(format!("seed{seed}.csv")));
            jobs.push((c, path));
        }
    }
    let mut outcomes = exec.run(jobs)?.into_iter();
    let mut rows = Vec::new();
    for (label, cfg) in configs {
        let mut totals = Vec::new();
        for seed in 0..seeds as u64 {
            let t = outcomes
                .next()
                .expect("one outcome per job")
                .map_err(|e| LabError::Run(format!("{label}, seed {seed}: {e}")))?;
            totals.push((seed, t));
        }
        let xs: Vec<f64> = totals.iter().map(|t| t.1).collect();
        let (mean, std) = mean_std(&xs);
        let (families, input_dim) = match &cfg.context {
            Some(c) => {
                let info = crate::context::LayoutInfo {
                    kind: cfg.agent.kind,
                    num_cells: super::num_cells(&cfg.env),
                    num_meta: cfg.tuned().len(),
                };
                (c.families.clone(), c.feature_spec().input_dim(info))
            }
            None => (Vec::new(), 0),
        };
        rows.push(AblationRow { label, families, input_dim, totals, mean, std });
    }
    Ok(rows)
}

/// Mean total return per 10⁵ steps for a cell.
pub fn cell_rate(cell: &CellSummary) -> f64 {
    per_100k(cell.mean, cell.config.env.lifetime)
}
