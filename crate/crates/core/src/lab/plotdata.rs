use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::stats::{ci95, mean_std, quantile};
use super::{csv_writer, LabError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Meta-parameters and mean reward against steps, mean and 95% CI.
    Schedule,
    /// Probe predictions against steps, mean and std.
    Probes,
    /// Median and IQR of totals per change period.
    Freq,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<Self, LabError> {
        match s {
            "schedule" => Ok(Self::Schedule),
            "probes" => Ok(Self::Probes),
            "freq" => Ok(Self::Freq),
            _ => Err(LabError::Config(format!("unknown plot kind {s:?} (schedule, probes or freq)"))),
        }
    }
}

struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &PathBuf) -> Result<Table, LabError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(Table { path: path.clone(), header, rows })
}

fn parse_f64(s: &str, t: &Table, col: &str) -> Result<f64, LabError> {
    s.parse::<f64>()
        .map_err(|_| LabError::Config(format!("{}: column {col} holds {s:?}, not a number", t.path.display())))
}

const STEP_COLUMNS: [&str; 3] = ["env_step", "outer_iteration", "task_index"];

/// Aggregates metrics files (one per seed) into plot-ready CSV.
pub fn emit_plotdata<W: Write>(files: &[PathBuf], kind: PlotKind, out: W) -> Result<(), LabError> {
    if files.is_empty() {
        return Err(LabError::Config("plotdata needs at least one input file".into()));
    }
    let tables = files.iter().map(read_table).collect::<Result<Vec<_>, _>>()?;
    match kind {
        PlotKind::Freq => freq(&tables, out),
        PlotKind::Schedule | PlotKind::Probes => per_step(&tables, kind, out),
    }
}

fn per_step<W: Write>(tables: &[Table], kind: PlotKind, out: W) -> Result<(), LabError> {
    let first = &tables[0];
    for t in &tables[1..] {
        if t.header != first.header {
            return Err(LabError::Config(format!(
                "{} and {} have different columns",
                first.path.display(),
                t.path.display()
            )));
        }
        if t.rows.len() != first.rows.len() {
            return Err(LabError::Config(format!(
                "{} has {} rows but {} has {}",
                first.path.display(),
                first.rows.len(),
                t.path.display(),
                t.rows.len()
            )));
        }
    }
    let step_col = first
        .header
        .iter()
        .position(|h| h == "env_step")
        .ok_or_else(|| LabError::Config(format!("{}: no env_step column", first.path.display())))?;
    let cols: Vec<usize> = match kind {
        PlotKind::Probes => {
            let c: Vec<usize> = (0..first.header.len()).filter(|&i| first.header[i].starts_with("probe_")).collect();
            if c.is_empty() {
                return Err(LabError::ProbesAbsent);
            }
            c
        }
        _ => {
            let lo = first.header.iter().position(|h| h == "return_per_100k").map_or(0, |p| p + 1);
            let hi = first.header.iter().position(|h| h == "inner_loss").unwrap_or(first.header.len());
            let mut c = vec![];
            if let Some(r) = first.header.iter().position(|h| h == "mean_rollout_reward") {
                c.push(r);
            }
            c.extend((lo..hi).filter(|&i| !STEP_COLUMNS.contains(&first.header[i].as_str())));
            c
        }
    };
    let mut w = csv_writer(out);
    let mut header = vec!["env_step".to_string(), "n".to_string()];
    for &c in &cols {
        let name = &first.header[c];
        match kind {
            PlotKind::Probes => header.extend([format!("{name}_mean"), format!("{name}_std")]),
            _ => header.extend([format!("{name}_mean"), format!("{name}_ci_low"), format!("{name}_ci_high")]),
        }
    }
    w.write_record(&header)?;
    for r in 0..first.rows.len() {
        let step = &first.rows[r][step_col];
        for t in &tables[1..] {
            if &t.rows[r][step_col] != step {
                return Err(LabError::Config(format!(
                    "row {}: env_step {} in {} but {} in {}",
                    r + 1,
                    step,
                    first.path.display(),
                    t.rows[r][step_col],
                    t.path.display()
                )));
            }
        }
        let mut rec = vec![step.clone(), tables.len().to_string()];
        for &c in &cols {
            let mut xs = Vec::with_capacity(tables.len());
            for t in tables {
                let cell = &t.rows[r][c];
                if cell.is_empty() {
                    if kind == PlotKind::Probes {
                        return Err(LabError::ProbesAbsent);
                    }
                    continue;
                }
                xs.push(parse_f64(cell, t, &first.header[c])?);
            }
            match kind {
                PlotKind::Probes => {
                    let (m, s) = mean_std(&xs);
                    rec.extend([m.to_string(), s.to_string()]);
                }
                _ => {
                    let (m, lo, hi) = ci95(&xs);
                    rec.extend([m.to_string(), lo.to_string(), hi.to_string()]);
                }
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Input: per-seed files with columns period, method, seed, total.
fn freq<W: Write>(tables: &[Table], out: W) -> Result<(), LabError> {
    let mut groups: BTreeMap<(u64, String), BTreeMap<u64, f64>> = BTreeMap::new();
    for t in tables {
        let idx = |name: &str| {
            t.header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| LabError::Config(format!("{}: no {name} column", t.path.display())))
        };
        let (pc, mc, sc, tc) = (idx("period")?, idx("method")?, idx("seed")?, idx("total")?);
        for row in &t.rows {
            let period = parse_f64(&row[pc], t, "period")? as u64;
            let seed = parse_f64(&row[sc], t, "seed")? as u64;
            let total = parse_f64(&row[tc], t, "total")?;
            let g = groups.entry((period, row[mc].clone())).or_default();
            if g.insert(seed, total).is_some() {
                return Err(LabError::Config(format!(
                    "seed {seed} of {} at period {period} appears twice",
                    row[mc]
                )));
            }
        }
    }
    let mut counts = groups.iter().map(|(k, g)| (k, g.len()));
    if let Some((k0, n0)) = counts.next() {
        if let Some((k, n)) = counts.find(|(_, n)| *n != n0) {
            return Err(LabError::SeedMismatch(format!(
                "{} at period {} has {n0} seeds but {} at period {} has {n}",
                k0.1, k0.0, k.1, k.0
            )));
        }
    }
    let mut w = csv_writer(out);
    w.write_record(["period", "method", "n", "median", "q1", "q3"])?;
    for ((period, method), g) in &groups {
        let xs: Vec<f64> = g.values().copied().collect();
        w.write_record([
            period.to_string(),
            method.clone(),
            xs.len().to_string(),
            quantile(&xs, 0.5).to_string(),
            quantile(&xs, 0.25).to_string(),
            quantile(&xs, 0.75).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
