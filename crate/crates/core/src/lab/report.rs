use std::io::Write;
use std::path::Path;

use super::sweep::{relative_improvement, AblationRow, FreqRow, VariantReport};
use super::{csv_writer, LabError};

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

/// One row per cell: status, seed count, mean and std of total return.
pub fn write_sweep_summary<W: Write>(reports: &[VariantReport], out: W) -> Result<(), LabError> {
    let mut w = csv_writer(out);
    w.write_record(["variant", "cell", "label", "status", "n", "mean", "std", "mean_per_100k", "best", "error"])?;
    for r in reports {
        for c in &r.cells {
            let totals = c.totals();
            let status = if c.failed() { "failed" } else { "ok" };
            let mean = if totals.is_empty() { String::new() } else { c.mean.to_string() };
            let std = if totals.is_empty() { String::new() } else { c.std.to_string() };
            let rate = if totals.is_empty() { String::new() } else { super::sweep::cell_rate(c).to_string() };
            w.write_record([
                r.name.clone(),
                c.index.to_string(),
                c.label.clone(),
                status.to_string(),
                totals.len().to_string(),
                mean,
                std,
                rate,
                (r.best == Some(c.index)).to_string(),
                c.first_error().unwrap_or("").to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `best_<variant>.toml` for every variant with a winner.
pub fn write_best_configs(reports: &[VariantReport], dir: &Path) -> Result<(), LabError> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::Io(format!("{}: {e}", dir.display())))?;
    for r in reports {
        if let Some(c) = r.best_cell() {
            let path = dir.join(format!("best_{}.toml", r.name));
            let text = c.config.to_toml()?;
            std::fs::write(&path, text).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}

/// Best cell of each variant and its change against the first non-meta
/// variant, if any.
pub fn write_comparison<W: Write>(reports: &[VariantReport], out: W) -> Result<(), LabError> {
    let baseline = reports.iter().find(|r| !r.is_meta).and_then(|r| r.best_cell());
    let mut w = csv_writer(out);
    w.write_record(["variant", "best_label", "grid_size", "mean", "std", "relative_improvement"])?;
    for r in reports {
        let Some(c) = r.best_cell() else {
            w.write_record([r.name.as_str(), "", &r.cells.len().to_string(), "", "", ""])?;
            continue;
        };
        let rel = match baseline {
            Some(b) if r.is_meta => Some(relative_improvement(&c.totals(), &b.totals())?.percent),
            _ => None,
        };
        w.write_record([
            r.name.clone(),
            c.label.clone(),
            r.cells.len().to_string(),
            c.mean.to_string(),
            c.std.to_string(),
            opt(rel),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_freq<W: Write, V: Write>(rows: &[FreqRow], summary: W, per_seed: V) -> Result<(), LabError> {
    let mut s = csv_writer(summary);
    s.write_record(["period", "method", "n", "mean", "std", "median", "q1", "q3", "relative_improvement"])?;
    let mut p = csv_writer(per_seed);
    p.write_record(["period", "method", "seed", "total", "relative_improvement"])?;
    for r in rows {
        s.write_record([
            r.period.to_string(),
            r.method.clone(),
            r.totals.len().to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.median.to_string(),
            r.q1.to_string(),
            r.q3.to_string(),
            opt(r.improvement.as_ref().map(|i| i.percent)),
        ])?;
        for (i, (seed, total)) in r.totals.iter().enumerate() {
            let rel = r.improvement.as_ref().map(|imp| imp.per_seed[i]);
            p.write_record([r.period.to_string(), r.method.clone(), seed.to_string(), total.to_string(), opt(rel)])?;
        }
    }
    s.flush()?;
    p.flush()?;
    Ok(())
}

pub fn write_ablation<W: Write>(rows: &[AblationRow], out: W) -> Result<(), LabError> {
    let mut w = csv_writer(out);
    w.write_record(["context", "families", "input_dim", "seed", "total", "mean", "std"])?;
    for r in rows {
        let fams = r.families.iter().map(|f| f.name()).collect::<Vec<_>>().join("+");
        for (seed, total) in &r.totals {
            w.write_record([
                r.label.clone(),
                fams.clone(),
                r.input_dim.to_string(),
                seed.to_string(),
                total.to_string(),
                r.mean.to_string(),
                r.std.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
