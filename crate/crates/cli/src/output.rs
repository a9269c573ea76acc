//! CSV result tables and JSON timing sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::experiments::{ScalingReport, SolveReport, UpdateReport, OptimizeReport};
use crate::CliError;

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";")
}

/// Writes `field.csv` and `solve.json`; returns the paths written.
pub fn write_solve(dir: &Path, r: &SolveReport) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("field.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    let per = if r.points.is_empty() { 1 } else { r.values.len() / r.points.len() };
    if per == 1 {
        w.write_record(["x", "y", "u"]).map_err(csv_err)?;
    } else {
        w.write_record(["x", "y", "u1", "u2"]).map_err(csv_err)?;
    }
    for (i, p) in r.points.iter().enumerate() {
        let mut rec = vec![p.x.to_string(), p.y.to_string()];
        rec.extend(r.values[per * i..per * (i + 1)].iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    let json_path = dir.join("solve.json");
    write_json(&json_path, r)?;
    Ok(vec![csv_path, json_path])
}

pub fn write_scaling(dir: &Path, r: &ScalingReport) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("scaling.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record(["n", "factor_s", "solve_s", "apply_s", "solve_over_factor", "root_size", "k_l"])
        .map_err(csv_err)?;
    for row in &r.rows {
        w.write_record([
            row.n.to_string(),
            row.factor_seconds.to_string(),
            row.solve_seconds.to_string(),
            row.apply_seconds.to_string(),
            (row.solve_seconds / row.factor_seconds).to_string(),
            row.root_size.to_string(),
            join(&row.max_skeleton),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let mut out = vec![csv_path];
    if !r.threads.is_empty() {
        let p = dir.join("threads.csv");
        let mut w = csv::Writer::from_path(&p).map_err(csv_err)?;
        w.write_record(["threads", "factor_s", "speedup", "identical"]).map_err(csv_err)?;
        for t in &r.threads {
            w.write_record([
                t.threads.to_string(),
                t.factor_seconds.to_string(),
                t.speedup.to_string(),
                t.identical.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        out.push(p);
    }
    let json_path = dir.join("scaling.json");
    write_json(&json_path, r)?;
    out.push(json_path);
    Ok(out)
}

pub fn write_update(dir: &Path, r: &UpdateReport) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("updates.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record(["index", "update_s", "recompressed", "boxes"]).map_err(csv_err)?;
    for u in &r.updates {
        w.write_record([
            u.index.to_string(),
            u.seconds.to_string(),
            u.recompressed.to_string(),
            u.boxes.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let json_path = dir.join("update.json");
    write_json(&json_path, r)?;
    Ok(vec![csv_path, json_path])
}

pub fn write_optimize(dir: &Path, r: &OptimizeReport) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("optimize.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record([
        "iter", "theta1", "theta2", "objective", "grad1", "grad2", "step", "halvings", "evaluations", "seconds",
    ])
    .map_err(csv_err)?;
    for it in &r.log.iterations {
        w.write_record([
            it.iter.to_string(),
            it.theta[0].to_string(),
            it.theta[1].to_string(),
            it.objective.to_string(),
            it.gradient[0].to_string(),
            it.gradient[1].to_string(),
            it.step.to_string(),
            it.halvings.to_string(),
            it.evaluations.to_string(),
            it.seconds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let json_path = dir.join("optimize.json");
    write_json(&json_path, r)?;
    Ok(vec![csv_path, json_path])
}
