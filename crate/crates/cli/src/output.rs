//! Run artifacts: per-level histories, the final solution on the evaluation
//! grid, a JSON summary, and the merged report.
//!
//! Floats are written with 17 significant digits so they parse back to the
//! same `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use mlnn::multilevel::{LevelOutcome, MultilevelRun};
use mlnn::optimize::{Phase, RecordRow};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const HISTORY_HEADER: [&str; 5] = ["iteration", "phase", "loss", "l2", "h1"];
pub const REPORT_HEADER: [&str; 7] = ["cumulative_iteration", "level", "iteration", "phase", "loss", "l2", "h1"];
pub const SUMMARY_FILE: &str = "summary.json";
pub const SOLUTION_FILE: &str = "solution.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const PLOT_SCRIPT: &str = "plot_report.py";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn history_file(level: usize) -> String {
    format!("history_{level}.csv")
}

fn parse_f64(field: &str, what: &str) -> Result<f64, CliError> {
    field.parse().map_err(|_| CliError::Runtime(format!("bad {what} value '{field}'")))
}

fn parse_opt(field: &str, what: &str) -> Result<Option<f64>, CliError> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_f64(field, what).map(Some)
    }
}

fn parse_phase(field: &str) -> Result<Phase, CliError> {
    match field {
        "adam" => Ok(Phase::Adam),
        "lbfgs" => Ok(Phase::Lbfgs),
        other => Err(CliError::Runtime(format!("unknown phase '{other}'"))),
    }
}

fn row_fields(r: &RecordRow) -> [String; 5] {
    [r.iteration.to_string(), r.phase.label().to_string(), fmt_f64(r.loss), fmt_opt(r.l2), fmt_opt(r.h1)]
}

pub fn write_history(path: &Path, rows: &[RecordRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTORY_HEADER)?;
    for r in rows {
        w.write_record(row_fields(r))?;
    }
    w.flush()?;
    Ok(())
}

fn parse_row(rec: &csv::StringRecord, offset: usize) -> Result<RecordRow, CliError> {
    let field = |i: usize| rec.get(offset + i).unwrap_or("");
    Ok(RecordRow {
        iteration: field(0)
            .parse()
            .map_err(|_| CliError::Runtime(format!("bad iteration '{}'", field(0))))?,
        phase: parse_phase(field(1))?,
        loss: parse_f64(field(2), "loss")?,
        l2: parse_opt(field(3), "l2")?,
        h1: parse_opt(field(4), "h1")?,
    })
}

pub fn read_history(path: &Path) -> Result<Vec<RecordRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    r.records().map(|rec| parse_row(&rec?, 0)).collect()
}

/// One row of `report.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportRow {
    pub cumulative_iteration: usize,
    pub level: usize,
    pub row: RecordRow,
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let int = |i: usize| {
                rec.get(i)
                    .unwrap_or("")
                    .parse::<usize>()
                    .map_err(|_| CliError::Runtime(format!("bad integer in report column {i}")))
            };
            Ok(ReportRow { cumulative_iteration: int(0)?, level: int(1)?, row: parse_row(&rec, 2)? })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: usize,
    pub mu: f64,
    pub mu_estimated: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub elm_amplitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub elm_condition: Option<f64>,
    pub final_loss: f64,
    pub residual_loss: f64,
    pub l2: f64,
    pub h1: f64,
    pub max_abs: f64,
    pub adam_iterations: usize,
    pub lbfgs_iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub early_stop: Option<String>,
    pub parameters: usize,
    pub seconds: f64,
}

impl LevelSummary {
    fn new(level: usize, o: &LevelOutcome) -> Self {
        Self {
            level,
            mu: o.mu,
            mu_estimated: o.scale.is_some(),
            elm_amplitude: o.scale.map(|s| s.amplitude),
            elm_condition: o.scale.map(|s| s.condition).filter(|c| c.is_finite()),
            final_loss: o.final_loss,
            residual_loss: o.residual_loss,
            l2: o.metrics.l2,
            h1: o.metrics.h1,
            max_abs: o.metrics.max_abs,
            adam_iterations: o.record.count(Phase::Adam),
            lbfgs_iterations: o.record.count(Phase::Lbfgs),
            early_stop: o.record.early_stop.as_ref().map(|s| format!("{s:?}").to_lowercase()),
            parameters: o.param_count,
            seconds: o.seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub level: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: String,
    pub problem: String,
    pub complete: bool,
    pub levels: Vec<LevelSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub converged_at: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<FailureSummary>,
    pub wall_clock_seconds: f64,
    pub threads: usize,
    /// Everything needed to repeat the run.
    pub config: ExperimentConfig,
}

impl Summary {
    pub fn new(config: &ExperimentConfig, run: &MultilevelRun, seconds: f64) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            problem: run.composite.problem().label().to_string(),
            complete: run.failure.is_none(),
            levels: run.levels.iter().enumerate().map(|(i, o)| LevelSummary::new(i, o)).collect(),
            converged_at: run.converged_at,
            failure: run
                .failure
                .as_ref()
                .map(|f| FailureSummary { level: f.level, message: f.message.clone() }),
            wall_clock_seconds: seconds,
            threads: rayon::current_num_threads(),
            config: config.clone(),
        }
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}

/// Writes every artifact of a run (finished or not) into `dir`.
pub fn write_run(dir: &Path, config: &ExperimentConfig, run: &MultilevelRun, seconds: f64) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (i, level) in run.levels.iter().enumerate() {
        let path = dir.join(history_file(i));
        write_history(&path, &level.record.rows)?;
        written.push(path);
    }
    if let Some(f) = &run.failure {
        let path = dir.join(history_file(f.level));
        write_history(&path, &f.record.rows)?;
        written.push(path);
    }

    let path = dir.join(SOLUTION_FILE);
    write_solution(&path, run)?;
    written.push(path);

    let path = dir.join(SUMMARY_FILE);
    let summary = Summary::new(config, run, seconds);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&path, json + "\n")?;
    written.push(path);
    Ok(written)
}

fn write_solution(path: &Path, run: &MultilevelRun) -> Result<(), CliError> {
    let problem = run.composite.problem();
    let grid = &run.eval_grid;
    let values = run.composite.composite_values(grid);
    let mut w = csv::Writer::from_path(path)?;
    let axes: &[&str] = if grid.dim() == 1 { &["x"] } else { &["x", "y"] };
    let header: Vec<&str> = axes.iter().copied().chain(["exact", "composite", "error"]).collect();
    w.write_record(&header)?;
    for (x, b) in grid.iter().zip(&values) {
        let exact = problem.exact(x);
        let mut rec: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
        rec.extend([fmt_f64(exact), fmt_f64(b.value), fmt_f64(exact - b.value)]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Merges the level histories of a finished run into `report.csv` and
/// writes a matplotlib script that plots it.
pub fn write_report(dir: &Path) -> Result<Vec<ReportRow>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Runtime(format!("{} is not a directory", dir.display())));
    }
    let summary = Summary::read(dir)?;
    if !summary.complete {
        return Err(CliError::Runtime(format!("{} holds an incomplete run", dir.display())));
    }
    let mut rows = Vec::new();
    for level in 0..summary.levels.len() {
        let path = dir.join(history_file(level));
        if !path.is_file() {
            return Err(CliError::Runtime(format!("missing {}", path.display())));
        }
        for row in read_history(&path)? {
            rows.push(ReportRow { cumulative_iteration: rows.len() + 1, level, row });
        }
    }
    let mut w = csv::Writer::from_path(dir.join(REPORT_FILE))?;
    w.write_record(REPORT_HEADER)?;
    for r in &rows {
        let mut rec = vec![r.cumulative_iteration.to_string(), r.level.to_string()];
        rec.extend(row_fields(&r.row));
        w.write_record(&rec)?;
    }
    w.flush()?;
    fs::write(dir.join(PLOT_SCRIPT), plot_script(&summary))?;
    Ok(rows)
}

fn plot_script(summary: &Summary) -> String {
    format!(
        r#"# Convergence plots for a {problem} run; execute from the run directory.
import csv

import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("{report}")))
it = [int(r["cumulative_iteration"]) for r in rows]
level = [int(r["level"]) for r in rows]

fig, (ax_loss, ax_err) = plt.subplots(1, 2, figsize=(11, 4))
ax_loss.semilogy(it, [float(r["loss"]) for r in rows])
ax_loss.set_xlabel("iteration")
ax_loss.set_ylabel("loss")
for name in ("l2", "h1"):
    pts = [(i, float(r[name])) for i, r in zip(it, rows) if r[name]]
    if pts:
        ax_err.semilogy(*zip(*pts), label=name.upper())
ax_err.set_xlabel("iteration")
ax_err.legend()
for ax in (ax_loss, ax_err):
    for lv in range(1, {levels}):
        ax.axvline(next(i for i, l in zip(it, level) if l == lv), color="gray", lw=0.5)
fig.tight_layout()
fig.savefig("report.png", dpi=150)

sol = list(csv.DictReader(open("{solution}")))
if "y" not in sol[0]:
    plt.figure()
    plt.semilogy([float(r["x"]) for r in sol], [abs(float(r["error"])) for r in sol])
    plt.xlabel("x")
    plt.ylabel("|u - u_approx|")
    plt.savefig("pointwise_error.png", dpi=150)
"#,
        problem = summary.problem,
        report = REPORT_FILE,
        solution = SOLUTION_FILE,
        levels = summary.levels.len(),
    )
}
