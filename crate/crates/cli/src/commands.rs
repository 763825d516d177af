//! The three subcommands, callable without going through the binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mlnn::gradcheck::{grad_check_suite, GradCheckCase, GradCheckOptions};
use mlnn::run_multilevel;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{self, ReportRow, Summary};

/// Environment variable naming the directory that relative output paths
/// resolve against.
pub const OUTPUT_ROOT_ENV: &str = "MLNN_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// Where a run writes: `output` if given, else the config's `output_dir`,
/// else the config file stem. Relative config paths live under `root`.
pub fn output_dir(config: &ExperimentConfig, config_path: &Path, output: Option<&Path>, root: &Path) -> PathBuf {
    if let Some(dir) = output {
        return dir.to_path_buf();
    }
    let name = config.output_dir.clone().map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(config_path.file_stem().unwrap_or_else(|| "run".as_ref()))
    });
    if name.is_absolute() {
        name
    } else {
        root.join(name)
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub dir: PathBuf,
    pub summary: Summary,
}

/// Trains every level of the config and writes the artifacts. A level that
/// fails still leaves the completed levels on disk, then returns a runtime
/// error.
pub fn run_experiment(config_path: &Path, output: Option<&Path>, root: &Path) -> Result<RunResult, CliError> {
    let config = ExperimentConfig::load(config_path)?;
    let dir = output_dir(&config, config_path, output, root);
    run_config(&config, &dir)
}

pub fn run_config(config: &ExperimentConfig, dir: &Path) -> Result<RunResult, CliError> {
    let problem = config.problem_def()?;
    let start = Instant::now();
    let run = run_multilevel(&problem, &config.levels(), &config.run_options())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let seconds = start.elapsed().as_secs_f64();
    output::write_run(dir, config, &run, seconds)?;
    let summary = Summary::new(config, &run, seconds);
    if let Some(f) = &run.failure {
        return Err(CliError::Runtime(format!(
            "level {} failed: {} (partial results in {})",
            f.level,
            f.message,
            dir.display()
        )));
    }
    Ok(RunResult { dir: dir.to_path_buf(), summary })
}

pub fn print_run(result: &RunResult) {
    println!(
        "{:>5} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "level", "mu", "loss", "residual", "l2", "h1", "max"
    );
    for l in &result.summary.levels {
        println!(
            "{:>5} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
            l.level, l.mu, l.final_loss, l.residual_loss, l.l2, l.h1, l.max_abs
        );
    }
    if let Some(level) = result.summary.converged_at {
        println!("residual vanished before level {level}");
    }
    println!("wrote {} ({:.1} s)", result.dir.display(), result.summary.wall_clock_seconds);
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckTotals {
    pub param: f64,
    pub first: f64,
    pub second: f64,
}

impl GradCheckTotals {
    pub fn of(cases: &[GradCheckCase]) -> Self {
        cases.iter().fold(Self::default(), |t, c| Self {
            param: t.param.max(c.param_deviation),
            first: t.first.max(c.first_deviation),
            second: t.second.max(c.second_deviation),
        })
    }
}

/// Runs the finite-difference suite and prints the worst case per
/// architecture and problem. Any case above tolerance is an error.
pub fn grad_check(options: &GradCheckOptions) -> Result<GradCheckTotals, CliError> {
    let cases = grad_check_suite(options).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{:<14} {:<12} {:>11} {:>11} {:>11}", "architecture", "problem", "params", "d/dx", "d2/dx2");
    let mut i = 0;
    while i < cases.len() {
        let group: Vec<&GradCheckCase> = cases[i..]
            .iter()
            .take_while(|c| c.architecture == cases[i].architecture && c.problem == cases[i].problem)
            .collect();
        let worst = |f: fn(&GradCheckCase) -> f64| group.iter().map(|c| f(c)).fold(0.0, f64::max);
        println!(
            "{:<14} {:<12} {:>11.3e} {:>11.3e} {:>11.3e}",
            group[0].architecture,
            group[0].problem,
            worst(|c| c.param_deviation),
            worst(|c| c.first_deviation),
            worst(|c| c.second_deviation)
        );
        i += group.len();
    }
    let totals = GradCheckTotals::of(&cases);
    let worst = totals.param.max(totals.first).max(totals.second);
    let failed = cases.iter().filter(|c| !c.passed).count();
    println!(
        "max relative deviation {worst:.3e} (params {:.3e}), tolerance {:.0e}, {} of {} cases failed",
        totals.param,
        options.tolerance,
        failed,
        cases.len()
    );
    if failed > 0 {
        return Err(CliError::Runtime(format!("gradient check failed in {failed} cases")));
    }
    Ok(totals)
}

pub fn report(dir: &Path) -> Result<Vec<ReportRow>, CliError> {
    let rows = output::write_report(dir)?;
    println!("wrote {} rows to {}", rows.len(), dir.join(output::REPORT_FILE).display());
    Ok(rows)
}
