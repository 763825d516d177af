use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mlnn_cli::output::{self, read_history, read_report, Summary};

fn mlnn(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlnn"))
        .args(args)
        .env("MLNN_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SHORT: &str = r#"
problem = "poisson1d"
k = 2
seed = 3
collocation = 128
eval_points = 256
adam_metric_stride = 5
elm_width = 20

[[level]]
widths = [6]
wavenumbers = 1
adam_iterations = 40
lbfgs_iterations = 10

[[level]]
widths = [6]
wavenumbers = 2
adam_iterations = 30
lbfgs_iterations = 5

[[level]]
widths = [6]
wavenumbers = 3
adam_iterations = 20
lbfgs_iterations = 5

[[level]]
widths = [4]
wavenumbers = 1
adam_iterations = 20
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn short_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "short.cfg", SHORT);
    let out = mlnn(&["run", cfg.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));

    let dir = tmp.path().join("short");
    let summary = Summary::read(&dir).unwrap();
    assert!(summary.complete);
    assert_eq!(summary.levels.len(), 4);
    assert_eq!(summary.config.seed, 3);
    assert_eq!(summary.version, env!("CARGO_PKG_VERSION"));
    for (i, level) in summary.levels.iter().enumerate() {
        let rows = read_history(&dir.join(output::history_file(i))).unwrap();
        assert_eq!(rows.len(), level.adam_iterations + level.lbfgs_iterations);
        assert!(level.mu > 0.0 && level.l2.is_finite());
    }
    let solution = fs::read_to_string(dir.join(output::SOLUTION_FILE)).unwrap();
    assert!(solution.starts_with("x,exact,composite,error\n"));
    assert_eq!(solution.lines().count(), 257);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "short.cfg", SHORT);
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = mlnn(&["run", cfg.to_str().unwrap(), "--output", dir.to_str().unwrap()], tmp.path());
        assert!(out.status.success(), "{}", stderr(&out));
        dirs.push(dir);
    }
    let mut files = vec![output::SOLUTION_FILE.to_string()];
    files.extend((0..4).map(output::history_file));
    for f in files {
        let a = fs::read(dirs[0].join(&f)).unwrap();
        let b = fs::read(dirs[1].join(&f)).unwrap();
        assert!(a == b, "{f} differs between reruns");
    }
}

#[test]
fn config_echo_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "short.cfg", SHORT);
    let first = tmp.path().join("first");
    assert!(mlnn(&["run", cfg.to_str().unwrap(), "-o", first.to_str().unwrap()], tmp.path()).status.success());

    let echo = Summary::read(&first).unwrap().config.to_toml();
    let cfg2 = write_config(tmp.path(), "echo.cfg", &echo);
    let second = tmp.path().join("second");
    assert!(mlnn(&["run", cfg2.to_str().unwrap(), "-o", second.to_str().unwrap()], tmp.path()).status.success());
    assert_eq!(
        fs::read(first.join(output::SOLUTION_FILE)).unwrap(),
        fs::read(second.join(output::SOLUTION_FILE)).unwrap()
    );
}

#[test]
fn report_merges_levels_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "short.cfg", SHORT);
    assert!(mlnn(&["run", cfg.to_str().unwrap()], tmp.path()).status.success());
    let dir = tmp.path().join("short");
    let out = mlnn(&["report", dir.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.join(output::PLOT_SCRIPT).is_file());

    let report = read_report(&dir.join(output::REPORT_FILE)).unwrap();
    let mut expected = Vec::new();
    for level in 0..4 {
        for row in read_history(&dir.join(output::history_file(level))).unwrap() {
            expected.push((level, row));
        }
    }
    assert_eq!(report.len(), expected.len());
    for (i, (r, (level, row))) in report.iter().zip(&expected).enumerate() {
        assert_eq!(r.cumulative_iteration, i + 1);
        assert_eq!(r.level, *level);
        assert_eq!(r.row, *row);
    }
    let levels: Vec<usize> = report.iter().map(|r| r.level).collect();
    assert_eq!(levels.first(), Some(&0));
    assert_eq!(levels.last(), Some(&3));
    assert!(levels.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
}

#[test]
fn report_rejects_empty_and_incomplete_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = mlnn(&["report", empty.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));

    let cfg = write_config(tmp.path(), "short.cfg", SHORT);
    assert!(mlnn(&["run", cfg.to_str().unwrap()], tmp.path()).status.success());
    let dir = tmp.path().join("short");
    fs::remove_file(dir.join(output::history_file(2))).unwrap();
    let out = mlnn(&["report", dir.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("history_2.csv"), "{}", stderr(&out));
}

#[test]
fn missing_problem_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.cfg", &SHORT.replace("problem = \"poisson1d\"", ""));
    let out = mlnn(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("problem"), "{}", stderr(&out));
    assert!(!tmp.path().join("bad").exists());
}

#[test]
fn undersized_collocation_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.cfg", &SHORT.replace("elm_width = 20", "elm_width = 50"));
    let out = mlnn(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("level 2"), "{}", stderr(&out));
}

#[test]
fn type_errors_report_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.cfg", &SHORT.replace("adam_iterations = 30", "adam_iterations = \"many\""));
    let out = mlnn(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 19"), "{}", stderr(&out));
}

#[test]
fn diverging_level_keeps_partial_results() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SHORT.replacen("lbfgs_iterations = 5", "lbfgs_iterations = 5\nlearning_rate = 1e300", 1);
    let cfg = write_config(tmp.path(), "diverge.cfg", &text);
    let out = mlnn(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("level 1"), "{}", stderr(&out));

    let dir = tmp.path().join("diverge");
    let summary = Summary::read(&dir).unwrap();
    assert!(!summary.complete);
    assert_eq!(summary.levels.len(), 1);
    assert_eq!(summary.failure.as_ref().map(|f| f.level), Some(1));
    assert!(dir.join(output::history_file(0)).is_file());
    assert!(dir.join(output::SOLUTION_FILE).is_file());
    assert_eq!(mlnn(&["report", dir.to_str().unwrap()], tmp.path()).status.code(), Some(1));
}

#[test]
fn grad_check_passes_by_default() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mlnn(&["grad-check"], tmp.path());
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("0 of 60 cases failed"), "{}", stdout(&out));
}

#[test]
fn grad_check_catches_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mlnn(&["grad-check", "--seeds", "1", "--inject-fault"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn identity_network_gradients_are_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mlnn(&["grad-check", "--widths", "1", "--activation", "identity"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let params: f64 = text
        .split("(params ")
        .nth(1)
        .and_then(|s| s.split(')').next())
        .and_then(|s| s.parse().ok())
        .expect("summary line");
    assert!(params <= 1e-10, "{text}");
}
