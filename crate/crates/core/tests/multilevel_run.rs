//! Short multi-level runs through the public API.

use mlnn::problems::{helmholtz1d, poisson1d};
use mlnn::{run_multilevel, Error, LevelConfig, MultilevelRun, ProblemDef, RunOptions};

fn options() -> RunOptions {
    RunOptions { eval_per_axis: Some(256), elm_width: 20, adam_metric_stride: 0, lbfgs_metric_stride: 0, ..RunOptions::default() }
}

fn level(widths: Vec<usize>, m: usize, seed: u64) -> LevelConfig {
    let mut c = LevelConfig::new(widths, m, 300, 60);
    c.seed = seed;
    c.collocation_per_axis = Some(128);
    c
}

fn two_levels(problem: &ProblemDef) -> MultilevelRun {
    let levels = [level(vec![10], 1, 0), level(vec![10], 3, 1)];
    let run = run_multilevel(problem, &levels, &options()).unwrap();
    assert!(run.failure.is_none());
    run
}

#[test]
fn correction_reduces_poisson_error() {
    let run = two_levels(&poisson1d(2).unwrap());
    let (first, second) = (&run.levels[0], &run.levels[1]);
    assert_eq!(first.mu, 1.0);
    assert!(second.scale.is_some() && second.mu > 1.0);
    assert!(second.metrics.l2 < first.metrics.l2 / 10.0, "{} vs {}", second.metrics.l2, first.metrics.l2);
    assert!(second.residual_loss < first.residual_loss);
}

#[test]
fn residual_loss_is_scaled_training_loss() {
    let run = two_levels(&poisson1d(2).unwrap());
    let mut product = 1.0;
    for l in &run.levels {
        product *= l.mu;
        let expected = l.final_loss / (product * product);
        assert!((l.residual_loss - expected).abs() <= 1e-15 * expected);
    }
}

#[test]
fn helmholtz_composite_keeps_boundary_data() {
    let run = two_levels(&helmholtz1d(9200.0).unwrap());
    assert_eq!(run.composite.len(), 2);
    assert!(run.composite.composite_eval(&[0.0]).value.abs() <= 1e-14);
    assert!((run.composite.composite_eval(&[1.0]).value - 1.0).abs() <= 1e-14);
}

#[test]
fn reruns_are_bit_identical() {
    let problem = poisson1d(2).unwrap();
    let (a, b) = (two_levels(&problem), two_levels(&problem));
    for (x, y) in a.levels.iter().zip(&b.levels) {
        assert_eq!(x.mu.to_bits(), y.mu.to_bits());
        assert_eq!(x.final_loss.to_bits(), y.final_loss.to_bits());
        assert_eq!(x.metrics.l2.to_bits(), y.metrics.l2.to_bits());
    }
}

#[test]
fn configuration_errors_precede_training() {
    let problem = poisson1d(2).unwrap();
    assert!(matches!(run_multilevel(&problem, &[], &options()), Err(Error::InvalidArgument(_))));
    let mut small = level(vec![10], 3, 1);
    small.collocation_per_axis = Some(16);
    let err = run_multilevel(&problem, &[level(vec![10], 1, 0), small], &options()).unwrap_err();
    assert!(err.to_string().contains("level 1"), "{err}");
}
