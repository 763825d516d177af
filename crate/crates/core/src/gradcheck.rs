//! Finite-difference verification of the analytic derivatives.
//!
//! Parameter gradients of the collocation loss are compared with central
//! differences of the loss; spatial derivatives of the trial with central
//! differences of [`trial_value`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{
    finite_diff_gradient, relative_deviation, CollocationLoss, DerivativeBundle, Evaluator,
};
use crate::error::Result;
use crate::grid::PointSet;
use crate::model::{trial_value, xavier_init, Activation, ArchitectureKind, NetworkSpec};
use crate::problems::{ProblemDef, PROBLEM_LABELS};

pub const CHECKED_KINDS: [ArchitectureKind; 3] =
    [ArchitectureKind::PlainG, ArchitectureKind::FourierG, ArchitectureKind::FourierSine];

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub seeds: u64,
    pub hidden_widths: Vec<usize>,
    pub num_wavenumbers: usize,
    pub activation: Activation,
    /// Collocation points per axis for the loss.
    pub points_per_axis: [usize; 2],
    /// Random interior points for the spatial checks.
    pub spatial_points: usize,
    pub param_step: f64,
    pub first_step: f64,
    pub second_step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seeds: 5,
            hidden_widths: vec![8, 6],
            num_wavenumbers: 3,
            activation: Activation::Tanh,
            points_per_axis: [32, 6],
            spatial_points: 8,
            param_step: 1e-6,
            first_step: 1e-5,
            second_step: 5e-4,
            tolerance: 1e-6,
        }
    }
}

/// Largest deviations seen for one (architecture, problem, seed) case.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub architecture: &'static str,
    pub problem: &'static str,
    pub seed: u64,
    pub param_deviation: f64,
    pub first_deviation: f64,
    pub second_deviation: f64,
    pub passed: bool,
}

impl GradCheckCase {
    pub fn worst(&self) -> f64 {
        self.param_deviation.max(self.first_deviation).max(self.second_deviation)
    }
}

/// `(f(x - 2h) ... f(x + 2h))` fourth-order stencil for `f''(x)`.
pub fn second_derivative_fd<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 16.0 * f(x + h) - 30.0 * f(x) + 16.0 * f(x - h) - f(x - 2.0 * h)) / (12.0 * h * h)
}

pub fn first_derivative_fd<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Runs every architecture against every benchmark problem with default
/// parameters, `options.seeds` random initializations each.
pub fn grad_check_suite(options: &GradCheckOptions) -> Result<Vec<GradCheckCase>> {
    let mut cases = Vec::new();
    for label in PROBLEM_LABELS {
        let problem = ProblemDef::from_label(label, None, None, None)?;
        for kind in CHECKED_KINDS {
            for seed in 0..options.seeds {
                cases.push(check_case(&problem, kind, seed, options)?);
            }
        }
    }
    Ok(cases)
}

pub fn check_case(
    problem: &ProblemDef,
    kind: ArchitectureKind,
    seed: u64,
    options: &GradCheckOptions,
) -> Result<GradCheckCase> {
    let dim = problem.dim();
    let m = if kind.uses_fourier_input() { options.num_wavenumbers } else { 0 };
    let spec = NetworkSpec::new(dim, options.hidden_widths.clone(), m, problem.domain_length(), kind)?
        .with_activation(options.activation);
    let mut params = xavier_init(&spec, seed).into_vec();
    // Xavier biases are zero; perturb everything so no parameter sits at a special value
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for p in params.iter_mut() {
        *p += rng.gen_range(-0.2..0.2);
    }

    let points = PointSet::midpoint_grid(dim, options.points_per_axis[dim - 1], problem.domain_length());
    let source: Vec<f64> = points.iter().map(|x| problem.source(x)).collect();
    let loss = CollocationLoss {
        operator: *problem.operator(),
        lift: problem.lift().copied(),
        points: &points,
        source: &source,
        scale: 1.0,
    };
    let analytic = loss.loss_and_gradient(&spec, &params)?.gradient;
    let fd = finite_diff_gradient(|p| loss.loss(&spec, p).unwrap_or(f64::NAN), &params, options.param_step);
    let param_deviation = relative_deviation(&analytic, &fd);

    let mut first_deviation = 0.0f64;
    let mut second_deviation = 0.0f64;
    let mut ev = Evaluator::new(&spec);
    let lift = problem.lift();
    let ell = problem.domain_length();
    for _ in 0..options.spatial_points {
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.05 * ell..0.95 * ell)).collect();
        let mut b = ev.forward(&params, &x);
        if let Some(l) = lift {
            b.add_scaled(&DerivativeBundle::from_lift(l, &x), 1.0);
        }
        for j in 0..dim {
            let mut along = |t: f64| {
                let mut y = x.clone();
                y[j] = t;
                trial_value(&spec, &params, &y, lift).unwrap_or(f64::NAN)
            };
            let d1 = first_derivative_fd(&mut along, x[j], options.first_step);
            let d2 = second_derivative_fd(&mut along, x[j], options.second_step);
            first_deviation = first_deviation.max((b.grad[j] - d1).abs() / (1.0 + b.grad[j].abs()));
            second_deviation = second_deviation.max((b.diag_hess[j] - d2).abs() / (1.0 + b.diag_hess[j].abs()));
        }
    }
    let worst = param_deviation.max(first_deviation).max(second_deviation);
    Ok(GradCheckCase {
        architecture: kind.label(),
        problem: problem.label(),
        seed,
        param_deviation,
        first_deviation,
        second_deviation,
        passed: worst.is_finite() && worst <= options.tolerance,
    })
}
