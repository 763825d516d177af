//! Benchmark boundary-value problems on `(0, 1)^d`.
//!
//! Every operator is linear with constant coefficients, so it is stored as
//! the weights it applies to `(u, ∂u/∂x_j, ∂²u/∂x_j²)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::DerivativeBundle;
use crate::error::{Error, Result};
use crate::model::{AffineLift, MAX_DIM};

/// `A u = c u + Σ_j a_j ∂u/∂x_j + Σ_j b_j ∂²u/∂x_j²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearOperator {
    pub value: f64,
    pub grad: [f64; MAX_DIM],
    pub diag_hess: [f64; MAX_DIM],
}

impl LinearOperator {
    #[inline]
    pub fn apply(&self, b: &DerivativeBundle) -> f64 {
        let mut acc = self.value * b.value;
        for j in 0..b.dim() {
            acc += self.grad[j] * b.grad[j] + self.diag_hess[j] * b.diag_hess[j];
        }
        acc
    }

    /// Bundle whose dot product with a derivative bundle is `A u`.
    pub fn as_bundle(&self, dim: usize) -> DerivativeBundle {
        DerivativeBundle { dim, value: self.value, grad: self.grad, diag_hess: self.diag_hess }
    }
}

/// Which benchmark and its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "snake_case")]
pub enum ProblemKind {
    /// `-u'' = f`, `u = e^{sin(kπx)} + x³ - x - 1`.
    Poisson1d { k: u32 },
    /// `-ε u'' + u' = 1`.
    #[serde(rename = "convdiff")]
    ConvectionDiffusion { epsilon: f64 },
    /// `-u'' - κ² u = 0`, `u(0) = 0`, `u(1) = 1`.
    Helmholtz1d { kappa_sq: f64 },
    /// `-Δu = f`, `u = sin(πx) sin(πy)`.
    Poisson2d,
}

/// A linear boundary-value problem with known solution.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemDef {
    kind: ProblemKind,
    operator: LinearOperator,
    lift: Option<AffineLift>,
    // cached constants
    kappa: f64,
    sin_kappa: f64,
}

/// Labels accepted by [`ProblemDef::from_label`].
pub const PROBLEM_LABELS: [&str; 4] = ["poisson1d", "convdiff", "helmholtz1d", "poisson2d"];

pub fn poisson1d(k: u32) -> Result<ProblemDef> {
    if k == 0 {
        return Err(Error::InvalidArgument("poisson1d needs k >= 1".into()));
    }
    Ok(ProblemDef::new(
        ProblemKind::Poisson1d { k },
        LinearOperator { value: 0.0, grad: [0.0; 2], diag_hess: [-1.0, 0.0] },
        None,
    ))
}

pub fn convection_diffusion(epsilon: f64) -> Result<ProblemDef> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("viscosity must be positive, got {epsilon}")));
    }
    Ok(ProblemDef::new(
        ProblemKind::ConvectionDiffusion { epsilon },
        LinearOperator { value: 0.0, grad: [1.0, 0.0], diag_hess: [-epsilon, 0.0] },
        None,
    ))
}

pub fn helmholtz1d(kappa_sq: f64) -> Result<ProblemDef> {
    if !(kappa_sq > 0.0 && kappa_sq.is_finite()) {
        return Err(Error::InvalidArgument(format!("kappa^2 must be positive, got {kappa_sq}")));
    }
    let kappa = kappa_sq.sqrt();
    if kappa.sin().abs() < 1e-6 {
        return Err(Error::NearResonance(kappa.sin().abs()));
    }
    Ok(ProblemDef::new(
        ProblemKind::Helmholtz1d { kappa_sq },
        LinearOperator { value: -kappa_sq, grad: [0.0; 2], diag_hess: [-1.0, 0.0] },
        Some(AffineLift { offset: 0.0, slope: [1.0, 0.0] }),
    ))
}

pub fn poisson2d() -> ProblemDef {
    ProblemDef::new(
        ProblemKind::Poisson2d,
        LinearOperator { value: 0.0, grad: [0.0; 2], diag_hess: [-1.0, -1.0] },
        None,
    )
}

/// `μ · source - A u` at one point, given the bundle of `u` there.
#[inline]
pub fn residual_at(problem: &ProblemDef, source: f64, mu: f64, bundle: &DerivativeBundle) -> f64 {
    mu * source - problem.operator.apply(bundle)
}

impl ProblemDef {
    fn new(kind: ProblemKind, operator: LinearOperator, lift: Option<AffineLift>) -> Self {
        let (kappa, sin_kappa) = match kind {
            ProblemKind::Helmholtz1d { kappa_sq } => (kappa_sq.sqrt(), kappa_sq.sqrt().sin()),
            _ => (0.0, 0.0),
        };
        Self { kind, operator, lift, kappa, sin_kappa }
    }

    pub fn from_kind(kind: ProblemKind) -> Result<Self> {
        match kind {
            ProblemKind::Poisson1d { k } => poisson1d(k),
            ProblemKind::ConvectionDiffusion { epsilon } => convection_diffusion(epsilon),
            ProblemKind::Helmholtz1d { kappa_sq } => helmholtz1d(kappa_sq),
            ProblemKind::Poisson2d => Ok(poisson2d()),
        }
    }

    /// Builds a problem from its label; missing parameters use the benchmark defaults
    /// (`k = 2`, `epsilon = 1`, `kappa_sq = 9200`).
    pub fn from_label(
        label: &str,
        k: Option<u32>,
        epsilon: Option<f64>,
        kappa_sq: Option<f64>,
    ) -> Result<Self> {
        match label {
            "poisson1d" => poisson1d(k.unwrap_or(2)),
            "convdiff" => convection_diffusion(epsilon.unwrap_or(1.0)),
            "helmholtz1d" => helmholtz1d(kappa_sq.unwrap_or(9200.0)),
            "poisson2d" => Ok(poisson2d()),
            other => Err(Error::InvalidArgument(format!(
                "unknown problem '{other}', expected one of {}",
                PROBLEM_LABELS.join(", ")
            ))),
        }
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            ProblemKind::Poisson1d { .. } => "poisson1d",
            ProblemKind::ConvectionDiffusion { .. } => "convdiff",
            ProblemKind::Helmholtz1d { .. } => "helmholtz1d",
            ProblemKind::Poisson2d => "poisson2d",
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            ProblemKind::Poisson2d => 2,
            _ => 1,
        }
    }

    /// Side length `ℓ` of the domain `(0, ℓ)^d`.
    pub fn domain_length(&self) -> f64 {
        1.0
    }

    pub fn volume(&self) -> f64 {
        self.domain_length().powi(self.dim() as i32)
    }

    pub fn operator(&self) -> &LinearOperator {
        &self.operator
    }

    pub fn lift(&self) -> Option<&AffineLift> {
        self.lift.as_ref()
    }

    /// Source term `f(x)`.
    pub fn source(&self, x: &[f64]) -> f64 {
        match self.kind {
            ProblemKind::Poisson1d { .. } => -self.exact_bundle(x).diag_hess[0],
            ProblemKind::ConvectionDiffusion { .. } => 1.0,
            ProblemKind::Helmholtz1d { .. } => 0.0,
            ProblemKind::Poisson2d => {
                let (sx, sy) = ((PI * x[0]).sin(), (PI * x[1]).sin());
                2.0 * PI * PI * sx * sy
            }
        }
    }

    pub fn exact(&self, x: &[f64]) -> f64 {
        self.exact_bundle(x).value
    }

    pub fn exact_grad(&self, x: &[f64]) -> [f64; MAX_DIM] {
        self.exact_bundle(x).grad
    }

    /// Exact solution with analytic first and second derivatives.
    pub fn exact_bundle(&self, x: &[f64]) -> DerivativeBundle {
        match self.kind {
            ProblemKind::Poisson1d { k } => {
                let x = x[0];
                let kp = k as f64 * PI;
                let (s, c) = (kp * x).sin_cos();
                let e = s.exp();
                DerivativeBundle::scalar(
                    e + x * x * x - x - 1.0,
                    kp * c * e + 3.0 * x * x - 1.0,
                    kp * kp * (c * c - s) * e + 6.0 * x,
                )
            }
            ProblemKind::ConvectionDiffusion { epsilon } => {
                let x = x[0];
                // (e^{x/ε} - 1) / (e^{1/ε} - 1) rewritten with non-positive exponents only
                let denom = -(-1.0 / epsilon).exp_m1();
                let tail = ((x - 1.0) / epsilon).exp() / denom;
                let ratio = ((x - 1.0) / epsilon).exp() * -(-x / epsilon).exp_m1() / denom;
                DerivativeBundle::scalar(x - ratio, 1.0 - tail / epsilon, -tail / (epsilon * epsilon))
            }
            ProblemKind::Helmholtz1d { .. } => {
                let (kappa, sk) = (self.kappa, self.sin_kappa);
                let (s, c) = (kappa * x[0]).sin_cos();
                DerivativeBundle::scalar(s / sk, kappa * c / sk, -kappa * kappa * s / sk)
            }
            ProblemKind::Poisson2d => {
                let (sx, cx) = (PI * x[0]).sin_cos();
                let (sy, cy) = (PI * x[1]).sin_cos();
                let u = sx * sy;
                DerivativeBundle {
                    dim: 2,
                    value: u,
                    grad: [PI * cx * sy, PI * sx * cy],
                    diag_hess: [-PI * PI * u, -PI * PI * u],
                }
            }
        }
    }
}
