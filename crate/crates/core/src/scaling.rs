//! Amplitude probe for a correction level.
//!
//! A single-hidden-layer network with frozen random hidden weights is fitted
//! to the residual source by linear least squares (an extreme learning
//! machine). The maximum of its prediction estimates the amplitude `a` of the
//! next correction and the level is normalized by `μ = 1 / a`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DerivativeBundle, Evaluator};
use crate::error::{Error, Result};
use crate::grid::PointSet;
use crate::model::{xavier_init, ArchitectureKind, NetworkSpec};
use crate::problems::LinearOperator;

pub const DEFAULT_ELM_WIDTH: usize = 50;
pub const MU_MIN: f64 = 1.0;
pub const MU_MAX: f64 = 1e14;
/// Singular values below this fraction of the largest are discarded.
pub const SVD_CUTOFF: f64 = 1e-8;

/// Least-squares solution with diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct LeastSquares {
    pub coefficients: Vec<f64>,
    /// Ratio of the largest to the smallest retained singular value of the
    /// column-equilibrated design.
    pub condition: f64,
    pub rank: usize,
}

/// Minimizes `‖D c − rhs‖₂` for a row-major `rows × cols` design `D`.
///
/// Columns are scaled to unit norm before a singular value decomposition;
/// directions with singular values below `SVD_CUTOFF · σ_max` are dropped,
/// which gives the minimum-norm solution in the scaled variables.
pub fn solve_least_squares(rows: usize, cols: usize, design: &[f64], rhs: &[f64]) -> Result<LeastSquares> {
    if design.len() != rows * cols || rhs.len() != rows {
        return Err(Error::InvalidArgument(format!(
            "design of {} entries and {} right-hand sides do not match {rows}x{cols}",
            design.len(),
            rhs.len()
        )));
    }
    if cols == 0 || rows < cols {
        return Err(Error::Underdetermined { rows, cols });
    }
    let mut a = DMatrix::from_row_slice(rows, cols, design);
    if a.iter().any(|v| !v.is_finite()) || rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("least-squares data contain non-finite values".into()));
    }
    let scales: Vec<f64> = a
        .column_iter()
        .map(|c| {
            let n = c.norm();
            if n > 0.0 { 1.0 / n } else { 1.0 }
        })
        .collect();
    if a.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroDesign);
    }
    for (mut c, s) in a.column_iter_mut().zip(&scales) {
        c *= *s;
    }
    let svd = a.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = SVD_CUTOFF * sigma_max;
    let kept: Vec<f64> = svd.singular_values.iter().copied().filter(|s| *s > cutoff).collect();
    let sigma_min = kept.iter().copied().fold(f64::INFINITY, f64::min);
    let b = DVector::from_column_slice(rhs);
    let x = svd
        .solve(&b, cutoff)
        .map_err(|e| Error::InvalidArgument(format!("least-squares solve failed: {e}")))?;
    let coefficients = x.iter().zip(&scales).map(|(v, s)| v * s).collect();
    Ok(LeastSquares { coefficients, condition: sigma_max / sigma_min, rank: kept.len() })
}

/// Random-feature network whose hidden layer stays frozen.
#[derive(Clone, Debug)]
pub struct ElmBasis {
    spec: NetworkSpec,
    params: Vec<f64>,
}

impl ElmBasis {
    /// One hidden layer of `width` units, Xavier-initialized from `seed`,
    /// with the architecture and wavenumber count of the level it probes.
    pub fn new(
        input_dim: usize,
        width: usize,
        num_wavenumbers: usize,
        domain_length: f64,
        kind: ArchitectureKind,
        seed: u64,
    ) -> Result<Self> {
        let spec = NetworkSpec::new(input_dim, vec![width], num_wavenumbers, domain_length, kind)?;
        let params = xavier_init(&spec, seed).into_vec();
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Hidden parameters with the output layer zeroed.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Number of solved-for coefficients: every output-layer weight and bias.
    pub fn unknowns(&self) -> usize {
        let out = self.spec.output_layer();
        out.rows * (out.cols + 1)
    }

    /// Full parameter vector with `coefficients` in the output layer.
    pub fn with_coefficients(&self, coefficients: &[f64]) -> Result<Vec<f64>> {
        if coefficients.len() != self.unknowns() {
            return Err(Error::ParamLength { expected: self.unknowns(), actual: coefficients.len() });
        }
        let mut p = self.params.clone();
        let start = self.spec.output_layer().offset;
        p[start..].copy_from_slice(coefficients);
        Ok(p)
    }

    /// Row-major design with entry `(p, h) = A[φ_h](x_p)`.
    pub fn design(&self, operator: &LinearOperator, points: &PointSet) -> Result<Vec<f64>> {
        if points.dim() != self.spec.input_dim() {
            return Err(Error::InvalidArgument("collocation dimension differs from basis".into()));
        }
        let dim = points.dim();
        let cols = self.unknowns();
        let rows: Vec<Vec<f64>> = points
            .coords()
            .par_chunks(64 * dim)
            .map(|xs| {
                let mut ev = Evaluator::new(&self.spec);
                let mut basis: Vec<DerivativeBundle> = Vec::with_capacity(cols);
                let mut out = Vec::with_capacity(cols * xs.len() / dim);
                for x in xs.chunks_exact(dim) {
                    ev.forward(&self.params, x);
                    ev.output_basis(&mut basis);
                    out.extend(basis.iter().map(|b| operator.apply(b)));
                }
                out
            })
            .collect();
        Ok(rows.concat())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub mu: f64,
    pub amplitude: f64,
    pub condition: f64,
    /// The source vanished, so there is nothing left to correct.
    pub converged: bool,
}

impl ScaleEstimate {
    fn from_amplitude(amplitude: f64, condition: f64) -> Self {
        if amplitude > 0.0 {
            Self { mu: (1.0 / amplitude).clamp(MU_MIN, MU_MAX), amplitude, condition, converged: false }
        } else {
            Self { mu: MU_MAX, amplitude: 0.0, condition, converged: true }
        }
    }
}

/// Fits `A ẽ = source` in the span of `basis` on `collocation` and returns
/// `μ = clip(1 / max|ẽ|, 1, 1e14)` with the maximum taken over `eval_grid`.
///
/// `source` holds the unnormalized residual at the collocation points.
pub fn elm_estimate_scale(
    operator: &LinearOperator,
    source: &[f64],
    basis: &ElmBasis,
    collocation: &PointSet,
    eval_grid: &PointSet,
) -> Result<ScaleEstimate> {
    if collocation.is_empty() {
        return Err(Error::EmptyCollocation);
    }
    if source.len() != collocation.len() {
        return Err(Error::InvalidArgument(format!(
            "{} source values for {} collocation points",
            source.len(),
            collocation.len()
        )));
    }
    if source.iter().all(|s| *s == 0.0) {
        return Ok(ScaleEstimate::from_amplitude(0.0, f64::NAN));
    }
    let cols = basis.unknowns();
    let design = basis.design(operator, collocation)?;
    let fit = solve_least_squares(collocation.len(), cols, &design, source)?;
    let params = basis.with_coefficients(&fit.coefficients)?;
    let amplitude = max_abs_value(basis.spec(), &params, eval_grid);
    if !amplitude.is_finite() {
        return Err(Error::NonFinite { what: "scale amplitude", iteration: 0 });
    }
    Ok(ScaleEstimate::from_amplitude(amplitude, fit.condition))
}

/// Default grid for amplitude measurement: 2048 points in 1D, 64×64 in 2D.
pub fn amplitude_grid(dim: usize, length: f64) -> PointSet {
    let per_axis = if dim == 1 { 2048 } else { 64 };
    PointSet::midpoint_grid(dim, per_axis, length)
}

fn max_abs_value(spec: &NetworkSpec, params: &[f64], grid: &PointSet) -> f64 {
    let dim = grid.dim();
    grid.coords()
        .par_chunks(64 * dim)
        .map(|xs| {
            let mut ev = Evaluator::new(spec);
            xs.chunks_exact(dim).fold(0.0f64, |m, x| m.max(ev.forward(params, x).value.abs()))
        })
        .reduce(|| 0.0, f64::max)
}
