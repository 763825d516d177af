//! Sequential residual corrections.
//!
//! Level `i` trains a network `ũ_i` on the residual of the composite built
//! from the levels before it:
//!
//! ```text
//! R_{-1} = f,   R_i = μ_i R_{i-1} - A ũ_i,   ũ = Σ_i ũ_i / Π_{j≤i} μ_j
//! ```
//!
//! The lift of a non-homogeneous problem enters level 0 only, as `μ_0 ū`,
//! so the composite carries the boundary data exactly once.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CollocationLoss, DerivativeBundle, Evaluator};
use crate::error::{Error, Result};
use crate::grid::PointSet;
use crate::model::{xavier_init, AffineLift, ArchitectureKind, NetworkSpec, MAX_DIM};
use crate::optimize::{two_phase_train, AdamConfig, LbfgsConfig, Phase, StepInfo, StepMetrics, TrainRecord};
use crate::problems::ProblemDef;
use crate::scaling::{amplitude_grid, elm_estimate_scale, ElmBasis, ScaleEstimate, DEFAULT_ELM_WIDTH};

const CHUNK: usize = 64;

/// Hyper-parameters of one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub hidden_widths: Vec<usize>,
    pub num_wavenumbers: usize,
    pub architecture: ArchitectureKind,
    pub adam: AdamConfig,
    pub lbfgs: LbfgsConfig,
    pub seed: u64,
    /// Fixed `μ_i`; estimated from the residual when absent (level 0 falls
    /// back to `μ_0 = 1` unless [`RunOptions::estimate_mu0`] is set).
    pub mu: Option<f64>,
    /// Collocation points per axis; defaults to 1024 in 1D and 64 in 2D.
    pub collocation_per_axis: Option<usize>,
}

impl LevelConfig {
    pub fn new(hidden_widths: Vec<usize>, num_wavenumbers: usize, adam_iterations: usize, lbfgs_iterations: usize) -> Self {
        Self {
            hidden_widths,
            num_wavenumbers,
            architecture: ArchitectureKind::FourierSine,
            adam: AdamConfig::with_iterations(adam_iterations),
            lbfgs: LbfgsConfig::with_iterations(lbfgs_iterations),
            seed: 0,
            mu: None,
            collocation_per_axis: None,
        }
    }

    pub fn network_spec(&self, problem: &ProblemDef) -> Result<NetworkSpec> {
        NetworkSpec::new(
            problem.dim(),
            self.hidden_widths.clone(),
            self.num_wavenumbers,
            problem.domain_length(),
            self.architecture,
        )
    }
}

/// Settings shared by every level of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Evaluation points per axis for error norms; 4096 in 1D, 128 in 2D.
    pub eval_per_axis: Option<usize>,
    /// Estimate `μ_0` from `f` instead of pinning it to one.
    pub estimate_mu0: bool,
    pub elm_width: usize,
    /// Record error norms every this many Adam iterations; `0` disables
    /// per-iteration metrics (the end-of-level metrics are always computed).
    pub adam_metric_stride: usize,
    pub lbfgs_metric_stride: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            eval_per_axis: None,
            estimate_mu0: false,
            elm_width: DEFAULT_ELM_WIDTH,
            adam_metric_stride: 10,
            lbfgs_metric_stride: 1,
        }
    }
}

impl RunOptions {
    pub fn eval_grid(&self, problem: &ProblemDef) -> PointSet {
        let n = self.eval_per_axis.unwrap_or(if problem.dim() == 1 { 4096 } else { 128 });
        PointSet::midpoint_grid(problem.dim(), n, problem.domain_length())
    }
}

/// Default training grid: 1024 midpoints in 1D, 64×64 in 2D.
pub fn collocation_grid(problem: &ProblemDef, per_axis: Option<usize>) -> PointSet {
    let n = per_axis.unwrap_or(if problem.dim() == 1 { 1024 } else { 64 });
    PointSet::midpoint_grid(problem.dim(), n, problem.domain_length())
}

/// Closed-form stand-in for a trained network, used to test the bookkeeping.
pub type ProbeFn = dyn Fn(&[f64]) -> DerivativeBundle + Send + Sync;

/// One term `ũ_i` of the composite.
#[derive(Clone)]
pub enum Correction {
    Network { spec: NetworkSpec, params: Vec<f64> },
    Probe(Arc<ProbeFn>),
}

impl fmt::Debug for Correction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correction::Network { spec, params } => f
                .debug_struct("Network")
                .field("spec", spec)
                .field("params", &params.len())
                .finish(),
            Correction::Probe(_) => f.write_str("Probe"),
        }
    }
}

impl Correction {
    fn bundle(&self, ev: Option<&mut Evaluator<'_>>, x: &[f64]) -> DerivativeBundle {
        match (self, ev) {
            (Correction::Network { params, .. }, Some(ev)) => ev.forward(params, x),
            (Correction::Network { spec, params }, None) => Evaluator::new(spec).forward(params, x),
            (Correction::Probe(f), _) => f(x),
        }
    }

    fn evaluator(&self) -> Option<Evaluator<'_>> {
        match self {
            Correction::Network { spec, .. } => Some(Evaluator::new(spec)),
            Correction::Probe(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Level {
    pub correction: Correction,
    pub mu: f64,
}

/// Trained levels with their scales.
#[derive(Clone, Debug)]
pub struct CompositeSolution {
    problem: ProblemDef,
    levels: Vec<Level>,
}

impl CompositeSolution {
    pub fn new(problem: ProblemDef) -> Self {
        Self { problem, levels: Vec::new() }
    }

    pub fn problem(&self) -> &ProblemDef {
        &self.problem
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn push(&mut self, correction: Correction, mu: f64) -> Result<()> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidArgument(format!("level scale must be positive, got {mu}")));
        }
        self.levels.push(Level { correction, mu });
        Ok(())
    }

    /// `Π_{j≤i} μ_j` for every level.
    pub fn mu_products(&self) -> Vec<f64> {
        self.levels
            .iter()
            .scan(1.0, |p, l| {
                *p *= l.mu;
                Some(*p)
            })
            .collect()
    }

    /// Lift contribution of level 0, already scaled by `μ_0`.
    fn level_lift(&self, i: usize) -> Option<AffineLift> {
        if i == 0 {
            self.problem.lift().map(|l| l.scaled(self.levels[0].mu))
        } else {
            None
        }
    }

    fn level_term(&self, i: usize, ev: Option<&mut Evaluator<'_>>, x: &[f64]) -> DerivativeBundle {
        let mut b = self.levels[i].correction.bundle(ev, x);
        if let Some(l) = self.level_lift(i) {
            b.add_scaled(&DerivativeBundle::from_lift(&l, x), 1.0);
        }
        b
    }

    /// Trial bundle of level `i`, including `μ_0 ū` on level 0.
    pub fn level_bundle(&self, i: usize, x: &[f64]) -> DerivativeBundle {
        self.level_term(i, None, x)
    }

    /// `ũ(x)` with its first and diagonal second derivatives; zero before the
    /// first level, which is where the lift comes in.
    pub fn composite_eval(&self, x: &[f64]) -> DerivativeBundle {
        let mut acc = DerivativeBundle::zero(x.len());
        for (i, p) in self.mu_products().into_iter().enumerate() {
            acc.add_scaled(&self.level_bundle(i, x), 1.0 / p);
        }
        acc
    }

    /// Composite bundles at every point, evaluated in parallel.
    pub fn composite_values(&self, points: &PointSet) -> Vec<DerivativeBundle> {
        let dim = points.dim();
        let products = self.mu_products();
        let chunks: Vec<Vec<DerivativeBundle>> = points
            .coords()
            .par_chunks(CHUNK * dim)
            .map(|xs| {
                let mut evs: Vec<_> = self.levels.iter().map(|l| l.correction.evaluator()).collect();
                xs.chunks_exact(dim)
                    .map(|x| {
                        let mut acc = DerivativeBundle::zero(dim);
                        for (i, ev) in evs.iter_mut().enumerate() {
                            acc.add_scaled(&self.level_term(i, ev.as_mut(), x), 1.0 / products[i]);
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        chunks.concat()
    }

    /// Source for the next level, `R_{L-1}(x)` for `L` trained levels,
    /// evaluated through the recursion so every step subtracts terms of
    /// comparable size.
    pub fn residual_source(&self, x: &[f64]) -> f64 {
        let op = self.problem.operator();
        let mut r = self.problem.source(x);
        for (i, l) in self.levels.iter().enumerate() {
            r = l.mu * r - op.apply(&self.level_bundle(i, x));
        }
        r
    }

    /// [`CompositeSolution::residual_source`] at every point, in parallel.
    pub fn residual_sources(&self, points: &PointSet) -> Vec<f64> {
        let dim = points.dim();
        let op = *self.problem.operator();
        let chunks: Vec<Vec<f64>> = points
            .coords()
            .par_chunks(CHUNK * dim)
            .map(|xs| {
                let mut evs: Vec<_> = self.levels.iter().map(|l| l.correction.evaluator()).collect();
                xs.chunks_exact(dim)
                    .map(|x| {
                        let mut r = self.problem.source(x);
                        for (i, ev) in evs.iter_mut().enumerate() {
                            r = self.levels[i].mu * r - op.apply(&self.level_term(i, ev.as_mut(), x));
                        }
                        r
                    })
                    .collect()
            })
            .collect();
        chunks.concat()
    }

    /// Same quantity as [`CompositeSolution::residual_source`] in closed form,
    /// `Π_{j<L} μ_j · (f - A ũ)`. Loses accuracy once the residual is far
    /// below `f`; kept as an independent check of the recursion.
    pub fn residual_source_direct(&self, x: &[f64]) -> f64 {
        let p = self.mu_products().last().copied().unwrap_or(1.0);
        p * (self.problem.source(x) - self.problem.operator().apply(&self.composite_eval(x)))
    }
}

/// Error norms of `e = u - ũ` on a midpoint grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub l2: f64,
    pub h1: f64,
    pub max_abs: f64,
}

impl ErrorMetrics {
    /// Midpoint-rule norms from pointwise errors and error gradients.
    pub fn from_errors(values: &[f64], grads: &[[f64; MAX_DIM]], dim: usize, volume: f64) -> Self {
        let n = values.len() as f64;
        let mut sq = 0.0;
        let mut grad_sq = 0.0;
        let mut max_abs = 0.0f64;
        for (e, g) in values.iter().zip(grads) {
            sq += e * e;
            grad_sq += g[..dim].iter().map(|v| v * v).sum::<f64>();
            max_abs = max_abs.max(e.abs());
        }
        let l2_sq = sq / n * volume;
        let h1_sq = l2_sq + grad_sq / n * volume;
        Self { l2: l2_sq.sqrt(), h1: h1_sq.sqrt(), max_abs }
    }
}

/// `e = u - ũ` in `L²`, `H¹` and the maximum norm on `eval_grid`.
pub fn error_metrics(comp: &CompositeSolution, eval_grid: &PointSet) -> ErrorMetrics {
    let values = comp.composite_values(eval_grid);
    let reference = ExactOnGrid::new(comp.problem(), eval_grid);
    reference.metrics(&values, comp.problem().volume())
}

/// Exact solution sampled once on the evaluation grid.
struct ExactOnGrid {
    dim: usize,
    values: Vec<f64>,
    grads: Vec<[f64; MAX_DIM]>,
}

impl ExactOnGrid {
    fn new(problem: &ProblemDef, grid: &PointSet) -> Self {
        let bundles: Vec<DerivativeBundle> = grid.iter().map(|x| problem.exact_bundle(x)).collect();
        Self {
            dim: grid.dim(),
            values: bundles.iter().map(|b| b.value).collect(),
            grads: bundles.iter().map(|b| b.grad).collect(),
        }
    }

    fn metrics(&self, approx: &[DerivativeBundle], volume: f64) -> ErrorMetrics {
        let errs: Vec<f64> = self.values.iter().zip(approx).map(|(u, a)| u - a.value).collect();
        let grads: Vec<[f64; MAX_DIM]> = self
            .grads
            .iter()
            .zip(approx)
            .map(|(g, a)| {
                let mut e = [0.0; MAX_DIM];
                for k in 0..self.dim {
                    e[k] = g[k] - a.grad[k];
                }
                e
            })
            .collect();
        ErrorMetrics::from_errors(&errs, &grads, self.dim, volume)
    }
}

/// Error norms during training of one level: the finished levels are
/// evaluated once, so each report costs one forward pass per grid point.
struct MetricsTracker {
    grid: PointSet,
    exact: ExactOnGrid,
    base: Vec<DerivativeBundle>,
    volume: f64,
}

impl MetricsTracker {
    fn new(comp: &CompositeSolution, grid: PointSet) -> Self {
        let exact = ExactOnGrid::new(comp.problem(), &grid);
        let base = comp.composite_values(&grid);
        Self { grid, exact, base, volume: comp.problem().volume() }
    }

    /// Metrics of the composite with a candidate next level added.
    fn with_level(&self, spec: &NetworkSpec, params: &[f64], lift: Option<&AffineLift>, weight: f64) -> ErrorMetrics {
        let dim = self.grid.dim();
        let chunks: Vec<Vec<DerivativeBundle>> = self
            .grid
            .coords()
            .par_chunks(CHUNK * dim)
            .zip(self.base.par_chunks(CHUNK))
            .map(|(xs, base)| {
                let mut ev = Evaluator::new(spec);
                xs.chunks_exact(dim)
                    .zip(base)
                    .map(|(x, b)| {
                        let mut t = ev.forward(params, x);
                        if let Some(l) = lift {
                            t.add_scaled(&DerivativeBundle::from_lift(l, x), 1.0);
                        }
                        let mut acc = *b;
                        acc.add_scaled(&t, weight);
                        acc
                    })
                    .collect()
            })
            .collect();
        self.exact.metrics(&chunks.concat(), self.volume)
    }

    fn absorb(&mut self, comp: &CompositeSolution) {
        self.base = comp.composite_values(&self.grid);
    }
}

/// Outcome of one trained level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelOutcome {
    pub mu: f64,
    /// Present when `μ` was estimated rather than pinned.
    pub scale: Option<ScaleEstimate>,
    pub record: TrainRecord,
    pub final_loss: f64,
    /// Mean square of `f - A ũ` for the composite after this level, that is
    /// `final_loss / (Π_{j≤i} μ_j)²`.
    pub residual_loss: f64,
    /// Composite error after this level.
    pub metrics: ErrorMetrics,
    pub param_count: usize,
    pub seconds: f64,
}

/// A level that could not be completed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelFailure {
    pub level: usize,
    pub message: String,
    /// Rows recorded before the failure.
    pub record: TrainRecord,
}

/// Everything produced by [`run_multilevel`]; on failure, holds the levels
/// finished before it.
#[derive(Clone, Debug)]
pub struct MultilevelRun {
    pub composite: CompositeSolution,
    pub levels: Vec<LevelOutcome>,
    pub failure: Option<LevelFailure>,
    /// Index of the level whose residual vanished; later levels were skipped.
    pub converged_at: Option<usize>,
    pub eval_grid: PointSet,
}

impl MultilevelRun {
    pub fn final_metrics(&self) -> Option<ErrorMetrics> {
        self.levels.last().map(|l| l.metrics)
    }
}

/// Trains the levels one after another.
///
/// Configuration problems are returned as errors before any training. A
/// level that fails during training (for example a non-finite loss) stops
/// the run; the finished levels are kept and the failure is reported in
/// [`MultilevelRun::failure`].
pub fn run_multilevel(problem: &ProblemDef, levels: &[LevelConfig], options: &RunOptions) -> Result<MultilevelRun> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("at least one level is required".into()));
    }
    let specs = levels.iter().map(|c| c.network_spec(problem)).collect::<Result<Vec<_>>>()?;
    for (i, c) in levels.iter().enumerate() {
        c.adam.validate()?;
        c.lbfgs.validate()?;
        if let Some(mu) = c.mu {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(Error::InvalidArgument(format!("level {i}: mu must be positive, got {mu}")));
            }
        }
        if c.collocation_per_axis == Some(0) {
            return Err(Error::EmptyCollocation);
        }
    }
    if options.elm_width == 0 {
        return Err(Error::InvalidArgument("ELM width must be positive".into()));
    }
    for (i, (c, spec)) in levels.iter().zip(&specs).enumerate() {
        let estimated = c.mu.is_none() && (i > 0 || options.estimate_mu0);
        let rows = collocation_grid(problem, c.collocation_per_axis).len();
        let unknowns = spec.output_layer().rows * (options.elm_width + 1);
        if estimated && rows < unknowns {
            return Err(Error::InvalidArgument(format!(
                "level {i}: {rows} collocation points cannot determine {unknowns} ELM coefficients"
            )));
        }
    }

    let eval_grid = options.eval_grid(problem);
    let mut comp = CompositeSolution::new(problem.clone());
    let mut tracker = MetricsTracker::new(&comp, eval_grid.clone());
    let mut run = MultilevelRun {
        composite: comp.clone(),
        levels: Vec::new(),
        failure: None,
        converged_at: None,
        eval_grid: eval_grid.clone(),
    };
    let mut product = 1.0;
    for (i, (cfg, spec)) in levels.iter().zip(specs).enumerate() {
        let start = Instant::now();
        let points = collocation_grid(problem, cfg.collocation_per_axis);
        let residual = comp.residual_sources(&points);

        let (mu, scale) = match (cfg.mu, i == 0 && !options.estimate_mu0) {
            (Some(mu), _) => (mu, None),
            (None, true) => (1.0, None),
            (None, false) => {
                let est = match estimate_level_scale(problem, cfg, &spec, options, &points, &residual, i) {
                    Ok(est) => est,
                    Err(e) => {
                        run.failure = Some(LevelFailure { level: i, message: e.to_string(), record: TrainRecord::default() });
                        break;
                    }
                };
                if est.converged {
                    log::info!("level {i}: residual vanished, stopping");
                    run.converged_at = Some(i);
                    break;
                }
                (est.mu, Some(est))
            }
        };
        product *= mu;
        log::info!("level {i}: mu = {mu:.6e}, {} parameters, {} collocation points", spec.param_count(), points.len());
        let lift = if i == 0 { problem.lift().map(|l| l.scaled(mu)) } else { None };
        let loss = CollocationLoss { operator: *problem.operator(), lift, points: &points, source: &residual, scale: mu };
        let init = xavier_init(&spec, cfg.seed).into_vec();
        let mut rows_before_error = TrainRecord::default();
        let result = {
            let objective = |p: &[f64]| loss.loss_and_gradient(&spec, p);
            let callback = |info: &StepInfo<'_>| {
                let stride = match info.phase {
                    Phase::Adam => options.adam_metric_stride,
                    Phase::Lbfgs => options.lbfgs_metric_stride,
                };
                let within = match info.phase {
                    Phase::Adam => info.iteration - 1,
                    Phase::Lbfgs => info.iteration - 1 - cfg.adam.iterations,
                };
                let record_row = stride > 0 && within % stride == 0;
                rows_before_error.rows.push(crate::optimize::RecordRow {
                    iteration: info.iteration,
                    phase: info.phase,
                    loss: info.loss,
                    l2: None,
                    h1: None,
                });
                if !record_row {
                    return None;
                }
                let m = tracker.with_level(&spec, info.params, lift.as_ref(), 1.0 / product);
                Some(StepMetrics { l2: m.l2, h1: m.h1 })
            };
            two_phase_train(objective, init, &cfg.adam, &cfg.lbfgs, callback)
        };
        let (params, record) = match result {
            Ok(v) => v,
            Err(e) => {
                run.failure = Some(LevelFailure { level: i, message: e.to_string(), record: rows_before_error });
                break;
            }
        };
        let final_loss = match loss.loss(&spec, &params) {
            Ok(l) => l,
            Err(e) => {
                run.failure = Some(LevelFailure { level: i, message: e.to_string(), record });
                break;
            }
        };
        let param_count = spec.param_count();
        log::info!(
            "level {i}: {} updates, loss {final_loss:.3e} ({:.1}s)",
            record.len(),
            start.elapsed().as_secs_f64()
        );
        comp.push(Correction::Network { spec, params }, mu)?;
        tracker.absorb(&comp);
        let metrics = tracker.exact.metrics(&tracker.base, tracker.volume);
        log::info!("level {i}: L2 {:.3e}, H1 {:.3e}, max {:.3e}", metrics.l2, metrics.h1, metrics.max_abs);
        run.levels.push(LevelOutcome {
            mu,
            scale,
            record,
            final_loss,
            residual_loss: final_loss / (product * product),
            metrics,
            param_count,
            seconds: start.elapsed().as_secs_f64(),
        });
        run.composite = comp.clone();
    }
    Ok(run)
}

fn estimate_level_scale(
    problem: &ProblemDef,
    cfg: &LevelConfig,
    spec: &NetworkSpec,
    options: &RunOptions,
    points: &PointSet,
    residual: &[f64],
    level: usize,
) -> Result<ScaleEstimate> {
    let basis = ElmBasis::new(
        problem.dim(),
        options.elm_width,
        spec.num_wavenumbers(),
        problem.domain_length(),
        spec.kind(),
        cfg.seed ^ 0x5eed_e1a0,
    )?;
    // level 0 with a lift: the network part solves A w = f - A ū
    let source: Vec<f64> = match (level, problem.lift()) {
        (0, Some(l)) => {
            let op = problem.operator();
            points
                .iter()
                .zip(residual)
                .map(|(x, r)| r - op.apply(&DerivativeBundle::from_lift(l, x)))
                .collect()
        }
        _ => residual.to_vec(),
    };
    elm_estimate_scale(problem.operator(), &source, &basis, points, &amplitude_grid(problem.dim(), problem.domain_length()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{convection_diffusion, helmholtz1d, poisson1d, poisson2d};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn probe<F>(f: F) -> Correction
    where
        F: Fn(&[f64]) -> DerivativeBundle + Send + Sync + 'static,
    {
        Correction::Probe(Arc::new(f))
    }

    fn constant(c: f64) -> Correction {
        probe(move |x| {
            let mut b = DerivativeBundle::zero(x.len());
            b.value = c;
            b
        })
    }

    fn network(problem: &ProblemDef, widths: Vec<usize>, m: usize, seed: u64) -> Correction {
        let spec = NetworkSpec::new(problem.dim(), widths, m, 1.0, ArchitectureKind::FourierSine).unwrap();
        let params = xavier_init(&spec, seed).into_vec();
        Correction::Network { spec, params }
    }

    fn zero_output(c: Correction) -> Correction {
        match c {
            Correction::Network { spec, mut params } => {
                let start = spec.output_layer().offset;
                params[start..].iter_mut().for_each(|p| *p = 0.0);
                Correction::Network { spec, params }
            }
            other => other,
        }
    }

    #[test]
    fn single_level_matches_its_trial() {
        let p = poisson1d(2).unwrap();
        let mut comp = CompositeSolution::new(p.clone());
        let c = network(&p, vec![8], 3, 1);
        comp.push(c.clone(), 1.0).unwrap();
        for x in [0.1, 0.37, 0.9] {
            assert_eq!(comp.composite_eval(&[x]), c.bundle(None, &[x]));
        }
    }

    #[test]
    fn zero_level_leaves_composite_unchanged() {
        let p = poisson1d(2).unwrap();
        let mut comp = CompositeSolution::new(p.clone());
        comp.push(network(&p, vec![8], 3, 1), 1.0).unwrap();
        let before = comp.composite_eval(&[0.3]);
        comp.push(zero_output(network(&p, vec![6], 2, 2)), 1e3).unwrap();
        assert_eq!(comp.composite_eval(&[0.3]), before);
    }

    #[test]
    fn scale_weights() {
        let p = poisson1d(2).unwrap();
        let mut comp = CompositeSolution::new(p);
        comp.push(constant(0.0), 1.0).unwrap();
        comp.push(constant(1.0), 1e3).unwrap();
        assert_abs_diff_eq!(comp.composite_eval(&[0.4]).value, 1e-3, epsilon = 1e-18);
    }

    #[test]
    fn untrained_zero_level_source_is_f() {
        let p = poisson1d(2).unwrap();
        let mut comp = CompositeSolution::new(p.clone());
        comp.push(zero_output(network(&p, vec![8], 3, 1)), 1.0).unwrap();
        for x in [0.05, 0.5, 0.77] {
            assert_eq!(comp.residual_source(&[x]), p.source(&[x]));
        }
    }

    #[test]
    fn exact_probe_has_vanishing_source_and_error() {
        for p in [poisson1d(2).unwrap(), convection_diffusion(1.0).unwrap(), poisson2d()] {
            let q = p.clone();
            let mut comp = CompositeSolution::new(p.clone());
            comp.push(probe(move |x| q.exact_bundle(x)), 1.0).unwrap();
            let grid = PointSet::midpoint_grid(p.dim(), if p.dim() == 1 { 257 } else { 17 }, 1.0);
            for x in grid.iter() {
                assert!(comp.residual_source(x).abs() <= 1e-10);
            }
            let m = error_metrics(&comp, &grid);
            assert!(m.l2 <= 1e-14 && m.h1 <= 1e-14 && m.max_abs <= 1e-14, "{m:?}");
        }
    }

    #[test]
    fn sine_error_norms() {
        let p = poisson1d(2).unwrap();
        let q = p.clone();
        let mut comp = CompositeSolution::new(p.clone());
        comp.push(
            probe(move |x| {
                let u = q.exact_bundle(x);
                let (s, c) = (PI * x[0]).sin_cos();
                DerivativeBundle::scalar(u.value - s, u.grad[0] - PI * c, u.diag_hess[0] + PI * PI * s)
            }),
            1.0,
        )
        .unwrap();
        let m = error_metrics(&comp, &PointSet::midpoint_grid(1, 4096, 1.0));
        assert_abs_diff_eq!(m.l2, 0.5f64.sqrt(), epsilon = 1e-7);
        assert_abs_diff_eq!(m.h1, (0.5 + PI * PI / 2.0).sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn constant_error_norms() {
        let p = poisson1d(2).unwrap();
        let q = p.clone();
        let mut comp = CompositeSolution::new(p);
        comp.push(
            probe(move |x| {
                let mut u = q.exact_bundle(x);
                u.value -= 0.25;
                u
            }),
            1.0,
        )
        .unwrap();
        let m = error_metrics(&comp, &PointSet::midpoint_grid(1, 512, 1.0));
        assert_abs_diff_eq!(m.l2, 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(m.h1, 0.25, epsilon = 1e-14);
        assert!(m.h1 >= m.l2);
    }

    #[test]
    fn recursion_matches_direct_form() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for p in [poisson1d(2).unwrap(), convection_diffusion(1.0).unwrap(), helmholtz1d(9200.0).unwrap(), poisson2d()] {
            let mut comp = CompositeSolution::new(p.clone());
            comp.push(network(&p, vec![8], 2, 1), 1.0).unwrap();
            comp.push(network(&p, vec![10], 3, 2), 7.5).unwrap();
            comp.push(network(&p, vec![6, 6], 4, 3), 40.0).unwrap();
            let scale = if p.label() == "helmholtz1d" { 9200.0 } else { 1.0 };
            for _ in 0..20 {
                let x: Vec<f64> = (0..p.dim()).map(|_| rng.gen_range(0.0..1.0)).collect();
                let rec = comp.residual_source(&x);
                let direct = comp.residual_source_direct(&x);
                assert!((rec - direct).abs() <= 1e-12 * scale * (1.0 + rec.abs()), "{} {rec} {direct}", p.label());
            }
        }
    }

    #[test]
    fn residual_sources_match_pointwise() {
        let p = poisson2d();
        let mut comp = CompositeSolution::new(p.clone());
        comp.push(network(&p, vec![5], 2, 4), 1.0).unwrap();
        comp.push(network(&p, vec![5], 2, 5), 100.0).unwrap();
        let grid = PointSet::midpoint_grid(2, 9, 1.0);
        let batch = comp.residual_sources(&grid);
        for (x, r) in grid.iter().zip(&batch) {
            assert_eq!(*r, comp.residual_source(x));
        }
    }

    #[test]
    fn composite_meets_boundary_data() {
        let h = helmholtz1d(9200.0).unwrap();
        let mut comp = CompositeSolution::new(h.clone());
        comp.push(network(&h, vec![10], 5, 1), 3.0).unwrap();
        comp.push(network(&h, vec![10], 7, 2), 1e4).unwrap();
        assert!(comp.composite_eval(&[0.0]).value.abs() <= 1e-14);
        assert!((comp.composite_eval(&[1.0]).value - 1.0).abs() <= 1e-14);

        let p = poisson2d();
        let mut comp = CompositeSolution::new(p.clone());
        comp.push(network(&p, vec![6, 6], 1, 1), 1.0).unwrap();
        comp.push(network(&p, vec![6], 3, 2), 1e3).unwrap();
        for x in PointSet::boundary_sample(2, 9, 1.0).iter() {
            assert!(comp.composite_eval(x).value.abs() <= 1e-14);
        }
    }

    #[test]
    fn rescaling_a_level_is_invisible() {
        let p = poisson1d(2).unwrap();
        let base = network(&p, vec![8], 2, 9);
        let scaled = match base.clone() {
            Correction::Network { spec, params } => {
                let start = spec.output_layer().offset;
                let params = params.iter().enumerate().map(|(k, v)| if k >= start { v * 8.0 } else { *v }).collect();
                Correction::Network { spec, params }
            }
            _ => unreachable!(),
        };
        let mut a = CompositeSolution::new(p.clone());
        a.push(network(&p, vec![8], 1, 3), 1.0).unwrap();
        let mut b = a.clone();
        a.push(base, 100.0).unwrap();
        b.push(scaled, 800.0).unwrap();
        for x in [0.1, 0.45, 0.8] {
            let (u, v) = (a.composite_eval(&[x]), b.composite_eval(&[x]));
            assert_abs_diff_eq!(u.value, v.value, epsilon = 1e-15);
            assert_abs_diff_eq!(u.grad[0], v.grad[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn untrained_single_level_run() {
        let p = poisson1d(2).unwrap();
        let cfg = LevelConfig::new(vec![10], 1, 0, 0);
        let run = run_multilevel(&p, std::slice::from_ref(&cfg), &RunOptions::default()).unwrap();
        assert!(run.failure.is_none());
        assert_eq!(run.levels.len(), 1);
        let m = run.final_metrics().unwrap();
        assert!(m.l2.is_finite() && m.h1 >= m.l2);
        let spec = cfg.network_spec(&p).unwrap();
        let init = xavier_init(&spec, cfg.seed);
        assert_eq!(run.composite.composite_eval(&[0.3]), Evaluator::new(&spec).forward(&init, &[0.3]));
    }

    #[test]
    fn short_run_improves_with_a_correction() {
        let p = poisson1d(2).unwrap();
        let mut levels = vec![LevelConfig::new(vec![10], 1, 300, 30), LevelConfig::new(vec![20], 3, 300, 30)];
        levels[1].seed = 1;
        let run = run_multilevel(&p, &levels, &RunOptions { adam_metric_stride: 0, ..RunOptions::default() }).unwrap();
        assert!(run.failure.is_none(), "{:?}", run.failure);
        let (a, b) = (run.levels[0].metrics.l2, run.levels[1].metrics.l2);
        assert!(b < a, "{a:e} -> {b:e}");
        assert!(run.levels[1].scale.is_some());
        // metrics recorded every L-BFGS step only
        assert!(run.levels[0].record.rows.iter().all(|r| r.l2.is_some() == (r.phase == Phase::Lbfgs)));
    }

    #[test]
    fn tracked_metrics_agree_with_final_metrics() {
        let h = helmholtz1d(9200.0).unwrap();
        let cfg = LevelConfig::new(vec![6], 3, 0, 2);
        let opts = RunOptions { eval_per_axis: Some(512), ..RunOptions::default() };
        let run = run_multilevel(&h, &[cfg], &opts).unwrap();
        let last = run.levels[0].record.rows.last().copied().unwrap();
        assert_eq!(last.l2, Some(run.levels[0].metrics.l2));
        assert_eq!(last.h1, Some(run.levels[0].metrics.h1));
    }

    #[test]
    fn empty_level_list_is_rejected() {
        assert!(run_multilevel(&poisson1d(2).unwrap(), &[], &RunOptions::default()).is_err());
    }
}
