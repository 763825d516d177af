//! Adam and L-BFGS minimizers over flat parameter vectors, and the
//! Adam-then-L-BFGS training schedule.
//!
//! One iteration is one parameter update in both optimizers.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::LossReport;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Adam,
    Lbfgs,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Adam => "adam",
            Phase::Lbfgs => "lbfgs",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-2, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, iterations: 0 }
    }
}

impl AdamConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        Self { iterations, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("adam learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument("adam epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub history_size: usize,
    pub iterations: usize,
    pub initial_step: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
    pub gradient_tolerance: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history_size: 10,
            iterations: 0,
            initial_step: 1.0,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
            gradient_tolerance: 1e-16,
        }
    }
}

impl LbfgsConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        Self { iterations, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidArgument("wolfe constants need 0 < c1 < c2 < 1".into()));
        }
        if self.history_size == 0 {
            return Err(Error::InvalidArgument("l-bfgs history size must be at least 1".into()));
        }
        if !(self.initial_step > 0.0) || self.max_line_search == 0 {
            return Err(Error::InvalidArgument("l-bfgs line search settings are invalid".into()));
        }
        Ok(())
    }
}

/// Error norms attached to a record row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub l2: f64,
    pub h1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub iteration: usize,
    pub phase: Phase,
    pub loss: f64,
    pub l2: Option<f64>,
    pub h1: Option<f64>,
}

/// Why an L-BFGS phase ended before its iteration budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    LineSearchFailed,
}

/// One row per parameter update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub rows: Vec<RecordRow>,
    pub early_stop: Option<StopReason>,
}

impl TrainRecord {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count(&self, phase: Phase) -> usize {
        self.rows.iter().filter(|r| r.phase == phase).count()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    fn extend(&mut self, other: TrainRecord) {
        self.rows.extend(other.rows);
        if other.early_stop.is_some() {
            self.early_stop = other.early_stop;
        }
    }
}

/// Values seen by the line search for an accepted step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchStats {
    pub step: f64,
    pub initial_loss: f64,
    pub initial_slope: f64,
    pub loss: f64,
    pub slope: f64,
    pub evaluations: usize,
}

/// What the callback sees after each update.
///
/// For Adam, `loss` is evaluated at `params`, the iterate the update started
/// from; for L-BFGS, `params` is the accepted new iterate.
#[derive(Debug)]
pub struct StepInfo<'a> {
    pub phase: Phase,
    pub iteration: usize,
    pub loss: f64,
    pub params: &'a [f64],
    pub line_search: Option<LineSearchStats>,
}

fn evaluate<F>(objective: &mut F, params: &[f64], iteration: usize) -> Result<LossReport>
where
    F: FnMut(&[f64]) -> Result<LossReport>,
{
    let report = objective(params)?;
    if !report.loss.is_finite() {
        return Err(Error::NonFinite { what: "loss", iteration });
    }
    if report.gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { what: "gradient", iteration });
    }
    Ok(report)
}

fn push_row<C>(record: &mut TrainRecord, callback: &mut C, info: StepInfo<'_>)
where
    C: FnMut(&StepInfo<'_>) -> Option<StepMetrics>,
{
    let metrics = callback(&info);
    record.rows.push(RecordRow {
        iteration: info.iteration,
        phase: info.phase,
        loss: info.loss,
        l2: metrics.map(|m| m.l2),
        h1: metrics.map(|m| m.h1),
    });
}

/// Adam with bias correction. Iterations are numbered from `first_iteration`.
pub fn adam_run<F, C>(
    mut objective: F,
    mut params: Vec<f64>,
    config: &AdamConfig,
    first_iteration: usize,
    mut callback: C,
) -> Result<(Vec<f64>, TrainRecord)>
where
    F: FnMut(&[f64]) -> Result<LossReport>,
    C: FnMut(&StepInfo<'_>) -> Option<StepMetrics>,
{
    config.validate()?;
    let n = params.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut record = TrainRecord::default();
    let (b1, b2) = (config.beta1, config.beta2);
    let mut b1t = 1.0;
    let mut b2t = 1.0;
    for t in 0..config.iterations {
        let iteration = first_iteration + t;
        let report = evaluate(&mut objective, &params, iteration)?;
        push_row(
            &mut record,
            &mut callback,
            StepInfo {
                phase: Phase::Adam,
                iteration,
                loss: report.loss,
                params: &params,
                line_search: None,
            },
        );
        b1t *= b1;
        b2t *= b2;
        let (c1, c2) = (1.0 - b1t, 1.0 - b2t);
        for (((p, g), mi), vi) in params.iter_mut().zip(&report.gradient).zip(&mut m).zip(&mut v) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok((params, record))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizer of the cubic interpolating `(x1, f1, g1)` and `(x2, f2, g2)`,
/// clamped to `[lo, hi]`; midpoint when the cubic has no minimizer.
fn cubic_minimizer(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, lo: f64, hi: f64) -> f64 {
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 && f1.is_finite() && f2.is_finite() {
        let d2 = d2_sq.sqrt();
        let t = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

struct LinePoint {
    step: f64,
    loss: f64,
    slope: f64,
    gradient: Vec<f64>,
}

/// Strong-Wolfe line search along `direction` from `x`.
///
/// Returns the accepted point, or `None` when no step satisfying both
/// conditions was found within the trial budget.
fn strong_wolfe<F>(
    objective: &mut F,
    x: &[f64],
    loss0: f64,
    slope0: f64,
    direction: &[f64],
    initial_step: f64,
    config: &LbfgsConfig,
) -> Result<Option<(LinePoint, usize)>>
where
    F: FnMut(&[f64]) -> Result<LossReport>,
{
    let (c1, c2) = (config.c1, config.c2);
    let dir_norm = inf_norm(direction);
    let mut trial = vec![0.0; x.len()];
    let mut evals = 0;
    let mut probe = |step: f64, evals: &mut usize| -> Result<LinePoint> {
        for ((t, xi), di) in trial.iter_mut().zip(x).zip(direction) {
            *t = xi + step * di;
        }
        *evals += 1;
        let report = objective(&trial)?;
        let finite = report.loss.is_finite() && report.gradient.iter().all(|g| g.is_finite());
        if !finite {
            return Ok(LinePoint { step, loss: f64::INFINITY, slope: f64::NAN, gradient: vec![] });
        }
        let slope = dot(&report.gradient, direction);
        Ok(LinePoint { step, loss: report.loss, slope, gradient: report.gradient })
    };
    let armijo = |p: &LinePoint| p.loss <= loss0 + c1 * p.step * slope0;
    let curvature = |p: &LinePoint| p.slope.abs() <= -c2 * slope0;

    let mut prev = LinePoint { step: 0.0, loss: loss0, slope: slope0, gradient: vec![] };
    let mut step = initial_step;
    let mut bracket: Option<(LinePoint, LinePoint)> = None;
    while evals < config.max_line_search {
        let cur = probe(step, &mut evals)?;
        if !armijo(&cur) || (prev.step > 0.0 && cur.loss >= prev.loss) {
            bracket = Some((prev, cur));
            break;
        }
        if curvature(&cur) {
            return Ok(Some((cur, evals)));
        }
        if cur.slope >= 0.0 {
            bracket = Some((cur, prev));
            break;
        }
        let next = cubic_minimizer(
            prev.step,
            prev.loss,
            prev.slope,
            cur.step,
            cur.loss,
            cur.slope,
            cur.step * 1.1,
            cur.step * 10.0,
        );
        prev = cur;
        step = next;
    }

    // zoom: `lo` satisfies the sufficient decrease condition and has the lowest loss seen
    let Some((mut lo, mut hi)) = bracket else {
        return Ok(None);
    };
    let mut near_end = false;
    while evals < config.max_line_search {
        let width = (hi.step - lo.step).abs();
        if width * dir_norm <= 1e-300 || width <= f64::EPSILON * hi.step.abs().max(lo.step.abs()) {
            break;
        }
        let (a, b) = (lo.step.min(hi.step), lo.step.max(hi.step));
        let noisy = (hi.loss - lo.loss).abs() <= 1e-12 * lo.loss.abs().max(hi.loss.abs());
        let mut step = if noisy && lo.slope * hi.slope < 0.0 {
            // loss differences are round-off; interpolate the slope instead
            (lo.step - lo.slope * (hi.step - lo.step) / (hi.slope - lo.slope)).clamp(a, b)
        } else if hi.loss.is_finite() {
            cubic_minimizer(lo.step, lo.loss, lo.slope, hi.step, hi.loss, hi.slope, a, b)
        } else {
            0.5 * (a + b)
        };
        // keep trials away from the bracket ends on consecutive near-end proposals
        let guard = 0.1 * (b - a);
        if (b - step).min(step - a) < guard {
            if near_end || step >= b || step <= a {
                step = if (b - step).abs() < (step - a).abs() { b - guard } else { a + guard };
                near_end = false;
            } else {
                near_end = true;
            }
        } else {
            near_end = false;
        }
        let cur = probe(step, &mut evals)?;
        if !armijo(&cur) || cur.loss >= lo.loss {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Ok(Some((cur, evals)));
            }
            if cur.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    Ok(None)
}

/// Two-loop recursion: returns `-H g` for the stored curvature pairs.
fn two_loop(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// L-BFGS with strong-Wolfe line search. Iterations are numbered from
/// `first_iteration`.
///
/// Stops early when the gradient vanishes or the line search fails twice in
/// a row (once with the curvature history, once from steepest descent); the
/// best iterate found is returned either way.
pub fn lbfgs_run<F, C>(
    mut objective: F,
    mut params: Vec<f64>,
    config: &LbfgsConfig,
    first_iteration: usize,
    mut callback: C,
) -> Result<(Vec<f64>, TrainRecord)>
where
    F: FnMut(&[f64]) -> Result<LossReport>,
    C: FnMut(&StepInfo<'_>) -> Option<StepMetrics>,
{
    config.validate()?;
    let mut record = TrainRecord::default();
    if config.iterations == 0 {
        return Ok((params, record));
    }
    let report = evaluate(&mut objective, &params, first_iteration)?;
    let mut loss = report.loss;
    let mut grad = report.gradient;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut updates = 0;
    while updates < config.iterations {
        if inf_norm(&grad) <= config.gradient_tolerance {
            record.early_stop = Some(StopReason::GradientTolerance);
            break;
        }
        let iteration = first_iteration + updates;
        let mut accepted = None;
        for attempt in 0..2 {
            if attempt == 1 {
                if history.is_empty() {
                    break;
                }
                history.clear();
            }
            let mut direction = if history.is_empty() {
                grad.iter().map(|g| -g).collect()
            } else {
                two_loop(&grad, &history)
            };
            let mut slope = dot(&grad, &direction);
            if !(slope < 0.0) {
                history.clear();
                direction = grad.iter().map(|g| -g).collect();
                slope = dot(&grad, &direction);
            }
            let step0 = if history.is_empty() {
                config.initial_step * (1.0 / grad.iter().map(|g| g.abs()).sum::<f64>()).min(1.0)
            } else {
                config.initial_step
            };
            if let Some((point, evals)) =
                strong_wolfe(&mut objective, &params, loss, slope, &direction, step0, config)?
            {
                accepted = Some((point, direction, slope, evals));
                break;
            }
        }
        let Some((point, direction, slope0, evaluations)) = accepted else {
            record.early_stop = Some(StopReason::LineSearchFailed);
            break;
        };
        let s: Vec<f64> = direction.iter().map(|d| point.step * d).collect();
        let y: Vec<f64> = point.gradient.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * norm(&s) * norm(&y) {
            if history.len() == config.history_size {
                history.pop_front();
            }
            history.push_back((s.clone(), y, 1.0 / sy));
        }
        for (p, si) in params.iter_mut().zip(&s) {
            *p += si;
        }
        let stats = LineSearchStats {
            step: point.step,
            initial_loss: loss,
            initial_slope: slope0,
            loss: point.loss,
            slope: point.slope,
            evaluations,
        };
        loss = point.loss;
        grad = point.gradient;
        updates += 1;
        push_row(
            &mut record,
            &mut callback,
            StepInfo { phase: Phase::Lbfgs, iteration, loss, params: &params, line_search: Some(stats) },
        );
    }
    Ok((params, record))
}

/// Adam followed by L-BFGS from the Adam result; the L-BFGS phase is skipped
/// when it has no iterations.
pub fn two_phase_train<F, C>(
    mut objective: F,
    params: Vec<f64>,
    adam: &AdamConfig,
    lbfgs: &LbfgsConfig,
    mut callback: C,
) -> Result<(Vec<f64>, TrainRecord)>
where
    F: FnMut(&[f64]) -> Result<LossReport>,
    C: FnMut(&StepInfo<'_>) -> Option<StepMetrics>,
{
    let (params, mut record) = adam_run(&mut objective, params, adam, 1, &mut callback)?;
    if lbfgs.iterations > 0 {
        let next = record.len() + 1;
        let (params, tail) = lbfgs_run(&mut objective, params, lbfgs, next, &mut callback)?;
        record.extend(tail);
        return Ok((params, record));
    }
    Ok((params, record))
}
