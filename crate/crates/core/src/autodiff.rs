//! Spatial derivatives of trial functions and exact parameter gradients of
//! the collocation loss.
//!
//! The forward pass carries `1 + 2d` channels through every layer: the value,
//! the `d` first derivatives and the `d` unmixed second derivatives with
//! respect to the spatial coordinates. The backward pass is hand-derived
//! reverse accumulation through those channels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::PointSet;
use crate::model::{AffineLift, ArchitectureKind, NetworkSpec, MAX_DIM};
use crate::problems::LinearOperator;

/// Value, gradient and diagonal Hessian of a scalar field at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivativeBundle {
    pub dim: usize,
    pub value: f64,
    pub grad: [f64; MAX_DIM],
    pub diag_hess: [f64; MAX_DIM],
}

impl DerivativeBundle {
    pub fn zero(dim: usize) -> Self {
        Self { dim, value: 0.0, grad: [0.0; MAX_DIM], diag_hess: [0.0; MAX_DIM] }
    }

    /// One-dimensional bundle `(u, u', u'')`.
    pub fn scalar(value: f64, d1: f64, d2: f64) -> Self {
        Self { dim: 1, value, grad: [d1, 0.0], diag_hess: [d2, 0.0] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            value: self.value * factor,
            grad: self.grad.map(|g| g * factor),
            diag_hess: self.diag_hess.map(|h| h * factor),
        }
    }

    /// `self + factor * other`.
    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        self.value += factor * other.value;
        for j in 0..self.dim {
            self.grad[j] += factor * other.grad[j];
            self.diag_hess[j] += factor * other.diag_hess[j];
        }
    }

    pub fn from_lift(lift: &AffineLift, x: &[f64]) -> Self {
        let mut b = Self::zero(x.len());
        b.value = lift.value(x);
        b.grad[..x.len()].copy_from_slice(&lift.slope[..x.len()]);
        b
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad[..self.dim].iter().all(|v| v.is_finite())
            && self.diag_hess[..self.dim].iter().all(|v| v.is_finite())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let k = 4 * i;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..n {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Per-thread buffers for forward and backward passes through one network.
///
/// Every per-layer buffer is laid out channel-major: entry `c * width + unit`,
/// with channel `0` the value, `1..=d` first derivatives and `d+1..=2d`
/// second derivatives.
pub struct Evaluator<'a> {
    spec: &'a NetworkSpec,
    dim: usize,
    channels: usize,
    /// `acts[0]` is the input layer; `acts[i]` the output of dense layer `i`.
    acts: Vec<Vec<f64>>,
    /// Pre-activation channels of each hidden layer (value channel unused).
    pre: Vec<Vec<f64>>,
    /// `(σ', σ'', σ''')` of each hidden layer, unit-major.
    slopes: Vec<Vec<f64>>,
    adj: Vec<Vec<f64>>,
    pre_adj: Vec<f64>,
    /// Boundary factor channels, one column per network output.
    factor: Vec<f64>,
    factor_weight: f64,
}

impl<'a> Evaluator<'a> {
    pub fn new(spec: &'a NetworkSpec) -> Self {
        let dim = spec.input_dim();
        let channels = 1 + 2 * dim;
        let layers = spec.layers();
        let mut acts = vec![vec![0.0; channels * spec.input_width()]];
        acts.extend(layers.iter().map(|l| vec![0.0; channels * l.rows]));
        let hidden = &layers[..layers.len() - 1];
        let pre = hidden.iter().map(|l| vec![0.0; channels * l.rows]).collect();
        let slopes = hidden.iter().map(|l| vec![0.0; 3 * l.rows]).collect();
        let adj = acts.iter().map(|a| vec![0.0; a.len()]).collect();
        let widest = layers.iter().map(|l| l.rows).max().unwrap_or(0);
        let out = spec.output_width();
        let factor_weight = if spec.kind() == ArchitectureKind::FourierSine {
            1.0 / out as f64
        } else {
            1.0
        };
        Self {
            spec,
            dim,
            channels,
            acts,
            pre,
            slopes,
            adj,
            pre_adj: vec![0.0; channels * widest],
            factor: vec![0.0; channels * out],
            factor_weight,
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.spec
    }

    fn fill_input(&mut self, x: &[f64]) {
        let (d, ch) = (self.dim, self.channels);
        let z0 = &mut self.acts[0];
        z0.fill(0.0);
        let n0 = z0.len() / ch;
        match self.spec.fourier() {
            None => {
                for j in 0..d {
                    z0[j] = x[j];
                    z0[(1 + j) * n0 + j] = 1.0;
                }
            }
            Some(map) => {
                let m = map.len();
                for j in 0..d {
                    let block = 2 * m * j;
                    for (k, &w) in map.omegas().iter().enumerate() {
                        let (s, c) = map.sincos(k, x[j]);
                        let (ic, is) = (block + k, block + m + k);
                        z0[ic] = c;
                        z0[is] = s;
                        z0[(1 + j) * n0 + ic] = -w * s;
                        z0[(1 + j) * n0 + is] = w * c;
                        z0[(1 + d + j) * n0 + ic] = -w * w * c;
                        z0[(1 + d + j) * n0 + is] = -w * w * s;
                    }
                }
            }
        }
    }

    fn fill_factor(&mut self, x: &[f64]) {
        let (d, ch) = (self.dim, self.channels);
        let ell = self.spec.domain_length();
        let out = self.factor.len() / ch;
        let f = &mut self.factor;
        match self.spec.kind() {
            ArchitectureKind::Plain => {
                f.fill(0.0);
                f[0] = 1.0;
            }
            ArchitectureKind::PlainG | ArchitectureKind::FourierG => {
                // g = Π_j x_j (ℓ - x_j)
                let q: Vec<f64> = x.iter().map(|&t| t * (ell - t)).collect();
                let g: f64 = q.iter().product();
                f[0] = g;
                for k in 0..d {
                    let others: f64 = (0..d).filter(|&j| j != k).map(|j| q[j]).product();
                    f[1 + k] = (ell - 2.0 * x[k]) * others;
                    f[1 + d + k] = -2.0 * others;
                }
            }
            ArchitectureKind::FourierSine => {
                let map = self.spec.fourier().expect("fourier spec has wave numbers");
                for (m, &w) in map.omegas().iter().enumerate() {
                    let mut sc = [(0.0, 0.0); MAX_DIM];
                    for j in 0..d {
                        sc[j] = map.sincos(m, x[j]);
                    }
                    let s: f64 = sc[..d].iter().map(|p| p.0).product();
                    f[m] = s;
                    for k in 0..d {
                        let others: f64 =
                            (0..d).filter(|&j| j != k).map(|j| sc[j].0).product();
                        f[(1 + k) * out + m] = w * sc[k].1 * others;
                        f[(1 + d + k) * out + m] = -w * w * s;
                    }
                }
            }
        }
    }

    /// Network contribution to `(ũ, ∇ũ, diag ∇²ũ)` at `x`, without lift.
    ///
    /// Intermediate values are kept for a following [`Evaluator::backward`].
    pub fn forward(&mut self, params: &[f64], x: &[f64]) -> DerivativeBundle {
        debug_assert_eq!(params.len(), self.spec.param_count());
        let (d, ch) = (self.dim, self.channels);
        let act = self.spec.activation();
        self.fill_input(x);
        let layers = self.spec.layers();
        let n_layers = layers.len();
        for (i, layer) in layers.iter().enumerate() {
            let w = &params[layer.weights_range()];
            let b = &params[layer.bias_range()];
            let (before, after) = self.acts.split_at_mut(i + 1);
            let input = &before[i];
            let output = &mut after[0];
            let (rows, cols) = (layer.rows, layer.cols);
            if i + 1 == n_layers {
                for r in 0..rows {
                    let row = &w[r * cols..(r + 1) * cols];
                    for c in 0..ch {
                        output[c * rows + r] = dot(row, &input[c * cols..(c + 1) * cols]);
                    }
                    output[r] += b[r];
                }
            } else {
                let pre = &mut self.pre[i];
                let slopes = &mut self.slopes[i];
                for r in 0..rows {
                    let row = &w[r * cols..(r + 1) * cols];
                    let a = b[r] + dot(row, &input[..cols]);
                    let (t, s1, s2, s3) = act.derivatives(a);
                    slopes[3 * r] = s1;
                    slopes[3 * r + 1] = s2;
                    slopes[3 * r + 2] = s3;
                    output[r] = t;
                    for k in 0..d {
                        let ap = dot(row, &input[(1 + k) * cols..(2 + k) * cols]);
                        let app = dot(row, &input[(1 + d + k) * cols..(2 + d + k) * cols]);
                        pre[(1 + k) * rows + r] = ap;
                        pre[(1 + d + k) * rows + r] = app;
                        output[(1 + k) * rows + r] = s1 * ap;
                        output[(1 + d + k) * rows + r] = s2 * ap * ap + s1 * app;
                    }
                }
            }
        }
        self.fill_factor(x);
        self.assemble()
    }

    /// Product rule for `ũ = weight · Σ_m factor_m y_m`.
    fn assemble(&self) -> DerivativeBundle {
        let d = self.dim;
        let y = &self.acts[self.acts.len() - 1];
        let out = y.len() / self.channels;
        let f = &self.factor;
        let mut b = DerivativeBundle::zero(d);
        for m in 0..out {
            let (fv, yv) = (f[m], y[m]);
            b.value += fv * yv;
            for k in 0..d {
                let (fg, yg) = (f[(1 + k) * out + m], y[(1 + k) * out + m]);
                let (fh, yh) = (f[(1 + d + k) * out + m], y[(1 + d + k) * out + m]);
                b.grad[k] += fg * yv + fv * yg;
                b.diag_hess[k] += fh * yv + 2.0 * fg * yg + fv * yh;
            }
        }
        b.scaled(self.factor_weight)
    }

    /// Accumulates into `grad` the parameter gradient of `Σ_c seed_c · ũ_c`,
    /// where `ũ_c` are the channels of the last forward bundle.
    pub fn backward(&mut self, params: &[f64], seed: &DerivativeBundle, grad: &mut [f64]) {
        let (d, ch) = (self.dim, self.channels);
        let layers = self.spec.layers();
        let n_layers = layers.len();

        // adjoint of the network output channels
        {
            let y_adj = &mut self.adj[n_layers];
            let out = y_adj.len() / ch;
            let f = &self.factor;
            let wgt = self.factor_weight;
            for m in 0..out {
                let fv = f[m];
                let mut v = seed.value * fv;
                for k in 0..d {
                    let (fg, fh) = (f[(1 + k) * out + m], f[(1 + d + k) * out + m]);
                    let (sg, sh) = (seed.grad[k], seed.diag_hess[k]);
                    v += sg * fg + sh * fh;
                    y_adj[(1 + k) * out + m] = wgt * (sg * fv + 2.0 * sh * fg);
                    y_adj[(1 + d + k) * out + m] = wgt * sh * fv;
                }
                y_adj[m] = wgt * v;
            }
        }

        for i in (0..n_layers).rev() {
            let layer = layers[i];
            let (rows, cols) = (layer.rows, layer.cols);
            let pa = &mut self.pre_adj[..ch * rows];
            let out_adj = &self.adj[i + 1];
            if i + 1 == n_layers {
                pa.copy_from_slice(out_adj);
            } else {
                let pre = &self.pre[i];
                let slopes = &self.slopes[i];
                for r in 0..rows {
                    let (s1, s2, s3) = (slopes[3 * r], slopes[3 * r + 1], slopes[3 * r + 2]);
                    let mut a_bar = out_adj[r] * s1;
                    for k in 0..d {
                        let ap = pre[(1 + k) * rows + r];
                        let app = pre[(1 + d + k) * rows + r];
                        let zg = out_adj[(1 + k) * rows + r];
                        let zh = out_adj[(1 + d + k) * rows + r];
                        a_bar += zg * s2 * ap + zh * (s3 * ap * ap + s2 * app);
                        pa[(1 + k) * rows + r] = zg * s1 + 2.0 * zh * s2 * ap;
                        pa[(1 + d + k) * rows + r] = zh * s1;
                    }
                    pa[r] = a_bar;
                }
            }

            let w = &params[layer.weights_range()];
            let (head, tail) = self.adj.split_at_mut(i + 1);
            let in_adj = &mut head[i];
            let input = &self.acts[i];
            let propagate = i > 0;
            if propagate {
                in_adj.fill(0.0);
            }
            let _ = tail;
            let (gw, gb) = grad[layer.offset..layer.end()].split_at_mut(rows * cols);
            for r in 0..rows {
                let row = &w[r * cols..(r + 1) * cols];
                let grow = &mut gw[r * cols..(r + 1) * cols];
                gb[r] += pa[r];
                for c in 0..ch {
                    let coeff = pa[c * rows + r];
                    if coeff == 0.0 {
                        continue;
                    }
                    axpy(grow, coeff, &input[c * cols..(c + 1) * cols]);
                    if propagate {
                        axpy(&mut in_adj[c * cols..(c + 1) * cols], coeff, row);
                    }
                }
            }
        }
    }

    /// Bundles of `∂ũ/∂θ` for every output-layer parameter, in parameter order.
    ///
    /// `ũ` is linear in those parameters, so these are the basis functions
    /// spanned by the output layer with the hidden layers frozen. Must follow
    /// a [`Evaluator::forward`] at the same point.
    pub fn output_basis(&self, out: &mut Vec<DerivativeBundle>) {
        let d = self.dim;
        let n = self.acts.len();
        let z = &self.acts[n - 2];
        let f = &self.factor;
        let k_out = self.spec.output_width();
        let width = z.len() / self.channels;
        out.clear();
        let push = |m: usize, zc: &dyn Fn(usize) -> f64| {
            let mut b = DerivativeBundle::zero(d);
            let fv = f[m];
            let zv = zc(0);
            b.value = fv * zv;
            for k in 0..d {
                let (fg, fh) = (f[(1 + k) * k_out + m], f[(1 + d + k) * k_out + m]);
                let (zg, zh) = (zc(1 + k), zc(1 + d + k));
                b.grad[k] = fg * zv + fv * zg;
                b.diag_hess[k] = fh * zv + 2.0 * fg * zg + fv * zh;
            }
            b.scaled(self.factor_weight)
        };
        let mut weights = Vec::with_capacity(k_out * width);
        for m in 0..k_out {
            for h in 0..width {
                weights.push(push(m, &|c| z[c * width + h]));
            }
        }
        out.extend(weights);
        for m in 0..k_out {
            let b = push(m, &|c| if c == 0 { 1.0 } else { 0.0 });
            out.push(b);
        }
    }
}

/// Derivative bundle of the trial function (network plus optional lift) at `x`.
pub fn extended_forward(
    spec: &NetworkSpec,
    params: &[f64],
    x: &[f64],
    lift: Option<&AffineLift>,
) -> Result<DerivativeBundle> {
    spec.check_params(params)?;
    if x.len() != spec.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "point has {} coordinates, network expects {}",
            x.len(),
            spec.input_dim()
        )));
    }
    let mut b = Evaluator::new(spec).forward(params, x);
    if let Some(l) = lift {
        b.add_scaled(&DerivativeBundle::from_lift(l, x), 1.0);
    }
    Ok(b)
}

/// Loss value and its gradient with respect to every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// Discrete residual-minimization problem for one network:
/// `R(p) = scale · source(p) - A ũ(p)` on a fixed set of collocation points.
#[derive(Clone, Debug)]
pub struct CollocationLoss<'a> {
    pub operator: LinearOperator,
    pub lift: Option<AffineLift>,
    pub points: &'a PointSet,
    /// Source values at `points`, same order.
    pub source: &'a [f64],
    pub scale: f64,
}

/// Points per work unit. Partial sums are reduced in chunk order, so
/// results do not depend on the number of threads.
const CHUNK: usize = 64;

impl CollocationLoss<'_> {
    fn check(&self, spec: &NetworkSpec, params: &[f64]) -> Result<()> {
        spec.check_params(params)?;
        if self.points.is_empty() {
            return Err(Error::EmptyCollocation);
        }
        if self.points.dim() != spec.input_dim() {
            return Err(Error::InvalidArgument("collocation dimension differs from network".into()));
        }
        if self.source.len() != self.points.len() {
            return Err(Error::InvalidArgument(format!(
                "{} source values for {} collocation points",
                self.source.len(),
                self.points.len()
            )));
        }
        Ok(())
    }

    fn bundle(&self, ev: &mut Evaluator<'_>, params: &[f64], x: &[f64]) -> DerivativeBundle {
        let mut b = ev.forward(params, x);
        if let Some(l) = &self.lift {
            b.add_scaled(&DerivativeBundle::from_lift(l, x), 1.0);
        }
        b
    }

    /// Residual at every collocation point.
    pub fn residuals(&self, spec: &NetworkSpec, params: &[f64]) -> Result<Vec<f64>> {
        self.check(spec, params)?;
        let dim = self.points.dim();
        let chunks: Vec<Vec<f64>> = self
            .points
            .coords()
            .par_chunks(CHUNK * dim)
            .zip(self.source.par_chunks(CHUNK))
            .map(|(xs, src)| {
                let mut ev = Evaluator::new(spec);
                xs.chunks_exact(dim)
                    .zip(src)
                    .map(|(x, &s)| {
                        self.scale * s - self.operator.apply(&self.bundle(&mut ev, params, x))
                    })
                    .collect()
            })
            .collect();
        Ok(chunks.concat())
    }

    /// Mean squared residual.
    pub fn loss(&self, spec: &NetworkSpec, params: &[f64]) -> Result<f64> {
        let r = self.residuals(spec, params)?;
        Ok(r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64)
    }

    /// Mean squared residual and its exact parameter gradient.
    pub fn loss_and_gradient(&self, spec: &NetworkSpec, params: &[f64]) -> Result<LossReport> {
        self.check(spec, params)?;
        let dim = self.points.dim();
        let inv_n = 1.0 / self.points.len() as f64;
        let op_seed = self.operator.as_bundle(dim);
        let partials: Vec<(f64, Vec<f64>)> = self
            .points
            .coords()
            .par_chunks(CHUNK * dim)
            .zip(self.source.par_chunks(CHUNK))
            .map(|(xs, src)| {
                let mut ev = Evaluator::new(spec);
                let mut grad = vec![0.0; spec.param_count()];
                let mut sum = 0.0;
                for (x, &s) in xs.chunks_exact(dim).zip(src) {
                    let b = self.bundle(&mut ev, params, x);
                    let r = self.scale * s - self.operator.apply(&b);
                    sum += r * r;
                    // dL/dũ_c = -(2 r / N) A_c
                    ev.backward(params, &op_seed.scaled(-2.0 * r * inv_n), &mut grad);
                }
                (sum, grad)
            })
            .collect();
        let mut loss = 0.0;
        let mut gradient = vec![0.0; spec.param_count()];
        for (s, g) in &partials {
            loss += s;
            axpy(&mut gradient, 1.0, g);
        }
        Ok(LossReport { loss: loss * inv_n, gradient })
    }
}

/// Central-difference gradient `(f(θ + h e_k) - f(θ - h e_k)) / 2h`.
pub fn finite_diff_gradient<F>(mut f: F, params: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut theta = params.to_vec();
    (0..theta.len())
        .map(|k| {
            let orig = theta[k];
            theta[k] = orig + step;
            let up = f(&theta);
            theta[k] = orig - step;
            let down = f(&theta);
            theta[k] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a - b‖∞ / (1 + ‖a‖∞)`.
pub fn relative_deviation(analytic: &[f64], reference: &[f64]) -> f64 {
    let num = analytic.iter().zip(reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let den = 1.0 + analytic.iter().map(|a| a.abs()).fold(0.0, f64::max);
    num / den
}
