//! Network architectures, Fourier feature maps, boundary factors and
//! trial-function assembly.
//!
//! A network maps an input layer `z0` through `n` hidden `tanh` layers to a
//! linear output layer. The trial function multiplies that output by a factor
//! vanishing on `∂Ω`, so homogeneous Dirichlet conditions hold exactly:
//!
//! - [`ArchitectureKind::PlainG`]: `z0 = x`, `ũ = g(x) z_out`;
//! - [`ArchitectureKind::FourierG`]: `z0 = [γ(x_1), .., γ(x_d)]`, `ũ = g(x) z_out`;
//! - [`ArchitectureKind::FourierSine`]: same input, `M` outputs, and
//!   `ũ = (1/M) Σ_m Π_j sin(ω_m x_j) z_out,m`.
//!
//! with `g(x) = Π_j x_j (ℓ - x_j)` and `γ(x_j) = [cos(ω x_j), sin(ω x_j)]`.
//! Parameters are stored flat, layer by layer: the row-major weight matrix
//! `W_i` (`N_i x N_{i-1}`) followed by the bias `b_i`.

use std::f64::consts::PI;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest spatial dimension supported by the derivative propagation.
pub const MAX_DIM: usize = 2;

/// How inputs are mapped and how the boundary condition is imposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    /// Raw network on `x` with no boundary factor (`g ≡ 1`); test mode only.
    Plain,
    /// Input `x`, output multiplied by the polynomial bubble `g(x)`.
    PlainG,
    /// Fourier-feature input, output multiplied by `g(x)`.
    FourierG,
    /// Fourier-feature input, `M` outputs paired with products of sines.
    FourierSine,
}

impl ArchitectureKind {
    pub fn uses_fourier_input(self) -> bool {
        matches!(self, Self::FourierG | Self::FourierSine)
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::PlainG => "plain_g",
            Self::FourierG => "fourier_g",
            Self::FourierSine => "fourier_sine",
        }
    }
}

/// Hidden-layer activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Linear network; derivatives of every order above one vanish.
    Identity,
    /// `tanh` whose second derivative has the wrong sign inside the
    /// derivative propagation. Used to check that the gradient gate fails.
    #[doc(hidden)]
    FaultyTanh,
}

impl Activation {
    /// Returns `(σ, σ', σ'', σ''')` at pre-activation `a`.
    #[inline]
    pub fn derivatives(self, a: f64) -> (f64, f64, f64, f64) {
        match self {
            Self::Tanh | Self::FaultyTanh => {
                let t = a.tanh();
                let d1 = 1.0 - t * t;
                let d2 = -2.0 * t * d1;
                let d3 = d1 * (6.0 * t * t - 2.0);
                if self == Self::FaultyTanh {
                    (t, d1, -d2, -d3)
                } else {
                    (t, d1, d2, d3)
                }
            }
            Self::Identity => (a, 1.0, 0.0, 0.0),
        }
    }

    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Self::Tanh | Self::FaultyTanh => a.tanh(),
            Self::Identity => a,
        }
    }
}

/// `(sin(πt), cos(πt))`, exactly zero where the true value is zero.
#[inline]
pub(crate) fn sincos_pi(t: f64) -> (f64, f64) {
    let r = t - 2.0 * (0.5 * t).round();
    let (q, flip) = if r > 0.5 {
        (1.0 - r, true)
    } else if r < -0.5 {
        (-1.0 - r, true)
    } else {
        (r, false)
    };
    let (s, c) = (PI * q).sin_cos();
    if flip {
        (s, -c)
    } else {
        (s, c)
    }
}

/// Wave numbers of a Fourier feature mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierMap {
    omegas: Vec<f64>,
    /// `ω_m / π`; phases are reduced in half turns so that sines vanish
    /// exactly on the boundary.
    half_turns: Vec<f64>,
}

impl FourierMap {
    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    /// `(sin(ω_m x), cos(ω_m x))` for wave number `m`.
    #[inline]
    pub(crate) fn sincos(&self, m: usize, x: f64) -> (f64, f64) {
        sincos_pi(self.half_turns[m] * x)
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }
}

/// Geometric wave numbers `ω_m = 2^{m-1} π / ℓ`, `m = 1..M`.
///
/// Every `sin(ω_m x)` vanishes at `x = 0` and `x = ℓ`.
pub fn geometric_wavenumbers(count: usize, length: f64) -> Result<FourierMap> {
    if count == 0 {
        return Err(Error::InvalidArgument("number of wave numbers must be at least 1".into()));
    }
    if !(length > 0.0 && length.is_finite()) {
        return Err(Error::InvalidArgument(format!("domain length must be positive, got {length}")));
    }
    if count > 52 {
        return Err(Error::InvalidArgument(format!("{count} wave numbers exceed f64 resolution")));
    }
    let half_turns: Vec<f64> = (0..count).map(|m| (1u64 << m) as f64 / length).collect();
    let omegas = half_turns.iter().map(|h| h * PI).collect();
    Ok(FourierMap { omegas, half_turns })
}

/// Feature row `[cos(ω_1 x)..cos(ω_M x), sin(ω_1 x)..sin(ω_M x)]`.
pub fn fourier_features(x: f64, map: &FourierMap) -> Vec<f64> {
    let (sin, cos): (Vec<f64>, Vec<f64>) = (0..map.len()).map(|m| map.sincos(m, x)).unzip();
    let mut row = cos;
    row.extend(sin);
    row
}

/// Position of one dense layer inside a flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    /// Offset of the first weight; the bias starts at `offset + rows * cols`.
    pub offset: usize,
}

impl LayerShape {
    pub fn weights_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.rows * self.cols;
        start..start + self.rows
    }

    pub fn end(&self) -> usize {
        self.offset + self.rows * (self.cols + 1)
    }
}

/// Architecture description of one network.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NetworkSpec {
    input_dim: usize,
    hidden_widths: Vec<usize>,
    num_wavenumbers: usize,
    domain_length: f64,
    kind: ArchitectureKind,
    activation: Activation,
    #[serde(skip)]
    fourier: Option<FourierMap>,
    #[serde(skip)]
    layers: Vec<LayerShape>,
}

impl NetworkSpec {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        num_wavenumbers: usize,
        domain_length: f64,
        kind: ArchitectureKind,
    ) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&input_dim) {
            return Err(Error::InvalidSpec(format!("input dimension must be 1 or 2, got {input_dim}")));
        }
        if hidden_widths.is_empty() {
            return Err(Error::InvalidSpec("at least one hidden layer is required".into()));
        }
        if hidden_widths.contains(&0) {
            return Err(Error::InvalidSpec("hidden widths must be positive".into()));
        }
        if !(domain_length > 0.0 && domain_length.is_finite()) {
            return Err(Error::InvalidSpec(format!("domain length must be positive, got {domain_length}")));
        }
        let fourier = if kind.uses_fourier_input() {
            if num_wavenumbers == 0 {
                return Err(Error::InvalidSpec(format!(
                    "{} architecture needs at least one wave number",
                    kind.label()
                )));
            }
            Some(geometric_wavenumbers(num_wavenumbers, domain_length)?)
        } else {
            None
        };
        let mut spec = Self {
            input_dim,
            hidden_widths,
            num_wavenumbers,
            domain_length,
            kind,
            activation: Activation::Tanh,
            fourier,
            layers: Vec::new(),
        };
        spec.layers = spec.compute_layers();
        Ok(spec)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    fn compute_layers(&self) -> Vec<LayerShape> {
        let mut widths = Vec::with_capacity(self.hidden_widths.len() + 2);
        widths.push(self.input_width());
        widths.extend_from_slice(&self.hidden_widths);
        widths.push(self.output_width());
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let shape = LayerShape { rows: w[1], cols: w[0], offset };
                offset = shape.end();
                shape
            })
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.hidden_widths
    }

    pub fn num_wavenumbers(&self) -> usize {
        self.num_wavenumbers
    }

    pub fn domain_length(&self) -> f64 {
        self.domain_length
    }

    pub fn kind(&self) -> ArchitectureKind {
        self.kind
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn fourier(&self) -> Option<&FourierMap> {
        self.fourier.as_ref()
    }

    /// Width `N_0` of the input layer.
    pub fn input_width(&self) -> usize {
        if self.kind.uses_fourier_input() {
            2 * self.num_wavenumbers * self.input_dim
        } else {
            self.input_dim
        }
    }

    /// Width `N_{n+1}` of the output layer.
    pub fn output_width(&self) -> usize {
        match self.kind {
            ArchitectureKind::FourierSine => self.num_wavenumbers,
            _ => 1,
        }
    }

    /// Dense layers in evaluation order; the last one is the linear output.
    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn output_layer(&self) -> LayerShape {
        *self.layers.last().expect("spec has an output layer")
    }

    pub fn param_count(&self) -> usize {
        self.output_layer().end()
    }

    pub(crate) fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ParamLength { expected: self.param_count(), actual: params.len() });
        }
        Ok(())
    }
}

/// Flat vector of all weights and biases of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("parameter {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Xavier (Glorot) uniform initialization with zero biases.
pub fn xavier_init(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let bound = (6.0 / (layer.rows + layer.cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for w in &mut values[layer.weights_range()] {
            *w = dist.sample(&mut rng);
        }
    }
    ParamVector(values)
}

/// Affine function added to a trial to satisfy non-homogeneous Dirichlet data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineLift {
    pub offset: f64,
    pub slope: [f64; MAX_DIM],
}

impl AffineLift {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.offset + x.iter().zip(&self.slope).map(|(xi, s)| xi * s).sum::<f64>()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { offset: self.offset * factor, slope: self.slope.map(|s| s * factor) }
    }
}

/// Boundary factor of a trial function at one point.
#[derive(Clone, Debug, PartialEq)]
pub enum BoundaryFactor {
    Scalar(f64),
    /// Entry `m` is `Π_j sin(ω_m x_j)`.
    PerWavenumber(Vec<f64>),
}

pub fn boundary_factor(x: &[f64], spec: &NetworkSpec) -> BoundaryFactor {
    let ell = spec.domain_length();
    match spec.kind() {
        ArchitectureKind::Plain => BoundaryFactor::Scalar(1.0),
        ArchitectureKind::PlainG | ArchitectureKind::FourierG => {
            BoundaryFactor::Scalar(x.iter().map(|&xj| xj * (ell - xj)).product())
        }
        ArchitectureKind::FourierSine => {
            let map = spec.fourier().expect("fourier spec has wave numbers");
            BoundaryFactor::PerWavenumber(
                (0..map.len())
                    .map(|m| x.iter().map(|&xj| map.sincos(m, xj).0).product())
                    .collect(),
            )
        }
    }
}

/// Input layer `z0` for a point.
pub(crate) fn input_layer(spec: &NetworkSpec, x: &[f64]) -> Vec<f64> {
    match spec.fourier() {
        Some(map) => x.iter().flat_map(|&xj| fourier_features(xj, map)).collect(),
        None => x.to_vec(),
    }
}

/// Raw network output `z_{n+1}` (before the boundary factor).
pub fn network_output(spec: &NetworkSpec, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    let mut z = input_layer(spec, x);
    let layers = spec.layers();
    for (i, layer) in layers.iter().enumerate() {
        let w = &params[layer.weights_range()];
        let b = &params[layer.bias_range()];
        let hidden = i + 1 < layers.len();
        z = (0..layer.rows)
            .map(|r| {
                let row = &w[r * layer.cols..(r + 1) * layer.cols];
                let a = b[r] + row.iter().zip(&z).map(|(wi, zi)| wi * zi).sum::<f64>();
                if hidden {
                    spec.activation().apply(a)
                } else {
                    a
                }
            })
            .collect();
    }
    Ok(z)
}

/// Value of the trial function `ũ(x)`, plus `lift(x)` when supplied.
pub fn trial_value(
    spec: &NetworkSpec,
    params: &[f64],
    x: &[f64],
    lift: Option<&AffineLift>,
) -> Result<f64> {
    if x.len() != spec.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "point has {} coordinates, network expects {}",
            x.len(),
            spec.input_dim()
        )));
    }
    let out = network_output(spec, params, x)?;
    let value = match boundary_factor(x, spec) {
        BoundaryFactor::Scalar(g) => g * out[0],
        BoundaryFactor::PerWavenumber(s) => {
            s.iter().zip(&out).map(|(si, zi)| si * zi).sum::<f64>() / s.len() as f64
        }
    };
    Ok(value + lift.map_or(0.0, |l| l.value(x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec(kind: ArchitectureKind, d: usize, m: usize) -> NetworkSpec {
        NetworkSpec::new(d, vec![7, 5], m, 1.0, kind).unwrap()
    }

    #[test]
    fn wavenumbers_examples() {
        let w = geometric_wavenumbers(4, 1.0).unwrap();
        assert_eq!(w.omegas(), &[PI, 2.0 * PI, 4.0 * PI, 8.0 * PI]);
        assert_eq!(geometric_wavenumbers(1, 1.0).unwrap().omegas(), &[PI]);
        let w = geometric_wavenumbers(3, 2.0).unwrap();
        assert_eq!(w.omegas(), &[PI / 2.0, PI, 2.0 * PI]);
    }

    #[test]
    fn sincos_pi_matches_std_and_is_exact_at_integers() {
        for i in -40..=40 {
            let t = i as f64 * 0.173;
            let (s, c) = sincos_pi(t);
            assert_abs_diff_eq!(s, (PI * t).sin(), epsilon = 1e-13);
            assert_abs_diff_eq!(c, (PI * t).cos(), epsilon = 1e-13);
        }
        for k in 0..600 {
            assert_eq!(sincos_pi(k as f64).0, 0.0);
        }
    }

    #[test]
    fn wavenumbers_reject_bad_input() {
        assert!(geometric_wavenumbers(0, 1.0).is_err());
        assert!(geometric_wavenumbers(3, 0.0).is_err());
        assert!(geometric_wavenumbers(3, -1.0).is_err());
    }

    #[test]
    fn fourier_feature_examples() {
        let map = geometric_wavenumbers(2, 1.0).unwrap();
        assert_eq!(fourier_features(0.0, &map), vec![1.0, 1.0, 0.0, 0.0]);

        let map = geometric_wavenumbers(1, 1.0).unwrap();
        let row = fourier_features(0.5, &map);
        assert_abs_diff_eq!(row[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(row[1], 1.0, epsilon = 1e-15);

        let map = geometric_wavenumbers(4, 1.0).unwrap();
        let row = fourier_features(0.25, &map);
        let h = 2f64.sqrt() / 2.0;
        let expected = [h, 0.0, -1.0, 1.0, h, 1.0, 0.0, 0.0];
        for (a, b) in row.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn boundary_factor_examples() {
        let plain = spec(ArchitectureKind::PlainG, 1, 0);
        assert_eq!(boundary_factor(&[0.0], &plain), BoundaryFactor::Scalar(0.0));
        assert_eq!(boundary_factor(&[0.5], &plain), BoundaryFactor::Scalar(0.25));

        let sine = spec(ArchitectureKind::FourierSine, 2, 2);
        match boundary_factor(&[0.5, 0.5], &sine) {
            BoundaryFactor::PerWavenumber(s) => {
                assert_abs_diff_eq!(s[0], 1.0, epsilon = 1e-15);
                assert_abs_diff_eq!(s[1], 0.0, epsilon = 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(1, vec![], 0, 1.0, ArchitectureKind::PlainG).is_err());
        assert!(NetworkSpec::new(1, vec![3, 0], 0, 1.0, ArchitectureKind::PlainG).is_err());
        assert!(NetworkSpec::new(1, vec![3], 0, 1.0, ArchitectureKind::FourierG).is_err());
        assert!(NetworkSpec::new(1, vec![3], 0, 1.0, ArchitectureKind::FourierSine).is_err());
        assert!(NetworkSpec::new(3, vec![3], 1, 1.0, ArchitectureKind::FourierSine).is_err());
        assert!(NetworkSpec::new(1, vec![3], 1, 0.0, ArchitectureKind::FourierSine).is_err());
    }

    #[test]
    fn param_count_matches_closed_form() {
        // Width 10, M = 4, FourierSine in 1D: 10 * (8 + 1) + 4 * (10 + 1).
        let s = NetworkSpec::new(1, vec![10], 4, 1.0, ArchitectureKind::FourierSine).unwrap();
        assert_eq!(s.param_count(), 90 + 44);
        // One hidden layer of width 20 on the raw coordinate: 20 * 2 + 21.
        let s = NetworkSpec::new(1, vec![20], 0, 1.0, ArchitectureKind::PlainG).unwrap();
        assert_eq!(s.param_count(), 61);
    }

    #[test]
    fn xavier_is_deterministic_with_zero_biases() {
        let s = spec(ArchitectureKind::FourierSine, 2, 3);
        let a = xavier_init(&s, 42);
        let b = xavier_init(&s, 42);
        assert_eq!(a, b);
        assert_ne!(a, xavier_init(&s, 43));
        for layer in s.layers() {
            assert!(a[layer.bias_range()].iter().all(|&v| v == 0.0));
            let bound = (6.0 / (layer.rows + layer.cols) as f64).sqrt();
            assert!(a[layer.weights_range()].iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn xavier_weight_variance() {
        // uniform(-a, a) has variance a^2 / 3 = (6 / 40) / 3 = 0.05
        let s = NetworkSpec::new(1, vec![20, 20], 0, 1.0, ArchitectureKind::PlainG).unwrap();
        let middle = s.layers()[1];
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut n = 0.0;
        for seed in 0..10_000u64 {
            let p = xavier_init(&s, seed);
            let w = p[middle.weights_range()][(seed as usize * 7) % 400];
            sum += w;
            sum_sq += w * w;
            n += 1.0;
        }
        let mean = sum / n;
        let var = sum_sq / n - mean * mean;
        assert!((var - 0.05).abs() < 0.005, "variance {var}");
    }

    #[test]
    fn zero_output_layer_gives_zero_trial() {
        for kind in [ArchitectureKind::PlainG, ArchitectureKind::FourierG, ArchitectureKind::FourierSine] {
            let s = spec(kind, 1, 3);
            let mut p = xavier_init(&s, 1);
            let out = s.output_layer();
            p.as_mut_slice()[out.offset..out.end()].fill(0.0);
            for x in [0.1, 0.37, 0.9] {
                assert_eq!(trial_value(&s, &p, &[x], None).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn helmholtz_lift_sets_boundary_values() {
        let s = NetworkSpec::new(1, vec![10], 5, 1.0, ArchitectureKind::FourierSine).unwrap();
        let mut p = xavier_init(&s, 3);
        let out = s.output_layer();
        p.as_mut_slice()[out.offset..out.end()].fill(0.0);
        let lift = AffineLift { offset: 0.0, slope: [1.0, 0.0] };
        assert_eq!(trial_value(&s, &p, &[0.0], Some(&lift)).unwrap(), 0.0);
        assert_eq!(trial_value(&s, &p, &[1.0], Some(&lift)).unwrap(), 1.0);
    }

    #[test]
    fn trial_rejects_wrong_length() {
        let s = spec(ArchitectureKind::FourierSine, 1, 2);
        let err = trial_value(&s, &[0.0; 3], &[0.5], None).unwrap_err();
        assert!(matches!(err, Error::ParamLength { .. }));
    }
}
