//! Equation coefficients: the diffusion `A(x)`, the interaction drift
//! `b(t, x, μ)` and the potential `V(t, x, μ)`.
//!
//! Measure dependence is restricted to the moment form
//! `β(t, x, (g₁, μ), …, (g_m, μ))`, so that the variational derivatives
//!
//! ```text
//! δb/δμ(z)        = Σ_j ∂β/∂s_j · g_j(z)
//! δ²b/δμ(z)δμ(u)  = Σ_{j,k} ∂²β/∂s_j∂s_k · g_j(z) g_k(u)
//! ```
//!
//! are available in closed form.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{pair_values, DensityField, Field};
use crate::grid::Grid1D;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A moment kernel `g_j`.
#[derive(Clone)]
pub enum Kernel {
    Analytic {
        name: String,
        f: ScalarFn,
    },
    /// Samples on a grid, linearly interpolated and clamped outside it.
    Tabulated {
        grid: Grid1D,
        values: Vec<f64>,
    },
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Analytic { name, .. } => write!(f, "Kernel::Analytic({name})"),
            Kernel::Tabulated { grid, .. } => write!(f, "Kernel::Tabulated({} nodes)", grid.len()),
        }
    }
}

impl Kernel {
    pub fn analytic(name: &str, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Kernel::Analytic {
            name: name.to_string(),
            f: Arc::new(f),
        }
    }

    pub fn tabulated(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "tabulated kernel has {} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "tabulated kernel has non-finite entries".into(),
            ));
        }
        Ok(Kernel::Tabulated { grid, values })
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Kernel::Analytic { f, .. } => f(x),
            Kernel::Tabulated { grid, values } => {
                let u = ((x - grid.x_min()) / grid.spacing()).clamp(0.0, (grid.len() - 1) as f64);
                let i = (u.floor() as usize).min(grid.len() - 2);
                let frac = u - i as f64;
                values[i] * (1.0 - frac) + values[i + 1] * frac
            }
        }
    }

    pub fn sample(&self, grid: &Grid1D) -> Vec<f64> {
        grid.sample(|x| self.eval(x))
    }
}

/// Outer function `β(t, x, s₁, …, s_m)` of a moment-form coefficient.
pub trait MomentOuter: Send + Sync + fmt::Debug {
    /// Number of moments `m`.
    fn arity(&self) -> usize;
    fn value(&self, t: f64, x: f64, s: &[f64]) -> f64;
    /// `∂β/∂s_j` written into `out[j]`.
    fn gradient(&self, t: f64, x: f64, s: &[f64], out: &mut [f64]);
    /// `∂²β/∂s_j∂s_k` written row-major into `out[j*m + k]`. Returns `false`
    /// when second derivatives are not provided.
    fn hessian(&self, t: f64, x: f64, s: &[f64], out: &mut [f64]) -> bool;
}

/// `β = c` (no measure or space dependence).
#[derive(Debug, Clone, Copy)]
pub struct ConstantOuter(pub f64);

impl MomentOuter for ConstantOuter {
    fn arity(&self) -> usize {
        0
    }
    fn value(&self, _t: f64, _x: f64, _s: &[f64]) -> f64 {
        self.0
    }
    fn gradient(&self, _t: f64, _x: f64, _s: &[f64], _out: &mut [f64]) {}
    fn hessian(&self, _t: f64, _x: f64, _s: &[f64], _out: &mut [f64]) -> bool {
        true
    }
}

/// `β = −rate·(x − s₁)`, paired with `g₁(y) = y`.
#[derive(Debug, Clone, Copy)]
pub struct MeanReversionOuter {
    pub rate: f64,
}

impl MomentOuter for MeanReversionOuter {
    fn arity(&self) -> usize {
        1
    }
    fn value(&self, _t: f64, x: f64, s: &[f64]) -> f64 {
        -self.rate * (x - s[0])
    }
    fn gradient(&self, _t: f64, _x: f64, _s: &[f64], out: &mut [f64]) {
        out[0] = self.rate;
    }
    fn hessian(&self, _t: f64, _x: f64, _s: &[f64], out: &mut [f64]) -> bool {
        out[0] = 0.0;
        true
    }
}

/// `β = offset − rate·x + Σ_j linear_j s_j + Σ_j quadratic_j s_j²`.
#[derive(Debug, Clone)]
pub struct QuadraticOuter {
    pub offset: f64,
    pub rate: f64,
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
}

impl MomentOuter for QuadraticOuter {
    fn arity(&self) -> usize {
        self.linear.len()
    }
    fn value(&self, _t: f64, x: f64, s: &[f64]) -> f64 {
        let mut v = self.offset - self.rate * x;
        for j in 0..self.linear.len() {
            v += self.linear[j] * s[j] + self.quadratic[j] * s[j] * s[j];
        }
        v
    }
    fn gradient(&self, _t: f64, _x: f64, s: &[f64], out: &mut [f64]) {
        for j in 0..self.linear.len() {
            out[j] = self.linear[j] + 2.0 * self.quadratic[j] * s[j];
        }
    }
    fn hessian(&self, _t: f64, _x: f64, _s: &[f64], out: &mut [f64]) -> bool {
        let m = self.linear.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..m {
            out[j * m + j] = 2.0 * self.quadratic[j];
        }
        true
    }
}

type OuterValue = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;
type OuterSlice = Arc<dyn Fn(f64, f64, &[f64], &mut [f64]) + Send + Sync>;

/// Outer function assembled from closures.
#[derive(Clone)]
pub struct ClosureOuter {
    arity: usize,
    value: OuterValue,
    gradient: OuterSlice,
    hessian: Option<OuterSlice>,
}

impl fmt::Debug for ClosureOuter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ClosureOuter(arity {})", self.arity)
    }
}

impl ClosureOuter {
    pub fn new(
        arity: usize,
        value: impl Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(f64, f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            arity,
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            hessian: None,
        }
    }

    pub fn with_hessian(
        mut self,
        hessian: impl Fn(f64, f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.hessian = Some(Arc::new(hessian));
        self
    }
}

impl MomentOuter for ClosureOuter {
    fn arity(&self) -> usize {
        self.arity
    }
    fn value(&self, t: f64, x: f64, s: &[f64]) -> f64 {
        (self.value)(t, x, s)
    }
    fn gradient(&self, t: f64, x: f64, s: &[f64], out: &mut [f64]) {
        (self.gradient)(t, x, s, out)
    }
    fn hessian(&self, t: f64, x: f64, s: &[f64], out: &mut [f64]) -> bool {
        match &self.hessian {
            Some(h) => {
                h(t, x, s, out);
                true
            }
            None => false,
        }
    }
}

/// `β(t, x, (g, μ))` with its kernels.
#[derive(Clone, Debug)]
pub struct MomentFunctional {
    outer: Arc<dyn MomentOuter>,
    kernels: Vec<Kernel>,
}

/// `δF(x)/δμ(z) = Σ_j a_j(x) g_j(z)` sampled on a grid.
#[derive(Clone, Debug)]
pub struct VariationKernel {
    /// `a_j(x_i) = ∂β/∂s_j` at node `i`, indexed `[j][i]`.
    pub coefficients: Vec<Vec<f64>>,
    /// `g_j(z_i)`, indexed `[j][i]`.
    pub kernels: Vec<Vec<f64>>,
}

impl VariationKernel {
    pub fn value(&self, ix: usize, iz: usize) -> f64 {
        self.coefficients
            .iter()
            .zip(&self.kernels)
            .map(|(a, g)| a[ix] * g[iz])
            .sum()
    }

    pub fn arity(&self) -> usize {
        self.kernels.len()
    }
}

/// `δ²F(x)/δμ(z)δμ(u) = Σ_{j,k} H_jk(x) g_j(z) g_k(u)` sampled on a grid.
#[derive(Clone, Debug)]
pub struct SecondVariationKernel {
    /// Row-major `m×m` Hessians per node.
    pub hessians: Vec<Vec<f64>>,
    pub kernels: Vec<Vec<f64>>,
}

impl SecondVariationKernel {
    pub fn value(&self, ix: usize, iz: usize, iu: usize) -> f64 {
        let m = self.kernels.len();
        let h = &self.hessians[ix];
        let mut v = 0.0;
        for j in 0..m {
            for k in 0..m {
                v += h[j * m + k] * self.kernels[j][iz] * self.kernels[k][iu];
            }
        }
        v
    }
}

impl MomentFunctional {
    pub fn new(outer: Arc<dyn MomentOuter>, kernels: Vec<Kernel>) -> Result<Self> {
        if outer.arity() != kernels.len() {
            return Err(Error::Config(format!(
                "outer function takes {} moments but {} kernels were given",
                outer.arity(),
                kernels.len()
            )));
        }
        Ok(Self { outer, kernels })
    }

    pub fn constant(c: f64) -> Self {
        Self {
            outer: Arc::new(ConstantOuter(c)),
            kernels: Vec::new(),
        }
    }

    pub fn arity(&self) -> usize {
        self.kernels.len()
    }

    pub fn outer(&self) -> &dyn MomentOuter {
        self.outer.as_ref()
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn is_measure_independent(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernel_samples(&self, grid: &Grid1D) -> Vec<Vec<f64>> {
        self.kernels.iter().map(|k| k.sample(grid)).collect()
    }

    /// Moments `(g_j, μ)` of node values `mu` on `grid`.
    pub fn moments(&self, grid: &Grid1D, mu: &[f64]) -> Vec<f64> {
        self.kernels
            .iter()
            .map(|k| pair_values(grid, &k.sample(grid), mu))
            .collect()
    }

    /// Moments with pre-sampled kernels.
    pub fn moments_with(grid: &Grid1D, samples: &[Vec<f64>], mu: &[f64]) -> Vec<f64> {
        samples.iter().map(|g| pair_values(grid, g, mu)).collect()
    }

    pub fn value_at(&self, t: f64, x: f64, s: &[f64]) -> f64 {
        self.outer.value(t, x, s)
    }

    /// Node values `β(t, x_i, s)` for given moments.
    pub fn values_with_moments(&self, t: f64, grid: &Grid1D, s: &[f64]) -> Result<Vec<f64>> {
        let out = grid.sample(|x| self.outer.value(t, x, s));
        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "coefficient evaluation".into(),
                index,
            });
        }
        Ok(out)
    }

    pub fn evaluate(&self, t: f64, mu: &impl Field) -> Result<Vec<f64>> {
        let s = self.moments(mu.grid(), mu.values());
        self.values_with_moments(t, mu.grid(), &s)
    }

    /// Gradients `∂β/∂s_j(t, x_i, s)` indexed `[j][i]`.
    pub fn gradients_with_moments(&self, t: f64, grid: &Grid1D, s: &[f64]) -> Vec<Vec<f64>> {
        let m = self.arity();
        let mut out = vec![vec![0.0; grid.len()]; m];
        let mut buf = vec![0.0; m];
        for i in 0..grid.len() {
            self.outer.gradient(t, grid.x(i), s, &mut buf);
            for j in 0..m {
                out[j][i] = buf[j];
            }
        }
        out
    }

    pub fn variation(&self, t: f64, mu: &impl Field) -> VariationKernel {
        let grid = mu.grid();
        let s = self.moments(grid, mu.values());
        VariationKernel {
            coefficients: self.gradients_with_moments(t, grid, &s),
            kernels: self.kernel_samples(grid),
        }
    }

    /// Node Hessians; `None` when the outer function does not provide them.
    pub fn hessians_with_moments(&self, t: f64, grid: &Grid1D, s: &[f64]) -> Option<Vec<Vec<f64>>> {
        let m = self.arity();
        let mut out = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let mut h = vec![0.0; m * m];
            if !self.outer.hessian(t, grid.x(i), s, &mut h) {
                return None;
            }
            out.push(h);
        }
        Some(out)
    }

    pub fn second_variation(&self, t: f64, mu: &impl Field) -> Result<SecondVariationKernel> {
        let grid = mu.grid();
        let s = self.moments(grid, mu.values());
        let hessians = self.hessians_with_moments(t, grid, &s).ok_or_else(|| {
            Error::Config("coefficient does not provide second variational derivatives".into())
        })?;
        Ok(SecondVariationKernel {
            hessians,
            kernels: self.kernel_samples(grid),
        })
    }

    pub fn has_second_derivatives(&self) -> bool {
        let m = self.arity();
        let s = vec![0.0; m];
        let mut h = vec![0.0; m * m];
        self.outer.hessian(0.0, 0.0, &s, &mut h)
    }
}

/// Interaction drift `b(t, x, μ)`.
#[derive(Clone, Debug)]
pub struct InteractionDrift(pub MomentFunctional);

impl InteractionDrift {
    pub fn none() -> Self {
        Self(MomentFunctional::constant(0.0))
    }

    /// `b = −rate·(x − mean(μ))`.
    pub fn mean_reversion(rate: f64) -> Self {
        Self(
            MomentFunctional::new(
                Arc::new(MeanReversionOuter { rate }),
                vec![Kernel::analytic("identity", |y| y)],
            )
            .expect("arity matches"),
        )
    }

    /// `b = −rate·x + strength·(g, μ)²` with the bump `g(y) = exp(−y²/(2 width²))`.
    pub fn moment_quadratic(rate: f64, strength: f64, width: f64) -> Self {
        Self(
            MomentFunctional::new(
                Arc::new(QuadraticOuter {
                    offset: 0.0,
                    rate,
                    linear: vec![0.0],
                    quadratic: vec![strength],
                }),
                vec![Kernel::analytic("bump", move |y| {
                    (-0.5 * y * y / (width * width)).exp()
                })],
            )
            .expect("arity matches"),
        )
    }

    /// Confining drift `b = −rate·x` with no interaction.
    pub fn confining(rate: f64) -> Self {
        Self(
            MomentFunctional::new(
                Arc::new(QuadraticOuter {
                    offset: 0.0,
                    rate,
                    linear: vec![],
                    quadratic: vec![],
                }),
                vec![],
            )
            .expect("arity matches"),
        )
    }

    pub fn functional(&self) -> &MomentFunctional {
        &self.0
    }

    pub fn evaluate_drift(&self, t: f64, mu: &DensityField) -> Result<Vec<f64>> {
        self.0.evaluate(t, mu)
    }

    pub fn drift_variation(&self, t: f64, mu: &DensityField) -> VariationKernel {
        self.0.variation(t, mu)
    }

    pub fn drift_second_variation(
        &self,
        t: f64,
        mu: &DensityField,
    ) -> Result<SecondVariationKernel> {
        self.0.second_variation(t, mu)
    }
}

/// Non-positive potential `V(t, x, μ)`.
#[derive(Clone, Debug)]
pub struct PotentialTerm(pub MomentFunctional);

impl PotentialTerm {
    pub fn none() -> Self {
        Self(MomentFunctional::constant(0.0))
    }

    /// `V ≡ −rate`.
    pub fn constant_killing(rate: f64) -> Result<Self> {
        if rate < 0.0 {
            return Err(Error::Config(format!(
                "killing rate must be ≥ 0, got {rate}"
            )));
        }
        Ok(Self(MomentFunctional::constant(-rate)))
    }

    /// `V = −strength·(g, μ)²` with the bump `g(y) = exp(−y²/(2 width²))`.
    pub fn moment_killing(strength: f64, width: f64) -> Result<Self> {
        if strength < 0.0 {
            return Err(Error::Config(format!(
                "killing strength must be ≥ 0, got {strength}"
            )));
        }
        Ok(Self(MomentFunctional::new(
            Arc::new(QuadraticOuter {
                offset: 0.0,
                rate: 0.0,
                linear: vec![0.0],
                quadratic: vec![-strength],
            }),
            vec![Kernel::analytic("bump", move |y| {
                (-0.5 * y * y / (width * width)).exp()
            })],
        )?))
    }

    pub fn functional(&self) -> &MomentFunctional {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_measure_independent() && self.0.value_at(0.0, 0.0, &[]) == 0.0
    }

    /// Node values, rejecting any positive entry.
    pub fn values_with_moments(&self, t: f64, grid: &Grid1D, s: &[f64]) -> Result<Vec<f64>> {
        let v = self.0.values_with_moments(t, grid, s)?;
        check_nonpositive(grid, &v)?;
        Ok(v)
    }

    pub fn evaluate(&self, t: f64, mu: &impl Field) -> Result<Vec<f64>> {
        let s = self.0.moments(mu.grid(), mu.values());
        self.values_with_moments(t, mu.grid(), &s)
    }
}

fn check_nonpositive(grid: &Grid1D, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| *v > 0.0) {
        Some(i) => Err(Error::PositivePotential {
            x: grid.x(i),
            value: values[i],
        }),
        None => Ok(()),
    }
}

/// Scalar diffusion coefficient `A(x)` (the `d = 1` diffusion matrix).
#[derive(Clone)]
pub enum Diffusion {
    Constant(f64),
    Variable { name: String, f: ScalarFn },
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Constant(a) => write!(f, "Diffusion::Constant({a})"),
            Diffusion::Variable { name, .. } => write!(f, "Diffusion::Variable({name})"),
        }
    }
}

/// Ellipticity and smoothness constants measured on a grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EllipticityBounds {
    /// `m` with `m⁻¹ ≤ A(x) ≤ m`.
    pub m: f64,
    /// Finite-difference surrogate of `‖A‖_{C²}`.
    pub c2_norm: f64,
}

impl Diffusion {
    pub fn constant(a: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Config(format!(
                "diffusion must be positive, got {a}"
            )));
        }
        Ok(Diffusion::Constant(a))
    }

    /// `A(x) = base + amplitude·sin²(x)`.
    pub fn sin_squared(base: f64, amplitude: f64) -> Result<Self> {
        if !(base > 0.0) || base + amplitude.min(0.0) <= 0.0 {
            return Err(Error::Config("sin² diffusion must stay positive".into()));
        }
        Ok(Diffusion::Variable {
            name: format!("{base}+{amplitude}sin^2"),
            f: Arc::new(move |x: f64| base + amplitude * x.sin().powi(2)),
        })
    }

    pub fn variable(name: &str, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Diffusion::Variable {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Diffusion::Constant(a) => *a,
            Diffusion::Variable { f, .. } => f(x),
        }
    }

    pub fn sample(&self, grid: &Grid1D) -> Vec<f64> {
        grid.sample(|x| self.eval(x))
    }

    pub fn bounds(&self, grid: &Grid1D) -> Result<EllipticityBounds> {
        let a = self.sample(grid);
        if a.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "diffusion is not uniformly elliptic on the grid".into(),
            ));
        }
        let max = a.iter().copied().fold(0.0, f64::max);
        let min = a.iter().copied().fold(f64::INFINITY, f64::min);
        let h = grid.spacing();
        let n = a.len();
        let mut d1: f64 = 0.0;
        let mut d2: f64 = 0.0;
        for i in 1..n - 1 {
            d1 = d1.max(((a[i + 1] - a[i - 1]) / (2.0 * h)).abs());
            d2 = d2.max(((a[i + 1] - 2.0 * a[i] + a[i - 1]) / (h * h)).abs());
        }
        Ok(EllipticityBounds {
            m: max.max(1.0 / min),
            c2_norm: max + d1 + d2,
        })
    }
}

/// The coefficient triple `(A, b, V)` of the equation.
#[derive(Clone, Debug)]
pub struct Coefficients {
    pub diffusion: Diffusion,
    pub drift: InteractionDrift,
    pub potential: PotentialTerm,
}

impl Coefficients {
    /// Pure heat flow with constant diffusion `a`.
    pub fn heat(a: f64) -> Result<Self> {
        Ok(Self {
            diffusion: Diffusion::constant(a)?,
            drift: InteractionDrift::none(),
            potential: PotentialTerm::none(),
        })
    }

    pub fn with_drift(mut self, drift: InteractionDrift) -> Self {
        self.drift = drift;
        self
    }

    pub fn with_potential(mut self, potential: PotentialTerm) -> Self {
        self.potential = potential;
        self
    }

    /// True when neither `b` nor `V` depends on the measure.
    pub fn is_measure_independent(&self) -> bool {
        self.drift.0.is_measure_independent() && self.potential.0.is_measure_independent()
    }

    pub fn has_second_derivatives(&self) -> bool {
        self.drift.0.has_second_derivatives() && self.potential.0.has_second_derivatives()
    }
}

/// Sup bounds of the coefficients over a family of measures.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CoefficientBounds {
    /// `sup |V|`.
    pub v_sup: f64,
    /// `sup |b|`.
    pub b_sup: f64,
    /// Lipschitz constant of `μ ↦ b, V` in total variation.
    pub l_a: f64,
    /// `sup |δb/δμ|`, `sup |δV/δμ|`.
    pub r: f64,
    /// `sup |δ²b/δμδμ|`, same for `V`.
    pub r2: f64,
    /// `C^{1×1}` surrogate of the second variational derivatives.
    pub r3: f64,
    /// `C¹` surrogate (in `x`) of the first variational derivatives.
    pub r4: f64,
    /// `‖b‖_{C¹} + ‖V‖_{C¹} + ‖δb/δμ(·)‖_{C¹} + ‖δV/δμ(·)‖_{C¹}`.
    pub c1: f64,
    /// `sup ‖μ‖` over the samples.
    pub lambda: f64,
}

fn sup_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn sup_abs_derivative(grid: &Grid1D, v: &[f64]) -> f64 {
    let h = grid.spacing();
    (1..v.len() - 1).fold(0.0, |m: f64, i| {
        m.max(((v[i + 1] - v[i - 1]) / (2.0 * h)).abs())
    })
}

struct FunctionalSup {
    value: f64,
    value_c1: f64,
    first: f64,
    first_c1_x: f64,
    first_c1_z: f64,
    second: f64,
    second_c11: f64,
}

fn functional_sups(f: &MomentFunctional, t: f64, mu: &DensityField) -> Result<FunctionalSup> {
    let grid = mu.grid();
    let s = f.moments(grid, mu.values());
    let values = f.values_with_moments(t, grid, &s)?;
    let grads = f.gradients_with_moments(t, grid, &s);
    let kernels = f.kernel_samples(grid);
    let kernel_sup: Vec<f64> = kernels.iter().map(|g| sup_abs(g)).collect();
    let kernel_dsup: Vec<f64> = kernels
        .iter()
        .map(|g| sup_abs_derivative(grid, g))
        .collect();

    // sup_{x,z} Σ_j |a_j(x)| |g_j(z)| bounds sup |δF/δμ|.
    let n = grid.len();
    let mut first: f64 = 0.0;
    let mut first_c1_x: f64 = 0.0;
    let mut first_c1_z: f64 = 0.0;
    let h = grid.spacing();
    for i in 0..n {
        let mut a = 0.0;
        let mut az = 0.0;
        let mut ax = 0.0;
        for j in 0..f.arity() {
            a += grads[j][i].abs() * kernel_sup[j];
            az += grads[j][i].abs() * kernel_dsup[j];
            if i > 0 && i + 1 < n {
                ax += ((grads[j][i + 1] - grads[j][i - 1]) / (2.0 * h)).abs() * kernel_sup[j];
            }
        }
        first = first.max(a);
        first_c1_x = first_c1_x.max(a + ax);
        first_c1_z = first_c1_z.max(a + az);
    }

    let (second, second_c11) = match f.hessians_with_moments(t, grid, &s) {
        Some(hs) => {
            let m = f.arity();
            let mut sup: f64 = 0.0;
            let mut sup11: f64 = 0.0;
            for hx in &hs {
                let mut v = 0.0;
                let mut v11 = 0.0;
                for j in 0..m {
                    for k in 0..m {
                        let c = hx[j * m + k].abs();
                        v += c * kernel_sup[j] * kernel_sup[k];
                        v11 +=
                            c * (kernel_sup[j] + kernel_dsup[j]) * (kernel_sup[k] + kernel_dsup[k]);
                    }
                }
                sup = sup.max(v);
                sup11 = sup11.max(v11);
            }
            (sup, sup11)
        }
        None => (f64::NAN, f64::NAN),
    };

    Ok(FunctionalSup {
        value: sup_abs(&values),
        value_c1: sup_abs(&values) + sup_abs_derivative(grid, &values),
        first,
        first_c1_x,
        first_c1_z,
        second,
        second_c11,
    })
}

/// Estimates the coefficient constants by sup-scans over the sample family
/// (all grid nodes, evaluated at `t`). The Lipschitz constant is the largest
/// observed difference quotient over sample pairs.
pub fn measure_bounds(
    t: f64,
    drift: &InteractionDrift,
    potential: &PotentialTerm,
    samples: &[DensityField],
) -> Result<CoefficientBounds> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("measure_bounds needs at least one sample".into()))?;
    let grid = *first.grid();
    for s in samples {
        grid.ensure_same(s.grid())?;
    }
    let mut out = CoefficientBounds {
        v_sup: 0.0,
        b_sup: 0.0,
        l_a: 0.0,
        r: 0.0,
        r2: 0.0,
        r3: 0.0,
        r4: 0.0,
        c1: 0.0,
        lambda: 0.0,
    };
    let mut b_vals = Vec::with_capacity(samples.len());
    let mut v_vals = Vec::with_capacity(samples.len());
    for mu in samples {
        let b = functional_sups(&drift.0, t, mu)?;
        let v = functional_sups(&potential.0, t, mu)?;
        out.b_sup = out.b_sup.max(b.value);
        out.v_sup = out.v_sup.max(v.value);
        out.r = out.r.max(b.first).max(v.first);
        out.r2 = out.r2.max(b.second).max(v.second);
        out.r3 = out.r3.max(b.second_c11).max(v.second_c11);
        out.r4 = out.r4.max(b.first_c1_x).max(v.first_c1_x);
        out.c1 = out
            .c1
            .max(b.value_c1 + v.value_c1 + b.first_c1_z + v.first_c1_z);
        out.lambda = out.lambda.max(crate::field::l1_norm(mu));
        b_vals.push(drift.0.evaluate(t, mu)?);
        v_vals.push(potential.evaluate(t, mu)?);
    }
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let dist = crate::field::l1_distance(&samples[i], &samples[j])?;
            if dist <= 0.0 {
                continue;
            }
            let db = b_vals[i]
                .iter()
                .zip(&b_vals[j])
                .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
            let dv = v_vals[i]
                .iter()
                .zip(&v_vals[j])
                .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
            out.l_a = out.l_a.max(db.max(dv) / dist);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::mollified_delta_values;

    fn grid() -> Grid1D {
        Grid1D::new(-10.0, 10.0, 2001).unwrap()
    }

    #[test]
    fn mean_reversion_drift_uses_the_mean() {
        let mu = DensityField::gaussian(grid(), 0.3, 1.0, 1.0).unwrap();
        let b = InteractionDrift::mean_reversion(1.0)
            .evaluate_drift(0.0, &mu)
            .unwrap();
        for (i, v) in b.iter().enumerate() {
            assert!((v + (grid().x(i) - 0.3)).abs() < 1e-8);
        }
    }

    #[test]
    fn measure_independent_drift_is_plain_evaluation() {
        let mu = DensityField::gaussian(grid(), 0.0, 1.0, 1.0).unwrap();
        let drift = InteractionDrift::confining(2.0);
        let b = drift.evaluate_drift(0.0, &mu).unwrap();
        assert_eq!(b[0], 20.0);
        let var = drift.drift_variation(0.0, &mu);
        assert_eq!(var.arity(), 0);
        assert_eq!(var.value(3, 7), 0.0);
    }

    #[test]
    fn tanh_of_cosine_moment_vanishes_on_uniform() {
        let g = Grid1D::new(-std::f64::consts::PI, std::f64::consts::PI, 2001).unwrap();
        let outer = ClosureOuter::new(
            1,
            |_, _, s| s[0].tanh(),
            |_, _, s, out| out[0] = 1.0 - s[0].tanh().powi(2),
        );
        let f = MomentFunctional::new(Arc::new(outer), vec![Kernel::analytic("cos", f64::cos)])
            .unwrap();
        let mu = DensityField::from_fn(g, 0.0, |_| 1.0 / (2.0 * std::f64::consts::PI)).unwrap();
        for v in f.evaluate(0.0, &mu).unwrap() {
            assert!(v.abs() < 1e-8);
        }
    }

    #[test]
    fn linear_functional_variation_is_the_kernel() {
        let mu = DensityField::gaussian(grid(), 0.5, 1.0, 1.0).unwrap();
        let var = InteractionDrift::mean_reversion(1.0).drift_variation(0.0, &mu);
        for &(ix, iz) in &[(0, 5), (1000, 1300), (2000, 17)] {
            assert!((var.value(ix, iz) - grid().x(iz)).abs() < 1e-12);
        }
        let second = InteractionDrift::mean_reversion(1.0)
            .drift_second_variation(0.0, &mu)
            .unwrap();
        assert_eq!(second.value(10, 20, 30), 0.0);
    }

    #[test]
    fn quadratic_second_variation_is_exact() {
        let mu = DensityField::gaussian(grid(), 0.2, 1.0, 1.0).unwrap();
        let drift = InteractionDrift::moment_quadratic(1.0, 1.0, 1.0);
        let second = drift.drift_second_variation(0.0, &mu).unwrap();
        let g = |y: f64| (-0.5 * y * y).exp();
        let (ix, iz, iu) = (100, 950, 1040);
        let want = 2.0 * g(grid().x(iz)) * g(grid().x(iu));
        assert!((second.value(ix, iz, iu) - want).abs() < 1e-14);
    }

    // Finite-difference probe (b(μ + εδ̃_z) − b(μ))/ε with a mollified delta.
    fn fd_first(f: &MomentFunctional, mu: &DensityField, ix: usize, z: f64, eps: f64) -> f64 {
        let delta = mollified_delta_values(mu.grid(), z).unwrap();
        let plus: Vec<f64> = mu
            .values()
            .iter()
            .zip(&delta)
            .map(|(a, d)| a + eps * d)
            .collect();
        let s0 = f.moments(mu.grid(), mu.values());
        let s1 = f.moments(mu.grid(), &plus);
        let x = mu.grid().x(ix);
        (f.value_at(0.0, x, &s1) - f.value_at(0.0, x, &s0)) / eps
    }

    #[test]
    fn squared_moment_variation_matches_probe() {
        let mu = DensityField::gaussian(grid(), 0.1, 1.3, 1.0).unwrap();
        let drift = InteractionDrift::moment_quadratic(0.0, 1.0, 1.0);
        let var = drift.drift_variation(0.0, &mu);
        let pairs = [
            (10, 900),
            (400, 1000),
            (1200, 1100),
            (1999, 700),
            (1000, 1000),
        ];
        for &(ix, iz) in &pairs {
            let fd = fd_first(&drift.0, &mu, ix, grid().x(iz), 1e-5);
            // The probe direction is the mollified delta, so pair against it.
            let delta = mollified_delta_values(&grid(), grid().x(iz)).unwrap();
            let row: Vec<f64> = (0..grid().len()).map(|k| var.value(ix, k)).collect();
            let exact = pair_values(&grid(), &row, &delta);
            assert!(((fd - exact) / exact).abs() < 1e-4, "{fd} vs {exact}");
        }
    }

    #[test]
    fn exponential_second_variation_matches_central_difference() {
        let outer = ClosureOuter::new(1, |_, _, s| s[0].exp(), |_, _, s, out| out[0] = s[0].exp())
            .with_hessian(|_, _, s, out| out[0] = s[0].exp());
        let f = MomentFunctional::new(
            Arc::new(outer),
            vec![Kernel::analytic("bump", |y| (-0.5 * y * y).exp())],
        )
        .unwrap();
        let mu = DensityField::gaussian(grid(), 0.0, 1.0, 1.0).unwrap();
        let second = f.second_variation(0.0, &mu).unwrap();
        let (iz, iu) = (950, 1080);
        let dz = mollified_delta_values(&grid(), grid().x(iz)).unwrap();
        let du = mollified_delta_values(&grid(), grid().x(iu)).unwrap();
        let eps = 1e-3;
        let eval = |a: f64, b: f64| {
            let v: Vec<f64> = mu
                .values()
                .iter()
                .zip(dz.iter().zip(&du))
                .map(|(m, (p, q))| m + a * p + b * q)
                .collect();
            let s = f.moments(&grid(), &v);
            f.value_at(0.0, 0.0, &s)
        };
        let fd = (eval(eps, eps) - eval(eps, -eps) - eval(-eps, eps) + eval(-eps, -eps))
            / (4.0 * eps * eps);
        let w = grid().weights();
        let mut exact = 0.0;
        for a in 0..grid().len() {
            for b in 0..grid().len() {
                exact += w[a] * w[b] * dz[a] * du[b] * second.value(1000, a, b);
            }
        }
        assert!(((fd - exact) / exact).abs() < 1e-4, "{fd} vs {exact}");
    }

    #[test]
    fn missing_hessian_is_rejected() {
        let outer = ClosureOuter::new(1, |_, _, s| s[0], |_, _, _, out| out[0] = 1.0);
        let f =
            MomentFunctional::new(Arc::new(outer), vec![Kernel::analytic("one", |_| 1.0)]).unwrap();
        let mu = DensityField::gaussian(grid(), 0.0, 1.0, 1.0).unwrap();
        assert!(f.second_variation(0.0, &mu).is_err());
        assert!(!f.has_second_derivatives());
    }

    #[test]
    fn potential_sign_is_enforced() {
        let mu = DensityField::gaussian(grid(), 0.0, 1.0, 1.0).unwrap();
        assert!(PotentialTerm::constant_killing(-1.0).is_err());
        let bad = PotentialTerm(MomentFunctional::constant(0.5));
        assert!(matches!(
            bad.evaluate(0.0, &mu),
            Err(Error::PositivePotential { .. })
        ));
        let good = PotentialTerm::moment_killing(1.0, 1.0).unwrap();
        assert!(good.evaluate(0.0, &mu).unwrap().iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn bounds_for_constant_drift() {
        let mu = DensityField::gaussian(grid(), 0.0, 1.0, 1.0).unwrap();
        let drift = InteractionDrift(MomentFunctional::constant(-0.7));
        let b = measure_bounds(0.0, &drift, &PotentialTerm::none(), &[mu.clone(), mu]).unwrap();
        assert_eq!(b.b_sup, 0.7);
        assert_eq!((b.v_sup, b.r, b.r2, b.l_a), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn bounds_for_mean_reversion() {
        let samples: Vec<_> = [-0.5, 0.0, 0.4]
            .iter()
            .map(|m| DensityField::gaussian(grid(), *m, 1.0, 1.0).unwrap())
            .collect();
        let drift = InteractionDrift::mean_reversion(1.0);
        let b = measure_bounds(0.0, &drift, &PotentialTerm::none(), &samples).unwrap();
        // Direct scan: max over nodes and samples of |x − mean|.
        let mut want: f64 = 0.0;
        for mu in &samples {
            let mean = pair_values(&grid(), &grid().nodes(), mu.values());
            for x in grid().nodes() {
                want = want.max((x - mean).abs());
            }
        }
        assert!((b.b_sup - want).abs() < 1e-12);
        assert!((b.r - 10.0).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_probe_of_linear_drift() {
        // Two measures with mean gap δ: the drift changes by exactly δ.
        let g = grid();
        let w = g.weights();
        let mut a = vec![0.0; g.len()];
        let mut b = vec![0.0; g.len()];
        a[1000] = 1.0 / w[1000];
        b[1010] = 1.0 / w[1010];
        let mu1 = DensityField::new(g, a, 0.0).unwrap();
        let mu2 = DensityField::new(g, b, 0.0).unwrap();
        let delta = g.x(1010) - g.x(1000);
        let drift = InteractionDrift::mean_reversion(1.0);
        let b1 = drift.evaluate_drift(0.0, &mu1).unwrap();
        let b2 = drift.evaluate_drift(0.0, &mu2).unwrap();
        assert!(b1
            .iter()
            .zip(&b2)
            .all(|(p, q)| ((p - q).abs() - delta).abs() < 1e-12));
        let bounds = measure_bounds(0.0, &drift, &PotentialTerm::none(), &[mu1, mu2]).unwrap();
        // ‖μ¹ − μ²‖ = 2 for disjoint unit masses.
        assert!((bounds.l_a - delta / 2.0).abs() < 1e-12);
    }
}
