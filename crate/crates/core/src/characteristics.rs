//! Stochastic characteristics for a one-dimensional common noise field.
//!
//! The flow `∂_t Z = −σ(Z)`, `Z(0, x) = x` is integrated with classical RK4
//! together with its variational equations
//!
//! ```text
//! ∂_t J = −σ'(Z) J,    ∂_t K = −σ''(Z) J² − σ'(Z) K,    ∂_t log G = B(Z) = −σ'(Z),
//! ```
//!
//! where `J = ∂Z/∂x` and `K = ∂²Z/∂x²`. In one dimension `G = J`; both are
//! integrated and the identity is a useful check.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use serde::Serialize;

use crate::coefficients::{Diffusion, InteractionDrift, MomentFunctional};
use crate::error::{Error, Result};
use crate::field::{pair_values, DensityField, Field, SignedField};
use crate::grid::Grid1D;
use crate::tridiagonal::Tridiagonal;

/// Largest RK4 step of the flow integrator.
pub const MAX_FLOW_STEP: f64 = 1e-3;

const CACHE_CAPACITY: usize = 4096;

/// Natural cubic spline on a uniform grid, extended by constants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spline {
    grid: Grid1D,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl Spline {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() || grid.len() < 3 {
            return Err(Error::InvalidInput(
                "spline needs one value per node and at least 3 nodes".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("spline values must be finite".into()));
        }
        let n = values.len();
        let h = grid.spacing();
        let mut system = Tridiagonal {
            lower: vec![1.0; n - 1],
            diag: vec![4.0; n],
            upper: vec![1.0; n - 1],
        };
        system.diag[0] = 1.0;
        system.diag[n - 1] = 1.0;
        system.upper[0] = 0.0;
        system.lower[n - 2] = 0.0;
        let mut rhs = vec![0.0; n];
        for i in 1..n - 1 {
            rhs[i] = 6.0 * (values[i + 1] - 2.0 * values[i] + values[i - 1]) / (h * h);
        }
        let second = system.solve(&rhs)?;
        Ok(Self {
            grid,
            values,
            second,
        })
    }

    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        if x < self.grid.x_min() || x > self.grid.x_max() {
            return None;
        }
        let h = self.grid.spacing();
        let i = (((x - self.grid.x_min()) / h).floor() as usize).min(self.grid.len() - 2);
        Some((i, x - self.grid.x(i)))
    }

    /// Value and first two derivatives.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let h = self.grid.spacing();
        match self.locate(x) {
            None => {
                let v = if x < self.grid.x_min() {
                    self.values[0]
                } else {
                    *self.values.last().expect("nonempty")
                };
                (v, 0.0, 0.0)
            }
            Some((i, s)) => {
                let (y0, y1) = (self.values[i], self.values[i + 1]);
                let (m0, m1) = (self.second[i], self.second[i + 1]);
                let a = (m1 - m0) / (6.0 * h);
                let b = 0.5 * m0;
                let c = (y1 - y0) / h - h * (2.0 * m0 + m1) / 6.0;
                (
                    y0 + s * (c + s * (b + s * a)),
                    c + s * (2.0 * b + 3.0 * a * s),
                    2.0 * b + 6.0 * a * s,
                )
            }
        }
    }
}

/// Common noise vector field `σ_com`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CommonNoise {
    Zero,
    /// `σ(x) = c`.
    Constant(f64),
    /// `σ(x) = c·x`.
    Linear(f64),
    /// `σ(x) = c·x/(1 + x²)`.
    BoundedOdd(f64),
    /// `σ(x) = c·sin x`.
    Sine(f64),
    Tabulated(Spline),
}

impl CommonNoise {
    /// `(σ, σ', σ'')` at `x`.
    pub fn derivatives(&self, x: f64) -> (f64, f64, f64) {
        match self {
            CommonNoise::Zero => (0.0, 0.0, 0.0),
            CommonNoise::Constant(c) => (*c, 0.0, 0.0),
            CommonNoise::Linear(c) => (c * x, *c, 0.0),
            CommonNoise::BoundedOdd(c) => {
                let d = 1.0 + x * x;
                (
                    c * x / d,
                    c * (1.0 - x * x) / (d * d),
                    c * 2.0 * x * (x * x - 3.0) / (d * d * d),
                )
            }
            CommonNoise::Sine(c) => (c * x.sin(), c * x.cos(), -c * x.sin()),
            CommonNoise::Tabulated(s) => s.eval(x),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.derivatives(x).0
    }

    /// `B(x) = −σ'(x)`.
    pub fn divergence_gain(&self, x: f64) -> f64 {
        -self.derivatives(x).1
    }

    /// Stratonovich-to-Itô correction `½ σ σ'`.
    pub fn correction(&self, x: f64) -> f64 {
        let (s, d, _) = self.derivatives(x);
        0.5 * s * d
    }

    /// `Some(c)` when the field is constant (flow is a translation).
    pub fn as_constant(&self) -> Option<f64> {
        match self {
            CommonNoise::Zero => Some(0.0),
            CommonNoise::Constant(c) => Some(*c),
            CommonNoise::Linear(c) | CommonNoise::BoundedOdd(c) | CommonNoise::Sine(c)
                if *c == 0.0 =>
            {
                Some(0.0)
            }
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_constant() == Some(0.0)
    }
}

/// `Z(t, x)` with `∂Z/∂x`, `∂²Z/∂x²` and `log G(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowPoint {
    pub z: f64,
    pub dz: f64,
    pub d2z: f64,
    pub log_gain: f64,
}

impl FlowPoint {
    pub fn identity(x: f64) -> Self {
        Self {
            z: x,
            dz: 1.0,
            d2z: 0.0,
            log_gain: 0.0,
        }
    }

    pub fn gain(&self) -> f64 {
        self.log_gain.exp()
    }
}

/// Off-grid evaluation used by [`FlowMap::conjugate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Interpolation {
    Linear,
    /// Monotone piecewise cubic (Fritsch-Carlson); keeps nonnegative data
    /// nonnegative.
    Cubic,
}

/// Direction of [`FlowMap::conjugate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// `v ↦ G(w, x) v(Z(w, x))`.
    Forward,
    /// `v ↦ G(−w, x) v(Z(−w, x))`, the group inverse of `Forward`.
    Inverse,
}

/// Flow at every node of a grid for `±w`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridFlow {
    pub w: f64,
    /// `Z(w, x_i)` and derivatives.
    pub forward: Vec<FlowPoint>,
    /// `Z(−w, x_i)` and derivatives.
    pub inverse: Vec<FlowPoint>,
}

type CacheKey = (u64, u64, u64, usize);

/// Flow of `−σ_com` with on-demand evaluation and a per-`(w, grid)` cache.
pub struct FlowMap {
    noise: CommonNoise,
    step: f64,
    bounds: (f64, f64),
    interpolation: Interpolation,
    cache: RwLock<HashMap<CacheKey, Arc<GridFlow>>>,
}

impl std::fmt::Debug for FlowMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowMap")
            .field("noise", &self.noise)
            .field("step", &self.step)
            .field("bounds", &self.bounds)
            .field("interpolation", &self.interpolation)
            .finish()
    }
}

impl Clone for FlowMap {
    fn clone(&self) -> Self {
        Self {
            noise: self.noise.clone(),
            step: self.step,
            bounds: self.bounds,
            interpolation: self.interpolation,
            cache: RwLock::new(HashMap::new()),
        }
    }
}

impl FlowMap {
    /// Flow with step `MAX_FLOW_STEP`, admissible box `[−10⁶, 10⁶]` and
    /// cubic interpolation.
    pub fn new(noise: CommonNoise) -> Self {
        Self {
            noise,
            step: MAX_FLOW_STEP,
            bounds: (-1e6, 1e6),
            interpolation: Interpolation::Cubic,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::InvalidInput(format!(
                "flow box must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        self.bounds = (lo, hi);
        Ok(self)
    }

    pub fn with_step(mut self, step: f64) -> Result<Self> {
        if !(step > 0.0 && step <= MAX_FLOW_STEP) {
            return Err(Error::InvalidInput(format!(
                "flow step must lie in (0, {MAX_FLOW_STEP}], got {step}"
            )));
        }
        self.step = step;
        Ok(self)
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    pub fn noise(&self) -> &CommonNoise {
        &self.noise
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    fn rhs(&self, s: [f64; 4]) -> [f64; 4] {
        let (v, d1, d2) = self.noise.derivatives(s[0]);
        [-v, -d1 * s[1], -d2 * s[1] * s[1] - d1 * s[2], -d1]
    }

    /// Continues the flow from `start` for signed time `t`.
    pub fn advance(&self, start: FlowPoint, t: f64) -> Result<FlowPoint> {
        if !t.is_finite() {
            return Err(Error::InvalidInput(format!(
                "flow time must be finite, got {t}"
            )));
        }
        if let Some(c) = self.noise.as_constant() {
            let p = FlowPoint {
                z: start.z - c * t,
                ..start
            };
            return self.check_box(p, start.z, t);
        }
        if let CommonNoise::Linear(c) = self.noise {
            let e = (-c * t).exp();
            let p = FlowPoint {
                z: start.z * e,
                dz: start.dz * e,
                d2z: start.d2z * e,
                log_gain: start.log_gain - c * t,
            };
            if p.z < self.bounds.0 || p.z > self.bounds.1 {
                let edge = if p.z > self.bounds.1 {
                    self.bounds.1
                } else {
                    self.bounds.0
                };
                return Err(Error::FlowExit {
                    start: start.z,
                    time: -(edge / start.z).ln() / c,
                    lo: self.bounds.0,
                    hi: self.bounds.1,
                });
            }
            return Ok(p);
        }
        let steps = (t.abs() / self.step).ceil().max(1.0) as usize;
        let h = t / steps as f64;
        let mut s = [start.z, start.dz, start.d2z, start.log_gain];
        for k in 0..steps {
            let k1 = self.rhs(s);
            let k2 = self.rhs(add(s, k1, 0.5 * h));
            let k3 = self.rhs(add(s, k2, 0.5 * h));
            let k4 = self.rhs(add(s, k3, h));
            for i in 0..4 {
                s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if !(s[0] >= self.bounds.0 && s[0] <= self.bounds.1) || s.iter().any(|v| !v.is_finite())
            {
                return Err(Error::FlowExit {
                    start: start.z,
                    time: (k + 1) as f64 * h,
                    lo: self.bounds.0,
                    hi: self.bounds.1,
                });
            }
        }
        Ok(FlowPoint {
            z: s[0],
            dz: s[1],
            d2z: s[2],
            log_gain: s[3],
        })
    }

    fn check_box(&self, p: FlowPoint, start: f64, t: f64) -> Result<FlowPoint> {
        if p.z < self.bounds.0 || p.z > self.bounds.1 {
            return Err(Error::FlowExit {
                start,
                time: t,
                lo: self.bounds.0,
                hi: self.bounds.1,
            });
        }
        Ok(p)
    }

    /// `(Z, ∂Z/∂x, ∂²Z/∂x², log G)` at signed time `t`.
    pub fn flow_solve(&self, t: f64, x: f64) -> Result<FlowPoint> {
        self.advance(FlowPoint::identity(x), t)
    }

    /// `G(t, x) = exp ∫₀ᵗ B(Z(s, x)) ds`.
    pub fn gain(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.flow_solve(t, x)?.gain())
    }

    /// Flow at all nodes for `±w`, cached per `(w, grid)`.
    pub fn grid_flow(&self, w: f64, grid: &Grid1D) -> Result<Arc<GridFlow>> {
        let key = (
            w.to_bits(),
            grid.x_min().to_bits(),
            grid.x_max().to_bits(),
            grid.len(),
        );
        if let Some(hit) = self.cache.read().expect("flow cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let nodes = grid.nodes();
        let forward = nodes
            .iter()
            .map(|x| self.flow_solve(w, *x))
            .collect::<Result<Vec<_>>>()?;
        let inverse = nodes
            .iter()
            .map(|x| self.flow_solve(-w, *x))
            .collect::<Result<Vec<_>>>()?;
        let out = Arc::new(GridFlow {
            w,
            forward,
            inverse,
        });
        let mut cache = self.cache.write().expect("flow cache poisoned");
        if cache.len() >= CACHE_CAPACITY {
            cache.clear();
        }
        cache.insert(key, out.clone());
        Ok(out)
    }

    /// `G(±w, x) v(Z(±w, x))` on raw node values, given the grid flow.
    pub fn conjugate_with(
        &self,
        grid: &Grid1D,
        values: &[f64],
        flow: &GridFlow,
        direction: Direction,
    ) -> Vec<f64> {
        let points = match direction {
            Direction::Forward => &flow.forward,
            Direction::Inverse => &flow.inverse,
        };
        transport(grid, values, points, self.interpolation)
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    /// Transport of a density by `e^{±wΩ'}`; off-grid values by
    /// interpolation, constant extension outside the grid.
    pub fn conjugate(
        &self,
        v: &DensityField,
        w: f64,
        direction: Direction,
    ) -> Result<DensityField> {
        if w == 0.0 || self.noise.is_zero() {
            return Ok(v.clone());
        }
        let flow = self.grid_flow(w, v.grid())?;
        let values = self.conjugate_with(v.grid(), v.values(), &flow, direction);
        DensityField::new(*v.grid(), values, v.time())
    }

    pub fn conjugate_signed(
        &self,
        v: &SignedField,
        w: f64,
        direction: Direction,
    ) -> Result<SignedField> {
        if w == 0.0 || self.noise.is_zero() {
            return Ok(v.clone());
        }
        let flow = self.grid_flow(w, v.grid())?;
        let values = self.conjugate_with(v.grid(), v.values(), &flow, direction);
        SignedField::new(*v.grid(), values, v.time())
    }
}

/// `G v(z)` at each flow point, with `v` interpolated from node values.
pub(crate) fn transport(
    grid: &Grid1D,
    values: &[f64],
    points: &[FlowPoint],
    interpolation: Interpolation,
) -> Vec<f64> {
    let interp = Interpolant::new(grid, values, interpolation);
    points.iter().map(|p| p.gain() * interp.eval(p.z)).collect()
}

fn add(s: [f64; 4], k: [f64; 4], h: f64) -> [f64; 4] {
    [
        s[0] + h * k[0],
        s[1] + h * k[1],
        s[2] + h * k[2],
        s[3] + h * k[3],
    ]
}

/// Incremental flow at grid nodes for a moving noise value: the group
/// property `Z(w', x) = Z(w' − w, Z(w, x))` continues each node from its
/// current state, so a Brownian path costs `Σ|ΔW|` rather than `Σ|W|` of
/// integration time.
#[derive(Debug, Clone)]
pub struct FlowTracker {
    grid: Grid1D,
    current: GridFlow,
}

impl FlowTracker {
    pub fn new(grid: Grid1D) -> Self {
        let identity: Vec<FlowPoint> = grid.nodes().into_iter().map(FlowPoint::identity).collect();
        Self {
            grid,
            current: GridFlow {
                w: 0.0,
                forward: identity.clone(),
                inverse: identity,
            },
        }
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn current(&self) -> &GridFlow {
        &self.current
    }

    pub fn advance_to(&mut self, flow: &FlowMap, w: f64) -> Result<&GridFlow> {
        let dw = w - self.current.w;
        if dw != 0.0 {
            for p in self.current.forward.iter_mut() {
                *p = flow.advance(*p, dw)?;
            }
            for p in self.current.inverse.iter_mut() {
                *p = flow.advance(*p, -dw)?;
            }
            self.current.w = w;
        }
        Ok(&self.current)
    }
}

struct Interpolant<'a> {
    grid: &'a Grid1D,
    values: &'a [f64],
    slopes: Option<Vec<f64>>,
}

impl<'a> Interpolant<'a> {
    fn new(grid: &'a Grid1D, values: &'a [f64], kind: Interpolation) -> Self {
        let slopes = match kind {
            Interpolation::Linear => None,
            Interpolation::Cubic => Some(monotone_slopes(grid.spacing(), values)),
        };
        Self {
            grid,
            values,
            slopes,
        }
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        if x <= self.grid.x_min() {
            return self.values[0];
        }
        if x >= self.grid.x_max() {
            return self.values[n - 1];
        }
        let h = self.grid.spacing();
        let u = (x - self.grid.x_min()) / h;
        let i = (u.floor() as usize).min(n - 2);
        let s = u - i as f64;
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        match &self.slopes {
            None => y0 + s * (y1 - y0),
            Some(d) => {
                let s2 = s * s;
                let s3 = s2 * s;
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                h00 * y0 + h10 * h * d[i] + h01 * y1 + h11 * h * d[i + 1]
            }
        }
    }
}

// Fritsch-Carlson slopes on a uniform grid.
fn monotone_slopes(h: f64, y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h).collect();
    let mut d = vec![0.0; n];
    d[0] = delta[0];
    d[n - 1] = delta[n - 2];
    for i in 1..n - 1 {
        let (a, b) = (delta[i - 1], delta[i]);
        d[i] = if a * b <= 0.0 {
            0.0
        } else {
            2.0 / (1.0 / a + 1.0 / b)
        };
    }
    // Keep the end slopes from overshooting.
    for (i, di) in [(0usize, 0usize), (n - 1, n - 2)] {
        if d[i] * delta[di] <= 0.0 {
            d[i] = 0.0;
        } else if d[i].abs() > 3.0 * delta[di].abs() {
            d[i] = 3.0 * delta[di];
        }
    }
    d
}

/// Coefficients of the transformed equation
/// `ġ = ½(Ãg)'' − (b̃ g)'` at a fixed noise value `w`, on grid nodes.
///
/// With `z_i = Z(−w, x_i)` and `Z' = ∂Z(w, z)/∂z`, `Z'' = ∂²Z(w, z)/∂z²` at `z_i`:
/// `Ã = a(z) Z'²` and
/// `b̃ = (β(t, z, s) − ½σσ'(z)) Z' + ½ a(z) Z''`, where `a = σ_ind²` and the
/// moments `s_j = (g_j, e^{wΩ'} g) = (g_j ∘ Z(−w, ·), g)` are taken against
/// the dressed kernels.
#[derive(Debug, Clone, Serialize)]
pub struct DressedCoefficients {
    pub w: f64,
    /// `Ã` at nodes.
    pub diffusion: Vec<f64>,
    /// `z_i = Z(−w, x_i)`.
    pub origins: Vec<f64>,
    /// `∂Z(w, z)/∂z` at `z_i`.
    pub jacobian: Vec<f64>,
    /// Noise-induced part of `b̃`: `−½σσ'(z)Z' + ½a(z)Z''`.
    pub base_drift: Vec<f64>,
    /// `g_j(z_i)`, indexed `[j][i]`.
    pub kernels: Vec<Vec<f64>>,
}

/// Dresses `σ_ind² = diffusion` and the drift kernels by the flow at `w`.
pub fn dress(
    diffusion: &Diffusion,
    drift: &InteractionDrift,
    noise: &CommonNoise,
    flow: &GridFlow,
) -> Result<DressedCoefficients> {
    let n = flow.inverse.len();
    let mut out = DressedCoefficients {
        w: flow.w,
        diffusion: Vec::with_capacity(n),
        origins: Vec::with_capacity(n),
        jacobian: Vec::with_capacity(n),
        base_drift: Vec::with_capacity(n),
        kernels: vec![Vec::with_capacity(n); drift.0.arity()],
    };
    for (i, p) in flow.inverse.iter().enumerate() {
        if !(p.dz > 0.0 && p.dz.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("flow Jacobian {} at w = {}", p.dz, flow.w),
                index: i,
            });
        }
        // Z(w, ·) inverts Z(−w, ·).
        let zp = 1.0 / p.dz;
        let zpp = -p.d2z / p.dz.powi(3);
        let a = diffusion.eval(p.z);
        out.diffusion.push(a * zp * zp);
        out.origins.push(p.z);
        out.jacobian.push(zp);
        out.base_drift
            .push(-noise.correction(p.z) * zp + 0.5 * a * zpp);
        for (k, g) in out.kernels.iter_mut().zip(drift.0.kernels()) {
            k.push(g.eval(p.z));
        }
    }
    Ok(out)
}

impl DressedCoefficients {
    /// Moments `s_j` of the undressed state for a dressed density `g`.
    pub fn moments(&self, grid: &Grid1D, g: &[f64]) -> Vec<f64> {
        MomentFunctional::moments_with(grid, &self.kernels, g)
    }

    /// `b̃` at nodes for moments `s`.
    pub fn drift(&self, t: f64, drift: &InteractionDrift, s: &[f64]) -> Result<Vec<f64>> {
        let outer = drift.0.outer();
        let out: Vec<f64> = (0..self.origins.len())
            .map(|i| outer.value(t, self.origins[i], s) * self.jacobian[i] + self.base_drift[i])
            .collect();
        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "dressed drift".into(),
                index,
            });
        }
        Ok(out)
    }

    /// `∂b̃/∂s_j` at nodes, indexed `[j][i]`.
    pub fn drift_gradients(&self, t: f64, drift: &InteractionDrift, s: &[f64]) -> Vec<Vec<f64>> {
        let m = drift.0.arity();
        let outer = drift.0.outer();
        let mut out = vec![vec![0.0; self.origins.len()]; m];
        let mut buf = vec![0.0; m];
        for i in 0..self.origins.len() {
            outer.gradient(t, self.origins[i], s, &mut buf);
            for j in 0..m {
                out[j][i] = buf[j] * self.jacobian[i];
            }
        }
        out
    }

    /// Node Hessians of `b̃` in `s`; `None` when unavailable.
    pub fn drift_hessians(
        &self,
        t: f64,
        drift: &InteractionDrift,
        s: &[f64],
    ) -> Option<Vec<Vec<f64>>> {
        let m = drift.0.arity();
        let outer = drift.0.outer();
        let mut out = Vec::with_capacity(self.origins.len());
        for i in 0..self.origins.len() {
            let mut h = vec![0.0; m * m];
            if !outer.hessian(t, self.origins[i], s, &mut h) {
                return None;
            }
            h.iter_mut().for_each(|v| *v *= self.jacobian[i]);
            out.push(h);
        }
        Some(out)
    }

    /// `(min Ã, max Ã)`.
    pub fn ellipticity(&self) -> (f64, f64) {
        self.diffusion
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), a| {
                (lo.min(*a), hi.max(*a))
            })
    }
}

/// Pairing of a density with the dressed kernels (for callers holding only
/// node values).
pub fn dressed_pairing(grid: &Grid1D, kernel: &[f64], g: &[f64]) -> f64 {
    pair_values(grid, kernel, g)
}

/// Fitted `C` of a bound `value(w) ≤ C e^{C|w|}` (smallest `C`, by bisection).
pub fn exponential_bound_constant(samples: &[(f64, f64)]) -> f64 {
    let holds = |c: f64| samples.iter().all(|(w, v)| *v <= c * (c * w.abs()).exp());
    let mut hi = 1.0;
    while !holds(hi) {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// `sup_x |∂Z/∂x(w, x)| + |∂²Z/∂x²(w, x)|` over `xs` for each `w`.
pub fn jacobian_sups(flow: &FlowMap, ws: &[f64], xs: &[f64]) -> Result<Vec<(f64, f64)>> {
    ws.iter()
        .map(|w| {
            let mut sup: f64 = 0.0;
            for x in xs {
                let p = flow.flow_solve(*w, *x)?;
                sup = sup.max(p.dz.abs() + p.d2z.abs());
            }
            Ok((*w, sup))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{l1_distance, l1_norm};

    fn sine() -> FlowMap {
        FlowMap::new(CommonNoise::Sine(1.0))
    }

    #[test]
    fn constant_field_translates() {
        let f = FlowMap::new(CommonNoise::Constant(1.0));
        let p = f.flow_solve(0.7, 2.0).unwrap();
        assert_eq!((p.z, p.dz, p.d2z, p.gain()), (1.3, 1.0, 0.0, 1.0));
    }

    #[test]
    fn linear_field_contracts_exponentially() {
        let f = FlowMap::new(CommonNoise::Linear(1.0));
        for t in [-1.0, -0.3, 0.5, 1.0] {
            let p = f.flow_solve(t, 1.5).unwrap();
            assert!((p.z - 1.5 * (-t).exp()).abs() < 1e-12);
            assert!((p.dz - (-t).exp()).abs() < 1e-12);
            assert!((p.gain() - (-t).exp()).abs() < 1e-12);
            assert!(p.d2z.abs() < 1e-14);
        }
    }

    #[test]
    fn sine_jacobian_matches_finite_differences() {
        let f = sine();
        let e = 1e-4;
        for x in [-2.0, -0.4, 0.3, 1.2, 2.9] {
            for t in [-1.0, 0.6, 1.0] {
                let p = f.flow_solve(t, x).unwrap();
                let up = f.flow_solve(t, x + e).unwrap();
                let dn = f.flow_solve(t, x - e).unwrap();
                assert!((p.dz - (up.z - dn.z) / (2.0 * e)).abs() < 1e-6);
                assert!((p.d2z - (up.dz - dn.dz) / (2.0 * e)).abs() < 1e-6);
                // G = ∂Z/∂x in one dimension.
                assert!((p.gain() - p.dz).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn group_property_and_gain_inversion() {
        for noise in [
            CommonNoise::Constant(1.0),
            CommonNoise::Linear(1.0),
            CommonNoise::Sine(1.0),
        ] {
            let f = FlowMap::new(noise);
            for (t, s) in [(0.4, 0.5), (-0.7, 0.3), (1.0, -1.0), (-0.25, -0.6)] {
                for x in [-1.5, 0.2, 2.0] {
                    let direct = f.flow_solve(t + s, x).unwrap().z;
                    let composed = f.flow_solve(t, f.flow_solve(s, x).unwrap().z).unwrap().z;
                    assert!((direct - composed).abs() < 1e-8);
                    let back = f.flow_solve(-t, x).unwrap();
                    let g = f.gain(-t, x).unwrap() * f.gain(t, back.z).unwrap();
                    assert!((g - 1.0).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn flow_exit_is_reported() {
        let f = FlowMap::new(CommonNoise::Linear(1.0))
            .with_bounds(-5.0, 5.0)
            .unwrap();
        match f.flow_solve(-3.0, 1.0) {
            Err(Error::FlowExit { time, .. }) => assert!(time < -1.5 && time > -1.7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conjugation_preserves_mass_and_inverts() {
        let g = Grid1D::new(-10.0, 10.0, 2001).unwrap();
        let v = DensityField::gaussian(g, 0.3, 0.8, 1.0).unwrap();
        let f = sine();
        for w in [-0.8, 0.5, 1.0] {
            let fw = f.conjugate(&v, w, Direction::Forward).unwrap();
            assert!((fw.mass() - 1.0).abs() < 1e-5);
            let back = f.conjugate(&fw, w, Direction::Inverse).unwrap();
            let e = l1_distance(&back, &v).unwrap();
            assert!(e < 1e-5);
        }
        assert_eq!(f.conjugate(&v, 0.0, Direction::Forward).unwrap(), v);
    }

    #[test]
    fn tracker_agrees_with_direct_solves() {
        let g = Grid1D::new(-3.0, 3.0, 31).unwrap();
        let f = sine();
        let mut tr = FlowTracker::new(g);
        for w in [0.1, -0.2, 0.35, 0.9] {
            tr.advance_to(&f, w).unwrap();
        }
        let direct = f.grid_flow(0.9, &g).unwrap();
        for (a, b) in tr
            .current()
            .forward
            .iter()
            .zip(&direct.forward)
            .chain(tr.current().inverse.iter().zip(&direct.inverse))
        {
            assert!((a.z - b.z).abs() < 1e-10);
            assert!((a.dz - b.dz).abs() < 1e-9);
            assert!((a.d2z - b.d2z).abs() < 1e-9);
        }
    }

    #[test]
    fn dressing_at_zero_noise_is_the_stratonovich_drift() {
        let g = Grid1D::new(-3.0, 3.0, 31).unwrap();
        let f = sine();
        let flow = f.grid_flow(0.0, &g).unwrap();
        let drift = InteractionDrift::mean_reversion(1.0);
        let d = dress(&Diffusion::constant(1.0).unwrap(), &drift, f.noise(), &flow).unwrap();
        let b = d.drift(0.0, &drift, &[0.2]).unwrap();
        for i in 0..g.len() {
            let x = g.x(i);
            assert_eq!(d.diffusion[i], 1.0);
            assert!((b[i] - (-(x - 0.2) - 0.5 * x.sin() * x.cos())).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_noise_dressing_scales_diffusion() {
        let g = Grid1D::new(-3.0, 3.0, 31).unwrap();
        let f = FlowMap::new(CommonNoise::Linear(1.0));
        let sigma2 = 0.64;
        for w in [-0.7, 0.4] {
            let flow = f.grid_flow(w, &g).unwrap();
            let d = dress(
                &Diffusion::constant(sigma2).unwrap(),
                &InteractionDrift::none(),
                f.noise(),
                &flow,
            )
            .unwrap();
            for a in &d.diffusion {
                assert!((a - sigma2 * (-2.0 * w).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_noise_dressing_shifts_coefficients() {
        let g = Grid1D::new(-3.0, 3.0, 31).unwrap();
        let f = FlowMap::new(CommonNoise::Constant(0.5));
        let flow = f.grid_flow(0.8, &g).unwrap();
        let diff = Diffusion::sin_squared(1.0, 0.3).unwrap();
        let drift = InteractionDrift::mean_reversion(1.0);
        let d = dress(&diff, &drift, f.noise(), &flow).unwrap();
        let b = d.drift(0.0, &drift, &[0.0]).unwrap();
        for i in 0..g.len() {
            // Z(−w, x) = x + c w.
            let z = g.x(i) + 0.4;
            assert!((d.diffusion[i] - diff.eval(z)).abs() < 1e-14);
            assert!((b[i] + z).abs() < 1e-14);
        }
    }

    #[test]
    fn spline_reproduces_cubic_data_derivatives() {
        let g = Grid1D::new(-2.0, 2.0, 81).unwrap();
        let s = Spline::new(g, g.sample(|x| x.sin())).unwrap();
        let (v, d, dd) = s.eval(0.37);
        assert!((v - 0.37f64.sin()).abs() < 1e-6);
        assert!((d - 0.37f64.cos()).abs() < 1e-4);
        assert!((dd + 0.37f64.sin()).abs() < 1e-2);
        let tab = FlowMap::new(CommonNoise::Tabulated(s));
        let p = tab.flow_solve(0.5, 0.3).unwrap();
        let q = sine().flow_solve(0.5, 0.3).unwrap();
        assert!((p.z - q.z).abs() < 1e-5);
    }

    #[test]
    fn bounded_odd_jacobians_grow_at_most_exponentially() {
        let f = FlowMap::new(CommonNoise::BoundedOdd(1.0));
        let ws: Vec<f64> = (-10..=10).map(|k| 0.5 * k as f64).collect();
        let xs: Vec<f64> = (-40..=40).map(|k| 0.1 * k as f64).collect();
        let sups = jacobian_sups(&f, &ws, &xs).unwrap();
        let c = exponential_bound_constant(&sups);
        assert!(c < 3.0, "{c}");
        // Far from the hyperbolic zero the field is nearly flat and J ≈ 1.
        assert!((f.flow_solve(5.0, 30.0).unwrap().dz - 1.0).abs() < 1e-2);
    }

    #[test]
    fn monotone_interpolation_keeps_densities_nonnegative() {
        let g = Grid1D::new(-5.0, 5.0, 51).unwrap();
        let v =
            DensityField::new(g, g.sample(|x| if x.abs() < 1.0 { 1.0 } else { 0.0 }), 0.0).unwrap();
        let f = sine();
        let out = f.conjugate(&v, 0.7, Direction::Forward).unwrap();
        assert!(out.min_value() >= 0.0);
        assert!((l1_norm(&out) - l1_norm(&v)).abs() < 0.05);
    }
}
