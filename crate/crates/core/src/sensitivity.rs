//! Variational derivatives of the solution map `Y ↦ φ_t` with respect to
//! the initial density.
//!
//! The first variation `ξ_t(x; ·)` is the response to a (mollified) point
//! mass added at `x`; it solves the equation linearized around `φ`,
//!
//! ```text
//! ∂ξ = ½(Aξ)'' − (bξ + (δb·ξ)φ)' + Vξ + (δV·ξ)φ,    ξ_0 = δ̃_x,
//! ```
//!
//! with `(δb·ξ)(y) = Σ_j ∂_jβ(y) (g_j, ξ)`. The second variation `η_t(x, z; ·)`
//! solves the same linear equation from zero with the source `q` obtained by
//! differentiating the nonlinearity twice.
//!
//! Both are computed on the discretization used by [`MildSolver`], so they
//! are the exact derivatives of the discrete solution map.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::CoefficientBounds;
use crate::error::{Error, Result};
use crate::field::{
    l1_distance_values, l1_values, mollified_delta_values, DensityField, Field, SignedField,
};
use crate::grid::{Grid1D, TimeGrid};
use crate::kernels::{central_difference, HeatKernel};
use crate::mild::{MildSolver, SolutionPath};
use crate::mittag_leffler::mittag_leffler_half;
use crate::tridiagonal::{dot, LowRankSystem, Tridiagonal};

/// Iterate cap for the linear Picard loops.
pub const MAX_LINEAR_ITERATIONS: usize = 300;

// Inner fixed-point solves of a single implicit step stop at this relative
// L¹ change.
const STEP_TOLERANCE: f64 = 1e-15;

/// Coefficients of the linearized equation on one time cell, frozen at the
/// background midpoint.
#[derive(Debug, Clone)]
pub(crate) struct LinearData {
    pub drift: Vec<f64>,
    pub potential: Vec<f64>,
    pub background: Vec<f64>,
    // ∂_jβ(x_i) φ(x_i), indexed [j][i]; likewise for V
    drift_coupling: Vec<Vec<f64>>,
    potential_coupling: Vec<Vec<f64>>,
    // ∂_jβ(x_i) without the background factor
    drift_grad: Vec<Vec<f64>>,
    potential_grad: Vec<Vec<f64>>,
    // quadrature weights times kernel samples: (g_j, ξ) = wg_j · ξ
    drift_kernels: Vec<Vec<f64>>,
    potential_kernels: Vec<Vec<f64>>,
    drift_hess: Option<Vec<Vec<f64>>>,
    potential_hess: Option<Vec<Vec<f64>>>,
}

impl LinearData {
    /// Assembles the data from node values of `b`, `V`, their moment
    /// gradients and Hessians, the kernel samples and the background.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        grid: &Grid1D,
        drift: Vec<f64>,
        potential: Vec<f64>,
        background: Vec<f64>,
        drift_grad: Vec<Vec<f64>>,
        potential_grad: Vec<Vec<f64>>,
        drift_kernels: &[Vec<f64>],
        potential_kernels: &[Vec<f64>],
        drift_hess: Option<Vec<Vec<f64>>>,
        potential_hess: Option<Vec<Vec<f64>>>,
    ) -> Self {
        let w = grid.weights();
        let weighted = |ks: &[Vec<f64>]| -> Vec<Vec<f64>> {
            ks.iter()
                .map(|g| g.iter().zip(&w).map(|(a, b)| a * b).collect())
                .collect()
        };
        let couple = |gs: &[Vec<f64>]| -> Vec<Vec<f64>> {
            gs.iter()
                .map(|a| a.iter().zip(&background).map(|(x, y)| x * y).collect())
                .collect()
        };
        Self {
            drift_coupling: couple(&drift_grad),
            potential_coupling: couple(&potential_grad),
            drift_kernels: weighted(drift_kernels),
            potential_kernels: weighted(potential_kernels),
            drift,
            potential,
            background,
            drift_grad,
            potential_grad,
            drift_hess,
            potential_hess,
        }
    }

    fn from_solver(solver: &MildSolver, t: f64, mid: &[f64]) -> Result<Self> {
        let grid = *solver.grid();
        let frozen = solver.frozen(t, mid)?;
        let coeffs = solver.coefficients();
        let b = &coeffs.drift.0;
        let v = &coeffs.potential.0;
        Ok(Self::new(
            &grid,
            frozen.drift,
            frozen.potential,
            mid.to_vec(),
            b.gradients_with_moments(t, &grid, &frozen.drift_moments),
            v.gradients_with_moments(t, &grid, &frozen.potential_moments),
            solver.drift_kernels(),
            solver.potential_kernels(),
            b.hessians_with_moments(t, &grid, &frozen.drift_moments),
            v.hessians_with_moments(t, &grid, &frozen.potential_moments),
        ))
    }

    /// Linearized flux `bξ + (δb·ξ)φ`.
    fn flux(&self, x: &[f64]) -> Vec<f64> {
        low_rank_apply(&self.drift, &self.drift_coupling, &self.drift_kernels, x)
    }

    /// Linearized killing term `Vξ + (δV·ξ)φ`.
    fn killing(&self, x: &[f64]) -> Vec<f64> {
        low_rank_apply(
            &self.potential,
            &self.potential_coupling,
            &self.potential_kernels,
            x,
        )
    }

    fn flux_transpose(&self, y: &[f64]) -> Vec<f64> {
        low_rank_apply(&self.drift, &self.drift_kernels, &self.drift_coupling, y)
    }

    fn killing_transpose(&self, y: &[f64]) -> Vec<f64> {
        low_rank_apply(
            &self.potential,
            &self.potential_kernels,
            &self.potential_coupling,
            y,
        )
    }

    fn has_potential(&self) -> bool {
        self.potential.iter().any(|v| *v != 0.0) || !self.potential_kernels.is_empty()
    }

    /// Second derivative of the nonlinearity in directions `(xa, xb)`, split
    /// into killing and flux parts.
    fn second_order(&self, xa: &[f64], xb: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let q_b = second_order_part(
            &self.drift_grad,
            &self.drift_kernels,
            self.drift_hess.as_deref(),
            &self.background,
            xa,
            xb,
        )?;
        let q_v = second_order_part(
            &self.potential_grad,
            &self.potential_kernels,
            self.potential_hess.as_deref(),
            &self.background,
            xa,
            xb,
        )?;
        Ok((q_v, q_b))
    }
}

// diag∘x + Σ_j left_j (right_j · x)
fn low_rank_apply(diag: &[f64], left: &[Vec<f64>], right: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = diag.iter().zip(x).map(|(d, v)| d * v).collect();
    for (l, r) in left.iter().zip(right) {
        let c = dot(r, x);
        out.iter_mut().zip(l).for_each(|(o, li)| *o += c * li);
    }
    out
}

// Σ_j a_j[(g_j,xa) xb + (g_j,xb) xa] + φ Σ_jk H_jk (g_j,xa)(g_k,xb)
fn second_order_part(
    grad: &[Vec<f64>],
    kernels: &[Vec<f64>],
    hess: Option<&[Vec<f64>]>,
    background: &[f64],
    xa: &[f64],
    xb: &[f64],
) -> Result<Vec<f64>> {
    let n = xa.len();
    let m = kernels.len();
    let mut out = vec![0.0; n];
    if m == 0 {
        return Ok(out);
    }
    let ma: Vec<f64> = kernels.iter().map(|g| dot(g, xa)).collect();
    let mb: Vec<f64> = kernels.iter().map(|g| dot(g, xb)).collect();
    for j in 0..m {
        for i in 0..n {
            out[i] += grad[j][i] * (ma[j] * xb[i] + mb[j] * xa[i]);
        }
    }
    let hess = hess.ok_or_else(|| {
        Error::Config("coefficient does not provide second variational derivatives".into())
    })?;
    for i in 0..n {
        let h = &hess[i];
        let mut c = 0.0;
        for j in 0..m {
            for k in 0..m {
                c += h[j * m + k] * ma[j] * mb[k];
            }
        }
        out[i] += c * background[i];
    }
    Ok(out)
}

/// One time step of a linearized scheme, `ξ_{k+1} = P ξ_k`.
pub(crate) trait StepMap: Send + Sync {
    /// `P x`.
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// `Pᵀ y` (plain transpose).
    fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>>;
    /// Contribution of a midpoint source `q_V − (q_b)'` to the step.
    fn inject(&self, q_v: &[f64], q_b: &[f64]) -> Result<Vec<f64>>;
    fn data(&self) -> &LinearData;
}

struct SpectralContext {
    kernel: HeatKernel,
    decay: Vec<f64>,
    phi1: Vec<f64>,
}

/// Step of the exponential midpoint scheme: with `H = e^{dt L₀}` and
/// `K x = ½[Ψ(kill x) − Ψ'(flux x)]`, `P = (I − K)⁻¹(H + K)`.
struct SpectralStep {
    ctx: Arc<SpectralContext>,
    data: LinearData,
}

impl SpectralStep {
    fn duhamel(&self, kill: &[f64], flux: &[f64]) -> Vec<f64> {
        let k = &self.ctx.kernel;
        let mut out = k.apply_multiplier(flux, &self.ctx.phi1, true, false);
        out.iter_mut().for_each(|v| *v = -*v);
        if self.data.has_potential() {
            let s = k.apply_multiplier(kill, &self.ctx.phi1, false, false);
            out.iter_mut().zip(s).for_each(|(o, v)| *o += v);
        }
        out
    }

    fn k(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.duhamel(&self.data.killing(x), &self.data.flux(x));
        out.iter_mut().for_each(|v| *v *= 0.5);
        out
    }

    fn k_transpose(&self, y: &[f64]) -> Vec<f64> {
        let k = &self.ctx.kernel;
        let f = k.apply_multiplier(y, &self.ctx.phi1, true, true);
        let mut out: Vec<f64> = self
            .data
            .flux_transpose(&f)
            .into_iter()
            .map(|v| -0.5 * v)
            .collect();
        if self.data.has_potential() {
            let s = k.apply_multiplier(y, &self.ctx.phi1, false, true);
            out.iter_mut()
                .zip(self.data.killing_transpose(&s))
                .for_each(|(o, v)| *o += 0.5 * v);
        }
        out
    }
}

// y = r + op(y) by fixed-point iteration.
fn fixed_point(r: &[f64], op: impl Fn(&[f64]) -> Vec<f64>) -> Result<Vec<f64>> {
    let mut y = r.to_vec();
    let mut residuals = Vec::new();
    for _ in 0..MAX_LINEAR_ITERATIONS {
        let next: Vec<f64> = op(&y).into_iter().zip(r).map(|(a, b)| a + b).collect();
        let change: f64 = next.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum();
        let size: f64 = next.iter().map(|v| v.abs()).sum();
        y = next;
        residuals.push(change);
        if !change.is_finite() {
            break;
        }
        if change <= STEP_TOLERANCE * size.max(1e-300) {
            return Ok(y);
        }
    }
    Err(Error::NonConvergence { residuals })
}

impl StepMap for SpectralStep {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut r = self
            .ctx
            .kernel
            .apply_multiplier(x, &self.ctx.decay, false, false);
        r.iter_mut().zip(self.k(x)).for_each(|(a, b)| *a += b);
        fixed_point(&r, |y| self.k(y))
    }

    fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        let z = fixed_point(y, |v| self.k_transpose(v))?;
        let mut out = self
            .ctx
            .kernel
            .apply_multiplier(&z, &self.ctx.decay, false, true);
        out.iter_mut()
            .zip(self.k_transpose(&z))
            .for_each(|(a, b)| *a += b);
        Ok(out)
    }

    fn inject(&self, q_v: &[f64], q_b: &[f64]) -> Result<Vec<f64>> {
        let r = self.duhamel(q_v, q_b);
        fixed_point(&r, |y| self.k(y))
    }

    fn data(&self) -> &LinearData {
        &self.data
    }
}

/// Three-point discretization of `u ↦ ½(a u)'' − (b u)' + v u`, zero outside
/// the grid.
pub(crate) fn generator(grid: &Grid1D, a: &[f64], b: &[f64], v: &[f64]) -> Tridiagonal {
    let n = grid.len();
    let h = grid.spacing();
    let h2 = h * h;
    Tridiagonal {
        lower: (1..n)
            .map(|i| 0.5 * a[i - 1] / h2 + b[i - 1] / (2.0 * h))
            .collect(),
        diag: (0..n).map(|i| -a[i] / h2 + v[i]).collect(),
        upper: (0..n - 1)
            .map(|i| 0.5 * a[i + 1] / h2 - b[i + 1] / (2.0 * h))
            .collect(),
    }
}

/// Crank-Nicolson step of `∂ξ = ½(aξ)'' − (flux ξ)' + kill ξ` with three-point
/// differences (zero outside the grid), coefficients frozen at the midpoint.
pub(crate) struct CnStep {
    data: LinearData,
    half_dt: f64,
    dt: f64,
    h: f64,
    operator: Tridiagonal,
    // low-rank part of L: Σ u_r v_rᵀ
    u: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    implicit: LowRankSystem,
    implicit_transpose: LowRankSystem,
}

impl CnStep {
    pub(crate) fn new(grid: &Grid1D, diffusion: &[f64], data: LinearData, dt: f64) -> Result<Self> {
        let h = grid.spacing();
        let operator = generator(grid, diffusion, &data.drift, &data.potential);
        let mut u = Vec::new();
        let mut v = Vec::new();
        for (c, g) in data.drift_coupling.iter().zip(&data.drift_kernels) {
            u.push(
                central_difference(grid, c)
                    .into_iter()
                    .map(|x| -x)
                    .collect::<Vec<_>>(),
            );
            v.push(g.clone());
        }
        for (c, g) in data.potential_coupling.iter().zip(&data.potential_kernels) {
            u.push(c.clone());
            v.push(g.clone());
        }
        let half_dt = 0.5 * dt;
        let m = operator.shifted_identity(-half_dt);
        let scaled_u: Vec<Vec<f64>> = u
            .iter()
            .map(|c| c.iter().map(|x| -half_dt * x).collect())
            .collect();
        let implicit = LowRankSystem::new(m.clone(), scaled_u.clone(), v.clone())?;
        let implicit_transpose = LowRankSystem::new(m.transpose(), v.clone(), scaled_u)?;
        Ok(Self {
            data,
            half_dt,
            dt,
            h,
            operator,
            u,
            v,
            implicit,
            implicit_transpose,
        })
    }

    fn explicit(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.operator.apply(x);
        for (u, v) in self.u.iter().zip(&self.v) {
            let c = dot(v, x);
            out.iter_mut().zip(u).for_each(|(o, ui)| *o += c * ui);
        }
        out.iter_mut()
            .zip(x)
            .for_each(|(o, xi)| *o = xi + self.half_dt * *o);
        out
    }

    fn explicit_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.operator.transpose().apply(y);
        for (u, v) in self.u.iter().zip(&self.v) {
            let c = dot(u, y);
            out.iter_mut().zip(v).for_each(|(o, vi)| *o += c * vi);
        }
        out.iter_mut()
            .zip(y)
            .for_each(|(o, yi)| *o = yi + self.half_dt * *o);
        out
    }
}

impl StepMap for CnStep {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.implicit.solve(&self.explicit(x))
    }

    fn apply_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.explicit_transpose(&self.implicit_transpose.solve(y)?))
    }

    fn inject(&self, q_v: &[f64], q_b: &[f64]) -> Result<Vec<f64>> {
        let n = q_v.len();
        let r: Vec<f64> = (0..n)
            .map(|i| {
                let right = if i + 1 < n { q_b[i + 1] } else { 0.0 };
                let left = if i > 0 { q_b[i - 1] } else { 0.0 };
                self.dt * (q_v[i] - (right - left) / (2.0 * self.h))
            })
            .collect();
        self.implicit.solve(&r)
    }

    fn data(&self) -> &LinearData {
        &self.data
    }
}

/// Time-stepped linearized evolution around a background path.
///
/// Step `k` maps time node `k` to `k + 1`. Measures move forward with
/// [`adjoint`](Self::adjoint); test functions move backward with
/// [`apply`](Self::apply), which is the transpose of the forward steps
/// against the quadrature weights, so `(Φ^{t,s} f, ρ) = (f, (Φ^{t,s})^* ρ)`
/// holds to solver precision.
pub struct LinearizedPropagator {
    time: TimeGrid,
    grid: Grid1D,
    weights: Vec<f64>,
    steps: Vec<Box<dyn StepMap>>,
}

impl std::fmt::Debug for LinearizedPropagator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearizedPropagator")
            .field("time", &self.time)
            .field("grid", &self.grid)
            .finish()
    }
}

impl LinearizedPropagator {
    pub(crate) fn from_steps(
        grid: Grid1D,
        time: TimeGrid,
        steps: Vec<Box<dyn StepMap>>,
    ) -> Result<Self> {
        if steps.len() != time.steps() {
            return Err(Error::InvalidInput(format!(
                "{} steps for {} time cells",
                steps.len(),
                time.steps()
            )));
        }
        Ok(Self {
            weights: grid.weights(),
            time,
            grid,
            steps,
        })
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    fn check_order(&self, t: usize, s: usize) -> Result<()> {
        if t > s || s > self.time.steps() {
            return Err(Error::InvalidInput(format!(
                "propagator indices must satisfy t ≤ s ≤ N, got {t}, {s}"
            )));
        }
        Ok(())
    }

    /// `(Φ^{t,s})^* ρ`: a signed measure moved from node `t` to node `s ≥ t`.
    pub fn adjoint(&self, t: usize, s: usize, rho: &[f64]) -> Result<Vec<f64>> {
        self.check_order(t, s)?;
        let mut x = rho.to_vec();
        for step in &self.steps[t..s] {
            x = step.apply(&x)?;
        }
        Ok(x)
    }

    /// `Φ^{t,s} f`: a test function moved back from node `s` to node `t ≤ s`.
    pub fn apply(&self, t: usize, s: usize, f: &[f64]) -> Result<Vec<f64>> {
        Ok(self.backward_sweep(t, s, f)?.swap_remove(0))
    }

    /// `[Φ^{t,s} f, Φ^{t+1,s} f, …, f]`.
    pub fn backward_sweep(&self, t: usize, s: usize, f: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_order(t, s)?;
        let w = &self.weights;
        let mut y: Vec<f64> = f.iter().zip(w).map(|(a, b)| a * b).collect();
        let mut out = vec![f.to_vec()];
        for step in self.steps[t..s].iter().rev() {
            y = step.apply_transpose(&y)?;
            out.push(y.iter().zip(w).map(|(a, b)| a / b).collect());
        }
        out.reverse();
        Ok(out)
    }

    /// Path `ξ_k` started from node values `xi0` at time zero.
    pub fn propagate_path(&self, xi0: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.time.nodes());
        out.push(xi0.to_vec());
        for step in &self.steps {
            let next = step.apply(out.last().expect("nonempty"))?;
            out.push(next);
        }
        Ok(out)
    }

    /// Second variation from two first-variation paths: the midpoint Duhamel
    /// sum `η_t = Σ_k (Φ^{k+1,t})^* B_k q_{k+½}`, accumulated step by step.
    pub fn second_variation_path(&self, xa: &[Vec<f64>], xb: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = self.grid.len();
        let mut out = Vec::with_capacity(self.time.nodes());
        out.push(vec![0.0; n]);
        for (k, step) in self.steps.iter().enumerate() {
            let ma: Vec<f64> = xa[k]
                .iter()
                .zip(&xa[k + 1])
                .map(|(p, q)| 0.5 * (p + q))
                .collect();
            let mb: Vec<f64> = xb[k]
                .iter()
                .zip(&xb[k + 1])
                .map(|(p, q)| 0.5 * (p + q))
                .collect();
            let (q_v, q_b) = step.data().second_order(&ma, &mb)?;
            let mut next = step.apply(out.last().expect("nonempty"))?;
            if q_v.iter().chain(&q_b).any(|v| *v != 0.0) {
                next.iter_mut()
                    .zip(step.inject(&q_v, &q_b)?)
                    .for_each(|(a, b)| *a += b);
            }
            out.push(next);
        }
        Ok(out)
    }
}

fn midpoints(phi: &SolutionPath) -> Vec<(f64, Vec<f64>)> {
    let time = phi.time();
    (1..=time.steps())
        .map(|k| {
            let a = phi.at(k - 1).values();
            let b = phi.at(k).values();
            (
                0.5 * (time.t(k - 1) + time.t(k)),
                a.iter().zip(b).map(|(p, q)| 0.5 * (p + q)).collect(),
            )
        })
        .collect()
}

fn check_background(solver: &MildSolver, phi: &SolutionPath) -> Result<()> {
    solver.grid().ensure_same(phi.grid())?;
    if phi.time() != solver.time() {
        return Err(Error::GridMismatch(
            "background path and solver use different time grids".into(),
        ));
    }
    Ok(())
}

fn linear_data(solver: &MildSolver, phi: &SolutionPath) -> Result<Vec<LinearData>> {
    check_background(solver, phi)?;
    midpoints(phi)
        .par_iter()
        .map(|(t, mid)| LinearData::from_solver(solver, *t, mid))
        .collect()
}

/// Linearized propagator around the background `phi` on the solver's grids.
pub fn build_propagator(solver: &MildSolver, phi: &SolutionPath) -> Result<LinearizedPropagator> {
    let data = linear_data(solver, phi)?;
    let dt = solver.time().dt();
    let kernel = solver.kernel().clone();
    let decay = kernel.rates().iter().map(|l| (-l * dt).exp()).collect();
    let phi1 = kernel
        .rates()
        .iter()
        .map(|l| {
            if *l * dt < 1e-12 {
                dt
            } else {
                -(-l * dt).exp_m1() / l
            }
        })
        .collect();
    let ctx = Arc::new(SpectralContext {
        kernel,
        decay,
        phi1,
    });
    let steps: Vec<Box<dyn StepMap>> = data
        .into_iter()
        .map(|data| {
            Box::new(SpectralStep {
                ctx: ctx.clone(),
                data,
            }) as Box<dyn StepMap>
        })
        .collect();
    LinearizedPropagator::from_steps(*solver.grid(), *solver.time(), steps)
}

/// First variations `ξ_t(x; ·)` for a set of probe points.
#[derive(Debug, Clone, Serialize)]
pub struct SensitivityKernel {
    time: TimeGrid,
    probes: Vec<f64>,
    paths: Vec<Vec<SignedField>>,
    residuals: Vec<Vec<f64>>,
}

impl SensitivityKernel {
    pub(crate) fn new(
        time: TimeGrid,
        probes: Vec<f64>,
        paths: Vec<Vec<SignedField>>,
        residuals: Vec<Vec<f64>>,
    ) -> Self {
        Self {
            time,
            probes,
            paths,
            residuals,
        }
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn grid(&self) -> &Grid1D {
        self.paths[0][0].grid()
    }

    /// Probe positions (snapped to grid nodes).
    pub fn probes(&self) -> &[f64] {
        &self.probes
    }

    pub fn path(&self, probe: usize) -> &[SignedField] {
        &self.paths[probe]
    }

    pub fn at(&self, probe: usize, k: usize) -> &SignedField {
        &self.paths[probe][k]
    }

    /// Linear Picard residual history of one probe.
    pub fn residuals(&self, probe: usize) -> &[f64] {
        &self.residuals[probe]
    }

    pub fn l1_norms(&self, probe: usize) -> Vec<f64> {
        self.paths[probe]
            .iter()
            .map(|f| l1_values(f.grid(), f.values()))
            .collect()
    }

    pub fn masses(&self, probe: usize) -> Vec<f64> {
        self.paths[probe].iter().map(|f| f.mass()).collect()
    }

    pub(crate) fn values(&self, probe: usize) -> Vec<Vec<f64>> {
        self.paths[probe]
            .iter()
            .map(|f| f.values().to_vec())
            .collect()
    }

    /// Applies `f` to every field (used to undress pathwise kernels).
    pub(crate) fn map_fields(
        self,
        f: impl Fn(usize, &SignedField) -> Result<SignedField>,
    ) -> Result<Self> {
        let paths = self
            .paths
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .map(|(k, x)| f(k, x))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { paths, ..self })
    }
}

/// Second variations `η_t(x, z; ·)` for probe pairs.
#[derive(Debug, Clone, Serialize)]
pub struct SecondVariation {
    time: TimeGrid,
    pairs: Vec<(f64, f64)>,
    paths: Vec<Vec<SignedField>>,
}

impl SecondVariation {
    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }

    pub fn path(&self, pair: usize) -> &[SignedField] {
        &self.paths[pair]
    }

    pub fn at(&self, pair: usize, k: usize) -> &SignedField {
        &self.paths[pair][k]
    }

    pub(crate) fn map_fields(
        self,
        f: impl Fn(usize, &SignedField) -> Result<SignedField>,
    ) -> Result<Self> {
        let paths = self
            .paths
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .map(|(k, x)| f(k, x))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { paths, ..self })
    }
}

pub(crate) fn snap_probes(grid: &Grid1D, probes: &[f64]) -> Result<Vec<f64>> {
    if probes.is_empty() {
        return Err(Error::InvalidInput("no probe points given".into()));
    }
    probes
        .iter()
        .map(|x| {
            if !grid.contains(*x) {
                return Err(Error::InvalidInput(format!("probe {x} outside the grid")));
            }
            Ok(grid.x(grid.nearest(*x)))
        })
        .collect()
}

fn signed_path(grid: Grid1D, time: &TimeGrid, values: Vec<Vec<f64>>) -> Result<Vec<SignedField>> {
    values
        .into_iter()
        .enumerate()
        .map(|(k, v)| SignedField::new(grid, v, time.t(k)))
        .collect()
}

// Linear Picard iteration for one probe over the whole path.
fn first_variation_picard(
    solver: &MildSolver,
    data: &[LinearData],
    xi0: &[f64],
    tol: f64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let grid = *solver.grid();
    let kernel = solver.kernel();
    let steps = solver.time().steps();
    let heat = |total: &mut Vec<_>| solver.advance(total, None);
    let mut current = Vec::with_capacity(steps + 1);
    let mut total = kernel.analyze(xi0);
    current.push(xi0.to_vec());
    for k in 1..=steps {
        heat(&mut total);
        current.push(solver.values_from_spectrum(&total, k)?.0);
    }
    let mut residuals = Vec::new();
    let mut mid = vec![0.0; xi0.len()];
    for _ in 0..MAX_LINEAR_ITERATIONS {
        let mut next = Vec::with_capacity(steps + 1);
        next.push(xi0.to_vec());
        let mut total = kernel.analyze(xi0);
        for k in 1..=steps {
            mid.iter_mut()
                .zip(current[k - 1].iter().zip(&current[k]))
                .for_each(|(m, (p, q))| *m = 0.5 * (p + q));
            let d = &data[k - 1];
            let mut src: Vec<_> = kernel
                .analyze_flux(&d.flux(&mid))
                .into_iter()
                .map(|c| -c)
                .collect();
            if d.has_potential() {
                src.iter_mut()
                    .zip(kernel.analyze(&d.killing(&mid)))
                    .for_each(|(s, c)| *s += c);
            }
            solver.advance(&mut total, Some(&src));
            next.push(solver.values_from_spectrum(&total, k)?.0);
        }
        let r = next
            .iter()
            .zip(&current)
            .map(|(a, b)| l1_distance_values(&grid, a, b))
            .fold(0.0, f64::max);
        residuals.push(r);
        current = next;
        if !r.is_finite() {
            break;
        }
        if r < tol {
            return Ok((current, residuals));
        }
    }
    Err(Error::NonConvergence { residuals })
}

/// First variations at the given probes by Picard iteration of the linear
/// mild equation around `phi`, stopping at `sup_t` L¹ change below `tol`.
/// Probes are snapped to the nearest grid node.
pub fn solve_first_variation(
    solver: &MildSolver,
    phi: &SolutionPath,
    probes: &[f64],
    tol: f64,
) -> Result<SensitivityKernel> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let grid = *solver.grid();
    let probes = snap_probes(&grid, probes)?;
    let data = linear_data(solver, phi)?;
    let solved = probes
        .par_iter()
        .map(|x| {
            let xi0 = mollified_delta_values(&grid, *x)?;
            let (values, residuals) = first_variation_picard(solver, &data, &xi0, tol)?;
            Ok((signed_path(grid, solver.time(), values)?, residuals))
        })
        .collect::<Result<Vec<_>>>()?;
    let (paths, residuals) = solved.into_iter().unzip();
    Ok(SensitivityKernel::new(
        *solver.time(),
        probes,
        paths,
        residuals,
    ))
}

/// First variations by stepping the propagator forward from `δ̃_x`.
pub fn propagate_first_variation(
    propagator: &LinearizedPropagator,
    probes: &[f64],
) -> Result<SensitivityKernel> {
    let grid = *propagator.grid();
    let time = *propagator.time();
    let probes = snap_probes(&grid, probes)?;
    let paths = probes
        .par_iter()
        .map(|x| {
            signed_path(
                grid,
                &time,
                propagator.propagate_path(&mollified_delta_values(&grid, *x)?)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let residuals = vec![Vec::new(); probes.len()];
    Ok(SensitivityKernel::new(time, probes, paths, residuals))
}

/// Second variations for pairs of probe indices into `xi`.
pub fn solve_second_variation(
    propagator: &LinearizedPropagator,
    xi: &SensitivityKernel,
    pairs: &[(usize, usize)],
) -> Result<SecondVariation> {
    if propagator.time() != xi.time() {
        return Err(Error::GridMismatch(
            "propagator and first variation use different time grids".into(),
        ));
    }
    propagator.grid().ensure_same(xi.grid())?;
    for (a, b) in pairs {
        if *a >= xi.probes().len() || *b >= xi.probes().len() {
            return Err(Error::InvalidInput(format!(
                "probe pair ({a}, {b}) out of range"
            )));
        }
    }
    let grid = *propagator.grid();
    let time = *propagator.time();
    let paths = pairs
        .par_iter()
        .map(|(a, b)| {
            let values = propagator.second_variation_path(&xi.values(*a), &xi.values(*b))?;
            signed_path(grid, &time, values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SecondVariation {
        time,
        pairs: pairs
            .iter()
            .map(|(a, b)| (xi.probes()[*a], xi.probes()[*b]))
            .collect(),
        paths,
    })
}

/// `max_{pairs,t} ‖η_t(x,z) − η_t(z,x)‖_{L¹}` for pairs given in both orders.
pub fn symmetry_residual(
    propagator: &LinearizedPropagator,
    xi: &SensitivityKernel,
    pairs: &[(usize, usize)],
) -> Result<f64> {
    let both: Vec<(usize, usize)> = pairs
        .iter()
        .flat_map(|(a, b)| [(*a, *b), (*b, *a)])
        .collect();
    let eta = solve_second_variation(propagator, xi, &both)?;
    let grid = *propagator.grid();
    let mut worst: f64 = 0.0;
    for p in 0..pairs.len() {
        for (f, g) in eta.path(2 * p).iter().zip(eta.path(2 * p + 1)) {
            worst = worst.max(l1_distance_values(&grid, f.values(), g.values()));
        }
    }
    Ok(worst)
}

fn sup_over_time(grid: &Grid1D, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| l1_distance_values(grid, x, y))
        .fold(0.0, f64::max)
}

fn values_of(path: &SolutionPath) -> Vec<Vec<f64>> {
    path.fields().iter().map(|f| f.values().to_vec()).collect()
}

/// `sup_t ‖(φ_t(Y + εδ̃_x) − φ_t(Y))/ε − ξ_t(x)‖_{L¹}` per `ε`, using full
/// nonlinear solves at tolerance `tol` as the oracle.
pub fn fd_first_variation_errors(
    solver: &MildSolver,
    y: &DensityField,
    base: &SolutionPath,
    xi: &SensitivityKernel,
    probe: usize,
    eps: &[f64],
    tol: f64,
) -> Result<Vec<f64>> {
    let grid = *solver.grid();
    let delta = DensityField::mollified_delta(grid, xi.probes()[probe])?;
    let phi0 = values_of(base);
    let xi_vals = xi.values(probe);
    eps.iter()
        .map(|e| {
            let moved = values_of(&solver.solve(&y.perturbed(&delta, *e)?, tol)?);
            let fd: Vec<Vec<f64>> = moved
                .iter()
                .zip(&phi0)
                .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) / e).collect())
                .collect();
            Ok(sup_over_time(&grid, &fd, &xi_vals))
        })
        .collect()
}

/// Second-order Taylor remainders
/// `sup_t ‖φ(Y + ε(δ̃_x + δ̃_z)) − φ(Y) − ε(ξ_x + ξ_z) − ε²(½η_xx + η_xz + ½η_zz)‖_{L¹}`
/// per `ε`, for probe indices `(x, z)` of `xi`.
#[allow(clippy::too_many_arguments)]
pub fn taylor_remainders(
    solver: &MildSolver,
    propagator: &LinearizedPropagator,
    y: &DensityField,
    base: &SolutionPath,
    xi: &SensitivityKernel,
    (x, z): (usize, usize),
    eps: &[f64],
    tol: f64,
) -> Result<Vec<f64>> {
    let grid = *solver.grid();
    let eta = solve_second_variation(propagator, xi, &[(x, x), (x, z), (z, z)])?;
    let dx = DensityField::mollified_delta(grid, xi.probes()[x])?;
    let dz = DensityField::mollified_delta(grid, xi.probes()[z])?;
    let direction = DensityField::new(
        grid,
        dx.values()
            .iter()
            .zip(dz.values())
            .map(|(a, b)| a + b)
            .collect(),
        0.0,
    )?;
    let phi0 = values_of(base);
    let (xx, xz) = (xi.values(x), xi.values(z));
    eps.iter()
        .map(|e| {
            let moved = values_of(&solver.solve(&y.perturbed(&direction, *e)?, tol)?);
            let mut worst: f64 = 0.0;
            for k in 0..moved.len() {
                let r: Vec<f64> = (0..grid.len())
                    .map(|i| {
                        let first = xx[k][i] + xz[k][i];
                        let second = 0.5 * eta.at(0, k).values()[i]
                            + eta.at(1, k).values()[i]
                            + 0.5 * eta.at(2, k).values()[i];
                        moved[k][i] - phi0[k][i] - e * first - e * e * second
                    })
                    .collect();
                worst = worst.max(l1_values(&grid, &r));
            }
            Ok(worst)
        })
        .collect()
}

/// Fitted constant of `‖ξ_t‖_{L¹} ≤ E_{1/2}[C(2t+1)Q]`, `Q = 2λR + V + b`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FirstVariationBound {
    pub c: f64,
    pub q: f64,
    pub max_norm: f64,
}

/// Smallest `C` (bisection) with `‖ξ_t(x)‖ ≤ E_{1/2}[C(2t+1)Q]` at every
/// probe and time node.
pub fn first_variation_bound(
    xi: &SensitivityKernel,
    bounds: &CoefficientBounds,
) -> Result<FirstVariationBound> {
    let q = 2.0 * bounds.lambda * bounds.r + bounds.v_sup + bounds.b_sup;
    let times = xi.time().times();
    let norms: Vec<Vec<f64>> = (0..xi.probes().len()).map(|p| xi.l1_norms(p)).collect();
    let max_norm = norms.iter().flatten().fold(0.0f64, |m, v| m.max(*v));
    let holds = |c: f64| -> Result<bool> {
        for n in &norms {
            for (v, t) in n.iter().zip(&times) {
                // An overflowing envelope bounds everything.
                match mittag_leffler_half(c * (2.0 * t + 1.0) * q) {
                    Ok(e) if *v > e => return Ok(false),
                    Ok(_) | Err(Error::Overflow(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(true)
    };
    if max_norm <= 1.0 || q <= 0.0 {
        return Ok(FirstVariationBound {
            c: 0.0,
            q,
            max_norm,
        });
    }
    let mut hi = 1.0 / q;
    while !holds(hi)? {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::NonConvergence {
                residuals: vec![max_norm],
            });
        }
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if holds(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(FirstVariationBound { c: hi, q, max_norm })
}

/// `sup |f| + sup |f'|` on the grid.
pub fn c1_norm(grid: &Grid1D, f: &[f64]) -> f64 {
    let sup = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let h = grid.spacing();
    let dsup = (1..f.len() - 1).fold(0.0f64, |m, i| {
        m.max(((f[i + 1] - f[i - 1]) / (2.0 * h)).abs())
    });
    sup + dsup
}

/// Fitted growth envelope `e^{Cτ} E_{1/2}(c√τ)` of the backward propagator
/// over a test dictionary.
#[derive(Debug, Clone, Serialize)]
pub struct GrowthFit {
    pub c_exp: f64,
    pub c_ml: f64,
    /// Lags `τ = s − t`.
    pub lags: Vec<f64>,
    /// `max_f ‖Φ^{t,s} f‖_{C¹} / ‖f‖_{C¹}` per lag.
    pub ratios: Vec<f64>,
}

/// Measures `‖Φ^{t,T} f‖_{C¹}/‖f‖_{C¹}` over the dictionary for every `t`
/// and fits `(C, c)`: for each `c` on a grid in `[0, 10]` the smallest
/// admissible `C` is computed, and the pair with the smallest envelope at
/// the largest lag is kept.
pub fn propagator_growth(
    propagator: &LinearizedPropagator,
    dictionary: &[Vec<f64>],
) -> Result<GrowthFit> {
    let grid = *propagator.grid();
    let n = propagator.time().steps();
    let sweeps = dictionary
        .par_iter()
        .map(|f| {
            let norm = c1_norm(&grid, f);
            Ok(propagator
                .backward_sweep(0, n, f)?
                .iter()
                .map(|g| c1_norm(&grid, g) / norm)
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let time = propagator.time();
    // sweeps[f][t] is at node t; lag T − t.
    let lags: Vec<f64> = (0..n).rev().map(|t| time.horizon() - time.t(t)).collect();
    let ratios: Vec<f64> = (0..n)
        .rev()
        .map(|t| sweeps.iter().map(|s| s[t]).fold(0.0, f64::max))
        .collect();
    let mut best: Option<(f64, f64, f64)> = None;
    for i in 0..=100 {
        let c_ml = 0.1 * i as f64;
        let mut c_exp: f64 = 0.0;
        for (r, tau) in ratios.iter().zip(&lags) {
            let e = mittag_leffler_half(c_ml * tau.sqrt())?;
            if *r > e {
                c_exp = c_exp.max((r / e).ln() / tau);
            }
        }
        let tmax = *lags.last().expect("nonempty");
        let envelope = (c_exp * tmax).exp() * mittag_leffler_half(c_ml * tmax.sqrt())?;
        if best.is_none_or(|(_, _, e)| envelope < e) {
            best = Some((c_exp, c_ml, envelope));
        }
    }
    let (c_exp, c_ml, _) = best.expect("scan is nonempty");
    Ok(GrowthFit {
        c_exp,
        c_ml,
        lags,
        ratios,
    })
}
