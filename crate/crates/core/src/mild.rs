//! Mild solutions of the nonlinear equation
//!
//! ```text
//! ∂_t φ = ½(Aφ)'' − (b(φ)φ)' + V(φ)φ,    φ_0 = Y,
//! ```
//!
//! as the fixed point of
//! `Φ_Y(φ)_t = G_t Y + ∫₀ᵗ G_{t−s}(V_s φ_s) ds − ∫₀ᵗ G_{t−s}(b_s φ_s)' ds`.
//!
//! In the spectral basis of [`HeatKernel`] each mode obeys
//! `ĉ_k = e^{−λ dt} ĉ_{k−1} + φ₁(λ) R̂_{k−½}` with `φ₁(λ) = (1 − e^{−λ dt})/λ`,
//! where the source `R = Vφ − (bφ)'` is evaluated at the time midpoint of the
//! step. The singular kernel `(t − s)^{−1/2}` of the gradient term is thus
//! integrated exactly over each cell.

use rustfft::num_complex::Complex64;
use serde::Serialize;

use crate::coefficients::{CoefficientBounds, Coefficients, MomentFunctional};
use crate::error::{Error, Result};
use crate::field::{
    l1_distance_values, l1_norm, project_nonnegative, DensityField, Field, NEGATIVITY_TOLERANCE,
};
use crate::grid::{Grid1D, TimeGrid};
use crate::kernels::{HeatKernel, LEAK_TOLERANCE};
use crate::mittag_leffler::mittag_leffler_half;

/// Iterate cap of the Picard loop.
pub const MAX_PICARD_ITERATIONS: usize = 200;

/// Iterates allowed after the residual meets the tolerance for tail
/// negativity to clear.
const NEGATIVITY_SETTLING: usize = 20;

/// Density path on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolutionPath {
    time: TimeGrid,
    fields: Vec<DensityField>,
    iterations: usize,
    residuals: Vec<f64>,
}

impl SolutionPath {
    pub fn new(time: TimeGrid, fields: Vec<DensityField>) -> Result<Self> {
        if fields.len() != time.nodes() {
            return Err(Error::InvalidInput(format!(
                "{} fields for {} time nodes",
                fields.len(),
                time.nodes()
            )));
        }
        let grid = *fields[0].grid();
        for f in &fields {
            grid.ensure_same(f.grid())?;
        }
        Ok(Self {
            time,
            fields,
            iterations: 0,
            residuals: Vec::new(),
        })
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn grid(&self) -> &Grid1D {
        self.fields[0].grid()
    }

    pub fn fields(&self) -> &[DensityField] {
        &self.fields
    }

    pub fn at(&self, k: usize) -> &DensityField {
        &self.fields[k]
    }

    pub fn initial(&self) -> &DensityField {
        &self.fields[0]
    }

    pub fn terminal(&self) -> &DensityField {
        self.fields.last().expect("paths are never empty")
    }

    /// Picard iterates performed to produce this path.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// `sup_t ‖φ^{(j)}_t − φ^{(j−1)}_t‖` per iterate.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }

    pub fn masses(&self) -> Vec<f64> {
        self.fields.iter().map(|f| f.mass()).collect()
    }

    /// `sup_t ‖self_t − other_t‖_{L¹}`.
    pub fn sup_distance(&self, other: &SolutionPath) -> Result<f64> {
        self.grid().ensure_same(other.grid())?;
        if self.fields.len() != other.fields.len() {
            return Err(Error::GridMismatch("paths on different time grids".into()));
        }
        Ok(self
            .fields
            .iter()
            .zip(&other.fields)
            .map(|(a, b)| l1_distance_values(a.grid(), a.values(), b.values()))
            .fold(0.0, f64::max))
    }
}

/// Node values of `b` and `V` for one measure.
#[derive(Debug, Clone)]
pub(crate) struct FrozenCoefficients {
    pub drift: Vec<f64>,
    pub potential: Vec<f64>,
    pub drift_moments: Vec<f64>,
    pub potential_moments: Vec<f64>,
}

/// Mild solver on fixed space and time grids.
#[derive(Debug, Clone)]
pub struct MildSolver {
    kernel: HeatKernel,
    coeffs: Coefficients,
    time: TimeGrid,
    decay: Vec<f64>,
    phi1: Vec<f64>,
    drift_kernels: Vec<Vec<f64>>,
    potential_kernels: Vec<Vec<f64>>,
    max_iterations: usize,
}

impl MildSolver {
    pub fn new(grid: Grid1D, time: TimeGrid, coeffs: Coefficients) -> Result<Self> {
        let kernel = HeatKernel::new(grid, coeffs.diffusion.clone())?;
        Self::with_kernel(kernel, time, coeffs)
    }

    pub fn with_kernel(kernel: HeatKernel, time: TimeGrid, coeffs: Coefficients) -> Result<Self> {
        let dt = time.dt();
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
        let grid = *kernel.grid();
        Ok(Self {
            drift_kernels: coeffs.drift.0.kernel_samples(&grid),
            potential_kernels: coeffs.potential.0.kernel_samples(&grid),
            kernel,
            coeffs,
            time,
            decay,
            phi1,
            max_iterations: MAX_PICARD_ITERATIONS,
        })
    }

    pub fn with_max_iterations(mut self, cap: usize) -> Self {
        self.max_iterations = cap.max(1);
        self
    }

    pub fn kernel(&self) -> &HeatKernel {
        &self.kernel
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coeffs
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn grid(&self) -> &Grid1D {
        self.kernel.grid()
    }

    pub(crate) fn drift_kernels(&self) -> &[Vec<f64>] {
        &self.drift_kernels
    }

    pub(crate) fn potential_kernels(&self) -> &[Vec<f64>] {
        &self.potential_kernels
    }

    /// `ĉ ← e^{−λ dt} ĉ + φ₁(λ) ŝ`.
    pub(crate) fn advance(&self, total: &mut [Complex64], source: Option<&[Complex64]>) {
        match source {
            Some(src) => {
                for ((c, s), (e, p)) in total
                    .iter_mut()
                    .zip(src)
                    .zip(self.decay.iter().zip(&self.phi1))
                {
                    *c = *c * *e + *s * *p;
                }
            }
            None => {
                for (c, e) in total.iter_mut().zip(&self.decay) {
                    *c *= *e;
                }
            }
        }
    }

    pub(crate) fn frozen(&self, t: f64, mu: &[f64]) -> Result<FrozenCoefficients> {
        let grid = self.grid();
        let drift_moments = MomentFunctional::moments_with(grid, &self.drift_kernels, mu);
        let potential_moments = MomentFunctional::moments_with(grid, &self.potential_kernels, mu);
        Ok(FrozenCoefficients {
            drift: self
                .coeffs
                .drift
                .0
                .values_with_moments(t, grid, &drift_moments)?,
            potential: self
                .coeffs
                .potential
                .values_with_moments(t, grid, &potential_moments)?,
            drift_moments,
            potential_moments,
        })
    }

    /// Spectrum of `V φ − (b φ)'` for frozen coefficients.
    pub(crate) fn source_spectrum(
        &self,
        frozen: &FrozenCoefficients,
        mu: &[f64],
    ) -> Vec<Complex64> {
        let flux: Vec<f64> = frozen.drift.iter().zip(mu).map(|(b, m)| b * m).collect();
        let mut spec: Vec<Complex64> = self
            .kernel
            .analyze_flux(&flux)
            .into_iter()
            .map(|c| -c)
            .collect();
        if frozen.potential.iter().any(|v| *v != 0.0) {
            let killing: Vec<f64> = frozen
                .potential
                .iter()
                .zip(mu)
                .map(|(v, m)| v * m)
                .collect();
            for (s, k) in spec.iter_mut().zip(self.kernel.analyze(&killing)) {
                *s += k;
            }
        }
        spec
    }

    /// Node values of a spectrum and the mass outside the grid, checked for
    /// finiteness but not sign.
    pub(crate) fn values_from_spectrum(
        &self,
        spec: &[Complex64],
        k: usize,
    ) -> Result<(Vec<f64>, f64)> {
        let (values, outside) = self.kernel.synthesize(spec);
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("mild solution at time index {k}"),
                index,
            });
        }
        Ok((values, outside))
    }

    fn density(&self, mut values: Vec<f64>, k: usize) -> Result<DensityField> {
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        // Spectral roundoff in the far tails is relative to the peak; keep in
        // step with `Iterate::min_value`.
        for v in values.iter_mut() {
            if *v < 0.0 && *v > -1e-13 * scale {
                *v = 0.0;
            }
        }
        project_nonnegative(&mut values, Some(k))?;
        DensityField::new(*self.grid(), values, self.time.t(k))
    }

    fn to_path(&self, iterate: Iterate) -> Result<SolutionPath> {
        if let Some((k, outside)) = iterate
            .leaks
            .iter()
            .copied()
            .enumerate()
            .find(|(_, o)| *o > LEAK_TOLERANCE)
        {
            return Err(Error::DomainLeak {
                outside,
                time_index: k,
            });
        }
        let fields = iterate
            .values
            .into_iter()
            .enumerate()
            .map(|(k, v)| self.density(v, k))
            .collect::<Result<Vec<_>>>()?;
        SolutionPath::new(self.time, fields)
    }

    fn check_initial(&self, y: &DensityField) -> Result<()> {
        self.grid().ensure_same(y.grid())
    }

    fn heat_values(&self, y: &DensityField) -> Result<Iterate> {
        let mut total = self.kernel.analyze(y.values());
        let mut out = Iterate::start(y, self.time.nodes());
        for k in 1..=self.time.steps() {
            self.advance(&mut total, None);
            out.push(self.values_from_spectrum(&total, k)?);
        }
        Ok(out)
    }

    /// Heat flow `t ↦ G_t Y`, the initial Picard guess.
    pub fn heat_flow(&self, y: &DensityField) -> Result<SolutionPath> {
        self.check_initial(y)?;
        let values = self.heat_values(y)?;
        self.to_path(values)
    }

    fn is_trivial(&self) -> bool {
        self.coeffs.drift.0.is_measure_independent()
            && self.coeffs.drift.0.value_at(0.0, 0.0, &[]) == 0.0
            && self.coeffs.potential.is_zero()
    }

    // Φ_Y on raw node values. Intermediate iterates may be signed: early
    // Picard iterates overshoot before the contraction sets in.
    fn map_values(&self, y: &DensityField, phi: &[Vec<f64>]) -> Result<Iterate> {
        if self.is_trivial() {
            return self.heat_values(y);
        }
        let mut total = self.kernel.analyze(y.values());
        let mut out = Iterate::start(y, self.time.nodes());
        let mut mid = vec![0.0; y.values().len()];
        for k in 1..=self.time.steps() {
            let (a, b) = (&phi[k - 1], &phi[k]);
            mid.iter_mut()
                .zip(a.iter().zip(b))
                .for_each(|(m, (p, q))| *m = 0.5 * (p + q));
            let t_mid = 0.5 * (self.time.t(k - 1) + self.time.t(k));
            let frozen = self
                .frozen(t_mid, &mid)
                .map_err(|e| with_time_index(e, k))?;
            let src = self.source_spectrum(&frozen, &mid);
            self.advance(&mut total, Some(&src));
            out.push(self.values_from_spectrum(&total, k)?);
        }
        Ok(out)
    }

    /// One application of `Φ_Y` to the path `phi`.
    pub fn picard_map(&self, y: &DensityField, phi: &SolutionPath) -> Result<SolutionPath> {
        self.check_initial(y)?;
        self.grid().ensure_same(phi.grid())?;
        if phi.time() != &self.time {
            return Err(Error::GridMismatch(
                "path and solver use different time grids".into(),
            ));
        }
        let input: Vec<Vec<f64>> = phi.fields().iter().map(|f| f.values().to_vec()).collect();
        let out = self.map_values(y, &input)?;
        self.to_path(out)
    }

    /// Picard iteration from the heat flow until `sup_t` L¹ distance between
    /// iterates drops below `tol`.
    ///
    /// An iterate that meets `tol` in L¹ can still carry errors of order
    /// `tol/20` pointwise in the tails, which shows up as spurious negativity.
    /// Iteration therefore continues (within the same cap) until the iterate
    /// is also nonnegative up to [`NEGATIVITY_TOLERANCE`]; the residual history
    /// records every iterate.
    pub fn solve(&self, y: &DensityField, tol: f64) -> Result<SolutionPath> {
        if !(tol > 0.0) {
            return Err(Error::InvalidInput(format!(
                "tolerance must be positive, got {tol}"
            )));
        }
        self.check_initial(y)?;
        let grid = *self.grid();
        let mut current = self.heat_values(y)?;
        let mut residuals = Vec::new();
        let mut settled = 0;
        for _ in 0..self.max_iterations {
            let next = self.map_values(y, &current.values)?;
            let r = next
                .values
                .iter()
                .zip(&current.values)
                .map(|(a, b)| l1_distance_values(&grid, a, b))
                .fold(0.0, f64::max);
            residuals.push(r);
            current = next;
            if r < tol {
                settled += 1;
                // Past NEGATIVITY_SETTLING iterates the sign is a property of
                // the discrete fixed point, and to_path reports it.
                if current.min_value() >= -NEGATIVITY_TOLERANCE || settled > NEGATIVITY_SETTLING {
                    let mut path = self.to_path(current)?;
                    path.iterations = residuals.len();
                    path.residuals = residuals;
                    return Ok(path);
                }
            }
        }
        Err(Error::NonConvergence { residuals })
    }
}

/// Number of iterates needed for the residual to fall below `tol`.
pub fn iterations_to(residuals: &[f64], tol: f64) -> Option<usize> {
    residuals.iter().position(|r| *r < tol).map(|i| i + 1)
}

// A Picard iterate: node values per time node and the mass found outside
// the grid at each node.
struct Iterate {
    values: Vec<Vec<f64>>,
    leaks: Vec<f64>,
}

impl Iterate {
    fn start(y: &DensityField, nodes: usize) -> Self {
        let mut values = Vec::with_capacity(nodes);
        values.push(y.values().to_vec());
        let mut leaks = Vec::with_capacity(nodes);
        leaks.push(0.0);
        Self { values, leaks }
    }

    // Most negative value left after trimming roundoff relative to each
    // field's peak, as done when the iterate becomes a density.
    fn min_value(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|f| {
                let floor = -1e-13 * f.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
                f.iter()
                    .map(move |v| if *v < 0.0 && *v > floor { 0.0 } else { *v })
            })
            .fold(0.0, f64::min)
    }

    fn push(&mut self, (values, outside): (Vec<f64>, f64)) {
        self.values.push(values);
        self.leaks.push(outside);
    }
}

fn with_time_index(e: Error, k: usize) -> Error {
    match e {
        Error::NonFinite { context, index } => Error::NonFinite {
            context: format!("{context} at time index {k}"),
            index,
        },
        other => other,
    }
}

/// Solves the mild equation on `time` with the grid of `y`.
pub fn solve_mild(
    y: &DensityField,
    coeffs: &Coefficients,
    time: TimeGrid,
    tol: f64,
) -> Result<SolutionPath> {
    MildSolver::new(*y.grid(), time, coeffs.clone())?.solve(y, tol)
}

fn second_difference(grid: &Grid1D, f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let h2 = grid.spacing().powi(2);
    (0..n)
        .map(|i| {
            if i == 0 || i + 1 == n {
                0.0
            } else {
                (f[i + 1] - 2.0 * f[i] + f[i - 1]) / h2
            }
        })
        .collect()
}

fn first_difference(grid: &Grid1D, f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let h = grid.spacing();
    (0..n)
        .map(|i| {
            if i == 0 || i + 1 == n {
                0.0
            } else {
                (f[i + 1] - f[i - 1]) / (2.0 * h)
            }
        })
        .collect()
}

/// `max_{f,k} |d/dt (f, φ_t) − (½A f'' + b f' + V f, φ_t)|` over interior time
/// nodes, with central differences in time and space. Tests should vanish
/// near the grid ends.
pub fn weak_residual(phi: &SolutionPath, coeffs: &Coefficients, tests: &[Vec<f64>]) -> Result<f64> {
    let grid = *phi.grid();
    let time = *phi.time();
    if time.steps() < 2 {
        return Err(Error::InvalidInput(
            "weak residual needs at least two time steps".into(),
        ));
    }
    let a = coeffs.diffusion.sample(&grid);
    let mut worst: f64 = 0.0;
    let frozen: Vec<(Vec<f64>, Vec<f64>)> = (1..time.steps())
        .map(|k| {
            let t = time.t(k);
            Ok((
                coeffs.drift.evaluate_drift(t, phi.at(k))?,
                coeffs.potential.evaluate(t, phi.at(k))?,
            ))
        })
        .collect::<Result<_>>()?;
    for f in tests {
        if f.len() != grid.len() {
            return Err(Error::GridMismatch("test function length".into()));
        }
        let d1 = first_difference(&grid, f);
        let d2 = second_difference(&grid, f);
        let pairings: Vec<f64> = phi
            .fields()
            .iter()
            .map(|p| crate::field::pair_values(&grid, f, p.values()))
            .collect();
        for k in 1..time.steps() {
            let (b, v) = &frozen[k - 1];
            let lf: Vec<f64> = (0..grid.len())
                .map(|i| 0.5 * a[i] * d2[i] + b[i] * d1[i] + v[i] * f[i])
                .collect();
            let rhs = crate::field::pair_values(&grid, &lf, phi.at(k).values());
            let lhs = (pairings[k + 1] - pairings[k - 1]) / (2.0 * time.dt());
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}

/// Measured Mittag-Leffler stability envelope.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    /// Prefactor of `κ`, fitted on the calibration pair.
    pub c_bar: f64,
    pub kappa: f64,
    /// `max_{pairs, t} ratio / E_{1/2}(κ√t)`.
    pub k: f64,
    pub times: Vec<f64>,
    /// `‖φ¹_t − φ²_t‖ / ‖Y¹ − Y²‖` per pair and time node.
    pub ratios: Vec<Vec<f64>>,
    pub calibration_ratios: Vec<f64>,
    pub bounds: CoefficientBounds,
}

fn ratios(solver: &MildSolver, y1: &DensityField, y2: &DensityField, tol: f64) -> Result<Vec<f64>> {
    let d0 = crate::field::l1_distance(y1, y2)?;
    if d0 <= 0.0 {
        return Err(Error::InvalidInput(
            "stability pair has identical members".into(),
        ));
    }
    let p1 = solver.solve(y1, tol)?;
    let p2 = solver.solve(y2, tol)?;
    Ok(p1
        .fields()
        .iter()
        .zip(p2.fields())
        .map(|(a, b)| l1_distance_values(a.grid(), a.values(), b.values()) / d0)
        .collect())
}

/// `κ(T) = C̄[(V√T + b) + L_A(√T + 1)‖Y‖]`.
pub fn kappa(c_bar: f64, bounds: &CoefficientBounds, horizon: f64, norm_y: f64) -> f64 {
    let rt = horizon.sqrt();
    c_bar * ((bounds.v_sup * rt + bounds.b_sup) + bounds.l_a * (rt + 1.0) * norm_y)
}

fn envelope_excess(ratios: &[f64], times: &[f64], kappa: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (r, t) in ratios.iter().zip(times) {
        worst = worst.max(r / mittag_leffler_half(kappa * t.sqrt())?);
    }
    Ok(worst)
}

/// Fits `C̄` as the smallest value for which the calibration pair satisfies
/// `ratio_t ≤ E_{1/2}(κ√t)` (bisection), then reports
/// `K = max ratio_t / E_{1/2}(κ√t)` over `pairs`.
pub fn stability_envelope(
    solver: &MildSolver,
    calibration: (&DensityField, &DensityField),
    pairs: &[(DensityField, DensityField)],
    bounds: CoefficientBounds,
    tol: f64,
) -> Result<StabilityReport> {
    let times = solver.time().times();
    let horizon = solver.time().horizon();
    let calibration_ratios = ratios(solver, calibration.0, calibration.1, tol)?;
    let mut norm_y = l1_norm(calibration.0).max(l1_norm(calibration.1));
    for (a, b) in pairs {
        norm_y = norm_y.max(l1_norm(a)).max(l1_norm(b));
    }
    let unit = kappa(1.0, &bounds, horizon, norm_y);
    let c_bar = if envelope_excess(&calibration_ratios, &times, 0.0)? <= 1.0 || unit <= 0.0 {
        0.0
    } else {
        let mut hi = 1.0;
        while envelope_excess(&calibration_ratios, &times, hi * unit)? > 1.0 {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(Error::NonConvergence {
                    residuals: calibration_ratios,
                });
            }
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if envelope_excess(&calibration_ratios, &times, mid * unit)? > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let kappa = c_bar * unit;
    let mut all = Vec::with_capacity(pairs.len());
    let mut k: f64 = 0.0;
    for (a, b) in pairs {
        let r = ratios(solver, a, b, tol)?;
        k = k.max(envelope_excess(&r, &times, kappa)?);
        all.push(r);
    }
    Ok(StabilityReport {
        c_bar,
        kappa,
        k,
        times,
        ratios: all,
        calibration_ratios,
        bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{Diffusion, InteractionDrift, PotentialTerm};
    use crate::field::l1_distance;

    fn grid() -> Grid1D {
        Grid1D::new(-10.0, 10.0, 401).unwrap()
    }

    fn y0() -> DensityField {
        DensityField::gaussian(grid(), 0.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn picard_map_without_coefficients_is_heat_flow() {
        let solver = MildSolver::new(
            grid(),
            TimeGrid::new(1.0, 20).unwrap(),
            Coefficients::heat(1.0).unwrap(),
        )
        .unwrap();
        let y = y0();
        let other = solver
            .heat_flow(&DensityField::gaussian(grid(), 1.0, 0.5, 1.0).unwrap())
            .unwrap();
        let mapped = solver.picard_map(&y, &other).unwrap();
        let heat = solver.heat_flow(&y).unwrap();
        assert_eq!(mapped.sup_distance(&heat).unwrap(), 0.0);
    }

    #[test]
    fn heat_baseline_variance_doubles() {
        let path = solve_mild(
            &y0(),
            &Coefficients::heat(1.0).unwrap(),
            TimeGrid::new(1.0, 50).unwrap(),
            1e-10,
        )
        .unwrap();
        let want = DensityField::gaussian(grid(), 0.0, 2f64.sqrt(), 1.0).unwrap();
        assert!(l1_distance(path.terminal(), &want).unwrap() < 1e-4);
        assert_eq!(path.iterations(), 1);
    }

    #[test]
    fn constant_killing_decays_mass_exponentially() {
        let c = 0.8;
        let coeffs = Coefficients::heat(1.0)
            .unwrap()
            .with_potential(PotentialTerm::constant_killing(c).unwrap());
        let path = solve_mild(&y0(), &coeffs, TimeGrid::new(1.0, 100).unwrap(), 1e-10).unwrap();
        for (k, m) in path.masses().iter().enumerate() {
            let t = path.time().t(k);
            assert!((m - (-c * t).exp()).abs() < 1e-4, "t = {t}: {m}");
        }
    }

    #[test]
    fn one_picard_step_matches_explicit_fokker_planck_step() {
        // Oracle: explicit finite-difference step of ∂φ = ½φ'' − (bφ)' with
        // b frozen at Y, for a short time t.
        let t = 1e-3;
        let coeffs = Coefficients::heat(1.0)
            .unwrap()
            .with_drift(InteractionDrift::mean_reversion(1.0));
        let solver = MildSolver::new(grid(), TimeGrid::new(t, 1).unwrap(), coeffs.clone()).unwrap();
        let y = DensityField::gaussian(grid(), 0.5, 1.0, 1.0).unwrap();
        let heat = solver.heat_flow(&y).unwrap();
        let one = solver.picard_map(&y, &heat).unwrap();
        let b = coeffs.drift.evaluate_drift(0.0, &y).unwrap();
        let h = grid().spacing();
        let v = y.values();
        let n = v.len();
        let mut explicit = vec![0.0; n];
        for i in 1..n - 1 {
            let diff = 0.5 * (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (h * h);
            let adv = (b[i + 1] * v[i + 1] - b[i - 1] * v[i - 1]) / (2.0 * h);
            explicit[i] = v[i] + t * (diff - adv);
        }
        let diff = l1_distance_values(&grid(), one.terminal().values(), &explicit);
        let change = l1_distance_values(&grid(), y.values(), &explicit);
        // The step moves the density by O(t); both agree to O(t² + t h²).
        assert!(diff < 2e-3 * change, "{diff} vs change {change}");
    }

    #[test]
    fn mean_reversion_converges_with_contraction() {
        let coeffs = Coefficients::heat(1.0)
            .unwrap()
            .with_drift(InteractionDrift::mean_reversion(0.5));
        let y = DensityField::gaussian(grid(), 1.0, 0.8, 1.0).unwrap();
        let path = solve_mild(&y, &coeffs, TimeGrid::new(1.0, 50).unwrap(), 1e-8).unwrap();
        let r = path.residuals();
        assert!(iterations_to(r, 1e-8).unwrap() <= 30, "{r:?}");
        for w in r.windows(2).skip(2) {
            assert!(w[1] < w[0], "{r:?}");
        }
        for m in path.masses() {
            assert!((m - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn weak_residual_of_heat_flow() {
        let path = solve_mild(
            &y0(),
            &Coefficients::heat(1.0).unwrap(),
            TimeGrid::new(1.0, 100).unwrap(),
            1e-10,
        )
        .unwrap();
        let taper = |x: f64| (-(x / 7.0).powi(8)).exp();
        let x2 = grid().sample(|x| x * x * taper(x));
        let one = grid().sample(|_| 1.0);
        let r = weak_residual(&path, &Coefficients::heat(1.0).unwrap(), &[x2]).unwrap();
        assert!(r < 1e-3, "{r}");
        let r1 = weak_residual(&path, &Coefficients::heat(1.0).unwrap(), &[one]).unwrap();
        assert!(r1 < 1e-6, "{r1}");
    }

    #[test]
    fn variable_diffusion_solver_conserves_mass() {
        let coeffs = Coefficients {
            diffusion: Diffusion::sin_squared(1.0, 0.3).unwrap(),
            drift: InteractionDrift::mean_reversion(1.0),
            potential: PotentialTerm::none(),
        };
        let g = Grid1D::new(-8.0, 8.0, 161).unwrap();
        let y = DensityField::gaussian(g, 0.5, 1.0, 1.0).unwrap();
        let path = solve_mild(&y, &coeffs, TimeGrid::new(0.5, 20).unwrap(), 1e-9).unwrap();
        for m in path.masses() {
            assert!((m - 1.0).abs() < 1e-6, "{m}");
        }
    }

    #[test]
    fn negative_fixed_point_is_reported_as_negativity() {
        // Coarse steps leave the far tail of a narrow start slightly negative
        // even at the converged fixed point.
        let g = Grid1D::new(-10.0, 10.0, 201).unwrap();
        let coeffs = Coefficients::heat(1.0)
            .unwrap()
            .with_drift(InteractionDrift::mean_reversion(0.4));
        let solver = MildSolver::new(g, TimeGrid::new(1.0, 20).unwrap(), coeffs).unwrap();
        let y = DensityField::gaussian(g, 0.0, 0.5, 1.0).unwrap();
        assert!(matches!(
            solver.solve(&y, 1e-8),
            Err(Error::Negativity { .. })
        ));
    }

    #[test]
    fn non_convergence_carries_residuals() {
        let coeffs = Coefficients::heat(1.0)
            .unwrap()
            .with_drift(InteractionDrift::mean_reversion(1.0));
        let solver = MildSolver::new(grid(), TimeGrid::new(1.0, 20).unwrap(), coeffs)
            .unwrap()
            .with_max_iterations(2);
        match solver.solve(
            &y0()
                .perturbed(&DensityField::gaussian(grid(), 2.0, 1.0, 1.0).unwrap(), 1.0)
                .unwrap(),
            1e-14,
        ) {
            Err(Error::NonConvergence { residuals }) => assert_eq!(residuals.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn positive_potential_is_a_hard_error() {
        let coeffs = Coefficients::heat(1.0)
            .unwrap()
            .with_potential(PotentialTerm(MomentFunctional::constant(0.1)));
        assert!(matches!(
            solve_mild(&y0(), &coeffs, TimeGrid::new(1.0, 10).unwrap(), 1e-8),
            Err(Error::PositivePotential { .. })
        ));
    }
}
