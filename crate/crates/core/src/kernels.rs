//! Green function of `φ ↦ ½(Aφ)''` and its gradient.
//!
//! Both modes diagonalize the generator. For constant `A = a` the grid is
//! zero-padded to at least twice its length and the exact Gaussian symbol
//! `exp(−a τ k²/2)` is applied in Fourier space; whatever lands in the padding
//! is mass that left the truncated domain. For variable `A` the generator
//! `L = ½ D² diag(A)` (three-point stencil, zero outside the grid) is
//! symmetrized as `S L S⁻¹` with `S = diag(√A)` and eigendecomposed once, so
//! `exp(τL) = S⁻¹ Q exp(τΛ) Qᵀ S` for every `τ`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::coefficients::Diffusion;
use crate::error::{Error, Result};
use crate::field::{gaussian_pdf, mollified_delta_values, DensityField, Field, SignedField};
use crate::grid::Grid1D;

/// Mass allowed to leave the truncated domain.
pub const LEAK_TOLERANCE: f64 = 1e-8;

/// Kernel construction mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    Constant,
    Variable,
}

#[derive(Clone)]
enum Basis {
    Fourier {
        len: usize,
        forward: Arc<dyn Fft<f64>>,
        inverse: Arc<dyn Fft<f64>>,
        wavenumbers: Vec<f64>,
    },
    Eigen {
        sqrt_a: Vec<f64>,
        q: DMatrix<f64>,
    },
}

/// Spectral representation of the heat semigroup on a grid.
#[derive(Clone)]
pub struct HeatKernel {
    grid: Grid1D,
    diffusion: Diffusion,
    mode: KernelMode,
    rates: Vec<f64>,
    basis: Basis,
}

impl std::fmt::Debug for HeatKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HeatKernel")
            .field("grid", &self.grid)
            .field("diffusion", &self.diffusion)
            .field("mode", &self.mode)
            .finish()
    }
}

/// Fitted constants of a Gaussian upper bound `G_t ≤ C·G^{Gauss}_{σt}`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AronsonFit {
    pub c: f64,
    pub sigma: f64,
    /// Grid pairs that entered the fit (those above the roundoff floor).
    pub pairs: usize,
}

impl HeatKernel {
    /// Chooses the closed-form mode for constant diffusion.
    pub fn new(grid: Grid1D, diffusion: Diffusion) -> Result<Self> {
        match diffusion {
            Diffusion::Constant(_) => Self::constant(grid, diffusion),
            Diffusion::Variable { .. } => Self::variable(grid, diffusion),
        }
    }

    fn constant(grid: Grid1D, diffusion: Diffusion) -> Result<Self> {
        let a = diffusion.eval(0.0);
        diffusion.bounds(&grid)?;
        let len = (2 * grid.len()).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let period = len as f64 * grid.spacing();
        let wavenumbers: Vec<f64> = (0..len)
            .map(|m| {
                let signed = if m <= len / 2 {
                    m as f64
                } else {
                    m as f64 - len as f64
                };
                2.0 * PI * signed / period
            })
            .collect();
        let rates = wavenumbers.iter().map(|k| 0.5 * a * k * k).collect();
        Ok(Self {
            grid,
            diffusion,
            mode: KernelMode::Constant,
            rates,
            basis: Basis::Fourier {
                len,
                forward,
                inverse,
                wavenumbers,
            },
        })
    }

    /// Numerical mode; also accepts constant diffusion (used for cross-mode checks).
    pub fn variable(grid: Grid1D, diffusion: Diffusion) -> Result<Self> {
        diffusion.bounds(&grid)?;
        let n = grid.len();
        let h2 = grid.spacing().powi(2);
        let a = diffusion.sample(&grid);
        let sqrt_a: Vec<f64> = a.iter().map(|v| v.sqrt()).collect();
        let mut m = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = -a[i] / h2;
            if i + 1 < n {
                let off = 0.5 * sqrt_a[i] * sqrt_a[i + 1] / h2;
                m[(i, i + 1)] = off;
                m[(i + 1, i)] = off;
            }
        }
        let eig = SymmetricEigen::new(m);
        let rates = eig.eigenvalues.iter().map(|l| (-l).max(0.0)).collect();
        Ok(Self {
            grid,
            diffusion,
            mode: KernelMode::Variable,
            rates,
            basis: Basis::Eigen {
                sqrt_a,
                q: eig.eigenvectors,
            },
        })
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn diffusion(&self) -> &Diffusion {
        &self.diffusion
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    /// Decay rates `λ ≥ 0` of the spectral modes: the semigroup multiplies
    /// mode `k` by `exp(−λ_k τ)`.
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn spectrum_len(&self) -> usize {
        self.rates.len()
    }

    /// Spectral coefficients of node values.
    pub fn analyze(&self, values: &[f64]) -> Vec<Complex64> {
        debug_assert_eq!(values.len(), self.grid.len());
        match &self.basis {
            Basis::Fourier { len, forward, .. } => {
                let mut buf = vec![Complex64::new(0.0, 0.0); *len];
                for (b, v) in buf.iter_mut().zip(values) {
                    b.re = *v;
                }
                forward.process(&mut buf);
                buf
            }
            Basis::Eigen { sqrt_a, q } => {
                let v = DVector::from_iterator(
                    values.len(),
                    values.iter().zip(sqrt_a).map(|(u, s)| u * s),
                );
                q.tr_mul(&v)
                    .iter()
                    .map(|c| Complex64::new(*c, 0.0))
                    .collect()
            }
        }
    }

    /// Spectral coefficients of the derivative `w'`.
    pub fn analyze_flux(&self, w: &[f64]) -> Vec<Complex64> {
        match &self.basis {
            Basis::Fourier {
                len, wavenumbers, ..
            } => {
                let mut spec = self.analyze(w);
                for (m, c) in spec.iter_mut().enumerate() {
                    *c = if m == len / 2 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        Complex64::new(0.0, wavenumbers[m]) * *c
                    };
                }
                spec
            }
            Basis::Eigen { .. } => self.analyze(&central_difference(&self.grid, w)),
        }
    }

    /// Node values of a spectrum, with the signed mass found outside the grid.
    pub fn synthesize(&self, spec: &[Complex64]) -> (Vec<f64>, f64) {
        match &self.basis {
            Basis::Fourier { len, inverse, .. } => {
                let mut buf = spec.to_vec();
                inverse.process(&mut buf);
                let scale = 1.0 / *len as f64;
                let n = self.grid.len();
                let values = buf[..n].iter().map(|c| c.re * scale).collect();
                let outside =
                    buf[n..].iter().map(|c| c.re.abs()).sum::<f64>() * scale * self.grid.spacing();
                (values, outside)
            }
            Basis::Eigen { sqrt_a, q } => {
                let c = DVector::from_iterator(spec.len(), spec.iter().map(|c| c.re));
                let u = q * c;
                (u.iter().zip(sqrt_a).map(|(v, s)| v / s).collect(), 0.0)
            }
        }
    }

    /// Multiplies a spectrum by `exp(−λτ)` in place.
    pub fn decay(&self, spec: &mut [Complex64], tau: f64) {
        for (c, l) in spec.iter_mut().zip(&self.rates) {
            *c *= (-l * tau).exp();
        }
    }

    /// `exp(τL)` applied to node values; returns the leaked mass too.
    pub fn propagate(&self, tau: f64, values: &[f64]) -> (Vec<f64>, f64) {
        let mut spec = self.analyze(values);
        self.decay(&mut spec, tau);
        self.synthesize(&spec)
    }

    /// Node-space operator `v ↦ synth(m · analyze(v))`, or with
    /// `analyze_flux` when `flux` is set, or its plain (unweighted) transpose.
    ///
    /// In the Fourier mode the operator is a restricted circulant whose symbol
    /// is even (odd for the flux form), so the transpose is the operator
    /// itself (its negative). Mass leaving the grid is dropped.
    pub fn apply_multiplier(
        &self,
        values: &[f64],
        multiplier: &[f64],
        flux: bool,
        transpose: bool,
    ) -> Vec<f64> {
        match &self.basis {
            Basis::Eigen { sqrt_a, q } if transpose => {
                let v = DVector::from_iterator(
                    values.len(),
                    values.iter().zip(sqrt_a).map(|(u, s)| u / s),
                );
                let mut c = q.tr_mul(&v);
                c.iter_mut().zip(multiplier).for_each(|(ci, m)| *ci *= m);
                let u: Vec<f64> = (q * c).iter().zip(sqrt_a).map(|(v, s)| v * s).collect();
                if flux {
                    central_difference(&self.grid, &u)
                        .into_iter()
                        .map(|v| -v)
                        .collect()
                } else {
                    u
                }
            }
            _ => {
                let mut spec = if flux {
                    self.analyze_flux(values)
                } else {
                    self.analyze(values)
                };
                spec.iter_mut().zip(multiplier).for_each(|(c, m)| *c *= *m);
                let (mut out, _) = self.synthesize(&spec);
                if flux && transpose {
                    out.iter_mut().for_each(|v| *v = -*v);
                }
                out
            }
        }
    }

    fn check_time(t: f64) -> Result<()> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "kernel time must be positive, got {t}"
            )));
        }
        Ok(())
    }

    fn check_leak(outside: f64) -> Result<()> {
        if outside > LEAK_TOLERANCE {
            return Err(Error::DomainLeak {
                outside,
                time_index: 0,
            });
        }
        Ok(())
    }

    /// `x ↦ ∫ G_t(x, y) source(y) dy`.
    pub fn green_apply(&self, t: f64, source: &DensityField) -> Result<DensityField> {
        Self::check_time(t)?;
        self.grid.ensure_same(source.grid())?;
        let (mut values, outside) = self.propagate(t, source.values());
        Self::check_leak(outside)?;
        clamp_roundoff(&mut values);
        DensityField::new(self.grid, values, source.time() + t)
    }

    /// Green function applied to point masses `(position, mass)`, each
    /// represented by a mollified delta.
    pub fn green_apply_points(&self, t: f64, points: &[(f64, f64)]) -> Result<DensityField> {
        let mut values = vec![0.0; self.grid.len()];
        for &(x, mass) in points {
            if mass < 0.0 {
                return Err(Error::InvalidInput(format!("negative point mass {mass}")));
            }
            let d = mollified_delta_values(&self.grid, x)?;
            values.iter_mut().zip(d).for_each(|(v, d)| *v += mass * d);
        }
        self.green_apply(t, &DensityField::new(self.grid, values, 0.0)?)
    }

    /// `x ↦ −∫ ∂_y G_t(x, y) w(y) dy = ∫ G_t(x, y) w'(y) dy`.
    ///
    /// With this sign, `heat(Y) − ∫ green_gradient_apply(t − s, b φ_s) ds`
    /// solves `∂_t φ = ½(Aφ)'' − (bφ)'`; for `A = 1`, `w = c δ₀` and `t = 1`
    /// the output is `−c x (2π)^{−1/2} exp(−x²/2)`.
    pub fn green_gradient_apply(&self, t: f64, w: &impl Field) -> Result<SignedField> {
        Self::check_time(t)?;
        self.grid.ensure_same(w.grid())?;
        let mut spec = self.analyze_flux(w.values());
        self.decay(&mut spec, t);
        let (values, outside) = self.synthesize(&spec);
        Self::check_leak(outside)?;
        SignedField::new(self.grid, values, w.time() + t)
    }

    /// Dense matrix `G_t(x_i, y_j)`, column `j` being the propagated lattice
    /// delta at node `j`.
    pub fn green_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        Self::check_time(t)?;
        let n = self.grid.len();
        let mut g = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0 / self.grid.spacing();
            let (col, _) = self.propagate(t, &e);
            g.set_column(j, &DVector::from_vec(col));
            e[j] = 0.0;
        }
        Ok(g)
    }

    /// Fits `(C, σ)` in `G_t(x, y) ≤ C·(2πσt)^{−1/2} exp(−(x−y)²/(2σt))` over
    /// all grid pairs and the given times, scanning `σ ∈ [1, 10]` and keeping
    /// the smallest `C`. Pairs where `G_t` is below `1e-12` of its maximum are
    /// dropped: there the computed kernel is roundoff, not a tail.
    pub fn aronson_fit(&self, times: &[f64]) -> Result<AronsonFit> {
        let mats: Vec<DMatrix<f64>> = times
            .iter()
            .map(|t| self.green_matrix(*t))
            .collect::<Result<_>>()?;
        let mut best = AronsonFit {
            c: f64::INFINITY,
            sigma: f64::NAN,
            pairs: 0,
        };
        for step in 0..=90 {
            let sigma = 1.0 + 0.1 * step as f64;
            let mut c: f64 = 0.0;
            let mut pairs = 0;
            for (t, g) in times.iter().zip(&mats) {
                let floor = 1e-12 * g.max();
                for j in 0..g.ncols() {
                    for i in 0..g.nrows() {
                        let v = g[(i, j)];
                        if v <= floor {
                            continue;
                        }
                        let dx = self.grid.x(i) - self.grid.x(j);
                        let reference = gaussian_pdf(dx, sigma * t);
                        if reference <= 0.0 {
                            c = f64::INFINITY;
                        } else {
                            c = c.max(v / reference);
                        }
                        pairs += 1;
                    }
                }
            }
            if c < best.c {
                best = AronsonFit { c, sigma, pairs };
            }
        }
        Ok(best)
    }
}

/// Central difference with zero extension outside the grid.
pub fn central_difference(grid: &Grid1D, w: &[f64]) -> Vec<f64> {
    let n = w.len();
    let inv = 0.5 / grid.spacing();
    (0..n)
        .map(|i| {
            let right = if i + 1 < n { w[i + 1] } else { 0.0 };
            let left = if i > 0 { w[i - 1] } else { 0.0 };
            (right - left) * inv
        })
        .collect()
}

// Spectral roundoff produces |v| ~ 1e-17 negatives in the far tails.
fn clamp_roundoff(values: &mut [f64]) {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = -1e-13 * scale.max(1.0);
    for v in values.iter_mut() {
        if *v < 0.0 && *v > floor {
            *v = 0.0;
        }
    }
}
