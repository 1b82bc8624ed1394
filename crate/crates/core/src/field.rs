//! Sampled densities and signed fields, with pairings and norms.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid1D;

/// Negative values above this threshold are treated as discretization noise
/// and projected to zero; anything below is a solver failure.
pub const NEGATIVITY_TOLERANCE: f64 = 1e-12;

/// Read access shared by [`DensityField`] and [`SignedField`].
pub trait Field {
    fn grid(&self) -> &Grid1D;
    fn values(&self) -> &[f64];
    fn time(&self) -> f64;

    /// Trapezoid mass `∫ field`.
    fn mass(&self) -> f64 {
        let g = self.grid();
        self.values()
            .iter()
            .enumerate()
            .map(|(i, v)| g.weight(i) * v)
            .sum()
    }

    fn min_value(&self) -> f64 {
        self.values().iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Nonnegative density sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    grid: Grid1D,
    values: Vec<f64>,
    time: f64,
}

/// Signed field sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedField {
    grid: Grid1D,
    values: Vec<f64>,
    time: f64,
}

fn check_len(grid: &Grid1D, len: usize) -> Result<()> {
    if grid.len() != len {
        return Err(Error::GridMismatch(format!(
            "{len} values for a grid of {} nodes",
            grid.len()
        )));
    }
    Ok(())
}

fn check_finite(values: &[f64], context: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context: context.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

/// Clamp values in `[-NEGATIVITY_TOLERANCE, 0)` to zero and reject anything
/// more negative.
pub fn project_nonnegative(values: &mut [f64], time_index: Option<usize>) -> Result<()> {
    for (index, v) in values.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("density at time index {time_index:?}"),
                index,
            });
        }
        if *v < 0.0 {
            if *v < -NEGATIVITY_TOLERANCE {
                return Err(Error::Negativity {
                    index,
                    value: *v,
                    time_index,
                });
            }
            *v = 0.0;
        }
    }
    Ok(())
}

impl DensityField {
    /// Validates finiteness and projects tiny negative values to zero.
    pub fn new(grid: Grid1D, mut values: Vec<f64>, time: f64) -> Result<Self> {
        check_len(&grid, values.len())?;
        project_nonnegative(&mut values, None)?;
        Ok(Self { grid, values, time })
    }

    pub fn from_fn(grid: Grid1D, time: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, grid.sample(f), time)
    }

    pub fn zeros(grid: Grid1D, time: f64) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
            time,
        }
    }

    /// Normal density `N(mean, std²)` scaled by `mass`.
    pub fn gaussian(grid: Grid1D, mean: f64, std: f64, mass: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::InvalidInput(format!(
                "gaussian std must be positive, got {std}"
            )));
        }
        Self::from_fn(grid, 0.0, |x| mass * gaussian_pdf(x - mean, std * std))
    }

    /// Point mass at `x` represented as a Gaussian of width `2h`, normalized
    /// to unit trapezoid mass on the grid.
    pub fn mollified_delta(grid: Grid1D, x: f64) -> Result<Self> {
        let values = mollified_delta_values(&grid, x)?;
        Self::new(grid, values, 0.0)
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    pub fn to_signed(&self) -> SignedField {
        SignedField {
            grid: self.grid,
            values: self.values.clone(),
            time: self.time,
        }
    }

    /// `self + eps·other`, which must stay nonnegative.
    pub fn perturbed(&self, other: &impl Field, eps: f64) -> Result<Self> {
        self.grid.ensure_same(other.grid())?;
        let values = self
            .values
            .iter()
            .zip(other.values())
            .map(|(a, b)| a + eps * b)
            .collect();
        Self::new(self.grid, values, self.time)
    }
}

impl SignedField {
    pub fn new(grid: Grid1D, values: Vec<f64>, time: f64) -> Result<Self> {
        check_len(&grid, values.len())?;
        check_finite(&values, "signed field")?;
        Ok(Self { grid, values, time })
    }

    pub fn from_fn(grid: Grid1D, time: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid, grid.sample(f), time)
    }

    pub fn zeros(grid: Grid1D, time: f64) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
            time,
        }
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Pointwise `a - b`.
    pub fn difference(a: &impl Field, b: &impl Field) -> Result<Self> {
        a.grid().ensure_same(b.grid())?;
        let values = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x - y)
            .collect();
        Self::new(*a.grid(), values, a.time())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v * factor).collect(),
            time: self.time,
        }
    }
}

macro_rules! impl_field {
    ($ty:ty) => {
        impl Field for $ty {
            fn grid(&self) -> &Grid1D {
                &self.grid
            }
            fn values(&self) -> &[f64] {
                &self.values
            }
            fn time(&self) -> f64 {
                self.time
            }
        }
    };
}

impl_field!(DensityField);
impl_field!(SignedField);

/// Trapezoid pairing `(f, μ) = ∫ f μ`, with `f` sampled on μ's grid.
pub fn pair(f: &impl Field, mu: &impl Field) -> Result<f64> {
    f.grid().ensure_same(mu.grid())?;
    Ok(pair_values(mu.grid(), f.values(), mu.values()))
}

/// Pairing of raw node values on `grid`.
pub fn pair_values(grid: &Grid1D, f: &[f64], mu: &[f64]) -> f64 {
    debug_assert_eq!(f.len(), grid.len());
    debug_assert_eq!(mu.len(), grid.len());
    f.iter()
        .zip(mu)
        .enumerate()
        .map(|(i, (a, b))| grid.weight(i) * a * b)
        .sum()
}

/// Trapezoid `∫ |field|`.
pub fn l1_norm(field: &impl Field) -> f64 {
    l1_values(field.grid(), field.values())
}

pub fn l1_values(grid: &Grid1D, values: &[f64]) -> f64 {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| grid.weight(i) * v.abs())
        .sum()
}

/// `‖a − b‖_{L¹}` for fields on a common grid.
pub fn l1_distance(a: &impl Field, b: &impl Field) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    Ok(l1_distance_values(a.grid(), a.values(), b.values()))
}

pub fn l1_distance_values(grid: &Grid1D, a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| grid.weight(i) * (x - y).abs())
        .sum()
}

pub fn gaussian_pdf(x: f64, variance: f64) -> f64 {
    (-0.5 * x * x / variance).exp() / (2.0 * PI * variance).sqrt()
}

/// Width (standard deviation) of the mollified delta, in units of spacing.
pub const MOLLIFIER_WIDTH_CELLS: f64 = 2.0;

pub(crate) fn mollified_delta_values(grid: &Grid1D, x: f64) -> Result<Vec<f64>> {
    if !grid.contains(x) {
        return Err(Error::InvalidInput(format!(
            "point mass at {x} outside [{}, {}]",
            grid.x_min(),
            grid.x_max()
        )));
    }
    let width = MOLLIFIER_WIDTH_CELLS * grid.spacing();
    let mut values = grid.sample(|y| gaussian_pdf(y - x, width * width));
    let mass = pair_values(grid, &vec![1.0; grid.len()], &values);
    values.iter_mut().for_each(|v| *v /= mass);
    Ok(values)
}

/// Fixed dictionary of 20 smooth test functions `x^p exp(−x²/(2s²))`,
/// `p = 0..4`, `s ∈ {0.5, 1, 2, 4}`, each scaled to unit sup on the grid.
pub fn test_dictionary(grid: &Grid1D) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(20);
    for s in [0.5, 1.0, 2.0, 4.0] {
        for p in 0..5 {
            let mut f = grid.sample(|x| x.powi(p) * (-0.5 * x * x / (s * s)).exp());
            let sup = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            f.iter_mut().for_each(|v| *v /= sup);
            out.push(f);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid1D {
        Grid1D::new(-10.0, 10.0, 2001).unwrap()
    }

    #[test]
    fn pairing_with_one_is_mass() {
        let mu = DensityField::gaussian(grid(), 0.3, 1.2, 2.0).unwrap();
        let one = SignedField::from_fn(grid(), 0.0, |_| 1.0).unwrap();
        assert_eq!(pair(&one, &mu).unwrap(), mu.mass());
        assert!((mu.mass() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn odd_moment_vanishes() {
        let mu = DensityField::gaussian(grid(), 0.0, 1.0, 1.0).unwrap();
        let x = SignedField::from_fn(grid(), 0.0, |x| x).unwrap();
        assert!(pair(&x, &mu).unwrap().abs() < 1e-8);
    }

    #[test]
    fn second_moment_matches_fine_quadrature() {
        // Oracle: the same integral on a ten times finer grid.
        let fine = Grid1D::new(-10.0, 10.0, 20001).unwrap();
        let oracle = {
            let mu = DensityField::gaussian(fine, 0.0, 1.0, 1.0).unwrap();
            let f = SignedField::from_fn(fine, 0.0, |x| x * x).unwrap();
            pair(&f, &mu).unwrap()
        };
        let mu = DensityField::gaussian(grid(), 0.0, 1.0, 1.0).unwrap();
        let f = SignedField::from_fn(grid(), 0.0, |x| x * x).unwrap();
        let value = pair(&f, &mu).unwrap();
        assert!((value - oracle).abs() < 1e-6);
        assert!((value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pairing_rejects_other_grid() {
        let other = Grid1D::new(-10.0, 10.0, 11).unwrap();
        let mu = DensityField::gaussian(grid(), 0.0, 1.0, 1.0).unwrap();
        let f = SignedField::zeros(other, 0.0);
        assert!(matches!(pair(&f, &mu), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn l1_of_gaussian_difference_matches_fine_grid() {
        let norm_on = |g: Grid1D| {
            let a = DensityField::gaussian(g, 0.0, 1.0, 1.0).unwrap();
            let b = DensityField::gaussian(g, 0.5, 1.0, 1.0).unwrap();
            l1_distance(&a, &b).unwrap()
        };
        let oracle = norm_on(Grid1D::new(-10.0, 10.0, 20001).unwrap());
        let got = norm_on(grid());
        assert!((got - oracle).abs() < 1e-5, "{got} vs {oracle}");
        assert_eq!(l1_norm(&SignedField::zeros(grid(), 0.0)), 0.0);
        let p = DensityField::gaussian(grid(), 1.0, 0.7, 1.0).unwrap();
        assert!((l1_norm(&p) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn projection_clamps_noise_and_rejects_real_negativity() {
        let g = Grid1D::new(0.0, 1.0, 3).unwrap();
        let d = DensityField::new(g, vec![1.0, -1e-13, 0.5], 0.0).unwrap();
        assert_eq!(d.values()[1], 0.0);
        assert!(matches!(
            DensityField::new(g, vec![1.0, -1e-9, 0.5], 0.0),
            Err(Error::Negativity { index: 1, .. })
        ));
        assert!(SignedField::new(g, vec![0.0, f64::NAN, 0.0], 0.0).is_err());
    }

    #[test]
    fn mollified_delta_has_unit_mass() {
        let d = DensityField::mollified_delta(grid(), 0.37).unwrap();
        assert!((d.mass() - 1.0).abs() < 1e-14);
        assert!(DensityField::mollified_delta(grid(), 11.0).is_err());
    }
}
