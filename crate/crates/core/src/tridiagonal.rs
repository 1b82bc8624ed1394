//! Tridiagonal solves with optional low-rank corrections.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tridiagonal matrix stored by diagonals; `lower[i]` is entry `(i+1, i)`
/// and `upper[i]` is entry `(i, i+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn transpose(&self) -> Self {
        Self {
            lower: self.upper.clone(),
            diag: self.diag.clone(),
            upper: self.lower.clone(),
        }
    }

    /// `I + c·self`.
    pub fn shifted_identity(&self, c: f64) -> Self {
        Self {
            lower: self.lower.iter().map(|v| c * v).collect(),
            diag: self.diag.iter().map(|v| 1.0 + c * v).collect(),
            upper: self.upper.iter().map(|v| c * v).collect(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * x[i];
                if i > 0 {
                    v += self.lower[i - 1] * x[i - 1];
                }
                if i + 1 < n {
                    v += self.upper[i] * x[i + 1];
                }
                v
            })
            .collect()
    }

    /// Thomas algorithm (no pivoting; intended for diagonally dominant systems).
    pub fn solve(&self, r: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut beta = self.diag[0];
        if beta == 0.0 {
            return Err(Error::InvalidInput("singular tridiagonal system".into()));
        }
        c[0] = if n > 1 { self.upper[0] / beta } else { 0.0 };
        d[0] = r[0] / beta;
        for i in 1..n {
            beta = self.diag[i] - self.lower[i - 1] * c[i - 1];
            if beta == 0.0 {
                return Err(Error::InvalidInput("singular tridiagonal system".into()));
            }
            if i + 1 < n {
                c[i] = self.upper[i] / beta;
            }
            d[i] = (r[i] - self.lower[i - 1] * d[i - 1]) / beta;
        }
        for i in (0..n - 1).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        Ok(d)
    }
}

/// `M + Σ_r u_r v_rᵀ` with tridiagonal `M`, solved by the Woodbury identity.
#[derive(Debug, Clone)]
pub struct LowRankSystem {
    m: Tridiagonal,
    v: Vec<Vec<f64>>,
    // M⁻¹ u_r
    z: Vec<Vec<f64>>,
    capacitance: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl LowRankSystem {
    pub fn new(m: Tridiagonal, u: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<Self> {
        let rank = u.len();
        let z = u
            .iter()
            .map(|col| m.solve(col))
            .collect::<Result<Vec<_>>>()?;
        let capacitance = if rank == 0 {
            None
        } else {
            let mut cap = DMatrix::<f64>::identity(rank, rank);
            for a in 0..rank {
                for b in 0..rank {
                    cap[(a, b)] += dot(&v[a], &z[b]);
                }
            }
            Some(cap.lu())
        };
        Ok(Self {
            m,
            v,
            z,
            capacitance,
        })
    }

    pub fn solve(&self, r: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.m.solve(r)?;
        if let Some(lu) = &self.capacitance {
            let rhs = DVector::from_iterator(self.v.len(), self.v.iter().map(|v| dot(v, &y)));
            let coef = lu
                .solve(&rhs)
                .ok_or_else(|| Error::InvalidInput("singular low-rank correction".into()))?;
            for (zr, c) in self.z.iter().zip(coef.iter()) {
                y.iter_mut().zip(zr).for_each(|(yi, zi)| *yi -= c * zi);
            }
        }
        Ok(y)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(t: &Tridiagonal, u: &[Vec<f64>], v: &[Vec<f64>]) -> DMatrix<f64> {
        let n = t.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = t.diag[i];
            if i + 1 < n {
                m[(i + 1, i)] = t.lower[i];
                m[(i, i + 1)] = t.upper[i];
            }
        }
        for (ur, vr) in u.iter().zip(v) {
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] += ur[i] * vr[j];
                }
            }
        }
        m
    }

    #[test]
    fn woodbury_matches_dense_solve() {
        let n = 12;
        let t = Tridiagonal {
            lower: (0..n - 1).map(|i| -0.3 - 0.01 * i as f64).collect(),
            diag: (0..n).map(|i| 2.0 + 0.1 * i as f64).collect(),
            upper: (0..n - 1).map(|i| -0.5 + 0.02 * i as f64).collect(),
        };
        let u = vec![
            (0..n).map(|i| (i as f64).sin()).collect::<Vec<_>>(),
            vec![0.1; n],
        ];
        let v = vec![
            (0..n).map(|i| 0.05 * i as f64).collect::<Vec<_>>(),
            (0..n).map(|i| (i as f64).cos() * 0.1).collect(),
        ];
        let r: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let sys = LowRankSystem::new(t.clone(), u.clone(), v.clone()).unwrap();
        let x = sys.solve(&r).unwrap();
        let m = dense(&t, &u, &v);
        let back = &m * DVector::from_vec(x);
        for i in 0..n {
            assert!((back[i] - r[i]).abs() < 1e-12);
        }
        let xt = LowRankSystem::new(t.transpose(), v.clone(), u.clone())
            .unwrap()
            .solve(&r)
            .unwrap();
        let back = m.transpose() * DVector::from_vec(xt);
        for i in 0..n {
            assert!((back[i] - r[i]).abs() < 1e-12);
        }
    }
}
