//! Interacting particle system driven by idiosyncratic and common noise.
//!
//! `X^i_{k+1} = X^i_k + b(t_k, X^i_k, μ^N_k) dt + σ_ind(X^i_k) ΔB^i + σ_com(X^i_k) ΔW`
//! (Itô, Euler-Maruyama), with moment-form drifts evaluated on the
//! empirical measure `μ^N_k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::characteristics::CommonNoise;
use crate::coefficients::{Diffusion, InteractionDrift};
use crate::error::{Error, Result};
use crate::field::{l1_distance_values, DensityField, Field};
use crate::grid::{Grid1D, TimeGrid};
use crate::spde::{BrownianPath, PathSolution};

const CHUNK: usize = 1024;

/// Fraction of reflection events per particle above which a warning is
/// attached to the ensemble.
pub const REFLECTION_WARNING: f64 = 1e-3;

/// Particle positions at recorded time nodes.
#[derive(Debug, Clone, Serialize)]
pub struct ParticleEnsemble {
    domain: Grid1D,
    time: TimeGrid,
    common: BrownianPath,
    seed: u64,
    recorded: Vec<usize>,
    positions: Vec<Vec<f64>>,
    reflections: usize,
    warnings: Vec<String>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.positions[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn domain(&self) -> &Grid1D {
        &self.domain
    }

    pub fn common_path(&self) -> &BrownianPath {
        &self.common
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Time indices at which positions were kept.
    pub fn recorded(&self) -> &[usize] {
        &self.recorded
    }

    /// Positions at time index `k`, if recorded.
    pub fn positions(&self, k: usize) -> Option<&[f64]> {
        self.recorded
            .iter()
            .position(|r| *r == k)
            .map(|j| self.positions[j].as_slice())
    }

    pub fn reflections(&self) -> usize {
        self.reflections
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Sample mean and (unbiased) variance at time index `k`.
    pub fn moments(&self, k: usize) -> Result<(f64, f64)> {
        let x = self.require(k)?;
        let n = x.len() as f64;
        let mean = ordered_sum(x, |v| v) / n;
        let var = ordered_sum(x, |v| (v - mean) * (v - mean)) / (n - 1.0);
        Ok((mean, var))
    }

    fn require(&self, k: usize) -> Result<&[f64]> {
        self.positions(k)
            .ok_or_else(|| Error::InvalidInput(format!("time index {k} was not recorded")))
    }

    /// Writes `t, particle, x` rows for the recorded nodes.
    pub fn write_dump(&self, out: &mut impl std::io::Write) -> Result<()> {
        writeln!(out, "t,particle,x")?;
        for (k, xs) in self.recorded.iter().zip(&self.positions) {
            for (i, x) in xs.iter().enumerate() {
                writeln!(out, "{},{},{}", self.time.t(*k), i, x)?;
            }
        }
        Ok(())
    }
}

// Chunked sum with a fixed reduction order, independent of the worker count.
fn ordered_sum(x: &[f64], f: impl Fn(f64) -> f64 + Sync) -> f64 {
    let parts: Vec<f64> = x
        .par_chunks(CHUNK)
        .map(|c| c.iter().map(|v| f(*v)).sum())
        .collect();
    parts.iter().sum()
}

/// Which time nodes an ensemble keeps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Record {
    All,
    Nodes(Vec<usize>),
}

/// Runs `n` particles from `y` on the grid's interval with reflecting
/// edges. `diffusion` is `σ_ind²` (`None` for no idiosyncratic noise).
/// Particle `i` draws its initial position and its idiosyncratic increments
/// from stream `i` of a ChaCha8 generator keyed by `seed`.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    n: usize,
    y: &DensityField,
    diffusion: Option<&Diffusion>,
    drift: &InteractionDrift,
    noise: &CommonNoise,
    common: &BrownianPath,
    seed: u64,
    record: Record,
) -> Result<ParticleEnsemble> {
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 particles, got {n}"
        )));
    }
    if common.dims() != 1 {
        return Err(Error::InvalidInput(
            "the particle system takes a 1-dimensional common path".into(),
        ));
    }
    let time = *common.time();
    let recorded = match record {
        Record::All => (0..time.nodes()).collect(),
        Record::Nodes(mut ks) => {
            ks.sort_unstable();
            ks.dedup();
            if let Some(k) = ks.iter().find(|k| **k >= time.nodes()) {
                return Err(Error::InvalidInput(format!(
                    "time index {k} beyond the horizon"
                )));
            }
            ks
        }
    };
    let domain = *y.grid();
    let cdf = Cdf::new(y)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut x: Vec<f64> = rngs
        .iter_mut()
        .map(|r| cdf.invert(r.random::<f64>()))
        .collect();
    let mut positions = Vec::with_capacity(recorded.len());
    if recorded.first() == Some(&0) {
        positions.push(x.clone());
    }
    let dt = time.dt();
    let sd = dt.sqrt();
    let drift = &drift.0;
    let w = common.component(0);
    let (lo, hi) = (domain.x_min(), domain.x_max());
    let mut reflections = 0usize;
    for k in 1..time.nodes() {
        let t = time.t(k - 1);
        let s: Vec<f64> = drift
            .kernels()
            .iter()
            .map(|g| ordered_sum(&x, |v| g.eval(v)) / n as f64)
            .collect();
        let dw = w[k] - w[k - 1];
        let events: usize = x
            .par_iter_mut()
            .zip(rngs.par_iter_mut())
            .map(|(xi, rng)| {
                let z: f64 = StandardNormal.sample(rng);
                let a = diffusion.map_or(0.0, |d| d.eval(*xi).max(0.0));
                *xi += drift.value_at(t, *xi, &s) * dt + a.sqrt() * sd * z + noise.value(*xi) * dw;
                reflect(xi, lo, hi)
            })
            .sum();
        reflections += events;
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("particle position at step {k}"),
                index: i,
            });
        }
        if recorded.binary_search(&k).is_ok() {
            positions.push(x.clone());
        }
    }
    let mut warnings = Vec::new();
    let rate = reflections as f64 / n as f64;
    if rate > REFLECTION_WARNING {
        warnings.push(format!(
            "{reflections} reflections for {n} particles ({:.3}%); the domain may be too small",
            100.0 * rate
        ));
    }
    Ok(ParticleEnsemble {
        domain,
        time,
        common: common.clone(),
        seed,
        recorded,
        positions,
        reflections,
        warnings,
    })
}

fn reflect(x: &mut f64, lo: f64, hi: f64) -> usize {
    let mut events = 0;
    while *x < lo || *x > hi {
        *x = if *x < lo {
            2.0 * lo - *x
        } else {
            2.0 * hi - *x
        };
        events += 1;
        if events > 8 {
            *x = x.clamp(lo, hi);
        }
    }
    events
}

// Piecewise-linear CDF of the gridded density.
struct Cdf {
    nodes: Vec<f64>,
    cum: Vec<f64>,
}

impl Cdf {
    fn new(y: &DensityField) -> Result<Self> {
        let grid = y.grid();
        let v = y.values();
        let h = grid.spacing();
        let mut cum = vec![0.0; v.len()];
        for i in 1..v.len() {
            cum[i] = cum[i - 1] + 0.5 * h * (v[i - 1] + v[i]);
        }
        let total = *cum.last().expect("nonempty grid");
        if !(total > 0.0) {
            return Err(Error::InvalidInput("initial density has no mass".into()));
        }
        cum.iter_mut().for_each(|c| *c /= total);
        Ok(Self {
            nodes: grid.nodes(),
            cum,
        })
    }

    fn invert(&self, u: f64) -> f64 {
        let j = self
            .cum
            .partition_point(|c| *c < u)
            .clamp(1, self.cum.len() - 1);
        let (c0, c1) = (self.cum[j - 1], self.cum[j]);
        let f = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        self.nodes[j - 1] + f * (self.nodes[j] - self.nodes[j - 1])
    }
}

/// Silverman's rule `1.06 · std · N^{−1/5}`.
pub fn silverman_bandwidth(positions: &[f64]) -> f64 {
    let n = positions.len() as f64;
    let mean = ordered_sum(positions, |v| v) / n;
    let var = ordered_sum(positions, |v| (v - mean) * (v - mean)) / (n - 1.0);
    1.06 * var.sqrt() * n.powf(-0.2)
}

/// Gaussian kernel density estimate of `μ^N_t` on the ensemble's grid,
/// normalized to unit mass on the grid. `bandwidth = None` uses
/// [`silverman_bandwidth`].
pub fn empirical_density(
    ensemble: &ParticleEnsemble,
    k: usize,
    bandwidth: Option<f64>,
) -> Result<DensityField> {
    let x = ensemble.require(k)?;
    let bw = bandwidth.unwrap_or_else(|| silverman_bandwidth(x));
    if !(bw > 0.0 && bw.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "bandwidth must be positive, got {bw}"
        )));
    }
    let mut sorted = x.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let grid = ensemble.domain;
    let reach = 9.0 * bw;
    let norm = 1.0 / (sorted.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    let mut values: Vec<f64> = grid
        .nodes()
        .par_iter()
        .map(|node| {
            let a = sorted.partition_point(|v| *v < node - reach);
            let b = sorted.partition_point(|v| *v <= node + reach);
            sorted[a..b]
                .iter()
                .map(|v| {
                    let z = (node - v) / bw;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    let mass = crate::field::l1_values(&grid, &values);
    if mass > 0.0 {
        values.iter_mut().for_each(|v| *v /= mass);
    }
    DensityField::new(grid, values, ensemble.time.t(k))
}

/// `‖KDE(μ^N_t) − v_t‖_{L¹}` at the requested time indices; the ensemble
/// must have been driven by the same common path as the SPDE solution.
pub fn chaos_gap(
    spde: &PathSolution,
    ensemble: &ParticleEnsemble,
    times: &[usize],
) -> Result<Vec<f64>> {
    if spde.path() != ensemble.common_path() {
        return Err(Error::InvalidInput(
            "SPDE solution and ensemble use different common paths".into(),
        ));
    }
    spde.grid().ensure_same(&ensemble.domain)?;
    times
        .iter()
        .map(|k| {
            let kde = empirical_density(ensemble, *k, None)?;
            let v = spde.undressed().get(*k).ok_or_else(|| {
                Error::InvalidInput(format!("time index {k} beyond the SPDE horizon"))
            })?;
            Ok(l1_distance_values(
                &ensemble.domain,
                kde.values(),
                v.values(),
            ))
        })
        .collect()
}

/// Least-squares slope of `log gap` against `log N`.
pub fn log_log_slope(ns: &[usize], gaps: &[f64]) -> f64 {
    let xs: Vec<f64> = ns.iter().map(|n| (*n as f64).ln()).collect();
    let ys: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}
