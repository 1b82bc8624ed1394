//! Pathwise solutions of the McKean-Vlasov SPDE with common noise.
//!
//! For a fixed Brownian path the unknown is transformed by the stochastic
//! characteristics, `g_t = e^{−W_t Ω'} v_t`, which solves the deterministic
//! equation `ġ = ½(Ãg)'' − (b̃g)'` with coefficients dressed at `w = W_t`.
//! Each time step freezes the noise at the midpoint value
//! `½(W_{k−1} + W_k)` and advances `g` by one Crank-Nicolson (implicit
//! midpoint) step; `v_k` is recovered as `e^{W_k Ω'} g_k`.

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{
    dress, jacobian_sups, transport, CommonNoise, DressedCoefficients, FlowMap, FlowPoint,
    FlowTracker, GridFlow,
};
use crate::coefficients::Coefficients;
use crate::error::{Error, Result};
use crate::field::{l1_distance_values, l1_values, DensityField, Field, SignedField};
use crate::grid::{Grid1D, TimeGrid};
use crate::kernels::central_difference;
use crate::sensitivity::{
    generator, propagate_first_variation, solve_second_variation, symmetry_residual, CnStep,
    LinearData, LinearizedPropagator, SecondVariation, SensitivityKernel, StepMap,
};

/// Brownian motion sampled on a time grid, one row per component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrownianPath {
    time: TimeGrid,
    seed: Option<u64>,
    values: Vec<Vec<f64>>,
}

impl BrownianPath {
    /// Path from explicit node values (`values[j][k]`, `W_j(t_0) = 0`).
    pub fn new(time: TimeGrid, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput(
                "a Brownian path needs at least one component".into(),
            ));
        }
        for row in &values {
            if row.len() != time.nodes() {
                return Err(Error::GridMismatch(format!(
                    "path has {} values for {} time nodes",
                    row.len(),
                    time.nodes()
                )));
            }
            if row[0] != 0.0 {
                return Err(Error::InvalidInput("a Brownian path starts at 0".into()));
            }
            if let Some(index) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "Brownian path".into(),
                    index,
                });
            }
        }
        Ok(Self {
            time,
            seed: None,
            values,
        })
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn component(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    pub fn terminal(&self, j: usize) -> f64 {
        *self.values[j].last().expect("nonempty path")
    }

    /// Every `factor`-th node; the same path on a coarser grid.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.time.steps().is_multiple_of(factor) {
            return Err(Error::InvalidInput(format!(
                "cannot coarsen {} steps by {factor}",
                self.time.steps()
            )));
        }
        let time = TimeGrid::new(self.time.horizon(), self.time.steps() / factor)?;
        let values = self
            .values
            .iter()
            .map(|r| r.iter().step_by(factor).copied().collect())
            .collect();
        Ok(Self {
            time,
            seed: self.seed,
            values,
        })
    }

    /// `Σ_j c_j W_j` at every node.
    pub fn combined(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.dims() {
            return Err(Error::InvalidInput(format!(
                "{} noise coefficients for a {}-dimensional path",
                weights.len(),
                self.dims()
            )));
        }
        Ok((0..self.time.nodes())
            .map(|k| {
                weights
                    .iter()
                    .zip(&self.values)
                    .map(|(c, w)| c * w[k])
                    .sum()
            })
            .collect())
    }
}

/// Brownian path with `√dt N(0, 1)` increments; component `j` uses stream
/// `j` of a ChaCha8 generator keyed by `seed`, so the path is a function of
/// `(seed, grid, dims)` only.
pub fn sample_path(seed: u64, time: TimeGrid, dims: usize) -> Result<BrownianPath> {
    if dims == 0 {
        return Err(Error::InvalidInput("dims must be at least 1".into()));
    }
    let sd = time.dt().sqrt();
    let values = (0..dims)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let mut w = Vec::with_capacity(time.nodes());
            let mut acc = 0.0;
            w.push(acc);
            for _ in 0..time.steps() {
                let z: f64 = StandardNormal.sample(&mut rng);
                acc += sd * z;
                w.push(acc);
            }
            w
        })
        .collect();
    Ok(BrownianPath {
        time,
        seed: Some(seed),
        values,
    })
}

/// How the measure argument of `b̃` is resolved within a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Moments of the previous step.
    Lag,
    /// Moments of the step midpoint, iterated to the tolerance.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathOptions {
    pub coupling: Coupling,
    pub tolerance: f64,
    pub max_inner: usize,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            coupling: Coupling::Lag,
            tolerance: 1e-8,
            max_inner: 100,
        }
    }
}

/// Dressed and undressed solution along one noise path.
#[derive(Debug, Clone, Serialize)]
pub struct PathSolution {
    time: TimeGrid,
    path: BrownianPath,
    noise: Vec<f64>,
    dressed: Vec<DensityField>,
    undressed: Vec<DensityField>,
    inner_iterations: Vec<usize>,
}

impl PathSolution {
    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn grid(&self) -> &Grid1D {
        self.dressed[0].grid()
    }

    pub fn path(&self) -> &BrownianPath {
        &self.path
    }

    /// Scalar noise value driving the flow at each node (`W` in one
    /// dimension, `σ_com · W` for constant multidimensional noise).
    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn dressed(&self) -> &[DensityField] {
        &self.dressed
    }

    pub fn undressed(&self) -> &[DensityField] {
        &self.undressed
    }

    pub fn at(&self, k: usize) -> &DensityField {
        &self.undressed[k]
    }

    pub fn terminal(&self) -> &DensityField {
        self.undressed.last().expect("nonempty path solution")
    }

    pub fn inner_iterations(&self) -> &[usize] {
        &self.inner_iterations
    }

    pub fn masses(&self) -> Vec<f64> {
        self.undressed.iter().map(|f| f.mass()).collect()
    }

    /// Writes `t, x, v` rows for the requested time indices, preceded by
    /// comment lines holding the seed and the noise values.
    pub fn write_dump(&self, out: &mut impl Write, snapshots: &[usize]) -> Result<()> {
        if let Some(seed) = self.path.seed() {
            writeln!(out, "# seed {seed}")?;
        }
        writeln!(out, "# t,W")?;
        for k in 0..self.time.nodes() {
            let w: Vec<String> = (0..self.path.dims())
                .map(|j| self.path.component(j)[k].to_string())
                .collect();
            writeln!(out, "# {},{}", self.time.t(k), w.join(","))?;
        }
        writeln!(out, "t,x,v")?;
        for &k in snapshots {
            let field = self
                .undressed
                .get(k)
                .ok_or_else(|| Error::InvalidInput(format!("snapshot index {k} out of range")))?;
            let grid = field.grid();
            for (i, v) in field.values().iter().enumerate() {
                writeln!(out, "{},{},{}", self.time.t(k), grid.x(i), v)?;
            }
        }
        Ok(())
    }
}

/// Pathwise solver for a fixed grid, coefficients and noise field.
#[derive(Debug, Clone)]
pub struct PathSolver {
    grid: Grid1D,
    time: TimeGrid,
    coeffs: Coefficients,
    flow: Arc<FlowMap>,
    options: PathOptions,
    warnings: Vec<String>,
}

// Per-step flows: dressing at the midpoint value, undressing at the node.
struct StepFlows<'a> {
    flow: &'a FlowMap,
    noise: &'a [f64],
    mid: FlowTracker,
    node: FlowTracker,
}

impl<'a> StepFlows<'a> {
    fn new(flow: &'a FlowMap, grid: Grid1D, noise: &'a [f64]) -> Self {
        Self {
            flow,
            noise,
            mid: FlowTracker::new(grid),
            node: FlowTracker::new(grid),
        }
    }

    // Flows for the step ending at node k.
    fn step(&mut self, k: usize) -> Result<(GridFlow, GridFlow)> {
        let w_mid = 0.5 * (self.noise[k - 1] + self.noise[k]);
        let mid = self.mid.advance_to(self.flow, w_mid)?.clone();
        let node = self.node.advance_to(self.flow, self.noise[k])?.clone();
        Ok((mid, node))
    }
}

impl PathSolver {
    pub fn new(grid: Grid1D, time: TimeGrid, coeffs: Coefficients, flow: FlowMap) -> Result<Self> {
        if !coeffs.potential.is_zero() {
            return Err(Error::Config(
                "the stochastic solver covers drift-only dynamics; the potential must be zero"
                    .into(),
            ));
        }
        let warnings = jacobian_growth_warnings(&flow, &grid);
        Ok(Self {
            grid,
            time,
            coeffs,
            flow: Arc::new(flow),
            options: PathOptions::default(),
            warnings,
        })
    }

    pub fn with_options(mut self, options: PathOptions) -> Result<Self> {
        if !(options.tolerance > 0.0) || options.max_inner == 0 {
            return Err(Error::InvalidInput(
                "inner tolerance and iteration cap must be positive".into(),
            ));
        }
        self.options = options;
        Ok(self)
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coeffs
    }

    pub fn flow(&self) -> &FlowMap {
        &self.flow
    }

    pub fn options(&self) -> &PathOptions {
        &self.options
    }

    /// Configuration warnings (flows whose Jacobians are not uniformly
    /// bounded in the noise value).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn check_path(&self, path: &BrownianPath) -> Result<()> {
        if path.time() != &self.time {
            return Err(Error::GridMismatch(
                "path and solver use different time grids".into(),
            ));
        }
        Ok(())
    }

    /// Solves along a one-dimensional path.
    pub fn solve(&self, y: &DensityField, path: &BrownianPath) -> Result<PathSolution> {
        self.check_path(path)?;
        if path.dims() != 1 {
            return Err(Error::InvalidInput(format!(
                "a state-dependent noise field needs a 1-dimensional path, got {}",
                path.dims()
            )));
        }
        self.solve_with_noise(y, path, path.component(0).to_vec())
    }

    fn solve_with_noise(
        &self,
        y: &DensityField,
        path: &BrownianPath,
        noise: Vec<f64>,
    ) -> Result<PathSolution> {
        y.grid().ensure_same(&self.grid)?;
        let grid = self.grid;
        let dt = self.time.dt();
        let mut dressed = vec![y.clone().with_time(0.0)];
        let mut undressed = vec![y.clone().with_time(0.0)];
        let mut inner = Vec::with_capacity(self.time.steps());
        let mut flows = StepFlows::new(&self.flow, grid, &noise);
        for k in 1..self.time.nodes() {
            let (mid, node) = flows.step(k)?;
            let coeffs = dress(
                &self.coeffs.diffusion,
                &self.coeffs.drift,
                self.flow.noise(),
                &mid,
            )?;
            let t_mid = self.time.t(k - 1) + 0.5 * dt;
            let prev = dressed[k - 1].values();
            let (next, iterations) = self.step(&coeffs, t_mid, prev).map_err(|e| at_step(e, k))?;
            inner.push(iterations);
            let t = self.time.t(k);
            let v = transport(&grid, &next, &node.forward, self.flow.interpolation());
            dressed.push(DensityField::new(grid, next, t).map_err(|e| at_step(e, k))?);
            undressed.push(DensityField::new(grid, v, t).map_err(|e| at_step(e, k))?);
        }
        Ok(PathSolution {
            time: self.time,
            path: path.clone(),
            noise,
            dressed,
            undressed,
            inner_iterations: inner,
        })
    }

    // One implicit-midpoint step of the dressed equation.
    fn step(
        &self,
        coeffs: &DressedCoefficients,
        t: f64,
        prev: &[f64],
    ) -> Result<(Vec<f64>, usize)> {
        let grid = &self.grid;
        let half = 0.5 * self.time.dt();
        let zeros = vec![0.0; grid.len()];
        let drift = &self.coeffs.drift;
        let strict = self.options.coupling == Coupling::Strict && drift.0.arity() > 0;
        let mut s = coeffs.moments(grid, prev);
        let mut history = Vec::new();
        loop {
            let b = coeffs.drift(t, drift, &s)?;
            let op = generator(grid, &coeffs.diffusion, &b, &zeros);
            let mut rhs = op.apply(prev);
            rhs.iter_mut()
                .zip(prev)
                .for_each(|(r, p)| *r = p + half * *r);
            let next = op.shifted_identity(-half).solve(&rhs)?;
            if !strict {
                return Ok((next, 1));
            }
            let mid: Vec<f64> = prev.iter().zip(&next).map(|(a, b)| 0.5 * (a + b)).collect();
            let s_new = coeffs.moments(grid, &mid);
            let scale = 1.0 + s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let change = s
                .iter()
                .zip(&s_new)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
                / scale;
            history.push(change);
            s = s_new;
            if change <= self.options.tolerance {
                return Ok((next, history.len()));
            }
            if history.len() >= self.options.max_inner {
                return Err(Error::NonConvergence { residuals: history });
            }
        }
    }

    /// Linearization of the discrete map `g_0 ↦ g_k` (exact for
    /// [`Coupling::Strict`]).
    pub fn propagator(&self, solution: &PathSolution) -> Result<LinearizedPropagator> {
        if solution.time() != &self.time {
            return Err(Error::GridMismatch(
                "solution and solver use different time grids".into(),
            ));
        }
        let grid = self.grid;
        let dt = self.time.dt();
        let drift = &self.coeffs.drift;
        let mut flows = StepFlows::new(&self.flow, grid, solution.noise());
        let mut steps: Vec<Box<dyn StepMap>> = Vec::with_capacity(self.time.steps());
        for k in 1..self.time.nodes() {
            let (mid_flow, _) = flows.step(k)?;
            let c = dress(&self.coeffs.diffusion, drift, self.flow.noise(), &mid_flow)?;
            let t = self.time.t(k - 1) + 0.5 * dt;
            let mid: Vec<f64> = solution.dressed[k - 1]
                .values()
                .iter()
                .zip(solution.dressed[k].values())
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            let s = c.moments(&grid, &mid);
            let data = LinearData::new(
                &grid,
                c.drift(t, drift, &s)?,
                vec![0.0; grid.len()],
                mid,
                c.drift_gradients(t, drift, &s),
                Vec::new(),
                &c.kernels,
                &[],
                c.drift_hessians(t, drift, &s),
                None,
            );
            steps.push(Box::new(CnStep::new(&grid, &c.diffusion, data, dt)?));
        }
        LinearizedPropagator::from_steps(grid, self.time, steps)
    }

    fn forward_points(&self, solution: &PathSolution) -> Result<Vec<Vec<FlowPoint>>> {
        let mut tracker = FlowTracker::new(self.grid);
        solution
            .noise()
            .iter()
            .map(|w| Ok(tracker.advance_to(&self.flow, *w)?.forward.clone()))
            .collect()
    }

    fn undress(&self, points: &[Vec<FlowPoint>], k: usize, f: &SignedField) -> Result<SignedField> {
        let v = transport(
            &self.grid,
            f.values(),
            &points[k],
            self.flow.interpolation(),
        );
        SignedField::new(self.grid, v, f.time())
    }
}

fn at_step(e: Error, k: usize) -> Error {
    match e {
        Error::Negativity { index, value, .. } => Error::Negativity {
            index,
            value,
            time_index: Some(k),
        },
        other => other,
    }
}

fn jacobian_growth_warnings(flow: &FlowMap, grid: &Grid1D) -> Vec<String> {
    if flow.noise().as_constant().is_some() {
        return Vec::new();
    }
    let ws: Vec<f64> = (-5..=5).map(f64::from).collect();
    let xs: Vec<f64> = (0..=20)
        .map(|i| grid.x_min() + (grid.x_max() - grid.x_min()) * i as f64 / 20.0)
        .collect();
    match jacobian_sups(flow, &ws, &xs) {
        Ok(sups) => {
            let worst = sups.iter().fold(0.0f64, |m, (_, s)| m.max(*s));
            if worst > 100.0 {
                vec![format!(
                    "flow Jacobians reach {worst:.3e} for |w| ≤ 5; bounds uniform in the noise value are not guaranteed"
                )]
            } else {
                Vec::new()
            }
        }
        Err(e) => vec![format!("flow leaves the admissible box for |w| ≤ 5 ({e})")],
    }
}

/// Solves along a one-dimensional path with state-dependent noise.
pub fn solve_path_1d(
    solver: &PathSolver,
    y: &DensityField,
    path: &BrownianPath,
) -> Result<PathSolution> {
    solver.solve(y, path)
}

/// Solves with constant noise coefficients `σ_com = (c_1, …, c_d'')` in one
/// space dimension. The flow is the translation by `Σ_j c_j W_j`, so the
/// problem is the scalar-noise one for the unit field and the combined
/// path.
pub fn solve_path_multi(
    grid: Grid1D,
    time: TimeGrid,
    coeffs: Coefficients,
    sigma: &[f64],
    y: &DensityField,
    path: &BrownianPath,
    options: PathOptions,
) -> Result<PathSolution> {
    let solver = PathSolver::new(grid, time, coeffs, FlowMap::new(CommonNoise::Constant(1.0)))?
        .with_options(options)?;
    solver.check_path(path)?;
    let shift = path.combined(sigma)?;
    solver.solve_with_noise(y, path, shift)
}

/// First and second variations along a path, undressed to the `v`
/// variable.
#[derive(Debug, Clone, Serialize)]
pub struct PathSensitivity {
    pub first: SensitivityKernel,
    pub second: Option<SecondVariation>,
    /// `sup_t ‖η(x, z) − η(z, x)‖` over the requested pairs (dressed
    /// variable).
    pub symmetry: Option<f64>,
}

/// Sensitivities of `v_t` with respect to the initial density, on a fixed
/// path. `pairs` index into `probes`.
pub fn sensitivity_on_path(
    solver: &PathSolver,
    solution: &PathSolution,
    probes: &[f64],
    pairs: &[(usize, usize)],
) -> Result<PathSensitivity> {
    let prop = solver.propagator(solution)?;
    let xi = propagate_first_variation(&prop, probes)?;
    let (second, symmetry) = if pairs.is_empty() {
        (None, None)
    } else {
        let eta = solve_second_variation(&prop, &xi, pairs)?;
        (Some(eta), Some(symmetry_residual(&prop, &xi, pairs)?))
    };
    let points = solver.forward_points(solution)?;
    let first = xi.map_fields(|k, f| solver.undress(&points, k, f))?;
    let second = match second {
        Some(eta) => Some(eta.map_fields(|k, f| solver.undress(&points, k, f))?),
        None => None,
    };
    Ok(PathSensitivity {
        first,
        second,
        symmetry,
    })
}

/// `‖v¹_t − v²_t‖ / ‖Y¹ − Y²‖` at every node for two initial densities on
/// the same path.
pub fn pathwise_stability(
    solver: &PathSolver,
    y1: &DensityField,
    y2: &DensityField,
    path: &BrownianPath,
) -> Result<Vec<f64>> {
    let d0 = l1_distance_values(y1.grid(), y1.values(), y2.values());
    if d0 <= 0.0 {
        return Err(Error::InvalidInput(
            "stability pair has identical members".into(),
        ));
    }
    let a = solver.solve(y1, path)?;
    let b = solver.solve(y2, path)?;
    Ok(a.undressed()
        .iter()
        .zip(b.undressed())
        .map(|(u, v)| l1_distance_values(u.grid(), u.values(), v.values()) / d0)
        .collect())
}

/// Direct semi-implicit Euler-Maruyama scheme for the Itô form
/// `dv = [½((a + σ²)v)'' − (bv)'] dt − (σv)' dW`: implicit second-order
/// term, explicit drift and noise. Returns the terminal density values.
pub fn solve_ito_direct(
    grid: Grid1D,
    time: TimeGrid,
    coeffs: &Coefficients,
    noise: &CommonNoise,
    y: &DensityField,
    path: &BrownianPath,
) -> Result<Vec<f64>> {
    y.grid().ensure_same(&grid)?;
    if path.time() != &time || path.dims() != 1 {
        return Err(Error::GridMismatch(
            "the direct scheme needs a 1-dimensional path on the solver grid".into(),
        ));
    }
    if !coeffs.potential.is_zero() {
        return Err(Error::Config(
            "the stochastic solver covers drift-only dynamics; the potential must be zero".into(),
        ));
    }
    let dt = time.dt();
    let nodes = grid.nodes();
    let sigma: Vec<f64> = nodes.iter().map(|x| noise.value(*x)).collect();
    let total: Vec<f64> = nodes
        .iter()
        .zip(&sigma)
        .map(|(x, s)| coeffs.diffusion.eval(*x) + s * s)
        .collect();
    let zeros = vec![0.0; grid.len()];
    let implicit = generator(&grid, &total, &zeros, &zeros).shifted_identity(-dt);
    let w = path.component(0);
    let drift = &coeffs.drift.0;
    let kernels = drift.kernel_samples(&grid);
    let mut v = y.values().to_vec();
    for k in 1..time.nodes() {
        let t = time.t(k - 1);
        let s = crate::coefficients::MomentFunctional::moments_with(&grid, &kernels, &v);
        let b = drift.values_with_moments(t, &grid, &s)?;
        let bv: Vec<f64> = b.iter().zip(&v).map(|(a, c)| a * c).collect();
        let sv: Vec<f64> = sigma.iter().zip(&v).map(|(a, c)| a * c).collect();
        let db = central_difference(&grid, &bv);
        let ds = central_difference(&grid, &sv);
        let dw = w[k] - w[k - 1];
        let rhs: Vec<f64> = (0..v.len())
            .map(|i| v[i] - dt * db[i] - dw * ds[i])
            .collect();
        v = implicit.solve(&rhs)?;
        if let Some(index) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("direct Itô scheme at step {k}"),
                index,
            });
        }
    }
    Ok(v)
}

/// Terminal L¹ distance between the transform solution and the direct Itô
/// scheme on the same path.
pub fn ito_stratonovich_check(
    solver: &PathSolver,
    y: &DensityField,
    path: &BrownianPath,
) -> Result<f64> {
    let transformed = solver.solve(y, path)?;
    let direct = solve_ito_direct(
        solver.grid,
        solver.time,
        &solver.coeffs,
        solver.flow.noise(),
        y,
        path,
    )?;
    Ok(l1_distance_values(
        &solver.grid,
        transformed.terminal().values(),
        &direct,
    ))
}

/// Monte Carlo estimate of `E‖g¹_t − g²_t‖ / ‖Y¹ − Y²‖` with its fitted
/// growth constants.
#[derive(Debug, Clone, Serialize)]
pub struct ExpectationStability {
    /// Least-squares slope of `log ratio` against `t` through the origin.
    pub c_fit: f64,
    /// Smallest `C` with `ratio_t ≤ e^{Ct}` at every node.
    pub c_bound: f64,
    pub times: Vec<f64>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// Averages the dressed-variable stability ratio over `n_paths` paths with
/// seeds `seed, seed + 1, …`. Paths run in parallel; the average is summed
/// in seed order.
pub fn expectation_stability(
    solver: &PathSolver,
    y1: &DensityField,
    y2: &DensityField,
    n_paths: usize,
    seed: u64,
) -> Result<ExpectationStability> {
    if n_paths < 10 {
        return Err(Error::InvalidInput(format!(
            "expectation_stability needs at least 10 paths, got {n_paths}"
        )));
    }
    let grid = solver.grid;
    let d0 = l1_distance_values(&grid, y1.values(), y2.values());
    let times = solver.time.times();
    let seeds: Vec<u64> = (0..n_paths as u64).map(|p| seed.wrapping_add(p)).collect();
    if d0 <= 0.0 {
        return Ok(ExpectationStability {
            c_fit: 0.0,
            c_bound: 0.0,
            ratios: vec![0.0; times.len()],
            times,
            seeds,
        });
    }
    let per_path = seeds
        .par_iter()
        .map(|s| {
            let path = sample_path(*s, solver.time, 1)?;
            let a = solver.solve(y1, &path)?;
            let b = solver.solve(y2, &path)?;
            Ok(a.dressed()
                .iter()
                .zip(b.dressed())
                .map(|(u, v)| l1_distance_values(&grid, u.values(), v.values()) / d0)
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ratios = vec![0.0; times.len()];
    for r in &per_path {
        ratios.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    ratios.iter_mut().for_each(|r| *r /= n_paths as f64);
    let (c_fit, c_bound) = growth_constants(&times, &ratios);
    Ok(ExpectationStability {
        c_fit,
        c_bound,
        times,
        ratios,
        seeds,
    })
}

fn growth_constants(times: &[f64], ratios: &[f64]) -> (f64, f64) {
    let (mut num, mut den) = (0.0, 0.0);
    let mut bound = f64::NEG_INFINITY;
    for (t, r) in times.iter().zip(ratios) {
        if *t > 0.0 && *r > 0.0 {
            let l = r.ln();
            num += t * l;
            den += t * t;
            bound = bound.max(l / t);
        }
    }
    if den == 0.0 {
        (0.0, 0.0)
    } else {
        (num / den, bound)
    }
}

/// L¹ norm of the undressed solution at every node.
pub fn l1_norms(solution: &PathSolution) -> Vec<f64> {
    solution
        .undressed()
        .iter()
        .map(|f| l1_values(f.grid(), f.values()))
        .collect()
}
