//! Conditional law along sampled common-noise paths, with the transport case
//! checked against a shifted Gaussian.

use mvlasov::characteristics::{CommonNoise, FlowMap};
use mvlasov::coefficients::{Coefficients, InteractionDrift};
use mvlasov::field::{gaussian_pdf, l1_distance_values, DensityField, Field};
use mvlasov::grid::{Grid1D, TimeGrid};
use mvlasov::spde::{expectation_stability, sample_path, PathSolver};

fn main() -> mvlasov::error::Result<()> {
    let grid = Grid1D::new(-10.0, 10.0, 1001)?;
    let time = TimeGrid::new(1.0, 200)?;
    let y = DensityField::gaussian(grid, 0.0, 1.0, 1.0)?;

    let c = 0.5;
    let solver = PathSolver::new(
        grid,
        time,
        Coefficients::heat(1.0)?,
        FlowMap::new(CommonNoise::Constant(c)),
    )?;
    let path = sample_path(11, time, 1)?;
    let sol = solver.solve(&y, &path)?;
    let shift = c * path.terminal(0);
    let exact: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|x| gaussian_pdf(x - shift, 2.0))
        .collect();
    println!(
        "W_T = {:.4}, error against N(cW_T, 2): {:.2e}",
        path.terminal(0),
        l1_distance_values(&grid, sol.terminal().values(), &exact)
    );

    let coeffs = Coefficients::heat(1.0)?.with_drift(InteractionDrift::mean_reversion(1.0));
    let solver = PathSolver::new(grid, time, coeffs, FlowMap::new(CommonNoise::Linear(0.5)))?;
    for w in solver.warnings() {
        println!("warning: {w}");
    }
    let y2 = DensityField::gaussian(grid, 0.5, 0.8, 1.0)?;
    let es = expectation_stability(&solver, &y, &y2, 20, 0)?;
    println!(
        "expectation stability over {} paths: C = {:.4} (least squares {:.4})",
        es.seeds.len(),
        es.c_bound,
        es.c_fit
    );
    Ok(())
}
