//! Derivatives of the solution with respect to point-mass perturbations of the
//! initial law, checked against finite differences.

use mvlasov::coefficients::{Coefficients, InteractionDrift};
use mvlasov::field::{l1_norm, DensityField};
use mvlasov::grid::{Grid1D, TimeGrid};
use mvlasov::mild::MildSolver;
use mvlasov::sensitivity::{
    build_propagator, fd_first_variation_errors, propagate_first_variation, solve_second_variation,
    symmetry_residual, taylor_remainders,
};

fn main() -> mvlasov::error::Result<()> {
    let grid = Grid1D::new(-8.0, 8.0, 401)?;
    let time = TimeGrid::new(0.5, 50)?;
    let coeffs =
        Coefficients::heat(1.0)?.with_drift(InteractionDrift::moment_quadratic(0.5, 0.5, 2.0));
    let y = DensityField::gaussian(grid, 0.0, 1.0, 1.0)?;
    let tol = 1e-12;

    let solver = MildSolver::new(grid, time, coeffs)?;
    let phi = solver.solve(&y, tol)?;
    let prop = build_propagator(&solver, &phi)?;

    let probes = [-1.0, 0.5];
    let xi = propagate_first_variation(&prop, &probes)?;
    for (p, x) in probes.iter().enumerate() {
        let norms = xi.l1_norms(p);
        println!("probe {x:+.1}: |xi_T|_1 = {:.4}", norms[norms.len() - 1]);
    }

    let fd = fd_first_variation_errors(&solver, &y, &phi, &xi, 0, &[1e-2, 1e-3], tol)?;
    println!(
        "finite differences: {:.3e} at 1e-2, {:.3e} at 1e-3",
        fd[0], fd[1]
    );

    let pairs = [(0, 1)];
    let eta = solve_second_variation(&prop, &xi, &pairs)?;
    println!("|eta_T|_1 = {:.4}", l1_norm(eta.at(0, time.steps())));
    println!(
        "symmetry residual: {:.3e}",
        symmetry_residual(&prop, &xi, &pairs)?
    );

    let rem = taylor_remainders(
        &solver,
        &prop,
        &y,
        &phi,
        &xi,
        pairs[0],
        &[10f64.powf(-1.5), 1e-2],
        tol,
    )?;
    println!("second-order remainders: {:.3e}, {:.3e}", rem[0], rem[1]);
    Ok(())
}
