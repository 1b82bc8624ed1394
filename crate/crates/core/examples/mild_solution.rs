//! Nonlinear Fokker-Planck flow by Picard iteration on the mild formulation.

use mvlasov::coefficients::{Coefficients, Diffusion, InteractionDrift, PotentialTerm};
use mvlasov::field::{test_dictionary, DensityField, Field};
use mvlasov::grid::{Grid1D, TimeGrid};
use mvlasov::mild::{weak_residual, MildSolver};

fn main() -> mvlasov::error::Result<()> {
    let grid = Grid1D::new(-8.0, 8.0, 401)?;
    let time = TimeGrid::new(1.0, 100)?;
    let coeffs = Coefficients {
        diffusion: Diffusion::sin_squared(1.0, 0.3)?,
        drift: InteractionDrift::mean_reversion(0.5),
        potential: PotentialTerm::moment_killing(0.2, 2.0)?,
    };
    let y = DensityField::gaussian(grid, -0.5, 0.7, 1.0)?;

    let solver = MildSolver::new(grid, time, coeffs.clone())?;
    let phi = solver.solve(&y, 1e-10)?;
    println!("converged in {} iterates", phi.iterations());
    for (k, r) in phi.residuals().iter().enumerate().take(8) {
        println!("  iterate {:>2}: {r:.3e}", k + 1);
    }

    let masses = phi.masses();
    println!("mass: {:.6} -> {:.6}", masses[0], masses[masses.len() - 1]);
    let weak = weak_residual(&phi, &coeffs, &test_dictionary(&grid))?;
    println!("weak-form residual: {weak:.3e}");
    println!("terminal minimum: {:.3e}", phi.terminal().min_value());
    Ok(())
}
