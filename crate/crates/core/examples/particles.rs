//! Interacting particle systems driven by a shared Brownian path, compared
//! with the conditional law as the ensemble grows.

use mvlasov::characteristics::{CommonNoise, FlowMap};
use mvlasov::coefficients::{Coefficients, InteractionDrift};
use mvlasov::field::DensityField;
use mvlasov::grid::{Grid1D, TimeGrid};
use mvlasov::particles::{chaos_gap, log_log_slope, simulate, Record};
use mvlasov::spde::{sample_path, PathSolver};

fn main() -> mvlasov::error::Result<()> {
    let grid = Grid1D::new(-8.0, 8.0, 801)?;
    let time = TimeGrid::new(0.5, 100)?;
    let coeffs = Coefficients::heat(1.0)?.with_drift(InteractionDrift::mean_reversion(1.0));
    let noise = CommonNoise::Sine(0.5);
    let y = DensityField::gaussian(grid, 0.5, 0.8, 1.0)?;
    let solver = PathSolver::new(grid, time, coeffs.clone(), FlowMap::new(noise.clone()))?;

    let path = sample_path(3, time, 1)?;
    let sol = solver.solve(&y, &path)?;
    let last = time.steps();

    let ns = [500, 2000, 8000, 32000];
    let mut gaps = Vec::new();
    for n in ns {
        let e = simulate(
            n,
            &y,
            Some(&coeffs.diffusion),
            &coeffs.drift,
            &noise,
            &path,
            99,
            Record::Nodes(vec![last]),
        )?;
        let gap = chaos_gap(&sol, &e, &[last])?[0];
        let (m, v) = e.moments(last)?;
        println!(
            "N = {n:>5}: gap {gap:.4}, mean {m:+.4}, var {v:.4}, reflections {}",
            e.reflections()
        );
        gaps.push(gap);
    }
    println!("log-log slope: {:.3}", log_log_slope(&ns, &gaps));
    Ok(())
}
