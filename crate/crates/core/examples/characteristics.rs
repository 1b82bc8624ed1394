//! Stochastic flow of the common noise, conjugation, and dressed coefficients.

use mvlasov::characteristics::{dress, jacobian_sups, CommonNoise, Direction, FlowMap};
use mvlasov::coefficients::{Diffusion, InteractionDrift};
use mvlasov::field::{l1_distance, DensityField};
use mvlasov::grid::Grid1D;

fn main() -> mvlasov::error::Result<()> {
    let grid = Grid1D::new(-10.0, 10.0, 2001)?;
    let flow = FlowMap::new(CommonNoise::BoundedOdd(0.8));

    for w in [-1.0, 0.5, 2.0] {
        let p = flow.flow_solve(w, 1.0)?;
        println!(
            "Z({w:+.1}, 1) = {:.5}, dZ = {:.5}, gain = {:.5}",
            p.z,
            p.dz,
            p.gain()
        );
    }

    let v = DensityField::gaussian(grid, 0.3, 1.0, 1.0)?;
    let pushed = flow.conjugate(&v, 0.7, Direction::Forward)?;
    let back = flow.conjugate(&pushed, 0.7, Direction::Inverse)?;
    println!("conjugation round trip: {:.2e}", l1_distance(&v, &back)?);

    let gf = flow.grid_flow(0.7, &grid)?;
    let dressed = dress(
        &Diffusion::constant(1.0)?,
        &InteractionDrift::mean_reversion(1.0),
        flow.noise(),
        &gf,
    )?;
    let (lo, hi) = dressed.ellipticity();
    println!("dressed diffusion range: [{lo:.4}, {hi:.4}]");

    let sups = jacobian_sups(&flow, &[-2.0, 2.0], &grid.nodes())?;
    for (w, s) in sups {
        println!("sup |dZ(w, .)| at w = {w:+.1}: {s:.4}");
    }
    Ok(())
}
