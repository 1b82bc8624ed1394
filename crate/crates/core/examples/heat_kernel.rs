//! Green's function of a variable-diffusion operator and its Gaussian envelope.

use mvlasov::coefficients::Diffusion;
use mvlasov::field::{DensityField, Field};
use mvlasov::grid::Grid1D;
use mvlasov::kernels::HeatKernel;
use mvlasov::mittag_leffler::mittag_leffler_half;

fn main() -> mvlasov::error::Result<()> {
    let grid = Grid1D::new(-6.0, 6.0, 121)?;
    let kernel = HeatKernel::new(grid, Diffusion::sin_squared(1.0, 0.5)?)?;

    let fit = kernel.aronson_fit(&[0.05, 0.1, 0.2])?;
    println!(
        "envelope: C = {:.3}, sigma = {:.2} over {} pairs",
        fit.c, fit.sigma, fit.pairs
    );

    let delta = DensityField::mollified_delta(grid, 0.0)?;
    for t in [0.1, 0.5, 1.0] {
        let out = kernel.green_apply(t, &delta)?;
        let peak = out.values().iter().fold(0.0f64, |m, v| m.max(*v));
        println!("t = {t:.1}: peak {peak:.4}");
    }

    for z in [0.0, 1.0, 4.0] {
        println!("E_1/2({z}) = {:.6}", mittag_leffler_half(z)?);
    }
    Ok(())
}
