//! Stochastic FP4 quantization of a small tensor: one draw, the level set,
//! and Monte-Carlo moments at a few scales.

use dpquant::quant::{empirical_moments, quantize};
use dpquant::{DetRng, QuantGrid, Tensor};
use rand::SeedableRng;

fn main() -> dpquant::Result<()> {
    let grid = QuantGrid::fp4();
    println!("levels: {:?}", grid.levels());

    let x = Tensor::from_vec(vec![0.9, -0.33, 0.051, 0.0, -0.0049, 0.25]);
    let mut rng = DetRng::seed_from_u64(7);
    let q = quantize(&x, &grid, &mut rng)?;
    println!("x    = {:?}", x.data());
    println!("q(x) = {:?}", q.data());

    for lambda in [0.125, 1.0, 8.0] {
        let scaled = Tensor::from_vec(x.data().iter().map(|v| v * lambda).collect());
        let m = empirical_moments(&scaled, &grid, 20_000, &mut rng)?;
        let bias = m
            .mean
            .data()
            .iter()
            .zip(scaled.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!(
            "lambda {lambda:>5}: max |E q - x| {bias:.2e}, total var {:.4e}, var / |x|inf^2 {:.4}",
            m.total_variance,
            m.total_variance / scaled.norm_inf().powi(2)
        );
    }
    Ok(())
}
