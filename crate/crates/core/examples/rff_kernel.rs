//! Random Fourier features approximate the Gaussian kernel: ψ(x)·ψ(y) ≈
//! exp(−‖x−y‖²/2b²), with the error shrinking like 1/√M.
//!
//!     cargo run --release --example rff_kernel

use koopsim::models::RffMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let b = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pairs: Vec<([f64; 2], [f64; 2])> = (0..100).map(|_| (rng.gen(), rng.gen())).collect();
    for m in [64, 256, 1024, 4096] {
        let rff = RffMap::new(2, m, b, 11)?;
        let mut worst: f64 = 0.0;
        for (x, y) in &pairs {
            let (fx, fy) = (rff.features(x)?, rff.features(y)?);
            let dot: f64 = fx.iter().zip(&fy).map(|(a, b)| a * b).sum();
            let d2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
            worst = worst.max((dot - (-d2 / (2.0 * b * b)).exp()).abs());
        }
        let norm: f64 = rff.features(&pairs[0].0)?.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("M = {m:5}: max kernel error {worst:.4}, ‖ψ(x)‖ = {norm:.15}");
    }
    Ok(())
}
