//! Iterate φ ← Aφ and compare the trajectory with the predicted limit:
//! the projector for a convergent lift, the bounded oscillation term for a
//! rotating one.
//!
//!     cargo run --release --example lifted_simulation

use koopsim::linalg::Matrix;
use koopsim::spectra::{fixed_point_projector, oscillation_term, simulate_lifted, DEFAULT_EIG_TOL};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.4, 0.6, 0.0], [0.0, 0.3, 0.7]])?;
    let phi0 = [1.0, -2.0, 0.5];
    let traj = simulate_lifted(&a, &phi0, 200)?;
    let limit = fixed_point_projector(&a, DEFAULT_EIG_TOL)?.matvec(&phi0)?;
    println!("convergent lift: φ_200 = {:?}", traj[200]);
    println!("                 Pφ0   = {limit:?}");

    let t = 0.7_f64;
    let r = Matrix::from_rows(&[[t.cos(), -t.sin(), 0.0], [t.sin(), t.cos(), 0.0], [0.0, 0.0, 0.9]])?;
    let traj = simulate_lifted(&r, &phi0, 300)?;
    for l in [100u64, 200, 300] {
        let m = oscillation_term(&r, l, DEFAULT_EIG_TOL)?.matvec(&phi0)?;
        let gap = traj[l as usize].iter().zip(&m).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        println!("rotating lift, l = {l}: |φ_l − M(l)φ0|∞ = {gap:.3e}");
    }
    Ok(())
}
