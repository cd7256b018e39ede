//! Picard iteration of a weight-tied layer to its equilibrium, including a
//! divergent case that is reported rather than raised.
//!
//!     cargo run --release --example deq_fixed_point

use koopsim::dynamics::{deq_forward, IteratedMap};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // z ← tanh(W z + U x) with ‖W‖ < 1 is a contraction.
    let layer = IteratedMap::new(2, 1, |z, x| {
        vec![(0.5 * z[0] - 0.2 * z[1] + x[0]).tanh(), (0.1 * z[0] + 0.4 * z[1] - x[0]).tanh()]
    });
    for x in [-1.0, 0.0, 0.5, 2.0] {
        let r = deq_forward(&layer, &[x], None, 1e-12, 1000)?;
        println!(
            "x = {x:5.2}: z* = [{:.6}, {:.6}] after {} iterations (residual {:.1e})",
            r.z_star[0], r.z_star[1], r.iterations, r.residual
        );
    }

    let expanding = IteratedMap::new(1, 1, |z, x| vec![1.5 * z[0] + x[0]]);
    let r = deq_forward(&expanding, &[1.0], None, 1e-12, 10_000)?;
    println!("expanding map: converged = {}, diverged = {} at iteration {}", r.converged, r.diverged, r.iterations);
    Ok(())
}
