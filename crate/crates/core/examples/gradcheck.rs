//! Backward-pass gradients against central differences, for each model
//! variant and a few seeds.
//!
//!     cargo run --release --example gradcheck

use koopsim::cli::{gradcheck, GRADCHECK_TOL};
use koopsim::models::Variant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for variant in [Variant::SingleTier, Variant::TwoTier, Variant::RffOnly] {
        for seed in 0..3 {
            let r = gradcheck(variant, seed, false)?;
            println!(
                "{variant:?} seed {seed}: {} parameters, max relative error {:.2e} ({})",
                r.parameters,
                r.max_relative_error,
                if r.max_relative_error <= GRADCHECK_TOL { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(())
}
