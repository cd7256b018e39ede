//! Classify a few 3×3 lift matrices and print their spectrum reports.
//!
//!     cargo run --release --example spectral_analysis

use std::f64::consts::FRAC_PI_2;

use koopsim::linalg::Matrix;
use koopsim::spectra::{classify, DEFAULT_EIG_TOL};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (c, s) = (FRAC_PI_2.cos(), FRAC_PI_2.sin());
    let cases = [
        ("contraction", Matrix::from_rows(&[[0.5, 0.1, 0.0], [0.0, 0.4, 0.2], [0.0, 0.0, -0.3]])?),
        ("fixed point", Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.3, 0.5, 0.0], [0.2, 0.0, 0.25]])?),
        ("rotation", Matrix::from_rows(&[[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 0.5]])?),
        ("period two", Matrix::from_rows(&[[-1.0, 0.0, 0.0], [0.0, 0.5, 0.0], [1.0, 0.0, 0.2]])?),
        ("jordan block", Matrix::from_rows(&[[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.5]])?),
    ];
    for (name, a) in cases {
        let report = classify(&a, DEFAULT_EIG_TOL)?;
        println!("{name}: {:?} (ρ = {:.4})", report.class, report.spectral_radius);
        println!("{}", serde_json::to_string(&report.to_json())?);
    }
    Ok(())
}
