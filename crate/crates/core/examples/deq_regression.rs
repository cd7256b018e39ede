//! Fit a single-tier model to equilibria of the toy map and compare it with
//! the Picard oracle on fresh inputs.
//!
//!     cargo run --release --example deq_regression [iterations]

use koopsim::cli::{deq_datasets, DeqSpec};
use koopsim::models::{init_model, ModelConfig, Variant};
use koopsim::training::{evaluate_mse, train, BatchMode, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let (train_set, test_set) = deq_datasets(&DeqSpec::default(), 0)?;
    let cfg = ModelConfig {
        lift_dim: Some(16),
        mu_hidden: 32,
        nu_hidden: 32,
        hidden_dim: Some(2),
        ..ModelConfig::new(Variant::SingleTier, 1, 2)
    };
    let model = init_model(&cfg, 0)?;
    let tc = TrainConfig {
        batch_mode: BatchMode::Minibatch(32),
        ..TrainConfig::new(1e-3, iterations)
    };
    let (trained, history) = train(&model, &train_set, &tc)?;
    println!("final training loss {:.3e}", history.last().map_or(f64::NAN, |r| r.loss));
    println!("held-out MSE vs Picard fixed points: {:.3e}", evaluate_mse(&trained, &test_set)?);
    for x in [-0.9, 0.0, 0.6] {
        let p = trained.predict(&koopsim::linalg::Matrix::from_rows(&[[x]])?)?;
        println!("x = {x:4.1}: model ({:.4}, {:.4}), exact ({:.4}, {:.4})", p[(0, 0)], p[(0, 1)], 2.0 * x, 8.0 * x * x);
    }
    Ok(())
}
