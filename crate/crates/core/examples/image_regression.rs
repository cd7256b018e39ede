//! Coordinate → colour regression on the bundled 128×128 photo with the three
//! model variants, rendering each reconstruction as a PPM.
//!
//!     cargo run --release --example image_regression [iterations] [out_dir]
//!
//! The full 2000-iteration run takes several minutes per variant.

use std::path::PathBuf;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use koopsim::cli::render;
use koopsim::image::{load_ppm, save_ppm, split_pixels};
use koopsim::models::{init_model, ModelConfig, Variant};
use koopsim::training::{psnr, train_with, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map(|s| s.parse()).transpose()?.unwrap_or(300);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "image_regression_out".into()));
    std::fs::create_dir_all(&out)?;

    let img = load_ppm(concat!(env!("CARGO_MANIFEST_DIR"), "/data/chelsea_128.ppm"))?;
    let split = split_pixels(img.width, img.height)?;
    let (train_set, test_set) = (img.dataset(&split.train), img.dataset(&split.test));

    for (variant, name) in [(Variant::RffOnly, "rff"), (Variant::TwoTier, "two"), (Variant::SingleTier, "single")] {
        let two = variant == Variant::TwoTier;
        let cfg = ModelConfig {
            lift_dim: Some(if two { 32 } else { 256 }),
            rff_dim: Some(512),
            bandwidth: Some(0.05),
            mu_hidden: if two { 64 } else { 256 },
            nu_hidden: 256,
            ..ModelConfig::new(variant, 2, 3)
        };
        let model = init_model(&cfg, 0)?;
        let started = std::time::Instant::now();
        let (trained, _) = train_with(&model, &train_set, &TrainConfig::new(1e-3, iterations), None, |_| Ok(()))?;
        let pred = trained.predict(&test_set.inputs)?;
        let p = psnr(pred.as_slice(), test_set.targets.as_slice())?;
        let path = out.join(format!("{name}.ppm"));
        save_ppm(&render(&trained, img.width, img.height)?, &path)?;
        println!(
            "{name:>6}: test PSNR {p:.2} dB after {iterations} iterations ({:.0} s) → {}",
            started.elapsed().as_secs_f64(),
            path.display()
        );
    }
    Ok(())
}
