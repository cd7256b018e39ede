//! The `koopsim` command line: argument types, the training config document
//! and one function per subcommand. `main.rs` only parses and dispatches.
//!
//! Exit codes: 0 success, 1 failed check, 2 input/config error,
//! 3 dimension/shape error, 4 numerical failure.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad_check_report, objective, relative_error, AutodiffError, Tensor};
use crate::dynamics::{generate_fixed_point_dataset, toy_koopman_system, Dataset, DynamicsError};
use crate::image::{load_ppm, save_ppm, split_pixels, ImageError, ImageGrid};
use crate::linalg::{LinalgError, Matrix};
use crate::models::{init_model, ModelConfig, ModelError, SimModel, Task, Variant};
use crate::spectra::{self, ConvergenceClass, SpectraError, DEFAULT_EIG_TOL};
use crate::training::{
    evaluate_mse, format_metric, psnr, train_with, MetricsRow, MetricsWriter, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Dimension(String),
    #[error("{0}")]
    Numerical(String),
    #[error("gradient check failed: max relative error {0:e}")]
    CheckFailed(f64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Input(_) | CliError::Io(_) => 2,
            CliError::Dimension(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::NonFinite { .. } | LinalgError::NoConvergence { .. } | LinalgError::Singular { .. } => {
                CliError::Numerical(e.to_string())
            }
            LinalgError::Ragged { .. } | LinalgError::Parse { .. } => CliError::Input(e.to_string()),
            _ => CliError::Dimension(e.to_string()),
        }
    }
}

impl From<SpectraError> for CliError {
    fn from(e: SpectraError) -> Self {
        match e {
            SpectraError::Linalg(l) => l.into(),
            SpectraError::BadTolerance(_) => CliError::Input(e.to_string()),
            SpectraError::DimensionMismatch { .. } => CliError::Dimension(e.to_string()),
            SpectraError::NotApplicable(_) | SpectraError::Singular => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadConfig(_) | ModelError::Json(_) => CliError::Input(e.to_string()),
            _ => CliError::Dimension(e.to_string()),
        }
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::Linalg(l) => l.into(),
            DynamicsError::Spectra(s) => s.into(),
            DynamicsError::DimensionMismatch { .. } => CliError::Dimension(e.to_string()),
            DynamicsError::AllDiverged(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Io(io) => CliError::Io(io),
            ImageError::BadLength { .. } | ImageError::TooSmall { .. } => CliError::Dimension(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(_) => CliError::Input(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Io(io) => CliError::Io(io),
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::ShapeMismatch(_) | TrainError::Autodiff(_) => CliError::Dimension(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "koopsim", version, about = "Koopman lifts, spectral limits and SIM models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify the long-run behaviour of φ ← Aφ for a square CSV matrix.
    Analyze {
        matrix: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EIG_TOL)]
        eig_tol: f64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model from a JSON config.
    Train {
        config: PathBuf,
        /// Overrides both the init/data seed and the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory receiving `model.json` and `metrics.csv` (overrides the config paths).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate an image model on a pixel lattice and write a PPM.
    Render {
        model: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterate φ ← Aφ and print the trajectory and the predicted limit.
    Simulate {
        matrix: PathBuf,
        phi0: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = DEFAULT_EIG_TOL)]
        eig_tol: f64,
        /// Trajectory CSV path (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare backward gradients with central differences on a small model.
    Gradcheck {
        #[arg(value_enum)]
        variant: VariantArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Perturbs one analytic gradient entry (negative control).
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Single,
    Two,
    Rff,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Single => Variant::SingleTier,
            VariantArg::Two => Variant::TwoTier,
            VariantArg::Rff => Variant::RffOnly,
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze { matrix, eig_tol, out } => {
            let a = read_matrix_csv(&matrix)?;
            let report = analyze(&a, eig_tol)?;
            emit(out.as_deref(), &report)
        }
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.train.seed = s;
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                cfg.model_out = dir.join("model.json");
                cfg.metrics_out = dir.join("metrics.csv");
            }
            let summary = train_from_config(&cfg)?;
            println!("{}", summary.line());
            Ok(())
        }
        Command::Render {
            model,
            width,
            height,
            out,
        } => {
            let m = SimModel::from_json(&fs::read_to_string(&model)?)?;
            let img = render(&m, width, height)?;
            save_ppm(&img, &out)?;
            Ok(())
        }
        Command::Simulate {
            matrix,
            phi0,
            steps,
            eig_tol,
            out,
        } => {
            let a = read_matrix_csv(&matrix)?;
            let p = read_vector_csv(&phi0)?;
            let sim = simulate(&a, &p, steps, eig_tol)?;
            match &out {
                Some(path) => {
                    fs::write(path, &sim.csv)?;
                    println!("{}", sim.limit);
                }
                None => {
                    print!("{}", sim.csv);
                    eprintln!("{}", sim.limit);
                }
            }
            Ok(())
        }
        Command::Gradcheck {
            variant,
            seed,
            out,
            corrupt_gradient,
        } => {
            let r = gradcheck(variant.into(), seed, corrupt_gradient)?;
            println!("{} max relative error {:e}", variant_name(r.variant), r.max_relative_error);
            if let Some(path) = out {
                fs::write(path, serde_json::to_string_pretty(&r).expect("plain data"))?;
            }
            if r.passed {
                Ok(())
            } else {
                Err(CliError::CheckFailed(r.max_relative_error))
            }
        }
    }
}

fn emit(out: Option<&Path>, v: &serde_json::Value) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(v).expect("json value");
    match out {
        Some(p) => fs::write(p, s + "\n")?,
        None => println!("{s}"),
    }
    Ok(())
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::SingleTier => "single",
        Variant::TwoTier => "two",
        Variant::RffOnly => "rff",
    }
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix, CliError> {
    let m = Matrix::from_csv_str(&fs::read_to_string(path)?)?;
    if !m.is_square() {
        return Err(CliError::Dimension(format!("matrix is {}×{}, expected square", m.rows(), m.cols())));
    }
    Ok(m)
}

/// A single row or a single column of numbers.
pub fn read_vector_csv(path: &Path) -> Result<Vec<f64>, CliError> {
    let m = Matrix::from_csv_str(&fs::read_to_string(path)?)?;
    if m.rows() == 1 || m.cols() == 1 {
        Ok(m.into_vec())
    } else {
        Err(CliError::Dimension(format!(
            "expected a single row or column, got {}×{}",
            m.rows(),
            m.cols()
        )))
    }
}

pub fn analyze(a: &Matrix, eig_tol: f64) -> Result<serde_json::Value, CliError> {
    Ok(spectra::classify(a, eig_tol)?.to_json())
}

pub struct Simulation {
    /// `l,phi1,...` rows for `l = 0..=steps`.
    pub csv: String,
    /// Human-readable description of the predicted limit.
    pub limit: String,
    pub trajectory: Vec<Vec<f64>>,
    pub predicted: Option<Vec<f64>>,
}

pub fn simulate(a: &Matrix, phi0: &[f64], steps: usize, eig_tol: f64) -> Result<Simulation, CliError> {
    if phi0.len() != a.rows() {
        return Err(CliError::Dimension(format!(
            "φ0 has {} entries, matrix order is {}",
            phi0.len(),
            a.rows()
        )));
    }
    let trajectory = spectra::simulate_lifted(a, phi0, steps)?;
    let mut csv = String::from("l");
    for j in 0..phi0.len() {
        csv.push_str(&format!(",phi{}", j + 1));
    }
    csv.push('\n');
    for (l, row) in trajectory.iter().enumerate() {
        csv.push_str(&l.to_string());
        for v in row {
            csv.push(',');
            csv.push_str(&v.to_string());
        }
        csv.push('\n');
    }
    let report = spectra::classify(a, eig_tol)?;
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let (limit, predicted) = match report.class {
        ConvergenceClass::ConvergesToOrigin => ("limit: origin (spectral radius < 1)".to_string(), Some(vec![0.0; phi0.len()])),
        ConvergenceClass::ConvergesToFixedPoint => {
            let p = report.projector.as_ref().expect("fixed-point class has a projector");
            let v = p.matvec(phi0)?;
            (format!("limit: fixed point P·φ0 = [{}]", join(&v)), Some(v))
        }
        ConvergenceClass::ConvergesToInvariantSet => {
            let periods: Vec<String> = report
                .j3
                .iter()
                .map(|r| format!("{:.6} rad (period {:.4})", r.delta, std::f64::consts::TAU / r.delta))
                .collect();
            (
                format!(
                    "limit: oscillation on an invariant set, rotation angles {}; φ_l ≈ M(l)·φ0",
                    periods.join(", ")
                ),
                None,
            )
        }
        ConvergenceClass::Unstable => (
            format!("limit: none (unstable, spectral radius {})", report.spectral_radius),
            None,
        ),
    };
    Ok(Simulation {
        csv,
        limit,
        trajectory,
        predicted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ImageRegression,
    DeqApprox,
}

/// The synthetic experiment: fit fixed points of the toy map
/// `z₁ ← λz₁ + x, z₂ ← μz₂ + c z₁²` from inputs drawn uniformly in `x_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeqSpec {
    #[serde(default = "half")]
    pub lam: f64,
    #[serde(default = "half")]
    pub mu: f64,
    #[serde(default = "one")]
    pub c: f64,
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default = "default_x_range")]
    pub x_range: (f64, f64),
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn half() -> f64 {
    0.5
}
fn one() -> f64 {
    1.0
}
fn default_train_samples() -> usize {
    256
}
fn default_test_samples() -> usize {
    64
}
fn default_x_range() -> (f64, f64) {
    (-1.0, 1.0)
}
fn default_tol() -> f64 {
    1e-12
}
fn default_max_iter() -> usize {
    10_000
}

impl Default for DeqSpec {
    fn default() -> Self {
        DeqSpec {
            lam: half(),
            mu: half(),
            c: one(),
            train_samples: default_train_samples(),
            test_samples: default_test_samples(),
            x_range: default_x_range(),
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

/// The `train` config document. Relative paths are taken from the working
/// directory. `seed` drives model initialisation and data sampling;
/// `train.seed` drives minibatch shuffling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    /// Source image (binary PPM) for `image_regression`.
    #[serde(default)]
    pub image: Option<PathBuf>,
    #[serde(default)]
    pub deq: Option<DeqSpec>,
    pub model_out: PathBuf,
    pub metrics_out: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub task: TaskKind,
    pub final_loss: f64,
    pub train_psnr: Option<f64>,
    pub test_psnr: Option<f64>,
    pub test_mse: Option<f64>,
    pub model: SimModel,
    pub history: Vec<MetricsRow>,
}

impl TrainSummary {
    pub fn line(&self) -> String {
        let mut s = format!("final loss {}", format_metric(self.final_loss));
        if let Some(p) = self.train_psnr {
            s.push_str(&format!(", train psnr {} dB", format_metric(p)));
        }
        if let Some(p) = self.test_psnr {
            s.push_str(&format!(", test psnr {} dB", format_metric(p)));
        }
        if let Some(m) = self.test_mse {
            s.push_str(&format!(", test mse {}", format_metric(m)));
        }
        s
    }
}

struct TaskData {
    train: Dataset,
    test: Dataset,
    psnr_eval: bool,
}

fn load_task_data(cfg: &RunConfig) -> Result<TaskData, CliError> {
    match cfg.task {
        TaskKind::ImageRegression => {
            let path = cfg
                .image
                .as_ref()
                .ok_or_else(|| CliError::Input("image_regression needs \"image\"".into()))?;
            if cfg.model.input_dim != 2 || cfg.model.output_dim != 3 || cfg.model.task != Task::Regression {
                return Err(CliError::Input(
                    "image_regression needs a regression model with input_dim 2 and output_dim 3".into(),
                ));
            }
            let img = load_ppm(path)?;
            let split = split_pixels(img.width, img.height)?;
            Ok(TaskData {
                train: img.dataset(&split.train),
                test: img.dataset(&split.test),
                psnr_eval: true,
            })
        }
        TaskKind::DeqApprox => {
            let spec = cfg.deq.clone().unwrap_or_default();
            if cfg.model.input_dim != 1 || cfg.model.output_dim != 2 || cfg.model.task != Task::Regression {
                return Err(CliError::Input(
                    "deq_approx needs a regression model with input_dim 1 and output_dim 2".into(),
                ));
            }
            let (train, test) = deq_datasets(&spec, cfg.seed)?;
            Ok(TaskData {
                train,
                test,
                psnr_eval: false,
            })
        }
    }
}

/// Train and test sets of (x, z*) pairs for the toy map, with z* from the
/// Picard oracle. Inputs are drawn from a ChaCha8 stream seeded with `seed`.
pub fn deq_datasets(spec: &DeqSpec, seed: u64) -> Result<(Dataset, Dataset), CliError> {
    let (lo, hi) = spec.x_range;
    if !(lo < hi) || spec.train_samples == 0 || spec.test_samples == 0 {
        return Err(CliError::Input("deq: need x_range lo < hi and positive sample counts".into()));
    }
    let sys = toy_koopman_system(spec.lam, spec.mu, spec.c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| vec![rng.gen_range(lo..hi)]).collect() };
    let xs_train = draw(spec.train_samples);
    let xs_test = draw(spec.test_samples);
    let (train, _) = generate_fixed_point_dataset(&sys.map, &xs_train, spec.tol, spec.max_iter)?;
    let (test, _) = generate_fixed_point_dataset(&sys.map, &xs_test, spec.tol, spec.max_iter)?;
    Ok((train, test))
}

/// Runs a config end to end: data, init, training with a streamed metrics
/// file, model file. On a numerical failure the last finite model and the
/// rows so far are still written before the error is returned.
pub fn train_from_config(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.train.validate()?;
    let data = load_task_data(cfg)?;
    let model = init_model(&cfg.model, cfg.seed)?;
    for path in [&cfg.model_out, &cfg.metrics_out] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
    }
    let metrics = fs::File::create(&cfg.metrics_out)?;
    let mut writer = MetricsWriter::new(BufWriter::new(metrics), data.psnr_eval)?;
    let eval = data.psnr_eval.then_some(&data.test);
    let result = train_with(&model, &data.train, &cfg.train, eval, |row| writer.push(row));
    writer.finish()?.flush()?;
    let (trained, history) = match result {
        Ok(r) => r,
        Err(TrainError::NonFinite { step, last_finite, .. }) => {
            fs::write(&cfg.model_out, last_finite.to_json()?)?;
            return Err(CliError::Numerical(format!(
                "non-finite loss or parameters at step {step}; last finite model written to {}",
                cfg.model_out.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    fs::write(&cfg.model_out, trained.to_json()?)?;
    let final_loss = history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    let mut summary = TrainSummary {
        task: cfg.task,
        final_loss,
        train_psnr: None,
        test_psnr: None,
        test_mse: None,
        model: trained,
        history,
    };
    match cfg.task {
        TaskKind::ImageRegression => {
            let p = |d: &Dataset| -> Result<f64, CliError> {
                let pred = summary.model.predict(&d.inputs)?;
                Ok(psnr(pred.as_slice(), d.targets.as_slice())?)
            };
            summary.train_psnr = Some(p(&data.train)?);
            summary.test_psnr = Some(p(&data.test)?);
        }
        TaskKind::DeqApprox => summary.test_mse = Some(evaluate_mse(&summary.model, &data.test)?),
    }
    Ok(summary)
}

/// Model output on the `width × height` pixel-centre lattice, clamped to [0, 1].
pub fn render(model: &SimModel, width: usize, height: usize) -> Result<ImageGrid, CliError> {
    if width == 0 || height == 0 {
        return Err(CliError::Input("render size must be positive".into()));
    }
    if model.task != Task::Regression || model.input_dim() != 2 || model.output_dim() != 3 {
        return Err(CliError::Dimension(format!(
            "render needs a regression model 2 → 3, got {} → {} ({:?})",
            model.input_dim(),
            model.output_dim(),
            model.task
        )));
    }
    let pred = model.predict(&ImageGrid::lattice(width, height))?;
    Ok(ImageGrid::from_predictions(width, height, &pred)?)
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutcome {
    #[serde(serialize_with = "ser_variant")]
    pub variant: Variant,
    pub seed: u64,
    pub parameters: usize,
    /// Point draws used before the instance was accepted.
    pub draws: usize,
    /// At least 1 when the accepted draw met both conditioning bounds.
    pub conditioning: f64,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub passed: bool,
}

fn ser_variant<S: serde::Serializer>(v: &Variant, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(variant_name(*v))
}

/// Points whose ReLU pre-activations come closer to zero than this are
/// redrawn: central differences straddling a kink are meaningless.
pub const KINK_MARGIN: f64 = 1e-3;

/// Smallest |pre-activation| over every ReLU in the model for inputs `x`.
pub fn min_relu_margin(model: &SimModel, x: &Matrix) -> Result<f64, CliError> {
    let mut min = f64::INFINITY;
    let mut mlp = |h: Matrix, layers: &[crate::models::Linear]| -> Result<Matrix, CliError> {
        let mut h = h;
        for (i, l) in layers.iter().enumerate() {
            if i > 0 {
                min = h.as_slice().iter().fold(min, |m, v| m.min(v.abs()));
                h = h.map(|v| v.max(0.0));
            }
            let mut z = h.matmul(&l.weight.transpose())?;
            for r in 0..z.rows() {
                for (c, b) in l.bias.iter().enumerate() {
                    z[(r, c)] += b;
                }
            }
            h = z;
        }
        Ok(h)
    };
    let mut h = x.clone();
    if let Some(mu) = &model.mu {
        h = mlp(h, &mu.layers)?;
    }
    if let Some(rff) = &model.rff {
        h = rff.features_batch(&h)?;
    }
    h = h.matmul(&model.v_hat.transpose())?.matmul(&model.u_hat.transpose())?;
    mlp(h, &model.nu.layers)?;
    Ok(min)
}

fn model_err(e: ModelError) -> AutodiffError {
    match e {
        ModelError::ShapeMismatch(a) => a,
        other => unreachable!("validated model failed in forward: {other}"),
    }
}

/// Draws of the check points before giving up on conditioning and using
/// the best draw seen.
pub const MAX_DRAWS: usize = 256;

/// A nonzero gradient coordinate smaller than this fraction of the loss sits
/// below the rounding floor of central differences at `h = 1e-5`
/// (about `2·ulp(f)/2h ≈ 2.2e-11·f`) and cannot be checked to 1e-6.
pub const MIN_GRADIENT_RATIO: f64 = 1e-4;

/// How well a draw suits central differences: the smaller of the ReLU margin
/// (relative to [`KINK_MARGIN`]) and the smallest nonzero gradient ratio
/// (relative to [`MIN_GRADIENT_RATIO`]). At least 1 means acceptable.
fn conditioning(model: &SimModel, theta: &Tensor, x: &Tensor, y: &Tensor) -> Result<f64, CliError> {
    let margin = min_relu_margin(model, &x.to_matrix())? / KINK_MARGIN;
    let tape = crate::autodiff::Tape::new();
    let p = tape.param(theta.clone()).map_err(|e| CliError::Dimension(e.to_string()))?;
    let loss = model
        .forward_on_tape(&tape, p, tape.constant(x.clone()).map_err(|e| CliError::Dimension(e.to_string()))?, false)?
        .mse(tape.constant(y.clone()).map_err(|e| CliError::Dimension(e.to_string()))?)
        .map_err(|e| CliError::Dimension(e.to_string()))?;
    let f = loss.item().map_err(|e| CliError::Dimension(e.to_string()))?.abs();
    let g = tape
        .backward(loss)
        .map_err(|e| CliError::Dimension(e.to_string()))?
        .get_or_zeros(p, theta.shape())
        .into_data();
    let smallest = g.iter().filter(|v| **v != 0.0).fold(f64::INFINITY, |m, v| m.min(v.abs()));
    Ok(margin.min(smallest / (MIN_GRADIENT_RATIO * f)))
}

/// Small model (D = 2, N = 8, M = 16, d = 3), MSE against random targets at
/// five random points, every parameter checked with step [`GRADCHECK_STEP`].
///
/// Points and targets come from a stream seeded by `seed` and are redrawn
/// until the instance is well conditioned for finite differences (see
/// [`KINK_MARGIN`] and [`MIN_GRADIENT_RATIO`]); this only looks at the model
/// and the analytic gradient, never at the comparison.
pub fn gradcheck(variant: Variant, seed: u64, corrupt: bool) -> Result<GradcheckOutcome, CliError> {
    let cfg = ModelConfig {
        lift_dim: Some(8),
        rff_dim: Some(16),
        mu_hidden: 8,
        nu_hidden: 8,
        hidden_dim: Some(3),
        bandwidth: Some(1.0),
        ..ModelConfig::new(variant, 2, 3)
    };
    let model = init_model(&cfg, seed)?;
    let theta = Tensor::vector(model.flat_params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut best: Option<(f64, Tensor, Tensor)> = None;
    let mut draws = 0;
    while draws < MAX_DRAWS {
        draws += 1;
        let x = Tensor::new(vec![5, 2], (0..10).map(|_| rng.gen::<f64>()).collect()).expect("shape");
        let y = Tensor::new(vec![5, 3], (0..15).map(|_| rng.gen::<f64>()).collect()).expect("shape");
        let c = conditioning(&model, &theta, &x, &y)?;
        if best.as_ref().map_or(true, |b| c > b.0) {
            best = Some((c, x, y));
        }
        if c >= 1.0 {
            break;
        }
    }
    let (conditioning, x, y) = best.expect("at least one draw");
    let f = objective(|tape, theta| {
        let out = model
            .forward_on_tape(tape, theta, tape.constant(x.clone())?, false)
            .map_err(model_err)?;
        out.mse(tape.constant(y.clone())?)
    });
    let mut report = grad_check_report(f, &theta, GRADCHECK_STEP).map_err(|e| CliError::Dimension(e.to_string()))?;
    if corrupt {
        let i = report.worst_index;
        report.analytic[i] += 1e-3 * (1.0 + report.analytic[i].abs());
        let (mut worst, mut at) = (0.0, 0);
        for (j, (a, n)) in report.analytic.iter().zip(&report.numeric).enumerate() {
            let e = relative_error(*a, *n);
            if e > worst {
                (worst, at) = (e, j);
            }
        }
        report.max_relative_error = worst;
        report.worst_index = at;
    }
    Ok(GradcheckOutcome {
        variant,
        seed,
        parameters: theta.len(),
        draws,
        conditioning,
        max_relative_error: report.max_relative_error,
        worst_index: report.worst_index,
        analytic_at_worst: report.analytic[report.worst_index],
        numeric_at_worst: report.numeric[report.worst_index],
        passed: report.max_relative_error <= GRADCHECK_TOL,
    })
}
