//! Stable invariant models as feedforward networks.
//!
//! * single-tier: `z = ν(Û V̂ μ(x))`
//! * two-tier:    `z = ν(Û′ V̂′ ψ(μ(x)))`
//! * RFF-only:    `z = ν(Û V̂ ψ(x))`
//!
//! followed by a linear head (plus softmax for classification). `μ` is an MLP
//! ending in a linear layer to the lift dimension `N`, `ψ` a random Fourier
//! feature map of dimension `M`, `ν` a three-layer ReLU MLP, and `Û`, `V̂` free
//! trainable factors of rank `K`.
//!
//! All forward passes run on an autodiff [`Tape`]; consecutive linear layers
//! are collapsed into a single product when that is cheaper than applying them
//! one by one, which is the common case for `… → V̂ → Û → ν₁` and `ν₃ → head`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sin_cos, softmax_rows, AutodiffError, Tape, Tensor, Var};
use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("operation needs a {expected:?} model, got {got:?}")]
    VariantMismatch { expected: Variant, got: Variant },
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    ShapeMismatch(#[from] AutodiffError),
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SingleTier,
    TwoTier,
    RffOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Regression,
    Classification,
}

/// Standard normals by the Box–Muller transform, both outputs used.
struct BoxMuller {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl BoxMuller {
    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = 1.0 - self.rng.gen::<f64>(); // (0, 1]
        let u2: f64 = self.rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

/// `ψ(x) = (sin ω₁ᵀx, cos ω₁ᵀx, …, sin ω_{M/2}ᵀx, cos ω_{M/2}ᵀx) / √(M/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffMap {
    /// Output dimension `M` (even).
    pub m: usize,
    /// Frequencies, one per row: shape `(M/2, input_dim)`.
    pub omega: Matrix,
    pub bandwidth: f64,
    pub seed: u64,
}

impl RffMap {
    /// Rows of `omega` are standard normal vectors divided by `bandwidth`, so
    /// `ψ(x)·ψ(y) ≈ exp(−‖x−y‖²/(2b²))`.
    pub fn new(input_dim: usize, m: usize, bandwidth: f64, seed: u64) -> Result<Self, ModelError> {
        if m == 0 || m % 2 != 0 {
            return Err(ModelError::BadConfig(format!("RFF dimension must be even and positive, got {m}")));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(ModelError::BadConfig(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut normal = BoxMuller { rng, spare: None };
        let omega = Matrix::from_fn(m / 2, input_dim, |_, _| normal.next() / bandwidth);
        Ok(RffMap {
            m,
            omega,
            bandwidth,
            seed,
        })
    }

    /// Map with explicit frequencies (`M = 2 · omega.rows()`).
    pub fn from_omega(omega: Matrix, bandwidth: f64) -> Self {
        RffMap {
            m: 2 * omega.rows(),
            omega,
            bandwidth,
            seed: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.omega.cols()
    }

    fn scale(&self) -> f64 {
        1.0 / ((self.m / 2) as f64).sqrt()
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                what: "RFF input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let s = self.scale();
        let mut out = Vec::with_capacity(self.m);
        for j in 0..self.m / 2 {
            let p: f64 = self.omega.row(j).iter().zip(x).map(|(w, v)| w * v).sum();
            let (sn, cs) = sin_cos(p);
            out.push(s * sn);
            out.push(s * cs);
        }
        Ok(out)
    }

    /// ψ applied to every row of `x`.
    pub fn features_batch(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        let tape = Tape::new();
        let xv = tape.constant(Tensor::from(x))?;
        let out = self.apply(&tape, xv)?.value()?.to_matrix();
        Ok(out)
    }

    fn apply<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        let cols = x.value()?.dims2().1;
        if cols != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                what: "RFF input",
                expected: self.input_dim(),
                got: cols,
            });
        }
        let omega = tape.constant(Tensor::from(&self.omega))?;
        Ok(x.matmul_nt(omega)?.sin_cos_interleaved(self.scale())?)
    }
}

/// `y = x Wᵀ + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let a = (6.0 / fan_in as f64).sqrt();
        Linear {
            weight: Matrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-a..a)),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn identity(n: usize) -> Self {
        Linear {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            layers: dims.windows(2).map(|w| Linear::init(rng, w[0], w[1])).collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.first().map(|l| vec![l.in_dim()]).unwrap_or_default();
        d.extend(self.layers.iter().map(Linear::out_dim));
        d
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }
}

fn default_hidden() -> usize {
    256
}

/// Architecture hyper-parameters. `K` and `K′` default to half the dimension
/// feeding the bottleneck (`N` for single-tier, `M` otherwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default)]
    pub task: Task,
    pub input_dim: usize,
    pub output_dim: usize,
    /// `N`: output of μ (single- and two-tier).
    #[serde(default)]
    pub lift_dim: Option<usize>,
    /// `M`: RFF dimension (two-tier and RFF-only).
    #[serde(default)]
    pub rff_dim: Option<usize>,
    /// Bottleneck rank `K` (or `K′`).
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default = "default_hidden")]
    pub mu_hidden: usize,
    #[serde(default = "default_hidden")]
    pub nu_hidden: usize,
    /// `d`: output of ν; defaults to `nu_hidden`.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    #[serde(default)]
    pub bandwidth: Option<f64>,
}

impl ModelConfig {
    pub fn new(variant: Variant, input_dim: usize, output_dim: usize) -> Self {
        ModelConfig {
            variant,
            task: Task::Regression,
            input_dim,
            output_dim,
            lift_dim: None,
            rff_dim: None,
            rank: None,
            mu_hidden: default_hidden(),
            nu_hidden: default_hidden(),
            hidden_dim: None,
            bandwidth: None,
        }
    }

    /// Dimension entering `Û V̂`.
    fn bottleneck_dim(&self) -> Result<usize, ModelError> {
        let need = |v: Option<usize>, name: &str| {
            v.filter(|&d| d > 0)
                .ok_or_else(|| ModelError::BadConfig(format!("{name} is required for {:?}", self.variant)))
        };
        match self.variant {
            Variant::SingleTier => need(self.lift_dim, "lift_dim (N)"),
            Variant::TwoTier => {
                need(self.lift_dim, "lift_dim (N)")?;
                need(self.rff_dim, "rff_dim (M)")
            }
            Variant::RffOnly => need(self.rff_dim, "rff_dim (M)"),
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::BadConfig(m));
        if self.input_dim == 0 || self.output_dim == 0 || self.mu_hidden == 0 || self.nu_hidden == 0 {
            return bad("all dimensions must be positive".into());
        }
        let b = self.bottleneck_dim()?;
        if let Some(m) = self.rff_dim.filter(|_| self.variant != Variant::SingleTier) {
            if m % 2 != 0 {
                return bad(format!("rff_dim must be even, got {m}"));
            }
            match self.bandwidth {
                Some(bw) if bw > 0.0 && bw.is_finite() => {}
                other => return bad(format!("bandwidth must be positive, got {other:?}")),
            }
        }
        match self.rank {
            Some(0) => bad("rank must be positive".into()),
            Some(k) if k > b => bad(format!("rank {k} exceeds bottleneck dimension {b}")),
            None if b < 2 => bad("bottleneck dimension must be at least 2 for the default rank".into()),
            _ => Ok(()),
        }
    }
}

/// Trainable parameters of one SIM variant plus its fixed random features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimModel {
    pub variant: Variant,
    pub task: Task,
    pub config: ModelConfig,
    pub seed: u64,
    pub mu: Option<Mlp>,
    pub rff: Option<RffMap>,
    /// `(B, K)` where `B` is `N` (single-tier) or `M`.
    pub u_hat: Matrix,
    /// `(K, B)`.
    pub v_hat: Matrix,
    pub nu: Mlp,
    pub head: Linear,
}

/// Builds a model with uniform(±√(6/fan_in)) weights and zero biases.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<SimModel, ModelError> {
    cfg.validate()?;
    let b = cfg.bottleneck_dim()?;
    let k = cfg.rank.unwrap_or(b / 2);
    let d = cfg.hidden_dim.unwrap_or(cfg.nu_hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = match cfg.variant {
        Variant::RffOnly => None,
        _ => {
            let n = cfg.lift_dim.expect("validated");
            Some(Mlp::new(&[cfg.input_dim, cfg.mu_hidden, cfg.mu_hidden, n], &mut rng))
        }
    };
    let rff = match cfg.variant {
        Variant::SingleTier => None,
        Variant::TwoTier => Some(RffMap::new(
            cfg.lift_dim.expect("validated"),
            b,
            cfg.bandwidth.expect("validated"),
            seed,
        )?),
        Variant::RffOnly => Some(RffMap::new(cfg.input_dim, b, cfg.bandwidth.expect("validated"), seed)?),
    };
    let v_hat = Linear::init(&mut rng, b, k).weight;
    let u_hat = Linear::init(&mut rng, k, b).weight;
    let nu = Mlp::new(&[b, cfg.nu_hidden, cfg.nu_hidden, d], &mut rng);
    let head = Linear::init(&mut rng, d, cfg.output_dim);
    Ok(SimModel {
        variant: cfg.variant,
        task: cfg.task,
        config: cfg.clone(),
        seed,
        mu,
        rff,
        u_hat,
        v_hat,
        nu,
        head,
    })
}

enum Step<'t> {
    Linear(Var<'t>, Option<Var<'t>>),
    Relu,
    Rff,
}

/// Model parameters as slices of one flat tape variable.
struct Bound<'t> {
    steps: Vec<Step<'t>>,
    /// Index in `steps` where the head starts.
    head_at: usize,
}

impl SimModel {
    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.head.out_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.nu.out_dim()
    }

    pub fn rank(&self) -> usize {
        self.v_hat.rows()
    }

    fn linears(&self) -> Vec<(&Matrix, Option<&Vec<f64>>)> {
        let mut out = Vec::new();
        if let Some(mu) = &self.mu {
            out.extend(mu.layers.iter().map(|l| (&l.weight, Some(&l.bias))));
        }
        out.push((&self.v_hat, None));
        out.push((&self.u_hat, None));
        out.extend(self.nu.layers.iter().map(|l| (&l.weight, Some(&l.bias))));
        out.push((&self.head.weight, Some(&self.head.bias)));
        out
    }

    fn linears_mut(&mut self) -> Vec<(&mut Matrix, Option<&mut Vec<f64>>)> {
        let mut out = Vec::new();
        if let Some(mu) = &mut self.mu {
            out.extend(mu.layers.iter_mut().map(|l| (&mut l.weight, Some(&mut l.bias))));
        }
        out.push((&mut self.v_hat, None));
        out.push((&mut self.u_hat, None));
        out.extend(self.nu.layers.iter_mut().map(|l| (&mut l.weight, Some(&mut l.bias))));
        out.push((&mut self.head.weight, Some(&mut self.head.bias)));
        out
    }

    /// Number of trainable scalars (RFF frequencies are fixed, not trained).
    pub fn num_params(&self) -> usize {
        self.linears()
            .iter()
            .map(|(w, b)| w.rows() * w.cols() + b.map_or(0, |b| b.len()))
            .sum()
    }

    /// Trainable parameters in a fixed order: μ layers, V̂, Û, ν layers, head;
    /// each weight row-major followed by its bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.linears() {
            out.extend_from_slice(w.as_slice());
            if let Some(b) = b {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, theta: &[f64]) -> Result<(), ModelError> {
        if theta.len() != self.num_params() {
            return Err(ModelError::DimensionMismatch {
                what: "flat parameter vector",
                expected: self.num_params(),
                got: theta.len(),
            });
        }
        let mut at = 0;
        for (w, b) in self.linears_mut() {
            let n = w.rows() * w.cols();
            w.as_mut_slice().copy_from_slice(&theta[at..at + n]);
            at += n;
            if let Some(b) = b {
                let n = b.len();
                b.copy_from_slice(&theta[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    fn bind<'t>(&self, theta: Var<'t>) -> Result<Bound<'t>, ModelError> {
        let mut at = 0;
        let mut take = |w: &Matrix, b: Option<&Vec<f64>>| -> Result<Step<'t>, ModelError> {
            let wv = theta.slice(at, &[w.rows(), w.cols()])?;
            at += w.rows() * w.cols();
            let bv = match b {
                Some(b) => {
                    let v = theta.slice(at, &[b.len()])?;
                    at += b.len();
                    Some(v)
                }
                None => None,
            };
            Ok(Step::Linear(wv, bv))
        };
        let mut steps = Vec::new();
        let mlp = |steps: &mut Vec<Step<'t>>, mlp: &Mlp, take: &mut dyn FnMut(&Matrix, Option<&Vec<f64>>) -> Result<Step<'t>, ModelError>| {
            for (i, l) in mlp.layers.iter().enumerate() {
                if i > 0 {
                    steps.push(Step::Relu);
                }
                steps.push(take(&l.weight, Some(&l.bias))?);
            }
            Ok::<_, ModelError>(())
        };
        if let Some(mu) = &self.mu {
            mlp(&mut steps, mu, &mut take)?;
        }
        if self.rff.is_some() {
            steps.push(Step::Rff);
        }
        steps.push(take(&self.v_hat, None)?);
        steps.push(take(&self.u_hat, None)?);
        mlp(&mut steps, &self.nu, &mut take)?;
        let head_at = steps.len();
        steps.push(take(&self.head.weight, Some(&self.head.bias))?);
        Ok(Bound { steps, head_at })
    }

    fn run<'t>(&self, tape: &'t Tape, x: Var<'t>, steps: &[Step<'t>]) -> Result<Var<'t>, ModelError> {
        let mut h = x;
        let mut pending: Vec<(Var<'t>, Option<Var<'t>>)> = Vec::new();
        for step in steps {
            match step {
                Step::Linear(w, b) => pending.push((*w, *b)),
                Step::Relu => {
                    h = flush(tape, h, &mut pending)?.relu()?;
                }
                Step::Rff => {
                    h = flush(tape, h, &mut pending)?;
                    h = self.rff.as_ref().expect("bound with rff").apply(tape, h)?;
                }
            }
        }
        flush(tape, h, &mut pending)
    }

    fn check_input(&self, x: &Matrix) -> Result<(), ModelError> {
        if x.cols() != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                what: "model input",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape` with parameters taken from the flat
    /// variable `theta` (see [`SimModel::flat_params`]). Returns the head
    /// output (logits for classification) and the hidden state `z`.
    ///
    /// For the RFF-only variant `x` may already be `ψ(x)` when
    /// `features_precomputed` is set; the features do not depend on any
    /// trainable parameter.
    pub fn forward_on_tape<'t>(
        &self,
        tape: &'t Tape,
        theta: Var<'t>,
        x: Var<'t>,
        features_precomputed: bool,
    ) -> Result<Var<'t>, ModelError> {
        let bound = self.bind(theta)?;
        let steps = if features_precomputed {
            if self.variant != Variant::RffOnly {
                return Err(ModelError::VariantMismatch {
                    expected: Variant::RffOnly,
                    got: self.variant,
                });
            }
            &bound.steps[1..]
        } else {
            &bound.steps[..]
        };
        self.run(tape, x, steps)
    }

    fn hidden(&self, x: &Matrix, variant: Variant) -> Result<Matrix, ModelError> {
        if self.variant != variant {
            return Err(ModelError::VariantMismatch {
                expected: variant,
                got: self.variant,
            });
        }
        self.check_input(x)?;
        let tape = Tape::new();
        let theta = tape.constant(Tensor::vector(self.flat_params()))?;
        let bound = self.bind(theta)?;
        let xv = tape.constant(Tensor::from(x))?;
        let z = self.run(&tape, xv, &bound.steps[..bound.head_at])?.value()?.to_matrix();
        Ok(z)
    }

    /// Head output for a batch; softmax probabilities for classification.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix, ModelError> {
        self.check_input(x)?;
        let tape = Tape::new();
        let theta = tape.constant(Tensor::vector(self.flat_params()))?;
        let xv = tape.constant(Tensor::from(x))?;
        let out = self.forward_on_tape(&tape, theta, xv, false)?.value()?.to_matrix();
        Ok(match self.task {
            Task::Regression => out,
            Task::Classification => {
                let cols = out.cols();
                Matrix::new(out.rows(), cols, softmax_rows(out.as_slice(), cols)).expect("finite")
            }
        })
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let m: SimModel = serde_json::from_str(s)?;
        m.check_consistency()?;
        Ok(m)
    }

    fn check_consistency(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.into()));
        let has_mu = self.mu.is_some();
        let has_rff = self.rff.is_some();
        let ok = match self.variant {
            Variant::SingleTier => has_mu && !has_rff,
            Variant::TwoTier => has_mu && has_rff,
            Variant::RffOnly => !has_mu && has_rff,
        };
        if !ok {
            return bad("variant does not match the stored parts");
        }
        let mut width = self.input_dim();
        if let Some(mu) = &self.mu {
            for l in &mu.layers {
                if l.in_dim() != width || l.bias.len() != l.out_dim() {
                    return bad("μ layer dimensions are inconsistent");
                }
                width = l.out_dim();
            }
        }
        if let Some(rff) = &self.rff {
            if rff.input_dim() != width || rff.m != 2 * rff.omega.rows() {
                return bad("RFF dimensions are inconsistent");
            }
            width = rff.m;
        }
        if self.v_hat.cols() != width || self.u_hat.shape() != (width, self.v_hat.rows()) {
            return bad("Û/V̂ dimensions are inconsistent");
        }
        for l in self.nu.layers.iter().chain([&self.head]) {
            if l.in_dim() != width || l.bias.len() != l.out_dim() {
                return bad("ν/head dimensions are inconsistent");
            }
            width = l.out_dim();
        }
        Ok(())
    }
}

/// Applies the pending linear layers to `h`, fused when cheaper.
fn flush<'t>(tape: &'t Tape, h: Var<'t>, pending: &mut Vec<(Var<'t>, Option<Var<'t>>)>) -> Result<Var<'t>, ModelError> {
    let layers = std::mem::take(pending);
    if layers.is_empty() {
        return Ok(h);
    }
    let mut dims = Vec::with_capacity(layers.len());
    for (w, _) in &layers {
        let (o, i) = w.value()?.dims2();
        dims.push((o, i));
    }
    let sequential: usize = dims.iter().map(|(o, i)| o * i).sum();
    let fused = dims[0].1 * dims[dims.len() - 1].0;
    if layers.len() >= 2 && fused < sequential {
        return Ok(tape.affine_chain(h, &layers)?);
    }
    let mut h = h;
    for (w, b) in layers {
        h = h.linear(w, b)?;
    }
    Ok(h)
}

pub fn rff_features(x: &[f64], map: &RffMap) -> Result<Vec<f64>, ModelError> {
    map.features(x)
}

/// `z = ν(Û V̂ μ(x))`, shape `(batch, d)`.
pub fn single_tier_forward(x: &Matrix, model: &SimModel) -> Result<Matrix, ModelError> {
    model.hidden(x, Variant::SingleTier)
}

/// `z = ν(Û′ V̂′ ψ(μ(x)))`.
pub fn two_tier_forward(x: &Matrix, model: &SimModel) -> Result<Matrix, ModelError> {
    model.hidden(x, Variant::TwoTier)
}

/// `z = ν(Û V̂ ψ(x))`.
pub fn rff_only_forward(x: &Matrix, model: &SimModel) -> Result<Matrix, ModelError> {
    model.hidden(x, Variant::RffOnly)
}

/// Linear head on hidden states; softmax rows for classification.
pub fn head_apply(z: &Matrix, model: &SimModel, task: Task) -> Result<Matrix, ModelError> {
    if z.cols() != model.head.in_dim() {
        return Err(ModelError::DimensionMismatch {
            what: "hidden state",
            expected: model.head.in_dim(),
            got: z.cols(),
        });
    }
    let mut out = z.matmul(&model.head.weight.transpose()).expect("checked");
    let cols = out.cols();
    for row in out.as_mut_slice().chunks_exact_mut(cols) {
        for (v, b) in row.iter_mut().zip(&model.head.bias) {
            *v += b;
        }
    }
    Ok(match task {
        Task::Regression => out,
        Task::Classification => Matrix::new(out.rows(), cols, softmax_rows(out.as_slice(), cols)).expect("finite"),
    })
}
