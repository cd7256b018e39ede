//! Adam, gradient clipping, PSNR and the deterministic training loop.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::dynamics::Dataset;
use crate::linalg::Matrix;
use crate::models::{ModelError, SimModel, Task, Variant};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("loss became non-finite at step {step}")]
    NonFinite {
        step: usize,
        /// Parameters from the last step whose loss was finite.
        last_finite: Box<SimModel>,
        history: Vec<MetricsRow>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("metrics output: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    #[default]
    FullBatch,
    Minibatch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    CrossEntropy,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

fn default_psnr_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    pub iterations: usize,
    #[serde(default)]
    pub batch_mode: BatchMode,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossKind,
    /// PSNR on the evaluation set is recorded at multiples of this step.
    #[serde(default = "default_psnr_every")]
    pub psnr_every: usize,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, iterations: usize) -> Self {
        TrainConfig {
            learning_rate,
            adam_betas: default_betas(),
            adam_eps: default_eps(),
            iterations,
            batch_mode: BatchMode::FullBatch,
            clip_norm: None,
            seed: 0,
            loss: LossKind::Mse,
            psnr_every: default_psnr_every(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        let (b1, b2) = self.adam_betas;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam betas must lie in [0, 1), got {:?}", self.adam_betas));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_mode == BatchMode::Minibatch(0) {
            return bad("minibatch size must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if self.psnr_every == 0 {
            return bad("psnr_every must be positive".into());
        }
        Ok(())
    }
}

/// First and second moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &TrainConfig) -> Result<(), TrainError> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "adam: {} params, {} grads, state {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let (b1, b2) = cfg.adam_betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let lr = cfg.learning_rate;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales so the global L2 norm is at most `max_norm`.
pub fn clip_gradients(grads: &[f64], max_norm: f64) -> Vec<f64> {
    let mut g = grads.to_vec();
    clip_in_place(&mut g, max_norm);
    g
}

fn clip_in_place(grads: &mut [f64], max_norm: f64) {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

/// `10·log10(1/MSE)` with `pred` clamped to [0, 1]; `+∞` when MSE is 0.
pub fn psnr(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(TrainError::ShapeMismatch(format!(
            "psnr: {} vs {} values",
            pred.len(),
            target.len()
        )));
    }
    let mse = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p.clamp(0.0, 1.0) - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// `inf` for the zero-error sentinel, otherwise the shortest round-trip form.
pub fn format_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// 1-based optimizer step.
    pub step: usize,
    /// Loss of the batch seen at this step, before the update.
    pub loss: f64,
    /// PSNR on the evaluation set after the update, when recorded.
    pub psnr: Option<f64>,
}

/// Streams `step,loss[,psnr]` rows, flushing every 100 rows.
pub struct MetricsWriter<W: Write> {
    out: W,
    with_psnr: bool,
    rows: usize,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, with_psnr: bool) -> io::Result<Self> {
        out.write_all(if with_psnr { b"step,loss,psnr\n" } else { b"step,loss\n" })?;
        Ok(MetricsWriter {
            out,
            with_psnr,
            rows: 0,
        })
    }

    pub fn push(&mut self, row: &MetricsRow) -> io::Result<()> {
        if self.with_psnr {
            let p = row.psnr.map(format_metric).unwrap_or_default();
            writeln!(self.out, "{},{},{}", row.step, format_metric(row.loss), p)?;
        } else {
            writeln!(self.out, "{},{}", row.step, format_metric(row.loss))?;
        }
        self.rows += 1;
        if self.rows % 100 == 0 {
            self.out.flush()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Renders a full history as CSV text.
pub fn metrics_csv(history: &[MetricsRow], with_psnr: bool) -> String {
    let mut w = MetricsWriter::new(Vec::new(), with_psnr).expect("in-memory");
    for row in history {
        w.push(row).expect("in-memory");
    }
    String::from_utf8(w.finish().expect("in-memory")).expect("ascii")
}

/// Training inputs fed to the tape: raw inputs, or `ψ(x)` for RFF-only models
/// (the features do not depend on trainable parameters, so they are computed
/// once).
struct Prepared {
    inputs: Matrix,
    precomputed: bool,
    labels: Option<Vec<usize>>,
}

fn prepare(model: &SimModel, data: &Dataset, cfg: &TrainConfig) -> Result<Prepared, TrainError> {
    if data.is_empty() {
        return Err(TrainError::BadConfig("dataset is empty".into()));
    }
    if data.input_dim() != model.input_dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "dataset inputs have {} columns, model expects {}",
            data.input_dim(),
            model.input_dim()
        )));
    }
    let labels = match cfg.loss {
        LossKind::Mse => {
            if data.target_dim() != model.output_dim() {
                return Err(TrainError::ShapeMismatch(format!(
                    "dataset targets have {} columns, model outputs {}",
                    data.target_dim(),
                    model.output_dim()
                )));
            }
            None
        }
        LossKind::CrossEntropy => {
            if model.task != Task::Classification || data.target_dim() != 1 {
                return Err(TrainError::BadConfig(
                    "cross-entropy needs a classification model and one label column".into(),
                ));
            }
            let mut labels = Vec::with_capacity(data.len());
            for &v in data.targets.as_slice() {
                if v < 0.0 || v.fract() != 0.0 || v as usize >= model.output_dim() {
                    return Err(TrainError::BadConfig(format!("invalid class label {v}")));
                }
                labels.push(v as usize);
            }
            Some(labels)
        }
    };
    if cfg.loss == LossKind::Mse && model.task == Task::Classification {
        return Err(TrainError::BadConfig("mse loss needs a regression model".into()));
    }
    let precomputed = model.variant == Variant::RffOnly;
    let inputs = if precomputed {
        model.rff.as_ref().expect("rff-only has rff").features_batch(&data.inputs)?
    } else {
        data.inputs.clone()
    };
    Ok(Prepared {
        inputs,
        precomputed,
        labels,
    })
}

fn rows_of(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), m.cols(), |i, j| m[(idx[i], j)])
}

/// Loss and flat gradient for one batch.
fn loss_and_grad(
    model: &SimModel,
    theta: &[f64],
    inputs: &Matrix,
    targets: &Matrix,
    labels: Option<&[usize]>,
    precomputed: bool,
) -> Result<(f64, Vec<f64>), TrainError> {
    let tape = Tape::new();
    let th = tape.param(Tensor::vector(theta.to_vec()))?;
    let x = tape.constant(Tensor::from(inputs))?;
    let out = model.forward_on_tape(&tape, th, x, precomputed)?;
    let loss = match labels {
        Some(l) => out.softmax_cross_entropy(l)?,
        None => out.mse(tape.constant(Tensor::from(targets))?)?,
    };
    let value = loss.item()?;
    let grads = tape.backward(loss)?;
    let g = grads.get_or_zeros(th, &[theta.len()]).into_data();
    Ok((value, g))
}

/// Runs `cfg.iterations` Adam steps. See [`train_with`].
pub fn train(model: &SimModel, data: &Dataset, cfg: &TrainConfig) -> Result<(SimModel, Vec<MetricsRow>), TrainError> {
    train_with(model, data, cfg, None, |_| Ok(()))
}

/// Trains a copy of `model`. Every step's loss is recorded; when `eval` is
/// given, PSNR of the model's predictions on it is recorded every
/// `cfg.psnr_every` steps and at the final step. `on_row` sees each row as it
/// is produced (used to stream the metrics file).
pub fn train_with(
    model: &SimModel,
    data: &Dataset,
    cfg: &TrainConfig,
    eval: Option<&Dataset>,
    mut on_row: impl FnMut(&MetricsRow) -> io::Result<()>,
) -> Result<(SimModel, Vec<MetricsRow>), TrainError> {
    cfg.validate()?;
    let prep = prepare(model, data, cfg)?;
    let mut current = model.clone();
    let mut theta = current.flat_params();
    let mut adam = AdamState::new(theta.len());
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    for step in 1..=cfg.iterations {
        let (loss, mut grad) = match cfg.batch_mode {
            BatchMode::FullBatch => loss_and_grad(
                &current,
                &theta,
                &prep.inputs,
                &data.targets,
                prep.labels.as_deref(),
                prep.precomputed,
            )?,
            BatchMode::Minibatch(size) => {
                if cursor >= n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let idx = &order[cursor..(cursor + size).min(n)];
                cursor += idx.len();
                let labels = prep.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect::<Vec<_>>());
                loss_and_grad(
                    &current,
                    &theta,
                    &rows_of(&prep.inputs, idx),
                    &rows_of(&data.targets, idx),
                    labels.as_deref(),
                    prep.precomputed,
                )?
            }
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                last_finite: Box::new(current),
                history,
            });
        }
        if let Some(c) = cfg.clip_norm {
            clip_in_place(&mut grad, c);
        }
        adam_step(&mut theta, &grad, &mut adam, cfg)?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                last_finite: Box::new(current),
                history,
            });
        }
        current.set_flat_params(&theta)?;
        let psnr = match eval {
            Some(ev) if step % cfg.psnr_every == 0 || step == cfg.iterations => {
                let pred = current.predict(&ev.inputs)?;
                Some(psnr(pred.as_slice(), ev.targets.as_slice())?)
            }
            _ => None,
        };
        let row = MetricsRow { step, loss, psnr };
        on_row(&row)?;
        history.push(row);
    }
    Ok((current, history))
}

/// Mean squared error of the model's (regression) predictions.
pub fn evaluate_mse(model: &SimModel, data: &Dataset) -> Result<f64, TrainError> {
    let pred = model.predict(&data.inputs)?;
    if pred.shape() != data.targets.shape() {
        return Err(TrainError::ShapeMismatch(format!(
            "predictions {:?} vs targets {:?}",
            pred.shape(),
            data.targets.shape()
        )));
    }
    Ok(pred.sub(&data.targets).expect("same shape").as_slice().iter().map(|v| v * v).sum::<f64>()
        / pred.as_slice().len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_model, ModelConfig};

    #[test]
    fn adam_first_step_closed_form() {
        let cfg = TrainConfig::new(0.1, 1);
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        assert_eq!(s.t, 1);
        assert!((p[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-17);
    }

    #[test]
    fn adam_zero_gradient_and_shapes() {
        let cfg = TrainConfig::new(0.1, 1);
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.t, 1);
        assert!(matches!(
            adam_step(&mut p, &[0.0], &mut s, &cfg),
            Err(TrainError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn adam_first_step_direction() {
        let cfg = TrainConfig::new(0.01, 1);
        let g = [3.0, -1e-3, 0.5, -40.0];
        let mut p = vec![0.0; 4];
        adam_step(&mut p, &g, &mut AdamState::new(4), &cfg).unwrap();
        for (d, g) in p.iter().zip(g) {
            assert_eq!(d.signum(), -g.signum());
        }
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_gradients(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let c = clip_gradients(&[3.0, 4.0], 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip_gradients(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
        let once = clip_gradients(&[5.0, -12.0, 1.0], 2.0);
        assert_eq!(clip_gradients(&once, 2.0), once);
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), f64::INFINITY);
        assert!((psnr(&[0.6], &[0.5]).unwrap() - 20.0).abs() < 1e-9);
        let t = 0.001f64.sqrt();
        assert!((psnr(&[0.5 + t], &[0.5]).unwrap() - 30.0).abs() < 1e-9);
        // clamping: prediction 1.7 counts as 1.0
        assert_eq!(psnr(&[1.7], &[1.0]).unwrap(), f64::INFINITY);
        assert!(psnr(&[0.1], &[0.1, 0.2]).is_err());
        assert_eq!(format_metric(f64::INFINITY), "inf");
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            lift_dim: Some(6),
            mu_hidden: 8,
            nu_hidden: 8,
            hidden_dim: Some(4),
            ..ModelConfig::new(Variant::SingleTier, 1, 1)
        }
    }

    fn line_data(n: usize, f: impl Fn(f64) -> f64) -> Dataset {
        let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        Dataset::new(
            Matrix::new(n, 1, xs.clone()).unwrap(),
            Matrix::new(n, 1, xs.iter().map(|&x| f(x)).collect()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn learns_constant_target() {
        let model = init_model(&small_cfg(), 0).unwrap();
        let data = line_data(20, |_| 0.7);
        let (_, hist) = train(&model, &data, &TrainConfig::new(1e-2, 200)).unwrap();
        assert!(hist.last().unwrap().loss < 1e-4, "{}", hist.last().unwrap().loss);
        assert_eq!(hist.len(), 200);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let model = init_model(&small_cfg(), 1).unwrap();
        let data = line_data(10, |x| x * x);
        let (trained, _) = train(&model, &data, &TrainConfig::new(0.0, 5)).unwrap();
        assert_eq!(trained, model);
    }

    #[test]
    fn minibatch_is_reproducible_and_decreases_loss() {
        let model = init_model(&small_cfg(), 2).unwrap();
        let data = line_data(100, |x| x.sin());
        let mut cfg = TrainConfig::new(3e-3, 300);
        cfg.batch_mode = BatchMode::Minibatch(32);
        cfg.seed = 9;
        let (a, ha) = train(&model, &data, &cfg).unwrap();
        let (b, hb) = train(&model, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(metrics_csv(&ha, false), metrics_csv(&hb, false));
        let first: f64 = ha[..30].iter().map(|r| r.loss).sum();
        let last: f64 = ha[270..].iter().map(|r| r.loss).sum();
        assert!(last < first);
    }

    #[test]
    fn psnr_recorded_on_eval_set() {
        let model = init_model(&small_cfg(), 3).unwrap();
        let data = line_data(16, |x| 0.5 + 0.25 * x);
        let mut cfg = TrainConfig::new(1e-3, 25);
        cfg.psnr_every = 10;
        let (_, hist) = train_with(&model, &data, &cfg, Some(&data), |_| Ok(())).unwrap();
        let steps: Vec<usize> = hist.iter().filter(|r| r.psnr.is_some()).map(|r| r.step).collect();
        assert_eq!(steps, vec![10, 20, 25]);
        let csv = metrics_csv(&hist, true);
        assert!(csv.starts_with("step,loss,psnr\n1,"));
        assert!(csv.lines().nth(1).unwrap().ends_with(','));
    }

    #[test]
    fn non_finite_loss_aborts_with_checkpoint() {
        let model = init_model(&small_cfg(), 4).unwrap();
        let data = line_data(8, |x| x);
        let mut cfg = TrainConfig::new(1e300, 10);
        cfg.adam_eps = 1e-300;
        match train(&model, &data, &cfg) {
            Err(TrainError::NonFinite { step, last_finite, .. }) => {
                assert!(step >= 1);
                assert!(last_finite.flat_params().iter().all(|v| v.is_finite()));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let model = init_model(&small_cfg(), 0).unwrap();
        let data = line_data(4, |x| x);
        for cfg in [
            TrainConfig::new(-1.0, 1),
            TrainConfig::new(0.1, 0),
            TrainConfig {
                adam_betas: (1.0, 0.5),
                ..TrainConfig::new(0.1, 1)
            },
        ] {
            assert!(matches!(train(&model, &data, &cfg), Err(TrainError::BadConfig(_))));
        }
        let empty = Dataset::new(Matrix::zeros(0, 1), Matrix::zeros(0, 1)).unwrap();
        assert!(train(&model, &empty, &TrainConfig::new(0.1, 1)).is_err());
        let json = r#"{"learning_rate": 0.001, "iterations": 10, "batch_mode": {"minibatch": 32}}"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.batch_mode, BatchMode::Minibatch(32));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1, "iterations": 1, "lr": 2}"#).is_err());
    }

    #[test]
    fn cross_entropy_training() {
        let cfg_m = ModelConfig {
            task: Task::Classification,
            output_dim: 2,
            ..small_cfg()
        };
        let model = init_model(&cfg_m, 0).unwrap();
        let xs = line_data(40, |x| if x > 0.0 { 1.0 } else { 0.0 });
        let mut cfg = TrainConfig::new(1e-2, 150);
        cfg.loss = LossKind::CrossEntropy;
        let (trained, hist) = train(&model, &xs, &cfg).unwrap();
        assert!(hist.last().unwrap().loss < hist[0].loss);
        let p = trained.predict(&Matrix::from_rows(&[[0.9], [-0.9]]).unwrap()).unwrap();
        assert!(p[(0, 1)] > 0.5 && p[(1, 0)] > 0.5);
    }
}
