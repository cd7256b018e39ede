//! Forward fixed-point oracle for weight-tied maps `z ← f(z, x)` and toy
//! systems whose Koopman lift is exactly finite-dimensional.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::spectra::{self, SpectraError};

/// Iterates stop once `‖z‖∞` exceeds this.
pub const DIVERGENCE_BOUND: f64 = 1e9;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("tolerance must be positive and finite, got {0}")]
    BadTolerance(f64),
    #[error("toy system needs |lam| < 1 and |mu| < 1 (got lam={lam}, mu={mu})")]
    UnstableParameters { lam: f64, mu: f64 },
    #[error("fixed-point iteration diverged for all {0} samples")]
    AllDiverged(usize),
    #[error("dataset csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("dataset csv: {0}")]
    BadCsv(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
}

type StepFn = dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// A weight-tied layer `f(z, x)` with state dimension `d` and input dimension `D`.
#[derive(Clone)]
pub struct IteratedMap {
    pub state_dim: usize,
    pub input_dim: usize,
    step: Arc<StepFn>,
}

impl IteratedMap {
    pub fn new<F>(state_dim: usize, input_dim: usize, step: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        IteratedMap {
            state_dim,
            input_dim,
            step: Arc::new(step),
        }
    }

    pub fn step(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        (self.step)(z, x)
    }
}

impl fmt::Debug for IteratedMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IteratedMap")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub z_star: Vec<f64>,
    /// Number of `z ← f(z, x)` updates performed.
    pub iterations: usize,
    /// `‖f(z_star, x) − z_star‖∞`.
    pub residual: f64,
    pub converged: bool,
    /// Iterate became non-finite or left the `DIVERGENCE_BOUND` ball.
    pub diverged: bool,
}

fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (p, q)| {
        let d = (p - q).abs();
        if d.is_nan() || d > m {
            d
        } else {
            m
        }
    })
}

fn blown_up(z: &[f64]) -> bool {
    z.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND)
}

/// Picard iteration from `z0` (zero when `None`). Converged means the residual
/// at the returned iterate is at most `tol`; divergence is reported through the
/// `diverged` flag rather than an error so callers keep the last iterate.
pub fn deq_forward(
    map: &IteratedMap,
    x: &[f64],
    z0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointResult, DynamicsError> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(DynamicsError::BadTolerance(tol));
    }
    if x.len() != map.input_dim {
        return Err(DynamicsError::DimensionMismatch {
            what: "input x",
            expected: map.input_dim,
            got: x.len(),
        });
    }
    let mut z = match z0 {
        Some(z0) if z0.len() != map.state_dim => {
            return Err(DynamicsError::DimensionMismatch {
                what: "initial state z0",
                expected: map.state_dim,
                got: z0.len(),
            })
        }
        Some(z0) => z0.to_vec(),
        None => vec![0.0; map.state_dim],
    };
    let mut iterations = 0;
    loop {
        let next = map.step(&z, x);
        if next.len() != map.state_dim {
            return Err(DynamicsError::DimensionMismatch {
                what: "step output",
                expected: map.state_dim,
                got: next.len(),
            });
        }
        let residual = inf_dist(&next, &z);
        if residual <= tol || iterations >= max_iter {
            return Ok(FixedPointResult {
                z_star: z,
                iterations,
                residual,
                converged: residual <= tol,
                diverged: false,
            });
        }
        z = next;
        iterations += 1;
        if blown_up(&z) {
            return Ok(FixedPointResult {
                z_star: z,
                iterations,
                residual: f64::INFINITY,
                converged: false,
                diverged: true,
            });
        }
    }
}

type BasisFn = dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// A map together with observables `φ(z, x)` and a matrix `A` advancing them.
#[derive(Clone)]
pub struct LiftedSystem {
    pub map: IteratedMap,
    basis: Arc<BasisFn>,
    pub lift_matrix: Matrix,
    pub exact: bool,
}

impl fmt::Debug for LiftedSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LiftedSystem")
            .field("map", &self.map)
            .field("lift_matrix", &self.lift_matrix)
            .field("exact", &self.exact)
            .finish_non_exhaustive()
    }
}

impl LiftedSystem {
    pub fn basis(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        (self.basis)(z, x)
    }

    /// `‖φ(f(z,x), x) − A φ(z,x)‖∞` at one point.
    pub fn lift_error(&self, z: &[f64], x: &[f64]) -> Result<f64, DynamicsError> {
        let lhs = self.basis(&self.map.step(z, x), x);
        let rhs = self.lift_matrix.matvec(&self.basis(z, x))?;
        Ok(inf_dist(&lhs, &rhs))
    }

    /// Limit of the lifted dynamics started at `φ(z0, x)`, i.e. `P φ(z0, x)`.
    /// The first `state_dim` components are the predicted fixed point when the
    /// basis starts with the state itself (true for the toy system).
    pub fn limit_observables(&self, z0: &[f64], x: &[f64], eig_tol: f64) -> Result<Vec<f64>, DynamicsError> {
        let p = spectra::fixed_point_projector(&self.lift_matrix, eig_tol)?;
        Ok(p.matvec(&self.basis(z0, x))?)
    }
}

/// `z₁′ = λ z₁ + x`, `z₂′ = μ z₂ + c z₁²`, lifted exactly by
/// `φ = (z₁, z₂, z₁², x z₁, x², x, 1)`.
pub fn toy_koopman_system(lam: f64, mu: f64, c: f64) -> Result<LiftedSystem, DynamicsError> {
    if !(lam.abs() < 1.0 && mu.abs() < 1.0) || !c.is_finite() {
        return Err(DynamicsError::UnstableParameters { lam, mu });
    }
    let map = IteratedMap::new(2, 1, move |z, x| vec![lam * z[0] + x[0], mu * z[1] + c * z[0] * z[0]]);
    let basis = |z: &[f64], x: &[f64]| vec![z[0], z[1], z[0] * z[0], x[0] * z[0], x[0] * x[0], x[0], 1.0];
    #[rustfmt::skip]
    let lift = Matrix::from_rows(&[
        [lam, 0.0, 0.0,       0.0,       0.0, 1.0, 0.0],
        [0.0, mu,  c,         0.0,       0.0, 0.0, 0.0],
        [0.0, 0.0, lam * lam, 2.0 * lam, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0,       lam,       1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0,       0.0,       1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0,       0.0,       0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0,       0.0,       0.0, 0.0, 1.0],
    ])?;
    Ok(LiftedSystem {
        map,
        basis: Arc::new(basis),
        lift_matrix: lift,
        exact: true,
    })
}

/// (input, target) pairs stored as two row-aligned matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self, DynamicsError> {
        if inputs.rows() != targets.rows() {
            return Err(DynamicsError::DimensionMismatch {
                what: "target rows",
                expected: inputs.rows(),
                got: targets.rows(),
            });
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.cols()
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let pick = |m: &Matrix| Matrix::from_fn(idx.len(), m.cols(), |i, j| m[(idx[i], j)]);
        Dataset {
            inputs: pick(&self.inputs),
            targets: pick(&self.targets),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DynamicsError> {
        let mut out = csv::Writer::from_writer(w);
        let header: Vec<String> = (0..self.input_dim())
            .map(|i| format!("x{i}"))
            .chain((0..self.target_dim()).map(|i| format!("z{i}")))
            .collect();
        out.write_record(&header)?;
        for r in 0..self.len() {
            let row: Vec<String> = self
                .inputs
                .row(r)
                .iter()
                .chain(self.targets.row(r))
                .map(|v| format!("{v:?}"))
                .collect();
            out.write_record(&row)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Dataset, DynamicsError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let header = rdr.headers()?.clone();
        let d_in = header.iter().take_while(|h| h.starts_with('x')).count();
        let d_out = header.len() - d_in;
        for (i, h) in header.iter().enumerate() {
            let want = if i < d_in { format!("x{i}") } else { format!("z{}", i - d_in) };
            if h != want {
                return Err(DynamicsError::BadCsv(format!("header column {i} is '{h}', expected '{want}'")));
            }
        }
        let (mut xs, mut zs, mut n) = (Vec::new(), Vec::new(), 0);
        for rec in rdr.records() {
            let rec = rec?;
            for (i, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| DynamicsError::BadCsv(format!("row {}: '{field}' is not a number", n + 1)))?;
                if i < d_in {
                    xs.push(v)
                } else {
                    zs.push(v)
                }
            }
            n += 1;
        }
        Dataset::new(Matrix::new(n, d_in, xs)?, Matrix::new(n, d_out, zs)?)
    }
}

/// Runs `deq_forward` from zero for every input and keeps the converged ones,
/// in input order. Returns the dataset and the number of dropped samples.
pub fn generate_fixed_point_dataset(
    map: &IteratedMap,
    xs: &[Vec<f64>],
    tol: f64,
    max_iter: usize,
) -> Result<(Dataset, usize), DynamicsError> {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut dropped = 0;
    for x in xs {
        let r = deq_forward(map, x, None, tol, max_iter)?;
        if r.converged {
            inputs.extend_from_slice(x);
            targets.extend(r.z_star);
        } else {
            dropped += 1;
        }
    }
    if !xs.is_empty() && dropped == xs.len() {
        return Err(DynamicsError::AllDiverged(dropped));
    }
    let n = xs.len() - dropped;
    let data = Dataset::new(
        Matrix::new(n, map.input_dim, inputs)?,
        Matrix::new(n, map.state_dim, targets)?,
    )?;
    Ok((data, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::{classify, ConvergenceClass, DEFAULT_EIG_TOL};

    fn affine() -> IteratedMap {
        IteratedMap::new(1, 1, |z, x| vec![0.5 * z[0] + x[0]])
    }

    fn bisect(g: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        assert!(g(lo) * g(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(lo) * g(mid) <= 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn affine_contraction() {
        let r = deq_forward(&affine(), &[1.0], None, 1e-12, 1000).unwrap();
        assert!(r.converged && !r.diverged);
        assert!((r.z_star[0] - 2.0).abs() < 1e-11);
        assert!(r.residual <= 1e-12);
    }

    #[test]
    fn constant_map_one_step() {
        let m = IteratedMap::new(2, 2, |_, x| x.to_vec());
        let r = deq_forward(&m, &[3.0, -1.0], Some(&[10.0, 10.0]), 1e-12, 50).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.z_star, vec![3.0, -1.0]);
    }

    #[test]
    fn tanh_matches_bisection() {
        let m = IteratedMap::new(1, 1, |z, x| vec![(0.5 * z[0] + x[0]).tanh()]);
        let r = deq_forward(&m, &[1.0], None, 1e-13, 10_000).unwrap();
        let want = bisect(|z| (0.5 * z + 1.0).tanh() - z, 0.0, 1.0);
        assert!((r.z_star[0] - want).abs() < 1e-12, "{} vs {want}", r.z_star[0]);
    }

    #[test]
    fn divergence_is_flagged() {
        let m = IteratedMap::new(1, 1, |z, x| vec![2.0 * z[0] + x[0]]);
        let r = deq_forward(&m, &[1.0], None, 1e-8, 1000).unwrap();
        assert!(r.diverged && !r.converged);
        let nan = IteratedMap::new(1, 1, |_, _| vec![f64::NAN]);
        assert!(deq_forward(&nan, &[0.0], None, 1e-8, 10).unwrap().diverged);
    }

    #[test]
    fn max_iter_reports_residual() {
        let r = deq_forward(&affine(), &[1.0], None, 1e-12, 3).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert!((r.residual - 0.125).abs() < 1e-15);
    }

    #[test]
    fn bad_arguments() {
        assert!(matches!(
            deq_forward(&affine(), &[1.0], None, 0.0, 10),
            Err(DynamicsError::BadTolerance(_))
        ));
        assert!(matches!(
            deq_forward(&affine(), &[1.0, 2.0], None, 1e-6, 10),
            Err(DynamicsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn toy_zero_parameters() {
        let sys = toy_koopman_system(0.0, 0.0, 0.0).unwrap();
        let x = 0.7;
        let next = sys.lift_matrix.matvec(&sys.basis(&[0.3, -0.4], &[x])).unwrap();
        let want = [x, 0.0, x * x, x * x, x * x, x, 1.0];
        for (a, b) in next.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let r = deq_forward(&sys.map, &[x], None, 1e-14, 10).unwrap();
        assert_eq!(r.z_star, vec![x, 0.0]);
    }

    #[test]
    fn toy_fixed_point_and_limit() {
        let sys = toy_koopman_system(0.5, 0.5, 1.0).unwrap();
        let r = deq_forward(&sys.map, &[1.0], None, 1e-13, 10_000).unwrap();
        assert!((r.z_star[0] - 2.0).abs() < 1e-11 && (r.z_star[1] - 8.0).abs() < 1e-10);
        assert_eq!(
            classify(&sys.lift_matrix, DEFAULT_EIG_TOL).unwrap().class,
            ConvergenceClass::ConvergesToFixedPoint
        );
        let lim = sys.limit_observables(&[0.0, 0.0], &[1.0], DEFAULT_EIG_TOL).unwrap();
        assert!((lim[0] - 2.0).abs() < 1e-8 && (lim[1] - 8.0).abs() < 1e-8, "{lim:?}");
    }

    #[test]
    fn toy_rejects_unstable() {
        assert!(matches!(
            toy_koopman_system(1.0, 0.2, 1.0),
            Err(DynamicsError::UnstableParameters { .. })
        ));
        assert!(toy_koopman_system(0.2, -1.5, 1.0).is_err());
    }

    #[test]
    fn datasets() {
        let xs = vec![vec![0.0], vec![1.0], vec![2.0]];
        let (d, dropped) = generate_fixed_point_dataset(&affine(), &xs, 1e-12, 1000).unwrap();
        assert_eq!(dropped, 0);
        for (i, want) in [0.0, 2.0, 4.0].iter().enumerate() {
            assert!((d.targets[(i, 0)] - want).abs() < 1e-10);
        }
        let toy = toy_koopman_system(0.5, 0.5, 1.0).unwrap();
        let (d, _) = generate_fixed_point_dataset(&toy.map, &[vec![1.0]], 1e-13, 10_000).unwrap();
        assert!((d.targets[(0, 0)] - 2.0).abs() < 1e-10 && (d.targets[(0, 1)] - 8.0).abs() < 1e-10);
        let (d, dropped) = generate_fixed_point_dataset(&affine(), &[], 1e-12, 10).unwrap();
        assert!(d.is_empty() && dropped == 0);
    }

    #[test]
    fn dropping_and_all_diverged() {
        // contraction only for |x| < 1
        let m = IteratedMap::new(1, 1, |z, x| vec![x[0].abs() * 1.5 * z[0] + 1.0]);
        let xs = vec![vec![0.1], vec![5.0], vec![0.2]];
        let (d, dropped) = generate_fixed_point_dataset(&m, &xs, 1e-10, 10_000).unwrap();
        assert_eq!((d.len(), dropped), (2, 1));
        assert_eq!(d.inputs.column(0), vec![0.1, 0.2]);
        assert!(matches!(
            generate_fixed_point_dataset(&m, &[vec![5.0]], 1e-10, 10_000),
            Err(DynamicsError::AllDiverged(1))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let d = Dataset::new(
            Matrix::from_rows(&[[0.1, 0.2], [1.0 / 3.0, -4.0]]).unwrap(),
            Matrix::from_rows(&[[5.0], [6.5]]).unwrap(),
        )
        .unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x0,x1,z0\n"));
        assert_eq!(Dataset::read_csv(&buf[..]).unwrap(), d);
        assert!(Dataset::read_csv("x0,y0\n1,2\n".as_bytes()).is_err());
    }
}
