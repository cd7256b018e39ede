//! Dense real linear algebra: the numeric carrier for every other module.

mod eigen;
pub(crate) mod gemm;
mod lu;
mod matrix;
mod svd;

use thiserror::Error;

pub use eigen::{eig, eigenvalues, residual, EigenDecomposition};
pub(crate) use eigen::eigenvectors_for;
pub use lu::{inverse, solve_linear};
pub use matrix::Matrix;
pub use svd::{condition_number, numeric_rank, singular_values};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("QR iteration did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("matrix is singular (pivot {pivot:e} in column {column})")]
    Singular { pivot: f64, column: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("data length {got} does not match shape (expected {expected})")]
    BadLength { expected: usize, got: usize },
    #[error("ragged row at line {line}: expected {expected} fields, got {got}")]
    Ragged { line: usize, expected: usize, got: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// `A^l` by repeated squaring; `A^0` is the identity.
pub fn matpow(a: &Matrix, l: u64) -> Result<Matrix, LinalgError> {
    let n = a.ensure_square()?;
    let mut result = Matrix::identity(n);
    let mut base = a.clone();
    let mut e = l;
    let mut first = true;
    while e > 0 {
        if e & 1 == 1 {
            result = if first { base.clone() } else { gemm::mul_nn(&result, &base) };
            first = false;
        }
        e >>= 1;
        if e > 0 {
            base = gemm::mul_nn(&base, &base);
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matpow_examples() {
        assert_eq!(matpow(&Matrix::identity(2), 7).unwrap(), Matrix::identity(2));
        let rot = Matrix::from_rows(&[[0.0, 1.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(matpow(&rot, 4).unwrap(), Matrix::identity(2));
        let a = Matrix::from_rows(&[[0.5, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(
            matpow(&a, 3).unwrap(),
            Matrix::from_rows(&[[0.125, 1.75], [0.0, 1.0]]).unwrap()
        );
        assert_eq!(matpow(&a, 0).unwrap(), Matrix::identity(2));
        assert!(matpow(&Matrix::zeros(2, 3), 2).is_err());
    }

    #[test]
    fn csv_round_trip_and_ragged_rejection() {
        let m = Matrix::from_csv_str("1,2\n3.5, -4\n").unwrap();
        assert_eq!(m, Matrix::from_rows(&[[1.0, 2.0], [3.5, -4.0]]).unwrap());
        assert_eq!(Matrix::from_csv_str(&m.to_csv()).unwrap(), m);
        assert!(matches!(Matrix::from_csv_str("1,2\n3\n"), Err(LinalgError::Ragged { .. })));
        assert!(matches!(Matrix::from_csv_str("1,x\n"), Err(LinalgError::Parse { .. })));
        assert!(matches!(Matrix::from_csv_str("1,inf\n"), Err(LinalgError::NonFinite { .. })));
    }

    #[test]
    fn construction_rejects_nan() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn json_nested_arrays() {
        let m = Matrix::from_rows(&[[1.0, 0.1], [2.0, 3.0]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[1.0,0.1],[2.0,3.0]]");
        let back: Matrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
