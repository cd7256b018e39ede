use super::{LinalgError, Matrix};

/// LU factorization with partial pivoting, `P A = L U` packed in one buffer.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(a: &Matrix) -> Result<Lu, LinalgError> {
        let n = a.ensure_square()?;
        let threshold = 1e-12 * a.frobenius_norm();
        let mut lu = a.as_slice().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax <= threshold || pmax == 0.0 {
                return Err(LinalgError::Singular { pivot: pmax, column: k });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in (k + 1)..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| x[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[i * n + j] * y[j]).sum();
            y[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = ((i + 1)..n).map(|j| self.lu[i * n + j] * y[j]).sum();
            y[i] = (y[i] - s) / self.lu[i * n + i];
        }
        x.copy_from_slice(&y);
    }
}

/// Solves `A X = B` by LU with partial pivoting.
///
/// Fails with [`LinalgError::Singular`] when a pivot magnitude drops to
/// `1e-12 * ‖A‖_F` or below.
pub fn solve_linear(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    let n = a.ensure_square()?;
    if b.rows() != n {
        return Err(LinalgError::DimensionMismatch {
            op: "solve_linear",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let lu = Lu::factor(a)?;
    let mut x = Matrix::zeros(n, b.cols());
    let mut col = vec![0.0; n];
    for j in 0..b.cols() {
        for i in 0..n {
            col[i] = b[(i, j)];
        }
        lu.solve_in_place(&mut col);
        for i in 0..n {
            x[(i, j)] = col[i];
        }
    }
    Ok(x)
}

pub fn inverse(a: &Matrix) -> Result<Matrix, LinalgError> {
    let n = a.ensure_square()?;
    solve_linear(a, &Matrix::identity(n))
}
