use super::Matrix;

const MAX_SWEEPS: usize = 80;

/// Singular values by one-sided Jacobi rotations, sorted descending.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    // Work on the orientation with fewer columns; the nonzero spectrum is shared.
    let m = if a.cols() > a.rows() { a.transpose() } else { a.clone() };
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    // Column-major copy so each column is contiguous.
    let mut c: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let eps = f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&c[p], &c[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..rows {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = c.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for i in 0..rows {
                    let x = cp[i];
                    let y = cq[i];
                    cp[i] = cs * x - sn * y;
                    cq[i] = sn * x + cs * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = c.iter().map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values strictly greater than `tol * σ_max`.
pub fn numeric_rank(a: &Matrix, tol: f64) -> usize {
    let sv = singular_values(a);
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * smax).count()
}

/// 2-norm condition number `σ_max / σ_min` of a square matrix (∞ when singular).
pub fn condition_number(a: &Matrix) -> f64 {
    let sv = singular_values(a);
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(numeric_rank(&Matrix::identity(3), 1e-10), 3);
        assert_eq!(numeric_rank(&Matrix::zeros(2, 2), 1e-10), 0);
        let ones = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(numeric_rank(&ones, 1e-10), 1);
    }

    #[test]
    fn singular_values_of_known_matrix() {
        // [[3,0],[4,5]] has singular values sqrt(45), sqrt(5).
        let a = Matrix::from_rows(&[[3.0, 0.0], [4.0, 5.0]]).unwrap();
        let sv = singular_values(&a);
        assert!((sv[0] - 45f64.sqrt()).abs() < 1e-12);
        assert!((sv[1] - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn wide_matrix_rank() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]).unwrap();
        assert_eq!(numeric_rank(&a, 1e-10), 1);
        assert_eq!(numeric_rank(&a.transpose(), 1e-10), 1);
    }
}
