//! Thin safe wrapper over the `matrixmultiply` kernels.

use super::Matrix;

/// `c = alpha * op(a) * op(b) + beta * c` on matrices, where `op` optionally transposes.
pub(crate) fn gemm(alpha: f64, a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, beta: f64, c: &mut Matrix) {
    let (cr, cc) = c.shape();
    gemm_slices(
        alpha,
        a.as_slice(),
        a.shape(),
        trans_a,
        b.as_slice(),
        b.shape(),
        trans_b,
        beta,
        c.as_mut_slice(),
        (cr, cc),
    )
}

/// Row-major slice version of [`gemm`]; `*_shape` are the stored (rows, cols).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_slices(
    alpha: f64,
    a: &[f64],
    a_shape: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_shape: (usize, usize),
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
    c_shape: (usize, usize),
) {
    assert_eq!(a.len(), a_shape.0 * a_shape.1);
    assert_eq!(b.len(), b_shape.0 * b_shape.1);
    assert_eq!(c.len(), c_shape.0 * c_shape.1);
    let (m, k, rsa, csa) = if trans_a {
        (a_shape.1, a_shape.0, 1isize, a_shape.1 as isize)
    } else {
        (a_shape.0, a_shape.1, a_shape.1 as isize, 1isize)
    };
    let (kb, n, rsb, csb) = if trans_b {
        (b_shape.1, b_shape.0, 1isize, b_shape.1 as isize)
    } else {
        (b_shape.0, b_shape.1, b_shape.1 as isize, 1isize)
    };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!((m, n), c_shape, "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        scale_output(c, beta);
        return;
    }
    if m.min(n).min(k) <= SMALL_DIM {
        small_gemm(alpha, a, (rsa, csa), b, (rsb, csb), beta, c, (m, k, n));
        return;
    }
    // SAFETY: the length and shape checks above guarantee every index reached
    // through the given strides lies inside the respective buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this inner or outer size the packing in `matrixmultiply` costs more
/// than it saves (head layers with 3 outputs, bias vectors).
const SMALL_DIM: usize = 4;

/// `c ← beta·c`, where `beta = 0` overwrites (so NaNs in `c` do not leak).
fn scale_output(c: &mut [f64], beta: f64) {
    if beta == 0.0 {
        c.fill(0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
}

/// Plain loops for thin products; `c` is row-major `(m, n)`.
#[allow(clippy::too_many_arguments)]
fn small_gemm(
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (m, k, n): (usize, usize, usize),
) {
    let at = |i: usize, p: usize| a[i * rsa as usize + p * csa as usize];
    scale_output(c, beta);
    if (csa == 1 || m == 1) && (rsb == 1 || n == 1) {
        // rows of op(a) and columns of op(b) are contiguous: dot products
        for i in 0..m {
            let ar = &a[i * rsa as usize..][..k];
            for j in 0..n {
                let bc = &b[j * csb as usize..][..k];
                let d: f64 = ar.iter().zip(bc).map(|(x, y)| x * y).sum();
                c[i * n + j] += alpha * d;
            }
        }
    } else if csb == 1 || n == 1 {
        // rows of op(b) are contiguous: accumulate scaled rows
        for i in 0..m {
            let cr = &mut c[i * n..][..n];
            for p in 0..k {
                let s = alpha * at(i, p);
                let br = &b[p * rsb as usize..][..n];
                cr.iter_mut().zip(br).for_each(|(cv, bv)| *cv += s * bv);
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let d: f64 = (0..k).map(|p| at(i, p) * b[p * rsb as usize + j * csb as usize]).sum();
                c[i * n + j] += alpha * d;
            }
        }
    }
}

pub(crate) fn gemm_nn(a: &Matrix, b: &Matrix, c: &mut Matrix, beta: f64) {
    gemm(1.0, a, false, b, false, beta, c)
}

/// `a * b`
pub(crate) fn mul_nn(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows(), b.cols());
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Matrix {
        let a = if ta { a.transpose() } else { a.clone() };
        let b = if tb { b.transpose() } else { b.clone() };
        Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|p| a[(i, p)] * b[(p, j)]).sum())
    }

    #[test]
    fn thin_products_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rand = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        for (m, k, n) in [(7, 3, 9), (1, 6, 5), (6, 5, 1), (9, 2, 3), (3, 8, 2), (6, 7, 5), (1, 1, 1)] {
            for ta in [false, true] {
                for tb in [false, true] {
                    let a = if ta { rand(k, m) } else { rand(m, k) };
                    let b = if tb { rand(n, k) } else { rand(k, n) };
                    let c0 = rand(m, n);
                    let want = naive(&a, ta, &b, tb).scale(0.5).add(&c0.scale(2.0)).unwrap();
                    let mut c = c0.clone();
                    gemm(0.5, &a, ta, &b, tb, 2.0, &mut c);
                    assert!(c.sub(&want).unwrap().frobenius_norm() < 1e-13, "{m}x{k}x{n} {ta} {tb}");
                    let mut c = Matrix::from_fn(m, n, |_, _| f64::NAN);
                    gemm(1.0, &a, ta, &b, tb, 0.0, &mut c);
                    assert!(c.sub(&naive(&a, ta, &b, tb)).unwrap().frobenius_norm() < 1e-13);
                }
            }
        }
    }
}
