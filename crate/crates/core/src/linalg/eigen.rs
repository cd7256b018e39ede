//! Dense nonsymmetric eigensolver.
//!
//! Eigenvalues come from balancing, Householder reduction to upper Hessenberg
//! form and the Francis double-shift QR iteration (EISPACK `hqr`). Eigenvectors
//! are recovered afterwards by complex inverse iteration on the original matrix.

use num_complex::Complex64;

use super::{LinalgError, Matrix};

/// Eigenvalues and right eigenvectors of a real square matrix.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    /// Sorted by descending modulus, then descending real part, then descending
    /// imaginary part (so `+iβ` precedes its conjugate).
    pub eigenvalues: Vec<Complex64>,
    /// Unit 2-norm eigenvectors, gauge-fixed so the first significant
    /// component is real and positive.
    pub eigenvectors: Vec<Vec<Complex64>>,
    /// Whether every pair meets the residual bound `‖Av − λv‖ ≤ 1e-8 ‖A‖_F ‖v‖`.
    pub converged: bool,
}

pub(crate) const RESIDUAL_TOL: f64 = 1e-8;

/// Full eigendecomposition: eigenvalues plus right eigenvectors.
pub fn eig(a: &Matrix) -> Result<EigenDecomposition, LinalgError> {
    let eigenvalues = eigenvalues(a)?;
    let eigenvectors = eigenvectors_for(a, &eigenvalues);
    let norm = a.frobenius_norm();
    let converged = eigenvalues
        .iter()
        .zip(&eigenvectors)
        .all(|(l, v)| residual(a, *l, v) <= RESIDUAL_TOL * norm.max(f64::MIN_POSITIVE));
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
        converged,
    })
}

/// Eigenvalues only, in the canonical order.
pub fn eigenvalues(a: &Matrix) -> Result<Vec<Complex64>, LinalgError> {
    let n = a.ensure_square()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut h = a.clone();
    balance(&mut h);
    hessenberg(&mut h);
    let mut vals = hqr(&h, 100 * n)?;
    sort_eigenvalues(&mut vals);
    Ok(vals)
}

pub(crate) fn sort_eigenvalues(vals: &mut [Complex64]) {
    vals.sort_by(|x, y| {
        y.norm()
            .total_cmp(&x.norm())
            .then_with(|| y.re.total_cmp(&x.re))
            .then_with(|| y.im.total_cmp(&x.im))
    });
}

/// `‖A v − λ v‖₂ / ‖v‖₂`
pub fn residual(a: &Matrix, lambda: Complex64, v: &[Complex64]) -> f64 {
    let n = a.rows();
    let mut r = 0.0;
    for i in 0..n {
        let mut s = -lambda * v[i];
        for (j, vj) in v.iter().enumerate() {
            s += *vj * a[(i, j)];
        }
        r += s.norm_sqr();
    }
    let vn: f64 = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    r.sqrt() / vn.max(f64::MIN_POSITIVE)
}

/// Parlett–Reinsch balancing with radix 2 (diagonal similarity, exact in binary).
fn balance(a: &mut Matrix) {
    const RADIX: f64 = 2.0;
    let sqrdx = RADIX * RADIX;
    let n = a.rows();
    loop {
        let mut done = true;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c != 0.0 && r != 0.0 {
                let mut g = r / RADIX;
                let mut f = 1.0;
                let s = c + r;
                while c < g {
                    f *= RADIX;
                    c *= sqrdx;
                }
                g = r * RADIX;
                while c > g {
                    f /= RADIX;
                    c /= sqrdx;
                }
                if (c + r) / f < 0.95 * s {
                    done = false;
                    let g = 1.0 / f;
                    for j in 0..n {
                        a[(i, j)] *= g;
                    }
                    for j in 0..n {
                        a[(j, i)] *= f;
                    }
                }
            }
        }
        if done {
            break;
        }
    }
}

/// Householder reduction to upper Hessenberg form (EISPACK `orthes`).
fn hessenberg(h: &mut Matrix) {
    let n = h.rows();
    if n < 3 {
        return;
    }
    let mut ort = vec![0.0; n];
    let high = n - 1;
    for m in 1..high {
        let scale: f64 = (m..=high).map(|i| h[(i, m - 1)].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[(i, m - 1)] / scale;
            hh += ort[i] * ort[i];
        }
        let g = if ort[m] > 0.0 { -hh.sqrt() } else { hh.sqrt() };
        hh -= ort[m] * g;
        ort[m] -= g;
        for j in m..n {
            let mut f = 0.0;
            for i in (m..=high).rev() {
                f += ort[i] * h[(i, j)];
            }
            f /= hh;
            for i in m..=high {
                h[(i, j)] -= f * ort[i];
            }
        }
        for i in 0..=high {
            let mut f = 0.0;
            for j in (m..=high).rev() {
                f += ort[j] * h[(i, j)];
            }
            f /= hh;
            for j in m..=high {
                h[(i, j)] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[(m, m - 1)] = scale * g;
        for i in (m + 1)..n {
            h[(i, m - 1)] = 0.0;
        }
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix (EISPACK `hqr`).
///
/// Indices are 1-based internally to stay close to the reference algorithm.
fn hqr(hess: &Matrix, max_sweeps: usize) -> Result<Vec<Complex64>, LinalgError> {
    let n = hess.rows();
    let w = n + 1;
    let mut a = vec![0.0; w * w];
    for i in 0..n {
        for j in 0..n {
            a[(i + 1) * w + (j + 1)] = hess[(i, j)];
        }
    }
    let ix = |i: usize, j: usize| i * w + j;
    let mut wr = vec![0.0; w];
    let mut wi = vec![0.0; w];

    let mut anorm = 0.0;
    for i in 1..=n {
        for j in (i.saturating_sub(1)).max(1)..=n {
            anorm += a[ix(i, j)].abs();
        }
    }
    let mut nn = n as isize;
    let mut t = 0.0;
    let mut sweeps = 0usize;
    while nn >= 1 {
        let mut its = 0usize;
        loop {
            let nnu = nn as usize;
            // Look for a single small subdiagonal element.
            let mut l = nnu;
            while l >= 2 {
                let mut s = a[ix(l - 1, l - 1)].abs() + a[ix(l, l)].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[ix(l, l - 1)].abs() + s == s {
                    a[ix(l, l - 1)] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[ix(nnu, nnu)];
            if l == nnu {
                wr[nnu] = x + t;
                wi[nnu] = 0.0;
                nn -= 1;
            } else {
                let mut y = a[ix(nnu - 1, nnu - 1)];
                let mut wv = a[ix(nnu, nnu - 1)] * a[ix(nnu - 1, nnu)];
                if l == nnu - 1 {
                    let p = 0.5 * (y - x);
                    let q = p * p + wv;
                    let mut z = q.abs().sqrt();
                    x += t;
                    if q >= 0.0 {
                        z = p + z.copysign(p);
                        wr[nnu - 1] = x + z;
                        wr[nnu] = x + z;
                        if z != 0.0 {
                            wr[nnu] = x - wv / z;
                        }
                        wi[nnu - 1] = 0.0;
                        wi[nnu] = 0.0;
                    } else {
                        wr[nnu - 1] = x + p;
                        wr[nnu] = x + p;
                        wi[nnu - 1] = -z;
                        wi[nnu] = z;
                    }
                    nn -= 2;
                } else {
                    sweeps += 1;
                    if sweeps > max_sweeps {
                        return Err(LinalgError::NoConvergence { sweeps: max_sweeps });
                    }
                    if its > 0 && its % 10 == 0 {
                        // Exceptional shift.
                        t += x;
                        for i in 1..=nnu {
                            a[ix(i, i)] -= x;
                        }
                        let s = a[ix(nnu, nnu - 1)].abs() + a[ix(nnu - 1, nnu - 2)].abs();
                        x = 0.75 * s;
                        y = x;
                        wv = -0.4375 * s * s;
                    }
                    its += 1;
                    // Look for two consecutive small subdiagonal elements.
                    let mut m = nnu - 2;
                    let (mut p, mut q, mut r);
                    loop {
                        let z = a[ix(m, m)];
                        r = x - z;
                        let s0 = y - z;
                        p = (r * s0 - wv) / a[ix(m + 1, m)] + a[ix(m, m + 1)];
                        q = a[ix(m + 1, m + 1)] - z - r - s0;
                        r = a[ix(m + 2, m + 1)];
                        let s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if m == l {
                            break;
                        }
                        let u = a[ix(m, m - 1)].abs() * (q.abs() + r.abs());
                        let v = p.abs() * (a[ix(m - 1, m - 1)].abs() + z.abs() + a[ix(m + 1, m + 1)].abs());
                        if u + v == v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in (m + 2)..=nnu {
                        a[ix(i, i - 2)] = 0.0;
                        if i != m + 2 {
                            a[ix(i, i - 3)] = 0.0;
                        }
                    }
                    // Double QR step on rows l..nn and columns m..nn.
                    let mut k = m;
                    while k < nnu {
                        if k != m {
                            p = a[ix(k, k - 1)];
                            q = a[ix(k + 1, k - 1)];
                            r = 0.0;
                            if k != nnu - 1 {
                                r = a[ix(k + 2, k - 1)];
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != 0.0 {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        let s = (p * p + q * q + r * r).sqrt().copysign(p);
                        if s != 0.0 {
                            if k == m {
                                if l != m {
                                    a[ix(k, k - 1)] = -a[ix(k, k - 1)];
                                }
                            } else {
                                a[ix(k, k - 1)] = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            let z = r / s;
                            q /= p;
                            r /= p;
                            for j in k..=nnu {
                                let mut pp = a[ix(k, j)] + q * a[ix(k + 1, j)];
                                if k != nnu - 1 {
                                    pp += r * a[ix(k + 2, j)];
                                    a[ix(k + 2, j)] -= pp * z;
                                }
                                a[ix(k + 1, j)] -= pp * y;
                                a[ix(k, j)] -= pp * x;
                            }
                            let mmin = nnu.min(k + 3);
                            for i in l..=mmin {
                                let mut pp = x * a[ix(i, k)] + y * a[ix(i, k + 1)];
                                if k != nnu - 1 {
                                    pp += z * a[ix(i, k + 2)];
                                    a[ix(i, k + 2)] -= pp * r;
                                }
                                a[ix(i, k + 1)] -= pp * q;
                                a[ix(i, k)] -= pp;
                            }
                        }
                        k += 1;
                    }
                }
            }
            if nn < 1 || l as isize >= nn - 1 {
                break;
            }
        }
    }
    Ok((1..=n).map(|i| Complex64::new(wr[i], wi[i])).collect())
}

/// Complex LU of `A − σI` with partial pivoting; tiny pivots are replaced so
/// the factorization never fails (inverse iteration wants the near-singular solve).
struct ShiftedLu {
    n: usize,
    lu: Vec<Complex64>,
    perm: Vec<usize>,
}

impl ShiftedLu {
    fn new(a: &Matrix, sigma: Complex64) -> Self {
        let n = a.rows();
        let mut lu: Vec<Complex64> = a.as_slice().iter().map(|v| Complex64::new(*v, 0.0)).collect();
        for i in 0..n {
            lu[i * n + i] -= sigma;
        }
        let floor = f64::EPSILON * a.frobenius_norm().max(sigma.norm()).max(f64::MIN_POSITIVE);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            for i in (k + 1)..n {
                if lu[i * n + k].norm() > lu[p * n + k].norm() {
                    p = i;
                }
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            if lu[k * n + k].norm() < floor {
                lu[k * n + k] = Complex64::new(floor, 0.0);
            }
            let pivot = lu[k * n + k];
            for i in (k + 1)..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != Complex64::new(0.0, 0.0) {
                    for j in (k + 1)..n {
                        let t = lu[k * n + j];
                        lu[i * n + j] -= f * t;
                    }
                }
            }
        }
        ShiftedLu { n, lu, perm }
    }

    fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let mut y: Vec<Complex64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * y[j];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in (i + 1)..n {
                s -= self.lu[i * n + j] * y[j];
            }
            y[i] = s / self.lu[i * n + i];
        }
        y
    }
}

fn norm2(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

fn normalize(v: &mut [Complex64]) {
    let nrm = norm2(v);
    if nrm > 0.0 && nrm.is_finite() {
        for c in v.iter_mut() {
            *c /= nrm;
        }
    }
}

/// Removes the components along the (orthonormal) vectors in `basis`.
fn orthogonalize(v: &mut [Complex64], basis: &[Vec<Complex64>]) {
    for _ in 0..2 {
        for b in basis {
            let dot: Complex64 = b.iter().zip(v.iter()).map(|(x, y)| x.conj() * y).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
    }
}

/// Rotates the phase so the first significant component is real positive.
pub(crate) fn fix_gauge(v: &mut [Complex64]) {
    let max = v.iter().fold(0.0f64, |m, c| m.max(c.norm()));
    if max == 0.0 {
        return;
    }
    if let Some(first) = v.iter().find(|c| c.norm() > 1e-8 * max).copied() {
        let phase = first.conj() / first.norm();
        for c in v.iter_mut() {
            *c *= phase;
        }
    }
}

/// Deterministic, generic start vector for the `k`-th member of a cluster.
fn start_vector(n: usize, k: usize) -> Vec<Complex64> {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15 ^ ((k as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            Complex64::new(0.5 + u, 0.0)
        })
        .collect()
}

fn inverse_iterate(lu: &ShiftedLu, mut v: Vec<Complex64>, deflate: &[Vec<Complex64>], steps: usize) -> Vec<Complex64> {
    orthogonalize(&mut v, deflate);
    normalize(&mut v);
    for _ in 0..steps {
        let mut w = lu.solve(&v);
        if w.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            break;
        }
        orthogonalize(&mut w, deflate);
        normalize(&mut w);
        v = w;
    }
    v
}

/// Eigenvectors of `a` for the given eigenvalues by inverse iteration.
///
/// Eigenvalues closer than `1e-6 · max(1, ‖A‖_F)` are treated as one cluster;
/// later members are deflated against earlier ones so a semisimple repeated
/// eigenvalue yields a full eigenbasis. If deflation breaks the residual bound
/// (defective eigenvalue) the plain inverse-iteration vector is used instead.
pub(crate) fn eigenvectors_for(a: &Matrix, eigenvalues: &[Complex64]) -> Vec<Vec<Complex64>> {
    let n = a.rows();
    let norm = a.frobenius_norm();
    let cluster_tol = 1e-6 * norm.max(1.0);
    let bound = RESIDUAL_TOL * norm.max(f64::MIN_POSITIVE);
    let mut out: Vec<Vec<Complex64>> = Vec::with_capacity(eigenvalues.len());
    for (idx, &lambda) in eigenvalues.iter().enumerate() {
        let cluster: Vec<Vec<Complex64>> = eigenvalues[..idx]
            .iter()
            .zip(&out)
            .filter(|(mu, _)| (**mu - lambda).norm() <= cluster_tol)
            .map(|(_, v)| v.clone())
            .collect();
        let lu = ShiftedLu::new(a, lambda);
        let k = cluster.len();
        let mut basis = orthonormal_copy(&cluster);
        let mut v = inverse_iterate(&lu, start_vector(n, k), &basis, 3);
        if k > 0 && residual(a, lambda, &v) > bound {
            basis.clear();
            v = inverse_iterate(&lu, v, &basis, 3);
        }
        if lambda.im == 0.0 {
            for c in v.iter_mut() {
                c.im = 0.0;
            }
            normalize(&mut v);
        }
        fix_gauge(&mut v);
        out.push(v);
    }
    out
}

fn orthonormal_copy(vs: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
    let mut basis: Vec<Vec<Complex64>> = Vec::new();
    for v in vs {
        let mut w = v.clone();
        orthogonalize(&mut w, &basis);
        if norm2(&w) > 1e-8 {
            normalize(&mut w);
            basis.push(w);
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: Complex64, re: f64, im: f64) -> bool {
        (a.re - re).abs() < 1e-12 && (a.im - im).abs() < 1e-12
    }

    #[test]
    fn diagonal() {
        let e = eig(&Matrix::from_diag(&[1.0, 2.0])).unwrap();
        assert!(approx(e.eigenvalues[0], 2.0, 0.0));
        assert!(approx(e.eigenvalues[1], 1.0, 0.0));
        assert!(e.converged);
    }

    #[test]
    fn rotation() {
        let a = Matrix::from_rows(&[[0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let e = eig(&a).unwrap();
        assert!(approx(e.eigenvalues[0], 0.0, 1.0));
        assert!(approx(e.eigenvalues[1], 0.0, -1.0));
        assert!(e.converged);
        // Gauge: first component real positive.
        assert!(e.eigenvectors[0][0].im.abs() < 1e-15 && e.eigenvectors[0][0].re > 0.0);
    }

    #[test]
    fn upper_triangular_hand_roots() {
        let a = Matrix::from_rows(&[[0.5, 1.0], [0.0, 1.0]]).unwrap();
        let e = eig(&a).unwrap();
        assert!(approx(e.eigenvalues[0], 1.0, 0.0));
        assert!(approx(e.eigenvalues[1], 0.5, 0.0));
    }

    #[test]
    fn repeated_semisimple_eigenvalue_gets_independent_vectors() {
        let e = eig(&Matrix::identity(3)).unwrap();
        let cols: Vec<f64> = e.eigenvectors.iter().flatten().map(|c| c.re).collect();
        let v = Matrix::new(3, 3, cols).unwrap();
        assert_eq!(super::super::numeric_rank(&v, 1e-8), 3);
    }

    #[test]
    fn jordan_block_still_has_small_residual() {
        let a = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        let e = eig(&a).unwrap();
        assert!(e.converged);
    }

    #[test]
    fn companion_matrix_roots() {
        // x^3 - 6x^2 + 11x - 6 = (x-1)(x-2)(x-3)
        let a = Matrix::from_rows(&[[6.0, -11.0, 6.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let e = eig(&a).unwrap();
        for (got, want) in e.eigenvalues.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got.re - want).abs() < 1e-10 && got.im.abs() < 1e-10, "{got}");
        }
        assert!(e.converged);
    }

    #[test]
    fn nonsquare_is_rejected() {
        assert!(matches!(eig(&Matrix::zeros(2, 3)), Err(LinalgError::NonSquare { .. })));
    }

    #[test]
    fn empty_matrix() {
        let e = eig(&Matrix::zeros(0, 0)).unwrap();
        assert!(e.eigenvalues.is_empty());
    }
}
