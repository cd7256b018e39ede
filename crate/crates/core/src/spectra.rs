//! Limiting behavior of lifted linear dynamics `φ^{l+1} = A φ^l`.
//!
//! The unit-circle part of the spectrum decides everything: eigenvalues equal
//! to 1 give a fixed point, −1 and conjugate pairs `e^{±iΔ}` give bounded
//! oscillation, and any defective unit-modulus eigenvalue (a Jordan block of
//! size > 1) or modulus above one makes the iterates diverge.
//!
//! The limit operators are assembled from the real eigenbasis of the
//! unit-modulus modes only. The matching rows of `U⁻¹` are obtained from the
//! left eigenvectors (`V = (WᵀU)⁻¹ Wᵀ`), which equals those rows of the full
//! inverse but does not require the sub-unit part of `U` to be invertible.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::linalg::{self, eigenvectors_for, numeric_rank, solve_linear, LinalgError, Matrix};

pub const DEFAULT_EIG_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvergenceClass {
    ConvergesToOrigin,
    ConvergesToFixedPoint,
    ConvergesToInvariantSet,
    Unstable,
}

/// A conjugate pair on the unit circle. `j` holds the member with positive
/// imaginary part, `k` its conjugate; `delta = atan2(β_j, α_j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationPair {
    pub j: usize,
    pub k: usize,
    pub delta: f64,
}

/// Classification result. Index sets are 0-based positions into `eigenvalues`;
/// the JSON form reports them 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub class: ConvergenceClass,
    pub eigenvalues: Vec<Complex64>,
    pub spectral_radius: f64,
    pub j1: Vec<usize>,
    pub j2: Vec<usize>,
    pub j3: Vec<RotationPair>,
    pub projector: Option<Matrix>,
    pub defect_detected: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectraError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("operation not applicable to a matrix classified as {0:?}")]
    NotApplicable(ConvergenceClass),
    #[error("unit-modulus eigenbasis is singular; the spectrum was likely misclassified")]
    Singular,
    #[error("vector of length {got} does not match matrix order {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("eig_tol must lie in (0, 0.1), got {0}")]
    BadTolerance(f64),
}

pub fn spectral_radius(a: &Matrix) -> Result<f64, SpectraError> {
    Ok(linalg::eigenvalues(a)?.iter().fold(0.0, |m, l| m.max(l.norm())))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Fixed(usize),
    Flip(usize),
    Rotation(usize, usize, f64),
}

/// Real basis of the unit-modulus invariant subspace and the matching rows of `U⁻¹`.
#[derive(Debug, Clone)]
pub struct UnitModes {
    modes: Vec<Mode>,
    /// N × m, columns are `u` vectors.
    right: Matrix,
    /// m × N, rows are `vᵀ` vectors.
    left: Matrix,
}

impl UnitModes {
    /// The bracketed limit operator at step `l`:
    /// `Σ_{J1} u vᵀ + (−1)^l Σ_{J2} u vᵀ + Σ_{J3} [(cos lΔ u_j − sin lΔ u_k) v_jᵀ + (sin lΔ u_j + cos lΔ u_k) v_kᵀ]`.
    pub fn operator_at(&self, l: u64) -> Matrix {
        self.assemble(l, true)
    }

    /// `Σ_{J1} u_j v_jᵀ`
    pub fn fixed_part(&self) -> Matrix {
        self.assemble(0, false)
    }

    fn assemble(&self, l: u64, oscillating: bool) -> Matrix {
        let n = self.right.rows();
        let mut out = Matrix::zeros(n, n);
        let mut add_outer = |coef_u: &[(usize, f64)], v_row: usize| {
            for r in 0..n {
                let u: f64 = coef_u.iter().map(|&(c, w)| w * self.right[(r, c)]).sum();
                if u == 0.0 {
                    continue;
                }
                let vrow = self.left.row(v_row);
                let orow = out.row_mut(r);
                for (o, v) in orow.iter_mut().zip(vrow) {
                    *o += u * v;
                }
            }
        };
        let mut col = 0;
        for mode in &self.modes {
            match *mode {
                Mode::Fixed(_) => {
                    add_outer(&[(col, 1.0)], col);
                    col += 1;
                }
                Mode::Flip(_) => {
                    if oscillating {
                        let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
                        add_outer(&[(col, sign)], col);
                    }
                    col += 1;
                }
                Mode::Rotation(_, _, delta) => {
                    if oscillating {
                        let angle = l as f64 * delta;
                        let (s, c) = angle.sin_cos();
                        add_outer(&[(col, c), (col + 1, -s)], col);
                        add_outer(&[(col, s), (col + 1, c)], col + 1);
                    }
                    col += 2;
                }
            }
        }
        out
    }
}

struct Partition {
    eigenvalues: Vec<Complex64>,
    spectral_radius: f64,
    unit: Vec<usize>,
    j1: Vec<usize>,
    j2: Vec<usize>,
    j3: Vec<RotationPair>,
}

fn partition(a: &Matrix, eig_tol: f64) -> Result<Partition, SpectraError> {
    let eigenvalues = linalg::eigenvalues(a)?;
    let spectral_radius = eigenvalues.iter().fold(0.0, |m: f64, l| m.max(l.norm()));
    let unit: Vec<usize> = (0..eigenvalues.len())
        .filter(|&i| (eigenvalues[i].norm() - 1.0).abs() <= eig_tol)
        .collect();
    let one = Complex64::new(1.0, 0.0);
    let mut j1 = Vec::new();
    let mut j2 = Vec::new();
    let mut j3 = Vec::new();
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for &i in &unit {
        let l = eigenvalues[i];
        if (l - one).norm() <= eig_tol {
            j1.push(i);
        } else if (l + one).norm() <= eig_tol {
            j2.push(i);
        } else if l.im > eig_tol {
            positive.push(i);
        } else if l.im < -eig_tol {
            negative.push(i);
        } else if l.re > 0.0 {
            j1.push(i);
        } else {
            j2.push(i);
        }
    }
    // Pair each +β member with the closest unpaired conjugate.
    for &j in &positive {
        let target = eigenvalues[j].conj();
        let best = negative
            .iter()
            .enumerate()
            .min_by(|(_, &x), (_, &y)| {
                (eigenvalues[x] - target)
                    .norm()
                    .total_cmp(&(eigenvalues[y] - target).norm())
            })
            .map(|(pos, &k)| (pos, k));
        if let Some((pos, k)) = best {
            negative.remove(pos);
            let l = eigenvalues[j];
            j3.push(RotationPair {
                j,
                k,
                delta: l.im.atan2(l.re),
            });
        }
    }
    Ok(Partition {
        eigenvalues,
        spectral_radius,
        unit,
        j1,
        j2,
        j3,
    })
}

/// Geometric multiplicity of `lambda`: `N − rank(A − λI)`. Complex shifts use
/// the real 2N×2N embedding, whose rank is twice the complex rank.
fn geometric_multiplicity(a: &Matrix, lambda: Complex64, rank_tol: f64) -> usize {
    let n = a.rows();
    if lambda.im == 0.0 {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] -= lambda.re;
        }
        n - numeric_rank(&shifted, rank_tol)
    } else {
        let embed = Matrix::from_fn(2 * n, 2 * n, |r, c| {
            let (br, bc) = (r / n, c / n);
            let (i, j) = (r % n, c % n);
            let diag = if i == j { 1.0 } else { 0.0 };
            match (br, bc) {
                (0, 0) | (1, 1) => a[(i, j)] - lambda.re * diag,
                (0, 1) => lambda.im * diag,
                _ => -lambda.im * diag,
            }
        });
        n - numeric_rank(&embed, rank_tol) / 2
    }
}

/// True when some unit-modulus eigenvalue has fewer independent eigenvectors
/// than its algebraic multiplicity.
fn has_defect(a: &Matrix, part: &Partition, eig_tol: f64) -> bool {
    let rank_tol = eig_tol.sqrt();
    let mut seen = vec![false; part.unit.len()];
    for start in 0..part.unit.len() {
        if seen[start] {
            continue;
        }
        // Transitive cluster of unit eigenvalues within 2·eig_tol of each other.
        let mut members = vec![start];
        seen[start] = true;
        let mut cursor = 0;
        while cursor < members.len() {
            let li = part.eigenvalues[part.unit[members[cursor]]];
            for other in 0..part.unit.len() {
                if !seen[other] && (part.eigenvalues[part.unit[other]] - li).norm() <= 2.0 * eig_tol {
                    seen[other] = true;
                    members.push(other);
                }
            }
            cursor += 1;
        }
        let sum: Complex64 = members.iter().map(|&m| part.eigenvalues[part.unit[m]]).sum();
        let mut center = sum / members.len() as f64;
        if center.im.abs() <= eig_tol {
            center.im = 0.0;
        }
        if geometric_multiplicity(a, center, rank_tol) < members.len() {
            return true;
        }
    }
    false
}

fn unit_modes(a: &Matrix, part: &Partition) -> Result<UnitModes, SpectraError> {
    let n = a.rows();
    let mut modes: Vec<Mode> = part.j1.iter().map(|&j| Mode::Fixed(j)).collect();
    modes.extend(part.j2.iter().map(|&j| Mode::Flip(j)));
    modes.extend(part.j3.iter().map(|p| Mode::Rotation(p.j, p.k, p.delta)));

    let shifts: Vec<Complex64> = modes
        .iter()
        .map(|m| match *m {
            Mode::Fixed(j) | Mode::Flip(j) | Mode::Rotation(j, _, _) => part.eigenvalues[j],
        })
        .map(|l| if l.im.abs() == 0.0 { Complex64::new(l.re, 0.0) } else { l })
        .collect();
    let right_vecs = eigenvectors_for(a, &shifts);
    let left_vecs = eigenvectors_for(&a.transpose(), &shifts);

    let width: usize = modes.iter().map(|m| if matches!(m, Mode::Rotation(..)) { 2 } else { 1 }).sum();
    let mut right = Matrix::zeros(n, width);
    let mut left_basis = Matrix::zeros(n, width);
    let mut col = 0;
    for (idx, mode) in modes.iter().enumerate() {
        let (rv, lv) = (&right_vecs[idx], &left_vecs[idx]);
        match mode {
            Mode::Fixed(_) | Mode::Flip(_) => {
                for r in 0..n {
                    right[(r, col)] = rv[r].re;
                    left_basis[(r, col)] = lv[r].re;
                }
                col += 1;
            }
            Mode::Rotation(..) => {
                for r in 0..n {
                    right[(r, col)] = rv[r].re;
                    right[(r, col + 1)] = rv[r].im;
                    left_basis[(r, col)] = lv[r].re;
                    left_basis[(r, col + 1)] = lv[r].im;
                }
                col += 2;
            }
        }
    }
    if width > 0 && numeric_rank(&right, 1e-6) < width {
        return Err(SpectraError::Singular);
    }
    // V = (WᵀU)⁻¹ Wᵀ
    let wt = left_basis.transpose();
    let gram = wt.matmul(&right)?;
    let left = match solve_linear(&gram, &wt) {
        Ok(v) => v,
        Err(LinalgError::Singular { .. }) => return Err(SpectraError::Singular),
        Err(e) => return Err(e.into()),
    };
    Ok(UnitModes { modes, right, left })
}

fn check_tol(eig_tol: f64) -> Result<(), SpectraError> {
    if eig_tol > 0.0 && eig_tol < 0.1 {
        Ok(())
    } else {
        Err(SpectraError::BadTolerance(eig_tol))
    }
}

/// Classifies the limit of `A^l φ⁰` into one of the four convergence classes.
pub fn classify(a: &Matrix, eig_tol: f64) -> Result<SpectrumReport, SpectraError> {
    check_tol(eig_tol)?;
    let n = a.ensure_square()?;
    let part = partition(a, eig_tol)?;
    let rho = part.spectral_radius;
    let (class, defect) = if rho < 1.0 - eig_tol {
        (ConvergenceClass::ConvergesToOrigin, false)
    } else if rho > 1.0 + eig_tol {
        (ConvergenceClass::Unstable, false)
    } else if has_defect(a, &part, eig_tol) {
        (ConvergenceClass::Unstable, true)
    } else if part.j2.is_empty() && part.j3.is_empty() {
        (ConvergenceClass::ConvergesToFixedPoint, false)
    } else {
        (ConvergenceClass::ConvergesToInvariantSet, false)
    };
    let projector = match class {
        ConvergenceClass::ConvergesToOrigin => Some(Matrix::zeros(n, n)),
        ConvergenceClass::ConvergesToFixedPoint => Some(unit_modes(a, &part)?.fixed_part()),
        _ => None,
    };
    Ok(SpectrumReport {
        class,
        eigenvalues: part.eigenvalues,
        spectral_radius: rho,
        j1: part.j1,
        j2: part.j2,
        j3: part.j3,
        projector,
        defect_detected: defect,
    })
}

/// Unit-mode decomposition for a matrix whose iterates stay bounded.
pub fn unit_mode_decomposition(a: &Matrix, eig_tol: f64) -> Result<(ConvergenceClass, UnitModes), SpectraError> {
    check_tol(eig_tol)?;
    let report = classify(a, eig_tol)?;
    if report.class == ConvergenceClass::Unstable {
        return Err(SpectraError::NotApplicable(report.class));
    }
    let part = partition(a, eig_tol)?;
    if report.class == ConvergenceClass::ConvergesToOrigin {
        let n = a.rows();
        return Ok((
            report.class,
            UnitModes {
                modes: Vec::new(),
                right: Matrix::zeros(n, 0),
                left: Matrix::zeros(0, n),
            },
        ));
    }
    Ok((report.class, unit_modes(a, &part)?))
}

/// `P = Σ_{j∈J1} u_j v_jᵀ`, the limit of `A^l` when the iterates converge.
pub fn fixed_point_projector(a: &Matrix, eig_tol: f64) -> Result<Matrix, SpectraError> {
    let report = classify(a, eig_tol)?;
    match (report.class, report.projector) {
        (ConvergenceClass::ConvergesToOrigin | ConvergenceClass::ConvergesToFixedPoint, Some(p)) => Ok(p),
        (class, _) => Err(SpectraError::NotApplicable(class)),
    }
}

/// The bounded part `M(l)` of `A^l` that survives as `l → ∞`.
pub fn oscillation_term(a: &Matrix, l: u64, eig_tol: f64) -> Result<Matrix, SpectraError> {
    let (_, modes) = unit_mode_decomposition(a, eig_tol)?;
    Ok(modes.operator_at(l))
}

/// `[φ⁰, Aφ⁰, …, A^Lφ⁰]` by repeated multiplication.
pub fn simulate_lifted(a: &Matrix, phi0: &[f64], steps: usize) -> Result<Vec<Vec<f64>>, SpectraError> {
    let n = a.ensure_square()?;
    if phi0.len() != n {
        return Err(SpectraError::DimensionMismatch {
            expected: n,
            got: phi0.len(),
        });
    }
    let mut out = Vec::with_capacity(steps + 1);
    out.push(phi0.to_vec());
    for _ in 0..steps {
        let next = a.matvec(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

impl SpectrumReport {
    /// JSON object with keys `class`, `eigenvalues`, `spectral_radius`, `J1`,
    /// `J2`, `J3`, `projector`, `defect_detected`. Indices are 1-based.
    pub fn to_json(&self) -> Value {
        json!({
            "class": self.class,
            "eigenvalues": self.eigenvalues.iter().map(|l| [l.re, l.im]).collect::<Vec<_>>(),
            "spectral_radius": self.spectral_radius,
            "J1": self.j1.iter().map(|j| j + 1).collect::<Vec<_>>(),
            "J2": self.j2.iter().map(|j| j + 1).collect::<Vec<_>>(),
            "J3": self.j3.iter().map(|p| json!([p.j + 1, p.k + 1, p.delta])).collect::<Vec<_>>(),
            "projector": self.projector.as_ref().map(|p| p.to_rows()),
            "defect_detected": self.defect_detected,
        })
    }
}
