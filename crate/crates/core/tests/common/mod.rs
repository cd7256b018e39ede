//! Shared fixtures for integration tests: constructed matrices `A = U D U⁻¹`
//! with a known spectrum and a brute-force classifier based on matrix powers.
#![allow(dead_code)]

use std::f64::consts::PI;

use koopsim::linalg::{condition_number, inverse, matpow, Matrix};
use koopsim::spectra::ConvergenceClass;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Modulus of the dominant sub-unit block placed in every constructed instance.
pub const SUB_UNIT_MAX: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct Constructed {
    pub a: Matrix,
    pub u: Matrix,
    pub d: Matrix,
    pub cond_u: f64,
    /// Largest sub-unit eigenvalue modulus (0 when there is none).
    pub rho_sub: f64,
    pub intended: ConvergenceClass,
}

#[derive(Debug, Clone, Copy)]
enum Block {
    Real(f64),
    Rot(f64, f64),
}

impl Block {
    fn dim(self) -> usize {
        match self {
            Block::Real(_) => 1,
            Block::Rot(..) => 2,
        }
    }
}

fn sub_unit_block(rng: &mut ChaCha8Rng, modulus: f64, room: usize) -> Block {
    if room >= 2 && rng.gen_bool(0.4) {
        Block::Rot(modulus, rng.gen_range(0.3..PI - 0.3))
    } else if rng.gen_bool(0.5) {
        Block::Real(modulus)
    } else {
        Block::Real(-modulus)
    }
}

fn unit_block(rng: &mut ChaCha8Rng, room: usize, allow_oscillation: bool) -> Block {
    if !allow_oscillation {
        return Block::Real(1.0);
    }
    match rng.gen_range(0..3) {
        0 => Block::Real(1.0),
        1 => Block::Real(-1.0),
        _ if room >= 2 => Block::Rot(1.0, rng.gen_range(0.3..PI - 0.3)),
        _ => Block::Real(-1.0),
    }
}

fn assemble(blocks: &[Block], n: usize) -> Matrix {
    let mut d = Matrix::zeros(n, n);
    let mut at = 0;
    for b in blocks {
        match *b {
            Block::Real(v) => d[(at, at)] = v,
            Block::Rot(r, t) => {
                let (s, c) = t.sin_cos();
                d[(at, at)] = r * c;
                d[(at, at + 1)] = r * s;
                d[(at + 1, at)] = -r * s;
                d[(at + 1, at + 1)] = r * c;
            }
        }
        at += b.dim();
    }
    d
}

/// One constructed instance of order `n` for the requested class
/// (origin, fixed point or invariant set). Every instance carries one sub-unit
/// block of modulus exactly [`SUB_UNIT_MAX`]; the other sub-unit moduli lie in [0.2, 0.8].
pub fn construct(rng: &mut ChaCha8Rng, n: usize, intended: ConvergenceClass, max_cond: f64) -> Constructed {
    let mut blocks: Vec<Block> = Vec::new();
    let mut used = 0;
    let first = sub_unit_block(rng, SUB_UNIT_MAX, n - 1);
    used += first.dim();
    blocks.push(first);
    match intended {
        ConvergenceClass::ConvergesToOrigin => {}
        ConvergenceClass::ConvergesToFixedPoint => {
            blocks.push(Block::Real(1.0));
            used += 1;
        }
        ConvergenceClass::ConvergesToInvariantSet => {
            let b = if n - used >= 2 && rng.gen_bool(0.6) {
                Block::Rot(1.0, rng.gen_range(0.3..PI - 0.3))
            } else {
                Block::Real(-1.0)
            };
            used += b.dim();
            blocks.push(b);
        }
        ConvergenceClass::Unstable => panic!("constructed family has no unstable instances"),
    }
    while used < n {
        let room = n - used;
        let b = if intended != ConvergenceClass::ConvergesToOrigin && rng.gen_bool(0.45) {
            unit_block(rng, room, intended == ConvergenceClass::ConvergesToInvariantSet)
        } else {
            let r = rng.gen_range(0.2..0.8);
            sub_unit_block(rng, r, room)
        };
        used += b.dim();
        blocks.push(b);
    }
    let rho_sub = blocks
        .iter()
        .filter_map(|b| match *b {
            Block::Real(v) if v.abs() < 1.0 => Some(v.abs()),
            Block::Rot(r, _) if r < 1.0 => Some(r),
            _ => None,
        })
        .fold(0.0, f64::max);
    let d = assemble(&blocks, n);
    loop {
        let u = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let cond_u = condition_number(&u);
        if cond_u >= max_cond {
            continue;
        }
        let u_inv = inverse(&u).expect("well-conditioned");
        let a = u.matmul(&d).unwrap().matmul(&u_inv).unwrap();
        return Constructed {
            a,
            u,
            d,
            cond_u,
            rho_sub,
            intended,
        };
    }
}

pub fn family(seed: u64, count: usize, n: usize, max_cond: f64) -> Vec<Constructed> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = [
        ConvergenceClass::ConvergesToOrigin,
        ConvergenceClass::ConvergesToFixedPoint,
        ConvergenceClass::ConvergesToInvariantSet,
    ];
    (0..count).map(|i| construct(&mut rng, n, classes[i % 3], max_cond)).collect()
}

/// Class inferred from `A^256` and `A^257` alone.
pub fn brute_force_class(a: &Matrix) -> (ConvergenceClass, Matrix) {
    let p = matpow(a, 256).unwrap();
    let p1 = p.matmul(a).unwrap();
    let norm = p.frobenius_norm();
    let class = if !norm.is_finite() || norm > 1e6 {
        ConvergenceClass::Unstable
    } else if norm < 1e-6 {
        ConvergenceClass::ConvergesToOrigin
    } else if p1.sub(&p).unwrap().frobenius_norm() <= 1e-6 * norm.max(1.0) {
        ConvergenceClass::ConvergesToFixedPoint
    } else {
        ConvergenceClass::ConvergesToInvariantSet
    };
    (class, p)
}
