use std::fmt::Write as _;

use serde::Serialize;

use super::{GramMatrix, GramState};
use crate::error::{Error, Result};
use crate::scalar::{MatRef, Scalar};

const SYMMETRY_TOL: f64 = 1e-9;
const MAX_SWEEPS: usize = 100;

/// Eigenvalues in descending order; `vectors` is row-major `n x n` with
/// eigenvector `k` in column `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenDecomposition<T> {
    pub values: Vec<T>,
    pub vectors: Vec<T>,
    pub n: usize,
}

impl<T: Scalar> EigenDecomposition<T> {
    pub fn vector(&self, k: usize) -> Vec<T> {
        (0..self.n).map(|r| self.vectors[r * self.n + k]).collect()
    }

    /// `P f(D) P^T` as a row-major buffer.
    pub fn reconstruct_with(&self, f: impl Fn(T) -> T) -> Vec<T> {
        let n = self.n;
        let mut scaled = self.vectors.clone();
        for r in 0..n {
            for k in 0..n {
                scaled[r * n + k] *= f(self.values[k]);
            }
        }
        let mut out = vec![T::zero(); n * n];
        T::gemm(
            T::one(),
            MatRef::row_major(&scaled, n, n),
            MatRef::transposed(&self.vectors, n, n),
            T::zero(),
            &mut out,
        );
        out
    }

    pub fn reconstruct(&self) -> Vec<T> {
        self.reconstruct_with(|v| v)
    }
}

fn frobenius<T: Scalar>(a: &[T]) -> T {
    a.iter().map(|&v| v * v).sum::<T>().sqrt()
}

fn off_diagonal<T: Scalar>(a: &[T], n: usize) -> T {
    let mut s = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Symmetric eigendecomposition of a row-major `n x n` matrix by cyclic Jacobi
/// rotations, iterated until the off-diagonal Frobenius norm falls below
/// `1e-12 * ||A||_F`.
pub fn eigh_values<T: Scalar>(a: &[T], n: usize) -> Result<EigenDecomposition<T>> {
    jacobi(a, n, true)
}

fn jacobi<T: Scalar>(a: &[T], n: usize, with_vectors: bool) -> Result<EigenDecomposition<T>> {
    if a.len() != n * n {
        return Err(Error::shape("eigh", &[a.len()], &[n, n]));
    }
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((a[i * n + j] - a[j * n + i]).abs().as_f64());
        }
    }
    if worst > SYMMETRY_TOL {
        return Err(Error::Asymmetric { max_asymmetry: worst });
    }
    let mut m = a.to_vec();
    // eigenvectors accumulate as rows of vt
    let mut vt = vec![T::zero(); if with_vectors { n * n } else { 0 }];
    for i in 0..n.min(vt.len()) {
        vt[i * n + i] = T::one();
    }
    let norm = frobenius(a);
    let target = T::lit(1e-12) * norm;
    let mut sweeps = 0;
    let rounds = round_robin(n);
    let mut rots: Vec<(usize, usize, T, T)> = Vec::with_capacity(n / 2);
    while off_diagonal(&m, n) > target {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NonConvergence { what: "jacobi eigensolver", iterations: sweeps });
        }
        sweeps += 1;
        for round in &rounds {
            rots.clear();
            for &(p, q) in round {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                rots.push((p, q, c, t * c));
            }
            if rots.is_empty() {
                continue;
            }
            // disjoint pairs: rotate all rows, then all columns one row at a time
            let diag: Vec<(T, T, T)> = rots.iter().map(|&(p, q, c, s)| (m[p * n + p], m[q * n + q], m[p * n + q] * s / c)).collect();
            for &(p, q, c, s) in &rots {
                rotate_rows(&mut m, n, p, q, c, s);
                if with_vectors {
                    rotate_rows(&mut vt, n, p, q, c, s);
                }
            }
            for row in m.chunks_exact_mut(n) {
                for &(p, q, c, s) in &rots {
                    let (a, b) = (row[p], row[q]);
                    row[p] = c * a - s * b;
                    row[q] = s * a + c * b;
                }
            }
            for (&(p, q, _, _), &(app, aqq, tapq)) in rots.iter().zip(&diag) {
                m[p * n + p] = app - tapq;
                m[q * n + q] = aqq + tapq;
                m[p * n + q] = T::zero();
                m[q * n + p] = T::zero();
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&k| m[k * n + k]).collect();
    let mut vectors = vec![T::zero(); vt.len()];
    for (col, &k) in order.iter().enumerate().filter(|_| with_vectors) {
        for r in 0..n {
            vectors[r * n + col] = vt[k * n + r];
        }
    }
    Ok(EigenDecomposition { values, vectors, n })
}

/// Circle-method schedule: every pair `p < q` exactly once, grouped into
/// rounds of disjoint pairs.
fn round_robin(n: usize) -> Vec<Vec<(usize, usize)>> {
    let slots = n + n % 2;
    let mut ring: Vec<usize> = (0..slots).collect();
    let mut rounds = Vec::with_capacity(slots.saturating_sub(1));
    for _ in 1..slots {
        let round = (0..slots / 2)
            .map(|k| (ring[k], ring[slots - 1 - k]))
            .filter(|&(a, b)| a < n && b < n)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        rounds.push(round);
        ring[1..].rotate_right(1);
    }
    rounds
}

/// Rows `p` and `q` become `c*p - s*q` and `s*p + c*q`.
fn rotate_rows<T: Scalar>(m: &mut [T], n: usize, p: usize, q: usize, c: T, s: T) {
    let (head, tail) = m.split_at_mut(q * n);
    let rp = &mut head[p * n..(p + 1) * n];
    let rq = &mut tail[..n];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Eigendecomposition of a square gram (checked symmetric within 1e-9).
pub fn eigh<T: Scalar>(g: &GramMatrix<T>) -> Result<EigenDecomposition<T>> {
    if g.rows() != g.cols() {
        return Err(Error::Data(format!("eigh needs a square matrix, got {}x{}", g.rows(), g.cols())));
    }
    eigh_values(g.values(), g.rows())
}

/// `P max(0, D) P^T` of a symmetrized gram; exactly symmetric output.
pub fn psd_project<T: Scalar>(h: &GramMatrix<T>) -> Result<GramMatrix<T>> {
    if !matches!(h.state(), GramState::Symmetrized | GramState::Psd) {
        return Err(Error::State { expected: "symmetrized", found: h.state().name() });
    }
    let n = h.rows();
    let eig = eigh(h)?;
    let mut k = eig.reconstruct_with(|v| v.max(T::zero()));
    for i in 0..n {
        for j in i + 1..n {
            let v = (k[i * n + j] + k[j * n + i]) * T::lit(0.5);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    GramMatrix::new(k, h.row_ids().to_vec(), h.col_ids().to_vec(), GramState::Psd)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumReport {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub positive_count: usize,
    pub negative_count: usize,
    pub zero_count: usize,
    pub positive_mass: f64,
    /// Absolute sum of the negative eigenvalues.
    pub negative_mass: f64,
}

impl SpectrumReport {
    /// Positive mass over negative mass (infinite when nothing is negative).
    pub fn mass_ratio(&self) -> f64 {
        if self.negative_mass == 0.0 {
            f64::INFINITY
        } else {
            self.positive_mass / self.negative_mass
        }
    }

    pub fn negative_fraction(&self) -> f64 {
        let total = self.positive_mass + self.negative_mass;
        if total == 0.0 {
            0.0
        } else {
            self.negative_mass / total
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,eigenvalue\n");
        for (k, v) in self.eigenvalues.iter().enumerate() {
            let _ = writeln!(out, "{},{:.12e}", k + 1, v);
        }
        out
    }
}

/// Sorted spectrum with counts and masses. Eigenvalues within
/// `1e-9 * max(1, |lambda_max|)` of zero count as zero.
pub fn spectrum_report<T: Scalar>(g: &GramMatrix<T>) -> Result<SpectrumReport> {
    if g.rows() != g.cols() {
        return Err(Error::Data(format!("spectrum needs a square matrix, got {}x{}", g.rows(), g.cols())));
    }
    let eig = jacobi(g.values(), g.rows(), false)?;
    let values: Vec<f64> = eig.values.iter().map(|v| v.as_f64()).collect();
    let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let eps = 1e-9 * scale;
    let mut r = SpectrumReport {
        eigenvalues: values.clone(),
        positive_count: 0,
        negative_count: 0,
        zero_count: 0,
        positive_mass: 0.0,
        negative_mass: 0.0,
    };
    for v in values {
        if v > eps {
            r.positive_count += 1;
            r.positive_mass += v;
        } else if v < -eps {
            r.negative_count += 1;
            r.negative_mass -= v;
        } else {
            r.zero_count += 1;
        }
    }
    Ok(r)
}
