//! Small dense linear algebra: vectors as slices, a row-major [`Matrix`], a
//! checked [`SymMatrix`] and the cyclic Jacobi eigensolver behind every
//! spectral formula in the crate.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // std builds resolve the inherent methods first
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `y += s * x`
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn scaled(x: &[f64], s: f64) -> Vec<f64> {
    x.iter().map(|v| v * s).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// `A x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `Aᵀ x`
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            axpy(&mut out, *xi, self.row(i));
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                axpy(dst, a, other.row(k));
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        norm_inf(&self.data)
    }
}

/// Square symmetric matrix (stored in full).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl SymMatrix {
    /// Checks `|a_ij - a_ji| <= 1e-12 * max(1, |a_ij|)`.
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        check_len(n * n, entries.len())?;
        for i in 0..n {
            for j in (i + 1)..n {
                let a = entries[i * n + j];
                let b = entries[j * n + i];
                if !((a - b).abs() <= 1e-12 * a.abs().max(1.0)) {
                    return Err(Error::NonSymmetric { i, j });
                }
            }
        }
        Ok(SymMatrix { n, entries })
    }

    /// Builds from the upper triangle of `f`, mirrored, so the result is
    /// exactly symmetric.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        SymMatrix { n, entries }
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix { n, entries: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// `Aᵀ A`, always positive semi-definite.
    pub fn gram(a: &Matrix) -> Self {
        Self::from_fn(a.cols, |i, j| (0..a.rows).map(|k| a.get(k, i) * a.get(k, j)).sum())
    }

    /// Symmetrizes `(m + mᵀ)/2`.
    pub fn symmetrize(m: &Matrix) -> Result<Self> {
        check_len(m.rows, m.cols)?;
        Ok(Self::from_fn(m.rows, |i, j| 0.5 * (m.get(i, j) + m.get(j, i))))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| dot(&self.entries[i * self.n..(i + 1) * self.n], x)).collect()
    }

    /// `xᵀ A x`
    pub fn quad(&self, x: &[f64]) -> f64 {
        dot(x, &self.matvec(x))
    }

    /// `xᵀ A y`
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(x, &self.matvec(y))
    }

    pub fn max_abs(&self) -> f64 {
        norm_inf(&self.entries)
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix { rows: self.n, cols: self.n, data: self.entries.clone() }
    }
}

/// Eigenvalues (descending), orthonormal eigenvectors and, once a gradient has
/// been projected, the coordinates `gammas[i] = g · vecs[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSystem {
    pub lambdas: Vec<f64>,
    pub vecs: Vec<Vec<f64>>,
    pub gammas: Option<Vec<f64>>,
}

impl EigenSystem {
    pub fn n(&self) -> usize {
        self.lambdas.len()
    }

    /// Eigenvalues with `|λ| <= 1e-10 · max|λ|` are treated as exact zeros by
    /// the closed-form coefficient formulas.
    pub fn zero_threshold(&self) -> f64 {
        1e-10 * self.lambdas.iter().fold(0.0f64, |m, l| m.max(l.abs()))
    }

    /// `V Λ Vᵀ`
    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.n();
        SymMatrix::from_fn(n, |i, j| (0..n).map(|k| self.lambdas[k] * self.vecs[k][i] * self.vecs[k][j]).sum())
    }

    /// `Σ_i c_i γ_i v_i` for per-eigenpair coefficients `c_i`.
    pub fn combine(&self, coeffs: &[f64]) -> Vec<f64> {
        let gammas = self.gammas.as_deref().unwrap_or(&[]);
        let mut out = vec![0.0; self.n()];
        for (k, v) in self.vecs.iter().enumerate() {
            let w = coeffs[k] * gammas.get(k).copied().unwrap_or(0.0);
            if w != 0.0 {
                axpy(&mut out, w, v);
            }
        }
        out
    }
}

/// Cyclic Jacobi eigendecomposition.
///
/// Sweeps over all `(p, q)` pairs, annihilating each off-diagonal entry with
/// a Givens rotation, until the off-diagonal Frobenius mass drops below
/// `1e-15 · ‖A‖_F`. The rotation budget is `100 n²`.
pub fn jacobi_eigen(m: &SymMatrix) -> Result<EigenSystem> {
    let n = m.n;
    // Re-validate: SymMatrix can be deserialized without going through `new`.
    let m = SymMatrix::new(n, m.entries.clone())?;
    let mut a = m.entries;
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let budget = 100 * n * n;
    let tol = 1e-15 * frob;
    let mut rotations = 0usize;

    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        s.sqrt()
    };

    loop {
        if frob == 0.0 || off(&a) <= tol {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE || apq.abs() <= 1e-18 * (a[p * n + p].abs() + a[q * n + q].abs()) {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                if rotations >= budget {
                    return Err(Error::NoConvergence { rotations });
                }
                rotations += 1;
                rotated = true;
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    let nkp = c * akp - s * akq;
                    let nkq = s * akp + c * akq;
                    a[k * n + p] = nkp;
                    a[p * n + k] = nkp;
                    a[k * n + q] = nkq;
                    a[q * n + k] = nkq;
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                // columns of v are eigenvectors
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep Jacobi output order
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap_or(core::cmp::Ordering::Equal));
    let lambdas = order.iter().map(|&i| a[i * n + i]).collect();
    let vecs = order.iter().map(|&j| (0..n).map(|k| v[k * n + j]).collect()).collect();
    Ok(EigenSystem { lambdas, vecs, gammas: None })
}

/// Attaches `γ_i = g · v_i`.
pub fn project_gradient(e: &EigenSystem, g: &[f64]) -> Result<EigenSystem> {
    check_len(e.n(), g.len())?;
    let gammas = e.vecs.iter().map(|v| dot(g, v)).collect();
    Ok(EigenSystem { gammas: Some(gammas), ..e.clone() })
}

/// Convenience: eigendecompose `h` and project `g` in one go.
pub fn spectral(h: &SymMatrix, g: &[f64]) -> Result<EigenSystem> {
    project_gradient(&jacobi_eigen(h)?, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_sym(n: usize, seed: u64) -> SymMatrix {
        let mut r = crate::seed::rng(seed);
        SymMatrix::from_fn(n, |_, _| r.random_range(-1.0..1.0))
    }

    fn check_system(m: &SymMatrix, e: &EigenSystem) {
        let n = m.n();
        for i in 0..n {
            for j in 0..n {
                let d = dot(&e.vecs[i], &e.vecs[j]) - if i == j { 1.0 } else { 0.0 };
                assert!(d.abs() <= 1e-9, "orthonormality ({i},{j}) off by {d}");
            }
        }
        let r = e.reconstruct();
        let scale = m.max_abs();
        for k in 0..n * n {
            assert!((r.entries()[k] - m.entries()[k]).abs() <= 1e-8 * scale);
        }
        for w in e.lambdas.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn diagonal_input() {
        let m = SymMatrix::new(2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let e = jacobi_eigen(&m).unwrap();
        assert_eq!(e.lambdas, vec![3.0, 2.0]);
        assert_eq!(e.vecs[0], vec![0.0, 1.0]);
        assert_eq!(e.vecs[1], vec![1.0, 0.0]);
    }

    #[test]
    fn swap_matrix() {
        let m = SymMatrix::new(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let e = jacobi_eigen(&m).unwrap();
        assert!((e.lambdas[0] - 1.0).abs() < 1e-15);
        assert!((e.lambdas[1] + 1.0).abs() < 1e-15);
        let h = core::f64::consts::FRAC_1_SQRT_2;
        // eigenvectors are defined up to sign
        assert!((e.vecs[0][0].abs() - h).abs() < 1e-15);
        assert!((e.vecs[0][0] - e.vecs[0][1]).abs() < 1e-15);
        assert!((e.vecs[1][0] + e.vecs[1][1]).abs() < 1e-15);
    }

    #[test]
    fn seeded_8x8_reconstructs() {
        let m = random_sym(8, 42);
        let e = jacobi_eigen(&m).unwrap();
        check_system(&m, &e);
        // deterministic
        assert_eq!(e, jacobi_eigen(&m).unwrap());
    }

    #[test]
    fn rejects_asymmetric() {
        let err = SymMatrix::new(2, vec![1.0, 2.0, 2.1, 1.0]).unwrap_err();
        assert_eq!(err, Error::NonSymmetric { i: 0, j: 1 });
    }

    #[test]
    fn projection_basis_and_zero() {
        let e = jacobi_eigen(&random_sym(5, 3)).unwrap();
        let p = project_gradient(&e, &e.vecs[0].clone()).unwrap();
        let g = p.gammas.unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert!(g[1..].iter().all(|x| x.abs() < 1e-12));
        let z = project_gradient(&e, &[0.0; 5]).unwrap();
        assert!(z.gammas.unwrap().iter().all(|&x| x == 0.0));
        assert!(project_gradient(&e, &[1.0; 4]).is_err());
    }

    #[test]
    fn projection_reconstructs_gradient() {
        let e = jacobi_eigen(&random_sym(6, 11)).unwrap();
        let mut r = crate::seed::rng(12);
        let g: Vec<f64> = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
        let p = project_gradient(&e, &g).unwrap();
        let back = p.combine(&[1.0; 6]);
        assert!(norm2(&sub(&back, &g)) <= 1e-9 * norm2(&g));
    }

    #[test]
    fn zero_matrix() {
        let e = jacobi_eigen(&SymMatrix::zeros(3)).unwrap();
        assert_eq!(e.lambdas, vec![0.0; 3]);
    }

    proptest! {
        #[test]
        fn gram_spectrum_nonnegative(seed in any::<u64>(), rows in 1usize..8, n in 1usize..9) {
            let mut r = crate::seed::rng(seed);
            let a = Matrix::from_fn(rows, n, |_, _| r.random_range(-1.0..1.0));
            let m = SymMatrix::gram(&a);
            let e = jacobi_eigen(&m).unwrap();
            check_system(&m, &e);
            prop_assert!(e.lambdas.iter().all(|&l| l >= -1e-9));
        }

        #[test]
        fn rediagonalization_is_stable(seed in any::<u64>(), n in 1usize..10) {
            let m = random_sym(n, seed);
            let e = jacobi_eigen(&m).unwrap();
            let again = jacobi_eigen(&e.reconstruct()).unwrap();
            for (a, b) in e.lambdas.iter().zip(&again.lambdas) {
                prop_assert!((a - b).abs() <= 1e-8);
            }
        }
    }
}
