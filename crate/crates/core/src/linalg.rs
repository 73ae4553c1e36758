//! Small dense and banded linear algebra used by the variational families.
//!
//! Matrices are row-major `f64` slices. Everything here is sized by the
//! number of factors or the variational rank, so dense O(n³) routines are
//! only ever applied to tiny matrices; anything of order `S` or `T` goes
//! through the banded or low-rank paths.

use crate::error::{Error, Result};

/// In-place lower Cholesky factorisation of the `n × n` SPD matrix `a`.
/// The strict upper triangle is zeroed on success.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::numerical(format!(
                "matrix not positive definite (pivot {j} = {diag})"
            )));
        }
        let ljj = diag.sqrt();
        a[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
        for k in (j + 1)..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(())
}

/// Solves `L x = b` in place for lower-triangular `L`.
pub fn solve_lower(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `Lᵀ x = b` in place for lower-triangular `L`.
pub fn solve_lower_transpose(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Lower-bidiagonal matrix with diagonal `diag[0..n]` and subdiagonal
/// `sub[i] = L[i+1, i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerBidiagonal {
    pub diag: Vec<f64>,
    pub sub: Vec<f64>,
}

impl LowerBidiagonal {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `L x = b`, O(n).
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.len();
        for i in 0..n {
            let mut s = b[i];
            if i > 0 {
                s -= self.sub[i - 1] * b[i - 1];
            }
            b[i] = s / self.diag[i];
        }
    }

    /// `Lᵀ x = b`, O(n).
    pub fn solve_transpose(&self, b: &mut [f64]) {
        let n = self.len();
        for i in (0..n).rev() {
            let mut s = b[i];
            if i + 1 < n {
                s -= self.sub[i] * b[i + 1];
            }
            b[i] = s / self.diag[i];
        }
    }

    /// `Lᵀ x`.
    pub fn mul_transpose(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|j| {
                let mut s = self.diag[j] * x[j];
                if j + 1 < n {
                    s += self.sub[j] * x[j + 1];
                }
                s
            })
            .collect()
    }

    /// `L x`.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let mut s = self.diag[i] * x[i];
                if i > 0 {
                    s += self.sub[i - 1] * x[i - 1];
                }
                s
            })
            .collect()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            out[i * n + i] = self.diag[i];
            if i > 0 {
                out[i * n + i - 1] = self.sub[i - 1];
            }
        }
        out
    }
}

/// Covariance of the form `B Bᵀ + diag(d²)` with a factorised inner matrix
/// `I + Bᵀ D⁻² B`, so that solves and determinants never touch an `R × R`
/// matrix.
#[derive(Debug, Clone)]
pub struct LowRankPlusDiag {
    rows: usize,
    rank: usize,
    b: Vec<f64>,
    inv_d2: Vec<f64>,
    log_det_d2: f64,
    inner_chol: Vec<f64>,
}

impl LowRankPlusDiag {
    /// `b` is `rows × rank` row-major; `d2` holds the diagonal variances.
    pub fn new(b: &[f64], rank: usize, d2: &[f64]) -> Result<Self> {
        let rows = d2.len();
        if b.len() != rows * rank {
            return Err(Error::input("low-rank factor has wrong shape"));
        }
        let mut inv_d2 = Vec::with_capacity(rows);
        let mut log_det_d2 = 0.0;
        for &v in d2 {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::numerical(format!("diagonal variance {v} not positive")));
            }
            inv_d2.push(1.0 / v);
            log_det_d2 += v.ln();
        }
        let mut inner = vec![0.0; rank * rank];
        for i in 0..rank {
            inner[i * rank + i] = 1.0;
        }
        for r in 0..rows {
            let row = &b[r * rank..(r + 1) * rank];
            let w = inv_d2[r];
            for i in 0..rank {
                let bi = row[i] * w;
                if bi == 0.0 {
                    continue;
                }
                for j in 0..=i {
                    inner[i * rank + j] += bi * row[j];
                }
            }
        }
        for i in 0..rank {
            for j in 0..i {
                inner[j * rank + i] = inner[i * rank + j];
            }
        }
        cholesky_in_place(&mut inner, rank)?;
        Ok(Self {
            rows,
            rank,
            b: b.to_vec(),
            inv_d2,
            log_det_d2,
            inner_chol: inner,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `(B Bᵀ + D²)⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let p = self.rank;
        let w: Vec<f64> = v.iter().zip(&self.inv_d2).map(|(a, b)| a * b).collect();
        if p == 0 {
            return w;
        }
        let mut c = vec![0.0; p];
        for r in 0..self.rows {
            for i in 0..p {
                c[i] += self.b[r * p + i] * w[r];
            }
        }
        solve_lower(&self.inner_chol, p, &mut c);
        solve_lower_transpose(&self.inner_chol, p, &mut c);
        let mut out = w;
        for r in 0..self.rows {
            let mut s = 0.0;
            for i in 0..p {
                s += self.b[r * p + i] * c[i];
            }
            out[r] -= self.inv_d2[r] * s;
        }
        out
    }

    /// `log det(B Bᵀ + D²)` by the matrix determinant lemma.
    pub fn log_det(&self) -> f64 {
        let p = self.rank;
        let inner: f64 = (0..p).map(|i| self.inner_chol[i * p + i].ln()).sum();
        self.log_det_d2 + 2.0 * inner
    }

    /// `vᵀ (B Bᵀ + D²)⁻¹ v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        self.solve(v).iter().zip(v).map(|(a, b)| a * b).sum()
    }

    /// Gaussian log-density `log N(v; 0, B Bᵀ + D²)`.
    pub fn log_density(&self, v: &[f64]) -> f64 {
        -0.5 * (self.rows as f64 * LN_2PI + self.log_det() + self.quad_form(v))
    }
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `(B Bᵀ + diag(d)²)⁻¹ v` without forming the `R × R` matrix.
pub fn woodbury_apply(b: &[f64], rank: usize, d: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let d2: Vec<f64> = d.iter().map(|x| x * x).collect();
    Ok(LowRankPlusDiag::new(b, rank, &d2)?.solve(v))
}

/// `log det(B Bᵀ + diag(d)²)` via the matrix determinant lemma.
pub fn lowrank_logdet(b: &[f64], rank: usize, d: &[f64]) -> Result<f64> {
    let d2: Vec<f64> = d.iter().map(|x| x * x).collect();
    Ok(LowRankPlusDiag::new(b, rank, &d2)?.log_det())
}

/// Dense `n × n` SPD solve via Cholesky; used for `S × S` portfolio algebra.
pub fn spd_solve(a: &[f64], n: usize, b: &[f64]) -> Result<Vec<f64>> {
    let mut l = a.to_vec();
    cholesky_in_place(&mut l, n)?;
    let mut x = b.to_vec();
    solve_lower(&l, n, &mut x);
    solve_lower_transpose(&l, n, &mut x);
    Ok(x)
}
