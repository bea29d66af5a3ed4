//! Linear solvers used by the collocation and finite-difference schemes.

use alloc::vec;
use alloc::vec::Vec;

use libm::fabs;
use nalgebra::{Complex, Matrix4};

use crate::error::{Error, Result};

/// Square banded matrix with `kl` sub- and `ku` super-diagonals, factored in
/// place by Gaussian elimination with partial pivoting (LAPACK `gbtrf`
/// layout: fill-in widens the upper band to `kl + ku`).
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ld: usize,
    data: Vec<f64>,
    pivots: Vec<usize>,
    factored: bool,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ld = 2 * kl + ku + 1;
        Self { n, kl, ku, ld, data: vec![0.0; ld * n], pivots: vec![0; n], factored: false }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        // Column-major band storage, row offset kl + ku + i - j.
        j * self.ld + (self.kl + self.ku + i - j)
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.kl >= i && i + self.ku >= j
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(self.in_band(i, j), "({i},{j}) outside band");
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(self.in_band(i, j), "({i},{j}) outside band");
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.idx(i, j)]
        } else {
            0.0
        }
    }

    /// LU factorisation with row pivoting.
    pub fn factor(&mut self) -> Result<()> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let kv = ku + kl;
        for j in 0..n {
            let last = (j + kl).min(n - 1);
            let mut p = j;
            let mut best = fabs(self.data[self.idx(j, j)]);
            for i in (j + 1)..=last {
                let v = fabs(self.data[j * self.ld + kv + i - j]);
                if v > best {
                    best = v;
                    p = i;
                }
            }
            self.pivots[j] = p;
            if best == 0.0 || !best.is_finite() {
                return Err(Error::SingularSystem);
            }
            let jend = (j + kv).min(n - 1);
            if p != j {
                for c in j..=jend {
                    let a = c * self.ld + kv + j - c;
                    let b = c * self.ld + kv + p - c;
                    self.data.swap(a, b);
                }
            }
            let piv = self.data[j * self.ld + kv];
            for i in (j + 1)..=last {
                let k = j * self.ld + kv + i - j;
                self.data[k] /= piv;
            }
            for c in (j + 1)..=jend {
                let ujc = self.data[c * self.ld + kv + j - c];
                if ujc == 0.0 {
                    continue;
                }
                for i in (j + 1)..=last {
                    let lij = self.data[j * self.ld + kv + i - j];
                    self.data[c * self.ld + kv + i - c] -= lij * ujc;
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    /// Solves `A x = b` in place using the stored factors.
    pub fn solve(&self, b: &mut [f64]) {
        assert!(self.factored, "factor() must be called first");
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let kv = ku + kl;
        for j in 0..n {
            let p = self.pivots[j];
            if p != j {
                b.swap(j, p);
            }
            let last = (j + kl).min(n - 1);
            let bj = b[j];
            for i in (j + 1)..=last {
                b[i] -= self.data[j * self.ld + kv + i - j] * bj;
            }
        }
        for j in (0..n).rev() {
            b[j] /= self.data[j * self.ld + kv];
            let bj = b[j];
            let first = j.saturating_sub(kv);
            for i in first..j {
                b[i] -= self.data[j * self.ld + kv + i - j] * bj;
            }
        }
    }
}

/// Tridiagonal system with optional corner entries: row 0 may reference
/// column 2 and row `n-1` may reference column `n-3` (one-sided boundary
/// stencils). `lower[i]`, `diag[i]`, `upper[i]` hold row `i`.
#[derive(Debug, Clone)]
pub struct NearTridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
    /// Coefficient of column 2 in row 0.
    pub first_extra: f64,
    /// Coefficient of column n-3 in row n-1.
    pub last_extra: f64,
}

impl NearTridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
            first_extra: 0.0,
            last_extra: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.lower[i] * x[i - 1];
            }
            if i + 1 < n {
                v += self.upper[i] * x[i + 1];
            }
            y[i] = v;
        }
        if n >= 3 {
            y[0] += self.first_extra * x[2];
            y[n - 1] += self.last_extra * x[n - 3];
        }
        y
    }

    /// Solves `A x = rhs` with the Thomas algorithm after folding the two
    /// corner entries into the tridiagonal band.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let mut a = self.lower.clone();
        let mut b = self.diag.clone();
        let mut c = self.upper.clone();
        let mut d = rhs.to_vec();
        if n >= 3 {
            if self.first_extra != 0.0 {
                // Row 0 -= (extra / upper[1]) * row 1 removes column 2.
                if c[1] == 0.0 {
                    return Err(Error::SingularSystem);
                }
                let m = self.first_extra / c[1];
                b[0] -= m * a[1];
                c[0] -= m * b[1];
                d[0] -= m * d[1];
            }
            if self.last_extra != 0.0 {
                let r = n - 2;
                if a[r] == 0.0 {
                    return Err(Error::SingularSystem);
                }
                let m = self.last_extra / a[r];
                a[n - 1] -= m * b[r];
                b[n - 1] -= m * c[r];
                d[n - 1] -= m * d[r];
            }
        }
        thomas(&mut a, &mut b, &mut c, &mut d)?;
        Ok(d)
    }
}

/// Thomas algorithm; the solution overwrites `d`.
pub fn thomas(a: &mut [f64], b: &mut [f64], c: &mut [f64], d: &mut [f64]) -> Result<()> {
    let n = b.len();
    if n == 0 {
        return Ok(());
    }
    for i in 1..n {
        if b[i - 1] == 0.0 {
            return Err(Error::SingularSystem);
        }
        let w = a[i] / b[i - 1];
        b[i] -= w * c[i - 1];
        d[i] -= w * d[i - 1];
    }
    if b[n - 1] == 0.0 {
        return Err(Error::SingularSystem);
    }
    d[n - 1] /= b[n - 1];
    for i in (0..n - 1).rev() {
        d[i] = (d[i] - c[i] * d[i + 1]) / b[i];
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    Ok(())
}

/// Eigenvalues of a real 4×4 matrix.
pub fn eigenvalues4(m: &Matrix4<f64>) -> [Complex<f64>; 4] {
    let ev = m.complex_eigenvalues();
    [ev[0], ev[1], ev[2], ev[3]]
}

/// Real eigenvector of a 4×4 matrix for a (real, simple) eigenvalue, by
/// inverse iteration on `m - λI`.
pub fn real_eigenvector4(m: &Matrix4<f64>, lambda: f64) -> Option<nalgebra::Vector4<f64>> {
    let shift = lambda * (1.0 + 1e-10) + 1e-14;
    let a = m - Matrix4::identity() * shift;
    let lu = a.lu();
    let mut v = nalgebra::Vector4::new(1.0, 0.7, 0.3, 0.1);
    for _ in 0..8 {
        let w = lu.solve(&v)?;
        let n = w.norm();
        if !(n.is_finite() && n > 0.0) {
            return None;
        }
        v = w / n;
    }
    Some(v)
}
