//! Uniform Dirichlet grid on the unit square, the 5-point Laplacian and the
//! three discrete metrics (L², H⁻¹, H¹₀).
//!
//! The Laplacian is diagonalised by the separable discrete sine transform, so
//! both `A = -Δ_h` and `A⁻¹` are applied in closed form. All inner products
//! carry the quadrature weight `h²`.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::sandwich;

/// Grid function over the interior nodes, stored with the x-index running
/// fastest (`p = a + n * b`).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    n: usize,
    values: DVector<f64>,
}

impl Field {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: DVector::zeros(n * n),
        }
    }

    pub fn from_vec(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::ShapeMismatch {
                expected: n * n,
                found: values.len(),
            });
        }
        Ok(Self {
            n,
            values: DVector::from_vec(values),
        })
    }

    pub(crate) fn from_dvector(n: usize, values: DVector<f64>) -> Self {
        debug_assert_eq!(values.len(), n * n);
        Self { n, values }
    }

    pub fn n_per_dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.values.as_mut_slice()
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field::from_dvector(self.n, self.values.map(f))
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Field) {
        debug_assert_eq!(self.n, other.n);
        self.values.axpy(alpha, &other.values, 1.0);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values *= alpha;
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a + self.n * b]
    }
}

impl Add<&Field> for &Field {
    type Output = Field;
    fn add(self, rhs: &Field) -> Field {
        Field::from_dvector(self.n, &self.values + &rhs.values)
    }
}

impl Sub<&Field> for &Field {
    type Output = Field;
    fn sub(self, rhs: &Field) -> Field {
        Field::from_dvector(self.n, &self.values - &rhs.values)
    }
}

impl Mul<f64> for &Field {
    type Output = Field;
    fn mul(self, rhs: f64) -> Field {
        Field::from_dvector(self.n, &self.values * rhs)
    }
}

impl Mul<f64> for Field {
    type Output = Field;
    fn mul(mut self, rhs: f64) -> Field {
        self.values *= rhs;
        self
    }
}

impl Neg for &Field {
    type Output = Field;
    fn neg(self) -> Field {
        Field::from_dvector(self.n, -&self.values)
    }
}

impl AddAssign<&Field> for Field {
    fn add_assign(&mut self, rhs: &Field) {
        self.values += &rhs.values;
    }
}

impl SubAssign<&Field> for Field {
    fn sub_assign(&mut self, rhs: &Field) {
        self.values -= &rhs.values;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L2,
    Hminus1,
    H10,
}

/// Interior grid of the unit square with its analytic sine eigenbasis.
#[derive(Debug, Clone)]
pub struct GridDomain {
    n: usize,
    h: f64,
    /// Orthogonal, symmetric DST-I matrix: `sine[(a, j)] = sqrt(2/(n+1)) sin((a+1)(j+1)π/(n+1))`.
    sine: DMatrix<f64>,
    /// `λ_{jk}` stored at `(j, k)`.
    eigenvalues: DMatrix<f64>,
    /// Mode pairs (0-based) sorted by increasing eigenvalue, ties by `(j, k)`.
    modes: Vec<(usize, usize)>,
}

pub fn build_grid(n_per_dim: usize) -> Result<GridDomain> {
    GridDomain::new(n_per_dim)
}

impl GridDomain {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least 2 interior points per dimension, got {n}"
            )));
        }
        let h = 1.0 / (n as f64 + 1.0);
        let norm = (2.0 / (n as f64 + 1.0)).sqrt();
        let sine = DMatrix::from_fn(n, n, |a, j| {
            norm * (((a + 1) * (j + 1)) as f64 * PI * h).sin()
        });
        let one_d: Vec<f64> = (1..=n)
            .map(|j| 4.0 / (h * h) * (j as f64 * PI * h / 2.0).sin().powi(2))
            .collect();
        let eigenvalues = DMatrix::from_fn(n, n, |j, k| one_d[j] + one_d[k]);
        let mut modes: Vec<(usize, usize)> =
            (0..n).flat_map(|k| (0..n).map(move |j| (j, k))).collect();
        modes.sort_by(|&(j1, k1), &(j2, k2)| {
            eigenvalues[(j1, k1)]
                .partial_cmp(&eigenvalues[(j2, k2)])
                .unwrap()
                .then((j1, k1).cmp(&(j2, k2)))
        });
        Ok(Self {
            n,
            h,
            sine,
            eigenvalues,
            modes,
        })
    }

    pub fn n_per_dim(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.n * self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Coordinates of interior node `(a, b)`.
    pub fn node(&self, a: usize, b: usize) -> (f64, f64) {
        ((a + 1) as f64 * self.h, (b + 1) as f64 * self.h)
    }

    pub fn zeros(&self) -> Field {
        Field::zeros(self.n)
    }

    pub fn field_from_fn(&self, f: impl Fn(f64, f64) -> f64) -> Field {
        let mut out = self.zeros();
        for b in 0..self.n {
            for a in 0..self.n {
                let (x, y) = self.node(a, b);
                out.values[a + self.n * b] = f(x, y);
            }
        }
        out
    }

    /// `λ_{jk}` for 1-based mode numbers.
    pub fn eigenvalue_jk(&self, j: usize, k: usize) -> f64 {
        self.eigenvalues[(j - 1, k - 1)]
    }

    /// Eigenvalue of the `idx`-th mode in increasing order (0-based).
    pub fn eigenvalue(&self, idx: usize) -> f64 {
        let (j, k) = self.modes[idx];
        self.eigenvalues[(j, k)]
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalue(0)
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalue(self.dim() - 1)
    }

    /// 1-based `(j, k)` of the `idx`-th mode in increasing order.
    pub fn mode(&self, idx: usize) -> (usize, usize) {
        let (j, k) = self.modes[idx];
        (j + 1, k + 1)
    }

    /// L²-normalised eigenvector `e_{jk} = 2 sin(jπx) sin(kπy)` (1-based).
    pub fn eigenvector_jk(&self, j: usize, k: usize) -> Field {
        self.field_from_fn(|x, y| 2.0 * (j as f64 * PI * x).sin() * (k as f64 * PI * y).sin())
    }

    pub fn eigenvector(&self, idx: usize) -> Field {
        let (j, k) = self.mode(idx);
        self.eigenvector_jk(j, k)
    }

    fn check(&self, phi: &Field) -> Result<()> {
        if phi.n != self.n {
            return Err(Error::ShapeMismatch {
                expected: self.dim(),
                found: phi.len(),
            });
        }
        Ok(())
    }

    /// Euclidean-orthonormal sine coefficients `c = (S ⊗ S) φ`, stored at `j + n k`.
    pub fn to_spectral(&self, phi: &Field) -> DVector<f64> {
        let mut c = vec![0.0; self.n * self.n];
        sandwich(&self.sine, phi.as_slice(), &mut c);
        DVector::from_vec(c)
    }

    pub fn from_spectral(&self, coeffs: &DVector<f64>) -> Field {
        let mut v = vec![0.0; self.n * self.n];
        sandwich(&self.sine, coeffs.as_slice(), &mut v);
        Field::from_dvector(self.n, DVector::from_vec(v))
    }

    /// Eigenvalues in spectral storage order (`j + n k`).
    pub fn spectral_eigenvalues(&self) -> &[f64] {
        self.eigenvalues.as_slice()
    }

    /// `A φ` with `A = -Δ_h` via the 5-point stencil and zero exterior values.
    pub fn laplacian_apply(&self, phi: &Field) -> Result<Field> {
        self.check(phi)?;
        Ok(self.laplacian_apply_unchecked(phi))
    }

    pub(crate) fn laplacian_apply_unchecked(&self, phi: &Field) -> Field {
        let n = self.n;
        let inv_h2 = 1.0 / (self.h * self.h);
        let v = phi.as_slice();
        let mut out = vec![0.0; n * n];
        for b in 0..n {
            for a in 0..n {
                let p = a + n * b;
                let mut s = 4.0 * v[p];
                if a > 0 {
                    s -= v[p - 1];
                }
                if a + 1 < n {
                    s -= v[p + 1];
                }
                if b > 0 {
                    s -= v[p - n];
                }
                if b + 1 < n {
                    s -= v[p + n];
                }
                out[p] = s * inv_h2;
            }
        }
        Field::from_dvector(n, DVector::from_vec(out))
    }

    /// `A⁻¹ φ` through the eigenbasis.
    pub fn laplacian_solve(&self, phi: &Field) -> Result<Field> {
        self.check(phi)?;
        Ok(self.laplacian_solve_unchecked(phi))
    }

    pub(crate) fn laplacian_solve_unchecked(&self, phi: &Field) -> Field {
        let mut c = self.to_spectral(phi);
        for (ci, lam) in c.iter_mut().zip(self.eigenvalues.iter()) {
            *ci /= lam;
        }
        self.from_spectral(&c)
    }

    pub fn inner(&self, phi: &Field, psi: &Field, metric: Metric) -> Result<f64> {
        self.check(phi)?;
        self.check(psi)?;
        Ok(self.inner_unchecked(phi, psi, metric))
    }

    pub(crate) fn inner_unchecked(&self, phi: &Field, psi: &Field, metric: Metric) -> f64 {
        let h2 = self.h * self.h;
        match metric {
            Metric::L2 => h2 * phi.values.dot(&psi.values),
            Metric::Hminus1 | Metric::H10 => {
                let cp = self.to_spectral(phi);
                let cq = self.to_spectral(psi);
                let sum: f64 = cp
                    .iter()
                    .zip(cq.iter())
                    .zip(self.eigenvalues.iter())
                    .map(|((a, b), lam)| match metric {
                        Metric::Hminus1 => a * b / lam,
                        _ => a * b * lam,
                    })
                    .sum();
                h2 * sum
            }
        }
    }

    pub fn norm(&self, phi: &Field, metric: Metric) -> f64 {
        self.inner_unchecked(phi, phi, metric).max(0.0).sqrt()
    }

    pub fn norm_sq(&self, phi: &Field, metric: Metric) -> f64 {
        self.inner_unchecked(phi, phi, metric).max(0.0)
    }

    /// Dense 5-point matrix, for validation only.
    pub fn assemble_laplacian(&self) -> DMatrix<f64> {
        let n = self.n;
        let inv_h2 = 1.0 / (self.h * self.h);
        let mut m = DMatrix::zeros(n * n, n * n);
        for b in 0..n {
            for a in 0..n {
                let p = a + n * b;
                m[(p, p)] = 4.0 * inv_h2;
                if a > 0 {
                    m[(p, p - 1)] = -inv_h2;
                }
                if a + 1 < n {
                    m[(p, p + 1)] = -inv_h2;
                }
                if b > 0 {
                    m[(p, p - n)] = -inv_h2;
                }
                if b + 1 < n {
                    m[(p, p + n)] = -inv_h2;
                }
            }
        }
        m
    }

    /// H⁻¹-orthonormal coordinates `w = h Λ^{-1/2} c(φ)`: `‖φ‖_{H⁻¹} = |w|`.
    pub(crate) fn to_metric_coords(&self, phi: &Field) -> DVector<f64> {
        let mut c = self.to_spectral(phi);
        for (ci, lam) in c.iter_mut().zip(self.eigenvalues.iter()) {
            *ci *= self.h / lam.sqrt();
        }
        c
    }

    pub(crate) fn from_metric_coords(&self, w: &DVector<f64>) -> Field {
        let mut c = w.clone();
        for (ci, lam) in c.iter_mut().zip(self.eigenvalues.iter()) {
            *ci *= lam.sqrt() / self.h;
        }
        self.from_spectral(&c)
    }

    /// `(A u)` expressed directly in metric coordinates: `h Λ^{1/2} c(u)`.
    pub(crate) fn laplacian_to_metric_coords(&self, u: &Field) -> DVector<f64> {
        let mut c = self.to_spectral(u);
        for (ci, lam) in c.iter_mut().zip(self.eigenvalues.iter()) {
            *ci *= self.h * lam.sqrt();
        }
        c
    }
}
