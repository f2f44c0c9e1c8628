//! Divergence-free drift fields, the noise operator `B = b·∇(-Δ)⁻¹`, its
//! isometric group `e^{sB}` on H⁻¹, Brownian paths and the folded-normal
//! function `ω`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Schur};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{mat_t_vec, mat_vec};
use crate::spatial::{Field, GridDomain, Metric};

/// Named stream functions on the closed unit square. The drift is
/// `b = (∂_y ψ, -∂_x ψ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StreamFunction {
    Zero,
    /// `amplitude · sin(kx π x) sin(ky π y)`
    SinSin { amplitude: f64, kx: u32, ky: u32 },
    /// `amplitude · sin(πx) sin(πy) (1 + x y)`; not separable, so the centred
    /// divergence is only O(h²).
    Modulated { amplitude: f64 },
    /// `amplitude · y`; does not vanish on the boundary and is rejected.
    Shear { amplitude: f64 },
}

impl StreamFunction {
    pub fn sin_sin(amplitude: f64) -> Self {
        StreamFunction::SinSin {
            amplitude,
            kx: 1,
            ky: 1,
        }
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        match *self {
            StreamFunction::Zero => 0.0,
            StreamFunction::SinSin { amplitude, kx, ky } => {
                amplitude * (kx as f64 * PI * x).sin() * (ky as f64 * PI * y).sin()
            }
            StreamFunction::Modulated { amplitude } => {
                amplitude * (PI * x).sin() * (PI * y).sin() * (1.0 + x * y)
            }
            StreamFunction::Shear { amplitude } => amplitude * y,
        }
    }

    /// `(∂_x ψ, ∂_y ψ)`
    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            StreamFunction::Zero => (0.0, 0.0),
            StreamFunction::SinSin { amplitude, kx, ky } => {
                let (ax, ay) = (kx as f64 * PI, ky as f64 * PI);
                (
                    amplitude * ax * (ax * x).cos() * (ay * y).sin(),
                    amplitude * ay * (ax * x).sin() * (ay * y).cos(),
                )
            }
            StreamFunction::Modulated { amplitude } => {
                let (sx, cx) = ((PI * x).sin(), (PI * x).cos());
                let (sy, cy) = ((PI * y).sin(), (PI * y).cos());
                let g = 1.0 + x * y;
                (
                    amplitude * sy * (PI * cx * g + sx * y),
                    amplitude * sx * (PI * cy * g + sy * x),
                )
            }
            StreamFunction::Shear { amplitude } => (0.0, amplitude),
        }
    }

    /// `b(x, y) = (∂_y ψ, -∂_x ψ)`
    pub fn velocity(&self, x: f64, y: f64) -> (f64, f64) {
        let (px, py) = self.gradient(x, y);
        (py, -px)
    }
}

#[derive(Debug, Clone)]
pub struct DriftField {
    pub stream: StreamFunction,
    pub bx: Field,
    pub by: Field,
}

pub fn build_drift(grid: &GridDomain, stream: StreamFunction) -> Result<DriftField> {
    let samples = 4 * (grid.n_per_dim() + 1);
    let mut max_boundary: f64 = 0.0;
    for i in 0..=samples {
        let s = i as f64 / samples as f64;
        for (x, y) in [(s, 0.0), (s, 1.0), (0.0, s), (1.0, s)] {
            max_boundary = max_boundary.max(stream.value(x, y).abs());
        }
    }
    if max_boundary > 1e-12 {
        return Err(Error::NotTangent { max_boundary });
    }
    let bx = grid.field_from_fn(|x, y| stream.velocity(x, y).0);
    let by = grid.field_from_fn(|x, y| stream.velocity(x, y).1);
    Ok(DriftField { stream, bx, by })
}

impl DriftField {
    pub fn is_zero(&self) -> bool {
        self.bx.max_abs() == 0.0 && self.by.max_abs() == 0.0
    }

    /// Max over interior nodes of the centred divergence, with `b` sampled
    /// at the neighbouring (possibly boundary) nodes.
    pub fn max_divergence(&self, grid: &GridDomain) -> f64 {
        let n = grid.n_per_dim();
        let h = grid.spacing();
        let coord = |i: isize| (i + 1) as f64 * h;
        let mut worst: f64 = 0.0;
        for b in 0..n as isize {
            for a in 0..n as isize {
                let (x, y) = (coord(a), coord(b));
                let dx = (self.stream.velocity(coord(a + 1), y).0
                    - self.stream.velocity(coord(a - 1), y).0)
                    / (2.0 * h);
                let dy = (self.stream.velocity(x, coord(b + 1)).1
                    - self.stream.velocity(x, coord(b - 1)).1)
                    / (2.0 * h);
                worst = worst.max((dx + dy).abs());
            }
        }
        worst
    }

    /// Max of `|b·ν|` over boundary nodes.
    pub fn max_boundary_normal(&self, grid: &GridDomain) -> f64 {
        let n = grid.n_per_dim() + 1;
        let h = grid.spacing();
        let mut worst: f64 = 0.0;
        for i in 0..=n {
            let s = i as f64 * h;
            worst = worst
                .max(self.stream.velocity(0.0, s).0.abs())
                .max(self.stream.velocity(1.0, s).0.abs())
                .max(self.stream.velocity(s, 0.0).1.abs())
                .max(self.stream.velocity(s, 1.0).1.abs());
        }
        worst
    }

    /// Centred directional derivative `b·∇_h φ` with zero exterior values.
    pub fn directional_derivative(&self, grid: &GridDomain, phi: &Field) -> Field {
        let n = grid.n_per_dim();
        let inv2h = 1.0 / (2.0 * grid.spacing());
        let v = phi.as_slice();
        let (bx, by) = (self.bx.as_slice(), self.by.as_slice());
        let mut out = vec![0.0; n * n];
        for b in 0..n {
            for a in 0..n {
                let p = a + n * b;
                let east = if a + 1 < n { v[p + 1] } else { 0.0 };
                let west = if a > 0 { v[p - 1] } else { 0.0 };
                let north = if b + 1 < n { v[p + n] } else { 0.0 };
                let south = if b > 0 { v[p - n] } else { 0.0 };
                out[p] = (bx[p] * (east - west) + by[p] * (north - south)) * inv2h;
            }
        }
        Field::from_vec(n, out).expect("shape")
    }
}

/// `B` together with a cached real Schur factorisation of its metric form.
///
/// In H⁻¹-orthonormal coordinates `w` the generator is the real
/// skew-symmetric matrix `S = Q diag(ω_k J) Qᵀ` with `J` the 2×2 rotation
/// generator, so `e^{sS} = Q diag(R(sω_k)) Qᵀ`.
#[derive(Debug, Clone)]
pub struct DriftGroup {
    grid: GridDomain,
    skew: DMatrix<f64>,
    basis: DMatrix<f64>,
    blocks: Vec<Block>,
    op_norm: f64,
    identity: bool,
}

/// Diagonal block of the Schur form: a plane rotation at `(first, first+1)`
/// with frequency `omega`, or a fixed direction.
#[derive(Debug, Clone, Copy)]
struct Block {
    first: usize,
    omega: f64,
    pair: bool,
}

/// Prepared `Qᵀ w` for repeated application of the group to one field.
#[derive(Debug, Clone)]
pub struct PreparedField {
    z: DVector<f64>,
}

/// Rotation angles of every Schur block for one group parameter.
#[derive(Debug, Clone)]
pub struct Rotation {
    theta: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

pub fn build_group(grid: &GridDomain, drift: &DriftField) -> Result<DriftGroup> {
    if drift.bx.n_per_dim() != grid.n_per_dim() {
        return Err(Error::ShapeMismatch {
            expected: grid.dim(),
            found: drift.bx.len(),
        });
    }
    let dim = grid.dim();
    let lam = grid.spectral_eigenvalues();
    let h = grid.spacing();
    // Column q of S₀ = T D_b A⁻¹ T⁻¹ e_q; T⁻¹ e_q is the q-th sine mode scaled by √λ_q / h.
    let mut s0 = DMatrix::zeros(dim, dim);
    if !drift.is_zero() {
        let mut unit = DVector::zeros(dim);
        for q in 0..dim {
            unit[q] = 1.0 / (h * lam[q].sqrt());
            let mode = grid.from_spectral(&unit);
            unit[q] = 0.0;
            let col = grid.to_metric_coords(&drift.directional_derivative(grid, &mode));
            s0.set_column(q, &col);
        }
    }
    let skew = (&s0 - s0.transpose()) * 0.5;
    let identity = skew.amax() == 0.0;

    let (basis, blocks) = if identity {
        let blocks = (0..dim)
            .map(|first| Block {
                first,
                omega: 0.0,
                pair: false,
            })
            .collect();
        (DMatrix::identity(dim, dim), blocks)
    } else {
        schur_blocks(&skew)
    };

    let mut weighted = skew.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= lam[i].sqrt();
    }
    let op_norm = if identity {
        0.0
    } else {
        weighted
            .singular_values()
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    };

    Ok(DriftGroup {
        grid: grid.clone(),
        skew,
        basis,
        blocks,
        op_norm,
        identity,
    })
}

fn schur_blocks(skew: &DMatrix<f64>) -> (DMatrix<f64>, Vec<Block>) {
    let dim = skew.nrows();
    let (q, t) = Schur::new(skew.clone()).unpack();
    let mut blocks = Vec::with_capacity(dim);
    let mut i = 0;
    while i < dim {
        if i + 1 < dim && t[(i + 1, i)] != 0.0 {
            blocks.push(Block {
                first: i,
                omega: 0.5 * (t[(i, i + 1)] - t[(i + 1, i)]),
                pair: true,
            });
            i += 2;
        } else {
            blocks.push(Block {
                first: i,
                omega: 0.0,
                pair: false,
            });
            i += 1;
        }
    }
    (q, blocks)
}

impl Rotation {
    /// `z ← R z`, or `z ← Rᵀ z` when `inverse`; with `minus_identity` the
    /// diagonal `cos` is replaced by `cos − 1` (no cancellation near 0).
    fn apply(&self, blocks: &[Block], z: &mut DVector<f64>, inverse: bool, minus_identity: bool) {
        for (k, b) in blocks.iter().enumerate() {
            let i = b.first;
            if !b.pair {
                if minus_identity {
                    z[i] = 0.0;
                }
                continue;
            }
            let c = if minus_identity {
                -2.0 * (0.5 * self.theta[k]).sin().powi(2)
            } else {
                self.cos[k]
            };
            let s = if inverse { -self.sin[k] } else { self.sin[k] };
            let (a, d) = (z[i], z[i + 1]);
            z[i] = c * a + s * d;
            z[i + 1] = -s * a + c * d;
        }
    }
}

impl DriftGroup {
    pub fn grid(&self) -> &GridDomain {
        &self.grid
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// `‖B‖` as a map H⁻¹ → L².
    pub fn op_norm(&self) -> f64 {
        self.op_norm
    }

    /// Skew generator in H⁻¹-orthonormal coordinates.
    pub fn metric_generator(&self) -> &DMatrix<f64> {
        &self.skew
    }

    /// `B φ`
    pub fn generator_apply(&self, phi: &Field) -> Field {
        if self.identity {
            return self.grid.zeros();
        }
        let w = self.grid.to_metric_coords(phi);
        self.grid.from_metric_coords(&(&self.skew * w))
    }

    pub fn prepare(&self, phi: &Field) -> PreparedField {
        self.prepare_coords(&self.grid.to_metric_coords(phi))
    }

    fn prepare_coords(&self, w: &DVector<f64>) -> PreparedField {
        PreparedField {
            z: mat_t_vec(&self.basis, w),
        }
    }

    /// `Q R(s) z` (or `Q (R(s) − I) z`) in metric coordinates.
    fn rotate_coords(&self, s: f64, prep: &PreparedField, minus_identity: bool) -> DVector<f64> {
        let rot = self.rotation(s);
        let mut y = prep.z.clone();
        rot.apply(&self.blocks, &mut y, false, minus_identity);
        mat_vec(&self.basis, &y)
    }

    pub(crate) fn rotation(&self, s: f64) -> Rotation {
        let theta: Vec<f64> = self.blocks.iter().map(|b| s * b.omega).collect();
        let (sin, cos) = theta.iter().map(|t| t.sin_cos()).unzip();
        Rotation { theta, cos, sin }
    }

    /// Orthogonal Schur basis `Q`.
    pub(crate) fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// `z ← R(s) z` (forward) or `z ← R(−s) z` (inverse) in Schur coordinates.
    pub(crate) fn rotate(&self, rot: &Rotation, z: &mut DVector<f64>, inverse: bool) {
        rot.apply(&self.blocks, z, inverse, false);
    }

    pub fn apply_prepared(&self, s: f64, prep: &PreparedField) -> Field {
        self.grid.from_metric_coords(&self.rotate_coords(s, prep, false))
    }

    /// `(e^{sB} − I) φ` from a prepared field, without cancellation.
    pub fn apply_minus_identity_prepared(&self, s: f64, prep: &PreparedField) -> Field {
        self.grid.from_metric_coords(&self.rotate_coords(s, prep, true))
    }

    /// `e^{sB} φ`
    pub fn apply(&self, s: f64, phi: &Field) -> Field {
        if self.identity || s == 0.0 {
            return phi.clone();
        }
        self.apply_prepared(s, &self.prepare(phi))
    }

    /// `e^{sB}` applied to metric coordinates, returning metric coordinates.
    pub(crate) fn apply_coords(&self, s: f64, w: &DVector<f64>) -> DVector<f64> {
        if self.identity || s == 0.0 {
            return w.clone();
        }
        self.rotate_coords(s, &self.prepare_coords(w), false)
    }

    /// Dense `e^{sS}` in metric coordinates (validation).
    pub fn dense_exp(&self, s: f64) -> DMatrix<f64> {
        let dim = self.basis.nrows();
        let mut out = DMatrix::zeros(dim, dim);
        let mut unit = DVector::zeros(dim);
        for q in 0..dim {
            unit[q] = 1.0;
            out.set_column(q, &self.apply_coords(s, &unit));
            unit[q] = 0.0;
        }
        out
    }

    /// `‖M‖_{H⁻¹→L²}` for an operator given in metric coordinates.
    pub fn hminus1_to_l2_norm(&self, m: &DMatrix<f64>) -> f64 {
        let lam = self.grid.spectral_eigenvalues();
        let mut weighted = m.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= lam[i].sqrt();
        }
        weighted.singular_values().iter().cloned().fold(0.0, f64::max)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `ω(δ) = 2 e^{δ²/2} Φ(δ) − 1 = E[e^{δ|Z|} − 1]`.
pub fn omega(delta: f64) -> Result<f64> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "omega needs a finite δ ≥ 0, got {delta}"
        )));
    }
    // (e^{δ²/2} − 1) + e^{δ²/2} erf(δ/√2), free of the cancellation in the raw form.
    let half = 0.5 * delta * delta;
    Ok(libm::expm1(half) + half.exp() * libm::erf(delta / std::f64::consts::SQRT_2))
}

/// Power-series coefficients `E|Z|^m / m!` of `ω`.
fn omega_series_coefficient(m: u32) -> f64 {
    // E|Z|^m = 2^{m/2} Γ((m+1)/2) / √π
    let abs_moment = 2f64.powf(m as f64 / 2.0) * libm::tgamma((m as f64 + 1.0) / 2.0)
        / PI.sqrt();
    let factorial: f64 = (1..=m).map(|k| k as f64).product();
    abs_moment / factorial
}

/// `(ω(2δ) − 2ω(δ)) / δ²`.
pub fn omega_defect(delta: f64) -> Result<f64> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "omega_defect needs δ > 0, got {delta}"
        )));
    }
    if delta < 0.25 {
        // Σ_{m≥2} (2^m − 2) a_m δ^{m−2}; the linear terms cancel exactly.
        let mut sum = 0.0;
        let mut power = 1.0;
        for m in 2..40u32 {
            let term = (2f64.powi(m as i32) - 2.0) * omega_series_coefficient(m) * power;
            sum += term;
            if term.abs() < 1e-18 * sum.abs() {
                break;
            }
            power *= delta;
        }
        return Ok(sum);
    }
    Ok((omega(2.0 * delta)? - 2.0 * omega(delta)?) / (delta * delta))
}

/// Monte Carlo `E[e^{δ|Z|} − 1]`, returned as `(mean, standard error)`.
pub fn omega_mc(delta: f64, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    if !(delta >= 0.0) || !delta.is_finite() || n_samples < 2 {
        return Err(Error::InvalidParameter(format!(
            "omega_mc needs δ ≥ 0 and at least 2 samples, got δ = {delta}, n = {n_samples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let z: f64 = StandardNormal.sample(&mut rng);
        let v = (delta * z.abs()).exp_m1();
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// One-dimensional Brownian path on a uniform grid, `W(t0) = 0`.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    pub t0: f64,
    pub step: f64,
    pub seed: u64,
    values: Vec<f64>,
}

/// Number of whole steps of size `step` covering `[t0, t1]`.
pub fn steps_between(t0: f64, t1: f64, step: f64) -> usize {
    let ratio = (t1 - t0) / step;
    let rounded = ratio.round();
    if (ratio - rounded).abs() < 1e-9 * ratio.max(1.0) {
        rounded as usize
    } else {
        ratio.ceil() as usize
    }
}

pub fn sample_brownian(t0: f64, t1: f64, step: f64, seed: u64) -> Result<BrownianPath> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "Brownian step must be positive, got {step}"
        )));
    }
    if !(t1 > t0) {
        return Err(Error::InvalidParameter(format!(
            "Brownian interval needs t0 < t1, got [{t0}, {t1}]"
        )));
    }
    let m = steps_between(t0, t1, step);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = step.sqrt();
    let mut values = Vec::with_capacity(m + 1);
    let mut w = 0.0;
    values.push(w);
    for _ in 0..m {
        let z: f64 = StandardNormal.sample(&mut rng);
        w += sd * z;
        values.push(w);
    }
    Ok(BrownianPath {
        t0,
        step,
        seed,
        values,
    })
}

impl BrownianPath {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.n_steps() as f64 * self.step
    }

    pub fn time(&self, idx: usize) -> f64 {
        self.t0 + idx as f64 * self.step
    }

    pub fn value(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `W(t_{to}) − W(t_{from})`
    pub fn increment(&self, from: usize, to: usize) -> f64 {
        self.values[to] - self.values[from]
    }

    /// Path index of time `t`, which must lie on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let r = (t - self.t0) / self.step;
        let i = r.round();
        if (r - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < self.values.len() {
            Some(i as usize)
        } else {
            None
        }
    }
}

/// Deterministic per-sample seed derived from a base seed (SplitMix64 mix).
pub fn sample_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Monte Carlo estimate of `E‖Γ(t,s)ζ − ζ‖²_{L²}` with `W(s) − W(t) ~ N(0, s − t)`.
/// Returns `(mean, standard error)`.
pub fn gamma_l2_defect_mc(
    group: &DriftGroup,
    zeta: &Field,
    duration: f64,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples < 1000 {
        return Err(Error::InvalidParameter(format!(
            "gamma defect needs at least 1000 samples, got {n_samples}"
        )));
    }
    if !(duration >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "duration must be non-negative, got {duration}"
        )));
    }
    if group.is_identity() {
        return Ok((0.0, 0.0));
    }
    let prep = group.prepare(zeta);
    let grid = group.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = duration.sqrt();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let z: f64 = StandardNormal.sample(&mut rng);
        let diff = group.apply_minus_identity_prepared(sd * z, &prep);
        let v = grid.norm_sq(&diff, Metric::L2);
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}
