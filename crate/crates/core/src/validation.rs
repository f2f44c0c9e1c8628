//! Operator invariant suite shared by the CLI and the acceptance tests.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::drift::{DriftField, DriftGroup};
use crate::spatial::{Field, GridDomain, Metric};

/// One invariant with its worst measured violation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            tolerance,
            pass: measured.is_finite() && measured <= tolerance,
        }
    }

    pub fn slack(&self) -> f64 {
        self.tolerance - self.measured
    }
}

pub const GROUP_TIMES: [f64; 6] = [-5.0, -1.0, -0.1, 0.1, 1.0, 5.0];
pub const IDENTITY_TOL: f64 = 1e-9;

fn random_field(grid: &GridDomain, rng: &mut ChaCha8Rng) -> Field {
    let v = (0..grid.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Field::from_vec(grid.n_per_dim(), v).expect("grid-sized field")
}

/// Spatial-core invariants on `samples` random fields.
pub fn spatial_suite(grid: &GridDomain, samples: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lam11 = grid.lambda_min();
    let (mut roundtrip, mut chain, mut parseval, mut symmetry) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut positivity = f64::NEG_INFINITY;
    for _ in 0..samples {
        let phi = random_field(grid, &mut rng);
        let psi = random_field(grid, &mut rng);
        let back = grid.from_spectral(&grid.to_spectral(&phi));
        roundtrip = roundtrip.max((&back - &phi).max_abs());
        let h = grid.norm_sq(&phi, Metric::Hminus1);
        chain = chain.max((h - grid.norm_sq(&phi, Metric::L2) / lam11) / h);
        let w = grid.to_metric_coords(&phi);
        parseval = parseval.max((w.norm_squared() - h).abs() / h);
        for m in [Metric::L2, Metric::Hminus1, Metric::H10] {
            let a = grid.inner_unchecked(&phi, &psi, m);
            let b = grid.inner_unchecked(&psi, &phi, m);
            symmetry = symmetry.max((a - b).abs() / a.abs().max(1.0));
            positivity = positivity.max(-grid.inner_unchecked(&phi, &phi, m));
        }
    }
    let mut eigen: f64 = 0.0;
    for idx in [0, 1, grid.dim() / 2, grid.dim() - 1] {
        let e = grid.eigenvector(idx);
        let ae = grid.laplacian_apply_unchecked(&e);
        let r = &ae - &(&e * grid.eigenvalue(idx));
        eigen = eigen.max(r.max_abs() / grid.eigenvalue(idx));
    }
    vec![
        Check::new("sine transform round trip", roundtrip, 1e-12),
        Check::new("laplacian eigenpairs (relative residual)", eigen, 1e-12),
        Check::new("norm chain |phi|^2_H-1 <= |phi|^2_L2 / lambda_11", chain.max(0.0), 1e-12),
        Check::new("parseval in H-1 (relative)", parseval, 1e-10),
        Check::new("inner products symmetric", symmetry, 1e-12),
        Check::new("inner products positive", positivity.max(0.0), 1e-12),
    ]
}

/// Drift-group invariants on `samples` random fields and the group times
/// `±0.1, ±1, ±5`.
pub fn group_suite(
    grid: &GridDomain,
    drift: &DriftField,
    group: &DriftGroup,
    samples: usize,
    seed: u64,
) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut skew, mut iso, mut adjoint, mut law) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..samples {
        let phi = random_field(grid, &mut rng);
        let psi = random_field(grid, &mut rng);
        let n_phi = grid.norm(&phi, Metric::Hminus1);
        let n_psi = grid.norm(&psi, Metric::Hminus1);
        let b_phi = group.generator_apply(&phi);
        skew = skew.max(grid.inner_unchecked(&b_phi, &phi, Metric::Hminus1).abs() / (n_phi * n_phi));
        let prep_phi = group.prepare(&phi);
        let prep_psi = group.prepare(&psi);
        for &s in &GROUP_TIMES {
            let e_phi = group.apply_prepared(s, &prep_phi);
            iso = iso.max((grid.norm(&e_phi, Metric::Hminus1) - n_phi).abs() / n_phi);
            let lhs = grid.inner_unchecked(&e_phi, &psi, Metric::Hminus1);
            let rhs = grid.inner_unchecked(&phi, &group.apply_prepared(-s, &prep_psi), Metric::Hminus1);
            adjoint = adjoint.max((lhs - rhs).abs() / (n_phi * n_psi));
            let two = group.apply(0.5 * s, &group.apply(0.5 * s, &phi));
            law = law.max(grid.norm(&(&two - &e_phi), Metric::Hminus1) / n_phi);
        }
    }
    let dim = grid.dim();
    let mut bound: f64 = f64::NEG_INFINITY;
    for i in 0..=8 {
        let s = -1.0 + 0.25 * i as f64;
        let m = group.dense_exp(s) - DMatrix::identity(dim, dim);
        let lhs = group.hminus1_to_l2_norm(&m);
        let rhs = (s.abs() * group.op_norm()).exp_m1();
        bound = bound.max(lhs - rhs);
    }
    vec![
        Check::new("skew form <B phi, phi>_H-1 = 0 (relative)", skew, IDENTITY_TOL),
        Check::new("isometry of e^{sB} in H-1 (relative)", iso, IDENTITY_TOL),
        Check::new("adjoint law <e^{sB} phi, psi> = <phi, e^{-sB} psi>", adjoint, IDENTITY_TOL),
        Check::new("group law e^{sB/2} e^{sB/2} = e^{sB}", law, IDENTITY_TOL),
        Check::new(
            "|e^{sB} - I|_{H-1 -> L2} <= e^{|s||B|} - 1 on s in [-1, 1]",
            bound.max(0.0),
            1e-10,
        ),
        Check::new("drift boundary normal component", drift.max_boundary_normal(grid), 1e-12),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{build_drift, build_group, StreamFunction};
    use crate::spatial::build_grid;

    #[test]
    fn suites_pass_on_small_grid() {
        let g = build_grid(6).unwrap();
        for c in spatial_suite(&g, 10, 1) {
            assert!(c.pass, "{c:?}");
        }
        for stream in [StreamFunction::sin_sin(1.5), StreamFunction::Modulated { amplitude: 1.0 }] {
            let d = build_drift(&g, stream).unwrap();
            let grp = build_group(&g, &d).unwrap();
            for c in group_suite(&g, &d, &grp, 10, 2) {
                assert!(c.pass, "{c:?}");
            }
        }
    }

    #[test]
    fn check_reports_slack() {
        let c = Check::new("x", 0.25, 1.0);
        assert!(c.pass);
        assert_eq!(c.slack(), 0.75);
        assert!(!Check::new("nan", f64::NAN, 1.0).pass);
    }
}
