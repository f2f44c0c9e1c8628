//! Exponential stabilisation of the porous-media component through the
//! decay constraint `‖x‖²_{H⁻¹} ≤ y`, `y' = −c y`.

use std::io::Write;

use nalgebra::DVector;
use serde::Serialize;

use crate::drift::{BrownianPath, DriftGroup};
use crate::dynamics::{recover_original, solve_rescaled, CoupledState, ModelSpec, Schedule, Setup, Window};
use crate::error::{Error, Result};
use crate::model::{
    make_beta, make_coupling, BetaKind, Component, ControlSet, CouplingFamily, Nonlinearity, Space,
    Target,
};
use crate::spatial::{Field, GridDomain, Metric};

pub const TOL_FEASIBLE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct StabilizationConfig {
    pub c: f64,
    /// Spectral truncation level `J`.
    pub levels: usize,
    pub setup: Setup,
}

impl StabilizationConfig {
    pub fn new(
        grid: GridDomain,
        group: DriftGroup,
        beta1: Nonlinearity,
        f1: CouplingFamily,
        controls: ControlSet,
        c: f64,
        levels: usize,
    ) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidParameter(format!("decay rate must be positive, got {c}")));
        }
        if levels == 0 || levels > grid.dim() {
            return Err(Error::InvalidParameter(format!(
                "truncation level {levels} outside 1..={}",
                grid.dim()
            )));
        }
        let f1 = make_coupling(f1, Target::First, &grid, &Space::Scalar, &controls)?;
        let f2 = make_coupling(
            CouplingFamily::Decay { c },
            Target::Second,
            &grid,
            &Space::Scalar,
            &controls,
        )?;
        let model = ModelSpec {
            beta1,
            beta2: make_beta(BetaKind::Zero, true)?,
            f1,
            f2,
            controls,
        };
        let setup = Setup::new(grid, group, Space::Scalar, None, model)?;
        Ok(Self { c, levels, setup })
    }

    fn grid(&self) -> &GridDomain {
        &self.setup.grid1
    }

    /// Storage positions of the first `levels` modes in increasing λ.
    fn mode_slots(&self) -> Vec<(usize, f64)> {
        let g = self.grid();
        let n = g.n_per_dim();
        (0..self.levels)
            .map(|idx| {
                let (j, k) = g.mode(idx);
                ((j - 1) + n * (k - 1), g.eigenvalue(idx))
            })
            .collect()
    }

    fn f1_coords(&self, x: &Field, eta: f64, u: usize) -> DVector<f64> {
        let g = self.grid();
        let point = self.setup.model.controls.point(u);
        match self.setup.model.f1.eval(x, &Component::Scalar(eta), point, &Space::Grid(g.clone())) {
            Component::Field(f) => g.to_metric_coords(&f),
            Component::Scalar(_) => unreachable!("first coupling is field valued"),
        }
    }

    /// `ψ_j(x, u)` for `j = 1..=J`.
    pub fn psi_all(&self, x: &Field, u: usize) -> Vec<f64> {
        let slots = self.mode_slots();
        let w = self.grid().to_metric_coords(x);
        let wb = self.grid().to_metric_coords(&self.setup.model.beta1.apply(x));
        let f1_zero = self.setup.model.f1.is_zero();
        let mut partial = 0.0;
        let mut out = Vec::with_capacity(slots.len());
        for j in 0..slots.len() {
            let (slot, _) = slots[j];
            partial += w[slot] * w[slot];
            let mut sum = 0.0;
            let wf = (!f1_zero).then(|| self.f1_coords(x, partial, u));
            for &(s, lam) in &slots[..=j] {
                let mut v = -lam * wb[s];
                if let Some(wf) = &wf {
                    v += wf[s];
                }
                sum += w[s] * v;
            }
            out.push(2.0 * sum + 2.0 * self.c * partial);
        }
        out
    }
}

/// `ψ_j(x, u)` with 1-based level `j`.
pub fn psi_j(x: &Field, u: usize, j: usize, cfg: &StabilizationConfig) -> Result<f64> {
    if j == 0 || j > cfg.levels {
        return Err(Error::InvalidParameter(format!(
            "level {j} outside 1..={}",
            cfg.levels
        )));
    }
    if u >= cfg.setup.model.controls.len() {
        return Err(Error::InvalidParameter(format!("control index {u} out of range")));
    }
    Ok(cfg.psi_all(x, u)[j - 1])
}

fn max_psi(x: &Field, u: usize, cfg: &StabilizationConfig) -> f64 {
    cfg.psi_all(x, u).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// `{u : max_{j ≤ J} ψ_j(x, u) ≤ 1e-10}`, possibly empty.
pub fn feasible_controls(x: &Field, cfg: &StabilizationConfig) -> Vec<usize> {
    (0..cfg.setup.model.controls.len())
        .filter(|&u| max_psi(x, u, cfg) <= TOL_FEASIBLE)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Feedback {
    pub control: usize,
    pub max_psi: f64,
    pub feasible: bool,
}

/// `argmin_u max_j ψ_j(x, u)`, lowest index on ties.
pub fn select_feedback(x: &Field, cfg: &StabilizationConfig) -> Feedback {
    let mut best = Feedback {
        control: 0,
        max_psi: f64::INFINITY,
        feasible: false,
    };
    for u in 0..cfg.setup.model.controls.len() {
        let m = max_psi(x, u, cfg);
        if m < best.max_psi {
            best = Feedback {
                control: u,
                max_psi: m,
                feasible: false,
            };
        }
    }
    best.feasible = best.max_psi <= TOL_FEASIBLE;
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residual {
    pub value: f64,
    pub control: usize,
    /// Part of the spectral sum beyond level `J`.
    pub tail: f64,
}

fn residual_terms(x: &Field, u: usize, second: f64, cfg: &StabilizationConfig) -> (f64, f64) {
    let g = cfg.grid();
    let w = g.to_metric_coords(x);
    let wb = g.to_metric_coords(&cfg.setup.model.beta1.apply(x));
    let wf = cfg.f1_coords(x, second, u);
    let lam = g.spectral_eigenvalues();
    let slots = cfg.mode_slots();
    let mut in_range = vec![false; w.len()];
    let (mut head, mut tail) = (0.0, 0.0);
    for &(s, _) in &slots {
        in_range[s] = true;
    }
    for s in 0..w.len() {
        let v = w[s] * (-lam[s] * wb[s] + wf[s]);
        if in_range[s] {
            head += v;
        } else {
            tail += v;
        }
    }
    (2.0 * head, 2.0 * tail)
}

/// `inf_u {2 Σ_{k≤J} ⟨x, ê_k⟩⟨−λ_k β(x) + f₁(x, ‖x‖², u), ê_k⟩ + 2c‖x‖²}`.
pub fn necessary_residual(x: &Field, cfg: &StabilizationConfig) -> Residual {
    let norm_sq = cfg.grid().norm_sq(x, Metric::Hminus1);
    best_residual(cfg, |u| {
        let (head, tail) = residual_terms(x, u, norm_sq, cfg);
        (head + 2.0 * cfg.c * norm_sq, tail)
    })
}

/// Variant with the second argument and the decay term truncated at `J`,
/// i.e. `inf_u ψ_J(x, u)`.
pub fn necessary_residual_truncated(x: &Field, cfg: &StabilizationConfig) -> Residual {
    let w = cfg.grid().to_metric_coords(x);
    let partial: f64 = cfg.mode_slots().iter().map(|&(s, _)| w[s] * w[s]).sum();
    best_residual(cfg, |u| {
        let (head, tail) = residual_terms(x, u, partial, cfg);
        (head + 2.0 * cfg.c * partial, tail)
    })
}

fn best_residual(cfg: &StabilizationConfig, eval: impl Fn(usize) -> (f64, f64)) -> Residual {
    let mut best = Residual {
        value: f64::INFINITY,
        control: 0,
        tail: 0.0,
    };
    for u in 0..cfg.setup.model.controls.len() {
        let (value, tail) = eval(u);
        if value < best.value {
            best = Residual {
                value,
                control: u,
                tail,
            };
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayRow {
    pub s: f64,
    pub x_norm_sq: f64,
    pub bound: f64,
    pub margin: f64,
    pub control: usize,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub c: f64,
    pub eta0: f64,
    pub levels: usize,
    pub tol_decay: f64,
    pub rows: Vec<DecayRow>,
    pub pass: bool,
    /// `(node, s, margin)` of the first node with `margin < −tol_decay`.
    pub first_violation: Option<(usize, f64, f64)>,
    pub infeasible_nodes: usize,
    /// `max_s |‖X(s)‖ − ‖x(s)‖|` in H⁻¹.
    pub isometry_defect: f64,
    pub path_seed: u64,
}

impl DecayReport {
    pub fn min_margin(&self) -> f64 {
        self.rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "x_norm_sq", "bound", "margin", "control", "feasible"])
            .map_err(crate::dynamics::csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.s.to_string(),
                r.x_norm_sq.to_string(),
                r.bound.to_string(),
                r.margin.to_string(),
                r.control.to_string(),
                u8::from(r.feasible).to_string(),
            ])
            .map_err(crate::dynamics::csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Closed loop under `select_feedback`, checking
/// `‖x(s)‖²_{H⁻¹} ≤ η₀ e^{−cs}` at every node.
pub fn run_stabilization(
    cfg: &StabilizationConfig,
    xi: &Field,
    eta0: Option<f64>,
    horizon: f64,
    path: &BrownianPath,
) -> Result<DecayReport> {
    let g = cfg.grid();
    let norm0 = g.norm_sq(xi, Metric::Hminus1);
    let eta0 = eta0.unwrap_or(norm0);
    if norm0 > eta0 * (1.0 + 1e-12) {
        return Err(Error::NotInConstraint {
            distance: norm0 - eta0,
        });
    }
    let steps = path
        .index_of(path.t0 + horizon)
        .filter(|&m| m > 0)
        .ok_or_else(|| {
            Error::InvalidParameter(format!(
                "horizon {horizon} is not a positive multiple of the path step {}",
                path.step
            ))
        })?;
    let init = CoupledState {
        x: xi.clone(),
        y: Component::Scalar(eta0),
    };
    let feedback = |z: &CoupledState| select_feedback(&z.x, cfg).control;
    let traj = solve_rescaled(
        &cfg.setup,
        path,
        Window::from_origin(steps, 1),
        &init,
        &Schedule::Feedback(&feedback),
        1,
    )?;
    let tol_decay = 10.0 * path.step * 2.0 * cfg.setup.model.f1.lip() * eta0;
    let originals = recover_original(&cfg.setup, &traj, path);
    let mut rows = Vec::with_capacity(traj.states.len());
    let mut first_violation = None;
    let mut infeasible_nodes = 0;
    let mut isometry_defect: f64 = 0.0;
    for (m, z) in traj.states.iter().enumerate() {
        let s = traj.times[m] - path.t0;
        let x_norm_sq = g.norm_sq(&z.x, Metric::Hminus1);
        let bound = eta0 * (-cfg.c * s).exp();
        let margin = bound - x_norm_sq;
        let fb = select_feedback(&z.x, cfg);
        if !fb.feasible {
            infeasible_nodes += 1;
        }
        if first_violation.is_none() && margin < -tol_decay {
            first_violation = Some((m, s, margin));
        }
        let big = g.norm(&originals[m].x, Metric::Hminus1);
        isometry_defect = isometry_defect.max((big - x_norm_sq.sqrt()).abs());
        rows.push(DecayRow {
            s,
            x_norm_sq,
            bound,
            margin,
            control: traj.controls.get(m).copied().unwrap_or(fb.control),
            feasible: fb.feasible,
        });
    }
    Ok(DecayReport {
        c: cfg.c,
        eta0,
        levels: cfg.levels,
        tol_decay,
        pass: first_violation.is_none(),
        first_violation,
        infeasible_nodes,
        isometry_defect,
        rows,
        path_seed: path.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{build_drift, build_group, sample_brownian, StreamFunction};
    use crate::dynamics::setup_stable_step;
    use crate::model::LinearPart;
    use crate::spatial::build_grid;
    use proptest::prelude::*;

    fn config(n: usize, c: f64, f1: CouplingFamily, controls: ControlSet, amp: f64) -> StabilizationConfig {
        let grid = build_grid(n).unwrap();
        let stream = if amp == 0.0 {
            StreamFunction::Zero
        } else {
            StreamFunction::sin_sin(amp)
        };
        let group = build_group(&grid, &build_drift(&grid, stream).unwrap()).unwrap();
        let beta = make_beta(BetaKind::Linear { slope: 1.0 }, false).unwrap();
        let levels = grid.dim();
        StabilizationConfig::new(grid, group, beta, f1, controls, c, levels).unwrap()
    }

    fn linear(n: usize, c: f64) -> StabilizationConfig {
        config(n, c, CouplingFamily::Zero, ControlSet::singleton_zero(1), 0.0)
    }

    fn mixed(g: &GridDomain) -> Field {
        &(&g.eigenvector_jk(1, 1) + &(&g.eigenvector_jk(2, 1) * 0.5)) + &(&g.eigenvector_jk(3, 2) * -0.25)
    }

    #[test]
    fn psi_vanishes_at_zero() {
        let cfg = config(
            6,
            3.0,
            CouplingFamily::FeedbackDamping {
                kappa: 0.0,
                profile: build_grid(6).unwrap().eigenvector_jk(1, 1),
            },
            ControlSet::new(vec![vec![0.0], vec![2.0]]).unwrap(),
            1.0,
        );
        let z = cfg.grid().zeros();
        for u in 0..2 {
            assert!(cfg.psi_all(&z, u).iter().all(|v| *v == 0.0));
        }
        assert_eq!(feasible_controls(&z, &cfg), vec![0, 1]);
        assert_eq!(select_feedback(&z, &cfg).control, 0);
        assert_eq!(necessary_residual(&z, &cfg).value, 0.0);
    }

    #[test]
    fn psi_matches_spectral_form() {
        let cfg = linear(6, 7.0);
        let g = cfg.grid();
        let x = mixed(g);
        let psi = cfg.psi_all(&x, 0);
        let c = g.to_spectral(&x);
        let n = g.n_per_dim();
        let h = g.spacing();
        let mut acc = 0.0;
        for idx in 0..g.dim() {
            let (j, k) = g.mode(idx);
            let lam = g.eigenvalue(idx);
            let w2 = h * h * c[(j - 1) + n * (k - 1)].powi(2) / lam;
            acc += 2.0 * (cfg.c - lam) * w2;
            assert!((psi[idx] - acc).abs() < 1e-12 * acc.abs().max(1.0), "{idx}");
        }
    }

    #[test]
    fn single_mode_cancellation_and_threshold() {
        let g = build_grid(6).unwrap();
        let lam = g.lambda_min();
        let e = g.eigenvector_jk(1, 1);
        let at = linear(6, lam);
        assert!(at.psi_all(&e, 0).iter().all(|v| v.abs() < 1e-10));
        let below = linear(6, 0.9 * lam);
        assert_eq!(feasible_controls(&mixed(&g), &below), vec![0]);
        let above = linear(6, 1.1 * lam);
        assert!(feasible_controls(&e, &above).is_empty());
        let far = linear(6, 2.0 * g.eigenvalue_jk(3, 3));
        assert!(feasible_controls(&e, &far).is_empty());
        assert!(psi_j(&e, 0, 1, &far).unwrap() > 0.0);
        assert!(psi_j(&e, 0, 0, &far).is_err());
        assert!(psi_j(&e, 0, g.dim() + 1, &far).is_err());
    }

    #[test]
    fn residual_closed_form_on_first_mode() {
        let g = build_grid(6).unwrap();
        let lam = g.lambda_min();
        let c = 0.5 * lam;
        let cfg = linear(6, c);
        let e = g.eigenvector_jk(1, 1);
        let r = necessary_residual(&e, &cfg);
        let expected = 2.0 * (c - lam) / lam;
        assert!((r.value - expected).abs() < 1e-12, "{} vs {expected}", r.value);
        assert!(r.value < 0.0);
        assert_eq!(r.tail, 0.0);
    }

    #[test]
    fn residual_is_bounded_by_max_psi() {
        let grid = build_grid(5).unwrap();
        let profile = grid.eigenvector_jk(2, 1);
        let cfg = config(
            5,
            4.0,
            CouplingFamily::FeedbackDamping { kappa: 0.7, profile },
            ControlSet::new(vec![vec![0.0], vec![3.0]]).unwrap(),
            1.0,
        );
        let x = mixed(cfg.grid());
        for u in 0..2 {
            let full = residual_terms(&x, u, cfg.grid().norm_sq(&x, Metric::Hminus1), &cfg).0
                + 2.0 * cfg.c * cfg.grid().norm_sq(&x, Metric::Hminus1);
            assert!(full <= max_psi(&x, u, &cfg) + 1e-12);
        }
        let trunc = necessary_residual_truncated(&x, &cfg);
        let full = necessary_residual(&x, &cfg);
        assert!((trunc.value - full.value).abs() < 1e-10);
    }

    #[test]
    fn truncated_levels_report_tail() {
        let grid = build_grid(5).unwrap();
        let group = build_group(&grid, &build_drift(&grid, StreamFunction::Zero).unwrap()).unwrap();
        let beta = make_beta(BetaKind::Linear { slope: 1.0 }, false).unwrap();
        let cfg = StabilizationConfig::new(
            grid.clone(),
            group,
            beta,
            CouplingFamily::Zero,
            ControlSet::singleton_zero(1),
            1.0,
            3,
        )
        .unwrap();
        let x = mixed(&grid);
        let r = necessary_residual(&x, &cfg);
        assert!(r.tail < 0.0);
        assert_eq!(cfg.psi_all(&x, 0).len(), 3);
    }

    #[test]
    fn damping_control_is_selected() {
        let grid = build_grid(5).unwrap();
        let profile = grid.zeros();
        let cfg = config(
            5,
            30.0,
            CouplingFamily::FeedbackDamping { kappa: 0.0, profile },
            ControlSet::new(vec![vec![0.0], vec![5.0]]).unwrap(),
            1.0,
        );
        let x = mixed(cfg.grid());
        assert_eq!(select_feedback(&x, &cfg).control, 1);
        let indifferent = config(
            5,
            30.0,
            CouplingFamily::Affine {
                mx: LinearPart::Scaled(-1.0),
                my: LinearPart::Zero,
                gains: vec![],
                offset: None,
            },
            ControlSet::new(vec![vec![0.0], vec![5.0]]).unwrap(),
            1.0,
        );
        assert_eq!(select_feedback(&x, &indifferent).control, 0);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let grid = build_grid(4).unwrap();
        let group = build_group(&grid, &build_drift(&grid, StreamFunction::Zero).unwrap()).unwrap();
        let beta = make_beta(BetaKind::Linear { slope: 1.0 }, false).unwrap();
        let mk = |c: f64, levels: usize| {
            StabilizationConfig::new(
                grid.clone(),
                group.clone(),
                beta.clone(),
                CouplingFamily::Zero,
                ControlSet::singleton_zero(1),
                c,
                levels,
            )
        };
        assert!(mk(0.0, 4).is_err());
        assert!(mk(1.0, 0).is_err());
        assert!(mk(1.0, 17).is_err());
        assert!(mk(1.0, 16).is_ok());
    }

    fn run(cfg: &StabilizationConfig, xi: &Field, steps: usize, seed: u64) -> DecayReport {
        let dt = setup_stable_step(&cfg.setup);
        let path = sample_brownian(0.0, steps as f64 * dt, dt, seed).unwrap();
        run_stabilization(cfg, xi, None, steps as f64 * dt, &path).unwrap()
    }

    #[test]
    fn zero_start_passes() {
        let cfg = config(5, 50.0, CouplingFamily::Zero, ControlSet::singleton_zero(1), 1.0);
        let z = cfg.grid().zeros();
        let dt = setup_stable_step(&cfg.setup);
        let path = sample_brownian(0.0, 50.0 * dt, dt, 1).unwrap();
        let rep = run_stabilization(&cfg, &z, Some(1.0), 50.0 * dt, &path).unwrap();
        assert!(rep.pass);
        assert!(rep.rows.iter().all(|r| r.margin >= 0.0 && r.x_norm_sq == 0.0));
    }

    #[test]
    fn dichotomy_on_linear_model() {
        let g = build_grid(6).unwrap();
        let lam = g.lambda_min();
        let xi = g.eigenvector_jk(1, 1);
        let good = config(6, 0.5 * lam, CouplingFamily::Zero, ControlSet::singleton_zero(1), 1.0);
        let rep = run(&good, &xi, 400, 4);
        assert!(rep.pass);
        assert!(rep.isometry_defect < 1e-9);
        assert_eq!(rep.infeasible_nodes, 0);
        let bad = config(6, 4.0 * g.lambda_max(), CouplingFamily::Zero, ControlSet::singleton_zero(1), 1.0);
        let rep = run(&bad, &xi, 400, 4);
        assert!(!rep.pass);
        let (node, _, margin) = rep.first_violation.unwrap();
        assert_eq!(node, 1);
        assert!(margin < 0.0);
        assert!(rep.infeasible_nodes > 0);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("s,x_norm_sq,bound,margin,control,feasible\n"));
        assert_eq!(text.lines().count(), 402);
    }

    #[test]
    fn start_outside_constraint_is_rejected() {
        let cfg = linear(4, 1.0);
        let xi = cfg.grid().eigenvector_jk(1, 1);
        let dt = setup_stable_step(&cfg.setup);
        let path = sample_brownian(0.0, 10.0 * dt, dt, 1).unwrap();
        assert!(matches!(
            run_stabilization(&cfg, &xi, Some(1e-6), 10.0 * dt, &path),
            Err(Error::NotInConstraint { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn psi_scales_quadratically(gamma in 0.01f64..20.0, a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let cfg = linear(5, 40.0);
            let g = cfg.grid();
            let x = &(&g.eigenvector_jk(1, 1) * a) + &(&g.eigenvector_jk(2, 3) * b);
            let p1 = cfg.psi_all(&x, 0);
            let p2 = cfg.psi_all(&(&x * gamma), 0);
            for (u, v) in p1.iter().zip(&p2) {
                prop_assert!((v - gamma * gamma * u).abs() <= 1e-10 * (gamma * gamma * u.abs()).max(1e-12));
            }
            prop_assert_eq!(feasible_controls(&x, &cfg), feasible_controls(&(&x * gamma), &cfg));
        }
    }

    #[test]
    fn smaller_rate_never_turns_pass_into_fail() {
        let g = build_grid(5).unwrap();
        let lam = g.lambda_min();
        let xi = &g.eigenvector_jk(1, 1) + &(&g.eigenvector_jk(2, 2) * 0.3);
        let mut passed_before = false;
        for factor in [8.0, 4.0, 2.5, 2.0, 1.5, 1.0, 0.5, 0.1] {
            let cfg = config(5, factor * lam, CouplingFamily::Zero, ControlSet::singleton_zero(1), 1.0);
            let rep = run(&cfg, &xi, 200, 9);
            assert!(!passed_before || rep.pass, "c = {factor} λ₁₁");
            passed_before |= rep.pass;
        }
        assert!(passed_before);
    }
}
