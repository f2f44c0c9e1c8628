//! Constraint sets, quasi-tangency profiles, the greedy construction of
//! constrained ε-approximate solutions with its clause-by-clause validator,
//! and the near-viability gap.

use serde::{Deserialize, Serialize};

use crate::drift::{sample_brownian, sample_seed, BrownianPath};
use crate::dynamics::{
    solve_euler_fundamental, solve_frozen, solve_rescaled, CoupledState, Schedule, Setup, Window,
};
use crate::error::{Error, Result};
use crate::model::{Component, Space};
use crate::spatial::{Field, Metric};
use crate::stats::{loglog_fit, mean_stderr};

/// Built-in constraint sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConstraintKind {
    WholeSpace,
    /// `{(ξ, η) : ‖ξ‖²_{H⁻¹} ≤ η}` with a scalar second component.
    DecayEpigraph,
    /// `{‖x‖² + ‖y‖² ≤ radius²}` in the product H⁻¹ metric.
    CenteredBall { radius: f64 },
}

#[derive(Debug, Clone)]
pub struct ConstraintOracle {
    kind: ConstraintKind,
    grid: crate::spatial::GridDomain,
    space2: Space,
}

const MEMBERSHIP_TOL: f64 = 1e-12;

pub fn make_constraint(kind: ConstraintKind, setup: &Setup) -> Result<ConstraintOracle> {
    match &kind {
        ConstraintKind::WholeSpace => {}
        ConstraintKind::DecayEpigraph => {
            if !setup.space2.is_scalar() {
                return Err(Error::InvalidParameter(
                    "the decay epigraph needs a scalar second component".into(),
                ));
            }
        }
        ConstraintKind::CenteredBall { radius } => {
            if !(*radius > 0.0) || !radius.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "ball radius must be positive, got {radius}"
                )));
            }
        }
    }
    Ok(ConstraintOracle {
        kind,
        grid: setup.grid1.clone(),
        space2: setup.space2.clone(),
    })
}

/// Positive root of `2ρ³ + (1 − 2η)ρ − a = 0` for `a > 0`.
fn epigraph_radius(a: f64, eta: f64) -> f64 {
    let f = |r: f64| 2.0 * r * r * r + (1.0 - 2.0 * eta) * r - a;
    let mut hi = a.max(1.0);
    while f(hi) <= 0.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

impl ConstraintOracle {
    pub fn kind(&self) -> &ConstraintKind {
        &self.kind
    }

    fn norm_x(&self, x: &Field) -> f64 {
        self.grid.norm(x, Metric::Hminus1)
    }

    /// Nearest point of K in the product H⁻¹ metric.
    pub fn project(&self, z: &CoupledState) -> CoupledState {
        match &self.kind {
            ConstraintKind::WholeSpace => z.clone(),
            ConstraintKind::DecayEpigraph => {
                let eta = z.y.as_scalar().expect("scalar second component");
                let a = self.norm_x(&z.x);
                if a * a <= eta {
                    return z.clone();
                }
                if a == 0.0 {
                    // only reachable for η < 0: the nearest point is the origin
                    return CoupledState {
                        x: z.x.clone(),
                        y: Component::Scalar(0.0),
                    };
                }
                let rho = epigraph_radius(a, eta);
                CoupledState {
                    x: &z.x * (rho / a),
                    y: Component::Scalar(rho * rho),
                }
            }
            ConstraintKind::CenteredBall { radius } => {
                let n = (self.norm_x(&z.x).powi(2) + self.space2.norm_sq(&z.y)).sqrt();
                if n <= *radius {
                    z.clone()
                } else {
                    let s = radius / n;
                    CoupledState {
                        x: &z.x * s,
                        y: z.y.scaled(s),
                    }
                }
            }
        }
    }

    pub fn distance(&self, z: &CoupledState) -> f64 {
        let p = self.project(z);
        (self.grid.norm_sq(&(&z.x - &p.x), Metric::Hminus1)
            + self.space2.norm_sq(&z.y.difference(&p.y)))
        .sqrt()
    }

    pub fn contains(&self, z: &CoupledState) -> bool {
        match &self.kind {
            ConstraintKind::WholeSpace => true,
            ConstraintKind::DecayEpigraph => {
                let eta = z.y.as_scalar().expect("scalar second component");
                self.norm_x(&z.x).powi(2) <= eta + MEMBERSHIP_TOL * eta.abs().max(1.0)
            }
            ConstraintKind::CenteredBall { radius } => {
                let n = (self.norm_x(&z.x).powi(2) + self.space2.norm_sq(&z.y)).sqrt();
                n <= radius * (1.0 + MEMBERSHIP_TOL)
            }
        }
    }

    fn require(&self, z: &CoupledState) -> Result<()> {
        if self.contains(z) {
            Ok(())
        } else {
            Err(Error::NotInConstraint {
                distance: self.distance(z),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TangencyProfile {
    pub epsilons: Vec<f64>,
    /// `min_u Q(ε, u)`
    pub q: Vec<f64>,
    pub best_control: Vec<usize>,
    /// `Q(ε, u)` indexed `[ε][u]`.
    pub q_by_control: Vec<Vec<f64>>,
    /// Linear extrapolation of `Q` to `ε = 0` from the two smallest ε,
    /// clamped to `[0, Q(ε_min)]`.
    pub liminf_estimate: f64,
    pub n_mc: usize,
    pub seed: u64,
}

impl TangencyProfile {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epsilon", "q", "argmin_control"])
            .map_err(crate::dynamics::csv_err)?;
        for ((e, q), u) in self.epsilons.iter().zip(&self.q).zip(&self.best_control) {
            w.write_record([e.to_string(), q.to_string(), u.to_string()])
                .map_err(crate::dynamics::csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn steps_for(eps: f64, step: f64) -> Result<usize> {
    let r = eps / step;
    if !(eps > 0.0) || (r - r.round()).abs() > 1e-9 * r.max(1.0) || r.round() < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "ε = {eps} is not a positive multiple of the step {step}"
        )));
    }
    Ok(r.round() as usize)
}

/// `Q(ε) = min_u (1/ε²) E[d²((x̂, ŷ)(t+ε), K)]` with constant controls.
///
/// The solver step is shrunk to divide the smallest ε; every other ε must
/// be a multiple of it.
pub fn tangency_profile(
    k: &ConstraintOracle,
    setup: &Setup,
    init: &CoupledState,
    epsilons: &[f64],
    n_mc: usize,
    step: f64,
    seed: u64,
) -> Result<TangencyProfile> {
    k.require(init)?;
    if epsilons.is_empty() || n_mc == 0 {
        return Err(Error::InvalidParameter(
            "tangency profile needs epsilons and samples".into(),
        ));
    }
    let eps_min = epsilons.iter().copied().fold(f64::INFINITY, f64::min);
    if !(eps_min > 0.0) || !(step > 0.0) {
        return Err(Error::InvalidParameter(
            "tangency profile needs positive epsilons and step".into(),
        ));
    }
    let step = eps_min / (eps_min / step * (1.0 - 1e-12)).ceil();
    let nodes: Vec<usize> = epsilons
        .iter()
        .map(|&e| steps_for(e, step))
        .collect::<Result<_>>()?;
    let max_node = *nodes.iter().max().unwrap();
    let every = nodes.iter().fold(0, |g, &n| gcd(g, n));
    let n_u = setup.model.controls.len();
    let mut sums = vec![vec![0.0; n_u]; epsilons.len()];
    for i in 0..n_mc {
        let path = sample_brownian(0.0, max_node as f64 * step, step, sample_seed(seed, i as u64))?;
        for (u, _) in setup.model.controls.points().iter().enumerate() {
            let tr = solve_euler_fundamental(
                setup,
                &path,
                Window::from_origin(max_node, 1),
                init,
                &Schedule::Constant(u),
                every,
            )?;
            for (j, &m) in nodes.iter().enumerate() {
                let pos = tr.recorded.iter().position(|&r| r == m).unwrap();
                sums[j][u] += k.distance(&tr.states[pos]).powi(2);
            }
        }
    }
    let q_by_control: Vec<Vec<f64>> = sums
        .iter()
        .zip(epsilons)
        .map(|(row, e)| row.iter().map(|s| s / n_mc as f64 / (e * e)).collect())
        .collect();
    let mut q = Vec::new();
    let mut best = Vec::new();
    for row in &q_by_control {
        let (bi, bv) = row
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bv), (i, v)| if *v < bv { (i, *v) } else { (bi, bv) });
        q.push(bv);
        best.push(bi);
    }
    let mut order: Vec<usize> = (0..epsilons.len()).collect();
    order.sort_by(|a, b| epsilons[*a].total_cmp(&epsilons[*b]));
    let q_min = q[order[0]];
    let liminf_estimate = if order.len() >= 2 {
        let (a, b) = (order[0], order[1]);
        let slope = (q[b] - q[a]) / (epsilons[b] - epsilons[a]);
        (q[a] - slope * epsilons[a]).clamp(0.0, q_min)
    } else {
        q_min
    };
    Ok(TangencyProfile {
        epsilons: epsilons.to_vec(),
        q,
        best_control: best,
        q_by_control,
        liminf_estimate,
        n_mc,
        seed,
    })
}

/// One subinterval `[t_k, t_k + δ_k]` of an ε-approximate record.
#[derive(Debug, Clone, Serialize)]
pub struct Segment {
    /// Path index of `t_k`.
    pub start_index: usize,
    pub t_start: f64,
    pub delta: f64,
    pub steps: usize,
    pub control: usize,
    /// `φ = p / δ` on the subinterval.
    #[serde(skip)]
    pub correction: (Field, Component),
    /// `∫ ‖φ₁‖² + ‖φ₂‖²` over the subinterval.
    pub correction_energy: f64,
    /// Distance of the corrected endpoint to K before snapping onto K.
    pub jump: f64,
    /// `max ‖X(τ(s)) − X(s)‖² + ‖Y(τ(s)) − Y(s)‖²` on the subinterval.
    pub delay_defect: f64,
    pub correction_iterations: usize,
}

/// Constrained ε-approximate solution on one Brownian path.
#[derive(Debug, Clone)]
pub struct EpsApproxRecord {
    pub t: f64,
    pub t_bar: f64,
    pub horizon: f64,
    pub eps: f64,
    pub step: f64,
    pub path: BrownianPath,
    pub segments: Vec<Segment>,
    /// Solver node times on `[t, T̄]`.
    pub times: Vec<f64>,
    /// `τ` at each node.
    pub tau: Vec<f64>,
    /// Control index in force after each node.
    pub controls: Vec<usize>,
    /// `(X, Y)` at each node (rescaled variables).
    pub states: Vec<CoupledState>,
    pub complete: bool,
    pub diagnostic: Option<String>,
}

impl EpsApproxRecord {
    pub fn correction_energy(&self) -> f64 {
        self.segments.iter().map(|s| s.correction_energy).sum()
    }

    /// Copy with every correction multiplied by `factor`.
    pub fn with_scaled_corrections(&self, factor: f64) -> Self {
        let mut rec = self.clone();
        for s in &mut rec.segments {
            s.correction.0.scale(factor);
            s.correction.1 = s.correction.1.scaled(factor);
            s.correction_energy *= factor * factor;
        }
        rec
    }

    pub fn to_json(&self, report: Option<&ClauseReport>) -> serde_json::Value {
        serde_json::json!({
            "t": self.t,
            "t_bar": self.t_bar,
            "horizon": self.horizon,
            "eps": self.eps,
            "step": self.step,
            "path_seed": self.path.seed,
            "complete": self.complete,
            "diagnostic": self.diagnostic,
            "correction_energy": self.correction_energy(),
            "segments": self.segments,
            "times": self.times,
            "tau": self.tau,
            "controls": self.controls,
            "clauses": report,
        })
    }
}

const MAX_CORRECTION_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsApproxOptions {
    pub t: f64,
    pub horizon: f64,
    pub eps: f64,
    pub step: f64,
    pub seed: u64,
}

/// Path on `[t, T]` whose step is the largest divisor of `T − t` not
/// exceeding `step`.
fn horizon_path(t: f64, horizon: f64, step: f64, seed: u64) -> Result<BrownianPath> {
    let r = (horizon - t) / step;
    let m = if (r - r.round()).abs() < 1e-9 * r.max(1.0) {
        r.round()
    } else {
        r.ceil()
    };
    sample_brownian(t, horizon, (horizon - t) / m, seed)
}

struct Trial {
    control: usize,
    correction: (Field, Component),
    energy: f64,
    jump: f64,
    iterations: usize,
    states: Vec<CoupledState>,
    endpoint: CoupledState,
}

fn zero_correction(setup: &Setup) -> (Field, Component) {
    (setup.grid1.zeros(), setup.space2.zero())
}

/// Greedy construction: at each node pick the control whose uncorrected
/// endpoint is nearest to K, correct it back into K with a constant `φ`,
/// and halve the step until the correction energy and the delay budget
/// hold on that step.
pub fn construct_eps_approx(
    k: &ConstraintOracle,
    setup: &Setup,
    init: &CoupledState,
    opts: &EpsApproxOptions,
) -> Result<EpsApproxRecord> {
    k.require(init)?;
    let EpsApproxOptions {
        t,
        horizon,
        eps,
        step,
        seed,
    } = *opts;
    if !(eps > 0.0) || !(horizon > t) || !(step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "invalid ε-approximation options {opts:?}"
        )));
    }
    let path = horizon_path(t, horizon, step, seed)?;
    let total = path.n_steps();
    let step = path.step;
    let mut rec = EpsApproxRecord {
        t,
        t_bar: t,
        horizon,
        eps,
        step,
        path: path.clone(),
        segments: Vec::new(),
        times: vec![t],
        tau: vec![t],
        controls: Vec::new(),
        states: vec![init.clone()],
        complete: false,
        diagnostic: None,
    };
    let max_steps = ((eps / step) * (1.0 + 1e-12)).floor() as usize;
    if max_steps == 0 {
        rec.diagnostic = Some(format!("ε = {eps} is below the solver step {step}"));
        return Ok(rec);
    }
    let mut idx = 0;
    let mut node = init.clone();
    while idx < total {
        let mut steps = max_steps.min(total - idx);
        let accepted = loop {
            let trial = greedy_step(k, setup, &path, idx, steps, &node)?;
            let delta = steps as f64 * step;
            let defect = trial
                .states
                .iter()
                .map(|z| setup.distance_sq(&node, z))
                .fold(0.0, f64::max);
            if trial.energy <= eps * delta * (1.0 + 1e-12) && defect <= eps {
                break Some((trial, defect));
            }
            if steps == 1 {
                break None;
            }
            steps /= 2;
        };
        let Some((trial, defect)) = accepted else {
            rec.diagnostic = Some(format!(
                "step size underflow at t = {}: budgets fail with δ = Δt",
                path.time(idx)
            ));
            return Ok(rec);
        };
        let delta = steps as f64 * step;
        let t_k = path.time(idx);
        for (m, z) in trial.states.iter().enumerate().skip(1) {
            let s = path.time(idx + m);
            rec.times.push(s);
            // the right end of the subinterval is the next node
            rec.tau.push(if m == steps { s } else { t_k });
            rec.controls.push(trial.control);
            if m == steps {
                rec.states.push(trial.endpoint.clone());
            } else {
                rec.states.push(z.clone());
            }
        }
        rec.segments.push(Segment {
            start_index: idx,
            t_start: t_k,
            delta,
            steps,
            control: trial.control,
            correction: trial.correction,
            correction_energy: trial.energy,
            jump: trial.jump,
            delay_defect: defect,
            correction_iterations: trial.iterations,
        });
        node = trial.endpoint;
        idx += steps;
        rec.t_bar = if idx == total { horizon } else { path.time(idx) };
    }
    rec.complete = true;
    Ok(rec)
}

fn greedy_step(
    k: &ConstraintOracle,
    setup: &Setup,
    path: &BrownianPath,
    idx: usize,
    steps: usize,
    node: &CoupledState,
) -> Result<Trial> {
    let window = Window {
        origin: 0,
        start: idx,
        steps,
        stride: 1,
    };
    let delta = steps as f64 * path.step;
    let mut best: Option<(usize, f64)> = None;
    for u in 0..setup.model.controls.len() {
        let tr = solve_frozen(setup, path, window, node, node, None, &Schedule::Constant(u), 0)?;
        let d = k.distance(&tr.final_state);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((u, d));
        }
    }
    let (u, _) = best.expect("non-empty control set");

    // p ← p + (proj E(p) − E(p)) until the corrected endpoint lies in K
    let mut p = zero_correction(setup);
    let mut iterations = 0;
    let (states, endpoint, jump) = loop {
        let phi = (&p.0 * (1.0 / delta), p.1.scaled(1.0 / delta));
        let tr = solve_frozen(setup, path, window, node, node, Some(&phi), &Schedule::Constant(u), 1)?;
        let end = tr.final_state.clone();
        let proj = k.project(&end);
        let miss = setup.distance_sq(&end, &proj).sqrt();
        let scale = setup.norm_sq(&end).sqrt().max(1.0);
        if miss <= MEMBERSHIP_TOL * scale || iterations == MAX_CORRECTION_ITERATIONS {
            break (tr.states, proj, miss);
        }
        p.0 += &(&proj.x - &end.x);
        p.1.axpy(1.0, &proj.y.difference(&end.y));
        iterations += 1;
    };
    let energy = setup.norm_sq(&CoupledState {
        x: p.0.clone(),
        y: p.1.clone(),
    }) / delta;
    Ok(Trial {
        control: u,
        correction: (&p.0 * (1.0 / delta), p.1.scaled(1.0 / delta)),
        energy,
        jump,
        iterations,
        states,
        endpoint,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClauseResult {
    pub clause: u8,
    pub name: &'static str,
    /// `None` when the clause is not applicable.
    pub pass: Option<bool>,
    /// Margin to the clause's threshold; non-negative when it holds.
    pub slack: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClauseReport {
    pub clauses: Vec<ClauseResult>,
    pub correction_energy: f64,
    pub max_delay_defect: f64,
}

impl ClauseReport {
    pub fn all_pass(&self) -> bool {
        self.clauses.iter().all(|c| c.pass != Some(false))
    }

    pub fn clause(&self, n: u8) -> &ClauseResult {
        self.clauses.iter().find(|c| c.clause == n).expect("clause 1..6")
    }
}

/// Tolerance for re-integration and jump checks, relative to the state scale.
const REINTEGRATION_TOL: f64 = 1e-9;

/// Checks the six clauses of a constrained ε-approximate solution.
pub fn validate_eps_approx(
    rec: &EpsApproxRecord,
    k: &ConstraintOracle,
    setup: &Setup,
    init: &CoupledState,
) -> Result<ClauseReport> {
    let eps = rec.eps;
    let mut clauses = Vec::new();

    let c1 = rec.t <= rec.t_bar && rec.t_bar <= rec.horizon * (1.0 + 1e-12);
    clauses.push(ClauseResult {
        clause: 1,
        name: "horizon",
        pass: Some(c1),
        slack: rec.horizon - rec.t_bar,
        detail: format!("t = {}, T̄ = {}, T = {}", rec.t, rec.t_bar, rec.horizon),
    });

    let mut c2 = rec.tau.len() == rec.times.len();
    let mut worst_delay: f64 = 0.0;
    for (m, (&s, &tau)) in rec.times.iter().zip(&rec.tau).enumerate() {
        let tol = 1e-12 * s.abs().max(1.0);
        if tau > s + tol || s - tau > eps + tol || (m > 0 && tau < rec.tau[m - 1] - tol) {
            c2 = false;
        }
        worst_delay = worst_delay.max(s - tau);
    }
    clauses.push(ClauseResult {
        clause: 2,
        name: "delay map",
        pass: Some(c2),
        slack: eps - worst_delay,
        detail: format!("max s − τ(s) = {worst_delay:.6e}"),
    });

    let n_u = setup.model.controls.len();
    let c3 = rec.controls.iter().all(|&u| u < n_u);
    clauses.push(ClauseResult {
        clause: 3,
        name: "admissible control",
        pass: Some(c3),
        slack: 0.0,
        detail: format!("{} steps, {} control points", rec.controls.len(), n_u),
    });

    let energy = rec.correction_energy();
    let budget = eps * (rec.t_bar - rec.t);
    let finite = rec
        .segments
        .iter()
        .all(|s| s.correction.0.is_finite() && s.correction.1.is_finite());
    clauses.push(ClauseResult {
        clause: 4,
        name: "correction energy",
        pass: Some(finite && energy <= budget * (1.0 + 1e-12)),
        slack: budget - energy,
        detail: format!("∫‖φ‖² = {energy:.6e}, budget ε(T̄ − t) = {budget:.6e}"),
    });

    // clause 5: re-integrate each subinterval from the recorded node
    let mut worst_mismatch: f64 = 0.0;
    let mut worst_jump: f64 = 0.0;
    let mut pos = 0;
    let mut node = init.clone();
    let mut c5 = true;
    for seg in &rec.segments {
        let window = Window {
            origin: 0,
            start: seg.start_index,
            steps: seg.steps,
            stride: 1,
        };
        let tr = solve_frozen(
            setup,
            &rec.path,
            window,
            &node,
            &node,
            Some(&seg.correction),
            &Schedule::Constant(seg.control),
            1,
        )?;
        let scale = setup.norm_sq(&node).sqrt().max(1.0);
        for (m, z) in tr.states.iter().enumerate().take(seg.steps) {
            let Some(stored) = rec.states.get(pos + m) else {
                c5 = false;
                break;
            };
            worst_mismatch = worst_mismatch.max(setup.distance_sq(z, stored).sqrt() / scale);
        }
        pos += seg.steps;
        let Some(next) = rec.states.get(pos) else {
            c5 = false;
            break;
        };
        let jump = setup.distance_sq(&tr.final_state, next).sqrt();
        worst_jump = worst_jump.max(jump / scale);
        node = next.clone();
    }
    if pos + 1 != rec.states.len() {
        c5 = false;
    }
    let tol5 = REINTEGRATION_TOL;
    c5 = c5 && worst_mismatch <= tol5 && worst_jump <= tol5;
    clauses.push(ClauseResult {
        clause: 5,
        name: "equation (measurability not applicable)",
        pass: Some(c5),
        slack: tol5 - worst_mismatch.max(worst_jump),
        detail: format!(
            "max relative re-integration mismatch {worst_mismatch:.3e}, max relative jump {worst_jump:.3e}"
        ),
    });

    // clause 6
    let mut in_k = true;
    let mut defect: f64 = 0.0;
    let mut node_state = &rec.states[0];
    for (m, z) in rec.states.iter().enumerate() {
        if (rec.tau[m] - rec.times[m]).abs() <= 1e-12 * rec.times[m].abs().max(1.0) {
            node_state = z;
            in_k &= k.contains(z);
        }
        defect = defect.max(setup.distance_sq(node_state, z));
    }
    let last = rec.states.last().unwrap();
    in_k &= k.contains(last);
    clauses.push(ClauseResult {
        clause: 6,
        name: "constraint and delay defect",
        pass: Some(in_k && defect <= eps),
        slack: eps - defect,
        detail: format!("nodes in K: {in_k}, max delay defect {defect:.6e}"),
    });

    Ok(ClauseReport {
        clauses,
        correction_energy: energy,
        max_delay_defect: defect,
    })
}

/// Empirical check of the linear-in-`(s − t)` estimate along a record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialEstimate {
    pub durations: Vec<f64>,
    pub lhs: Vec<f64>,
    pub slope: Option<f64>,
    pub c_emp: f64,
}

/// `‖X(s) − ξ‖² + ‖Y(s) − η‖²` at the nodes nearest to `t + d` for each
/// duration `d`, with the smallest admissible constant of the linear bound.
pub fn appendix_initial_estimate(
    rec: &EpsApproxRecord,
    setup: &Setup,
    durations: &[f64],
) -> Result<InitialEstimate> {
    let init = &rec.states[0];
    let l2 = |z: &CoupledState| {
        setup.grid1.norm_sq(&z.x, Metric::L2)
            + match &z.y {
                Component::Field(f) => match &setup.space2 {
                    Space::Grid(g) => g.norm_sq(f, Metric::L2),
                    Space::Scalar => unreachable!(),
                },
                Component::Scalar(v) => v * v,
            }
    };
    let base = 1.0 + l2(init);
    let mut lhs = Vec::new();
    let mut used = Vec::new();
    let mut c_emp: f64 = 0.0;
    for &d in durations {
        let m = (d / rec.step).round() as usize;
        if m == 0 {
            return Err(Error::InvalidParameter(format!(
                "duration {d} is below the record step {}",
                rec.step
            )));
        }
        let d = m as f64 * rec.step;
        used.push(d);
        let Some(z) = rec.states.get(m) else {
            return Err(Error::InvalidParameter(format!(
                "duration {d} exceeds the record"
            )));
        };
        let v = setup.distance_sq(z, init);
        let energy: f64 = rec
            .segments
            .iter()
            .map(|s| {
                let covered = (m.min(s.start_index + s.steps)).saturating_sub(s.start_index);
                s.correction_energy * covered as f64 / s.steps as f64
            })
            .sum();
        c_emp = c_emp.max(v / ((base + energy) * d));
        lhs.push(v);
    }
    let slope = loglog_fit(&used, &lhs).map(|f| f.0);
    Ok(InitialEstimate {
        durations: used,
        lhs,
        slope,
        c_emp,
    })
}

/// A policy evaluated by [`near_viability_gap`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Policy {
    /// Controls and nodes of the greedy ε-approximate record; past an
    /// underflow the lowest control index is used on ε-segments.
    Greedy,
    /// A constant control, restarted every ε.
    Constant(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub eps: f64,
    pub gap: f64,
    pub best_policy: Policy,
    /// `(policy, max_s E[d])` for every policy tried.
    pub by_policy: Vec<(Policy, f64)>,
    pub stderr: f64,
}

/// `min` over policies of `max_s E[d((x, y)(s), K)]` for the uncorrected
/// rescaled flow restarted from the projected node states.
pub fn near_viability_gap(
    k: &ConstraintOracle,
    setup: &Setup,
    init: &CoupledState,
    opts: &EpsApproxOptions,
    n_mc: usize,
) -> Result<GapReport> {
    k.require(init)?;
    if n_mc == 0 {
        return Err(Error::InvalidParameter("gap needs samples".into()));
    }
    let mut policies = vec![Policy::Greedy];
    policies.extend((0..setup.model.controls.len()).map(Policy::Constant));
    let mut by_policy = Vec::new();
    let mut best: Option<(Policy, f64, f64)> = None;
    for &policy in &policies {
        let mut per_node: Vec<Vec<f64>> = Vec::new();
        for i in 0..n_mc {
            let sample = EpsApproxOptions {
                seed: sample_seed(opts.seed, i as u64),
                ..*opts
            };
            let d = restarted_distances(k, setup, init, &sample, policy)?;
            if per_node.len() < d.len() {
                per_node.resize(d.len(), Vec::new());
            }
            for (m, v) in d.into_iter().enumerate() {
                per_node[m].push(v);
            }
        }
        let (mut worst, mut worst_err) = (0.0, 0.0);
        for col in &per_node {
            let (m, e) = mean_stderr(col);
            if m > worst {
                worst = m;
                worst_err = e;
            }
        }
        by_policy.push((policy, worst));
        if best.map_or(true, |(_, g, _)| worst < g) {
            best = Some((policy, worst, worst_err));
        }
    }
    let (best_policy, gap, stderr) = best.unwrap();
    Ok(GapReport {
        eps: opts.eps,
        gap,
        best_policy,
        by_policy,
        stderr,
    })
}

fn restarted_distances(
    k: &ConstraintOracle,
    setup: &Setup,
    init: &CoupledState,
    opts: &EpsApproxOptions,
    policy: Policy,
) -> Result<Vec<f64>> {
    let path = horizon_path(opts.t, opts.horizon, opts.step, opts.seed)?;
    let len = ((opts.eps / path.step) * (1.0 + 1e-12)).floor().max(1.0) as usize;
    let total = path.n_steps();
    let mut segments: Vec<(usize, usize, usize)> = Vec::new();
    if policy == Policy::Greedy {
        let rec = construct_eps_approx(k, setup, init, opts)?;
        segments.extend(rec.segments.iter().map(|s| (s.start_index, s.steps, s.control)));
    }
    // constant policies, and the remainder of an incomplete greedy record
    let fill = match policy {
        Policy::Constant(u) => u,
        Policy::Greedy => 0,
    };
    let mut idx = segments.last().map_or(0, |&(a, m, _)| a + m);
    while idx < total {
        let steps = len.min(total - idx);
        segments.push((idx, steps, fill));
        idx += steps;
    }
    let mut out = vec![0.0];
    let mut node = init.clone();
    for (start, steps, u) in segments {
        let tr = solve_rescaled(
            setup,
            &path,
            Window {
                origin: 0,
                start,
                steps,
                stride: 1,
            },
            &node,
            &Schedule::Constant(u),
            1,
        )?;
        out.extend(tr.states.iter().skip(1).map(|z| k.distance(z)));
        node = k.project(&tr.final_state);
    }
    Ok(out)
}
