//! Explicit integration of the rescaled system, the Euler-type fundamental
//! scheme, the delayed-argument dynamics used by the ε-approximate
//! construction, the back-transform to the original variables and the Monte
//! Carlo rate harness.

use std::io::Write;

use nalgebra::DVector;
use serde::Serialize;

use crate::drift::{sample_brownian, sample_seed, BrownianPath, DriftGroup, Rotation};
use crate::error::{Error, Result};
use crate::kernels::{mat_t_vec, mat_vec};
use crate::model::{Component, ControlSet, CouplingMap, Nonlinearity, Space, Target};
use crate::spatial::{Field, GridDomain, Metric};
use crate::stats::{loglog_fit, mean_stderr};

/// `(β₁, β₂, f₁, f₂, U)`
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub beta1: Nonlinearity,
    pub beta2: Nonlinearity,
    pub f1: CouplingMap,
    pub f2: CouplingMap,
    pub controls: ControlSet,
}

/// A model together with the spaces and drift groups it lives on.
#[derive(Debug, Clone)]
pub struct Setup {
    pub grid1: GridDomain,
    pub space2: Space,
    pub group1: DriftGroup,
    pub group2: Option<DriftGroup>,
    pub model: ModelSpec,
}

impl Setup {
    pub fn new(
        grid1: GridDomain,
        group1: DriftGroup,
        space2: Space,
        group2: Option<DriftGroup>,
        model: ModelSpec,
    ) -> Result<Self> {
        let invalid = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if group1.grid().n_per_dim() != grid1.n_per_dim() {
            return invalid("first drift group lives on a different grid");
        }
        match (&space2, &group2) {
            (Space::Scalar, Some(_)) => return invalid("scalar second component has no drift"),
            (Space::Grid(g), Some(grp)) if grp.grid().n_per_dim() != g.n_per_dim() => {
                return invalid("second drift group lives on a different grid")
            }
            _ => {}
        }
        if space2.is_scalar() && !model.beta2.is_zero() {
            return invalid("scalar second component requires β₂ ≡ 0");
        }
        if model.beta1.is_zero() {
            return invalid("β₁ must be strongly monotone");
        }
        if model.f1.target() != Target::First || model.f2.target() != Target::Second {
            return invalid("coupling maps are attached to the wrong components");
        }
        let arity = model.controls.arity();
        if model.f1.arity() != arity || model.f2.arity() != arity {
            return invalid("coupling maps were built for a different control set");
        }
        Ok(Self {
            grid1,
            space2,
            group1,
            group2,
            model,
        })
    }

    pub fn zero_state(&self) -> CoupledState {
        CoupledState {
            x: self.grid1.zeros(),
            y: self.space2.zero(),
        }
    }

    pub fn is_scalar_mode(&self) -> bool {
        self.space2.is_scalar()
    }

    /// `‖x‖²_{H⁻¹} + ‖y‖²`
    pub fn norm_sq(&self, z: &CoupledState) -> f64 {
        self.grid1.norm_sq(&z.x, Metric::Hminus1) + self.space2.norm_sq(&z.y)
    }

    pub fn distance_sq(&self, a: &CoupledState, b: &CoupledState) -> f64 {
        self.grid1.norm_sq(&(&a.x - &b.x), Metric::Hminus1)
            + self.space2.norm_sq(&a.y.difference(&b.y))
    }

    /// `(f₁, f₂)(x, y, u)`
    pub fn forcing(&self, z: &CoupledState, u: usize) -> (Field, Component) {
        let point = self.model.controls.point(u);
        let g1 = Space::Grid(self.grid1.clone());
        let f1 = match self.model.f1.eval(&z.x, &z.y, point, &g1) {
            Component::Field(f) => f,
            Component::Scalar(_) => unreachable!("first component is a field"),
        };
        let f2 = self.model.f2.eval(&z.x, &z.y, point, &self.space2);
        (f1, f2)
    }

    fn check_state(&self, z: &CoupledState) -> Result<()> {
        if z.x.n_per_dim() != self.grid1.n_per_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.grid1.dim(),
                found: z.x.len(),
            });
        }
        if !self.space2.holds(&z.y) {
            return Err(Error::InvalidParameter(
                "second component does not match its space".into(),
            ));
        }
        if !z.x.is_finite() || !z.y.is_finite() {
            return Err(Error::InvalidParameter("non-finite initial state".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledState {
    pub x: Field,
    pub y: Component,
}

/// `Δt = 0.5 / ([β]₁ λ_max)`
pub fn stable_step(grid: &GridDomain, beta: &Nonlinearity) -> f64 {
    if beta.lip() == 0.0 {
        return f64::INFINITY;
    }
    0.5 / (beta.lip() * grid.lambda_max())
}

/// Largest stable step for both components of a setup.
pub fn setup_stable_step(setup: &Setup) -> f64 {
    let s1 = stable_step(&setup.grid1, &setup.model.beta1);
    match &setup.space2 {
        Space::Grid(g) => s1.min(stable_step(g, &setup.model.beta2)),
        Space::Scalar => s1,
    }
}

/// Portion of a Brownian path driving one integration.
///
/// Γ is referenced to path index `origin`; integration starts at path index
/// `start` and performs `steps` solver steps of `stride` path steps each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub origin: usize,
    pub start: usize,
    pub steps: usize,
    pub stride: usize,
}

impl Window {
    pub fn from_origin(steps: usize, stride: usize) -> Self {
        Self {
            origin: 0,
            start: 0,
            steps,
            stride,
        }
    }

    fn end(&self) -> usize {
        self.start + self.steps * self.stride
    }
}

/// Control schedule over the solver steps.
pub enum Schedule<'a> {
    Constant(usize),
    PerStep(&'a [usize]),
    /// Sampled-data feedback evaluated on the rescaled state at each node.
    Feedback(&'a dyn Fn(&CoupledState) -> usize),
}

#[derive(Debug, Clone, Copy)]
enum Forcing<'a> {
    Rescaled,
    Frozen {
        anchor: &'a CoupledState,
        correction: Option<&'a (Field, Component)>,
    },
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub x_norms: Vec<f64>,
    pub y_norms: Vec<f64>,
    /// Control index used on each solver step.
    pub controls: Vec<usize>,
    /// Node indices at which full states were stored.
    pub recorded: Vec<usize>,
    pub states: Vec<CoupledState>,
    pub final_state: CoupledState,
    pub step: f64,
    pub stable_step: f64,
    pub path_seed: u64,
    /// Path index of the Γ origin and of the first node.
    pub origin: usize,
    pub start: usize,
    pub stride: usize,
}

impl Trajectory {
    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    /// CSV columns `s, x_norm_hminus1, y_norm, control`; the last node
    /// carries no control.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "x_norm_hminus1", "y_norm", "control"])
            .map_err(csv_err)?;
        for m in 0..self.n_nodes() {
            let ctrl = self
                .controls
                .get(m)
                .map(|c| c.to_string())
                .unwrap_or_default();
            w.write_record([
                self.times[m].to_string(),
                self.x_norms[m].to_string(),
                self.y_norms[m].to_string(),
                ctrl,
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidParameter(format!("csv: {other:?}")),
    }
}

/// Coordinates of one component: Schur coordinates of the drift group,
/// H⁻¹-orthonormal coordinates or a scalar.
type Coords = DVector<f64>;

fn diff_norm_sq(a: &Coords, b: &Coords) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

enum Frame<'a> {
    Rotating {
        grid: &'a GridDomain,
        group: &'a DriftGroup,
    },
    Plain {
        grid: &'a GridDomain,
    },
    Scalar,
}

impl<'a> Frame<'a> {
    fn new(space: &'a Space, group: Option<&'a DriftGroup>) -> Self {
        match (space, group) {
            (Space::Scalar, _) => Frame::Scalar,
            (Space::Grid(grid), Some(group)) if !group.is_identity() => {
                Frame::Rotating { grid, group }
            }
            (Space::Grid(grid), _) => Frame::Plain { grid },
        }
    }

    fn for_grid(grid: &'a GridDomain, group: &'a DriftGroup) -> Self {
        if group.is_identity() {
            Frame::Plain { grid }
        } else {
            Frame::Rotating { grid, group }
        }
    }

    fn phases(&self, r: f64) -> Option<Rotation> {
        match self {
            Frame::Rotating { group, .. } if r != 0.0 => Some(group.rotation(r)),
            _ => None,
        }
    }

    fn from_metric(&self, w: DVector<f64>) -> Coords {
        match self {
            Frame::Rotating { group, .. } => mat_t_vec(group.basis(), &w),
            _ => w,
        }
    }

    fn encode(&self, c: &Component) -> Coords {
        self.from_metric(self.metric(c))
    }

    /// `e^{rB}` applied to the state, returned as a component.
    fn decode(&self, z: &Coords, ph: Option<&Rotation>) -> Component {
        match self {
            Frame::Scalar => Component::Scalar(z[0]),
            Frame::Plain { grid } => Component::Field(grid.from_metric_coords(z)),
            Frame::Rotating { grid, group } => {
                let w = match ph {
                    Some(ph) => {
                        let mut y = z.clone();
                        group.rotate(ph, &mut y, false);
                        mat_vec(group.basis(), &y)
                    }
                    None => mat_vec(group.basis(), z),
                };
                Component::Field(grid.from_metric_coords(&w))
            }
        }
    }

    /// Metric-coordinate vector mapped by `e^{−rB}` into state coordinates.
    fn encode_back(&self, w: DVector<f64>, ph: Option<&Rotation>) -> Coords {
        let mut q = self.from_metric(w);
        if let (Frame::Rotating { group, .. }, Some(ph)) = (self, ph) {
            group.rotate(ph, &mut q, true);
        }
        q
    }

    fn metric(&self, c: &Component) -> DVector<f64> {
        match (self, c) {
            (Frame::Scalar, Component::Scalar(v)) => DVector::from_element(1, *v),
            (Frame::Rotating { grid, .. } | Frame::Plain { grid }, Component::Field(f)) => {
                grid.to_metric_coords(f)
            }
            _ => unreachable!("component kind checked by the setup"),
        }
    }

    /// `−A β(φ)` in metric coordinates (zero for the scalar frame).
    fn diffusion(&self, beta: &Nonlinearity, phi: &Component) -> DVector<f64> {
        match (self, phi) {
            (Frame::Scalar, _) => DVector::zeros(1),
            (Frame::Rotating { grid, .. } | Frame::Plain { grid }, Component::Field(f)) => {
                if beta.is_zero() {
                    DVector::zeros(grid.dim())
                } else {
                    -grid.laplacian_to_metric_coords(&beta.apply(f))
                }
            }
            _ => unreachable!("component kind checked by the setup"),
        }
    }
}

struct Engine<'a> {
    setup: &'a Setup,
    f1: Frame<'a>,
    f2: Frame<'a>,
}

impl<'a> Engine<'a> {
    fn new(setup: &'a Setup) -> Self {
        Self {
            setup,
            f1: Frame::for_grid(&setup.grid1, &setup.group1),
            f2: Frame::new(&setup.space2, setup.group2.as_ref()),
        }
    }

    fn decode_plain(&self, z1: &Coords, z2: &Coords) -> CoupledState {
        let x = match self.f1.decode(z1, None) {
            Component::Field(f) => f,
            Component::Scalar(_) => unreachable!(),
        };
        CoupledState {
            x,
            y: self.f2.decode(z2, None),
        }
    }

    fn frozen_coords(
        &self,
        anchor: &CoupledState,
        correction: Option<&(Field, Component)>,
        u: usize,
    ) -> (Coords, Coords, f64) {
        let (mut g1, mut g2) = self.setup.forcing(anchor, u);
        if let Some((p1, p2)) = correction {
            g1 += p1;
            g2.axpy(1.0, p2);
        }
        let c1 = self.f1.encode(&Component::Field(g1));
        let c2 = self.f2.encode(&g2);
        let mag = c1.norm() + c2.norm();
        (c1, c2, mag)
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        path: &BrownianPath,
        window: Window,
        init: &CoupledState,
        forcing: Forcing<'_>,
        schedule: &Schedule<'_>,
        record_every: usize,
        mut observer: Option<&mut dyn FnMut(usize, &Coords, &Coords)>,
    ) -> Result<Trajectory> {
        let setup = self.setup;
        setup.check_state(init)?;
        if window.stride == 0 || window.start < window.origin || window.end() > path.n_steps() {
            return Err(Error::InvalidParameter(format!(
                "window {window:?} does not fit a path with {} steps",
                path.n_steps()
            )));
        }
        let dt = path.step * window.stride as f64;
        let stable = setup_stable_step(setup);
        if dt > stable * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "step {dt:.6e} exceeds the stable step {stable:.6e}"
            )));
        }
        if let Schedule::PerStep(s) = schedule {
            if s.len() < window.steps {
                return Err(Error::InvalidParameter(
                    "control schedule shorter than the integration window".into(),
                ));
            }
        }
        let n_controls = setup.model.controls.len();
        let check_u = |u: usize| -> Result<usize> {
            if u < n_controls {
                Ok(u)
            } else {
                Err(Error::InvalidParameter(format!("control index {u} out of range")))
            }
        };

        let mut z1 = self.f1.encode(&Component::Field(init.x.clone()));
        let mut z2 = self.f2.encode(&init.y);
        let n0 = z1.norm() + z2.norm();
        let lip = setup.model.f1.lip().max(setup.model.f2.lip());
        let sup0 = setup.model.f1.sup0() + setup.model.f2.sup0();

        let mut frozen: Vec<Option<(Coords, Coords, f64)>> = vec![None; n_controls];
        let mut frozen_budget = 0.0;

        let t_start = path.time(window.start);
        let mut traj = Trajectory {
            times: Vec::with_capacity(window.steps + 1),
            x_norms: Vec::with_capacity(window.steps + 1),
            y_norms: Vec::with_capacity(window.steps + 1),
            controls: Vec::with_capacity(window.steps),
            recorded: Vec::new(),
            states: Vec::new(),
            final_state: init.clone(),
            step: dt,
            stable_step: stable,
            path_seed: path.seed,
            origin: window.origin,
            start: window.start,
            stride: window.stride,
        };
        let push_node = |m: usize, z1: &Coords, z2: &Coords, traj: &mut Trajectory| {
            traj.times.push(t_start + m as f64 * dt);
            traj.x_norms.push(z1.norm());
            traj.y_norms.push(z2.norm());
        };
        push_node(0, &z1, &z2, &mut traj);
        if record_every > 0 {
            traj.recorded.push(0);
            traj.states.push(init.clone());
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(0, &z1, &z2);
        }

        for m in 0..window.steps {
            let idx = window.start + m * window.stride;
            let r = path.increment(window.origin, idx);
            let u = match schedule {
                Schedule::Constant(u) => check_u(*u)?,
                Schedule::PerStep(s) => check_u(s[m])?,
                Schedule::Feedback(f) => check_u(f(&self.decode_plain(&z1, &z2)))?,
            };
            traj.controls.push(u);

            let ph1 = self.f1.phases(r);
            let ph2 = self.f2.phases(r);
            let big_x = self.f1.decode(&z1, ph1.as_ref());
            let big_y = self.f2.decode(&z2, ph2.as_ref());
            let mut g1 = self.f1.diffusion(&setup.model.beta1, &big_x);
            let mut g2 = self.f2.diffusion(&setup.model.beta2, &big_y);
            if let Forcing::Rescaled = forcing {
                let state = CoupledState {
                    x: match big_x {
                        Component::Field(f) => f,
                        Component::Scalar(_) => unreachable!(),
                    },
                    y: big_y,
                };
                let (h1, h2) = setup.forcing(&state, u);
                g1 += self.f1.metric(&Component::Field(h1));
                g2 += self.f2.metric(&h2);
            }
            let mut q1 = self.f1.encode_back(g1, ph1.as_ref());
            let mut q2 = self.f2.encode_back(g2, ph2.as_ref());
            if let Forcing::Frozen { anchor, correction } = forcing {
                if frozen[u].is_none() {
                    frozen[u] = Some(self.frozen_coords(anchor, correction, u));
                }
                let (c1, c2, mag) = frozen[u].as_ref().unwrap();
                q1 += c1;
                q2 += c2;
                frozen_budget += dt * mag;
            }
            z1.axpy(dt, &q1, 1.0);
            z2.axpy(dt, &q2, 1.0);

            push_node(m + 1, &z1, &z2, &mut traj);
            let norm = traj.x_norms[m + 1] + traj.y_norms[m + 1];
            let tau = (m + 1) as f64 * dt;
            let bound = match forcing {
                Forcing::Rescaled => 2.0 * (2.0 * lip * tau).exp() * (n0 + 2.0 * sup0 * tau),
                Forcing::Frozen { .. } => 2.0 * (n0 + frozen_budget),
            };
            if !norm.is_finite() || norm > bound * (1.0 + 1e-9) + 1e-12 {
                return Err(Error::BlowUp {
                    step: m + 1,
                    norm,
                    bound,
                });
            }
            if record_every > 0 && ((m + 1) % record_every == 0 || m + 1 == window.steps) {
                traj.recorded.push(m + 1);
                traj.states.push(self.decode_plain(&z1, &z2));
            }
            if let Some(obs) = observer.as_deref_mut() {
                obs(m + 1, &z1, &z2);
            }
        }
        traj.final_state = match traj.recorded.last() {
            Some(&last) if last == window.steps => traj.states.last().unwrap().clone(),
            _ => self.decode_plain(&z1, &z2),
        };
        Ok(traj)
    }
}

/// Forward Euler for the rescaled system: diffusion and forcing both
/// conjugated by Γ.
pub fn solve_rescaled(
    setup: &Setup,
    path: &BrownianPath,
    window: Window,
    init: &CoupledState,
    schedule: &Schedule<'_>,
    record_every: usize,
) -> Result<Trajectory> {
    Engine::new(setup).run(
        path,
        window,
        init,
        Forcing::Rescaled,
        schedule,
        record_every,
        None,
    )
}

/// Fundamental scheme: conjugated diffusion, forcing frozen at the initial
/// data and not conjugated.
pub fn solve_euler_fundamental(
    setup: &Setup,
    path: &BrownianPath,
    window: Window,
    init: &CoupledState,
    schedule: &Schedule<'_>,
    record_every: usize,
) -> Result<Trajectory> {
    Engine::new(setup).run(
        path,
        window,
        init,
        Forcing::Frozen {
            anchor: init,
            correction: None,
        },
        schedule,
        record_every,
        None,
    )
}

/// Delayed-argument dynamics on one subinterval: forcing frozen at `anchor`
/// plus a constant correction, Γ referenced to `window.origin`.
pub fn solve_frozen(
    setup: &Setup,
    path: &BrownianPath,
    window: Window,
    init: &CoupledState,
    anchor: &CoupledState,
    correction: Option<&(Field, Component)>,
    schedule: &Schedule<'_>,
    record_every: usize,
) -> Result<Trajectory> {
    setup.check_state(anchor)?;
    Engine::new(setup).run(
        path,
        window,
        init,
        Forcing::Frozen { anchor, correction },
        schedule,
        record_every,
        None,
    )
}

/// `X(s) = Γ₁(t,s) x(s)`, `Y(s) = Γ₂(t,s) y(s)` at every recorded node.
pub fn recover_original(
    setup: &Setup,
    traj: &Trajectory,
    path: &BrownianPath,
) -> Vec<CoupledState> {
    traj.recorded
        .iter()
        .zip(&traj.states)
        .map(|(&m, z)| {
            let idx = traj.start + m * traj.stride;
            let r = path.increment(traj.origin, idx);
            let y = match (&z.y, &setup.group2) {
                (Component::Field(f), Some(g)) => Component::Field(g.apply(r, f)),
                (other, _) => other.clone(),
            };
            CoupledState {
                x: setup.group1.apply(r, &z.x),
                y,
            }
        })
        .collect()
}

/// Parameters shared by the two rate studies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateConfig {
    pub epsilons: Vec<f64>,
    pub n_mc: usize,
    pub seed: u64,
    /// Solver step of the scheme under test.
    pub step: f64,
    /// Control index held constant on `[t, t + ε]`.
    pub control: usize,
    /// Refinement factor of the reference solution (scheme-gap rate only).
    pub reference_refinement: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub epsilons: Vec<f64>,
    pub errors: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// `max_k errors[k] / ε_k^{exponent}`
    pub c_emp: f64,
    pub exponent: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub wide_confidence: bool,
    /// Largest relative change of the gap under step doubling.
    pub reference_ratio: Option<f64>,
}

impl RateReport {
    fn from_samples(
        cfg: &RateConfig,
        samples: &[Vec<f64>],
        exponent: f64,
        reference_ratio: Option<f64>,
    ) -> Self {
        let k = cfg.epsilons.len();
        let mut errors = Vec::with_capacity(k);
        let mut stderrs = Vec::with_capacity(k);
        for j in 0..k {
            let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            let (m, e) = mean_stderr(&col);
            errors.push(m);
            stderrs.push(e);
        }
        let fit = if errors.iter().all(|e| *e == 0.0) {
            None
        } else {
            loglog_fit(&cfg.epsilons, &errors)
        };
        let c_emp = cfg
            .epsilons
            .iter()
            .zip(&errors)
            .map(|(e, v)| v / e.powf(exponent))
            .fold(0.0, f64::max);
        let wide = cfg.n_mc < 100
            || errors
                .iter()
                .zip(&stderrs)
                .any(|(m, s)| *m > 0.0 && s / m > 0.25);
        Self {
            epsilons: cfg.epsilons.clone(),
            errors,
            stderrs,
            slope: fit.map(|f| f.0),
            intercept: fit.map(|f| f.1),
            c_emp,
            exponent,
            n_mc: cfg.n_mc,
            seed: cfg.seed,
            wide_confidence: wide,
            reference_ratio,
        }
    }

    /// CSV columns `epsilon, error, stderr`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epsilon", "error", "stderr"]).map_err(csv_err)?;
        for j in 0..self.epsilons.len() {
            w.write_record([
                self.epsilons[j].to_string(),
                self.errors[j].to_string(),
                self.stderrs[j].to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn epsilon_nodes(cfg: &RateConfig, step: f64) -> Result<Vec<usize>> {
    if cfg.epsilons.is_empty() || cfg.n_mc == 0 {
        return Err(Error::InvalidParameter(
            "rate study needs epsilons and samples".into(),
        ));
    }
    cfg.epsilons
        .iter()
        .map(|&e| {
            let r = e / step;
            if !(e > 0.0) || (r - r.round()).abs() > 1e-9 * r.max(1.0) || r.round() < 1.0 {
                Err(Error::InvalidParameter(format!(
                    "ε = {e} is not a positive multiple of the step {step}"
                )))
            } else {
                Ok(r.round() as usize)
            }
        })
        .collect()
}

/// Monte Carlo `E[‖x̂(t+ε)−ξ‖² + ‖ŷ(t+ε)−η‖²]` for the fundamental scheme.
pub fn prop1_rate(setup: &Setup, init: &CoupledState, cfg: &RateConfig) -> Result<RateReport> {
    let nodes = epsilon_nodes(cfg, cfg.step)?;
    let max_node = *nodes.iter().max().unwrap();
    let engine = Engine::new(setup);
    let z1_0 = engine.f1.encode(&Component::Field(init.x.clone()));
    let z2_0 = engine.f2.encode(&init.y);
    let mut samples = Vec::with_capacity(cfg.n_mc);
    for i in 0..cfg.n_mc {
        let path = sample_brownian(
            0.0,
            max_node as f64 * cfg.step,
            cfg.step,
            sample_seed(cfg.seed, i as u64),
        )?;
        let mut at_node = vec![f64::NAN; max_node + 1];
        let mut obs = |m: usize, z1: &Coords, z2: &Coords| {
            at_node[m] = diff_norm_sq(z1, &z1_0) + diff_norm_sq(z2, &z2_0);
        };
        engine.run(
            &path,
            Window::from_origin(max_node, 1),
            init,
            Forcing::Frozen {
                anchor: init,
                correction: None,
            },
            &Schedule::Constant(cfg.control),
            0,
            Some(&mut obs),
        )?;
        samples.push(nodes.iter().map(|&k| at_node[k]).collect());
    }
    Ok(RateReport::from_samples(cfg, &samples, 1.5, None))
}

/// Number of samples used for the reference-error check in [`prop2_rate`].
const REFERENCE_CHECK_SAMPLES: usize = 8;

/// Monte Carlo `E[‖x(t+ε)−x̂(t+ε)‖² + ‖y−ŷ‖²]` between the rescaled solution
/// and the fundamental scheme, both integrated at the reference step
/// `step / reference_refinement` on the same path and control.
///
/// The reference error is estimated on a few samples as the relative change
/// of the gap when both schemes are rerun at twice the reference step.
pub fn prop2_rate(setup: &Setup, init: &CoupledState, cfg: &RateConfig) -> Result<RateReport> {
    let refine = cfg.reference_refinement.max(1);
    let fine = cfg.step / refine as f64;
    let nodes = epsilon_nodes(cfg, cfg.step)?;
    let max_node = *nodes.iter().max().unwrap();
    let engine = Engine::new(setup);
    let n_nodes = max_node + 1;

    let run_into = |path: &BrownianPath,
                    stride: usize,
                    forcing: Forcing<'_>,
                    keep: &mut Vec<Option<(Coords, Coords)>>|
     -> Result<()> {
        let every = refine / stride;
        let mut obs = |m: usize, z1: &Coords, z2: &Coords| {
            if m % every == 0 {
                keep[m / every] = Some((z1.clone(), z2.clone()));
            }
        };
        engine.run(
            path,
            Window::from_origin(max_node * every, stride),
            init,
            forcing,
            &Schedule::Constant(cfg.control),
            0,
            Some(&mut obs),
        )?;
        Ok(())
    };
    let frozen = Forcing::Frozen {
        anchor: init,
        correction: None,
    };
    let gaps = |a: &[Option<(Coords, Coords)>], b: &[Option<(Coords, Coords)>]| -> Vec<f64> {
        nodes
            .iter()
            .map(|&k| {
                let (x1, y1) = a[k].as_ref().unwrap();
                let (x2, y2) = b[k].as_ref().unwrap();
                diff_norm_sq(x1, x2) + diff_norm_sq(y1, y2)
            })
            .collect()
    };

    let mut samples = Vec::with_capacity(cfg.n_mc);
    let mut reference_ratio: Option<f64> = None;
    for i in 0..cfg.n_mc {
        let path = sample_brownian(
            0.0,
            max_node as f64 * cfg.step,
            fine,
            sample_seed(cfg.seed, i as u64),
        )?;
        let mut exact = vec![None; n_nodes];
        let mut scheme = vec![None; n_nodes];
        run_into(&path, 1, Forcing::Rescaled, &mut exact)?;
        run_into(&path, 1, frozen, &mut scheme)?;
        let gap = gaps(&exact, &scheme);
        if refine % 2 == 0 && i < REFERENCE_CHECK_SAMPLES && gap.iter().any(|g| *g > 0.0) {
            let mut coarse_exact = vec![None; n_nodes];
            let mut coarse_scheme = vec![None; n_nodes];
            run_into(&path, 2, Forcing::Rescaled, &mut coarse_exact)?;
            run_into(&path, 2, frozen, &mut coarse_scheme)?;
            let coarse = gaps(&coarse_exact, &coarse_scheme);
            let worst = coarse
                .iter()
                .zip(&gap)
                .map(|(c, g)| if *g > 0.0 { (c - g).abs() / g } else { 0.0 })
                .fold(0.0, f64::max);
            reference_ratio = Some(reference_ratio.unwrap_or(0.0).max(worst));
        }
        samples.push(gap);
    }
    Ok(RateReport::from_samples(cfg, &samples, 2.25, reference_ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{build_drift, build_group, StreamFunction};
    use crate::model::{make_beta, make_coupling, BetaKind, CouplingFamily, LinearPart};
    use crate::spatial::build_grid;

    fn group(grid: &GridDomain, amp: f64) -> DriftGroup {
        let s = if amp == 0.0 {
            StreamFunction::Zero
        } else {
            StreamFunction::sin_sin(amp)
        };
        build_group(grid, &build_drift(grid, s).unwrap()).unwrap()
    }

    fn scalar_setup(n: usize, amp: f64, beta: BetaKind, f1: CouplingFamily, c: f64) -> Setup {
        let grid = build_grid(n).unwrap();
        let controls = ControlSet::new(vec![vec![0.0], vec![1.0]]).unwrap();
        let model = ModelSpec {
            beta1: make_beta(beta, false).unwrap(),
            beta2: make_beta(BetaKind::Zero, true).unwrap(),
            f1: make_coupling(f1, Target::First, &grid, &Space::Scalar, &controls).unwrap(),
            f2: make_coupling(
                CouplingFamily::Decay { c },
                Target::Second,
                &grid,
                &Space::Scalar,
                &controls,
            )
            .unwrap(),
            controls,
        };
        Setup::new(grid.clone(), group(&grid, amp), Space::Scalar, None, model).unwrap()
    }

    fn field_setup(n: usize, amp: f64, f1: CouplingFamily, f2: CouplingFamily) -> Setup {
        let grid = build_grid(n).unwrap();
        let s2 = Space::Grid(grid.clone());
        let controls = ControlSet::singleton_zero(1);
        let model = ModelSpec {
            beta1: make_beta(
                BetaKind::SineShift {
                    slope: 1.0,
                    amplitude: 0.5,
                },
                false,
            )
            .unwrap(),
            beta2: make_beta(BetaKind::Linear { slope: 1.0 }, false).unwrap(),
            f1: make_coupling(f1, Target::First, &grid, &s2, &controls).unwrap(),
            f2: make_coupling(f2, Target::Second, &grid, &s2, &controls).unwrap(),
            controls,
        };
        Setup::new(grid.clone(), group(&grid, amp), s2, Some(group(&grid, 0.0)), model).unwrap()
    }

    fn linear() -> BetaKind {
        BetaKind::Linear { slope: 1.0 }
    }

    #[test]
    fn stable_step_formula() {
        let g = build_grid(3).unwrap();
        let b = make_beta(linear(), false).unwrap();
        assert!((stable_step(&g, &b) - 0.5 / g.eigenvalue_jk(3, 3)).abs() < 1e-15);
        let b2 = make_beta(BetaKind::Linear { slope: 2.0 }, false).unwrap();
        assert!((stable_step(&g, &b2) - 0.5 * stable_step(&g, &b)).abs() < 1e-15);
    }

    #[test]
    fn pure_diffusion_is_dissipative_at_stable_step() {
        let s = scalar_setup(7, 0.0, linear(), CouplingFamily::Zero, 0.0);
        let dt = setup_stable_step(&s);
        let path = sample_brownian(0.0, 1000.0 * dt, dt, 1).unwrap();
        let x = s.grid1.field_from_fn(|x, y| x * (1.0 - x) * y * (1.0 - y.powi(2)) * 10.0);
        let init = CoupledState {
            x,
            y: Component::Scalar(0.0),
        };
        let tr = solve_rescaled(&s, &path, Window::from_origin(1000, 1), &init, &Schedule::Constant(0), 0)
            .unwrap();
        assert!(tr.x_norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-14)));
    }

    #[test]
    fn heat_oracle_on_eigenvector_has_first_order_error() {
        let s = scalar_setup(7, 0.0, linear(), CouplingFamily::Zero, 0.0);
        let lam = s.grid1.eigenvalue_jk(1, 1);
        let e11 = s.grid1.eigenvector_jk(1, 1);
        let horizon = 0.0625;
        let mut errs = Vec::new();
        let mut steps = Vec::new();
        for k in [10, 11, 12, 13] {
            let dt = 2f64.powi(-k);
            let m = (horizon / dt) as usize;
            let path = sample_brownian(0.0, horizon, dt, 3).unwrap();
            let init = CoupledState {
                x: e11.clone(),
                y: Component::Scalar(0.0),
            };
            let tr = solve_rescaled(&s, &path, Window::from_origin(m, 1), &init, &Schedule::Constant(0), 0)
                .unwrap();
            let exact = &e11 * (-lam * horizon).exp();
            errs.push((&tr.final_state.x - &exact).max_abs());
            steps.push(dt);
        }
        let (slope, _) = loglog_fit(&steps, &errs).unwrap();
        assert!((slope - 1.0).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let s = scalar_setup(5, 1.0, linear(), CouplingFamily::Zero, 2.0);
        let dt = 1e-4;
        let path = sample_brownian(0.0, 0.5, dt, 4).unwrap();
        let init = CoupledState {
            x: s.grid1.zeros(),
            y: Component::Scalar(3.0),
        };
        let tr = solve_rescaled(&s, &path, Window::from_origin(5000, 1), &init, &Schedule::Constant(0), 0)
            .unwrap();
        let y = tr.final_state.y.as_scalar().unwrap();
        assert!((y - 3.0 * (-1.0f64).exp()).abs() < 1e-3, "{y}");
    }

    #[test]
    fn duhamel_oracle_for_frozen_forcing() {
        let grid = build_grid(5).unwrap();
        let g = &(grid.eigenvector_jk(1, 2) * 3.0) + &grid.eigenvector_jk(2, 2);
        let s = scalar_setup(
            5,
            0.0,
            linear(),
            CouplingFamily::Affine {
                mx: LinearPart::Zero,
                my: LinearPart::Zero,
                gains: vec![],
                offset: Some(Component::Field(g.clone())),
            },
            0.0,
        );
        let xi = grid.eigenvector_jk(1, 1);
        let horizon = 0.05;
        let dt = horizon / 4000.0;
        let path = sample_brownian(0.0, horizon, dt, 5).unwrap();
        let init = CoupledState {
            x: xi.clone(),
            y: Component::Scalar(0.0),
        };
        let tr = solve_euler_fundamental(&s, &path, Window::from_origin(4000, 1), &init, &Schedule::Constant(0), 0)
            .unwrap();
        // spectral Duhamel: e^{-At}ξ + A⁻¹(I − e^{-At}) g, mode by mode
        let lam = grid.spectral_eigenvalues();
        let mut c = grid.to_spectral(&xi);
        let cg = grid.to_spectral(&g);
        for k in 0..c.len() {
            let e = (-lam[k] * horizon).exp();
            c[k] = e * c[k] + (1.0 - e) / lam[k] * cg[k];
        }
        let oracle = grid.from_spectral(&c);
        let err = (&tr.final_state.x - &oracle).max_abs();
        assert!(err < 2e-3 * oracle.max_abs(), "{err}");
    }

    #[test]
    fn schemes_coincide_for_state_independent_forcing() {
        let grid = build_grid(5).unwrap();
        let g = grid.eigenvector_jk(2, 1);
        let s = scalar_setup(
            5,
            0.0,
            BetaKind::SineShift {
                slope: 1.0,
                amplitude: 0.5,
            },
            CouplingFamily::Affine {
                mx: LinearPart::Zero,
                my: LinearPart::Zero,
                gains: vec![],
                offset: Some(Component::Field(g)),
            },
            0.0,
        );
        // f₂ = 0·y is state independent as well
        let dt = 0.5 * setup_stable_step(&s);
        let path = sample_brownian(0.0, 200.0 * dt, dt, 6).unwrap();
        let init = CoupledState {
            x: grid.eigenvector_jk(1, 1),
            y: Component::Scalar(0.5),
        };
        let w = Window::from_origin(200, 1);
        let a = solve_rescaled(&s, &path, w, &init, &Schedule::Constant(0), 50).unwrap();
        let b = solve_euler_fundamental(&s, &path, w, &init, &Schedule::Constant(0), 50).unwrap();
        assert_eq!(a.x_norms, b.x_norms);
        assert_eq!(a.final_state, b.final_state);
        // with drift, forcing-free schemes still coincide
        let s = scalar_setup(5, 2.0, linear(), CouplingFamily::Zero, 0.0);
        let a = solve_rescaled(&s, &path, w, &init, &Schedule::Constant(0), 50).unwrap();
        let b = solve_euler_fundamental(&s, &path, w, &init, &Schedule::Constant(0), 50).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn equilibrium_stays_at_zero() {
        let s = field_setup(5, 1.0, CouplingFamily::Zero, CouplingFamily::Zero);
        let dt = setup_stable_step(&s);
        let path = sample_brownian(0.0, 100.0 * dt, dt, 8).unwrap();
        let init = s.zero_state();
        let tr = solve_euler_fundamental(&s, &path, Window::from_origin(100, 1), &init, &Schedule::Constant(0), 10)
            .unwrap();
        assert!(tr.x_norms.iter().chain(&tr.y_norms).all(|v| *v == 0.0));
    }

    #[test]
    fn dissipation_with_drift_for_random_runs() {
        let s = field_setup(6, 3.0, CouplingFamily::Zero, CouplingFamily::Zero);
        let dt = setup_stable_step(&s);
        let grid = &s.grid1;
        for seed in 0..10u64 {
            let path = sample_brownian(0.0, 300.0 * dt, dt, seed).unwrap();
            let a = 1.0 + seed as f64;
            let init = CoupledState {
                x: grid.field_from_fn(|x, y| a * (x * (1.0 - x)).powi(2) * y * (1.0 - y) * (3.0 * x + y).sin()),
                y: Component::Field(grid.eigenvector_jk(1, 1)),
            };
            let tr = solve_rescaled(&s, &path, Window::from_origin(300, 1), &init, &Schedule::Constant(0), 0)
                .unwrap();
            assert!(tr.x_norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn two_solution_stability() {
        let grid = build_grid(5).unwrap();
        let s = field_setup(
            5,
            2.0,
            CouplingFamily::Affine {
                mx: LinearPart::Scaled(0.8),
                my: LinearPart::Scaled(0.5),
                gains: vec![],
                offset: Some(Component::Field(grid.eigenvector_jk(1, 1))),
            },
            CouplingFamily::Affine {
                mx: LinearPart::Scaled(0.3),
                my: LinearPart::Zero,
                gains: vec![],
                offset: None,
            },
        );
        let lip = s.model.f1.lip().max(s.model.f2.lip());
        let dt = setup_stable_step(&s);
        let steps = 400;
        let path = sample_brownian(0.0, steps as f64 * dt, dt, 11).unwrap();
        let mk = |a: f64| CoupledState {
            x: grid.field_from_fn(|x, y| a * (x * (1.0 - x) * y * (1.0 - y))),
            y: Component::Field(grid.eigenvector_jk(2, 1) * a),
        };
        let (z1, z2) = (mk(1.0), mk(1.3));
        let w = Window::from_origin(steps, 1);
        let a = solve_rescaled(&s, &path, w, &z1, &Schedule::Constant(0), 1).unwrap();
        let b = solve_rescaled(&s, &path, w, &z2, &Schedule::Constant(0), 1).unwrap();
        let d = |p: &CoupledState, q: &CoupledState| {
            grid.norm(&(&p.x - &q.x), Metric::Hminus1) + s.space2.norm(&p.y.difference(&q.y))
        };
        let d0 = d(&z1, &z2);
        for (m, (p, q)) in a.states.iter().zip(&b.states).enumerate() {
            let tau = a.recorded[m] as f64 * dt;
            assert!(d(p, q) <= 1.1 * (2.0 * lip * tau).exp() * d0);
        }
    }

    #[test]
    fn reruns_are_bitwise_equal() {
        let s = field_setup(5, 2.0, CouplingFamily::Zero, CouplingFamily::Decay { c: 1.0 });
        let dt = setup_stable_step(&s);
        let path = sample_brownian(0.0, 50.0 * dt, dt, 99).unwrap();
        let init = CoupledState {
            x: s.grid1.eigenvector_jk(1, 2),
            y: Component::Field(s.grid1.eigenvector_jk(1, 1)),
        };
        let w = Window::from_origin(50, 1);
        let a = solve_rescaled(&s, &path, w, &init, &Schedule::Constant(0), 5).unwrap();
        let b = solve_rescaled(&s, &path, w, &init, &Schedule::Constant(0), 5).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.x_norms, b.x_norms);
    }

    #[test]
    fn back_transform_is_isometric() {
        let s = field_setup(5, 2.0, CouplingFamily::Zero, CouplingFamily::Zero);
        let dt = setup_stable_step(&s);
        let path = sample_brownian(0.0, 60.0 * dt, dt, 21).unwrap();
        let init = CoupledState {
            x: s.grid1.eigenvector_jk(2, 1),
            y: Component::Field(s.grid1.eigenvector_jk(1, 1)),
        };
        let tr = solve_rescaled(&s, &path, Window::from_origin(60, 1), &init, &Schedule::Constant(0), 1)
            .unwrap();
        let orig = recover_original(&s, &tr, &path);
        assert_eq!(orig[0], init);
        for (z, big) in tr.states.iter().zip(&orig) {
            let a = s.grid1.norm(&z.x, Metric::Hminus1);
            let b = s.grid1.norm(&big.x, Metric::Hminus1);
            assert!((a - b).abs() < 1e-9);
        }
        let s0 = field_setup(5, 0.0, CouplingFamily::Zero, CouplingFamily::Zero);
        let tr0 = solve_rescaled(&s0, &path, Window::from_origin(60, 1), &init, &Schedule::Constant(0), 20)
            .unwrap();
        assert_eq!(recover_original(&s0, &tr0, &path), tr0.states);
    }

    #[test]
    fn step_above_stability_is_rejected() {
        let s = scalar_setup(5, 0.0, linear(), CouplingFamily::Zero, 0.0);
        let dt = 2.0 * setup_stable_step(&s);
        let path = sample_brownian(0.0, 10.0 * dt, dt, 1).unwrap();
        let init = s.zero_state();
        assert!(solve_rescaled(&s, &path, Window::from_origin(10, 1), &init, &Schedule::Constant(0), 0).is_err());
    }

    #[test]
    fn prop1_closed_form_for_eigenvector() {
        let s = scalar_setup(7, 0.0, linear(), CouplingFamily::Zero, 0.0);
        let lam = s.grid1.eigenvalue_jk(1, 1);
        let step = 2f64.powi(-12);
        let cfg = RateConfig {
            epsilons: (5..=9).map(|k| 2f64.powi(-k)).collect(),
            n_mc: 2,
            seed: 1,
            step,
            control: 0,
            reference_refinement: 1,
        };
        let init = CoupledState {
            x: s.grid1.eigenvector_jk(1, 1),
            y: Component::Scalar(0.0),
        };
        let rep = prop1_rate(&s, &init, &cfg).unwrap();
        for (e, v) in cfg.epsilons.iter().zip(&rep.errors) {
            let m = (e / step).round() as i32;
            let exact = (1.0 - (1.0 - step * lam).powi(m)).powi(2) / lam;
            assert!((v - exact).abs() < 1e-12 * exact.max(1e-300) + 1e-15, "{v} vs {exact}");
        }
        let slope = rep.slope.unwrap();
        assert!(slope > 1.8 && slope < 2.05, "{slope}");
        assert!(rep.wide_confidence);
    }

    #[test]
    fn prop2_zero_for_state_independent_forcing() {
        let s = scalar_setup(5, 2.0, linear(), CouplingFamily::Zero, 0.0);
        let cfg = RateConfig {
            epsilons: vec![2f64.powi(-7), 2f64.powi(-8)],
            n_mc: 3,
            seed: 2,
            step: 2f64.powi(-12),
            control: 0,
            reference_refinement: 4,
        };
        let init = CoupledState {
            x: s.grid1.eigenvector_jk(1, 1),
            y: Component::Scalar(1.0),
        };
        let rep = prop2_rate(&s, &init, &cfg).unwrap();
        // f₂ = 0 · y, so both schemes share their forcing
        assert!(rep.errors.iter().all(|e| *e < 1e-20), "{:?}", rep.errors);
    }
}
