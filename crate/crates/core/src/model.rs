//! Nonlinearities β, coupling maps f, finite control sets and the empirical
//! validators for the standing Lipschitz/monotonicity assumptions.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::{Field, GridDomain, Metric};

/// Families of scalar nonlinearities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BetaKind {
    /// `β(r) = slope · r`
    Linear { slope: f64 },
    /// `β(r) = slope · r + amplitude · sin r`
    SineShift { slope: f64, amplitude: f64 },
    /// `β(r) = α r + κ sign(r) min(|r|, R)^m` with κ chosen so that the
    /// secant slopes fill `[α, L]`.
    SaturatedPower {
        alpha: f64,
        lip: f64,
        exponent: f64,
        radius: f64,
    },
    /// `β ≡ 0`; only legal for the second component of the decay set-up.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nonlinearity {
    kind: BetaKind,
    lip: f64,
    mono: f64,
    may_be_zero: bool,
    kappa: f64,
}

/// Empirical constants from sampled secant slopes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Certificate {
    pub lip_est: f64,
    pub mono_est: f64,
    pub pass: bool,
}

const VALIDATION_BUDGET: usize = 10_000;
const VALIDATION_SEED: u64 = 0x5eed_cafe;
const SAMPLE_RANGE: f64 = 10.0;

pub fn make_beta(kind: BetaKind, allow_zero: bool) -> Result<Nonlinearity> {
    let bad = |msg: String| Err(Error::Assumption(msg));
    let (lip, mono, kappa) = match kind {
        BetaKind::Linear { slope } => {
            if !(slope > 0.0) || !slope.is_finite() {
                return bad(format!("linear β needs slope > 0, got {slope}"));
            }
            (slope, slope, 0.0)
        }
        BetaKind::SineShift { slope, amplitude } => {
            if !(slope > amplitude.abs()) || !slope.is_finite() || !amplitude.is_finite() {
                return bad(format!(
                    "sine-shift β needs slope > |amplitude| (got {slope}, {amplitude})"
                ));
            }
            (slope + amplitude.abs(), slope - amplitude.abs(), 0.0)
        }
        BetaKind::SaturatedPower {
            alpha,
            lip,
            exponent,
            radius,
        } => {
            if !(alpha > 0.0) || !(lip > alpha) || !(exponent >= 1.0) || !(radius > 0.0) {
                return bad(format!(
                    "saturated power β needs 0 < α < L, m ≥ 1, R > 0 (got α={alpha}, L={lip}, m={exponent}, R={radius})"
                ));
            }
            let kappa = (lip - alpha) / (exponent * radius.powf(exponent - 1.0));
            (lip, alpha, kappa)
        }
        BetaKind::Zero => {
            if !allow_zero {
                return bad("β ≡ 0 violates strong monotonicity".into());
            }
            (0.0, 0.0, 0.0)
        }
    };
    let beta = Nonlinearity {
        may_be_zero: matches!(kind, BetaKind::Zero),
        kind,
        lip,
        mono,
        kappa,
    };
    if !beta.may_be_zero {
        let cert = validate_scalar(
            |r| beta.eval(r),
            beta.lip,
            beta.mono,
            VALIDATION_BUDGET,
            VALIDATION_SEED,
        );
        if !cert.pass {
            return bad(format!(
                "declared constants (lip={}, mono={}) not certified: {cert:?}",
                beta.lip, beta.mono
            ));
        }
    }
    Ok(beta)
}

impl Nonlinearity {
    pub fn kind(&self) -> &BetaKind {
        &self.kind
    }

    /// `[β]₁`
    pub fn lip(&self) -> f64 {
        self.lip
    }

    /// `α`
    pub fn mono(&self) -> f64 {
        self.mono
    }

    pub fn is_zero(&self) -> bool {
        self.may_be_zero
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, BetaKind::Linear { .. } | BetaKind::Zero)
    }

    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        match self.kind {
            BetaKind::Linear { slope } => slope * r,
            BetaKind::SineShift { slope, amplitude } => slope * r + amplitude * r.sin(),
            BetaKind::SaturatedPower {
                alpha,
                exponent,
                radius,
                ..
            } => alpha * r + self.kappa * r.signum() * r.abs().min(radius).powf(exponent),
            BetaKind::Zero => 0.0,
        }
    }

    pub fn apply(&self, phi: &Field) -> Field {
        phi.map(|r| self.eval(r))
    }

    pub fn certify(&self, budget: usize, seed: u64) -> Certificate {
        validate_scalar(|r| self.eval(r), self.lip, self.mono, budget, seed)
    }
}

/// Sampled secant slopes of `f`: half of the budget on uniform pairs, half on
/// close pairs so that derivative extrema are resolved.
///
/// Passes iff `mono_est ≥ mono − 1e-9`, `lip_est ≤ lip + 1e-9` and
/// `mono_est > 0`.
pub fn validate_scalar(
    f: impl Fn(f64) -> f64,
    lip: f64,
    mono: f64,
    budget: usize,
    seed: u64,
) -> Certificate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..budget {
        let (r, s) = if i % 2 == 0 {
            (
                rng.gen_range(-SAMPLE_RANGE..SAMPLE_RANGE),
                rng.gen_range(-SAMPLE_RANGE..SAMPLE_RANGE),
            )
        } else {
            let c = rng.gen_range(-SAMPLE_RANGE..SAMPLE_RANGE);
            let gap = 10f64.powf(rng.gen_range(-4.0..-1.0));
            (c, c + gap)
        };
        if r == s {
            continue;
        }
        let q = (f(r) - f(s)) / (r - s);
        lo = lo.min(q);
        hi = hi.max(q.abs());
    }
    Certificate {
        lip_est: hi,
        mono_est: lo,
        pass: lo >= mono - 1e-9 && hi <= lip + 1e-9 && lo > 0.0,
    }
}

/// Finite control set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    points: Vec<Vec<f64>>,
}

impl ControlSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidParameter("control set is empty".into()));
        }
        let arity = points[0].len();
        if points.iter().any(|p| p.len() != arity) {
            return Err(Error::InvalidParameter(
                "control points have different arities".into(),
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite control value".into()));
        }
        Ok(Self { points })
    }

    pub fn singleton_zero(arity: usize) -> Self {
        Self {
            points: vec![vec![0.0; arity]],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn arity(&self) -> usize {
        self.points[0].len()
    }

    pub fn point(&self, idx: usize) -> &[f64] {
        &self.points[idx]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
}

/// Value of the second component: a grid function or (decay mode) a scalar.
#[derive(Debug, Clone, PartialEq)]
pub enum Component {
    Field(Field),
    Scalar(f64),
}

impl Component {
    pub fn as_field(&self) -> Option<&Field> {
        match self {
            Component::Field(f) => Some(f),
            Component::Scalar(_) => None,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Component::Scalar(v) => Some(*v),
            Component::Field(_) => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Component::Field(f) => f.is_finite(),
            Component::Scalar(v) => v.is_finite(),
        }
    }

    /// `self += alpha * other`; kinds must agree.
    pub fn axpy(&mut self, alpha: f64, other: &Component) {
        match (self, other) {
            (Component::Field(a), Component::Field(b)) => a.axpy(alpha, b),
            (Component::Scalar(a), Component::Scalar(b)) => *a += alpha * b,
            _ => panic!("component kinds differ"),
        }
    }

    pub fn scaled(&self, alpha: f64) -> Component {
        match self {
            Component::Field(f) => Component::Field(f * alpha),
            Component::Scalar(v) => Component::Scalar(alpha * v),
        }
    }

    pub fn difference(&self, other: &Component) -> Component {
        let mut d = self.clone();
        d.axpy(-1.0, other);
        d
    }

    pub fn zeros_like(&self) -> Component {
        match self {
            Component::Field(f) => Component::Field(Field::zeros(f.n_per_dim())),
            Component::Scalar(_) => Component::Scalar(0.0),
        }
    }
}

/// Space carrying a component: a grid (H⁻¹ norm) or the real line.
#[derive(Debug, Clone)]
pub enum Space {
    Grid(GridDomain),
    Scalar,
}

impl Space {
    pub fn norm(&self, c: &Component) -> f64 {
        self.norm_sq(c).sqrt()
    }

    pub fn norm_sq(&self, c: &Component) -> f64 {
        match (self, c) {
            (Space::Grid(g), Component::Field(f)) => g.norm_sq(f, Metric::Hminus1),
            (Space::Scalar, Component::Scalar(v)) => v * v,
            _ => panic!("component does not live in this space"),
        }
    }

    pub fn zero(&self) -> Component {
        match self {
            Space::Grid(g) => Component::Field(g.zeros()),
            Space::Scalar => Component::Scalar(0.0),
        }
    }

    pub fn holds(&self, c: &Component) -> bool {
        match (self, c) {
            (Space::Grid(g), Component::Field(f)) => f.n_per_dim() == g.n_per_dim(),
            (Space::Scalar, Component::Scalar(_)) => true,
            _ => false,
        }
    }

    pub fn is_scalar(&self) -> bool {
        matches!(self, Space::Scalar)
    }

    /// Operator norm of a dense map in the metric of the two spaces.
    fn dense_norm(&self, from: &Space, m: &DMatrix<f64>) -> f64 {
        let (Space::Grid(to_g), Space::Grid(from_g)) = (self, from) else {
            return f64::NAN;
        };
        // T_to M T_from⁻¹, assembled column by column
        let dim = from_g.dim();
        let mut op = DMatrix::zeros(to_g.dim(), dim);
        let mut unit = nalgebra::DVector::zeros(dim);
        for q in 0..dim {
            unit[q] = 1.0;
            let phi = from_g.from_metric_coords(&unit);
            unit[q] = 0.0;
            let out = Field::from_dvector(to_g.n_per_dim(), m * phi.vector());
            op.set_column(q, &to_g.to_metric_coords(&out));
        }
        op.singular_values().iter().cloned().fold(0.0, f64::max)
    }
}

/// Linear piece of an affine coupling.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearPart {
    Zero,
    /// `γ · v` (same space)
    Scaled(f64),
    /// `η ↦ η g` from the scalar line into a grid
    Profile(Field),
    /// Dense matrix between grids
    Dense(DMatrix<f64>),
}

impl LinearPart {
    fn apply(&self, v: &Component, target: &Space) -> Component {
        match (self, v) {
            (LinearPart::Zero, _) => target.zero(),
            (LinearPart::Scaled(g), _) => v.scaled(*g),
            (LinearPart::Profile(p), Component::Scalar(eta)) => Component::Field(p * *eta),
            (LinearPart::Dense(m), Component::Field(f)) => {
                let n = match target {
                    Space::Grid(g) => g.n_per_dim(),
                    Space::Scalar => unreachable!("validated at construction"),
                };
                Component::Field(Field::from_dvector(n, m * f.vector()))
            }
            _ => unreachable!("validated at construction"),
        }
    }

    fn check(&self, from: &Space, to: &Space) -> Result<f64> {
        let err = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        match self {
            LinearPart::Zero => Ok(0.0),
            LinearPart::Scaled(g) => {
                if !g.is_finite() {
                    return err("non-finite scaling");
                }
                match (from, to) {
                    (Space::Scalar, Space::Scalar) => Ok(g.abs()),
                    (Space::Grid(a), Space::Grid(b)) if a.n_per_dim() == b.n_per_dim() => {
                        Ok(g.abs())
                    }
                    _ => err("scaled linear part needs identical source and target spaces"),
                }
            }
            LinearPart::Profile(p) => match (from, to) {
                (Space::Scalar, Space::Grid(g)) if p.n_per_dim() == g.n_per_dim() => {
                    if !p.is_finite() {
                        return err("non-finite profile");
                    }
                    Ok(g.norm(p, Metric::Hminus1))
                }
                _ => err("profile linear part maps the scalar line into a grid"),
            },
            LinearPart::Dense(m) => match (from, to) {
                (Space::Grid(a), Space::Grid(b)) if m.ncols() == a.dim() && m.nrows() == b.dim() => {
                    if m.iter().any(|v| !v.is_finite()) {
                        return err("non-finite matrix entry: L² restriction is unbounded");
                    }
                    Ok(to.dense_norm(from, m))
                }
                _ => err("dense linear part has the wrong shape"),
            },
        }
    }
}

/// Coupling families.
#[derive(Debug, Clone, PartialEq)]
pub enum CouplingFamily {
    Zero,
    /// `f(x, y, u) = M_x x + M_y y + Σ_i u_i g_i + g₀`
    Affine {
        mx: LinearPart,
        my: LinearPart,
        gains: Vec<Component>,
        offset: Option<Component>,
    },
    /// `f = −c · (own component)`
    Decay { c: f64 },
    /// `f₁(x, η, u) = −u₀ x + κ η g` with scalar second argument.
    FeedbackDamping { kappa: f64, profile: Field },
}

/// Which equation a coupling drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    First,
    Second,
}

#[derive(Debug, Clone)]
pub struct CouplingMap {
    family: CouplingFamily,
    target: Target,
    lip: f64,
    sup0: f64,
    arity: usize,
}

pub fn make_coupling(
    family: CouplingFamily,
    target: Target,
    space1: &GridDomain,
    space2: &Space,
    controls: &ControlSet,
) -> Result<CouplingMap> {
    let x_space = Space::Grid(space1.clone());
    let out_space = match target {
        Target::First => x_space.clone(),
        Target::Second => space2.clone(),
    };
    let (lip, sup0) = match &family {
        CouplingFamily::Zero => (0.0, 0.0),
        CouplingFamily::Affine {
            mx,
            my,
            gains,
            offset,
        } => {
            let lx = mx.check(&x_space, &out_space)?;
            let ly = my.check(space2, &out_space)?;
            if gains.len() > controls.arity() {
                return Err(Error::InvalidParameter(format!(
                    "{} gains for controls of arity {}",
                    gains.len(),
                    controls.arity()
                )));
            }
            for g in gains.iter().chain(offset.iter()) {
                if !out_space.holds(g) || !g.is_finite() {
                    return Err(Error::InvalidParameter(
                        "gain/offset must be finite and live in the target space".into(),
                    ));
                }
            }
            let mut sup0: f64 = 0.0;
            for u in controls.points() {
                let mut v = offset.clone().unwrap_or_else(|| out_space.zero());
                for (ui, g) in u.iter().zip(gains) {
                    v.axpy(*ui, g);
                }
                sup0 = sup0.max(out_space.norm(&v));
            }
            (lx.max(ly), sup0)
        }
        CouplingFamily::Decay { c } => {
            if !c.is_finite() {
                return Err(Error::InvalidParameter("non-finite decay rate".into()));
            }
            (c.abs(), 0.0)
        }
        CouplingFamily::FeedbackDamping { kappa, profile } => {
            if target != Target::First || !space2.is_scalar() {
                return Err(Error::InvalidParameter(
                    "feedback damping drives the first component with a scalar second".into(),
                ));
            }
            if controls.arity() < 1 {
                return Err(Error::InvalidParameter(
                    "feedback damping needs controls of arity ≥ 1".into(),
                ));
            }
            if profile.n_per_dim() != space1.n_per_dim() || !profile.is_finite() || !kappa.is_finite() {
                return Err(Error::InvalidParameter("invalid feedback profile".into()));
            }
            let damp = controls
                .points()
                .iter()
                .map(|u| u[0].abs())
                .fold(0.0, f64::max);
            let ly = kappa.abs() * space1.norm(profile, Metric::Hminus1);
            (damp.max(ly), 0.0)
        }
    };
    Ok(CouplingMap {
        family,
        target,
        lip,
        sup0,
        arity: controls.arity(),
    })
}

impl CouplingMap {
    pub fn family(&self) -> &CouplingFamily {
        &self.family
    }

    pub fn target(&self) -> Target {
        self.target
    }

    /// `[f]₁`
    pub fn lip(&self) -> f64 {
        self.lip
    }

    /// `sup_u ‖f(0, 0, u)‖`
    pub fn sup0(&self) -> f64 {
        self.sup0
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.family, CouplingFamily::Zero)
    }

    /// True when `f` does not depend on the state.
    pub fn is_state_independent(&self) -> bool {
        match &self.family {
            CouplingFamily::Zero => true,
            CouplingFamily::Affine { mx, my, .. } => {
                matches!(mx, LinearPart::Zero) && matches!(my, LinearPart::Zero)
            }
            CouplingFamily::Decay { c } => *c == 0.0,
            CouplingFamily::FeedbackDamping { .. } => false,
        }
    }

    /// True when `f` ignores the control.
    pub fn is_control_independent(&self) -> bool {
        match &self.family {
            CouplingFamily::Affine { gains, .. } => gains.is_empty(),
            CouplingFamily::FeedbackDamping { .. } => false,
            _ => true,
        }
    }

    pub fn eval(&self, x: &Field, y: &Component, u: &[f64], out_space: &Space) -> Component {
        match &self.family {
            CouplingFamily::Zero => out_space.zero(),
            CouplingFamily::Affine {
                mx,
                my,
                gains,
                offset,
            } => {
                let mut v = mx.apply(&Component::Field(x.clone()), out_space);
                v.axpy(1.0, &my.apply(y, out_space));
                for (ui, g) in u.iter().zip(gains) {
                    v.axpy(*ui, g);
                }
                if let Some(o) = offset {
                    v.axpy(1.0, o);
                }
                v
            }
            CouplingFamily::Decay { c } => match self.target {
                Target::First => Component::Field(x * (-c)),
                Target::Second => y.scaled(-c),
            },
            CouplingFamily::FeedbackDamping { kappa, profile } => {
                let eta = y.as_scalar().expect("scalar second component");
                let mut v = x * (-u[0]);
                if *kappa != 0.0 {
                    v.axpy(kappa * eta, profile);
                }
                Component::Field(v)
            }
        }
    }
}

/// Probe-based estimate of `[f]₁` in the product H⁻¹ metric.
pub fn validate_coupling(
    f: &CouplingMap,
    grid1: &GridDomain,
    space2: &Space,
    controls: &ControlSet,
    budget: usize,
    seed: u64,
) -> Certificate {
    let out_space = match f.target {
        Target::First => Space::Grid(grid1.clone()),
        Target::Second => space2.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random_field = |g: &GridDomain, rng: &mut ChaCha8Rng| {
        let v = (0..g.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Field::from_vec(g.n_per_dim(), v).unwrap()
    };
    let random_second = |rng: &mut ChaCha8Rng| match space2 {
        Space::Grid(g) => Component::Field(random_field(g, rng)),
        Space::Scalar => Component::Scalar(rng.gen_range(-1.0..1.0)),
    };
    let mut worst: f64 = 0.0;
    for i in 0..budget {
        let u = controls.point(i % controls.len());
        let x1 = random_field(grid1, &mut rng);
        let x2 = random_field(grid1, &mut rng);
        let y1 = random_second(&mut rng);
        let y2 = random_second(&mut rng);
        let df = f
            .eval(&x1, &y1, u, &out_space)
            .difference(&f.eval(&x2, &y2, u, &out_space));
        let dx = grid1.norm(&(&x1 - &x2), Metric::Hminus1);
        let dy = space2.norm(&y1.difference(&y2));
        if dx + dy > 0.0 {
            worst = worst.max(out_space.norm(&df) / (dx + dy));
        }
    }
    Certificate {
        lip_est: worst,
        mono_est: f64::NAN,
        pass: worst <= f.lip + 1e-9,
    }
}
