//! TOML experiment configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::drift::{build_drift, build_group, DriftField, StreamFunction};
use crate::dynamics::{setup_stable_step, CoupledState, ModelSpec, RateConfig, Setup};
use crate::error::{Error, Result};
use crate::model::{
    make_beta, make_coupling, BetaKind, Component, ControlSet, CouplingFamily, LinearPart, Space,
    Target,
};
use crate::spatial::{build_grid, Field, GridDomain};
use crate::stabilization::StabilizationConfig;
use crate::viability::ConstraintKind;

/// `amplitude · e_{jk}` with 1-based mode numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeTerm {
    pub j: usize,
    pub k: usize,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComponentSpec {
    Scalar(f64),
    Modes(Vec<ModeTerm>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CouplingSpec {
    Zero,
    Decay {
        c: f64,
    },
    /// `f = mx·x + my·y + Σ u_i gains_i + offset`
    Affine {
        #[serde(default)]
        mx: f64,
        #[serde(default)]
        my: f64,
        #[serde(default)]
        gains: Vec<ComponentSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offset: Option<ComponentSpec>,
    },
    FeedbackDamping {
        kappa: f64,
        profile: Vec<ModeTerm>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Auto {
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSpec {
    Value(f64),
    Named(Auto),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirstComponent {
    pub n: usize,
    pub stream: StreamFunction,
    pub beta: BetaKind,
    pub coupling: CouplingSpec,
    pub init: Vec<ModeTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SecondComponent {
    Scalar {
        coupling: CouplingSpec,
        /// Initial value; defaults to `‖ξ‖²_{H⁻¹}`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        init: Option<f64>,
    },
    Field {
        n: usize,
        stream: StreamFunction,
        beta: BetaKind,
        coupling: CouplingSpec,
        init: Vec<ModeTerm>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub horizon: f64,
    pub step: StepSpec,
    pub epsilons: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    /// `ε = 2^{-k}` for each listed `k`.
    pub exponents: Vec<i32>,
    pub step: f64,
    pub n_mc: usize,
    #[serde(default = "default_refinement")]
    pub reference_refinement: usize,
    #[serde(default)]
    pub control: usize,
}

fn default_refinement() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilizeConfig {
    pub c_values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmegaConfig {
    /// Table over `δ = 2^{-k}`, `k = 1..=max_exponent`.
    pub max_exponent: i32,
    pub mc_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Below 2^63 (TOML integers are signed).
    pub seeds: Vec<u64>,
    pub n_mc: usize,
    pub output_dir: String,
    pub controls: Vec<Vec<f64>>,
    pub first: FirstComponent,
    pub second: SecondComponent,
    pub constraint: ConstraintKind,
    pub time: TimeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<RatesConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stabilization: Option<StabilizeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<OmegaConfig>,
}

/// Drift fields of a built setup, kept for validation.
pub struct Built {
    pub setup: Setup,
    pub drift1: DriftField,
    pub drift2: Option<DriftField>,
}

fn modes_to_field(grid: &GridDomain, modes: &[ModeTerm]) -> Result<Field> {
    let n = grid.n_per_dim();
    let mut out = grid.zeros();
    for m in modes {
        if m.j == 0 || m.k == 0 || m.j > n || m.k > n || !m.amplitude.is_finite() {
            return Err(Error::Config(format!(
                "mode ({}, {}) with amplitude {} is not valid on an n = {n} grid",
                m.j, m.k, m.amplitude
            )));
        }
        out.axpy(m.amplitude, &grid.eigenvector_jk(m.j, m.k));
    }
    Ok(out)
}

fn component(space: &Space, spec: &ComponentSpec) -> Result<Component> {
    match (space, spec) {
        (Space::Scalar, ComponentSpec::Scalar(v)) => Ok(Component::Scalar(*v)),
        (Space::Grid(g), ComponentSpec::Modes(m)) => Ok(Component::Field(modes_to_field(g, m)?)),
        _ => Err(Error::Config(
            "component given as a scalar for a grid (or modes for a scalar)".into(),
        )),
    }
}

fn scaled(g: f64) -> LinearPart {
    if g == 0.0 {
        LinearPart::Zero
    } else {
        LinearPart::Scaled(g)
    }
}

/// Model coupling for `spec`, with `out` the target component's space.
pub fn coupling_family(
    spec: &CouplingSpec,
    grid1: &GridDomain,
    out: &Space,
) -> Result<CouplingFamily> {
    Ok(match spec {
        CouplingSpec::Zero => CouplingFamily::Zero,
        CouplingSpec::Decay { c } => CouplingFamily::Decay { c: *c },
        CouplingSpec::Affine {
            mx,
            my,
            gains,
            offset,
        } => CouplingFamily::Affine {
            mx: scaled(*mx),
            my: scaled(*my),
            gains: gains.iter().map(|g| component(out, g)).collect::<Result<_>>()?,
            offset: offset.as_ref().map(|o| component(out, o)).transpose()?,
        },
        CouplingSpec::FeedbackDamping { kappa, profile } => CouplingFamily::FeedbackDamping {
            kappa: *kappa,
            profile: modes_to_field(grid1, profile)?,
        },
    })
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.n_mc == 0 {
            return bad("n_mc must be positive".into());
        }
        if !(self.time.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.time.horizon));
        }
        if let StepSpec::Value(dt) = self.time.step {
            if !(dt > 0.0) || !dt.is_finite() {
                return bad(format!("step must be positive, got {dt}"));
            }
        }
        if self.time.epsilons.is_empty() || self.time.epsilons.iter().any(|e| !(*e > 0.0)) {
            return bad("epsilons must be a non-empty list of positive values".into());
        }
        if let Some(r) = &self.rates {
            if r.exponents.len() < 2 || r.n_mc == 0 || !(r.step > 0.0) || r.reference_refinement < 2 {
                return bad("rates need ≥ 2 exponents, n_mc > 0, step > 0, refinement ≥ 2".into());
            }
        }
        if let Some(s) = &self.stabilization {
            if s.c_values.is_empty() {
                return bad("stabilization needs at least one c value".into());
            }
        }
        if let Some(o) = &self.omega {
            if o.max_exponent < 1 || o.mc_samples < 2 {
                return bad("omega needs max_exponent ≥ 1 and mc_samples ≥ 2".into());
            }
        }
        ControlSet::new(self.controls.clone()).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn controls(&self) -> Result<ControlSet> {
        ControlSet::new(self.controls.clone())
    }

    pub fn build(&self) -> Result<Built> {
        let f = &self.first;
        let grid1 = build_grid(f.n)?;
        let drift1 = build_drift(&grid1, f.stream.clone())?;
        let group1 = build_group(&grid1, &drift1)?;
        let controls = self.controls()?;
        let g1_space = Space::Grid(grid1.clone());
        let (space2, group2, drift2, beta2, f2_spec) = match &self.second {
            SecondComponent::Scalar { coupling, .. } => (
                Space::Scalar,
                None,
                None,
                make_beta(BetaKind::Zero, true)?,
                coupling,
            ),
            SecondComponent::Field {
                n,
                stream,
                beta,
                coupling,
                ..
            } => {
                let grid2 = build_grid(*n)?;
                let drift2 = build_drift(&grid2, stream.clone())?;
                let group2 = build_group(&grid2, &drift2)?;
                (
                    Space::Grid(grid2),
                    Some(group2),
                    Some(drift2),
                    make_beta(beta.clone(), false)?,
                    coupling,
                )
            }
        };
        let f1 = make_coupling(
            coupling_family(&f.coupling, &grid1, &g1_space)?,
            Target::First,
            &grid1,
            &space2,
            &controls,
        )?;
        let f2 = make_coupling(
            coupling_family(f2_spec, &grid1, &space2)?,
            Target::Second,
            &grid1,
            &space2,
            &controls,
        )?;
        let model = ModelSpec {
            beta1: make_beta(f.beta.clone(), false)?,
            beta2,
            f1,
            f2,
            controls,
        };
        let setup = Setup::new(grid1, group1, space2, group2, model)?;
        Ok(Built {
            setup,
            drift1,
            drift2,
        })
    }

    pub fn initial_state(&self, setup: &Setup) -> Result<CoupledState> {
        let x = modes_to_field(&setup.grid1, &self.first.init)?;
        let y = match (&self.second, &setup.space2) {
            (SecondComponent::Scalar { init, .. }, Space::Scalar) => Component::Scalar(
                init.unwrap_or_else(|| setup.grid1.norm_sq(&x, crate::spatial::Metric::Hminus1)),
            ),
            (SecondComponent::Field { init, .. }, Space::Grid(g)) => {
                Component::Field(modes_to_field(g, init)?)
            }
            _ => unreachable!("setup built from this config"),
        };
        Ok(CoupledState { x, y })
    }

    /// Solver step: the configured value, or the stable step for `auto`.
    pub fn step(&self, setup: &Setup) -> f64 {
        match self.time.step {
            StepSpec::Value(dt) => dt,
            StepSpec::Named(Auto::Auto) => setup_stable_step(setup),
        }
    }

    pub fn rate_config(&self, seed: u64) -> Option<RateConfig> {
        self.rates.as_ref().map(|r| RateConfig {
            epsilons: r.exponents.iter().map(|&k| 2f64.powi(-k)).collect(),
            n_mc: r.n_mc,
            seed,
            step: r.step,
            control: r.control,
            reference_refinement: r.reference_refinement,
        })
    }

    /// Stabilisation model for decay rate `c` built from the first component.
    pub fn stabilization_config(&self, c: f64) -> Result<StabilizationConfig> {
        let f = &self.first;
        let grid = build_grid(f.n)?;
        let group = build_group(&grid, &build_drift(&grid, f.stream.clone())?)?;
        let levels = self
            .stabilization
            .as_ref()
            .and_then(|s| s.levels)
            .unwrap_or(grid.dim());
        let family = coupling_family(&f.coupling, &grid, &Space::Grid(grid.clone()))?;
        StabilizationConfig::new(
            grid,
            group,
            make_beta(f.beta.clone(), false)?,
            family,
            self.controls()?,
            c,
            levels,
        )
    }

    /// Reference configuration: the decay-epigraph model on an n = 15 grid.
    pub fn example() -> Self {
        ExperimentConfig {
            seeds: vec![1],
            n_mc: 4,
            output_dir: "out".into(),
            controls: vec![vec![0.0], vec![1.0]],
            first: FirstComponent {
                n: 15,
                stream: StreamFunction::sin_sin(1.0),
                beta: BetaKind::Linear { slope: 1.0 },
                coupling: CouplingSpec::Zero,
                init: vec![
                    ModeTerm {
                        j: 1,
                        k: 1,
                        amplitude: 1.0,
                    },
                    ModeTerm {
                        j: 2,
                        k: 1,
                        amplitude: 0.3,
                    },
                ],
            },
            second: SecondComponent::Scalar {
                coupling: CouplingSpec::Decay { c: 9.8 },
                init: None,
            },
            constraint: ConstraintKind::DecayEpigraph,
            time: TimeConfig {
                horizon: 0.5,
                step: StepSpec::Named(Auto::Auto),
                epsilons: vec![0.1, 0.025],
            },
            rates: Some(RatesConfig {
                exponents: vec![5, 6, 7, 8, 9],
                step: 2f64.powi(-13),
                n_mc: 20,
                reference_refinement: 16,
                control: 0,
            }),
            stabilization: Some(StabilizeConfig {
                c_values: vec![9.8, 100.0],
                levels: None,
            }),
            omega: Some(OmegaConfig {
                max_exponent: 20,
                mc_samples: 100_000,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn example_round_trips_and_builds() {
        let cfg = ExperimentConfig::example();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml_string().unwrap(), text);
        let built = cfg.build().unwrap();
        let init = cfg.initial_state(&built.setup).unwrap();
        let eta = init.y.as_scalar().unwrap();
        assert!((eta - built.setup.grid1.norm_sq(&init.x, crate::spatial::Metric::Hminus1)).abs() < 1e-15);
        assert_eq!(cfg.step(&built.setup), setup_stable_step(&built.setup));
        assert_eq!(cfg.hash().unwrap().len(), 64);
    }

    #[test]
    fn field_second_component_builds() {
        let mut cfg = ExperimentConfig::example();
        cfg.first.n = 5;
        cfg.first.coupling = CouplingSpec::Affine {
            mx: 0.5,
            my: 0.5,
            gains: vec![],
            offset: Some(ComponentSpec::Modes(vec![ModeTerm { j: 1, k: 2, amplitude: 5.0 }])),
        };
        cfg.second = SecondComponent::Field {
            n: 5,
            stream: StreamFunction::Zero,
            beta: BetaKind::Linear { slope: 1.0 },
            coupling: CouplingSpec::Affine { mx: 0.5, my: 0.0, gains: vec![], offset: None },
            init: vec![ModeTerm { j: 2, k: 1, amplitude: 1.0 }],
        };
        cfg.constraint = ConstraintKind::CenteredBall { radius: 2.0 };
        cfg.time.step = StepSpec::Value(1e-4);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        let built = cfg.build().unwrap();
        assert!(built.drift2.is_some());
        assert_eq!(cfg.step(&built.setup), 1e-4);
    }

    #[test]
    fn malformed_configs_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml_str("seeds = ["), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::example();
        cfg.seeds.clear();
        let text = cfg.to_toml_string().unwrap();
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = ExperimentConfig::example().to_toml_string().unwrap() + "\nunknown = 1\n";
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let mut cfg = ExperimentConfig::example();
        cfg.first.init = vec![ModeTerm { j: 16, k: 1, amplitude: 1.0 }];
        assert!(cfg.initial_state(&cfg.build().unwrap().setup).is_err());
    }

    fn arb_modes() -> impl Strategy<Value = Vec<ModeTerm>> {
        prop::collection::vec(
            (1usize..5, 1usize..5, -10.0f64..10.0).prop_map(|(j, k, amplitude)| ModeTerm { j, k, amplitude }),
            0..4,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn emit_parse_emit_is_identity(
            seeds in prop::collection::vec(0u64..=i64::MAX as u64, 1..4),
            n_mc in 1usize..1000,
            horizon in 1e-3f64..10.0,
            step in prop_oneof![Just(None), (1e-6f64..1e-2).prop_map(Some)],
            eps in prop::collection::vec(1e-4f64..1.0, 1..5),
            c in -50.0f64..50.0,
            init in arb_modes(),
            amp in -3.0f64..3.0,
            radius in 0.1f64..10.0,
            ball in any::<bool>(),
        ) {
            let mut cfg = ExperimentConfig::example();
            cfg.seeds = seeds;
            cfg.n_mc = n_mc;
            cfg.time.horizon = horizon;
            cfg.time.step = step.map_or(StepSpec::Named(Auto::Auto), StepSpec::Value);
            cfg.time.epsilons = eps;
            cfg.first.init = init.clone();
            cfg.first.stream = StreamFunction::Modulated { amplitude: amp };
            cfg.first.coupling = CouplingSpec::FeedbackDamping { kappa: c, profile: init };
            cfg.second = SecondComponent::Scalar { coupling: CouplingSpec::Decay { c }, init: Some(c.abs()) };
            if ball {
                cfg.constraint = ConstraintKind::CenteredBall { radius };
            }
            let text = cfg.to_toml_string().unwrap();
            let back = ExperimentConfig::from_toml_str(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_toml_string().unwrap(), text);
        }
    }
}
