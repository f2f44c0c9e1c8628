//! Command-line orchestration: `pm-viab <subcommand> --config <path>`.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, SecondComponent};
use crate::drift::{omega, omega_defect, omega_mc, sample_brownian};
use crate::dynamics::{prop1_rate, prop2_rate, RateReport};
use crate::error::{Error, Result};
use crate::stats::loglog_fit;
use crate::validation::{group_suite, spatial_suite, Check};
use crate::viability::{
    appendix_initial_estimate, construct_eps_approx, make_constraint, near_viability_gap,
    tangency_profile, validate_eps_approx, EpsApproxOptions,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Environment variable overriding the output directory.
pub const OUT_ENV: &str = "PM_VIAB_OUT";

const OPERATOR_SAMPLES: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "pm-viab", version, about = "Rescaled stochastic porous-media experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Spatial and drift-group invariant suite.
    ValidateOperators(Common),
    /// Strong rates of the fundamental scheme and of the scheme gap.
    Rates(Common),
    /// Quasi-tangency profile Q(ε).
    Tangency(Common),
    /// Construct and validate ε-approximate solutions.
    ApproxSolve(Common),
    /// Closed-loop decay reports over the configured decay rates.
    Stabilize(Common),
    /// Near-viability gap over the configured ε.
    NearViability(Common),
    /// ω table, defect ratios and a Monte Carlo check of ω(1).
    Omega(Common),
    /// Print the reference configuration.
    ExampleConfig,
}

enum Failure {
    Config(String),
    Io(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(e) => Failure::Io(e.to_string()),
            Error::Config(_)
            | Error::InvalidParameter(_)
            | Error::ShapeMismatch { .. }
            | Error::NotTangent { .. }
            | Error::Assumption(_)
            | Error::NotInConstraint { .. } => Failure::Config(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

/// Parses `args` and runs the subcommand; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Config(m)) => {
            eprintln!("error: invalid configuration: {m}");
            EXIT_CONFIG
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: i/o failure: {m}");
            EXIT_IO
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            EXIT_CHECK_FAILED
        }
    }
}

struct Context {
    cfg: ExperimentConfig,
    hash: String,
    out: PathBuf,
    workers: usize,
}

impl Context {
    fn load(common: &Common) -> std::result::Result<Self, Failure> {
        let text = fs::read_to_string(&common.config)
            .map_err(|e| Failure::Io(format!("{}: {e}", common.config.display())))?;
        let cfg = ExperimentConfig::from_toml_str(&text)?;
        let hash = cfg.hash()?;
        let out = common
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
        fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
        Ok(Context {
            cfg,
            hash,
            out,
            workers: common.workers.max(1),
        })
    }

    fn provenance(&self) -> Value {
        json!({
            "artifact": "pm-viab",
            "version": env!("CARGO_PKG_VERSION"),
            "config_sha256": self.hash,
            "seeds": self.cfg.seeds,
        })
    }

    fn csv_header(&self) -> String {
        let seeds: Vec<String> = self.cfg.seeds.iter().map(|s| s.to_string()).collect();
        format!(
            "# pm-viab {} config_sha256={} seeds={}\n",
            env!("CARGO_PKG_VERSION"),
            self.hash,
            seeds.join(",")
        )
    }

    fn write(&self, name: &str, bytes: &[u8]) -> std::result::Result<(), Failure> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
    }

    fn write_json(&self, name: &str, mut body: Value) -> std::result::Result<(), Failure> {
        body["provenance"] = self.provenance();
        let mut text = serde_json::to_string_pretty(&body).expect("serialisable summary");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn write_csv(
        &self,
        name: &str,
        table: impl FnOnce(&mut Vec<u8>) -> Result<()>,
    ) -> std::result::Result<(), Failure> {
        let mut buf = self.csv_header().into_bytes();
        table(&mut buf)?;
        self.write(name, &buf)
    }
}

/// Runs `f` over `cells` on up to `workers` threads; results keep cell order.
fn fan_out<C: Sync, R: Send>(
    workers: usize,
    cells: &[C],
    f: impl Fn(&C) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if workers <= 1 || cells.len() <= 1 {
        return cells.iter().map(&f).collect();
    }
    let chunk = cells.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = cells
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(cells.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn dispatch(command: Command) -> std::result::Result<i32, Failure> {
    match command {
        Command::ExampleConfig => {
            print!("{}", ExperimentConfig::example().to_toml_string()?);
            Ok(EXIT_OK)
        }
        Command::ValidateOperators(c) => validate_operators(&Context::load(&c)?),
        Command::Rates(c) => rates(&Context::load(&c)?),
        Command::Tangency(c) => tangency(&Context::load(&c)?),
        Command::ApproxSolve(c) => approx_solve(&Context::load(&c)?),
        Command::Stabilize(c) => stabilize(&Context::load(&c)?),
        Command::NearViability(c) => near_viability(&Context::load(&c)?),
        Command::Omega(c) => omega_table(&Context::load(&c)?),
    }
}

fn checks_json(checks: &[Check]) -> Value {
    Value::Array(
        checks
            .iter()
            .map(|c| {
                json!({
                    "name": c.name,
                    "measured": c.measured,
                    "tolerance": c.tolerance,
                    "slack": c.slack(),
                    "pass": c.pass,
                })
            })
            .collect(),
    )
}

fn validate_operators(ctx: &Context) -> std::result::Result<i32, Failure> {
    let built = ctx.cfg.build()?;
    let seed = ctx.cfg.seeds[0];
    let s = &built.setup;
    let mut sections = vec![
        ("first grid", spatial_suite(&s.grid1, OPERATOR_SAMPLES, seed)),
        (
            "first drift group",
            group_suite(&s.grid1, &built.drift1, &s.group1, OPERATOR_SAMPLES, seed),
        ),
    ];
    if let (crate::model::Space::Grid(g2), Some(grp2), Some(d2)) =
        (&s.space2, &s.group2, &built.drift2)
    {
        sections.push(("second grid", spatial_suite(g2, OPERATOR_SAMPLES, seed)));
        sections.push((
            "second drift group",
            group_suite(g2, d2, grp2, OPERATOR_SAMPLES, seed),
        ));
    }
    let pass = sections.iter().all(|(_, cs)| cs.iter().all(|c| c.pass));
    let failing: Vec<String> = sections
        .iter()
        .flat_map(|(sec, cs)| cs.iter().filter(|c| !c.pass).map(move |c| format!("{sec}: {}", c.name)))
        .collect();
    let body = json!({
        "pass": pass,
        "samples": OPERATOR_SAMPLES,
        "sections": sections
            .iter()
            .map(|(name, cs)| json!({ "name": name, "checks": checks_json(cs) }))
            .collect::<Vec<_>>(),
        "failing": failing,
    });
    ctx.write_json("operators.json", body)?;
    for f in &failing {
        eprintln!("failed check: {f}");
    }
    Ok(if pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn na_or(v: Option<f64>) -> Value {
    v.map_or_else(|| json!("NA"), |x| json!(x))
}

fn rate_json(r: &RateReport) -> Value {
    json!({
        "slope": na_or(r.slope),
        "intercept": na_or(r.intercept),
        "C_emp": r.c_emp,
        "bound_exponent": r.exponent,
        "n_mc": r.n_mc,
        "seeds": [r.seed],
        "wide_confidence": r.wide_confidence,
        "reference_ratio": na_or(r.reference_ratio),
        "epsilons": r.epsilons,
        "errors": r.errors,
    })
}

fn rates(ctx: &Context) -> std::result::Result<i32, Failure> {
    let built = ctx.cfg.build()?;
    if ctx.cfg.rates.is_none() {
        return Err(Failure::Config("the rates subcommand needs a [rates] section".into()));
    }
    let init = ctx.cfg.initial_state(&built.setup)?;
    let seeds = ctx.cfg.seeds.clone();
    let reports = fan_out(ctx.workers, &seeds, |&seed| {
        let rc = ctx.cfg.rate_config(seed).expect("checked above");
        Ok((prop1_rate(&built.setup, &init, &rc)?, prop2_rate(&built.setup, &init, &rc)?))
    })?;
    let mut summary = Vec::new();
    for (seed, (r1, r2)) in seeds.iter().zip(&reports) {
        ctx.write_csv(&format!("rates_fundamental_seed{seed}.csv"), |w| r1.write_csv(w))?;
        ctx.write_csv(&format!("rates_gap_seed{seed}.csv"), |w| r2.write_csv(w))?;
        summary.push(json!({ "seed": seed, "fundamental": rate_json(r1), "gap": rate_json(r2) }));
    }
    ctx.write_json("rates.json", json!({ "runs": summary }))?;
    Ok(EXIT_OK)
}

fn tangency(ctx: &Context) -> std::result::Result<i32, Failure> {
    let built = ctx.cfg.build()?;
    let s = &built.setup;
    let k = make_constraint(ctx.cfg.constraint.clone(), s)?;
    let init = ctx.cfg.initial_state(s)?;
    let step = ctx.cfg.step(s);
    let seeds = ctx.cfg.seeds.clone();
    let profiles = fan_out(ctx.workers, &seeds, |&seed| {
        tangency_profile(&k, s, &init, &ctx.cfg.time.epsilons, ctx.cfg.n_mc, step, seed)
    })?;
    let mut summary = Vec::new();
    for (seed, p) in seeds.iter().zip(&profiles) {
        ctx.write_csv(&format!("tangency_seed{seed}.csv"), |w| p.write_csv(w))?;
        summary.push(json!({
            "seed": seed,
            "epsilons": p.epsilons,
            "q": p.q,
            "best_control": p.best_control,
            "q_by_control": p.q_by_control,
            "liminf_estimate": p.liminf_estimate,
            "n_mc": p.n_mc,
        }));
    }
    ctx.write_json("tangency.json", json!({ "profiles": summary }))?;
    Ok(EXIT_OK)
}

fn eps_label(e: f64) -> String {
    format!("{e}").replace('.', "p")
}

fn approx_solve(ctx: &Context) -> std::result::Result<i32, Failure> {
    let built = ctx.cfg.build()?;
    let s = &built.setup;
    let k = make_constraint(ctx.cfg.constraint.clone(), s)?;
    let init = ctx.cfg.initial_state(s)?;
    let step = ctx.cfg.step(s);
    let cells: Vec<(f64, u64)> = ctx
        .cfg
        .time
        .epsilons
        .iter()
        .flat_map(|&e| ctx.cfg.seeds.iter().map(move |&seed| (e, seed)))
        .collect();
    let results = fan_out(ctx.workers, &cells, |&(eps, seed)| {
        let opts = EpsApproxOptions {
            t: 0.0,
            horizon: ctx.cfg.time.horizon,
            eps,
            step,
            seed,
        };
        let rec = construct_eps_approx(&k, s, &init, &opts)?;
        let report = if rec.complete {
            Some(validate_eps_approx(&rec, &k, s, &init)?)
        } else {
            None
        };
        let durations: Vec<f64> = (1..=12)
            .map(|j| 2f64.powi(-j))
            .filter(|&d| d <= rec.t_bar - rec.t && d >= rec.step)
            .collect();
        let estimate = if durations.len() >= 2 {
            Some(appendix_initial_estimate(&rec, s, &durations)?)
        } else {
            None
        };
        Ok((rec, report, estimate))
    })?;
    let mut summary = Vec::new();
    for ((eps, seed), (rec, report, estimate)) in cells.iter().zip(&results) {
        let mut doc = rec.to_json(report.as_ref());
        doc["initial_estimate"] = json!(estimate);
        ctx.write_json(&format!("approx_eps{}_seed{seed}.json", eps_label(*eps)), doc)?;
        summary.push(json!({
            "eps": eps,
            "seed": seed,
            "complete": rec.complete,
            "diagnostic": rec.diagnostic,
            "all_clauses_pass": report.as_ref().map(|r| r.all_pass()),
            "correction_energy": rec.correction_energy(),
            "initial_estimate_slope": estimate.as_ref().and_then(|e| e.slope),
            "initial_estimate_C_emp": estimate.as_ref().map(|e| e.c_emp),
        }));
    }
    ctx.write_json("approx.json", json!({ "records": summary }))?;
    Ok(EXIT_OK)
}

fn stabilize(ctx: &Context) -> std::result::Result<i32, Failure> {
    let Some(stab) = &ctx.cfg.stabilization else {
        return Err(Failure::Config(
            "the stabilize subcommand needs a [stabilization] section".into(),
        ));
    };
    let horizon = ctx.cfg.time.horizon;
    let cells: Vec<(f64, u64)> = stab
        .c_values
        .iter()
        .flat_map(|&c| ctx.cfg.seeds.iter().map(move |&seed| (c, seed)))
        .collect();
    let results = fan_out(ctx.workers, &cells, |&(c, seed)| {
        let sc = ctx.cfg.stabilization_config(c)?;
        let xi = ctx.cfg.initial_state(&ctx.cfg.build()?.setup)?.x;
        let eta0 = match &ctx.cfg.second {
            SecondComponent::Scalar { init, .. } => *init,
            SecondComponent::Field { .. } => None,
        };
        let base = ctx.cfg.step(&sc.setup);
        let m = (horizon / base * (1.0 - 1e-12)).ceil();
        let path = sample_brownian(0.0, horizon, horizon / m, seed)?;
        crate::stabilization::run_stabilization(&sc, &xi, eta0, horizon, &path)
    })?;
    let mut summary = Vec::new();
    for ((c, seed), rep) in cells.iter().zip(&results) {
        ctx.write_csv(&format!("decay_c{}_seed{seed}.csv", eps_label(*c)), |w| rep.write_csv(w))?;
        summary.push(json!({
            "c": c,
            "seed": seed,
            "pass": rep.pass,
            "first_violation": rep.first_violation.map(|(node, s, margin)| json!({
                "node": node, "s": s, "margin": margin
            })),
            "eta0": rep.eta0,
            "levels": rep.levels,
            "tol_decay": rep.tol_decay,
            "min_margin": rep.min_margin(),
            "infeasible_nodes": rep.infeasible_nodes,
            "isometry_defect": rep.isometry_defect,
        }));
    }
    ctx.write_json("stabilize.json", json!({ "runs": summary }))?;
    Ok(EXIT_OK)
}

fn near_viability(ctx: &Context) -> std::result::Result<i32, Failure> {
    let built = ctx.cfg.build()?;
    let s = &built.setup;
    let k = make_constraint(ctx.cfg.constraint.clone(), s)?;
    let init = ctx.cfg.initial_state(s)?;
    let step = ctx.cfg.step(s);
    let cells: Vec<(f64, u64)> = ctx
        .cfg
        .time
        .epsilons
        .iter()
        .flat_map(|&e| ctx.cfg.seeds.iter().map(move |&seed| (e, seed)))
        .collect();
    let gaps = fan_out(ctx.workers, &cells, |&(eps, seed)| {
        let opts = EpsApproxOptions {
            t: 0.0,
            horizon: ctx.cfg.time.horizon,
            eps,
            step,
            seed,
        };
        near_viability_gap(&k, s, &init, &opts, ctx.cfg.n_mc)
    })?;
    ctx.write_csv("near_viability.csv", |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epsilon", "seed", "gap", "stderr", "best_policy"])
            .map_err(crate::dynamics::csv_err)?;
        for ((eps, seed), g) in cells.iter().zip(&gaps) {
            wr.write_record([
                eps.to_string(),
                seed.to_string(),
                g.gap.to_string(),
                g.stderr.to_string(),
                format!("{:?}", g.best_policy),
            ])
            .map_err(crate::dynamics::csv_err)?;
        }
        wr.flush()?;
        Ok(())
    })?;
    ctx.write_json("near_viability.json", json!({ "gaps": gaps }))?;
    Ok(EXIT_OK)
}

fn omega_table(ctx: &Context) -> std::result::Result<i32, Failure> {
    let Some(oc) = &ctx.cfg.omega else {
        return Err(Failure::Config("the omega subcommand needs an [omega] section".into()));
    };
    let ks: Vec<i32> = (1..=oc.max_exponent).collect();
    let mut rows = Vec::new();
    for &k in &ks {
        let d = 2f64.powi(-k);
        rows.push((k, d, omega(d)?, omega_defect(d)?));
    }
    ctx.write_csv("omega.csv", |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["k", "delta", "omega", "defect"])
            .map_err(crate::dynamics::csv_err)?;
        for (k, d, o, r) in &rows {
            wr.write_record([k.to_string(), d.to_string(), o.to_string(), r.to_string()])
                .map_err(crate::dynamics::csv_err)?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let seed = ctx.cfg.seeds[0];
    let (mc, se) = omega_mc(1.0, oc.mc_samples, seed)?;
    let max_defect = rows.iter().map(|r| r.3.abs()).fold(0.0, f64::max);
    let small: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let omegas: Vec<f64> = rows.iter().map(|r| r.2).collect();
    ctx.write_json(
        "omega.json",
        json!({
            "omega_at_1": omega(1.0)?,
            "monte_carlo": { "mean": mc, "stderr": se, "samples": oc.mc_samples, "seeds": [seed] },
            "max_abs_defect": max_defect,
            "small_delta_slope": na_or(loglog_fit(&small, &omegas).map(|f| f.0)),
        }),
    )?;
    Ok(EXIT_OK)
}
