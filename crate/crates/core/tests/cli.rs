use std::path::Path;
use std::process::{Command, Output};

use pm_viab::config::ExperimentConfig;

fn pm_viab(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pm-viab"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn small(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::example();
    cfg.first.n = 5;
    cfg.rates = None;
    let p = dir.join("c.toml");
    std::fs::write(&p, cfg.to_toml_string().unwrap()).unwrap();
    p
}

#[test]
fn unparseable_config_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    std::fs::write(&p, "seeds = [1\n").unwrap();
    let out = pm_viab(&["omega"], &p, tmp.path());
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&p, "seeds = [1]\nbogus = 3\n").unwrap();
    assert_eq!(pm_viab(&["omega"], &p, tmp.path()).status.code(), Some(2));
}

#[test]
fn missing_section_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = small(tmp.path());
    assert_eq!(pm_viab(&["rates"], &p, tmp.path()).status.code(), Some(2));
}

#[test]
fn io_failures_exit_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    assert_eq!(pm_viab(&["omega"], &missing, tmp.path()).status.code(), Some(3));
    let p = small(tmp.path());
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    assert_eq!(pm_viab(&["omega"], &p, &blocker.join("sub")).status.code(), Some(3));
}

#[test]
fn validate_operators_writes_a_manifest_with_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let p = small(tmp.path());
    let out = tmp.path().join("o");
    let res = pm_viab(&["validate-operators"], &p, &out);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("operators.json")).unwrap()).unwrap();
    assert_eq!(doc["pass"], true);
    assert_eq!(doc["provenance"]["seeds"], serde_json::json!([1]));
    let hash = doc["provenance"]["config_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
}

#[test]
fn output_dir_follows_the_environment_override() {
    let tmp = tempfile::tempdir().unwrap();
    let p = small(tmp.path());
    let target = tmp.path().join("env-out");
    let status = Command::new(env!("CARGO_BIN_EXE_pm-viab"))
        .args(["omega", "--config"])
        .arg(&p)
        .env("PM_VIAB_OUT", &target)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(target.join("omega.csv")).unwrap();
    assert!(csv.starts_with("# pm-viab "));
    assert!(csv.lines().nth(1).unwrap() == "k,delta,omega,defect");
}

#[test]
fn state_independent_forcing_reports_na_gap_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::example();
    cfg.first.n = 5;
    cfg.second = pm_viab::config::SecondComponent::Scalar {
        coupling: pm_viab::config::CouplingSpec::Zero,
        init: None,
    };
    if let Some(r) = &mut cfg.rates {
        r.n_mc = 2;
        r.exponents = vec![4, 5];
        r.reference_refinement = 2;
    }
    let p = tmp.path().join("c.toml");
    std::fs::write(&p, cfg.to_toml_string().unwrap()).unwrap();
    let out = tmp.path().join("o");
    let res = pm_viab(&["rates"], &p, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("rates.json")).unwrap()).unwrap();
    let gap = &doc["runs"][0]["gap"];
    assert_eq!(gap["slope"], "NA");
    assert!(gap["errors"].as_array().unwrap().iter().all(|e| e == 0.0));
}
