use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use ymorse::perturbation::{BankTerm, ModelPerturbation};
use ymorse::{Connection, Group, Lattice, OrientedCellComplex, PerturbationBank};

fn ymorse(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ymorse")).args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).expect("report written")).expect("report is JSON")
}

#[test]
fn example_s2_reports_sphere_homology() {
    let dir = tempfile::tempdir().unwrap();
    let o = ymorse(&["example", "s2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path());
    assert_eq!(r["schema"], "ymorse.report/1");
    assert_eq!(r["results"]["betti"], serde_json::json!([1, 0, 1]));
    let complex: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("complex.json")).unwrap()).unwrap();
    assert_eq!(complex["betti"], serde_json::json!([1, 0, 1]));
}

#[test]
fn every_check_carries_tolerance_and_verdict() {
    let dir = tempfile::tempdir().unwrap();
    ymorse(&["example", "t2"], dir.path());
    let r = report(dir.path());
    let checks = r["checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    for c in checks {
        assert!(c["tolerance"].is_number() && c["passed"].is_boolean(), "{c}");
    }
}

#[test]
fn outputs_are_byte_identical_for_identical_seeds() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = ymorse(&["homology", "--seed", "7"], d.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["report.json", "complex.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn flow_writes_trajectory_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let o = ymorse(&["flow", "--count", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("trajectories/flow-001.csv")).unwrap();
    assert!(csv.starts_with("s,E,gradnorm\n"));
    let side: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("trajectories/flow-001.json")).unwrap()).unwrap();
    assert_eq!(side["status"], "Converged");
}

#[test]
fn unknown_config_key_is_rejected_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[seeds]\nroot = 2\n\n[controller]\ntol_g = 1e-10\neps_shot = 1e-3\n").unwrap();
    let o = ymorse(&["survey", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 6") && err.contains("eps_shot"), "{err}");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[survey]\nn_starts = 5\n").unwrap();
    ymorse(&["survey", "--config", cfg.to_str().unwrap(), "--n-starts", "9"], dir.path());
    assert_eq!(report(dir.path())["config"]["survey"]["n_starts"], 9);
}

#[test]
fn inadmissible_bank_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let lattice = Lattice::new(OrientedCellComplex::torus_grid(2, 1).unwrap(), Group::U1).unwrap();
    let mut eta = lattice.zero_field();
    for &e in lattice.free_edges() {
        eta.values[e] = Group::U1.from_coefficients(&[1.0]);
    }
    // supported around the flat connection, which is critical
    let flat = Connection::identity(Group::U1, lattice.complex.num_edges());
    let mut p = ModelPerturbation::new(&lattice, flat, eta, 2).unwrap();
    p.constant = 1.0;
    let bank = PerturbationBank::new(vec![BankTerm { perturbation: p, lambda: 1e-3 }]);
    let path = dir.path().join("bank.json");
    std::fs::write(&path, bank.to_json()).unwrap();

    let o = ymorse(&["homology", "--perturbation-bank", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not admissible"));
    let r = report(dir.path());
    assert_eq!(r["passed"], false);
    assert!(!dir.path().join("complex.json").exists());
}

#[test]
fn verify_default_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ymorse(&["verify"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path());
    assert!(r["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
    assert_eq!(r["results"]["homology"]["betti"], serde_json::json!([1, 3, 3, 1]));
}
