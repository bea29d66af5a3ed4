use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfgtube"))
}

fn ss_model() -> Value {
    json!({ "sigma": 1.0, "mu": 2.0, "g": 4.0, "h": 0.0, "alpha": 1.0, "epsilon": 0.05 })
}

fn sc_model() -> Value {
    json!({ "sigma": 1.0, "mu": 2.0, "g": 4.0, "h": 0.0, "alpha": 3.0, "epsilon": 0.05 })
}

fn config(model: Value, task: Value) -> Value {
    json!({ "schema": "mfgtube.run/1", "model": model, "task": task })
}

/// Runs the binary on `cfg` and returns its exit code.
fn run_in(dir: &Path, name: &str, cfg: &Value, extra: &[&str]) -> i32 {
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    let out = dir.join(name);
    let status = bin()
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .status()
        .unwrap();
    status.code().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn negative_mu_exits_one_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut model = sc_model();
    model["mu"] = json!(-2.0);
    let code = run_in(tmp.path(), "bad", &config(model, json!({ "kind": "equilibria" })), &[]);
    assert_eq!(code, 1);
    assert!(!tmp.path().join("bad").exists());
}

#[test]
fn unknown_keys_and_foreign_schemas_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(sc_model(), json!({ "kind": "equilibria", "q2_mn": 1.0 }));
    assert_eq!(run_in(tmp.path(), "typo", &cfg, &[]), 1);
    cfg["task"] = json!({ "kind": "equilibria" });
    cfg["schema"] = json!("mfgtube.run/0");
    assert_eq!(run_in(tmp.path(), "schema", &cfg, &[]), 1);
    cfg["schema"] = json!("mfgtube.run/1");
    cfg["model"]["h"] = json!(-0.1);
    assert_eq!(run_in(tmp.path(), "neg_h", &cfg, &[]), 1);
    assert!(!tmp.path().join("typo").exists());
}

#[test]
fn demo_sc_case_reports_the_saddle_center() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sc");
    let status = bin().args(["--demo", "sc-case", "--out"]).arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let doc = read_json(&out.join("linearize.json"));
    let eq = &doc["equilibrium"];
    assert_eq!(eq["kind"], "SaddleCenter");
    assert!((eq["q2"].as_f64().unwrap() - 3.81).abs() < 0.01);
    assert!((eq["rates"]["hyperbolic"].as_f64().unwrap() - 0.233).abs() < 0.002);
    assert!((eq["rates"]["second"].as_f64().unwrap() - 13.8).abs() < 0.1);
    assert!((doc["q1_coefficient"].as_f64().unwrap() - 0.906).abs() < 0.002);
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["files"], json!(["config.json", "linearize.json"]));
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn unknown_demo_is_a_config_error() {
    let status = bin().args(["--demo", "nope", "--out", "/nonexistent/x"]).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn equilibria_records_carry_the_published_fields() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run_in(tmp.path(), "eq", &config(ss_model(), json!({ "kind": "equilibria" })), &[]), 0);
    let recs = read_json(&tmp.path().join("eq/equilibria.json"));
    let r = &recs[0];
    for key in ["params", "q2", "kind", "a", "b", "c", "d", "rates", "E_eq"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert_eq!(r["kind"], "SaddleSaddle");
    assert!((r["q2"].as_f64().unwrap() - 12.21).abs() < 0.01);
}

fn bvp_task(t: f64) -> Value {
    json!({ "kind": "bvp", "horizon": t, "guess": { "source": "straight_line", "nodes": 200 } })
}

#[test]
fn bvp_outputs_are_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(ss_model(), bvp_task(4.0));
    assert_eq!(run_in(tmp.path(), "a", &cfg, &[]), 0);
    assert_eq!(run_in(tmp.path(), "b", &cfg, &[]), 0);
    let a = fs::read(tmp.path().join("a/solution.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/solution.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(!text.contains('\r'));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,q1,p1,q2,p2"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 5);
    for cell in row {
        let mantissa = cell.trim_start_matches('-').split('e').next().unwrap();
        assert_eq!(mantissa.replace('.', "").len(), 17, "{cell}");
    }
    let summary = read_json(&tmp.path().join("a/summary.json"));
    assert_eq!(summary["converged"], true);
    assert_eq!(summary["n"], 1);
    assert!(summary["phases"].is_object());
    let ma = read_json(&tmp.path().join("a/manifest.json"));
    let mb = read_json(&tmp.path().join("b/manifest.json"));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    for f in ma["files"].as_array().unwrap() {
        assert!(tmp.path().join("a").join(f.as_str().unwrap()).exists());
    }
}

#[test]
fn bvp_can_restart_from_its_own_solution_file() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run_in(tmp.path(), "first", &config(ss_model(), bvp_task(4.0)), &[]), 0);
    let file = tmp.path().join("first/solution.csv");
    let task = json!({ "kind": "bvp", "horizon": 4.5, "guess": { "source": "file", "path": file } });
    assert_eq!(run_in(tmp.path(), "second", &config(ss_model(), task), &[]), 0);
    let s = read_json(&tmp.path().join("second/summary.json"));
    assert!((s["T"].as_f64().unwrap() - 4.5).abs() < 1e-12);
}

#[test]
fn failed_bvp_exits_two_and_still_writes_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut task = bvp_task(4.0);
    task["options"] = json!({ "max_newton": 3, "max_refinements": 0 });
    assert_eq!(run_in(tmp.path(), "sc", &config(sc_model(), task), &[]), 2);
    let s = read_json(&tmp.path().join("sc/summary.json"));
    assert_eq!(s["converged"], false);
    assert!(s["error"].is_string());
    let m = read_json(&tmp.path().join("sc/manifest.json"));
    assert_eq!(m["statuses"][0]["converged"], false);
}

#[test]
fn orbit_and_tube_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let orbit = json!({ "kind": "orbit", "energy_offset": 1e-3, "samples": 50 });
    assert_eq!(run_in(tmp.path(), "orbit", &config(sc_model(), orbit), &[]), 0);
    let o = read_json(&tmp.path().join("orbit/orbit.json"));
    assert!((o["t_p"].as_f64().unwrap() - 0.4569).abs() < 1e-3);
    assert!((o["monodromy_det"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    let csv = fs::read_to_string(tmp.path().join("orbit/orbit.csv")).unwrap();
    assert!(csv.starts_with("t,q1,p1,q2,p2,E\n"));
    assert!(csv.lines().count() >= 51);

    let tube = json!({
        "kind": "tube", "energy_offset": 1e-3, "branch": "Unstable", "side": 1.0,
        "n_strands": 8, "t_int": 40.0, "q1_stop": 2.0
    });
    assert_eq!(run_in(tmp.path(), "tube", &config(sc_model(), tube), &[]), 0);
    let t = read_json(&tmp.path().join("tube/tube.json"));
    assert_eq!(t["n_strands"], 8);
    assert!(tmp.path().join("tube/strand_007.csv").exists());
    // Orbits need a saddle×center equilibrium.
    let orbit = json!({ "kind": "orbit", "energy_offset": 1e-3 });
    assert_eq!(run_in(tmp.path(), "ss_orbit", &config(ss_model(), orbit), &[]), 1);
}

#[test]
fn diagram_merge_is_independent_of_the_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let task = json!({
        "kind": "diagram",
        "bc": { "q1_0": -10.0, "q2_0": 4.5, "q1_t": 10.0, "q2_t": 4.5 },
        "policy": { "initial": 0.25, "max": 0.5 },
        "branches": [
            { "label": "up", "horizon": 2.0, "horizon_target": 3.0 },
            { "label": "down", "horizon": 3.0, "horizon_target": 2.5 }
        ]
    });
    let cfg = config(ss_model(), task);
    assert_eq!(run_in(tmp.path(), "one", &cfg, &["--workers", "1"]), 0);
    assert_eq!(run_in(tmp.path(), "two", &cfg, &["--workers", "2"]), 0);
    let a = fs::read_to_string(tmp.path().join("one/diagram.csv")).unwrap();
    let b = fs::read_to_string(tmp.path().join("two/diagram.csv")).unwrap();
    assert_eq!(a, b);
    let mut lines = a.lines();
    assert_eq!(lines.next(), Some("branch,T,E,n"));
    let labels: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    let first_up = labels.iter().position(|l| *l == "up").unwrap();
    assert!(labels[..first_up].iter().all(|l| *l == "down"));
    assert!(tmp.path().join("one/multiplicity.csv").exists());
}

#[test]
fn continue_task_writes_a_single_branch() {
    let tmp = tempfile::tempdir().unwrap();
    let task = json!({
        "kind": "continue",
        "branch": { "label": "S", "horizon": 2.0, "horizon_target": 2.6 },
        "policy": { "initial": 0.2, "max": 0.3 }
    });
    assert_eq!(run_in(tmp.path(), "c", &config(ss_model(), task), &[]), 0);
    let info = read_json(&tmp.path().join("c/branches.json"));
    assert_eq!(info[0]["topology"], 1);
    assert_eq!(info[0]["energy_decreasing"], true);
}

fn static_pde(k_max: usize) -> Value {
    json!({
        "kind": "pde",
        "grid": { "length": 8.0, "nx": 200, "nt": 50, "horizon": 1.0 },
        "solver": { "eps_p": 0.1, "k_max": k_max },
        "m_ic": { "mean": 0.0, "q2": 12.2123 },
        "m_fc": { "mean": 0.0, "q2": 12.2123 }
    })
}

#[test]
fn pde_task_writes_tables_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run_in(tmp.path(), "p", &config(ss_model(), static_pde(1000)), &[]), 0);
    let dir = tmp.path().join("p");
    let s = read_json(&dir.join("pde_summary.json"));
    assert_eq!(s["converged"], true);
    assert_eq!(s["rotation_count"], 0);
    assert!(s["iterations"].as_u64().unwrap() > 1);
    assert!(s["final_density_max_error"].as_f64().unwrap().is_finite());
    let density = fs::read_to_string(dir.join("density.csv")).unwrap();
    assert_eq!(density.lines().count(), 52);
    assert_eq!(density.lines().nth(1).unwrap().split(',').count(), 202);
    let conv = fs::read_to_string(dir.join("convergence.csv")).unwrap();
    assert!(conv.starts_with("k,err_u,err_m\n1,"));
    for f in ["value.csv", "phase.csv", "manifest.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }

    // Warm start from the converged density.
    let mut warm = static_pde(1000);
    warm["warm_start"] = json!(dir.join("density.csv"));
    assert_eq!(run_in(tmp.path(), "w", &config(ss_model(), warm), &[]), 0);
    let w = read_json(&tmp.path().join("w/pde_summary.json"));
    assert!(w["iterations"].as_u64().unwrap() <= s["iterations"].as_u64().unwrap());
}

#[test]
fn unconverged_pde_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run_in(tmp.path(), "p", &config(ss_model(), static_pde(2)), &[]), 2);
    let s = read_json(&tmp.path().join("p/pde_summary.json"));
    assert_eq!(s["converged"], false);
    assert_eq!(s["iterations"], 2);
    assert!(tmp.path().join("p/density.csv").exists());
}

#[test]
fn compare_matches_a_resting_population() {
    let tmp = tempfile::tempdir().unwrap();
    let mut pde = static_pde(1000);
    pde.as_object_mut().unwrap().remove("kind");
    let task = json!({ "kind": "compare", "pde": pde });
    assert_eq!(run_in(tmp.path(), "c", &config(ss_model(), task), &[]), 0);
    let c = read_json(&tmp.path().join("c/compare.json"));
    assert_eq!(c["n_pde"], 0);
    assert_eq!(c["n_bvp"], 0);
    assert_eq!(c["matches"], true);
    assert!(tmp.path().join("c/bvp_solution.csv").exists());
}
