use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mffbsde"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_system_writes_zero_solution_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run(&["solve-fbsde"], &configs().join("zero.json"), &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let csv = std::fs::read_to_string(out.join("solution.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,scenario,x1,y1,z1"));
    let mut rows = 0;
    for line in lines {
        rows += 1;
        let vals: Vec<f64> = line.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert!(vals.iter().all(|v| *v == 0.0), "{line}");
    }
    // binary tree with 8 steps: 2^0 + ... + 2^8 nodes
    assert_eq!(rows, 511);

    let m = json(&out.join("manifest.json"));
    assert_eq!(m["command"], "solve-fbsde");
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["config"]["continuation"]["tol"], 1e-8);
    assert_eq!(m["config"]["sampling"]["budget"], 10_000);
    let bytes = std::fs::read(out.join("solution.csv")).unwrap();
    let digest: String = {
        use sha2::Digest;
        sha2::Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    };
    assert_eq!(m["outputs"]["solution.csv"], digest.as_str());
    let d = json(&out.join("diagnostics.json"));
    assert!(d["residual"]["total"].as_f64().unwrap() < 1e-12);
}

#[test]
fn weak_example_fails_strict_verification_with_witness() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["verify-conditions", "--strict"], &configs().join("example32_weak.json"), tmp.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let r = json(&tmp.path().join("report.json"));
    assert_eq!(r["passed"], false);
    let psi = r["monotonicity"]["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "psi")
        .unwrap();
    assert_eq!(psi["passed"], false);
    assert!(psi["witness"]["args"].as_object().is_some_and(|a| !a.is_empty()));

    // without --strict the same failure is only reported
    let o = run(&["verify-conditions"], &configs().join("example32_weak.json"), tmp.path());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn strong_example_passes_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["verify-conditions", "--strict"], &configs().join("example32.json"), tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(json(&tmp.path().join("report.json"))["passed"], true);
}

#[test]
fn forward_lq_compare_matches_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["lq-forward", "compare"], &configs().join("flq_desk.json"), tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(&tmp.path().join("report.json"));
    let (jf, jo) = (r["fbsde"]["cost"].as_f64().unwrap(), r["oracle"]["cost"].as_f64().unwrap());
    assert!((jf - jo).abs() < 1e-4, "{jf} {jo}");
    assert!(r["comparison"]["cost_gap"].as_f64().unwrap() < 1e-4);
    let controls = std::fs::read_to_string(tmp.path().join("controls.csv")).unwrap();
    assert!(controls.starts_with("step,scenario,u1,u_oracle1"));
}

#[test]
fn backward_lq_actions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("blq_desk.json");
    let o = run(&["lq-backward", "solve"], &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(&tmp.path().join("report.json"));
    assert!((r["fbsde"]["cost"].as_f64().unwrap() - 0.25).abs() < 1e-6);
    assert!(r["oracle"].is_null());

    // the oracle needs exact expectations
    let o = run(&["lq-backward", "oracle", "--backend", "mc"], &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    // a forward problem is not a backward one
    let o = run(&["lq-backward", "solve"], &configs().join("flq_desk.json"), tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lq.kind"));
}

#[test]
fn wrong_row_count_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"schema": "mffbsde-run-v1", "grid": {"steps": 4},
            "coefficients": {"schema": "mffbsde-coeff-v1", "kind": "linear", "n": 1, "d": 1,
                             "psi_y": [[0.1], [0.2]]},
            "weights": {"case": "A", "mu": 0.5, "n": 1, "d": 1, "H": [[1.0]]},
            "x0": [1.0, 2.0]}"#,
    );
    let o = run(&["solve-fbsde"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("psi_y: expected 1 rows, got 2"), "{err}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn schema_and_unknown_fields_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"schema": "mffbsde-run-v0", "grid": {"steps": 4}}"#);
    let o = run(&["solve-sde"], &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("schema"));

    let cfg = write_config(tmp.path(), r#"{"schema": "mffbsde-run-v1", "grid": {"steps": 4}, "colour": 1}"#);
    let o = run(&["solve-sde"], &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn nested_delta_init_sets_first_level() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["solve-fbsde"], &configs().join("linear_nested.json"), tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let d = json(&tmp.path().join("diagnostics.json"));
    let levels = d["levels"].as_array().unwrap();
    assert_eq!(levels[0]["alpha"], 0.25);
    assert_eq!(levels.last().unwrap()["alpha"], 1.0);
    assert!(d["residual"]["total"].as_f64().unwrap() < 1e-8);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("linear_nested.json");
    for backend in ["tree", "mc"] {
        let mut seen: Option<Vec<Vec<u8>>> = None;
        for threads in ["1", "3"] {
            let out = tmp.path().join(format!("{backend}-{threads}"));
            let o = run(
                &["solve-fbsde", "--backend", backend, "--threads", threads, "--seed", "11"],
                &cfg,
                &out,
            );
            assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
            let files: Vec<Vec<u8>> = ["solution.csv", "diagnostics.json", "manifest.json"]
                .iter()
                .map(|f| std::fs::read(out.join(f)).unwrap())
                .collect();
            match &seen {
                None => seen = Some(files),
                Some(first) => assert!(first == &files, "{backend}: outputs differ across thread counts"),
            }
        }
    }
}

#[test]
fn seed_flag_reaches_the_simulation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("linear_nested.json");
    let read = |seed: &str| {
        let out = tmp.path().join(seed);
        let o = run(&["solve-fbsde", "--backend", "mc", "--seed", seed], &cfg, &out);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let m = json(&out.join("manifest.json"));
        assert_eq!(m["seed"].as_u64().unwrap().to_string(), seed);
        std::fs::read(out.join("solution.csv")).unwrap()
    };
    assert_ne!(read("1"), read("2"));
}

#[test]
fn single_equation_verbs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"schema": "mffbsde-run-v1", "grid": {"steps": 3},
            "coefficients": {"schema": "mffbsde-coeff-v1", "kind": "linear", "n": 1, "d": 1,
                             "phi_0": [0.5], "gamma_0": [1.0, 2.0, 0.0]},
            "x0": [1.0],
            "perturbation": {"eta": [1.5]}}"#,
    );
    let out = tmp.path().join("sde");
    let o = run(&["solve-sde"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // dx = 2 ds from x0 = 1
    let d = json(&out.join("diagnostics.json"));
    assert!((d["x_mean"][3][0].as_f64().unwrap() - 3.0).abs() < 1e-12);

    let out = tmp.path().join("bsde");
    let o = run(&["solve-bsde"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // dy = 1 ds, y(T) = 0.5 + 1.5
    let d = json(&out.join("diagnostics.json"));
    assert!((d["y0"][0].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn non_convergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"schema": "mffbsde-run-v1", "grid": {"steps": 4},
            "coefficients": {"schema": "mffbsde-coeff-v1", "kind": "example32", "k1": 2.0, "k2": 2.0},
            "weights": {"case": "A", "mu": 0.16666666666666666, "n": 1, "d": 1, "preset": "example32"},
            "perturbation": {"xi": [1.0]},
            "continuation": {"mode": "direct", "max_iters": 2}}"#,
    );
    let o = run(&["solve-fbsde"], &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn report_includes_symmetric_check() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["report"], &configs().join("linear_nested.json"), tmp.path());
    // the config violates the sampled conditions, which only --strict turns into an exit code
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(&tmp.path().join("report.json"));
    assert!(r["symmetric_residual"]["total"].as_f64().unwrap() < 1e-8);
    assert_eq!(r["conditions"]["passed"], false);
    let o = run(&["report", "--strict"], &configs().join("linear_nested.json"), tmp.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn usage_errors_exit_with_two() {
    let o = bin().arg("--bogus").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().args(["solve-fbsde"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--config"));
    let o = bin().args(["lq-forward", "maximize"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
