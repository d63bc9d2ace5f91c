//! Subcommand pipelines. Each returns its output files in memory; they are
//! written together with the manifest once the run has succeeded.

use std::path::Path;

use mffbsde::backward::{solve_mf_bsde, CoefficientDriver};
use mffbsde::conditions::{
    check_domination, check_monotonicity, check_wlog, estimate_lipschitz, symmetrize, symmetrize_solution,
};
use mffbsde::continuation::{residual, solve_perturbed};
use mffbsde::forward::{solve_mf_sde, write_paths_csv, CoefficientDynamics};
use mffbsde::lq::{
    check_pd_blq, check_pd_flq, oracle_blq, oracle_flq, solve_blq, solve_flq, stationarity_blq,
    stationarity_flq, BackwardLQProblem, ForwardLQProblem, LqProblem, PdReport,
};
use mffbsde::model::{PerturbationTriple, Process, SolutionEnsemble};
use mffbsde::noise::Backend;
use serde_json::{json, Value};

use crate::config::{sha256_hex, Run};
use crate::{CliError, LqAction};

pub struct Outcome {
    pub files: Vec<(&'static str, Vec<u8>)>,
    /// Short per-run record copied into the manifest.
    pub summary: Value,
    pub condition_failure: Option<String>,
}

fn csv(columns: &[(&str, &Process)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_paths_csv(&mut buf, columns).expect("writing to memory");
    buf
}

fn json_bytes(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

fn perturbation(run: &Run, backend: &Backend) -> Result<PerturbationTriple, CliError> {
    let coeffs = run.coefficients()?;
    let dims = coeffs.dims();
    let mut p = PerturbationTriple::zeros(dims, backend.layout(), backend.grid());
    if let Some(xi) = &run.perturbation.xi {
        p.xi.clone_from(xi);
    }
    p.eta = run.terminal(dims.n, dims.d).realize(backend);
    Ok(p)
}

pub fn solve_sde(run: &Run) -> Result<Outcome, CliError> {
    let coeffs = run.coefficients()?;
    let dims = coeffs.dims();
    let backend = run.backend(dims.d)?;
    let dynamics = CoefficientDynamics {
        coeffs,
        grid: run.grid,
        frozen: None,
    };
    let x0 = run.x0.clone().unwrap_or_else(|| vec![0.0; dims.n]);
    let x = solve_mf_sde(&dynamics, &x0, &backend)?;
    let diag = json!({
        "scenarios": backend.width(run.grid.steps),
        "x_mean": x.means(),
        "max_abs": x.max_abs(),
    });
    Ok(Outcome {
        files: vec![("solution.csv", csv(&[("x", &x)])), ("diagnostics.json", json_bytes(&diag))],
        summary: json!({ "x_mean_terminal": x.means().last() }),
        condition_failure: None,
    })
}

pub fn solve_bsde(run: &Run) -> Result<Outcome, CliError> {
    let coeffs = run.coefficients()?;
    let dims = coeffs.dims();
    let n = dims.n;
    let backend = run.backend(dims.d)?;
    let driver = CoefficientDriver {
        coeffs,
        grid: run.grid,
        frozen: None,
    };
    let zero = vec![0.0; n];
    let mut phi = vec![0.0; n];
    coeffs.phi(&zero, &zero, &mut phi);
    let mut terminal = run.terminal(n, dims.d).realize(&backend);
    for row in terminal.chunks_mut(n) {
        row.iter_mut().zip(&phi).for_each(|(v, p)| *v += p);
    }
    let sol = solve_mf_bsde(&driver, &terminal, &backend, Some(&run.continuation.regression))?;
    let y0 = sol.y.means()[0].clone();
    let diag = json!({
        "scenarios": backend.width(run.grid.steps),
        "y0": y0,
        "y_mean": sol.y.means(),
        "z_mean": sol.z.means(),
    });
    Ok(Outcome {
        files: vec![
            ("solution.csv", csv(&[("y", &sol.y), ("z", &sol.z)])),
            ("diagnostics.json", json_bytes(&diag)),
        ],
        summary: json!({ "y0": y0 }),
        condition_failure: None,
    })
}

/// Sampled domination and monotonicity checks plus the Lipschitz and
/// normalization diagnostics; `passed` covers the sampled checks only.
fn conditions(run: &Run) -> Result<(Value, bool), CliError> {
    let coeffs = run.coefficients()?;
    let weights = run.domination_weights()?;
    let backend = run.backend(coeffs.dims().d)?;
    let lip = estimate_lipschitz(coeffs, run.grid, &run.sampling)?;
    let wlog = check_wlog(weights, lip.max());
    let dom = check_domination(coeffs, weights, run.grid, &run.sampling)?;
    let mono = check_monotonicity(coeffs, weights, &backend, &run.sampling, run.orientation)?;
    let passed = dom.passed && mono.passed;
    let report = json!({
        "passed": passed,
        "lipschitz": lip,
        "normalization": wlog,
        "domination": dom,
        "monotonicity": mono,
    });
    Ok((report, passed))
}

fn failed_checks(report: &Value) -> String {
    let mut names = Vec::new();
    for part in ["domination", "monotonicity"] {
        for list in ["checks", "exact"] {
            if let Some(items) = report[part][list].as_array() {
                for c in items.iter().filter(|c| c["passed"] == false) {
                    names.push(c["name"].as_str().unwrap_or("?").to_string());
                }
            }
        }
    }
    format!("violated: {}", names.join(", "))
}

pub fn verify_conditions(run: &Run) -> Result<Outcome, CliError> {
    let (report, passed) = conditions(run)?;
    let failure = (!passed).then(|| failed_checks(&report));
    Ok(Outcome {
        summary: json!({ "passed": passed }),
        files: vec![("report.json", json_bytes(&report))],
        condition_failure: failure,
    })
}

fn solve_coupled(run: &Run) -> Result<(SolutionEnsemble, PerturbationTriple, Backend, Value), CliError> {
    let coeffs = run.coefficients()?;
    let weights = run.domination_weights()?;
    let backend = run.backend(coeffs.dims().d)?;
    let pert = perturbation(run, &backend)?;
    let (theta, diag) = solve_perturbed(coeffs, weights, &pert, &run.continuation, &backend)?;
    let res = residual(coeffs, &pert, &theta, &backend, &run.continuation.regression)?;
    let diagnostics = json!({
        "y0": theta.y0(),
        "levels": diag.levels,
        "rejected": diag.rejected,
        "probe": diag.probe,
        "max_factor": diag.max_factor(),
        "residual": res,
        "base_solves": diag.base_solves,
        "mu": diag.mu,
        "nu": diag.nu,
        "mode": diag.mode,
        "warnings": diag.warnings,
    });
    Ok((theta, pert, backend, diagnostics))
}

fn fbsde_summary(d: &Value) -> Value {
    json!({
        "y0": d["y0"],
        "alphas": d["levels"].as_array().map(|l| l.iter().map(|v| v["alpha"].clone()).collect::<Vec<_>>()),
        "residual": d["residual"]["total"],
    })
}

pub fn solve_fbsde(run: &Run, strict: bool) -> Result<Outcome, CliError> {
    if strict {
        let (report, passed) = conditions(run)?;
        if !passed {
            return Ok(Outcome {
                summary: json!({ "passed": false, "solved": false }),
                condition_failure: Some(failed_checks(&report)),
                files: vec![("report.json", json_bytes(&report))],
            });
        }
    }
    let (theta, _, _, diag) = solve_coupled(run)?;
    Ok(Outcome {
        summary: fbsde_summary(&diag),
        files: vec![
            ("solution.csv", csv(&[("x", &theta.x), ("y", &theta.y), ("z", &theta.z)])),
            ("diagnostics.json", json_bytes(&diag)),
        ],
        condition_failure: None,
    })
}

pub fn report(run: &Run) -> Result<Outcome, CliError> {
    let (conds, passed) = conditions(run)?;
    let coeffs = run.coefficients()?;
    let (theta, pert, backend, diag) = solve_coupled(run)?;
    // (x, -y, -z) solves the transformed system with eta and the g part of rho negated
    let sym = symmetrize(coeffs);
    let sym_theta = symmetrize_solution(&theta);
    let mut sym_pert = pert.clone();
    sym_pert.eta.iter_mut().for_each(|v| *v = -*v);
    let n = coeffs.dims().n;
    let t = coeffs.dims().theta();
    for level in &mut sym_pert.rho.levels {
        for row in level.chunks_mut(t) {
            row[..n].iter_mut().for_each(|v| *v = -*v);
        }
    }
    let sym_res = residual(&sym, &sym_pert, &sym_theta, &backend, &run.continuation.regression)?;
    let report = json!({
        "conditions": conds,
        "solution": fbsde_summary(&diag),
        "symmetric_residual": sym_res,
    });
    Ok(Outcome {
        summary: json!({ "passed": passed, "residual": diag["residual"]["total"] }),
        condition_failure: (!passed).then(|| failed_checks(&conds)),
        files: vec![
            ("solution.csv", csv(&[("x", &theta.x), ("y", &theta.y), ("z", &theta.z)])),
            ("diagnostics.json", json_bytes(&diag)),
            ("report.json", json_bytes(&report)),
        ],
    })
}

fn pd_gate(pd: &PdReport, strict: bool) -> Result<Option<String>, CliError> {
    if pd.passed {
        return Ok(None);
    }
    let msg = pd
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.clone())
        .collect::<Vec<_>>()
        .join(", ");
    if strict {
        Ok(Some(format!("definiteness violated: {msg}")))
    } else {
        Err(mffbsde::Error::NotPositiveDefinite(msg).into())
    }
}

fn forward_problem(run: &Run) -> Result<&ForwardLQProblem, CliError> {
    match &run.lq {
        Some(LqProblem::Forward(p)) => Ok(p),
        Some(LqProblem::Backward(_)) => Err(CliError::Validation(vec!["lq.kind: expected \"forward\"".into()])),
        None => Err(CliError::Validation(vec!["lq: required by this command".into()])),
    }
}

fn backward_problem(run: &Run) -> Result<&BackwardLQProblem, CliError> {
    match &run.lq {
        Some(LqProblem::Backward(p)) => Ok(p),
        Some(LqProblem::Forward(_)) => Err(CliError::Validation(vec!["lq.kind: expected \"backward\"".into()])),
        None => Err(CliError::Validation(vec!["lq: required by this command".into()])),
    }
}

fn pd_failure(pd: &PdReport, failure: String) -> Outcome {
    Outcome {
        summary: json!({ "passed": false }),
        files: vec![("report.json", json_bytes(&json!({ "definiteness": pd })))],
        condition_failure: Some(failure),
    }
}

pub fn lq_forward(run: &Run, action: LqAction, strict: bool) -> Result<Outcome, CliError> {
    let prob = forward_problem(run)?;
    let backend = run.backend(prob.dims.d)?;
    let pd = check_pd_flq(prob, run.delta_gap)?;
    if let Some(f) = pd_gate(&pd, strict)? {
        return Ok(pd_failure(&pd, f));
    }
    let reg = &run.continuation.regression;
    let mut files = Vec::new();
    let mut report = json!({ "kind": "forward", "definiteness": pd });
    let fbsde = if action != LqAction::Oracle {
        let sol = solve_flq(prob, &backend, &run.continuation)?;
        let stat = stationarity_flq(prob, &sol.control, &backend, Some(reg))?;
        report["fbsde"] = json!({
            "cost": sol.cost,
            "xi": sol.control.xi,
            "stationarity": stat,
            "levels": sol.diagnostics.levels.len(),
            "max_factor": sol.diagnostics.max_factor(),
        });
        files.push((
            "solution.csv",
            csv(&[("x", &sol.theta.x), ("y", &sol.theta.y), ("z", &sol.theta.z)]),
        ));
        files.push(("diagnostics.json", json_bytes(&json!(sol.diagnostics))));
        Some(sol)
    } else {
        None
    };
    let oracle = if action != LqAction::Solve {
        let o = oracle_flq(prob, &backend)?;
        let stat = stationarity_flq(prob, &o.control, &backend, Some(reg))?;
        report["oracle"] = json!({
            "cost": o.cost,
            "xi": o.control.xi,
            "stationarity": stat,
            "iterations": o.iterations,
            "gradient_norm": o.gradient_norm,
        });
        Some(o)
    } else {
        None
    };
    if let (Some(s), Some(o)) = (&fbsde, &oracle) {
        report["comparison"] = json!({
            "cost_gap": (s.cost - o.cost).abs(),
            "control_distance": s.control.distance(&o.control, run.grid),
        });
    }
    let u = match (&fbsde, &oracle) {
        (Some(s), Some(o)) => csv(&[("u", &s.control.u), ("u_oracle", &o.control.u)]),
        (Some(s), None) => csv(&[("u", &s.control.u)]),
        (None, Some(o)) => csv(&[("u", &o.control.u)]),
        (None, None) => unreachable!("every action runs a solver"),
    };
    files.push(("controls.csv", u));
    let summary = lq_summary(&report);
    files.push(("report.json", json_bytes(&report)));
    Ok(Outcome {
        files,
        summary,
        condition_failure: None,
    })
}

pub fn lq_backward(run: &Run, action: LqAction, strict: bool) -> Result<Outcome, CliError> {
    let prob = backward_problem(run)?;
    let backend = run.backend(prob.dims.d)?;
    let pd = check_pd_blq(prob, run.delta_gap)?;
    if let Some(f) = pd_gate(&pd, strict)? {
        return Ok(pd_failure(&pd, f));
    }
    let reg = &run.continuation.regression;
    let mut files = Vec::new();
    let mut report = json!({ "kind": "backward", "definiteness": pd });
    let fbsde = if action != LqAction::Oracle {
        let sol = solve_blq(prob, &backend, &run.continuation, Some(reg))?;
        let stat = stationarity_blq(prob, &sol.control, &backend, Some(reg))?;
        report["fbsde"] = json!({
            "cost": sol.cost,
            "eta": sol.control.eta,
            "stationarity": stat,
            "levels": sol.diagnostics.levels.len(),
            "max_factor": sol.diagnostics.max_factor(),
        });
        files.push((
            "solution.csv",
            csv(&[("x", &sol.theta.x), ("y", &sol.theta.y), ("z", &sol.theta.z)]),
        ));
        files.push(("diagnostics.json", json_bytes(&json!(sol.diagnostics))));
        Some(sol)
    } else {
        None
    };
    let oracle = if action != LqAction::Solve {
        let o = oracle_blq(prob, &backend)?;
        let stat = stationarity_blq(prob, &o.control, &backend, Some(reg))?;
        report["oracle"] = json!({
            "cost": o.cost,
            "eta": o.control.eta,
            "stationarity": stat,
            "iterations": o.iterations,
            "gradient_norm": o.gradient_norm,
        });
        Some(o)
    } else {
        None
    };
    if let (Some(s), Some(o)) = (&fbsde, &oracle) {
        report["comparison"] = json!({
            "cost_gap": (s.cost - o.cost).abs(),
            "control_distance": s.control.distance(&o.control, run.grid),
        });
    }
    let u = match (&fbsde, &oracle) {
        (Some(s), Some(o)) => csv(&[("u", &s.control.u), ("u_oracle", &o.control.u)]),
        (Some(s), None) => csv(&[("u", &s.control.u)]),
        (None, Some(o)) => csv(&[("u", &o.control.u)]),
        (None, None) => unreachable!("every action runs a solver"),
    };
    files.push(("controls.csv", u));
    let summary = lq_summary(&report);
    files.push(("report.json", json_bytes(&report)));
    Ok(Outcome {
        files,
        summary,
        condition_failure: None,
    })
}

fn lq_summary(report: &Value) -> Value {
    json!({
        "cost_fbsde": report["fbsde"]["cost"],
        "cost_oracle": report["oracle"]["cost"],
        "cost_gap": report["comparison"]["cost_gap"],
    })
}

pub fn write_outputs(dir: &Path, command: &str, run: &Run, strict: bool, outcome: Outcome) -> Result<(), CliError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut hashes = serde_json::Map::new();
    for (name, bytes) in &outcome.files {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(io(&path))?;
        hashes.insert((*name).to_string(), Value::String(sha256_hex(bytes)));
    }
    let manifest = json!({
        "schema": "mffbsde-manifest-v1",
        "command": command,
        "version": mffbsde::VERSION,
        "cli_version": env!("CARGO_PKG_VERSION"),
        "config_sha256": run.sha256,
        "seed": run.seed,
        "strict": strict,
        "condition_failure": outcome.condition_failure,
        "outputs": hashes,
        "diagnostics": outcome.summary,
        "config": run.resolved,
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, json_bytes(&manifest)).map_err(io(&path))?;
    Ok(())
}
