//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant as Clock;

use common::*;
use mffbsde::backward::{bsde_estimate_report, solve_mf_bsde, BsdeSolution, CoefficientDriver};
use mffbsde::conditions::{
    check_domination, check_monotonicity, symmetrize, symmetrize_solution, Orientation, Sampling,
};
use mffbsde::continuation::{
    apriori_report, residual, solve, solve_alpha0, solve_perturbed, wellposedness_report, ContinuationConfig, Mode,
};
use mffbsde::forward::{sde_estimate_report, solve_mf_sde, CoefficientDynamics};
use mffbsde::linalg::min_eigenvalue;
use mffbsde::lq::{
    cost_blq, cost_flq, hamiltonian_flq, oracle_flq, solve_blq, solve_flq, stationarity_blq, stationarity_flq,
    BackwardLQProblem, ControlBLQ, ControlFLQ, ForwardLQProblem,
};
use mffbsde::model::{
    example32, m2_gap, m2_norm, reference_coefficients, Case, CoefficientSet, Dimensions, DominationWeights,
    LinearCoefficients, PerturbationTriple, Process, SolutionEnsemble,
};
use mffbsde::noise::Backend;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Collected sub-checks of one criterion.
#[derive(Default)]
struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        self.lines.push((ok, what.into()));
    }

    fn passed(&self) -> bool {
        !self.lines.is_empty() && self.lines.iter().all(|(ok, _)| *ok)
    }
}

fn criterion(id: usize, title: &str, f: impl FnOnce(&mut Report)) -> bool {
    let start = Clock::now();
    let mut report = Report::default();
    let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut report)));
    let mut ok = report.passed();
    if let Err(e) = outcome {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        report.check(false, format!("aborted: {msg}"));
        ok = false;
    }
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("AC{id} {verdict} {title} ({:.1} s)", start.elapsed().as_secs_f64());
    for (good, line) in &report.lines {
        println!("    {} {line}", if *good { "ok  " } else { "FAIL" });
    }
    ok
}

fn max_abs_dev(values: impl IntoIterator<Item = f64>, target: f64) -> f64 {
    values.into_iter().fold(0.0, |m, v| m.max((v - target).abs()))
}

// ---------------------------------------------------------------------------

fn ac1(r: &mut Report) {
    let b = tree(8);
    let c = CoefficientSet::zero(scalar());
    for w in [
        DominationWeights::case_a(scalar(), 0.5, one()),
        DominationWeights::case_b(scalar(), 0.5, one(), one()),
        DominationWeights::example32(Case::A, 1.0 / 6.0),
    ] {
        let start = Clock::now();
        let (theta, diag) = solve(&c, &w, &ContinuationConfig::default(), &b).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let zero = PerturbationTriple::zeros(scalar(), b.layout(), b.grid());
        let res = residual(&c, &zero, &theta, &b, &Default::default()).unwrap();
        let norm = m2_norm(&theta).unwrap();
        r.check(norm == 0.0, format!("case {:?}: |theta| = {norm:e}", w.case));
        r.check(
            diag.residual < 1e-12 && res.total < 1e-12,
            format!("case {:?}: residual {:e} (recomputed {:e}) < 1e-12", w.case, diag.residual, res.total),
        );
        r.check(secs < 1.0, format!("case {:?}: {secs:.3} s < 1 s", w.case));
    }
}

fn ac2(r: &mut Report) {
    let b = tree(8);
    let mut g = rng(2);
    let cfg = ContinuationConfig::default();
    let weights = [
        DominationWeights::example32(Case::A, 1.0 / 6.0),
        DominationWeights::example32(Case::B, 1.0 / 6.0),
        DominationWeights::case_a(scalar(), 0.5, one()),
        DominationWeights::case_b(scalar(), 0.4, one(), DMatrix::from_element(1, 1, 0.5)),
    ];
    for w in &weights {
        let pert = random_pert(&mut g, scalar(), &b, 1.0);
        let reference = reference_coefficients(w).unwrap();
        let direct = solve_alpha0(w, &pert, &b).unwrap();
        let (cont, _) = solve_perturbed(&reference, w, &pert, &cfg, &b).unwrap();
        let gap = m2_gap(&direct, &cont).unwrap();
        r.check(
            gap < 1e-10,
            format!("case {:?} (mu {:.3}, nu {:.3}): M2 gap {gap:.2e} < 1e-10", w.case, w.mu, w.nu),
        );
    }
}

fn ac3(r: &mut Report) {
    let b = tree(8);
    let (c, mu, _) = example32(2.0, 2.0).unwrap();
    let w = DominationWeights::example32(Case::A, mu);
    let pert = example32_pert(&b);
    let cfg = ContinuationConfig::default();
    let start = Clock::now();
    let (theta, diag) = solve_perturbed(&c, &w, &pert, &cfg, &b).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let probe = diag.probe.clone().unwrap();
    let d0 = 1.0 / (2.0 * probe.k3_hat.sqrt());
    r.check(
        (probe.delta0 - d0.min(1.0)).abs() < 1e-12 && diag.levels[0].delta <= probe.delta0 + 1e-15,
        format!("probed K3 {:.3}, delta0 {:.4}, first step {:.4}", probe.k3_hat, probe.delta0, diag.levels[0].delta),
    );
    let worst = diag.max_factor();
    r.check(worst <= 0.6, format!("max contraction factor {worst:.3} <= 0.6"));
    let iters = diag.levels.iter().map(|l| l.iterations).max().unwrap_or(0);
    r.check(
        iters <= 50 && diag.levels.iter().all(|l| l.final_gap < cfg.tol),
        format!("{} levels, at most {iters} iterations per level, final gaps < {:e}", diag.levels.len(), cfg.tol),
    );
    r.check(diag.levels.last().map(|l| l.alpha) == Some(1.0), "reached alpha = 1");
    r.check(diag.residual < 1e-8, format!("residual {:.2e} < 1e-8", diag.residual));
    r.check(secs < 60.0, format!("runtime {secs:.1} s < 60 s, y(t0) = {:.7}", theta.y0()[0]));
}

fn ac4(r: &mut Report) {
    let b = tree(8);
    let full = Sampling {
        seed: 4,
        ..Sampling::default()
    };
    let c = CoefficientSet::example32(2.0, 2.0);
    for case in [Case::A, Case::B] {
        let w = DominationWeights::example32(case, 1.0 / 6.0);
        let dom = check_domination(&c, &w, b.grid(), &full).unwrap();
        let mono = check_monotonicity(&c, &w, &b, &full, Orientation::Standard).unwrap();
        let sampled: Vec<_> = dom.checks.iter().chain(&mono.checks).filter(|k| !k.vacuous).collect();
        let fewest = sampled.iter().map(|k| k.samples).min().unwrap_or(0);
        r.check(
            dom.passed && mono.passed && dom.violations() + mono.violations() == 0,
            format!("k1 = k2 = 2, case {case:?}: {} + {} violations", dom.violations(), mono.violations()),
        );
        r.check(
            !sampled.is_empty() && fewest >= 10_000,
            format!("case {case:?}: {} sampled checks, at least {fewest} samples each", sampled.len()),
        );
    }
    let weak = CoefficientSet::example32(0.5, 2.0);
    let w = DominationWeights::example32(Case::A, 1.0 / 6.0);
    let small = Sampling {
        budget: 1000,
        seed: 4,
        ..Sampling::default()
    };
    let mono = check_monotonicity(&weak, &w, &b, &small, Orientation::Standard).unwrap();
    let psi = mono.check("psi").unwrap();
    r.check(
        !psi.passed && psi.violations > 0 && psi.witness.is_some(),
        format!(
            "k1 = 0.5: psi violations {} in {} samples, worst margin {:.3e}",
            psi.violations, psi.samples, psi.worst_margin
        ),
    );
}

fn flq_error(control: &ControlFLQ) -> f64 {
    // the control at the terminal node is never used
    let steps = control.u.levels.len() - 1;
    max_abs_dev(
        control.xi.iter().copied().chain(control.u.levels[..steps].iter().flatten().copied()),
        -1.0 / 3.0,
    )
}

fn ac5(r: &mut Report) {
    let prob = ForwardLQProblem::scalar_example();
    let cfg = ContinuationConfig::default();

    // a 64-step tree does not fit in memory; the desk solution is deterministic
    let b = mc(5, 64, 64);
    let sol = solve_flq(&prob, &b, &cfg).unwrap();
    let err = flq_error(&sol.control);
    r.check(err < 1e-3, format!("N = 64 (monte carlo): max |control + 1/3| = {err:.2e} < 1e-3"));
    let j_err = (sol.cost - 1.0 / 6.0).abs();
    r.check(j_err < 1e-3, format!("N = 64: |J - 1/6| = {j_err:.2e} < 1e-3"));

    let mut errs = Vec::new();
    for steps in [4, 8, 16] {
        let b = tree(steps);
        let sol = solve_flq(&prob, &b, &cfg).unwrap();
        errs.push(flq_error(&sol.control) + (sol.cost - 1.0 / 6.0).abs());
    }
    let rate_ok = errs.iter().zip([4.0, 8.0, 16.0]).all(|(e, n)| *e <= 1.0 / n);
    r.check(
        rate_ok,
        format!("tree N = 4, 8, 16: errors {:.1e}, {:.1e}, {:.1e} within h", errs[0], errs[1], errs[2]),
    );

    for steps in [4, 8, 12] {
        let b = tree(steps);
        let h = b.grid().h();
        let o = oracle_flq(&prob, &b).unwrap();
        // the constant control -1/3 is also the exact discrete optimum
        let own = flq_error(&o.control).max((o.cost - 1.0 / 6.0).abs());
        r.check(own < 1e-6, format!("oracle N = {steps}: distance to discrete optimum {own:.2e} < 1e-6"));
        let s = solve_flq(&prob, &b, &cfg).unwrap();
        let gap = s.control.distance(&o.control, b.grid());
        r.check(gap <= h, format!("oracle N = {steps}: distance to FBSDE control {gap:.2e} <= h"));
    }
}

fn ac6(r: &mut Report) {
    let prob = BackwardLQProblem::scalar_example();
    let cfg = ContinuationConfig::default();
    for steps in [1, 4, 8] {
        let b = tree(steps);
        let sol = solve_blq(&prob, &b, &cfg, None).unwrap();
        let eta = max_abs_dev(sol.control.eta.iter().copied(), -0.5);
        let j = (sol.cost - 0.25).abs();
        let st = stationarity_blq(&prob, &sol.control, &b, None).unwrap();
        r.check(
            eta < 1e-6 && j < 1e-6,
            format!("N = {steps}: |eta + 1/2| = {eta:.1e}, |J - 1/4| = {j:.1e} < 1e-6"),
        );
        r.check(st.max() < 1e-8, format!("N = {steps}: stationarity {:.1e} < 1e-8", st.max()));
    }
}

fn flq_floor(p: &ForwardLQProblem) -> f64 {
    let mut m = min_eigenvalue(&p.cost.m);
    for k in 0..8 {
        m = m.min(min_eigenvalue(p.cost.r.at(k))).min(min_eigenvalue(&(p.cost.r.at(k) + p.cost.r_bar.at(k))));
    }
    m
}

fn blq_floor(p: &BackwardLQProblem) -> f64 {
    let mut m = min_eigenvalue(&p.cost.g).min(min_eigenvalue(&(&p.cost.g + &p.cost.g_bar)));
    for k in 0..8 {
        m = m.min(min_eigenvalue(p.cost.r.at(k))).min(min_eigenvalue(&(p.cost.r.at(k) + p.cost.r_bar.at(k))));
    }
    m
}

fn random_like(g: &mut impl Rng, levels: &[Vec<f64>]) -> Vec<Vec<f64>> {
    levels.iter().map(|l| l.iter().map(|_| g.random_range(-1.0..1.0)).collect()).collect()
}

const PERTURBATION_SIZE: f64 = 0.5;

fn ac7(r: &mut Report) {
    let cfg = ContinuationConfig::default();
    let b = tree(8);
    let grid = b.grid();
    let mut g = rng(7);
    for i in 0..10 {
        let prob = random_pd_flq(&mut g);
        let sol = solve_flq(&prob, &b, &cfg).unwrap();
        let st = stationarity_flq(&prob, &sol.control, &b, None).unwrap().max();
        let j0 = sol.cost;
        let floor = flq_floor(&prob);
        let (mut worst_gain, mut worst_bound, mut worst_lin) = (f64::INFINITY, f64::INFINITY, 0.0f64);
        for _ in 0..100 {
            let mut v = ControlFLQ {
                xi: (0..prob.dims.n).map(|_| g.random_range(-1.0..1.0)).collect(),
                u: Process {
                    dim: prob.m,
                    levels: random_like(&mut g, &sol.control.u.levels),
                },
            };
            let zero = ControlFLQ {
                xi: vec![0.0; prob.dims.n],
                u: Process {
                    dim: prob.m,
                    levels: v.u.levels.iter().map(|l| vec![0.0; l.len()]).collect(),
                },
            };
            let norm = v.distance(&zero, grid);
            v = zero.towards(&v, PERTURBATION_SIZE / norm);
            let shifted = |eps: f64| ControlFLQ {
                xi: sol.control.xi.iter().zip(&v.xi).map(|(a, d)| a + eps * d).collect(),
                u: Process {
                    dim: prob.m,
                    levels: sol
                        .control
                        .u
                        .levels
                        .iter()
                        .zip(&v.u.levels)
                        .map(|(a, d)| a.iter().zip(d).map(|(x, y)| x + eps * y).collect())
                        .collect(),
                },
            };
            let (one, two) = (shifted(1.0), shifted(2.0));
            worst_gain = worst_gain.min(cost_flq(&prob, &one, &b).unwrap() - j0);
            let s1 = stationarity_flq(&prob, &one, &b, None).unwrap();
            let s2 = stationarity_flq(&prob, &two, &b, None).unwrap();
            worst_bound = worst_bound.min(s1.max() / (floor * PERTURBATION_SIZE));
            worst_lin = worst_lin.max(((s2.endpoint - 2.0 * s1.endpoint).abs() + (s2.process - 2.0 * s1.process).abs()) / s1.max());
        }
        report_lq(r, "FLQ", i, prob.dims.n, prob.m, st, worst_gain, worst_bound, worst_lin);
    }
    for i in 0..10 {
        let prob = random_pd_blq(&mut g);
        let sol = solve_blq(&prob, &b, &cfg, None).unwrap();
        let st = stationarity_blq(&prob, &sol.control, &b, None).unwrap().max();
        let j0 = sol.cost;
        let floor = blq_floor(&prob);
        let (mut worst_gain, mut worst_bound, mut worst_lin) = (f64::INFINITY, f64::INFINITY, 0.0f64);
        for _ in 0..100 {
            let zero = ControlBLQ::zeros(prob.dims.n, prob.m, b.layout(), grid);
            let mut v = ControlBLQ {
                eta: sol.control.eta.iter().map(|_| g.random_range(-1.0..1.0)).collect(),
                u: Process {
                    dim: prob.m,
                    levels: random_like(&mut g, &sol.control.u.levels),
                },
            };
            let norm = v.distance(&zero, grid);
            v = zero.towards(&v, PERTURBATION_SIZE / norm);
            let shifted = |eps: f64| ControlBLQ {
                eta: sol.control.eta.iter().zip(&v.eta).map(|(a, d)| a + eps * d).collect(),
                u: Process {
                    dim: prob.m,
                    levels: sol
                        .control
                        .u
                        .levels
                        .iter()
                        .zip(&v.u.levels)
                        .map(|(a, d)| a.iter().zip(d).map(|(x, y)| x + eps * y).collect())
                        .collect(),
                },
            };
            let (one, two) = (shifted(1.0), shifted(2.0));
            worst_gain = worst_gain.min(cost_blq(&prob, &one, &b, None).unwrap() - j0);
            let s1 = stationarity_blq(&prob, &one, &b, None).unwrap();
            let s2 = stationarity_blq(&prob, &two, &b, None).unwrap();
            worst_bound = worst_bound.min(s1.max() / (floor * PERTURBATION_SIZE));
            worst_lin = worst_lin.max(((s2.endpoint - 2.0 * s1.endpoint).abs() + (s2.process - 2.0 * s1.process).abs()) / s1.max());
        }
        report_lq(r, "BLQ", i, prob.dims.n, prob.m, st, worst_gain, worst_bound, worst_lin);
    }
}

#[allow(clippy::too_many_arguments)]
fn report_lq(r: &mut Report, kind: &str, i: usize, n: usize, m: usize, st: f64, gain: f64, bound: f64, lin: f64) {
    // the residual of the optimum plus the first variation is at least
    // lambda_min |v| / sqrt(2) per component; half of that is required
    let ok = st < 1e-6 && gain >= -1e-6 && bound >= 0.5 && lin < 1e-4;
    r.check(
        ok,
        format!(
            "{kind} #{i} (n={n}, m={m}): stationarity {st:.1e}, worst cost gain {gain:.2e}, \
             residual / (lambda_min |v|) >= {bound:.2}, linearity defect {lin:.1e}"
        ),
    );
}

// ---------------------------------------------------------------------------

fn spread(ratios: &[f64]) -> f64 {
    let max = ratios.iter().copied().fold(f64::MIN, f64::max);
    let min = ratios.iter().copied().fold(f64::MAX, f64::min);
    max / min
}

fn check_batch(r: &mut Report, what: &str, ratios: &[Option<f64>]) {
    let finite: Vec<f64> = ratios.iter().filter_map(|x| *x).filter(|x| x.is_finite() && *x > 0.0).collect();
    let ok = finite.len() == ratios.len() && spread(&finite) < 20.0;
    let s = if finite.is_empty() { f64::NAN } else { spread(&finite) };
    let (lo, hi) = (
        finite.iter().copied().fold(f64::MAX, f64::min),
        finite.iter().copied().fold(f64::MIN, f64::max),
    );
    r.check(
        ok,
        format!("{what}: {} of {} finite, K in [{lo:.3}, {hi:.3}], spread {s:.2} < 20", finite.len(), ratios.len()),
    );
}

fn nudge(g: &mut impl Rng, c: &LinearCoefficients, scale: f64) -> LinearCoefficients {
    let d = random_linear(g, c.dims, scale);
    let mut out = c.clone();
    out.psi_y += &d.psi_y;
    out.psi_0 += &d.psi_0;
    out.phi_x += &d.phi_x;
    out.phi_xbar += &d.phi_xbar;
    out.phi_0 += &d.phi_0;
    out.gamma_theta = c.gamma_theta.zip(&d.gamma_theta, |a, b| a + b);
    out.gamma_theta_bar = c.gamma_theta_bar.zip(&d.gamma_theta_bar, |a, b| a + b);
    out.gamma_0 = c.gamma_0.zip(&d.gamma_0, |a, b| a + b);
    out
}

fn terminal_values(g: &mut impl Rng, b: &Backend, n: usize) -> Vec<f64> {
    mffbsde::lq::TerminalValue {
        constant: vec(g, n, 1.0),
        brownian: mat(g, n, 1, 1.0),
    }
    .realize(b)
}

fn ac8(r: &mut Report) {
    let b = tree(8);
    let grid = b.grid();
    let mut g = rng(8);
    let dims = Dimensions { n: 2, d: 1 };
    let cfg = ContinuationConfig::default();

    let mut sde = Vec::new();
    let mut bsde = Vec::new();
    let mut apriori = Vec::new();
    let mut wellposed = Vec::new();
    for _ in 0..20 {
        let ca = CoefficientSet::linear(random_linear(&mut g, dims, 0.5)).unwrap();
        let cb = CoefficientSet::linear(nudge(&mut g, ca.as_linear().unwrap(), 0.2)).unwrap();
        let (da, db) = (
            CoefficientDynamics { coeffs: &ca, grid, frozen: None },
            CoefficientDynamics { coeffs: &cb, grid, frozen: None },
        );
        let (x0a, x0b) = (vec(&mut g, 2, 1.0), vec(&mut g, 2, 1.0));
        let xa = solve_mf_sde(&da, x0a.as_slice(), &b).unwrap();
        let xb = solve_mf_sde(&db, x0b.as_slice(), &b).unwrap();
        sde.push(sde_estimate_report(&xa, &xb, &da, &db, &b).unwrap().ratio);

        let (ga, gb) = (
            CoefficientDriver { coeffs: &ca, grid, frozen: None },
            CoefficientDriver { coeffs: &cb, grid, frozen: None },
        );
        let (ya, yb): (BsdeSolution, BsdeSolution) = (
            solve_mf_bsde(&ga, &terminal_values(&mut g, &b, 2), &b, None).unwrap(),
            solve_mf_bsde(&gb, &terminal_values(&mut g, &b, 2), &b, None).unwrap(),
        );
        bsde.push(bsde_estimate_report(&ya, &yb, &ga, &gb, &b).unwrap().ratio);
    }

    let weights = DominationWeights::case_a(dims, 0.5, DMatrix::identity(2, 2));
    for _ in 0..20 {
        let lc = random_linear(&mut g, dims, 0.15);
        let ca = CoefficientSet::linear(lc.clone()).unwrap();
        let (pa, pb) = (random_pert(&mut g, dims, &b, 1.0), random_pert(&mut g, dims, &b, 1.0));
        let (ta, _) = solve_perturbed(&ca, &weights, &pa, &cfg, &b).unwrap();
        let (tb, _) = solve_perturbed(&ca, &weights, &pb, &cfg, &b).unwrap();
        apriori.push(apriori_report(&ta, &tb, &pa, &pb).unwrap().ratio);

        let cb = CoefficientSet::linear(nudge(&mut g, &lc, 0.05)).unwrap();
        let (tb2, _) = solve(&cb, &weights, &cfg, &b).unwrap();
        let (ta2, _) = solve(&ca, &weights, &cfg, &b).unwrap();
        wellposed.push(wellposedness_report(&ca, &cb, &ta2, &tb2).unwrap().ratio);
    }
    check_batch(r, "forward estimate", &sde);
    check_batch(r, "backward estimate", &bsde);
    check_batch(r, "a priori estimate", &apriori);
    check_batch(r, "well-posedness estimate", &wellposed);
}

// ---------------------------------------------------------------------------

/// `y(t0)` is the mean of `y_N - sum_k g_k h` (the stochastic integral has
/// mean zero), so its standard error comes from the spread of that quantity.
fn y0_standard_error(c: &CoefficientSet, theta: &SolutionEnsemble) -> f64 {
    let t = c.dims().theta();
    let grid = theta.grid;
    let (h, steps) = (grid.h(), grid.steps);
    let paths = theta.y.width(steps);
    let mut samples = vec![0.0; paths];
    let mut th = vec![0.0; t];
    let mut tb = vec![0.0; t];
    let mut out = vec![0.0; t];
    for (j, s) in samples.iter_mut().enumerate() {
        *s = theta.y.node(steps, j)[0];
        for k in 0..steps {
            theta.theta(k, j, &mut th);
            theta.theta_bar(k, &mut tb);
            c.gamma(grid.at(k), &th, &tb, &mut out);
            *s -= out[0] * h;
        }
    }
    let mean = samples.iter().sum::<f64>() / paths as f64;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (paths - 1) as f64;
    (var / paths as f64).sqrt()
}

/// Scalar forward LQ instance with additive noise in the state.
fn noisy_flq() -> ForwardLQProblem {
    let mut p = ForwardLQProblem::scalar_example();
    p.beta = DMatrix::from_element(1, 1, 0.5).into();
    p.alpha = DMatrix::from_element(1, 1, 0.1).into();
    p.cost.q = DMatrix::from_element(1, 1, 1.0).into();
    p
}

const AC9_PATHS: usize = 50_000;

fn ac9(r: &mut Report) {
    let tree_b = tree(8);
    let mc_b = mc(9, AC9_PATHS, 8);
    let nested = ContinuationConfig::default();
    // nested continuation multiplies base solves; direct mode on the
    // ensemble, cross-checked against nested on the tree
    let direct = ContinuationConfig {
        mode: Mode::Direct,
        max_iters: 1000,
        ..ContinuationConfig::default()
    };

    let (c, mu, _) = example32(2.0, 2.0).unwrap();
    let w = DominationWeights::example32(Case::A, mu);
    let (t_sol, _) = solve_perturbed(&c, &w, &example32_pert(&tree_b), &nested, &tree_b).unwrap();
    let (m_sol, diag) = solve_perturbed(&c, &w, &example32_pert(&mc_b), &direct, &mc_b).unwrap();
    let (yt, ym) = (t_sol.y0()[0], m_sol.y0()[0]);
    let se = y0_standard_error(&c, &m_sol);
    r.check(
        (yt - ym).abs() <= 3.0 * se,
        format!(
            "example: tree y(t0) {yt:.5}, monte carlo {ym:.5} ({} iterations), |diff| {:.2e} <= 3 SE = {:.2e}",
            diag.levels[0].iterations,
            (yt - ym).abs(),
            3.0 * se
        ),
    );

    let prob = noisy_flq();
    let (hc, _) = hamiltonian_flq(&prob).unwrap();
    let t_sol = solve_flq(&prob, &tree_b, &nested).unwrap();
    let m_sol = solve_flq(&prob, &mc_b, &direct).unwrap();
    let (yt, ym) = (t_sol.theta.y0()[0], m_sol.theta.y0()[0]);
    let se = y0_standard_error(&hc, &m_sol.theta);
    r.check(
        (yt - ym).abs() <= 3.0 * se,
        format!(
            "forward LQ: tree y(t0) {yt:.5}, monte carlo {ym:.5}, |diff| {:.2e} <= 3 SE = {:.2e}",
            (yt - ym).abs(),
            3.0 * se
        ),
    );
}

fn ac10(r: &mut Report) {
    let b = tree(8);
    let (c, mu, _) = example32(2.0, 2.0).unwrap();
    let w = DominationWeights::example32(Case::A, mu);
    let pert = example32_pert(&b);
    // the transformed residual equals the original one, so solve well below
    // 1e-9; a single direct level reaches that without nesting cost
    let cfg = ContinuationConfig {
        mode: Mode::Direct,
        tol: 1e-10,
        max_iters: 2000,
        ..ContinuationConfig::default()
    };
    let (theta, _) = solve_perturbed(&c, &w, &pert, &cfg, &b).unwrap();

    let sym = symmetrize(&c);
    let flipped = symmetrize_solution(&theta);
    // (x, -y, -z) carries eta and the g part of rho with flipped signs
    let n = 1;
    let mut sp = pert.clone();
    sp.eta.iter_mut().for_each(|v| *v = -*v);
    for level in sp.rho.levels.iter_mut() {
        for row in level.chunks_mut(sp.rho.dim) {
            row[..n].iter_mut().for_each(|v| *v = -*v);
        }
    }
    let res = residual(&sym, &sp, &flipped, &b, &cfg.regression).unwrap();
    let own = residual(&c, &pert, &theta, &b, &cfg.regression).unwrap();
    r.check(
        res.total < 1e-9,
        format!("transformed residual {:.2e} < 1e-9 (original {:.2e})", res.total, own.total),
    );
    let sampling = Sampling {
        seed: 10,
        ..Sampling::default()
    };
    let primed = check_monotonicity(&sym, &w, &b, &sampling, Orientation::Primed).unwrap();
    r.check(
        primed.passed && primed.violations() == 0,
        format!("primed monotonicity on transformed coefficients: {} violations", primed.violations()),
    );
    let linear = CoefficientSet::linear({
        let mut l = LinearCoefficients::zeros(scalar());
        l.psi_y[(0, 0)] = -0.5;
        l.phi_x[(0, 0)] = 0.5;
        l.gamma_0 = DMatrix::from_column_slice(3, 1, &[0.2, 0.1, 0.3]).into();
        l.psi_0 = DVector::from_element(1, 0.0);
        l
    })
    .unwrap();
    let wl = DominationWeights::case_a(scalar(), 0.5, one());
    let (tl, _) = solve(&linear, &wl, &cfg, &b).unwrap();
    let zero = PerturbationTriple::zeros(scalar(), b.layout(), b.grid());
    let res = residual(&symmetrize(&linear), &zero, &symmetrize_solution(&tl), &b, &cfg.regression).unwrap();
    r.check(res.total < 1e-9, format!("linear instance: transformed residual {:.2e} < 1e-9", res.total));
}

fn main() {
    let criteria: [(&str, fn(&mut Report)); 10] = [
        ("zero system", ac1),
        ("decoupled exactness", ac2),
        ("contraction certificate", ac3),
        ("condition verifier fidelity", ac4),
        ("forward LQ desk instance", ac5),
        ("backward LQ desk instance", ac6),
        ("stationarity and optimality", ac7),
        ("estimate ratios", ac8),
        ("backend consistency", ac9),
        ("symmetric transform", ac10),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (title, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        if !criterion(i + 1, title, f) {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
