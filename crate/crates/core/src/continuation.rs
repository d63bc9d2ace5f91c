//! Method of continuation. The target coefficients are joined to the
//! decoupled reference coefficients by the convex path
//! `alpha * target + (1 - alpha) * reference`; each accepted level is reached
//! by a fixed-point iteration whose inner solves are the previous level.

use serde::{Deserialize, Serialize};

use crate::backward::{
    brownian_state, conditional_expectation, solve_mf_bsde,
    Driver, RegressionConfig,
};
use crate::error::{Error, Result};
use crate::forward::{solve_mf_sde, Dynamics};
use crate::model::norms::{expected_path_sum_sq, expected_sum, h_norm, m2_gap, m2_norm};
use crate::model::{
    level_mean, reference_coefficients, Case, CoefficientSet, Dimensions, DominationWeights,
    PerturbationTriple, Process, SolutionEnsemble, TimeGrid,
};
use crate::noise::{counter_rng, std_normal, sub_seed, Backend};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Level-by-level continuation with recursive inner solves.
    Nested,
    /// Damped fixed-point iteration straight from the reference system.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationConfig {
    pub mode: Mode,
    /// First step length; probed from the map's Lipschitz constant when absent.
    pub delta_init: Option<f64>,
    pub delta_min: f64,
    /// Stopping tolerance on successive iterates, in the M^2 norm.
    pub tol: f64,
    pub max_iters: usize,
    /// Inner tolerance as a fraction of the outer one.
    pub inner_tol_ratio: f64,
    /// Step growth after fast convergence; `1` disables growth.
    pub growth: f64,
    /// Relaxation weight of direct mode.
    pub damping: f64,
    /// Lower `mu`/`nu` to the normalization cap when needed.
    pub clamp_weights: bool,
    pub probe_seed: u64,
    pub probes: usize,
    pub regression: RegressionConfig,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        ContinuationConfig {
            mode: Mode::Nested,
            delta_init: None,
            delta_min: 1e-4,
            tol: 1e-8,
            max_iters: 50,
            inner_tol_ratio: 0.1,
            growth: 1.5,
            damping: 0.2,
            clamp_weights: true,
            probe_seed: 0,
            probes: 5,
            regression: RegressionConfig::default(),
        }
    }
}

impl ContinuationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Some(d) = self.delta_init {
            if !(d > 0.0 && d <= 1.0) {
                errs.push(format!("delta_init: must lie in (0, 1], got {d}"));
            } else if self.delta_min > d {
                errs.push(format!("delta_min: {} exceeds delta_init {d}", self.delta_min));
            }
        }
        if !(self.delta_min > 0.0 && self.delta_min <= 1.0) {
            errs.push(format!("delta_min: must lie in (0, 1], got {}", self.delta_min));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            errs.push(format!("tol: must be positive, got {}", self.tol));
        }
        if self.max_iters == 0 {
            errs.push("max_iters: must be at least 1".into());
        }
        if !(self.inner_tol_ratio > 0.0 && self.inner_tol_ratio <= 1.0) {
            errs.push(format!("inner_tol_ratio: must lie in (0, 1], got {}", self.inner_tol_ratio));
        }
        if !(self.growth >= 1.0 && self.growth.is_finite()) {
            errs.push(format!("growth: must be >= 1, got {}", self.growth));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            errs.push(format!("damping: must lie in (0, 1], got {}", self.damping));
        }
        if self.probes == 0 {
            errs.push("probes: must be at least 1".into());
        }
        if let Err(e) = self.regression.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// One accepted continuation level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub alpha: f64,
    pub delta: f64,
    pub iterations: usize,
    /// Ratios of successive iterate gaps.
    pub factors: Vec<f64>,
    pub final_gap: f64,
}

/// A step length that was tried and abandoned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedStep {
    pub from_alpha: f64,
    pub delta: f64,
    pub iterations: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Lipschitz ratios of the full-step map on random input pairs.
    pub ratios: Vec<f64>,
    pub k3_hat: f64,
    pub delta0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub mode: Mode,
    pub levels: Vec<LevelRecord>,
    pub rejected: Vec<RejectedStep>,
    pub probe: Option<ProbeReport>,
    pub residual: f64,
    pub base_solves: u64,
    pub mu: f64,
    pub nu: f64,
    pub warnings: Vec<String>,
}

impl SolveDiagnostics {
    pub fn alphas(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.alpha).collect()
    }

    pub fn max_factor(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.factors.iter().copied())
            .fold(0.0, f64::max)
    }
}

/// Components of the discrete defect of a candidate solution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub initial: f64,
    pub forward: f64,
    pub terminal: f64,
    pub backward: f64,
    pub martingale: f64,
    pub total: f64,
}

/// Runs `f` on a zeroed scratch slice of length `len`.
#[inline]
fn scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    if len <= 96 {
        let mut buf = [0.0; 96];
        f(&mut buf[..len])
    } else {
        let mut buf = vec![0.0; len];
        f(&mut buf)
    }
}

fn check_dims(what: &str, expected: Dimensions, got: Dimensions) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what: what.into(),
            expected: expected.theta(),
            got: got.theta(),
        });
    }
    Ok(())
}

fn check_pert(pert: &PerturbationTriple, dims: Dimensions, backend: &Backend) -> Result<()> {
    let layout = backend.layout();
    let steps = backend.grid().steps;
    let want = [
        ("xi", dims.n, pert.xi.len()),
        ("eta", layout.width(steps) * dims.n, pert.eta.len()),
        ("rho dimension", dims.theta(), pert.rho.dim),
        ("rho steps", steps, pert.rho.steps()),
    ];
    for (what, e, g) in want {
        if e != g {
            return Err(Error::Dimension {
                what: format!("perturbation {what}"),
                expected: e,
                got: g,
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reference (alpha = 0) system

/// Reference drift and diffusion with `(y, z)` frozen, plus `(psi, gamma)`.
struct RefDynamics<'a> {
    reference: &'a CoefficientSet,
    grid: TimeGrid,
    yz: Option<(&'a Process, &'a Process, &'a [Vec<f64>], &'a [Vec<f64>])>,
    rho: &'a Process,
}

impl Dynamics for RefDynamics<'_> {
    fn dims(&self) -> Dimensions {
        self.reference.dims()
    }

    fn eval(&self, k: usize, node: usize, x: &[f64], xb: &[f64], drift: &mut [f64], diff: &mut [f64]) {
        let n = x.len();
        let t = self.rho.dim;
        scratch(3 * t, |buf| {
            let (th, rest) = buf.split_at_mut(t);
            let (tb, out) = rest.split_at_mut(t);
            th[..n].copy_from_slice(x);
            tb[..n].copy_from_slice(xb);
            if let Some((y, z, ybar, zbar)) = self.yz {
                th[n..2 * n].copy_from_slice(y.node(k, node));
                th[2 * n..].copy_from_slice(z.node(k, node));
                tb[n..2 * n].copy_from_slice(&ybar[k]);
                tb[2 * n..].copy_from_slice(&zbar[k]);
            }
            self.reference.gamma(self.grid.at(k), th, tb, out);
            let r = self.rho.node(k, node);
            for a in 0..n {
                drift[a] = out[n + a] + r[n + a];
            }
            for (i, dv) in diff.iter_mut().enumerate() {
                *dv = out[2 * n + i] + r[2 * n + i];
            }
        })
    }
}

/// Reference driver (a function of `x` only) plus `phi`.
struct RefDriver<'a> {
    reference: &'a CoefficientSet,
    grid: TimeGrid,
    x: Option<(&'a Process, &'a [Vec<f64>])>,
    rho: &'a Process,
}

impl Driver for RefDriver<'_> {
    fn dims(&self) -> Dimensions {
        self.reference.dims()
    }

    fn eval(&self, k: usize, node: usize, y: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        let n = y.len();
        let t = self.rho.dim;
        let r = self.rho.node(k, node);
        match self.x {
            None => out.copy_from_slice(&r[..n]),
            Some((x, xbar)) => scratch(3 * t, |buf| {
                let (th, rest) = buf.split_at_mut(t);
                let (tb, full) = rest.split_at_mut(t);
                th[..n].copy_from_slice(x.node(k, node));
                tb[..n].copy_from_slice(&xbar[k]);
                self.reference.gamma(self.grid.at(k), th, tb, full);
                for a in 0..n {
                    out[a] = full[a] + r[a];
                }
            }),
        }
    }

    fn explicit(&self) -> bool {
        true
    }
}

/// Solves the reference system under `pert` in its decoupled order.
fn reference_solve(
    reference: &CoefficientSet,
    case: Case,
    pert: &PerturbationTriple,
    backend: &Backend,
    regression: &RegressionConfig,
) -> Result<SolutionEnsemble> {
    let dims = reference.dims();
    let n = dims.n;
    let grid = backend.grid();
    let layout = backend.layout();
    let steps = grid.steps;
    match case {
        Case::A => {
            let driver = RefDriver {
                reference,
                grid,
                x: None,
                rho: &pert.rho,
            };
            let bs = solve_mf_bsde(&driver, &pert.eta, backend, Some(regression))?;
            let w0 = layout.width(0);
            let mut x0 = vec![0.0; w0 * n];
            for j in 0..w0 {
                reference.psi(bs.y.node(0, j), &mut x0[j * n..(j + 1) * n]);
                for a in 0..n {
                    x0[j * n + a] += pert.xi[a];
                }
            }
            let ybar = bs.y.means();
            let zbar = bs.z.means();
            let dynamics = RefDynamics {
                reference,
                grid,
                yz: Some((&bs.y, &bs.z, &ybar, &zbar)),
                rho: &pert.rho,
            };
            let x = solve_mf_sde(&dynamics, &x0, backend)?;
            Ok(SolutionEnsemble::from_parts(dims, layout, grid, x, bs.y, bs.z))
        }
        Case::B => {
            let dynamics = RefDynamics {
                reference,
                grid,
                yz: None,
                rho: &pert.rho,
            };
            let x = solve_mf_sde(&dynamics, &pert.xi, backend)?;
            let xbar = x.means();
            let wn = layout.width(steps);
            let mut terminal = vec![0.0; wn * n];
            for j in 0..wn {
                let row = &mut terminal[j * n..(j + 1) * n];
                reference.phi(x.node(steps, j), &xbar[steps], row);
                for a in 0..n {
                    row[a] += pert.eta[j * n + a];
                }
            }
            let driver = RefDriver {
                reference,
                grid,
                x: Some((&x, &xbar)),
                rho: &pert.rho,
            };
            let bs = solve_mf_bsde(&driver, &terminal, backend, Some(regression))?;
            Ok(SolutionEnsemble::from_parts(dims, layout, grid, x, bs.y, bs.z))
        }
    }
}

/// Solution of the reference (alpha = 0) system under `pert`: backward part
/// first in case A, forward part first in case B.
pub fn solve_alpha0(
    weights: &DominationWeights,
    pert: &PerturbationTriple,
    backend: &Backend,
) -> Result<SolutionEnsemble> {
    weights.validate()?;
    check_pert(pert, weights.dims, backend)?;
    let reference = reference_coefficients(weights)?;
    reference_solve(&reference, weights.case, pert, backend, &RegressionConfig::default())
}

// ---------------------------------------------------------------------------
// The continuation map

/// Data of the continuation map at `theta`:
/// `xi~ = delta [Psi - Psi0](y(t0)) + xi`,
/// `eta~ = delta [Phi - Phi0](x(T), E x(T)) + eta`,
/// `rho~ = delta [Gamma - Gamma0](theta, E theta) + rho`.
pub fn continuation_perturbation(
    coeffs: &CoefficientSet,
    reference: &CoefficientSet,
    delta: f64,
    theta: &SolutionEnsemble,
    pert: &PerturbationTriple,
) -> PerturbationTriple {
    let dims = coeffs.dims();
    let n = dims.n;
    let t = dims.theta();
    let grid = theta.grid;
    let steps = grid.steps;

    let y0 = &theta.ybar[0];
    let mut xi = vec![0.0; n];
    scratch(2 * n, |buf| {
        let (a, b) = buf.split_at_mut(n);
        coeffs.psi(y0, a);
        reference.psi(y0, b);
        for i in 0..n {
            xi[i] = delta * (a[i] - b[i]) + pert.xi[i];
        }
    });

    let xbar_n = &theta.xbar[steps];
    let mut eta = vec![0.0; pert.eta.len()];
    par::for_each_chunk_mut(&mut eta, n, |j, row| {
        scratch(2 * n, |buf| {
            let (a, b) = buf.split_at_mut(n);
            let x = theta.x.node(steps, j);
            coeffs.phi(x, xbar_n, a);
            reference.phi(x, xbar_n, b);
            for i in 0..n {
                row[i] = delta * (a[i] - b[i]) + pert.eta[j * n + i];
            }
        })
    });

    let mut rho = Process {
        dim: t,
        levels: Vec::with_capacity(steps + 1),
    };
    for k in 0..=steps {
        let width = theta.x.width(k);
        let mut level = vec![0.0; width * t];
        if k < steps {
            let at = grid.at(k);
            scratch(t, |tb| {
                theta.theta_bar(k, tb);
                let tb: &[f64] = tb;
                par::for_each_chunk_mut(&mut level, t, |j, row| {
                    scratch(3 * t, |buf| {
                        let (th, rest) = buf.split_at_mut(t);
                        let (a, b) = rest.split_at_mut(t);
                        theta.theta(k, j, th);
                        coeffs.gamma(at, th, tb, a);
                        reference.gamma(at, th, tb, b);
                        let r = pert.rho.node(k, j);
                        for i in 0..t {
                            row[i] = delta * (a[i] - b[i]) + r[i];
                        }
                    })
                });
            });
        }
        rho.levels.push(level);
    }
    PerturbationTriple { xi, eta, rho }
}

/// One application of the continuation map: the perturbation is rebuilt
/// from `theta_in` and handed to `level_solver`, which must solve the
/// current level's system.
pub fn t_map(
    coeffs: &CoefficientSet,
    weights: &DominationWeights,
    delta: f64,
    theta_in: &SolutionEnsemble,
    pert: &PerturbationTriple,
    level_solver: &mut dyn FnMut(&PerturbationTriple) -> Result<SolutionEnsemble>,
) -> Result<SolutionEnsemble> {
    let reference = reference_coefficients(weights)?;
    let p = continuation_perturbation(coeffs, &reference, delta, theta_in, pert);
    level_solver(&p)
}

/// The continuation map from level 0, with the reference solve as level solver.
pub fn t_map_from_reference(
    coeffs: &CoefficientSet,
    weights: &DominationWeights,
    delta: f64,
    theta_in: &SolutionEnsemble,
    pert: &PerturbationTriple,
    backend: &Backend,
) -> Result<SolutionEnsemble> {
    let reference = reference_coefficients(weights)?;
    let p = continuation_perturbation(coeffs, &reference, delta, theta_in, pert);
    reference_solve(&reference, weights.case, &p, backend, &RegressionConfig::default())
}

fn mix(a: &SolutionEnsemble, b: &SolutionEnsemble, w: f64) -> SolutionEnsemble {
    let lerp = |p: &Process, q: &Process| Process {
        dim: p.dim,
        levels: p
            .levels
            .iter()
            .zip(&q.levels)
            .map(|(u, v)| u.iter().zip(v).map(|(s, t)| (1.0 - w) * s + w * t).collect())
            .collect(),
    };
    SolutionEnsemble::from_parts(
        a.dims,
        a.layout,
        a.grid,
        lerp(&a.x, &b.x),
        lerp(&a.y, &b.y),
        lerp(&a.z, &b.z),
    )
}

/// Random ensemble with standard normal entries (zero `z` at step `N`).
fn random_ensemble(dims: Dimensions, backend: &Backend, seed: u64, stream: u64) -> SolutionEnsemble {
    let layout = backend.layout();
    let grid = backend.grid();
    let mut s = SolutionEnsemble::zeros(dims, layout, grid);
    let mut rng = counter_rng(seed, stream, 0, 4);
    for p in [&mut s.x, &mut s.y] {
        for lvl in p.levels.iter_mut() {
            lvl.iter_mut().for_each(|v| *v = std_normal(&mut rng));
        }
    }
    for lvl in s.z.levels[..grid.steps].iter_mut() {
        lvl.iter_mut().for_each(|v| *v = std_normal(&mut rng));
    }
    s.refresh_means();
    s
}

// ---------------------------------------------------------------------------
// Solver state

struct FixedPoint {
    theta: SolutionEnsemble,
    iterations: usize,
    factors: Vec<f64>,
    final_gap: f64,
    failure: Option<String>,
}

struct Machine<'a> {
    coeffs: &'a CoefficientSet,
    reference: CoefficientSet,
    case: Case,
    backend: &'a Backend,
    cfg: &'a ContinuationConfig,
    ladder: Vec<f64>,
    warm: Vec<Option<SolutionEnsemble>>,
    base_solves: u64,
}

const BLOW_UP: f64 = 1e6;
const GROWTH_STREAK: usize = 3;
/// A level whose gaps all shrank at least this fast lets the step grow.
const FAST_FACTOR: f64 = 0.25;

impl<'a> Machine<'a> {
    fn base(&mut self, pert: &PerturbationTriple) -> Result<SolutionEnsemble> {
        self.base_solves += 1;
        reference_solve(
            &self.reference,
            self.case,
            pert,
            self.backend,
            &self.cfg.regression,
        )
    }

    fn perturbation(&self, delta: f64, theta: &SolutionEnsemble, pert: &PerturbationTriple) -> PerturbationTriple {
        continuation_perturbation(self.coeffs, &self.reference, delta, theta, pert)
    }

    /// Solves the system at `ladder[level]` under `pert` to tolerance `tol`.
    fn solve_level(
        &mut self,
        level: usize,
        pert: &PerturbationTriple,
        tol: f64,
    ) -> Result<SolutionEnsemble> {
        if level == 0 {
            return self.base(pert);
        }
        let start = match self.warm[level].take() {
            Some(w) => w,
            None => self.solve_level(level - 1, pert, tol)?,
        };
        let fp = self.fixed_point(level, pert, tol, start)?;
        if let Some(reason) = fp.failure {
            return Err(Error::NoConvergence(format!(
                "inner level alpha = {:.6}: {reason}",
                self.ladder[level]
            )));
        }
        self.warm[level] = Some(fp.theta.clone());
        Ok(fp.theta)
    }

    /// Picard iteration of the map into `ladder[level]` from `ladder[level - 1]`.
    fn fixed_point(
        &mut self,
        level: usize,
        pert: &PerturbationTriple,
        tol: f64,
        start: SolutionEnsemble,
    ) -> Result<FixedPoint> {
        let delta = self.ladder[level] - self.ladder[level - 1];
        let ratio = self.cfg.inner_tol_ratio;
        let mut theta = start;
        let mut prev_gap = f64::INFINITY;
        let mut last_gap = m2_norm(&theta).unwrap_or(1.0) + 1.0;
        let mut streak = 0;
        let mut factors = Vec::new();
        for it in 1..=self.cfg.max_iters {
            let p = self.perturbation(delta, &theta, pert);
            // The inner tolerance follows the gap being measured; when the
            // first attempt was too loose for the gap it produced, the inner
            // level resumes from its warm start.
            let mut inner_tol = ratio * tol.max(last_gap);
            let (next, gap) = loop {
                let next = match self.solve_level(level - 1, &p, inner_tol) {
                    Ok(v) => v,
                    Err(e @ (Error::NoConvergence(_) | Error::NonFinite { .. } | Error::StepContraction { .. })) => {
                        return Ok(FixedPoint {
                            theta,
                            iterations: it,
                            factors,
                            final_gap: f64::INFINITY,
                            failure: Some(e.to_string()),
                        })
                    }
                    Err(e) => return Err(e),
                };
                let gap = m2_gap(&next, &theta).unwrap_or(f64::INFINITY);
                let wanted = ratio * tol.max(gap);
                if level == 1 || inner_tol <= wanted || !gap.is_finite() {
                    break (next, gap);
                }
                inner_tol = wanted;
            };
            if prev_gap.is_finite() && prev_gap > 0.0 {
                factors.push(gap / prev_gap);
            }
            theta = next;
            if gap < tol {
                return Ok(FixedPoint {
                    theta,
                    iterations: it,
                    factors,
                    final_gap: gap,
                    failure: None,
                });
            }
            let failure = if !gap.is_finite() || gap > BLOW_UP {
                Some(format!("iterate gap {gap:.3e} blew up"))
            } else {
                streak = if gap > prev_gap { streak + 1 } else { 0 };
                (streak >= GROWTH_STREAK).then(|| format!("iterate gap grew {GROWTH_STREAK} times in a row"))
            };
            if failure.is_some() {
                return Ok(FixedPoint {
                    theta,
                    iterations: it,
                    factors,
                    final_gap: gap,
                    failure,
                });
            }
            prev_gap = gap;
            last_gap = gap;
        }
        Ok(FixedPoint {
            theta,
            iterations: self.cfg.max_iters,
            factors,
            final_gap: prev_gap,
            failure: Some(format!("no convergence in {} iterations", self.cfg.max_iters)),
        })
    }
}

/// Power steps applied to each random pair in [`probe_delta0`].
pub const PROBE_POWER_STEPS: usize = 8;

/// Estimates `K3` from the Lipschitz ratio of the full-step map and returns
/// `delta0 = 1 / (2 sqrt(K3))`, capped at 1. Each random pair is pushed
/// through the map a few times with its gap renormalized, so the ratio
/// settles on the most expansive direction instead of a generic one. The
/// map is affine in `delta` from level 0, so one step length suffices.
pub fn probe_delta0(
    coeffs: &CoefficientSet,
    weights: &DominationWeights,
    backend: &Backend,
    config: &ContinuationConfig,
) -> Result<ProbeReport> {
    let reference = reference_coefficients(weights)?;
    let dims = coeffs.dims();
    let zero = PerturbationTriple::zeros(dims, backend.layout(), backend.grid());
    let seed = sub_seed(config.probe_seed, "probe");
    let apply = |theta: &SolutionEnsemble| -> Result<SolutionEnsemble> {
        let p = continuation_perturbation(coeffs, &reference, 1.0, theta, &zero);
        reference_solve(&reference, weights.case, &p, backend, &config.regression)
    };
    let mut ratios = Vec::with_capacity(config.probes);
    for i in 0..config.probes {
        let mut a = random_ensemble(dims, backend, seed, 2 * i as u64);
        let mut b = random_ensemble(dims, backend, seed, 2 * i as u64 + 1);
        let scale = m2_gap(&a, &b)?;
        let mut best = 0.0f64;
        for _ in 0..PROBE_POWER_STEPS {
            let gap = m2_gap(&a, &b)?;
            if gap == 0.0 {
                break;
            }
            let ta = apply(&a)?;
            let tb = apply(&b)?;
            let out = m2_gap(&ta, &tb)?;
            best = best.max(out / gap);
            if out == 0.0 {
                break;
            }
            // keep the pair at its original separation around the image of `a`
            b = mix(&ta, &tb, scale / out);
            a = ta;
        }
        ratios.push(best);
    }
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    let k3_hat = worst * worst;
    let delta0 = if worst > 0.0 { (0.5 / worst).min(1.0) } else { 1.0 };
    Ok(ProbeReport {
        ratios,
        k3_hat,
        delta0,
    })
}

/// Solves the coupled system with zero perturbation.
pub fn solve(
    coeffs: &CoefficientSet,
    weights: &DominationWeights,
    config: &ContinuationConfig,
    backend: &Backend,
) -> Result<(SolutionEnsemble, SolveDiagnostics)> {
    let zero = PerturbationTriple::zeros(coeffs.dims(), backend.layout(), backend.grid());
    solve_perturbed(coeffs, weights, &zero, config, backend)
}

/// Solves the coupled system with coefficients `(Psi + xi, Phi + eta, Gamma + rho)`.
pub fn solve_perturbed(
    coeffs: &CoefficientSet,
    weights: &DominationWeights,
    pert: &PerturbationTriple,
    config: &ContinuationConfig,
    backend: &Backend,
) -> Result<(SolutionEnsemble, SolveDiagnostics)> {
    config.validate()?;
    weights.validate()?;
    let dims = coeffs.dims();
    check_dims("weights", dims, weights.dims)?;
    if dims.d != backend.d() {
        return Err(Error::Dimension {
            what: "brownian dimension".into(),
            expected: backend.d(),
            got: dims.d,
        });
    }
    check_pert(pert, dims, backend)?;

    let mut warnings = Vec::new();
    let mut w = weights.clone();
    if config.clamp_weights {
        if let Some(old) = w.clamp_to_wlog() {
            let (name, new) = match w.case {
                Case::A => ("mu", w.mu),
                Case::B => ("nu", w.nu),
            };
            warnings.push(format!(
                "{name} lowered from {old} to {new} to satisfy the normalization bounds"
            ));
        }
    }
    if config.mode == Mode::Nested {
        if let Backend::MonteCarlo(m) = backend {
            if m.paths * m.grid.steps > 100_000 {
                warnings.push(format!(
                    "nested continuation on {} monte-carlo paths may be slow",
                    m.paths
                ));
            }
        }
    }
    let reference = reference_coefficients(&w)?;
    let mut machine = Machine {
        coeffs,
        reference,
        case: w.case,
        backend,
        cfg: config,
        ladder: vec![0.0],
        warm: vec![None],
        base_solves: 0,
    };
    let mut diag = SolveDiagnostics {
        mode: config.mode,
        levels: Vec::new(),
        rejected: Vec::new(),
        probe: None,
        residual: f64::NAN,
        base_solves: 0,
        mu: w.mu,
        nu: w.nu,
        warnings,
    };

    let theta0 = machine.base(pert)?;
    let reg = config.regression;
    let r0 = residual(coeffs, pert, &theta0, backend, &reg)?.total;
    let theta = if r0 <= 1e-2 * config.tol {
        // The reference solution already solves the target system.
        diag.levels.push(LevelRecord {
            alpha: 1.0,
            delta: 1.0,
            iterations: 1,
            factors: Vec::new(),
            final_gap: r0,
        });
        theta0
    } else {
        match config.mode {
            Mode::Direct => run_direct(&mut machine, pert, theta0, &mut diag)?,
            Mode::Nested => run_nested(&mut machine, &w, pert, theta0, &mut diag)?,
        }
    };
    diag.base_solves = machine.base_solves;
    let r = residual(coeffs, pert, &theta, backend, &reg)?.total;
    diag.residual = r;
    let limit = 100.0 * config.tol;
    if r > limit {
        return Err(Error::Consistency { residual: r, limit });
    }
    Ok((theta, diag))
}

fn run_direct(
    machine: &mut Machine<'_>,
    pert: &PerturbationTriple,
    theta0: SolutionEnsemble,
    diag: &mut SolveDiagnostics,
) -> Result<SolutionEnsemble> {
    let cfg = machine.cfg;
    diag.warnings
        .push("direct mode is a heuristic without a convergence guarantee".into());
    let mut theta = theta0;
    let mut factors = Vec::new();
    let mut prev = f64::INFINITY;
    for it in 1..=cfg.max_iters {
        let p = machine.perturbation(1.0, &theta, pert);
        let next = machine.base(&p)?;
        let gap = m2_gap(&next, &theta).unwrap_or(f64::INFINITY);
        if prev.is_finite() && prev > 0.0 {
            factors.push(gap / prev);
        }
        if gap < cfg.tol {
            diag.levels.push(LevelRecord {
                alpha: 1.0,
                delta: 1.0,
                iterations: it,
                factors,
                final_gap: gap,
            });
            return Ok(next);
        }
        if !gap.is_finite() || gap > BLOW_UP {
            return Err(Error::NoConvergence(format!(
                "direct mode diverged at iteration {it} (gap {gap:.3e})"
            )));
        }
        theta = mix(&theta, &next, cfg.damping);
        prev = gap;
    }
    Err(Error::NoConvergence(format!(
        "direct mode did not reach tolerance {:.1e} in {} iterations (last gap {prev:.3e})",
        cfg.tol, cfg.max_iters
    )))
}

fn run_nested(
    machine: &mut Machine<'_>,
    weights: &DominationWeights,
    pert: &PerturbationTriple,
    theta0: SolutionEnsemble,
    diag: &mut SolveDiagnostics,
) -> Result<SolutionEnsemble> {
    let cfg = machine.cfg;
    let mut delta = match cfg.delta_init {
        Some(d) => d,
        None => {
            let probe = probe_delta0(machine.coeffs, weights, machine.backend, cfg)?;
            let d = probe.delta0.max(cfg.delta_min);
            diag.probe = Some(probe);
            d
        }
    };
    let mut alpha = 0.0;
    let mut theta = theta0;
    while alpha < 1.0 {
        let target = if alpha + delta >= 1.0 - 1e-12 { 1.0 } else { alpha + delta };
        let step = target - alpha;
        machine.ladder.push(target);
        machine.warm.push(None);
        let top = machine.ladder.len() - 1;
        let fp = machine.fixed_point(top, pert, cfg.tol, theta.clone())?;
        match fp.failure {
            None => {
                machine.warm[top] = Some(fp.theta.clone());
                let factors_seen = fp.factors.clone();
                diag.levels.push(LevelRecord {
                    alpha: target,
                    delta: step,
                    iterations: fp.iterations,
                    factors: fp.factors,
                    final_gap: fp.final_gap,
                });
                let fast = factors_seen.iter().all(|&f| f <= FAST_FACTOR);
                if fast {
                    delta = step * cfg.growth;
                } else {
                    delta = step;
                }
                alpha = target;
                theta = fp.theta;
            }
            Some(reason) => {
                machine.ladder.pop();
                machine.warm.pop();
                diag.rejected.push(RejectedStep {
                    from_alpha: alpha,
                    delta: step,
                    iterations: fp.iterations,
                    reason: reason.clone(),
                });
                delta = step / 2.0;
                if delta < cfg.delta_min {
                    return Err(Error::NoConvergence(format!(
                        "step length fell below {:.1e} at alpha = {alpha:.6} ({reason})",
                        cfg.delta_min
                    )));
                }
            }
        }
    }
    Ok(theta)
}

// ---------------------------------------------------------------------------
// Residual and reports

fn sq(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

fn mean_of(values: Vec<f64>) -> f64 {
    level_mean(&values, 1).first().copied().unwrap_or(0.0)
}

/// Discrete defect of `theta` in the perturbed system, each part a mean
/// square: initial coupling, Euler steps, terminal coupling, implicit
/// backward steps and the `z` representation (weighted by `h`).
pub fn residual(
    coeffs: &CoefficientSet,
    pert: &PerturbationTriple,
    theta: &SolutionEnsemble,
    backend: &Backend,
    regression: &RegressionConfig,
) -> Result<ResidualReport> {
    let dims = coeffs.dims();
    let (n, d) = (dims.n, dims.d);
    let nd = n * d;
    let t = dims.theta();
    let grid = backend.grid();
    let layout = backend.layout();
    let (h, steps) = (grid.h(), grid.steps);
    let state = brownian_state(backend);

    let initial = mean_of(
        (0..layout.width(0))
            .map(|j| {
                let mut p = vec![0.0; n];
                coeffs.psi(theta.y.node(0, j), &mut p);
                let x = theta.x.node(0, j);
                (0..n).map(|a| (x[a] - p[a] - pert.xi[a]).powi(2)).sum()
            })
            .collect(),
    );
    let terminal = mean_of(
        (0..layout.width(steps))
            .map(|j| {
                let mut p = vec![0.0; n];
                coeffs.phi(theta.x.node(steps, j), &theta.xbar[steps], &mut p);
                let y = theta.y.node(steps, j);
                (0..n).map(|a| (y[a] - p[a] - pert.eta[j * n + a]).powi(2)).sum()
            })
            .collect(),
    );
    let mut forward = 0.0;
    let mut backward = 0.0;
    let mut martingale = 0.0;
    for k in 0..steps {
        let at = grid.at(k);
        let mut tb = vec![0.0; t];
        theta.theta_bar(k, &mut tb);
        let gam: Vec<Vec<f64>> = par::map_collect(layout.width(k), |j| {
            let mut th = vec![0.0; t];
            let mut out = vec![0.0; t];
            theta.theta(k, j, &mut th);
            coeffs.gamma(at, &th, &tb, &mut out);
            let r = pert.rho.node(k, j);
            out.iter_mut().zip(r).for_each(|(o, r)| *o += r);
            out
        });
        let fwd: Vec<f64> = par::map_collect(layout.width(k + 1), |j| {
            let p = layout.parent(j);
            let dw = backend.increment(k, j);
            let (x0, x1) = (theta.x.node(k, p), theta.x.node(k + 1, j));
            let g = &gam[p];
            (0..n)
                .map(|a| {
                    let mut v = x1[a] - x0[a] - g[n + a] * h;
                    for i in 0..d {
                        v -= g[2 * n + i * n + a] * dw[i];
                    }
                    v * v
                })
                .sum()
        });
        forward += mean_of(fwd);

        let dim = n + nd;
        let next = &theta.y.levels[k + 1];
        let mut targets = vec![0.0; layout.width(k + 1) * dim];
        for j in 0..layout.width(k + 1) {
            let dw = backend.increment(k, j);
            let yv = &next[j * n..(j + 1) * n];
            targets[j * dim..j * dim + n].copy_from_slice(yv);
            for i in 0..d {
                for a in 0..n {
                    targets[j * dim + n + i * n + a] = yv[a] * dw[i] / h;
                }
            }
        }
        let proj = conditional_expectation(backend, k, state.as_ref(), regression, &targets, dim)?;
        let (bw, zm): (Vec<f64>, Vec<f64>) = (0..layout.width(k))
            .map(|p| {
                let e = &proj[p * dim..(p + 1) * dim];
                let y = theta.y.node(k, p);
                let z = theta.z.node(k, p);
                let g = &gam[p];
                let b: f64 = (0..n).map(|a| (y[a] - e[a] + h * g[a]).powi(2)).sum();
                let m: f64 = (0..nd).map(|i| (z[i] - e[n + i]).powi(2)).sum();
                (b, m)
            })
            .unzip();
        backward += mean_of(bw);
        martingale += mean_of(zm) * h;
    }
    let total = (initial + forward + terminal + backward + martingale).sqrt();
    Ok(ResidualReport {
        initial,
        forward,
        terminal,
        backward,
        martingale,
        total,
    })
}

/// Both sides of the a priori estimate between two solutions of the same
/// coefficient family under different perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AprioriReport {
    pub lhs: f64,
    pub j_hat: f64,
    pub ratio: Option<f64>,
}

/// Both sides of the stability estimate between two coefficient sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WellposednessReport {
    pub lhs: f64,
    pub i_hat: f64,
    pub ratio: Option<f64>,
}

const REPORT_TOL: f64 = 1e-12;

fn ratio_or_inconsistent(lhs: f64, rhs: f64) -> Result<Option<f64>> {
    if rhs <= REPORT_TOL * REPORT_TOL {
        if lhs > REPORT_TOL {
            return Err(Error::Consistency {
                residual: lhs,
                limit: REPORT_TOL,
            });
        }
        return Ok(None);
    }
    Ok(Some(lhs / rhs))
}

/// `lhs = |theta_A - theta_B|^2` in M^2 and `J_hat = |pert_A - pert_B|^2` in H.
pub fn apriori_report(
    theta_a: &SolutionEnsemble,
    theta_b: &SolutionEnsemble,
    pert_a: &PerturbationTriple,
    pert_b: &PerturbationTriple,
) -> Result<AprioriReport> {
    let lhs = m2_norm(&theta_a.sub(theta_b))?.powi(2);
    let j_hat = h_norm(&pert_a.sub(pert_b), theta_a.layout, theta_a.grid)?.powi(2);
    Ok(AprioriReport {
        lhs,
        j_hat,
        ratio: ratio_or_inconsistent(lhs, j_hat)?,
    })
}

/// `lhs = |theta_A - theta_B|^2` in M^2 and `I_hat`: the coefficient gaps
/// `|dPsi|^2 + E|dPhi|^2 + E(sum|dg|h)^2 + E(sum|db|h)^2 + E sum|dsigma|^2 h`
/// evaluated along `theta_B`.
pub fn wellposedness_report(
    coeffs_a: &CoefficientSet,
    coeffs_b: &CoefficientSet,
    theta_a: &SolutionEnsemble,
    theta_b: &SolutionEnsemble,
) -> Result<WellposednessReport> {
    let dims = coeffs_a.dims();
    check_dims("coefficient pair", dims, coeffs_b.dims())?;
    let n = dims.n;
    let t = dims.theta();
    let grid = theta_b.grid;
    let layout = theta_b.layout;
    let (h, steps) = (grid.h(), grid.steps);
    let lhs = m2_norm(&theta_a.sub(theta_b))?.powi(2);

    let gap = |f: &dyn Fn(&CoefficientSet, &mut [f64]), len: usize| -> Vec<f64> {
        let mut a = vec![0.0; len];
        let mut b = vec![0.0; len];
        f(coeffs_a, &mut a);
        f(coeffs_b, &mut b);
        a.iter().zip(&b).map(|(u, v)| u - v).collect()
    };
    let psi = mean_of(
        (0..layout.width(0))
            .map(|j| sq(&gap(&|c, o| c.psi(theta_b.y.node(0, j), o), n)))
            .collect(),
    );
    let phi = mean_of(
        (0..layout.width(steps))
            .map(|j| sq(&gap(&|c, o| c.phi(theta_b.x.node(steps, j), &theta_b.xbar[steps], o), n)))
            .collect(),
    );
    let gaps: Vec<Vec<Vec<f64>>> = (0..steps)
        .map(|k| {
            let mut tb = vec![0.0; t];
            theta_b.theta_bar(k, &mut tb);
            (0..layout.width(k))
                .map(|j| {
                    let mut th = vec![0.0; t];
                    theta_b.theta(k, j, &mut th);
                    gap(&|c, o| c.gamma(grid.at(k), &th, &tb, o), t)
                })
                .collect()
        })
        .collect();
    let g = expected_path_sum_sq(layout, steps, |k, j| sq(&gaps[k][j][..n]).sqrt() * h);
    let b = expected_path_sum_sq(layout, steps, |k, j| sq(&gaps[k][j][n..2 * n]).sqrt() * h);
    let s = expected_sum(layout, steps, |k, j| sq(&gaps[k][j][2 * n..])) * h;
    let i_hat = psi + phi + g + b + s;
    Ok(WellposednessReport {
        lhs,
        i_hat,
        ratio: ratio_or_inconsistent(lhs, i_hat)?,
    })
}
