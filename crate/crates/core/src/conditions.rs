//! Checks of the Lipschitz, domination and monotonicity assumptions.
//!
//! Affine coefficient sets are checked exactly where possible. For callback
//! coefficients every check is a falsifier: a pass means that no violation
//! turned up in the sampled arguments.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, gemv_acc, hstack, norm2, operator_norm, pinv};
use crate::model::{CoefficientSet, Dimensions, DominationWeights, LinearCoefficients, TimeGrid};
use crate::noise::{counter_rng, std_normal, sub_seed, unit_open, Backend};
use crate::par;

pub use crate::model::{check_wlog, example32, reference_coefficients, WlogReport};

/// Margins within this relative distance of zero count as ties (passes).
pub const TIE_TOL: f64 = 1e-12;

/// How argument samples are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sampling {
    pub budget: usize,
    /// Half-width of the main sampling box.
    pub radius: f64,
    /// Half-width used by every tenth sample, to probe growth.
    pub far_radius: f64,
    pub seed: u64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            budget: 10_000,
            radius: 5.0,
            far_radius: 100.0,
            seed: 0,
        }
    }
}

impl Sampling {
    pub fn with_budget(budget: usize) -> Self {
        Sampling {
            budget,
            ..Sampling::default()
        }
    }

    fn validate(&self, min_budget: usize) -> Result<()> {
        if self.budget < min_budget {
            return Err(Error::Config(format!(
                "sample budget must be at least {min_budget}, got {}",
                self.budget
            )));
        }
        if !(self.radius > 0.0 && self.far_radius > 0.0) {
            return Err(Error::Config("sampling radii must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample argument generator.
struct Draw {
    rng: rand_chacha::ChaCha8Rng,
    radius: f64,
}

impl Draw {
    fn new(s: &Sampling, label: &str, i: usize) -> Self {
        let radius = if i % 10 == 9 { s.far_radius } else { s.radius };
        Draw {
            rng: counter_rng(sub_seed(s.seed, label), i as u64, 0, 0),
            radius,
        }
    }

    fn uniform(&mut self) -> f64 {
        self.radius * (2.0 * unit_open(&mut self.rng) - 1.0)
    }

    fn point(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.uniform()).collect()
    }

    /// A second point: independent, or a small displacement of `base`.
    fn partner(&mut self, base: &[f64], near: bool) -> Vec<f64> {
        if near {
            let scale = 0.05 * self.radius;
            base.iter().map(|v| v + scale * std_normal(&mut self.rng)).collect()
        } else {
            self.point(base.len())
        }
    }

    fn index(&mut self, n: usize) -> usize {
        (self.rng.next_u64() % n as u64) as usize
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn norm(a: &[f64]) -> f64 {
    norm2(a).sqrt()
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.nrows()];
    gemv_acc(m, v, &mut out);
    out
}

fn non_finite(what: &str, step: usize) -> Error {
    Error::NonFinite {
        step,
        what: format!("{what} evaluated to a non-finite value"),
    }
}

// ---------------------------------------------------------------------------
// Lipschitz constants

/// Lipschitz constants of each coefficient in all of its arguments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub psi: f64,
    pub phi: f64,
    pub g: f64,
    pub b: f64,
    pub sigma: f64,
    /// Operator norms rather than sampled difference quotients.
    pub exact: bool,
}

impl LipschitzEstimate {
    pub fn max(&self) -> f64 {
        [self.psi, self.phi, self.g, self.b, self.sigma]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Exact operator norms for affine coefficients, sampled difference
/// quotients otherwise.
pub fn estimate_lipschitz(coeffs: &CoefficientSet, grid: TimeGrid, sampling: &Sampling) -> Result<LipschitzEstimate> {
    match coeffs.as_linear() {
        Some(c) => Ok(linear_lipschitz(c, grid)),
        None => sample_lipschitz(coeffs, grid, sampling),
    }
}

fn linear_lipschitz(c: &LinearCoefficients, grid: TimeGrid) -> LipschitzEstimate {
    let n = c.dims.n;
    let t = c.dims.theta();
    let rows = |k: usize, lo: usize, hi: usize| {
        let full = hstack(&[c.gamma_theta.at(k), c.gamma_theta_bar.at(k)]);
        operator_norm(&full.rows(lo, hi - lo).into_owned())
    };
    let (mut g, mut b, mut s) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..grid.steps {
        g = g.max(rows(k, 0, n));
        b = b.max(rows(k, n, 2 * n));
        s = s.max(rows(k, 2 * n, t));
    }
    LipschitzEstimate {
        psi: operator_norm(&c.psi_y),
        phi: operator_norm(&hstack(&[&c.phi_x, &c.phi_xbar])),
        g,
        b,
        sigma: s,
        exact: true,
    }
}

/// Difference quotients over random pairs and coordinate-axis probes.
pub fn sample_lipschitz(coeffs: &CoefficientSet, grid: TimeGrid, sampling: &Sampling) -> Result<LipschitzEstimate> {
    sampling.validate(100)?;
    let dims = coeffs.dims();
    let n = dims.n;
    let t = dims.theta();

    let psi = quotients(sampling, "lipschitz-psi", n, n, &[(0, n)], grid, |_, u, out| {
        coeffs.psi(u, out)
    })?[0];
    let phi = quotients(sampling, "lipschitz-phi", 2 * n, n, &[(0, n)], grid, |_, u, out| {
        coeffs.phi(&u[..n], &u[n..], out)
    })?[0];
    let gam = quotients(
        sampling,
        "lipschitz-gamma",
        2 * t,
        t,
        &[(0, n), (n, 2 * n), (2 * n, t)],
        grid,
        |k, u, out| coeffs.gamma(grid.at(k), &u[..t], &u[t..], out),
    )?;
    Ok(LipschitzEstimate {
        psi,
        phi,
        g: gam[0],
        b: gam[1],
        sigma: gam[2],
        exact: false,
    })
}

fn quotients(
    sampling: &Sampling,
    label: &str,
    dim_in: usize,
    dim_out: usize,
    ranges: &[(usize, usize)],
    grid: TimeGrid,
    f: impl Fn(usize, &[f64], &mut [f64]) + Sync,
) -> Result<Vec<f64>> {
    let per_sample: Vec<Result<Vec<f64>>> = par::map_collect(sampling.budget, |i| {
        let mut draw = Draw::new(sampling, label, i);
        let k = draw.index(grid.steps);
        let u = draw.point(dim_in);
        let v = if i % 2 == 0 {
            // axis probe with a step small enough to read off a derivative
            let mut v = u.clone();
            v[draw.index(dim_in)] += 1e-3 * draw.radius;
            v
        } else {
            draw.partner(&u, i % 4 == 1)
        };
        let (mut fu, mut fv) = (vec![0.0; dim_out], vec![0.0; dim_out]);
        f(k, &u, &mut fu);
        f(k, &v, &mut fv);
        if fu.iter().chain(&fv).any(|x| !x.is_finite()) {
            return Err(non_finite(label, k));
        }
        let den = norm(&sub(&u, &v));
        Ok(ranges
            .iter()
            .map(|&(lo, hi)| if den > 0.0 { norm(&sub(&fu[lo..hi], &fv[lo..hi])) / den } else { 0.0 })
            .collect())
    });
    let mut best = vec![0.0f64; ranges.len()];
    for r in per_sample {
        for (b, q) in best.iter_mut().zip(r?) {
            *b = b.max(q);
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Reports

/// The argument values behind the worst sampled margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub margin: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub step: Option<usize>,
    pub args: BTreeMap<String, Vec<f64>>,
}

/// Outcome of one sampled inequality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub samples: usize,
    /// The inequality vanishes because its weight is zero.
    pub vacuous: bool,
    pub worst_margin: f64,
    pub violations: usize,
    pub passed: bool,
    pub witness: Option<Witness>,
}

/// Exact verification for affine coefficients: the difference map must
/// factor as `K D` through the dominating matrix `D` with `|K| <= 1 / weight`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactCheck {
    pub name: String,
    pub step: Option<usize>,
    pub factor_residual: f64,
    pub factor_norm: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `Psi` and `Gamma` decreasing, `Phi` increasing.
    Standard,
    /// The mirrored inequalities obtained by flipping the sign of `(y, z)`.
    Primed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub kind: String,
    pub orientation: Option<Orientation>,
    pub checks: Vec<ConditionCheck>,
    pub exact: Vec<ExactCheck>,
    pub passed: bool,
}

impl ConditionReport {
    fn new(kind: &str, orientation: Option<Orientation>, checks: Vec<ConditionCheck>, exact: Vec<ExactCheck>) -> Self {
        let passed = checks.iter().all(|c| c.passed) && exact.iter().all(|e| e.passed);
        ConditionReport {
            kind: kind.into(),
            orientation,
            checks,
            exact,
            passed,
        }
    }

    pub fn check(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn violations(&self) -> usize {
        self.checks.iter().map(|c| c.violations).sum()
    }
}

struct Sample {
    lhs: f64,
    rhs: f64,
    /// Magnitude of the terms behind `lhs`, for rounding-aware ties.
    scale: f64,
    step: Option<usize>,
    args: Vec<(&'static str, Vec<f64>)>,
}

impl Sample {
    fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }

    fn tie(&self) -> bool {
        self.margin() >= -TIE_TOL * self.lhs.abs().max(self.rhs.abs()).max(self.scale).max(1.0)
    }
}

fn vacuous(name: &str) -> ConditionCheck {
    ConditionCheck {
        name: name.into(),
        samples: 0,
        vacuous: true,
        worst_margin: f64::INFINITY,
        violations: 0,
        passed: true,
        witness: None,
    }
}

/// Runs `budget` samples of one inequality `lhs <= rhs`.
fn run_check(
    name: &str,
    sampling: &Sampling,
    f: impl Fn(&mut Draw, usize) -> Sample + Sync,
) -> Result<ConditionCheck> {
    let label = format!("condition-{name}");
    let samples: Vec<Sample> = par::map_collect(sampling.budget, |i| {
        let mut draw = Draw::new(sampling, &label, i);
        f(&mut draw, i)
    });
    let mut worst: Option<&Sample> = None;
    let mut violations = 0;
    for s in &samples {
        if !(s.lhs.is_finite() && s.rhs.is_finite()) {
            return Err(non_finite(name, s.step.unwrap_or(0)));
        }
        if !s.tie() {
            violations += 1;
        }
        if worst.is_none_or(|w| s.margin() < w.margin()) {
            worst = Some(s);
        }
    }
    let witness = worst.map(|s| Witness {
        margin: s.margin(),
        lhs: s.lhs,
        rhs: s.rhs,
        step: s.step,
        args: s.args.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    });
    Ok(ConditionCheck {
        name: name.into(),
        samples: samples.len(),
        vacuous: false,
        worst_margin: witness.as_ref().map_or(f64::INFINITY, |w| w.margin),
        violations,
        passed: violations == 0,
        witness,
    })
}

fn check_dims(coeffs: &CoefficientSet, weights: &DominationWeights) -> Result<Dimensions> {
    let dims = coeffs.dims();
    if dims != weights.dims {
        return Err(Error::Dimension {
            what: "weights against coefficients".into(),
            expected: dims.theta(),
            got: weights.dims.theta(),
        });
    }
    Ok(dims)
}

fn inv(w: f64) -> f64 {
    if w > 0.0 {
        1.0 / w
    } else {
        f64::INFINITY
    }
}

// ---------------------------------------------------------------------------
// Domination

/// Samples the four domination inequalities (with `f = b` and `f = sigma`
/// checked separately); inequalities whose weight is zero pass vacuously.
/// Affine coefficients are also checked exactly.
pub fn check_domination(
    coeffs: &CoefficientSet,
    weights: &DominationWeights,
    grid: TimeGrid,
    sampling: &Sampling,
) -> Result<ConditionReport> {
    weights.validate()?;
    sampling.validate(1)?;
    let dims = check_dims(coeffs, weights)?;
    let (n, nz, t) = (dims.n, dims.z(), dims.theta());
    let (mu, nu) = (weights.mu, weights.nu);
    let w = weights;
    let mut checks = Vec::new();

    if mu > 0.0 {
        checks.push(run_check("psi", sampling, |d, i| {
            let y = d.point(n);
            let yb = d.partner(&y, i % 3 == 1);
            let (mut p, mut pb) = (vec![0.0; n], vec![0.0; n]);
            coeffs.psi(&y, &mut p);
            coeffs.psi(&yb, &mut pb);
            Sample {
                scale: 0.0,
                lhs: norm(&sub(&p, &pb)),
                rhs: inv(mu) * norm(&mat_vec(&w.h, &sub(&y, &yb))),
                step: None,
                args: vec![("y", y), ("y_bar", yb)],
            }
        })?);
    } else {
        checks.push(vacuous("psi"));
    }

    if nu > 0.0 {
        checks.push(run_check("phi", sampling, |d, i| {
            let (x, xp) = (d.point(n), d.point(n));
            let (xb, xpb) = (d.partner(&x, i % 3 == 1), d.partner(&xp, i % 3 == 1));
            let (mut p, mut pb) = (vec![0.0; n], vec![0.0; n]);
            coeffs.phi(&x, &xp, &mut p);
            coeffs.phi(&xb, &xpb, &mut pb);
            let (xh, xph) = (sub(&x, &xb), sub(&xp, &xpb));
            let rhs = inv(nu) * norm(&[mat_vec(&w.p, &sub(&xh, &xph)), mat_vec(&w.p_tilde, &xph)].concat());
            Sample {
                scale: 0.0,
                lhs: norm(&sub(&p, &pb)),
                rhs,
                step: None,
                args: vec![("x", x), ("x_prime", xp), ("x_bar", xb), ("x_prime_bar", xpb)],
            }
        })?);
        checks.push(run_check("g", sampling, |d, i| {
            let k = d.index(grid.steps);
            let (x, xp) = (d.point(n), d.point(n));
            let (xb, xpb) = (d.partner(&x, i % 3 == 1), d.partner(&xp, i % 3 == 1));
            let (yz, yzp) = (d.point(t - n), d.point(t - n));
            let th = [x.clone(), yz.clone()].concat();
            let thp = [xp.clone(), yzp.clone()].concat();
            let thb = [xb.clone(), yz.clone()].concat();
            let thpb = [xpb.clone(), yzp.clone()].concat();
            let (mut o, mut ob) = (vec![0.0; t], vec![0.0; t]);
            coeffs.gamma(grid.at(k), &th, &thp, &mut o);
            coeffs.gamma(grid.at(k), &thb, &thpb, &mut ob);
            let (xh, xph) = (sub(&x, &xb), sub(&xp, &xpb));
            let rhs = inv(nu) * norm(&[mat_vec(w.a.at(k), &sub(&xh, &xph)), mat_vec(w.a_tilde.at(k), &xph)].concat());
            Sample {
                scale: 0.0,
                lhs: norm(&sub(&o[..n], &ob[..n])),
                rhs,
                step: Some(k),
                args: vec![("theta", th), ("theta_prime", thp), ("theta_bar", thb), ("theta_prime_bar", thpb)],
            }
        })?);
    } else {
        checks.push(vacuous("phi"));
        checks.push(vacuous("g"));
    }

    if mu > 0.0 {
        for (name, lo, hi) in [("b", n, 2 * n), ("sigma", 2 * n, t)] {
            checks.push(run_check(name, sampling, |d, i| {
                let k = d.index(grid.steps);
                let (x, xp) = (d.point(n), d.point(n));
                let (yz, yzp) = (d.point(n + nz), d.point(n + nz));
                let (yzb, yzpb) = (d.partner(&yz, i % 3 == 1), d.partner(&yzp, i % 3 == 1));
                let th = [x.clone(), yz.clone()].concat();
                let thp = [xp.clone(), yzp.clone()].concat();
                let thb = [x.clone(), yzb.clone()].concat();
                let thpb = [xp.clone(), yzpb.clone()].concat();
                let (mut o, mut ob) = (vec![0.0; t], vec![0.0; t]);
                coeffs.gamma(grid.at(k), &th, &thp, &mut o);
                coeffs.gamma(grid.at(k), &thb, &thpb, &mut ob);
                let (h, hp) = (sub(&yz, &yzb), sub(&yzp, &yzpb));
                let bc = hstack(&[w.b.at(k), w.c.at(k)]);
                let bct = hstack(&[w.b_tilde.at(k), w.c_tilde.at(k)]);
                let rhs = inv(mu) * norm(&[mat_vec(&bc, &sub(&h, &hp)), mat_vec(&bct, &hp)].concat());
                Sample {
                    scale: 0.0,
                    lhs: norm(&sub(&o[lo..hi], &ob[lo..hi])),
                    rhs,
                    step: Some(k),
                    args: vec![("theta", th), ("theta_prime", thp), ("theta_bar", thb), ("theta_prime_bar", thpb)],
                }
            })?);
        }
    } else {
        checks.push(vacuous("b"));
        checks.push(vacuous("sigma"));
    }

    let exact = match coeffs.as_linear() {
        Some(c) => exact_domination(c, weights, grid),
        None => Vec::new(),
    };
    Ok(ConditionReport::new("domination", None, checks, exact))
}

fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((a.nrows(), a.ncols()), b.shape()).copy_from(b);
    m
}

fn factor_check(name: &str, step: Option<usize>, map: &DMatrix<f64>, dom: &DMatrix<f64>, weight: f64) -> ExactCheck {
    let k = map * pinv(dom);
    let factor_residual = (&k * dom - map).norm();
    let factor_norm = operator_norm(&k);
    let bound = inv(weight);
    let passed = factor_residual < 1e-10 && factor_norm <= bound * (1.0 + 1e-10) + TIE_TOL;
    ExactCheck {
        name: name.into(),
        step,
        factor_residual,
        factor_norm,
        bound,
        passed,
    }
}

fn exact_domination(c: &LinearCoefficients, w: &DominationWeights, grid: TimeGrid) -> Vec<ExactCheck> {
    let n = c.dims.n;
    let t = c.dims.theta();
    let mut out = Vec::new();
    if w.mu > 0.0 {
        out.push(factor_check("psi", None, &c.psi_y, &w.h, w.mu));
    }
    if w.nu > 0.0 {
        // Phi(x, x') differences in the coordinates (x^ - x^', x^').
        let map = hstack(&[&c.phi_x, &(&c.phi_x + &c.phi_xbar)]);
        out.push(factor_check("phi", None, &map, &block_diag(&w.p, &w.p_tilde), w.nu));
    }
    let steps = grid.steps.min(
        c.gamma_theta
            .steps()
            .max(c.gamma_theta_bar.steps())
            .max(w.max_steps()),
    );
    for k in 0..steps {
        let (gt, gb) = (c.gamma_theta.at(k), c.gamma_theta_bar.at(k));
        let step = Some(k);
        if w.nu > 0.0 {
            let own = gt.view((0, 0), (n, n)).into_owned();
            let bar = gb.view((0, 0), (n, n)).into_owned();
            let map = hstack(&[&own, &(&own + &bar)]);
            out.push(factor_check("g", step, &map, &block_diag(w.a.at(k), w.a_tilde.at(k)), w.nu));
        }
        if w.mu > 0.0 {
            let dom = block_diag(
                &hstack(&[w.b.at(k), w.c.at(k)]),
                &hstack(&[w.b_tilde.at(k), w.c_tilde.at(k)]),
            );
            for (name, lo, hi) in [("b", n, 2 * n), ("sigma", 2 * n, t)] {
                let own = gt.view((lo, n), (hi - lo, t - n)).into_owned();
                let bar = gb.view((lo, n), (hi - lo, t - n)).into_owned();
                let map = hstack(&[&own, &(&own + &bar)]);
                out.push(factor_check(name, step, &map, &dom, w.mu));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Monotonicity

/// Number of equally likely scenarios used to realize finite-atom random
/// variables: the first tree level with at least 4 nodes, or up to 16 paths.
fn scenario_count(backend: &Backend) -> usize {
    let layout = backend.layout();
    let steps = backend.grid().steps;
    if backend.is_tree() {
        (0..=steps)
            .map(|k| layout.width(k))
            .find(|&w| w >= 4)
            .unwrap_or_else(|| layout.width(steps))
    } else {
        layout.width(steps).min(16)
    }
}

/// A `dim`-valued random variable with `atoms` equally likely values, as
/// a row-major `scenarios x dim` block.
fn random_variable(d: &mut Draw, scenarios: usize, atoms: usize, dim: usize) -> Vec<f64> {
    let values: Vec<Vec<f64>> = (0..atoms).map(|_| d.point(dim)).collect();
    (0..scenarios)
        .flat_map(|j| values[j * atoms / scenarios].clone())
        .collect()
}

/// A partner variable: independent or a perturbation of `base`.
fn partner_variable(d: &mut Draw, base: &[f64], scenarios: usize, atoms: usize, dim: usize, near: bool) -> Vec<f64> {
    if near {
        let shift = random_variable(d, scenarios, atoms, dim);
        base.iter().zip(shift).map(|(b, s)| b + 0.05 * s).collect()
    } else {
        random_variable(d, scenarios, atoms, dim)
    }
}

fn mean_rows(v: &[f64], dim: usize) -> Vec<f64> {
    let rows = v.len() / dim;
    let mut m = vec![0.0; dim];
    for r in v.chunks(dim) {
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= rows as f64);
    m
}

/// `E <U^(1), V^(1)> + <E U, E V>` for row blocks `U`, `V`.
fn split_inner(u: &[f64], v: &[f64], dim: usize) -> f64 {
    let (mu, mv) = (mean_rows(u, dim), mean_rows(v, dim));
    let rows = u.len() / dim;
    let fluct: f64 = u
        .chunks(dim)
        .zip(v.chunks(dim))
        .map(|(a, b)| dot(&sub(a, &mu), &sub(b, &mv)))
        .sum::<f64>()
        / rows as f64;
    fluct + dot(&mu, &mv)
}

/// `E |M1 U^(1)|^2 + |M2 E U|^2`.
fn split_quad(u: &[f64], dim: usize, m1: &DMatrix<f64>, m2: &DMatrix<f64>) -> f64 {
    let mu = mean_rows(u, dim);
    let rows = u.len() / dim;
    let fluct: f64 = u
        .chunks(dim)
        .map(|a| norm(&mat_vec(m1, &sub(a, &mu))).powi(2))
        .sum::<f64>()
        / rows as f64;
    fluct + norm(&mat_vec(m2, &mu)).powi(2)
}

/// Samples the three monotonicity inequalities in the requested
/// orientation. `Phi` and `Gamma` are tested on random variables with 1, 2
/// and 4 equally likely values realized as scenario vectors of `backend`.
pub fn check_monotonicity(
    coeffs: &CoefficientSet,
    weights: &DominationWeights,
    backend: &Backend,
    sampling: &Sampling,
    orientation: Orientation,
) -> Result<ConditionReport> {
    weights.validate()?;
    sampling.validate(1)?;
    let dims = check_dims(coeffs, weights)?;
    let (n, nz, t) = (dims.n, dims.z(), dims.theta());
    let (mu, nu) = (weights.mu, weights.nu);
    let w = weights;
    let grid = backend.grid();
    let scenarios = scenario_count(backend);
    let atoms_for = |i: usize| [1, 2, 4][i % 3].min(scenarios);
    let primed = orientation == Orientation::Primed;
    // Standard: <dPsi, y^> <= -mu |H y^|^2; primed: <dPsi, y^> >= mu |H y^|^2.
    let orient = |inner: f64, quad: f64, increasing: bool| -> (f64, f64) {
        if increasing {
            (quad, inner)
        } else {
            (inner, -quad)
        }
    };

    let psi = run_check("psi", sampling, |d, i| {
        let y = d.point(n);
        let yb = d.partner(&y, i % 2 == 1);
        let (mut p, mut pb) = (vec![0.0; n], vec![0.0; n]);
        coeffs.psi(&y, &mut p);
        coeffs.psi(&yb, &mut pb);
        let yh = sub(&y, &yb);
        let inner = dot(&sub(&p, &pb), &yh);
        let quad = mu * norm(&mat_vec(&w.h, &yh)).powi(2);
        let scale = norm(&sub(&p, &pb)) * norm(&yh);
        let (lhs, rhs) = orient(inner, quad, primed);
        Sample {
            lhs,
            rhs,
            scale,
            step: None,
            args: vec![("y", y), ("y_bar", yb)],
        }
    })?;

    let phi = run_check("phi", sampling, |d, i| {
        let atoms = atoms_for(i);
        let x = random_variable(d, scenarios, atoms, n);
        let xb = partner_variable(d, &x, scenarios, atoms, n, i % 2 == 1);
        let eval = |v: &[f64]| -> Vec<f64> {
            let m = mean_rows(v, n);
            let mut out = vec![0.0; v.len()];
            for (row, o) in v.chunks(n).zip(out.chunks_mut(n)) {
                coeffs.phi(row, &m, o);
            }
            out
        };
        let dphi = sub(&eval(&x), &eval(&xb));
        let xh = sub(&x, &xb);
        let inner = split_inner(&dphi, &xh, n);
        let quad = nu * split_quad(&xh, n, &w.p, &w.p_tilde);
        let scale = 2.0 * norm(&dphi) * norm(&xh) / scenarios as f64;
        let (lhs, rhs) = orient(inner, quad, !primed);
        Sample {
            lhs,
            rhs,
            scale,
            step: None,
            args: vec![("x", x), ("x_bar", xb)],
        }
    })?;

    let gamma = run_check("gamma", sampling, |d, i| {
        let k = d.index(grid.steps);
        let atoms = atoms_for(i);
        let th = random_variable(d, scenarios, atoms, t);
        let thb = partner_variable(d, &th, scenarios, atoms, t, i % 2 == 1);
        let eval = |v: &[f64]| -> Vec<f64> {
            let m = mean_rows(v, t);
            let mut out = vec![0.0; v.len()];
            for (row, o) in v.chunks(t).zip(out.chunks_mut(t)) {
                coeffs.gamma(grid.at(k), row, &m, o);
            }
            out
        };
        let dg = sub(&eval(&th), &eval(&thb));
        let hat = sub(&th, &thb);
        let inner = split_inner(&dg, &hat, t);
        let xs: Vec<f64> = hat.chunks(t).flat_map(|r| r[..n].to_vec()).collect();
        let yzs: Vec<f64> = hat.chunks(t).flat_map(|r| r[n..].to_vec()).collect();
        let bc = hstack(&[w.b.at(k), w.c.at(k)]);
        let bct = hstack(&[w.b_tilde.at(k), w.c_tilde.at(k)]);
        let quad = nu * split_quad(&xs, n, w.a.at(k), w.a_tilde.at(k)) + mu * split_quad(&yzs, n + nz, &bc, &bct);
        let scale = 2.0 * norm(&dg) * norm(&hat) / scenarios as f64;
        let (lhs, rhs) = orient(inner, quad, primed);
        Sample {
            lhs,
            rhs,
            scale,
            step: Some(k),
            args: vec![("theta", th), ("theta_bar", thb)],
        }
    })?;

    Ok(ConditionReport::new(
        "monotonicity",
        Some(orientation),
        vec![psi, phi, gamma],
        Vec::new(),
    ))
}

// ---------------------------------------------------------------------------
// Symmetric transform

/// Coefficients of the system solved by `(x, -y, -z)` whenever `(x, y, z)`
/// solves the original: `Psi~(y) = Psi(-y)`, `Phi~ = -Phi`,
/// `g~ = -g(x, -y, -z, ...)`, `b~ = b(x, -y, -z, ...)`,
/// `sigma~ = sigma(x, -y, -z, ...)`. The map is an involution.
pub fn symmetrize(coeffs: &CoefficientSet) -> CoefficientSet {
    let dims = coeffs.dims();
    let n = dims.n;
    let t = dims.theta();
    match coeffs.as_linear() {
        Some(c) => {
            // argument flip S = diag(I, -I, -I), output flip D = diag(-I, I, I)
            let s = DMatrix::from_fn(t, t, |i, j| if i != j { 0.0 } else if i < n { 1.0 } else { -1.0 });
            let d = DMatrix::from_fn(t, t, |i, j| if i != j { 0.0 } else if i < n { -1.0 } else { 1.0 });
            let mut out = c.clone();
            out.psi_y = -&c.psi_y;
            out.phi_x = -&c.phi_x;
            out.phi_xbar = -&c.phi_xbar;
            out.phi_0 = -&c.phi_0;
            out.gamma_theta = c.gamma_theta.map(|m| &d * m * &s);
            out.gamma_theta_bar = c.gamma_theta_bar.map(|m| &d * m * &s);
            out.gamma_0 = c.gamma_0.map(|m| &d * m);
            CoefficientSet::Linear(std::sync::Arc::new(out))
        }
        None => {
            let (a, b, g) = (coeffs.clone(), coeffs.clone(), coeffs.clone());
            let flip = move |v: &[f64], out: &mut [f64]| {
                for (i, (o, x)) in out.iter_mut().zip(v).enumerate() {
                    *o = if i < n { *x } else { -x };
                }
            };
            CoefficientSet::BlackBox(crate::model::BlackBox {
                dims,
                psi: std::sync::Arc::new(move |y, out| {
                    let neg: Vec<f64> = y.iter().map(|v| -v).collect();
                    a.psi(&neg, out);
                }),
                phi: std::sync::Arc::new(move |x, xb, out| {
                    b.phi(x, xb, out);
                    out.iter_mut().for_each(|v| *v = -*v);
                }),
                gamma: std::sync::Arc::new(move |at, th, tb, out| {
                    let (mut f, mut fb) = (vec![0.0; t], vec![0.0; t]);
                    flip(th, &mut f);
                    flip(tb, &mut fb);
                    g.gamma(at, &f, &fb, out);
                    out[..n].iter_mut().for_each(|v| *v = -*v);
                }),
            })
        }
    }
}

/// Flips the sign of `(y, z)` in a solution.
pub fn symmetrize_solution(theta: &crate::model::SolutionEnsemble) -> crate::model::SolutionEnsemble {
    let neg = |p: &crate::model::Process| crate::model::Process {
        dim: p.dim,
        levels: p.levels.iter().map(|l| l.iter().map(|v| -v).collect()).collect(),
    };
    crate::model::SolutionEnsemble::from_parts(
        theta.dims,
        theta.layout,
        theta.grid,
        theta.x.clone(),
        neg(&theta.y),
        neg(&theta.z),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Case;
    use crate::noise::{make_tree, DEFAULT_TREE_CAP};

    fn grid() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 8).unwrap()
    }

    fn tree() -> Backend {
        Backend::Tree(make_tree(grid(), 1, DEFAULT_TREE_CAP).unwrap())
    }

    fn d1() -> Dimensions {
        Dimensions { n: 1, d: 1 }
    }

    #[test]
    fn lipschitz_of_zero_and_scalar_linear() {
        let s = Sampling::with_budget(200);
        let z = estimate_lipschitz(&CoefficientSet::zero(d1()), grid(), &s).unwrap();
        assert_eq!(z.max(), 0.0);
        let mut c = LinearCoefficients::zeros(d1());
        c.psi_y[(0, 0)] = -2.0;
        let c = CoefficientSet::linear(c).unwrap();
        let e = estimate_lipschitz(&c, grid(), &s).unwrap();
        assert!(e.exact);
        assert!((e.psi - 2.0).abs() < 1e-14);
        let sampled = sample_lipschitz(&c, grid(), &s).unwrap();
        assert!(sampled.psi <= 2.0 + 1e-10 && sampled.psi > 1.99);
    }

    #[test]
    fn lipschitz_of_sine_example() {
        let c = CoefficientSet::example32(2.0, 2.0);
        let e = estimate_lipschitz(&c, grid(), &Sampling::with_budget(1000)).unwrap();
        assert!((2.9..=3.0 + 1e-9).contains(&e.psi), "{e:?}");
    }

    #[test]
    fn budget_below_minimum_is_rejected() {
        let c = CoefficientSet::example32(2.0, 2.0);
        assert!(estimate_lipschitz(&c, grid(), &Sampling::with_budget(99)).is_err());
    }

    #[test]
    fn zero_coefficients_pass_everything() {
        let c = CoefficientSet::zero(d1());
        let w = DominationWeights::example32(Case::A, 0.5);
        let s = Sampling::with_budget(500);
        assert!(check_domination(&c, &w, grid(), &s).unwrap().passed);
        let mut wa = DominationWeights::case_a(d1(), 1e-3, DMatrix::zeros(1, 1));
        wa.mu = 1e-3;
        let m = check_monotonicity(&c, &wa, &tree(), &s, Orientation::Standard).unwrap();
        assert!(m.passed);
    }

    #[test]
    fn example_passes_in_both_cases() {
        let (c, mu, nu) = example32(2.0, 2.0).unwrap();
        let s = Sampling::with_budget(2000);
        for (case, wt) in [(Case::A, mu), (Case::B, nu)] {
            let w = DominationWeights::example32(case, wt);
            let dom = check_domination(&c, &w, grid(), &s).unwrap();
            assert!(dom.passed, "{dom:?}");
            let mono = check_monotonicity(&c, &w, &tree(), &s, Orientation::Standard).unwrap();
            assert!(mono.passed, "{mono:?}");
        }
    }

    #[test]
    fn large_weight_breaks_psi_domination() {
        let c = CoefficientSet::example32(2.0, 2.0);
        let w = DominationWeights::example32(Case::A, 10.0);
        let r = check_domination(&c, &w, grid(), &Sampling::with_budget(500)).unwrap();
        let psi = r.check("psi").unwrap();
        assert!(!psi.passed && psi.worst_margin < 0.0);
        assert!(psi.witness.as_ref().unwrap().args.contains_key("y"));
    }

    #[test]
    fn weak_k1_breaks_psi_monotonicity() {
        let c = CoefficientSet::example32(0.5, 2.0);
        let w = DominationWeights::example32(Case::A, 1.0 / 6.0);
        let r = check_monotonicity(&c, &w, &tree(), &Sampling::with_budget(1000), Orientation::Standard).unwrap();
        assert!(!r.check("psi").unwrap().passed);
    }

    #[test]
    fn exact_domination_of_reference_coefficients() {
        let w = DominationWeights::example32(Case::A, 0.5);
        let r = reference_coefficients(&w).unwrap();
        let rep = check_domination(&r, &w, grid(), &Sampling::with_budget(300)).unwrap();
        assert!(!rep.exact.is_empty());
        assert!(rep.passed, "{rep:?}");
        // psi = -mu H'H y with H = 2 needs |mu H'H| <= |H| / mu
        let big = DominationWeights::case_a(d1(), 0.8, DMatrix::from_element(1, 1, 2.0));
        let r = reference_coefficients(&big).unwrap();
        let rep = check_domination(&r, &big, grid(), &Sampling::with_budget(300)).unwrap();
        assert!(!rep.exact.iter().find(|e| e.name == "psi").unwrap().passed);
    }

    #[test]
    fn symmetrize_is_an_involution() {
        let c = CoefficientSet::example32(2.0, 3.0);
        let cc = symmetrize(&symmetrize(&c));
        let mut draw = Draw::new(&Sampling::default(), "inv", 0);
        for _ in 0..100 {
            let th = draw.point(3);
            let tb = draw.point(3);
            let (mut a, mut b) = (vec![0.0; 3], vec![0.0; 3]);
            c.gamma(grid().at(0), &th, &tb, &mut a);
            cc.gamma(grid().at(0), &th, &tb, &mut b);
            assert!(norm(&sub(&a, &b)) < 1e-12);
            let (mut p, mut q) = (vec![0.0], vec![0.0]);
            c.psi(&th[..1], &mut p);
            cc.psi(&th[..1], &mut q);
            assert!((p[0] - q[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetrized_example_passes_primed_orientation() {
        let (c, mu, _) = example32(2.0, 2.0).unwrap();
        let w = DominationWeights::example32(Case::A, mu);
        let s = Sampling::with_budget(1000);
        let r = check_monotonicity(&symmetrize(&c), &w, &tree(), &s, Orientation::Primed).unwrap();
        assert!(r.passed, "{r:?}");
        let wrong = check_monotonicity(&symmetrize(&c), &w, &tree(), &s, Orientation::Standard).unwrap();
        assert!(!wrong.passed);
    }

    #[test]
    fn linear_symmetrize_matches_callbacks() {
        let w = DominationWeights::example32(Case::A, 0.3);
        let r = reference_coefficients(&w).unwrap();
        let lin = symmetrize(&r);
        assert!(lin.as_linear().is_some());
        let bb = CoefficientSet::BlackBox(crate::model::BlackBox {
            dims: d1(),
            psi: std::sync::Arc::new({
                let r = r.clone();
                move |y, o| r.psi(y, o)
            }),
            phi: std::sync::Arc::new({
                let r = r.clone();
                move |x, xb, o| r.phi(x, xb, o)
            }),
            gamma: std::sync::Arc::new({
                let r = r.clone();
                move |at, th, tb, o| r.gamma(at, th, tb, o)
            }),
        });
        let via_bb = symmetrize(&bb);
        let th = [0.3, -1.2, 0.7];
        let tb = [1.1, 0.4, -0.2];
        let (mut a, mut b) = (vec![0.0; 3], vec![0.0; 3]);
        lin.gamma(grid().at(0), &th, &tb, &mut a);
        via_bb.gamma(grid().at(0), &th, &tb, &mut b);
        assert!(norm(&sub(&a, &b)) < 1e-14);
    }
}
