//! Mean-field linear-quadratic control on top of the coupled solver.
//!
//! Two problems are covered: a forward one, where the controls are the
//! initial value and the process `u` of a linear mean-field SDE, and a
//! backward one, where the controls are the terminal value and `u` of a
//! linear mean-field BSDE. Each problem gets a positive-definiteness check,
//! its Hamiltonian system as affine coefficients with a domination witness,
//! control extraction from a solved system, cost and stationarity
//! evaluation, and an independent oracle that minimizes the discrete cost
//! directly on the tree.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conditions::Orientation;
use crate::continuation::SolveDiagnostics;
use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;
use crate::model::norms::expected_sum;
use crate::model::{DominationWeights, Layout, Process, SolutionEnsemble, TimeGrid, TimeMatrix};

mod blq;
mod flq;
mod json;
mod oracle;

pub use blq::{
    check_pd_blq, cost_blq, extract_control_blq, hamiltonian_blq, maximize_blq, simulate_blq,
    solve_blq, stationarity_blq, BackwardLQProblem, BlqCost, TerminalValue,
};
pub use flq::{
    check_pd_flq, cost_flq, extract_control_flq, hamiltonian_flq, maximize_flq, simulate_flq,
    solve_flq, stationarity_flq, FlqCost, ForwardLQProblem,
};
pub use json::{LqBody, LqDoc, LqFields, LqProblem, LQ_SCHEMA};
pub use oracle::{oracle_blq, oracle_flq, OracleResult, ORACLE_MAX_VARIABLES, ORACLE_TOL};

/// Default uniform-definiteness margin for `R` and `R + R'`.
pub const DEFAULT_DELTA_GAP: f64 = 1e-6;

/// Eigenvalues within this distance of a bound count as meeting it.
pub const PD_TOL: f64 = 1e-12;

/// Symmetry tolerance for weight matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Initial control and control process of the forward problem.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlFLQ {
    pub xi: Vec<f64>,
    /// `m`-dimensional, steps `0..N` (the step-`N` row is unused).
    pub u: Process,
}

/// Terminal control (one row per terminal scenario) and control process of
/// the backward problem.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlBLQ {
    pub eta: Vec<f64>,
    pub u: Process,
}

impl ControlFLQ {
    pub fn zeros(n: usize, m: usize, layout: Layout, grid: TimeGrid) -> Self {
        ControlFLQ {
            xi: vec![0.0; n],
            u: Process::zeros(layout, grid.steps, m),
        }
    }

    /// `(|xi - xi'|^2 + E sum_k |u - u'|^2 h)^(1/2)`.
    pub fn distance(&self, other: &ControlFLQ, grid: TimeGrid) -> f64 {
        let dxi: f64 = self.xi.iter().zip(&other.xi).map(|(a, b)| (a - b) * (a - b)).sum();
        (dxi + process_gap_sq(&self.u, &other.u, grid)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.xi.iter().all(|v| v.is_finite()) && self.u.is_finite()
    }

    /// `self + eps * (other - self)`.
    pub fn towards(&self, other: &ControlFLQ, eps: f64) -> ControlFLQ {
        ControlFLQ {
            xi: lerp(&self.xi, &other.xi, eps),
            u: lerp_process(&self.u, &other.u, eps),
        }
    }
}

impl ControlBLQ {
    pub fn zeros(n: usize, m: usize, layout: Layout, grid: TimeGrid) -> Self {
        ControlBLQ {
            eta: vec![0.0; layout.width(grid.steps) * n],
            u: Process::zeros(layout, grid.steps, m),
        }
    }

    /// `(E|eta - eta'|^2 + E sum_k |u - u'|^2 h)^(1/2)`.
    pub fn distance(&self, other: &ControlBLQ, grid: TimeGrid) -> f64 {
        let rows = self.u.width(grid.steps).max(1);
        let deta: f64 = self.eta.iter().zip(&other.eta).map(|(a, b)| (a - b) * (a - b)).sum();
        (deta / rows as f64 + process_gap_sq(&self.u, &other.u, grid)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.eta.iter().all(|v| v.is_finite()) && self.u.is_finite()
    }

    pub fn towards(&self, other: &ControlBLQ, eps: f64) -> ControlBLQ {
        ControlBLQ {
            eta: lerp(&self.eta, &other.eta, eps),
            u: lerp_process(&self.u, &other.u, eps),
        }
    }
}

fn lerp(a: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + eps * (y - x)).collect()
}

fn lerp_process(a: &Process, b: &Process, eps: f64) -> Process {
    Process {
        dim: a.dim,
        levels: a
            .levels
            .iter()
            .zip(&b.levels)
            .map(|(x, y)| lerp(x, y, eps))
            .collect(),
    }
}

fn process_gap_sq(a: &Process, b: &Process, grid: TimeGrid) -> f64 {
    let layout = layout_of(a);
    let dim = a.dim;
    grid.h()
        * expected_sum(layout, grid.steps, |k, j| {
            let (x, y) = (&a.levels[k][j * dim..(j + 1) * dim], &b.levels[k][j * dim..(j + 1) * dim]);
            x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum()
        })
}

/// `(E sum_k |v|^2 h)^(1/2)` over steps `0..N`.
pub fn m2_process_norm(v: &Process, grid: TimeGrid) -> f64 {
    let layout = layout_of(v);
    let dim = v.dim;
    (grid.h()
        * expected_sum(layout, grid.steps, |k, j| {
            v.levels[k][j * dim..(j + 1) * dim].iter().map(|x| x * x).sum()
        }))
    .sqrt()
}

/// Recovers a layout from level widths: a tree grows, paths do not.
fn layout_of(p: &Process) -> Layout {
    let w0 = p.width(0);
    if p.steps() > 0 && p.width(1) > w0 {
        Layout::Tree {
            branching: p.width(1) / w0,
        }
    } else {
        Layout::Paths { count: w0 }
    }
}

/// Output of the Hamiltonian pipeline: the control read off the solved
/// system, the system itself, the continuation record, the cost of the
/// control and the domination witness used.
#[derive(Clone, Debug)]
pub struct LqSolution<C> {
    pub control: C,
    pub theta: SolutionEnsemble,
    pub diagnostics: SolveDiagnostics,
    pub cost: f64,
    pub weights: DominationWeights,
}

/// A maximization problem recast as minimizing `-J`: `problem` carries the
/// negated weights, and the Hamiltonian system satisfies the monotonicity
/// conditions in the primed orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct Maximization<P> {
    pub problem: P,
    pub orientation: Orientation,
}

impl<P> Maximization<P> {
    pub(crate) fn new(problem: P) -> Self {
        Maximization {
            problem,
            orientation: Orientation::Primed,
        }
    }

    /// The supremum of `J` from the minimum of the negated problem.
    pub fn value(&self, min_cost: f64) -> f64 {
        -min_cost
    }
}

/// Residuals of the first-order optimality system: the control-at-the-end
/// equation (Euclidean or `L^2` norm) and the process equation (`M^2` norm).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stationarity {
    pub endpoint: f64,
    pub process: f64,
}

impl Stationarity {
    pub fn max(&self) -> f64 {
        self.endpoint.max(self.process)
    }
}

/// One definiteness requirement, reported at its worst grid step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdCheck {
    pub name: String,
    pub step: Option<usize>,
    pub min_eigenvalue: f64,
    /// The eigenvalue bound: `0` for semi-definite, the gap for uniform.
    pub bound: f64,
    /// Strict inequality (`> bound`).
    pub strict: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdReport {
    pub passed: bool,
    pub delta_gap: f64,
    pub checks: Vec<PdCheck>,
}

impl PdReport {
    pub fn check(&self, name: &str) -> Option<&PdCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub(crate) fn failures(&self) -> String {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| {
                let rel = if c.strict { ">" } else { ">=" };
                let at = c.step.map_or(String::new(), |k| format!(" at step {k}"));
                format!("{}: min eigenvalue {:.3e}{at}, need {rel} {:.3e}", c.name, c.min_eigenvalue, c.bound)
            })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Builds the check for `min eig(m) (>|>=) bound` over every step of `m`.
pub(crate) fn pd_check(name: &str, m: &TimeMatrix, bound: f64, strict: bool) -> PdCheck {
    let per_step = m.steps() > 1;
    let (step, min) = m
        .all()
        .iter()
        .enumerate()
        .map(|(k, a)| (k, min_eigenvalue(a)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    let passed = if strict { min > bound + PD_TOL } else { min >= bound - PD_TOL };
    PdCheck {
        name: name.into(),
        step: per_step.then_some(step),
        min_eigenvalue: min,
        bound,
        strict,
        passed,
    }
}

pub(crate) fn report(delta_gap: f64, checks: Vec<PdCheck>) -> PdReport {
    PdReport {
        passed: checks.iter().all(|c| c.passed),
        delta_gap,
        checks,
    }
}

pub(crate) fn check_delta_gap(delta_gap: f64) -> Result<()> {
    if !(delta_gap.is_finite() && delta_gap >= 0.0) {
        return Err(Error::Config(format!("delta_gap must be finite and nonnegative, got {delta_gap}")));
    }
    Ok(())
}

/// Shape and finiteness bookkeeping shared by both problem types; every
/// problem is reported at once.
#[derive(Default)]
pub(crate) struct Shapes {
    errs: Vec<String>,
}

impl Shapes {
    pub(crate) fn fixed(&mut self, name: &str, m: &DMatrix<f64>, shape: (usize, usize)) {
        if m.shape() != shape {
            self.errs.push(format!(
                "{name}: expected {}x{}, got {}x{}",
                shape.0,
                shape.1,
                m.nrows(),
                m.ncols()
            ));
        } else if m.iter().any(|v| !v.is_finite()) {
            self.errs.push(format!("{name}: non-finite entry"));
        }
    }

    pub(crate) fn timed(&mut self, name: &str, m: &TimeMatrix, shape: (usize, usize)) {
        for (k, a) in m.all().iter().enumerate() {
            let label = if m.steps() > 1 { format!("{name}[{k}]") } else { name.to_string() };
            self.fixed(&label, a, shape);
        }
    }

    pub(crate) fn vector(&mut self, name: &str, v: &DVector<f64>, n: usize) {
        if v.len() != n {
            self.errs.push(format!("{name}: expected {n} entries, got {}", v.len()));
        } else if v.iter().any(|x| !x.is_finite()) {
            self.errs.push(format!("{name}: non-finite entry"));
        }
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.errs.join("; ")))
        }
    }
}

pub(crate) fn symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.is_square() && (m - m.transpose()).amax() < SYMMETRY_TOL {
        Ok(())
    } else {
        Err(Error::Asymmetric(name.into()))
    }
}

pub(crate) fn symmetric_timed(name: &str, m: &TimeMatrix) -> Result<()> {
    for a in m.all() {
        symmetric(name, a)?;
    }
    Ok(())
}

/// Per-step matrices must either be constant or cover the grid exactly.
pub(crate) fn check_steps(fields: &[(&str, &TimeMatrix)], grid: TimeGrid) -> Result<()> {
    let bad: Vec<String> = fields
        .iter()
        .filter(|(_, m)| matches!(m, TimeMatrix::PerStep(v) if v.len() != grid.steps))
        .map(|(name, m)| format!("{name}: {} steps given, grid has {}", m.steps(), grid.steps))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(bad.join("; ")))
    }
}

/// Assembles a time matrix from a per-step builder, constant when every
/// input is.
pub(crate) fn build_timed(steps: usize, f: impl Fn(usize) -> DMatrix<f64>) -> TimeMatrix {
    if steps <= 1 {
        TimeMatrix::Constant(f(0))
    } else {
        TimeMatrix::PerStep((0..steps).map(f).collect())
    }
}

pub(crate) fn invert(name: &str, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{name} is singular")))
}

/// `sum_k (E <W x, x> + <W' E x, E x>)`-style quadratic with mean split:
/// `E <W v, v> + <W' E v, E v>` over one level of node values.
pub(crate) fn level_quadratic(values: &[f64], dim: usize, w: &DMatrix<f64>, w_bar: &DMatrix<f64>) -> f64 {
    if dim == 0 {
        return 0.0;
    }
    let rows = values.len() / dim;
    let mean = crate::model::level_mean(values, dim);
    let quad = |m: &DMatrix<f64>, v: &[f64]| -> f64 {
        let mut out = vec![0.0; dim];
        crate::linalg::gemv_acc(m, v, &mut out);
        crate::linalg::dot(&out, v)
    };
    let own: Vec<f64> = values.chunks(dim).map(|v| quad(w, v)).collect();
    crate::par::pairwise_sum(&own) / rows as f64 + quad(w_bar, &mean)
}

/// `m v` into a fresh vector.
pub(crate) fn mv(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.nrows()];
    crate::linalg::gemv_acc(m, v, &mut out);
    out
}

/// `out += m v`.
pub(crate) fn mv_acc(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    crate::linalg::gemv_acc(m, v, out);
}

/// `out += m^T v`.
pub(crate) fn mtv_acc(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    crate::linalg::gemv_t_acc(m, v, out);
}
