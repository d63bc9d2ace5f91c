//! Backward problem: a linear mean-field BSDE steered by a terminal control
//! `eta` (through `P`, `P'`) and a control process `u`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::backward::{solve_mf_bsde, BsdeSolution, Driver, RegressionConfig};
use crate::continuation::{solve_perturbed, ContinuationConfig};
use crate::error::{Error, Result};
use crate::forward::{solve_mf_sde, Dynamics};
use crate::linalg::{hstack, operator_norm, sym_inv_sqrt};
use crate::lq::{
    build_timed, check_delta_gap, check_steps, invert, level_quadratic, m2_process_norm, mtv_acc,
    mv, mv_acc, pd_check, report, symmetric, symmetric_timed, ControlBLQ, LqSolution,
    Maximization, PdReport, Shapes, Stationarity, DEFAULT_DELTA_GAP, PD_TOL,
};
use crate::model::{
    level_mean, Case, CoefficientSet, Dimensions, DominationWeights, LinearCoefficients,
    PerturbationTriple, Process, SolutionEnsemble, TimeMatrix,
};
use crate::noise::Backend;

/// Terminal datum `y_T = constant + brownian W(T)` with `W(T) - W(t0)` the
/// Brownian position at the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalValue {
    pub constant: DVector<f64>,
    /// `n x d`.
    pub brownian: DMatrix<f64>,
}

impl TerminalValue {
    pub fn deterministic(v: DVector<f64>, d: usize) -> Self {
        let n = v.len();
        TerminalValue {
            constant: v,
            brownian: DMatrix::zeros(n, d),
        }
    }

    /// One row of `n` per terminal scenario.
    pub fn realize(&self, backend: &Backend) -> Vec<f64> {
        let n = self.constant.len();
        let d = backend.d();
        let steps = backend.grid().steps;
        let width = backend.width(steps);
        let mut out = Vec::with_capacity(width * n);
        let mut w = vec![0.0; d];
        for j in 0..width {
            match backend {
                Backend::Tree(t) => t.position(steps, j, &mut w),
                Backend::MonteCarlo(m) => w.copy_from_slice(&m.positions(steps)[j * d..(j + 1) * d]),
            }
            let mut row = self.constant.as_slice().to_vec();
            mv_acc(&self.brownian, &w, &mut row);
            out.extend(row);
        }
        out
    }

    fn is_zero(&self) -> bool {
        self.constant.iter().chain(self.brownian.iter()).all(|v| *v == 0.0)
    }
}

/// Cost weights: `M` on the initial state, `G`, `G'` on the terminal
/// control, `Q`, `Q'` on `y`, `L`, `L'` on `z` and `R`, `R'` on `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlqCost {
    pub m: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub g_bar: DMatrix<f64>,
    pub q: TimeMatrix,
    pub q_bar: TimeMatrix,
    /// `nd x nd`; block diagonal in the usual formulation, any symmetric
    /// matrix is accepted.
    pub l: TimeMatrix,
    pub l_bar: TimeMatrix,
    pub r: TimeMatrix,
    pub r_bar: TimeMatrix,
}

/// `dy = (A y + A' E y + B z + B' E z + C u + C' E u + alpha) ds + sum_i z_i dW_i`,
/// `y(T) = P eta + P' E eta + y_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardLQProblem {
    pub dims: Dimensions,
    pub m: usize,
    pub a: TimeMatrix,
    pub a_bar: TimeMatrix,
    /// `(B_1, ..., B_d)` side by side, `n x nd`.
    pub b: TimeMatrix,
    pub b_bar: TimeMatrix,
    pub c: TimeMatrix,
    pub c_bar: TimeMatrix,
    pub p: DMatrix<f64>,
    pub p_bar: DMatrix<f64>,
    pub alpha: TimeMatrix,
    pub y_t: TerminalValue,
    pub cost: BlqCost,
}

impl BackwardLQProblem {
    pub fn zeros(dims: Dimensions, m: usize) -> Self {
        let (n, nd) = (dims.n, dims.z());
        BackwardLQProblem {
            dims,
            m,
            a: TimeMatrix::zeros(n, n),
            a_bar: TimeMatrix::zeros(n, n),
            b: TimeMatrix::zeros(n, nd),
            b_bar: TimeMatrix::zeros(n, nd),
            c: TimeMatrix::zeros(n, m),
            c_bar: TimeMatrix::zeros(n, m),
            p: DMatrix::zeros(n, n),
            p_bar: DMatrix::zeros(n, n),
            alpha: TimeMatrix::zeros(n, 1),
            y_t: TerminalValue::deterministic(DVector::zeros(n), dims.d),
            cost: BlqCost {
                m: DMatrix::zeros(n, n),
                g: DMatrix::zeros(n, n),
                g_bar: DMatrix::zeros(n, n),
                q: TimeMatrix::zeros(n, n),
                q_bar: TimeMatrix::zeros(n, n),
                l: TimeMatrix::zeros(nd, nd),
                l_bar: TimeMatrix::zeros(nd, nd),
                r: TimeMatrix::zeros(m, m),
                r_bar: TimeMatrix::zeros(m, m),
            },
        }
    }

    /// Scalar instance `dy = z dW`, `y(T) = eta + 1`,
    /// `J = (y(t0)^2 + eta^2 + int u^2) / 2`. The optimum is `eta = -1/2`
    /// with cost `1/4`.
    pub fn scalar_example() -> Self {
        let one = || DMatrix::from_element(1, 1, 1.0);
        let mut p = Self::zeros(Dimensions { n: 1, d: 1 }, 1);
        p.p = one();
        p.y_t = TerminalValue::deterministic(DVector::from_element(1, 1.0), 1);
        p.cost.m = one();
        p.cost.g = one();
        p.cost.r = one().into();
        p
    }

    fn timed_fields(&self) -> [(&'static str, &TimeMatrix); 13] {
        [
            ("A", &self.a),
            ("A_bar", &self.a_bar),
            ("B", &self.b),
            ("B_bar", &self.b_bar),
            ("C", &self.c),
            ("C_bar", &self.c_bar),
            ("alpha", &self.alpha),
            ("Q", &self.cost.q),
            ("Q_bar", &self.cost.q_bar),
            ("L", &self.cost.l),
            ("L_bar", &self.cost.l_bar),
            ("R", &self.cost.r),
            ("R_bar", &self.cost.r_bar),
        ]
    }

    pub(crate) fn steps(&self) -> usize {
        self.timed_fields().iter().map(|(_, m)| m.steps()).max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, nd, m) = (self.dims.n, self.dims.z(), self.m);
        if n == 0 || self.dims.d == 0 || m == 0 {
            return Err(Error::Config("n, d and m must be positive".into()));
        }
        let mut s = Shapes::default();
        for (name, tm, shape) in [
            ("A", &self.a, (n, n)),
            ("A_bar", &self.a_bar, (n, n)),
            ("B", &self.b, (n, nd)),
            ("B_bar", &self.b_bar, (n, nd)),
            ("C", &self.c, (n, m)),
            ("C_bar", &self.c_bar, (n, m)),
            ("alpha", &self.alpha, (n, 1)),
            ("Q", &self.cost.q, (n, n)),
            ("Q_bar", &self.cost.q_bar, (n, n)),
            ("L", &self.cost.l, (nd, nd)),
            ("L_bar", &self.cost.l_bar, (nd, nd)),
            ("R", &self.cost.r, (m, m)),
            ("R_bar", &self.cost.r_bar, (m, m)),
        ] {
            s.timed(name, tm, shape);
        }
        for (name, mat) in [
            ("P", &self.p),
            ("P_bar", &self.p_bar),
            ("M", &self.cost.m),
            ("G", &self.cost.g),
            ("G_bar", &self.cost.g_bar),
        ] {
            s.fixed(name, mat, (n, n));
        }
        s.vector("y_T", &self.y_t.constant, n);
        s.fixed("y_T_brownian", &self.y_t.brownian, (n, self.dims.d));
        s.finish()?;
        for (name, mat) in [("M", &self.cost.m), ("G", &self.cost.g), ("G_bar", &self.cost.g_bar)] {
            symmetric(name, mat)?;
        }
        for (name, tm) in [
            ("Q", &self.cost.q),
            ("Q_bar", &self.cost.q_bar),
            ("L", &self.cost.l),
            ("L_bar", &self.cost.l_bar),
            ("R", &self.cost.r),
            ("R_bar", &self.cost.r_bar),
        ] {
            symmetric_timed(name, tm)?;
        }
        Ok(())
    }

    pub fn check_grid(&self, grid: crate::model::TimeGrid) -> Result<()> {
        self.validate()?;
        check_steps(&self.timed_fields(), grid)
    }

    /// The same dynamics with every cost weight negated.
    pub fn negated(&self) -> Self {
        let mut p = self.clone();
        let c = &mut p.cost;
        for m in [&mut c.m, &mut c.g, &mut c.g_bar] {
            *m = -&*m;
        }
        for t in [&mut c.q, &mut c.q_bar, &mut c.l, &mut c.l_bar, &mut c.r, &mut c.r_bar] {
            *t = t.map(|m| -m);
        }
        p
    }
}

/// `M >= 0`, `G, G + G' > 0`, `Q, Q + Q' >= 0`, `L, L + L' >= 0` and
/// `R, R + R' >= delta_gap` at every step.
pub fn check_pd_blq(prob: &BackwardLQProblem, delta_gap: f64) -> Result<PdReport> {
    prob.validate()?;
    check_delta_gap(delta_gap)?;
    let c = &prob.cost;
    let sum = |a: &TimeMatrix, b: &TimeMatrix| a.zip(b, |x, y| x + y);
    let strict_r = delta_gap == 0.0;
    Ok(report(
        delta_gap,
        vec![
            pd_check("M", &c.m.clone().into(), 0.0, false),
            pd_check("G", &c.g.clone().into(), 0.0, true),
            pd_check("G+G_bar", &(&c.g + &c.g_bar).into(), 0.0, true),
            pd_check("Q", &c.q, 0.0, false),
            pd_check("Q+Q_bar", &sum(&c.q, &c.q_bar), 0.0, false),
            pd_check("L", &c.l, 0.0, false),
            pd_check("L+L_bar", &sum(&c.l, &c.l_bar), 0.0, false),
            pd_check("R", &c.r, delta_gap, strict_r),
            pd_check("R+R_bar", &sum(&c.r, &c.r_bar), delta_gap, strict_r),
        ],
    ))
}

struct Feedback {
    r_inv: DMatrix<f64>,
    rt_inv: DMatrix<f64>,
    c_t: DMatrix<f64>,
}

fn feedback(prob: &BackwardLQProblem, k: usize) -> Result<Feedback> {
    let r = prob.cost.r.at(k);
    Ok(Feedback {
        r_inv: invert("R", r)?,
        rt_inv: invert("R+R_bar", &(r + prob.cost.r_bar.at(k)))?,
        c_t: prob.c.at(k) + prob.c_bar.at(k),
    })
}

fn put(m: &mut DMatrix<f64>, r: usize, c: usize, block: &DMatrix<f64>) {
    m.view_mut((r, c), block.shape()).copy_from(block);
}

/// Affine coefficients of the Hamiltonian system. The terminal datum `y_T`
/// is not part of them: it enters as the terminal perturbation.
pub(crate) fn hamiltonian_coefficients(prob: &BackwardLQProblem) -> Result<LinearCoefficients> {
    prob.validate()?;
    let dims = prob.dims;
    let (n, t) = (dims.n, dims.theta());
    let g_inv = invert("G", &prob.cost.g)?;
    let gt_inv = invert("G+G_bar", &(&prob.cost.g + &prob.cost.g_bar))?;
    let p_t = &prob.p + &prob.p_bar;
    let steps = prob.steps();
    let mut fb = Vec::with_capacity(steps);
    for k in 0..steps {
        fb.push(feedback(prob, k)?);
    }

    let mut c = LinearCoefficients::zeros(dims);
    c.psi_y = -prob.cost.m.clone();
    let own = &prob.p * &g_inv * prob.p.transpose();
    c.phi_xbar = &p_t * &gt_inv * p_t.transpose() - &own;
    c.phi_x = own;
    c.gamma_theta = build_timed(steps, |k| {
        let f = &fb[k];
        let cm = prob.c.at(k);
        let mut g = DMatrix::zeros(t, t);
        put(&mut g, 0, 0, &-(cm * &f.r_inv * cm.transpose()));
        put(&mut g, 0, n, prob.a.at(k));
        put(&mut g, 0, 2 * n, prob.b.at(k));
        put(&mut g, n, 0, &-prob.a.at(k).transpose());
        put(&mut g, n, n, &-prob.cost.q.at(k));
        put(&mut g, 2 * n, 0, &-prob.b.at(k).transpose());
        put(&mut g, 2 * n, 2 * n, &-prob.cost.l.at(k));
        g
    });
    c.gamma_theta_bar = build_timed(steps, |k| {
        let f = &fb[k];
        let cm = prob.c.at(k);
        let mut g = DMatrix::zeros(t, t);
        put(
            &mut g,
            0,
            0,
            &(cm * &f.r_inv * cm.transpose() - &f.c_t * &f.rt_inv * f.c_t.transpose()),
        );
        put(&mut g, 0, n, prob.a_bar.at(k));
        put(&mut g, 0, 2 * n, prob.b_bar.at(k));
        put(&mut g, n, 0, &-prob.a_bar.at(k).transpose());
        put(&mut g, n, n, &-prob.cost.q_bar.at(k));
        put(&mut g, 2 * n, 0, &-prob.b_bar.at(k).transpose());
        put(&mut g, 2 * n, 2 * n, &-prob.cost.l_bar.at(k));
        g
    });
    c.gamma_0 = build_timed(steps, |k| {
        let mut g = DMatrix::zeros(t, 1);
        put(&mut g, 0, 0, prob.alpha.at(k));
        g
    });
    c.validate()?;
    Ok(c)
}

/// Case B weights: `P_w = G^(-1/2) P'`, `P~_w = G~^(-1/2) P~'`,
/// `A_w = R^(-1/2) C'`, `A~_w = R~^(-1/2) C~'`, with `nu` the largest value,
/// capped at `1/2`, for which domination holds exactly.
pub(crate) fn witness(prob: &BackwardLQProblem) -> Result<DominationWeights> {
    let dims = prob.dims;
    let n = dims.n;
    let steps = prob.steps();
    let mut w = DominationWeights::empty(dims, Case::B, 1, n, prob.m);
    let g_isq = sym_inv_sqrt(&prob.cost.g, PD_TOL);
    let gt_isq = sym_inv_sqrt(&(&prob.cost.g + &prob.cost.g_bar), PD_TOL);
    let p_t = &prob.p + &prob.p_bar;
    w.p = &g_isq * prob.p.transpose();
    w.p_tilde = &gt_isq * p_t.transpose();
    let inv = |x: f64| if x > 0.0 { 1.0 / x } else { f64::INFINITY };
    let mut nu = 0.5f64.min(inv(operator_norm(&hstack(&[&(&prob.p * &g_isq), &(&p_t * &gt_isq)]))));
    let mut parts = Vec::with_capacity(steps);
    for k in 0..steps {
        let r = prob.cost.r.at(k);
        let r_isq = sym_inv_sqrt(r, PD_TOL);
        let rt_isq = sym_inv_sqrt(&(r + prob.cost.r_bar.at(k)), PD_TOL);
        let f = feedback(prob, k)?;
        let cm = prob.c.at(k);
        nu = nu.min(inv(operator_norm(&hstack(&[&(cm * &r_isq), &(&f.c_t * &rt_isq)]))));
        parts.push([&r_isq * cm.transpose(), &rt_isq * f.c_t.transpose()]);
    }
    w.a = build_timed(steps, |k| parts[k][0].clone());
    w.a_tilde = build_timed(steps, |k| parts[k][1].clone());
    w.nu = 1.0;
    w.nu = nu.min(w.weight_cap());
    w.validate()?;
    Ok(w)
}

/// The Hamiltonian system as affine coefficients, with Case B domination
/// weights. Fails unless the definiteness conditions hold with the default
/// gap. Pass `y_T` as the terminal perturbation when solving.
pub fn hamiltonian_blq(prob: &BackwardLQProblem) -> Result<(CoefficientSet, DominationWeights)> {
    let pd = check_pd_blq(prob, DEFAULT_DELTA_GAP)?;
    if !pd.passed {
        return Err(Error::NotPositiveDefinite(pd.failures()));
    }
    let coeffs = CoefficientSet::Linear(Arc::new(hamiltonian_coefficients(prob)?));
    Ok((coeffs, witness(prob)?))
}

/// Optimal controls read off a solution of the Hamiltonian system.
pub fn extract_control_blq(prob: &BackwardLQProblem, theta: &SolutionEnsemble) -> Result<ControlBLQ> {
    prob.validate()?;
    let (n, m) = (prob.dims.n, prob.m);
    if theta.dims != prob.dims {
        return Err(Error::Dimension {
            what: "solution against problem".into(),
            expected: prob.dims.theta(),
            got: theta.dims.theta(),
        });
    }
    let g_inv = invert("G", &prob.cost.g)?;
    let gt_inv = invert("G+G_bar", &(&prob.cost.g + &prob.cost.g_bar))?;
    let p_t = &prob.p + &prob.p_bar;
    let grid = theta.grid;
    let steps = grid.steps;
    let xb = &theta.xbar[steps];
    let mut mean_eta = vec![0.0; n];
    mtv_acc(&p_t, xb, &mut mean_eta);
    let mean_eta = mv(&gt_inv, &mean_eta);
    let own_map = &g_inv * prob.p.transpose();
    let width = theta.layout.width(steps);
    let mut eta = Vec::with_capacity(width * n);
    for j in 0..width {
        let dev: Vec<f64> = theta.x.node(steps, j).iter().zip(xb).map(|(a, b)| a - b).collect();
        let mut row = mean_eta.clone();
        mv_acc(&own_map, &dev, &mut row);
        eta.extend(row);
    }
    let mut u = Process::zeros(theta.layout, steps, m);
    for k in 0..steps {
        let f = feedback(prob, k)?;
        let xb = &theta.xbar[k];
        let mut mean_part = vec![0.0; m];
        mtv_acc(&f.c_t, xb, &mut mean_part);
        let mean_u = mv(&-&f.rt_inv, &mean_part);
        let own = -(&f.r_inv * prob.c.at(k).transpose());
        for j in 0..theta.layout.width(k) {
            let dev: Vec<f64> = theta.x.node(k, j).iter().zip(xb).map(|(a, b)| a - b).collect();
            let row = u.node_mut(k, j);
            row.copy_from_slice(&mean_u);
            mv_acc(&own, &dev, row);
        }
    }
    Ok(ControlBLQ { eta, u })
}

fn check_control(prob: &BackwardLQProblem, control: &ControlBLQ, backend: &Backend) -> Result<()> {
    prob.check_grid(backend.grid())?;
    let layout = backend.layout();
    let steps = backend.grid().steps;
    let ok_u = control.u.dim == prob.m
        && control.u.steps() == steps
        && (0..=steps).all(|k| control.u.width(k) == layout.width(k));
    let want_eta = layout.width(steps) * prob.dims.n;
    if control.eta.len() != want_eta || !ok_u {
        return Err(Error::Dimension {
            what: "control against problem and backend".into(),
            expected: want_eta,
            got: control.eta.len(),
        });
    }
    if !control.is_finite() {
        return Err(Error::NonFinite {
            step: steps,
            what: "control".into(),
        });
    }
    Ok(())
}

struct Controlled<'a> {
    prob: &'a BackwardLQProblem,
    u: &'a Process,
    ubar: Vec<Vec<f64>>,
}

impl Driver for Controlled<'_> {
    fn dims(&self) -> Dimensions {
        self.prob.dims
    }

    fn eval(&self, k: usize, node: usize, y: &[f64], yb: &[f64], z: &[f64], zb: &[f64], out: &mut [f64]) {
        let p = self.prob;
        out.copy_from_slice(p.alpha.at(k).as_slice());
        mv_acc(p.a.at(k), y, out);
        mv_acc(p.a_bar.at(k), yb, out);
        mv_acc(p.b.at(k), z, out);
        mv_acc(p.b_bar.at(k), zb, out);
        mv_acc(p.c.at(k), self.u.node(k, node), out);
        mv_acc(p.c_bar.at(k), &self.ubar[k], out);
    }
}

/// `P eta + P' E eta + y_T`, one row per terminal scenario.
fn terminal_state(prob: &BackwardLQProblem, eta: &[f64], backend: &Backend) -> Vec<f64> {
    let n = prob.dims.n;
    let mut out = prob.y_t.realize(backend);
    let common = mv(&prob.p_bar, &level_mean(eta, n));
    for (row, e) in out.chunks_mut(n).zip(eta.chunks(n)) {
        row.iter_mut().zip(&common).for_each(|(r, c)| *r += c);
        mv_acc(&prob.p, e, row);
    }
    out
}

/// State under a control, by the implicit backward scheme.
pub fn simulate_blq(
    prob: &BackwardLQProblem,
    control: &ControlBLQ,
    backend: &Backend,
    regression: Option<&RegressionConfig>,
) -> Result<BsdeSolution> {
    check_control(prob, control, backend)?;
    let driver = Controlled {
        prob,
        u: &control.u,
        ubar: control.u.means(),
    };
    solve_mf_bsde(&driver, &terminal_state(prob, &control.eta, backend), backend, regression)
}

pub(crate) fn cost_of_state(prob: &BackwardLQProblem, control: &ControlBLQ, state: &BsdeSolution, backend: &Backend) -> f64 {
    let (n, nd, m) = (prob.dims.n, prob.dims.z(), prob.m);
    let grid = backend.grid();
    let c = &prob.cost;
    let zero = DMatrix::zeros(n, n);
    let initial = level_quadratic(&state.y.levels[0], n, &c.m, &zero);
    let terminal = level_quadratic(&control.eta, n, &c.g, &c.g_bar);
    let running: f64 = (0..grid.steps)
        .map(|k| {
            level_quadratic(&state.y.levels[k], n, c.q.at(k), c.q_bar.at(k))
                + level_quadratic(&state.z.levels[k], nd, c.l.at(k), c.l_bar.at(k))
                + level_quadratic(&control.u.levels[k], m, c.r.at(k), c.r_bar.at(k))
        })
        .sum();
    0.5 * (initial + terminal + grid.h() * running)
}

/// Discrete cost with left-endpoint quadrature of the running part.
pub fn cost_blq(
    prob: &BackwardLQProblem,
    control: &ControlBLQ,
    backend: &Backend,
    regression: Option<&RegressionConfig>,
) -> Result<f64> {
    let state = simulate_blq(prob, control, backend, regression)?;
    Ok(cost_of_state(prob, control, &state, backend))
}

struct Adjoint<'a> {
    prob: &'a BackwardLQProblem,
    state: &'a BsdeSolution,
    ybar: Vec<Vec<f64>>,
    zbar: Vec<Vec<f64>>,
}

impl Dynamics for Adjoint<'_> {
    fn dims(&self) -> Dimensions {
        self.prob.dims
    }

    fn eval(&self, k: usize, node: usize, x: &[f64], xb: &[f64], drift: &mut [f64], diff: &mut [f64]) {
        let p = self.prob;
        drift.iter_mut().for_each(|v| *v = 0.0);
        mtv_acc(p.a.at(k), x, drift);
        mtv_acc(p.a_bar.at(k), xb, drift);
        mv_acc(p.cost.q.at(k), self.state.y.node(k, node), drift);
        mv_acc(p.cost.q_bar.at(k), &self.ybar[k], drift);
        drift.iter_mut().for_each(|v| *v = -*v);
        diff.iter_mut().for_each(|v| *v = 0.0);
        mtv_acc(p.b.at(k), x, diff);
        mtv_acc(p.b_bar.at(k), xb, diff);
        mv_acc(p.cost.l.at(k), self.state.z.node(k, node), diff);
        mv_acc(p.cost.l_bar.at(k), &self.zbar[k], diff);
        diff.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Residuals of the first-order conditions for a given control: the state
/// is solved backward, the adjoint simulated forward from `-M y(t0)`, and
/// both optimality equations evaluated.
pub fn stationarity_blq(
    prob: &BackwardLQProblem,
    control: &ControlBLQ,
    backend: &Backend,
    regression: Option<&RegressionConfig>,
) -> Result<Stationarity> {
    let state = simulate_blq(prob, control, backend, regression)?;
    let grid = backend.grid();
    let (n, m) = (prob.dims.n, prob.m);
    let steps = grid.steps;
    let x0: Vec<f64> = state.y.levels[0]
        .chunks(n)
        .flat_map(|y| mv(&-&prob.cost.m, y))
        .collect();
    let x = solve_mf_sde(
        &Adjoint {
            prob,
            state: &state,
            ybar: state.y.means(),
            zbar: state.z.means(),
        },
        &x0,
        backend,
    )?;
    let xbar = x.means();

    let eta_bar = level_mean(&control.eta, n);
    let mut common = mv(&prob.cost.g_bar, &eta_bar);
    mtv_acc(&-&prob.p_bar, &xbar[steps], &mut common);
    let width = backend.width(steps);
    let mut sq = 0.0;
    for j in 0..width {
        let mut row = common.clone();
        mv_acc(&prob.cost.g, &control.eta[j * n..(j + 1) * n], &mut row);
        mtv_acc(&-&prob.p, x.node(steps, j), &mut row);
        sq += crate::linalg::norm2(&row);
    }
    let endpoint = (sq / width as f64).sqrt();

    let layout = backend.layout();
    let ubar = control.u.means();
    let mut res = Process::zeros(layout, steps, m);
    for k in 0..steps {
        let mut common = mv(prob.cost.r_bar.at(k), &ubar[k]);
        mtv_acc(prob.c_bar.at(k), &xbar[k], &mut common);
        for j in 0..layout.width(k) {
            let row = res.node_mut(k, j);
            row.copy_from_slice(&common);
            mv_acc(prob.cost.r.at(k), control.u.node(k, j), row);
            mtv_acc(prob.c.at(k), x.node(k, j), row);
        }
    }
    Ok(Stationarity {
        endpoint,
        process: m2_process_norm(&res, grid),
    })
}

/// Builds the Hamiltonian system, solves it by continuation with `y_T` as
/// the terminal perturbation, and extracts and prices the optimal control.
pub fn solve_blq(
    prob: &BackwardLQProblem,
    backend: &Backend,
    config: &ContinuationConfig,
    regression: Option<&RegressionConfig>,
) -> Result<LqSolution<ControlBLQ>> {
    prob.check_grid(backend.grid())?;
    let (coeffs, weights) = hamiltonian_blq(prob)?;
    let mut pert = PerturbationTriple::zeros(prob.dims, backend.layout(), backend.grid());
    if !prob.y_t.is_zero() {
        pert.eta = prob.y_t.realize(backend);
    }
    let (theta, diagnostics) = solve_perturbed(&coeffs, &weights, &pert, config, backend)?;
    let control = extract_control_blq(prob, &theta)?;
    let cost = cost_blq(prob, &control, backend, regression)?;
    Ok(LqSolution {
        control,
        theta,
        diagnostics,
        cost,
        weights,
    })
}

/// The maximization problem with uniformly negative definite weights, as
/// the minimization of `-J`.
pub fn maximize_blq(prob: &BackwardLQProblem, delta_gap: f64) -> Result<Maximization<BackwardLQProblem>> {
    let negated = prob.negated();
    let pd = check_pd_blq(&negated, delta_gap)?;
    if !pd.passed {
        return Err(Error::Domain(format!(
            "weights are not uniformly negative definite: {}",
            pd.failures()
        )));
    }
    Ok(Maximization::new(negated))
}
