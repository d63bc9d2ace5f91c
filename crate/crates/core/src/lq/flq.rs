//! Forward problem: a linear mean-field SDE steered by an initial control
//! `xi` (through `H`) and a control process `u`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::backward::{solve_mf_bsde, Driver, RegressionConfig};
use crate::continuation::{solve, ContinuationConfig};
use crate::error::{Error, Result};
use crate::forward::{solve_mf_sde, Dynamics};
use crate::linalg::{hstack, operator_norm, sym_inv_sqrt};
use crate::lq::{
    build_timed, check_delta_gap, check_steps, invert, level_quadratic, m2_process_norm, mtv_acc,
    mv, mv_acc, pd_check, report, symmetric, symmetric_timed, ControlFLQ, LqSolution,
    Maximization, PdReport, Shapes, Stationarity, DEFAULT_DELTA_GAP, PD_TOL,
};
use crate::model::{
    level_mean, Case, CoefficientSet, Dimensions, DominationWeights, LinearCoefficients, Process,
    SolutionEnsemble, TimeGrid, TimeMatrix,
};
use crate::noise::Backend;

/// Cost weights: `M` on the initial control, `G`, `G'` on the terminal
/// state, `Q`, `Q'` on the running state and `R`, `R'` on the control.
#[derive(Clone, Debug, PartialEq)]
pub struct FlqCost {
    pub m: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub g_bar: DMatrix<f64>,
    pub q: TimeMatrix,
    pub q_bar: TimeMatrix,
    pub r: TimeMatrix,
    pub r_bar: TimeMatrix,
}

/// `dx = (A x + A' E x + B u + B' E u + alpha) ds
///      + sum_i (C_i x + C'_i E x + D_i u + D'_i E u + beta_i) dW_i`,
/// `x(t0) = H xi + x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardLQProblem {
    pub dims: Dimensions,
    /// Control dimension.
    pub m: usize,
    pub a: TimeMatrix,
    pub a_bar: TimeMatrix,
    pub b: TimeMatrix,
    pub b_bar: TimeMatrix,
    /// `(C_1; ...; C_d)` stacked, `nd x n`.
    pub c: TimeMatrix,
    pub c_bar: TimeMatrix,
    /// `(D_1; ...; D_d)` stacked, `nd x m`.
    pub d: TimeMatrix,
    pub d_bar: TimeMatrix,
    pub h: DMatrix<f64>,
    pub alpha: TimeMatrix,
    /// `(beta_1; ...; beta_d)`, `nd x 1`.
    pub beta: TimeMatrix,
    pub x_t: DVector<f64>,
    pub cost: FlqCost,
}

impl ForwardLQProblem {
    /// Every matrix zero.
    pub fn zeros(dims: Dimensions, m: usize) -> Self {
        let (n, nd) = (dims.n, dims.z());
        ForwardLQProblem {
            dims,
            m,
            a: TimeMatrix::zeros(n, n),
            a_bar: TimeMatrix::zeros(n, n),
            b: TimeMatrix::zeros(n, m),
            b_bar: TimeMatrix::zeros(n, m),
            c: TimeMatrix::zeros(nd, n),
            c_bar: TimeMatrix::zeros(nd, n),
            d: TimeMatrix::zeros(nd, m),
            d_bar: TimeMatrix::zeros(nd, m),
            h: DMatrix::zeros(n, n),
            alpha: TimeMatrix::zeros(n, 1),
            beta: TimeMatrix::zeros(nd, 1),
            x_t: DVector::zeros(n),
            cost: FlqCost {
                m: DMatrix::zeros(n, n),
                g: DMatrix::zeros(n, n),
                g_bar: DMatrix::zeros(n, n),
                q: TimeMatrix::zeros(n, n),
                q_bar: TimeMatrix::zeros(n, n),
                r: TimeMatrix::zeros(m, m),
                r_bar: TimeMatrix::zeros(m, m),
            },
        }
    }

    /// Scalar instance `dx = u ds`, `x(t0) = xi + 1`,
    /// `J = (xi^2 + x(T)^2 + int u^2) / 2`. On `[0, 1]` the optimum is
    /// `xi = u = -1/3` with cost `1/6`.
    pub fn scalar_example() -> Self {
        let one = || DMatrix::from_element(1, 1, 1.0);
        let mut p = Self::zeros(Dimensions { n: 1, d: 1 }, 1);
        p.b = one().into();
        p.h = one();
        p.x_t = DVector::from_element(1, 1.0);
        p.cost.m = one();
        p.cost.g = one();
        p.cost.r = one().into();
        p
    }

    fn timed_fields(&self) -> [(&'static str, &TimeMatrix); 14] {
        [
            ("A", &self.a),
            ("A_bar", &self.a_bar),
            ("B", &self.b),
            ("B_bar", &self.b_bar),
            ("C", &self.c),
            ("C_bar", &self.c_bar),
            ("D", &self.d),
            ("D_bar", &self.d_bar),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("Q", &self.cost.q),
            ("Q_bar", &self.cost.q_bar),
            ("R", &self.cost.r),
            ("R_bar", &self.cost.r_bar),
        ]
    }

    pub(crate) fn steps(&self) -> usize {
        self.timed_fields().iter().map(|(_, m)| m.steps()).max().unwrap_or(1)
    }

    /// Shapes, finiteness and symmetry of the weights.
    pub fn validate(&self) -> Result<()> {
        let (n, nd, m) = (self.dims.n, self.dims.z(), self.m);
        if n == 0 || self.dims.d == 0 || m == 0 {
            return Err(Error::Config("n, d and m must be positive".into()));
        }
        let mut s = Shapes::default();
        for (name, tm, shape) in [
            ("A", &self.a, (n, n)),
            ("A_bar", &self.a_bar, (n, n)),
            ("B", &self.b, (n, m)),
            ("B_bar", &self.b_bar, (n, m)),
            ("C", &self.c, (nd, n)),
            ("C_bar", &self.c_bar, (nd, n)),
            ("D", &self.d, (nd, m)),
            ("D_bar", &self.d_bar, (nd, m)),
            ("alpha", &self.alpha, (n, 1)),
            ("beta", &self.beta, (nd, 1)),
            ("Q", &self.cost.q, (n, n)),
            ("Q_bar", &self.cost.q_bar, (n, n)),
            ("R", &self.cost.r, (m, m)),
            ("R_bar", &self.cost.r_bar, (m, m)),
        ] {
            s.timed(name, tm, shape);
        }
        for (name, mat) in [("H", &self.h), ("M", &self.cost.m), ("G", &self.cost.g), ("G_bar", &self.cost.g_bar)] {
            s.fixed(name, mat, (n, n));
        }
        s.vector("x_t", &self.x_t, n);
        s.finish()?;
        for (name, mat) in [("M", &self.cost.m), ("G", &self.cost.g), ("G_bar", &self.cost.g_bar)] {
            symmetric(name, mat)?;
        }
        for (name, tm) in [
            ("Q", &self.cost.q),
            ("Q_bar", &self.cost.q_bar),
            ("R", &self.cost.r),
            ("R_bar", &self.cost.r_bar),
        ] {
            symmetric_timed(name, tm)?;
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus agreement of per-step data with the grid.
    pub fn check_grid(&self, grid: TimeGrid) -> Result<()> {
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
        for t in [&mut c.q, &mut c.q_bar, &mut c.r, &mut c.r_bar] {
            *t = t.map(|m| -m);
        }
        p
    }
}

/// `M > 0`, `G, G + G' >= 0`, `Q, Q + Q' >= 0` and `R, R + R' >= delta_gap`
/// at every step.
pub fn check_pd_flq(prob: &ForwardLQProblem, delta_gap: f64) -> Result<PdReport> {
    prob.validate()?;
    check_delta_gap(delta_gap)?;
    let c = &prob.cost;
    let sum = |a: &TimeMatrix, b: &TimeMatrix| a.zip(b, |x, y| x + y);
    let strict_r = delta_gap == 0.0;
    Ok(report(
        delta_gap,
        vec![
            pd_check("M", &c.m.clone().into(), 0.0, true),
            pd_check("G", &c.g.clone().into(), 0.0, false),
            pd_check("G+G_bar", &(&c.g + &c.g_bar).into(), 0.0, false),
            pd_check("Q", &c.q, 0.0, false),
            pd_check("Q+Q_bar", &sum(&c.q, &c.q_bar), 0.0, false),
            pd_check("R", &c.r, delta_gap, strict_r),
            pd_check("R+R_bar", &sum(&c.r, &c.r_bar), delta_gap, strict_r),
        ],
    ))
}

/// Per-step matrices shared by the Hamiltonian system and control
/// extraction.
struct Feedback {
    r_inv: DMatrix<f64>,
    rt_inv: DMatrix<f64>,
    b_t: DMatrix<f64>,
    d_t: DMatrix<f64>,
}

fn feedback(prob: &ForwardLQProblem, k: usize) -> Result<Feedback> {
    let r = prob.cost.r.at(k);
    Ok(Feedback {
        r_inv: invert("R", r)?,
        rt_inv: invert("R+R_bar", &(r + prob.cost.r_bar.at(k)))?,
        b_t: prob.b.at(k) + prob.b_bar.at(k),
        d_t: prob.d.at(k) + prob.d_bar.at(k),
    })
}

fn put(m: &mut DMatrix<f64>, r: usize, c: usize, block: &DMatrix<f64>) {
    m.view_mut((r, c), block.shape()).copy_from(block);
}

/// Affine coefficients of the Hamiltonian system. Needs only invertible
/// `M`, `R`, `R + R'`; definiteness is not checked here.
pub(crate) fn hamiltonian_coefficients(prob: &ForwardLQProblem) -> Result<LinearCoefficients> {
    prob.validate()?;
    let dims = prob.dims;
    let (n, t) = (dims.n, dims.theta());
    let m_inv = invert("M", &prob.cost.m)?;
    let steps = prob.steps();
    let mut fb = Vec::with_capacity(steps);
    for k in 0..steps {
        fb.push(feedback(prob, k)?);
    }

    let mut c = LinearCoefficients::zeros(dims);
    c.psi_y = -(&prob.h * &m_inv * prob.h.transpose());
    c.psi_0 = prob.x_t.clone();
    c.phi_x = prob.cost.g.clone();
    c.phi_xbar = prob.cost.g_bar.clone();
    c.gamma_theta = build_timed(steps, |k| {
        let f = &fb[k];
        let (b, d) = (prob.b.at(k), prob.d.at(k));
        let mut g = DMatrix::zeros(t, t);
        put(&mut g, 0, 0, &-prob.cost.q.at(k));
        put(&mut g, 0, n, &-prob.a.at(k).transpose());
        put(&mut g, 0, 2 * n, &-prob.c.at(k).transpose());
        put(&mut g, n, 0, prob.a.at(k));
        put(&mut g, n, n, &-(b * &f.r_inv * b.transpose()));
        put(&mut g, n, 2 * n, &-(b * &f.r_inv * d.transpose()));
        put(&mut g, 2 * n, 0, prob.c.at(k));
        put(&mut g, 2 * n, n, &-(d * &f.r_inv * b.transpose()));
        put(&mut g, 2 * n, 2 * n, &-(d * &f.r_inv * d.transpose()));
        g
    });
    c.gamma_theta_bar = build_timed(steps, |k| {
        let f = &fb[k];
        let (b, d) = (prob.b.at(k), prob.d.at(k));
        let own = |l: &DMatrix<f64>, r: &DMatrix<f64>| l * &f.r_inv * r.transpose();
        let tilde = |l: &DMatrix<f64>, r: &DMatrix<f64>| l * &f.rt_inv * r.transpose();
        let mut g = DMatrix::zeros(t, t);
        put(&mut g, 0, 0, &-prob.cost.q_bar.at(k));
        put(&mut g, 0, n, &-prob.a_bar.at(k).transpose());
        put(&mut g, 0, 2 * n, &-prob.c_bar.at(k).transpose());
        put(&mut g, n, 0, prob.a_bar.at(k));
        put(&mut g, n, n, &(own(b, b) - tilde(&f.b_t, &f.b_t)));
        put(&mut g, n, 2 * n, &(own(b, d) - tilde(&f.b_t, &f.d_t)));
        put(&mut g, 2 * n, 0, prob.c_bar.at(k));
        put(&mut g, 2 * n, n, &(own(d, b) - tilde(&f.d_t, &f.b_t)));
        put(&mut g, 2 * n, 2 * n, &(own(d, d) - tilde(&f.d_t, &f.d_t)));
        g
    });
    c.gamma_0 = build_timed(steps, |k| {
        let mut g = DMatrix::zeros(t, 1);
        put(&mut g, n, 0, prob.alpha.at(k));
        put(&mut g, 2 * n, 0, prob.beta.at(k));
        g
    });
    c.validate()?;
    Ok(c)
}

/// Case A weights from square roots of the cost weights:
/// `H_w = M^(-1/2) H'`, `B_w = R^(-1/2) B'`, `C_w = R^(-1/2) D'` and the
/// tilde versions with `R + R'`, `B + B'`, `D + D'`. `mu` is the largest
/// value, capped at `1/2`, for which domination holds exactly.
pub(crate) fn witness(prob: &ForwardLQProblem) -> Result<DominationWeights> {
    let dims = prob.dims;
    let steps = prob.steps();
    let mut w = DominationWeights::empty(dims, Case::A, dims.n, 1, prob.m);
    let m_isq = sym_inv_sqrt(&prob.cost.m, PD_TOL);
    w.h = &m_isq * prob.h.transpose();
    let inv = |x: f64| if x > 0.0 { 1.0 / x } else { f64::INFINITY };
    let mut mu = 0.5f64.min(inv(operator_norm(&(&prob.h * &m_isq))));
    let mut parts = Vec::with_capacity(steps);
    for k in 0..steps {
        let r = prob.cost.r.at(k);
        let r_isq = sym_inv_sqrt(r, PD_TOL);
        let rt_isq = sym_inv_sqrt(&(r + prob.cost.r_bar.at(k)), PD_TOL);
        let f = feedback(prob, k)?;
        let (b, d) = (prob.b.at(k), prob.d.at(k));
        mu = mu
            .min(inv(operator_norm(&hstack(&[&(b * &r_isq), &(&f.b_t * &rt_isq)]))))
            .min(inv(operator_norm(&hstack(&[&(d * &r_isq), &(&f.d_t * &rt_isq)]))));
        parts.push([
            &r_isq * b.transpose(),
            &r_isq * d.transpose(),
            &rt_isq * f.b_t.transpose(),
            &rt_isq * f.d_t.transpose(),
        ]);
    }
    w.b = build_timed(steps, |k| parts[k][0].clone());
    w.c = build_timed(steps, |k| parts[k][1].clone());
    w.b_tilde = build_timed(steps, |k| parts[k][2].clone());
    w.c_tilde = build_timed(steps, |k| parts[k][3].clone());
    w.mu = 1.0;
    w.mu = mu.min(w.weight_cap());
    w.validate()?;
    Ok(w)
}

/// The Hamiltonian system as affine coefficients, with Case A domination
/// weights. Fails unless the definiteness conditions hold with the default
/// gap.
pub fn hamiltonian_flq(prob: &ForwardLQProblem) -> Result<(CoefficientSet, DominationWeights)> {
    let pd = check_pd_flq(prob, DEFAULT_DELTA_GAP)?;
    if !pd.passed {
        return Err(Error::NotPositiveDefinite(pd.failures()));
    }
    let coeffs = CoefficientSet::Linear(Arc::new(hamiltonian_coefficients(prob)?));
    Ok((coeffs, witness(prob)?))
}

/// Optimal controls read off a solution of the Hamiltonian system.
pub fn extract_control_flq(prob: &ForwardLQProblem, theta: &SolutionEnsemble) -> Result<ControlFLQ> {
    prob.validate()?;
    let (n, nd, m) = (prob.dims.n, prob.dims.z(), prob.m);
    if theta.dims != prob.dims {
        return Err(Error::Dimension {
            what: "solution against problem".into(),
            expected: prob.dims.theta(),
            got: theta.dims.theta(),
        });
    }
    let m_inv = invert("M", &prob.cost.m)?;
    let mut xi = vec![0.0; n];
    mtv_acc(&prob.h, &theta.ybar[0], &mut xi);
    let xi = mv(&(-m_inv), &xi);
    let grid = theta.grid;
    let mut u = Process::zeros(theta.layout, grid.steps, m);
    for k in 0..grid.steps {
        let f = feedback(prob, k)?;
        let (b, d) = (prob.b.at(k), prob.d.at(k));
        let (yb, zb) = (&theta.ybar[k], &theta.zbar[k]);
        let mut mean_part = vec![0.0; m];
        mtv_acc(&f.b_t, yb, &mut mean_part);
        mtv_acc(&f.d_t, zb, &mut mean_part);
        let mean_u = mv(&-&f.rt_inv, &mean_part);
        for j in 0..theta.layout.width(k) {
            let y: Vec<f64> = theta.y.node(k, j).iter().zip(yb).map(|(a, b)| a - b).collect();
            let z: Vec<f64> = theta.z.node(k, j).iter().zip(zb).map(|(a, b)| a - b).collect();
            let mut own = vec![0.0; m];
            mtv_acc(b, &y, &mut own);
            mtv_acc(d, &z, &mut own);
            let row = u.node_mut(k, j);
            row.copy_from_slice(&mean_u);
            mv_acc(&-&f.r_inv, &own, row);
        }
    }
    debug_assert_eq!(nd, theta.z.dim);
    Ok(ControlFLQ { xi, u })
}

fn check_control(prob: &ForwardLQProblem, control: &ControlFLQ, backend: &Backend) -> Result<()> {
    prob.check_grid(backend.grid())?;
    let layout = backend.layout();
    let steps = backend.grid().steps;
    let ok_u = control.u.dim == prob.m
        && control.u.steps() == steps
        && (0..=steps).all(|k| control.u.width(k) == layout.width(k));
    if control.xi.len() != prob.dims.n || !ok_u {
        return Err(Error::Dimension {
            what: "control against problem and backend".into(),
            expected: prob.dims.n + prob.m,
            got: control.xi.len() + control.u.dim,
        });
    }
    if !control.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            what: "control".into(),
        });
    }
    Ok(())
}

struct Controlled<'a> {
    prob: &'a ForwardLQProblem,
    u: &'a Process,
    ubar: Vec<Vec<f64>>,
}

impl Dynamics for Controlled<'_> {
    fn dims(&self) -> Dimensions {
        self.prob.dims
    }

    fn eval(&self, k: usize, node: usize, x: &[f64], xb: &[f64], drift: &mut [f64], diff: &mut [f64]) {
        let p = self.prob;
        let (u, ub) = (self.u.node(k, node), &self.ubar[k]);
        drift.copy_from_slice(p.alpha.at(k).as_slice());
        mv_acc(p.a.at(k), x, drift);
        mv_acc(p.a_bar.at(k), xb, drift);
        mv_acc(p.b.at(k), u, drift);
        mv_acc(p.b_bar.at(k), ub, drift);
        diff.copy_from_slice(p.beta.at(k).as_slice());
        mv_acc(p.c.at(k), x, diff);
        mv_acc(p.c_bar.at(k), xb, diff);
        mv_acc(p.d.at(k), u, diff);
        mv_acc(p.d_bar.at(k), ub, diff);
    }
}

/// State under a control, by the forward Euler scheme.
pub fn simulate_flq(prob: &ForwardLQProblem, control: &ControlFLQ, backend: &Backend) -> Result<Process> {
    check_control(prob, control, backend)?;
    let dyn_ = Controlled {
        prob,
        u: &control.u,
        ubar: control.u.means(),
    };
    let mut x0 = prob.x_t.as_slice().to_vec();
    mv_acc(&prob.h, &control.xi, &mut x0);
    solve_mf_sde(&dyn_, &x0, backend)
}

pub(crate) fn cost_of_state(prob: &ForwardLQProblem, control: &ControlFLQ, x: &Process, grid: TimeGrid) -> f64 {
    let (n, m) = (prob.dims.n, prob.m);
    let c = &prob.cost;
    let xi_q = crate::linalg::dot(&mv(&c.m, &control.xi), &control.xi);
    let terminal = level_quadratic(&x.levels[grid.steps], n, &c.g, &c.g_bar);
    let running: f64 = (0..grid.steps)
        .map(|k| {
            level_quadratic(&x.levels[k], n, c.q.at(k), c.q_bar.at(k))
                + level_quadratic(&control.u.levels[k], m, c.r.at(k), c.r_bar.at(k))
        })
        .sum();
    0.5 * (xi_q + terminal + grid.h() * running)
}

/// Discrete cost with left-endpoint quadrature of the running part.
pub fn cost_flq(prob: &ForwardLQProblem, control: &ControlFLQ, backend: &Backend) -> Result<f64> {
    let x = simulate_flq(prob, control, backend)?;
    Ok(cost_of_state(prob, control, &x, backend.grid()))
}

struct Adjoint<'a> {
    prob: &'a ForwardLQProblem,
    x: &'a Process,
    xbar: Vec<Vec<f64>>,
}

impl Driver for Adjoint<'_> {
    fn dims(&self) -> Dimensions {
        self.prob.dims
    }

    fn eval(&self, k: usize, node: usize, y: &[f64], yb: &[f64], z: &[f64], zb: &[f64], out: &mut [f64]) {
        let p = self.prob;
        out.iter_mut().for_each(|v| *v = 0.0);
        mtv_acc(p.a.at(k), y, out);
        mtv_acc(p.a_bar.at(k), yb, out);
        mtv_acc(p.c.at(k), z, out);
        mtv_acc(p.c_bar.at(k), zb, out);
        mv_acc(p.cost.q.at(k), self.x.node(k, node), out);
        mv_acc(p.cost.q_bar.at(k), &self.xbar[k], out);
        out.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Residuals of the first-order conditions for a given control: the state
/// is simulated, the adjoint equation solved backward, and both optimality
/// equations evaluated.
pub fn stationarity_flq(
    prob: &ForwardLQProblem,
    control: &ControlFLQ,
    backend: &Backend,
    regression: Option<&RegressionConfig>,
) -> Result<Stationarity> {
    let x = simulate_flq(prob, control, backend)?;
    let grid = backend.grid();
    let (n, m) = (prob.dims.n, prob.m);
    let xbar = x.means();
    let steps = grid.steps;
    let mut terminal = vec![0.0; x.levels[steps].len()];
    let gx = mv(&prob.cost.g_bar, &xbar[steps]);
    for (j, row) in terminal.chunks_mut(n).enumerate() {
        row.copy_from_slice(&gx);
        mv_acc(&prob.cost.g, x.node(steps, j), row);
    }
    let adj = solve_mf_bsde(
        &Adjoint {
            prob,
            x: &x,
            xbar: xbar.clone(),
        },
        &terminal,
        backend,
        regression,
    )?;
    let y0 = level_mean(&adj.y.levels[0], n);
    let mut e = mv(&prob.cost.m, &control.xi);
    mtv_acc(&prob.h, &y0, &mut e);
    let endpoint = crate::linalg::norm2(&e).sqrt();

    let layout = backend.layout();
    let ubar = control.u.means();
    let (ybar, zbar) = (adj.y.means(), adj.z.means());
    let mut res = Process::zeros(layout, steps, m);
    for k in 0..steps {
        let mut common = mv(prob.cost.r_bar.at(k), &ubar[k]);
        mtv_acc(prob.b_bar.at(k), &ybar[k], &mut common);
        mtv_acc(prob.d_bar.at(k), &zbar[k], &mut common);
        for j in 0..layout.width(k) {
            let row = res.node_mut(k, j);
            row.copy_from_slice(&common);
            mv_acc(prob.cost.r.at(k), control.u.node(k, j), row);
            mtv_acc(prob.b.at(k), adj.y.node(k, j), row);
            mtv_acc(prob.d.at(k), adj.z.node(k, j), row);
        }
    }
    Ok(Stationarity {
        endpoint,
        process: m2_process_norm(&res, grid),
    })
}

/// Builds the Hamiltonian system, solves it by continuation and extracts
/// and prices the optimal control.
pub fn solve_flq(
    prob: &ForwardLQProblem,
    backend: &Backend,
    config: &ContinuationConfig,
) -> Result<LqSolution<ControlFLQ>> {
    prob.check_grid(backend.grid())?;
    let (coeffs, weights) = hamiltonian_flq(prob)?;
    let (theta, diagnostics) = solve(&coeffs, &weights, config, backend)?;
    let control = extract_control_flq(prob, &theta)?;
    let cost = cost_flq(prob, &control, backend)?;
    Ok(LqSolution {
        control,
        theta,
        diagnostics,
        cost,
        weights,
    })
}

/// The maximization problem with uniformly negative definite weights, as
/// the minimization of `-J`. Its Hamiltonian system satisfies the primed
/// monotonicity conditions.
pub fn maximize_flq(prob: &ForwardLQProblem, delta_gap: f64) -> Result<Maximization<ForwardLQProblem>> {
    let negated = prob.negated();
    let pd = check_pd_flq(&negated, delta_gap)?;
    if !pd.passed {
        return Err(Error::Domain(format!(
            "weights are not uniformly negative definite: {}",
            pd.failures()
        )));
    }
    Ok(Maximization::new(negated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::{check_domination, check_monotonicity, symmetrize, Orientation, Sampling};
    use crate::noise::Backend;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn identity_weights_pass_and_defects_are_witnessed() {
        let mut p = ForwardLQProblem::scalar_example();
        p.cost.q = DMatrix::from_element(1, 1, 1.0).into();
        assert!(check_pd_flq(&p, 0.5).unwrap().passed);
        let mut singular = p.clone();
        singular.cost.m = DMatrix::zeros(1, 1);
        let r = check_pd_flq(&singular, 0.5).unwrap();
        assert!(!r.passed);
        assert_eq!(r.check("M").unwrap().min_eigenvalue, 0.0);
        let mut small = p.clone();
        small.cost.r = DMatrix::from_element(1, 1, 0.1).into();
        let r = check_pd_flq(&small, 0.2).unwrap();
        assert!(!r.check("R").unwrap().passed);
        assert!((r.check("R").unwrap().min_eigenvalue - 0.1).abs() < 1e-15);
    }

    #[test]
    fn driver_sign_matches_the_adjoint() {
        let mut p = ForwardLQProblem::scalar_example();
        p.cost.q = DMatrix::from_element(1, 1, 1.0).into();
        let c = hamiltonian_coefficients(&p).unwrap();
        let set = CoefficientSet::Linear(Arc::new(c));
        let mut out = vec![0.0; 3];
        set.gamma(grid(4).at(0), &[1.0, 0.0, 0.0], &[0.0; 3], &mut out);
        assert_eq!(out[0], -1.0);
    }

    #[test]
    fn scalar_example_has_the_hand_solution() {
        let p = ForwardLQProblem::scalar_example();
        let backend = Backend::tree(grid(6), 1).unwrap();
        let sol = solve_flq(&p, &backend, &ContinuationConfig::default()).unwrap();
        assert!((sol.theta.y0()[0] - 1.0 / 3.0).abs() < 1e-6, "{:?}", sol.theta.y0());
        assert!((sol.control.xi[0] + 1.0 / 3.0).abs() < 1e-6);
        assert!(sol.control.u.levels[..6].iter().flatten().all(|u| (u + 1.0 / 3.0).abs() < 1e-6));
        assert!((sol.cost - 1.0 / 6.0).abs() < 1e-6);
        let st = stationarity_flq(&p, &sol.control, &backend, None).unwrap();
        assert!(st.max() < 1e-6, "{st:?}");
    }

    #[test]
    fn zero_control_costs_one_half() {
        let p = ForwardLQProblem::scalar_example();
        let backend = Backend::tree(grid(4), 1).unwrap();
        let zero = ControlFLQ::zeros(1, 1, backend.layout(), backend.grid());
        assert!((cost_flq(&p, &zero, &backend).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn doubling_m_halves_xi() {
        let p = ForwardLQProblem::scalar_example();
        let g = grid(4);
        let layout = Backend::tree(g, 1).unwrap().layout();
        let mut theta = SolutionEnsemble::zeros(p.dims, layout, g);
        theta.y.levels.iter_mut().for_each(|l| l.iter_mut().for_each(|v| *v = 0.3));
        theta.refresh_means();
        let a = extract_control_flq(&p, &theta).unwrap();
        let mut p2 = p.clone();
        p2.cost.m *= 2.0;
        let b = extract_control_flq(&p2, &theta).unwrap();
        assert!((a.xi[0] - 2.0 * b.xi[0]).abs() < 1e-15);
        let zero = extract_control_flq(&p, &SolutionEnsemble::zeros(p.dims, layout, g)).unwrap();
        assert!(zero.xi[0] == 0.0 && zero.u.max_abs() == 0.0);
    }

    #[test]
    fn decoupled_case_stays_at_the_initial_value() {
        let mut p = ForwardLQProblem::zeros(Dimensions { n: 1, d: 1 }, 1);
        p.cost.m = DMatrix::from_element(1, 1, 1.0);
        p.cost.r = DMatrix::from_element(1, 1, 1.0).into();
        p.x_t = DVector::from_element(1, 0.7);
        let backend = Backend::tree(grid(4), 1).unwrap();
        let sol = solve_flq(&p, &backend, &ContinuationConfig::default()).unwrap();
        assert!(sol.theta.y.max_abs() < 1e-12);
        assert!(sol.theta.x.levels.iter().flatten().all(|x| (x - 0.7).abs() < 1e-12));
    }

    #[test]
    fn witness_passes_the_condition_checks() {
        let mut p = ForwardLQProblem::scalar_example();
        p.a = DMatrix::from_element(1, 1, 0.4).into();
        p.c = DMatrix::from_element(1, 1, 0.3).into();
        p.d = DMatrix::from_element(1, 1, 0.5).into();
        p.d_bar = DMatrix::from_element(1, 1, -0.2).into();
        p.cost.q = DMatrix::from_element(1, 1, 0.5).into();
        p.cost.r_bar = DMatrix::from_element(1, 1, 0.5).into();
        let (c, w) = hamiltonian_flq(&p).unwrap();
        let g = grid(4);
        let s = Sampling::with_budget(2000);
        let dom = check_domination(&c, &w, g, &s).unwrap();
        assert!(dom.passed, "{dom:?}");
        let tree = Backend::tree(g, 1).unwrap();
        let mono = check_monotonicity(&c, &w, &tree, &s, Orientation::Standard).unwrap();
        assert!(mono.passed, "{mono:?}");
    }

    #[test]
    fn maximization_flips_the_cost() {
        let p = ForwardLQProblem::scalar_example();
        let max = maximize_flq(&p.negated(), 0.5).unwrap();
        assert_eq!(max.problem, p);
        assert!(maximize_flq(&p, 0.5).is_err());
        let backend = Backend::tree(grid(4), 1).unwrap();
        let sol = solve_flq(&max.problem, &backend, &ContinuationConfig::default()).unwrap();
        assert!((max.value(sol.cost) + 1.0 / 6.0).abs() < 1e-6);
        // the maximization Hamiltonian is the sign flip of the minimization one
        let direct = hamiltonian_coefficients(&p.negated()).unwrap();
        let flipped = symmetrize(&CoefficientSet::Linear(Arc::new(hamiltonian_coefficients(&p).unwrap())));
        let f = flipped.as_linear().unwrap();
        assert!((&f.psi_y - &direct.psi_y).amax() < 1e-14);
        assert!((f.gamma_theta.at(0) - direct.gamma_theta.at(0)).amax() < 1e-14);
        assert!((f.gamma_theta_bar.at(0) - direct.gamma_theta_bar.at(0)).amax() < 1e-14);
        assert!((&f.phi_x - &direct.phi_x).amax() < 1e-14);
    }
}
