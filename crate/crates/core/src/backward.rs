//! Mean-field BSDE by backward induction: `z` explicit, `y` implicit through
//! an inner fixed point that also updates the mean-field arguments.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::EstimateReport;
use crate::model::norms::{expected_path_sum_sq, expected_path_sup, expected_sum};
use crate::model::{level_mean, CoefficientSet, Dimensions, Instant, Process, SolutionEnsemble, TimeGrid};
use crate::noise::Backend;
use crate::par;

pub const PICARD_TOL: f64 = 1e-12;
pub const PICARD_MAX_ITERS: usize = 200;

/// Driver `g(s, y, y', z, z')` of `dy = g ds + sum_i z_i dW_i`.
pub trait Driver: Sync {
    fn dims(&self) -> Dimensions;

    #[allow(clippy::too_many_arguments)]
    fn eval(
        &self,
        k: usize,
        node: usize,
        y: &[f64],
        ybar: &[f64],
        z: &[f64],
        zbar: &[f64],
        out: &mut [f64],
    );

    /// True when the driver ignores `y` and `y'`, so each step is explicit.
    fn explicit(&self) -> bool {
        false
    }
}

/// Driver from a closure `f(at, y, y', z, z', out)`.
pub struct FnDriver<F> {
    dims: Dimensions,
    grid: TimeGrid,
    explicit: bool,
    f: F,
}

impl<F> FnDriver<F>
where
    F: Fn(Instant, &[f64], &[f64], &[f64], &[f64], &mut [f64]) + Sync,
{
    pub fn new(dims: Dimensions, grid: TimeGrid, f: F) -> Self {
        FnDriver {
            dims,
            grid,
            explicit: false,
            f,
        }
    }

    /// Declares that `f` does not read `y` or `y'`.
    pub fn independent_of_y(mut self) -> Self {
        self.explicit = true;
        self
    }
}

impl<F> Driver for FnDriver<F>
where
    F: Fn(Instant, &[f64], &[f64], &[f64], &[f64], &mut [f64]) + Sync,
{
    fn dims(&self) -> Dimensions {
        self.dims
    }

    fn eval(&self, k: usize, _: usize, y: &[f64], yb: &[f64], z: &[f64], zb: &[f64], out: &mut [f64]) {
        (self.f)(self.grid.at(k), y, yb, z, zb, out)
    }

    fn explicit(&self) -> bool {
        self.explicit
    }
}

/// The `g` rows of a coefficient set with `x` frozen to a given ensemble
/// (or zero when absent).
pub struct CoefficientDriver<'a> {
    pub coeffs: &'a CoefficientSet,
    pub grid: TimeGrid,
    pub frozen: Option<&'a SolutionEnsemble>,
}

impl Driver for CoefficientDriver<'_> {
    fn dims(&self) -> Dimensions {
        self.coeffs.dims()
    }

    fn eval(&self, k: usize, node: usize, y: &[f64], yb: &[f64], z: &[f64], zb: &[f64], out: &mut [f64]) {
        let dims = self.coeffs.dims();
        let n = dims.n;
        let t = dims.theta();
        let mut th = vec![0.0; t];
        let mut tb = vec![0.0; t];
        if let Some(f) = self.frozen {
            th[..n].copy_from_slice(f.x.node(k, node));
            tb[..n].copy_from_slice(&f.xbar[k]);
        }
        th[n..2 * n].copy_from_slice(y);
        th[2 * n..].copy_from_slice(z);
        tb[n..2 * n].copy_from_slice(yb);
        tb[2 * n..].copy_from_slice(zb);
        let mut full = vec![0.0; t];
        self.coeffs.gamma(self.grid.at(k), &th, &tb, &mut full);
        out.copy_from_slice(&full[..n]);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// `1` and the state coordinates.
    Poly1,
    /// Adds all degree-two monomials.
    #[default]
    Poly2,
}

/// Least-squares conditional expectations for Monte-Carlo scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    #[serde(default)]
    pub basis: Basis,
    /// Ridge weight relative to the mean diagonal of the Gram matrix.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    1e-8
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            basis: Basis::Poly2,
            ridge: default_ridge(),
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::Config(format!("ridge must be finite and >= 0, got {}", self.ridge)));
        }
        Ok(())
    }
}

/// `(y, z)` on the grid. `z` has a zero row at step `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct BsdeSolution {
    pub y: Process,
    pub z: Process,
}

/// Conditional expectation operator for one step.
enum Projector {
    Tree,
    /// Fitted-value map, `M x M` never formed: coefficients are computed per target.
    Regression { features: Vec<f64>, q: usize, chol: nalgebra::Cholesky<f64, nalgebra::Dyn> },
}

/// Regression state features: columns that vary across scenarios, centered
/// and scaled, then expanded by the basis.
fn build_features(state: &[f64], sdim: usize, basis: Basis) -> (Vec<f64>, usize) {
    let rows = if sdim == 0 { 0 } else { state.len() / sdim };
    let mean = level_mean(state, sdim);
    let sq: Vec<f64> = state
        .chunks(sdim.max(1))
        .flat_map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)))
        .collect();
    let var = level_mean(&sq, sdim);
    let active: Vec<usize> = (0..sdim)
        .filter(|&c| var[c] > 1e-24 * (1.0 + mean[c] * mean[c]))
        .collect();
    let s = active.len();
    let q = match basis {
        Basis::Poly1 => 1 + s,
        Basis::Poly2 => 1 + s + s * (s + 1) / 2,
    };
    let mut f = vec![0.0; rows * q];
    par::for_each_chunk_mut(&mut f, q, |p, row| {
        row[0] = 1.0;
        let u: Vec<f64> = active
            .iter()
            .map(|&c| (state[p * sdim + c] - mean[c]) / var[c].sqrt())
            .collect();
        row[1..1 + s].copy_from_slice(&u);
        if basis == Basis::Poly2 {
            let mut at = 1 + s;
            for a in 0..s {
                for b in a..s {
                    row[at] = u[a] * u[b];
                    at += 1;
                }
            }
        }
    });
    (f, q)
}

impl Projector {
    fn regression(step: usize, state: &[f64], sdim: usize, cfg: &RegressionConfig) -> Result<Self> {
        let (features, q) = build_features(state, sdim, cfg.basis);
        let rows = features.len() / q;
        let mut outer = vec![0.0; rows * q * q];
        par::for_each_chunk_mut(&mut outer, q * q, |p, o| {
            let f = &features[p * q..(p + 1) * q];
            for a in 0..q {
                for b in 0..q {
                    o[a * q + b] = f[a] * f[b];
                }
            }
        });
        let gram = level_mean(&outer, q * q);
        let mut g = DMatrix::from_row_slice(q, q, &gram);
        let scale = g.trace() / q as f64;
        if cfg.ridge > 0.0 {
            for a in 0..q {
                g[(a, a)] += cfg.ridge * scale;
            }
        }
        let singular = || Error::RankDeficient { step };
        let chol = g.clone().cholesky().ok_or_else(singular)?;
        let diag_min = (0..q).map(|a| chol.l()[(a, a)]).fold(f64::INFINITY, f64::min);
        if cfg.ridge == 0.0 && diag_min * diag_min < 1e-13 * scale.max(1e-300) {
            return Err(singular());
        }
        Ok(Projector::Regression { features, q, chol })
    }

    /// Projects row-major `rows x dim` targets (indexed by scenarios at
    /// step `k + 1`) onto step `k`.
    fn apply(&self, backend: &Backend, k: usize, values: &[f64], dim: usize) -> Result<Vec<f64>> {
        match self {
            Projector::Tree => backend.cond_exp(k, values, dim),
            Projector::Regression { features, q, chol } => {
                let q = *q;
                let rows = features.len() / q;
                let mut cross = vec![0.0; rows * q * dim];
                par::for_each_chunk_mut(&mut cross, q * dim, |p, o| {
                    let f = &features[p * q..(p + 1) * q];
                    let v = &values[p * dim..(p + 1) * dim];
                    for a in 0..q {
                        for c in 0..dim {
                            o[a * dim + c] = f[a] * v[c];
                        }
                    }
                });
                let rhs = level_mean(&cross, q * dim);
                let beta = chol.solve(&DMatrix::from_row_slice(q, dim, &rhs));
                let mut out = vec![0.0; rows * dim];
                par::for_each_chunk_mut(&mut out, dim, |p, o| {
                    let f = &features[p * q..(p + 1) * q];
                    for (c, oc) in o.iter_mut().enumerate() {
                        *oc = (0..q).map(|a| f[a] * beta[(a, c)]).sum();
                    }
                });
                Ok(out)
            }
        }
    }
}

/// `E[values | F_k]` for values indexed by the scenarios at step `k + 1`:
/// exact on the tree, a regression on `state` at step `k` otherwise.
pub(crate) fn conditional_expectation(
    backend: &Backend,
    k: usize,
    state: Option<&Process>,
    cfg: &RegressionConfig,
    values: &[f64],
    dim: usize,
) -> Result<Vec<f64>> {
    let projector = match (backend, state) {
        (Backend::Tree(_), _) => Projector::Tree,
        (Backend::MonteCarlo(_), Some(s)) => Projector::regression(k, &s.levels[k], s.dim, cfg)?,
        (Backend::MonteCarlo(_), None) => {
            return Err(Error::Config("monte-carlo conditional expectation needs a regression state".into()))
        }
    };
    projector.apply(backend, k, values, dim)
}

/// Brownian positions as the default regression state (`None` on the tree).
pub(crate) fn brownian_state(backend: &Backend) -> Option<Process> {
    match backend {
        Backend::MonteCarlo(m) => {
            let mut p = Process::zeros(backend.layout(), m.grid.steps, m.d);
            for k in 0..=m.grid.steps {
                p.levels[k] = m.positions(k).to_vec();
            }
            Some(p)
        }
        Backend::Tree(_) => None,
    }
}

/// Solves the mean-field BSDE backwards from `y_terminal` (length `n` or
/// `width_N * n`). On Monte-Carlo backends conditional expectations are
/// regressions on the Brownian position.
pub fn solve_mf_bsde(
    driver: &dyn Driver,
    y_terminal: &[f64],
    backend: &Backend,
    regression: Option<&RegressionConfig>,
) -> Result<BsdeSolution> {
    let state = brownian_state(backend);
    solve_mf_bsde_with_state(driver, y_terminal, backend, regression, state.as_ref())
}

/// As [`solve_mf_bsde`] with an explicit regression state per scenario
/// (ignored on the tree).
pub fn solve_mf_bsde_with_state(
    driver: &dyn Driver,
    y_terminal: &[f64],
    backend: &Backend,
    regression: Option<&RegressionConfig>,
    state: Option<&Process>,
) -> Result<BsdeSolution> {
    let dims = driver.dims();
    if dims.d != backend.d() {
        return Err(Error::Dimension {
            what: "brownian dimension".into(),
            expected: backend.d(),
            got: dims.d,
        });
    }
    let (n, d) = (dims.n, dims.d);
    let nd = n * d;
    let layout = backend.layout();
    let grid = backend.grid();
    let h = grid.h();
    let steps = grid.steps;
    let width_n = layout.width(steps);
    let mut y = Process::zeros(layout, steps, n);
    let mut z = Process::zeros(layout, steps, nd);
    y.levels[steps] = if y_terminal.len() == n {
        y_terminal.repeat(width_n)
    } else if y_terminal.len() == n * width_n {
        y_terminal.to_vec()
    } else {
        return Err(Error::Dimension {
            what: "terminal value".into(),
            expected: n * width_n,
            got: y_terminal.len(),
        });
    };
    if !y.levels[steps].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            step: steps,
            what: "terminal value".into(),
        });
    }
    let default_cfg = RegressionConfig::default();
    let cfg = regression.unwrap_or(&default_cfg);
    cfg.validate()?;
    for k in (0..steps).rev() {
        let next = &y.levels[k + 1];
        // Targets: y[k+1] and y[k+1] dW_i / h for each i.
        let dim = n + nd;
        let mut targets = vec![0.0; next.len() / n * dim];
        par::for_each_chunk_mut(&mut targets, dim, |j, row| {
            let yv = &next[j * n..(j + 1) * n];
            let dw = backend.increment(k, j);
            row[..n].copy_from_slice(yv);
            for i in 0..d {
                for a in 0..n {
                    row[n + i * n + a] = yv[a] * dw[i] / h;
                }
            }
        });
        let proj = conditional_expectation(backend, k, state, cfg, &targets, dim)?;
        let w = layout.width(k);
        let mut ey = vec![0.0; w * n];
        let mut zk = vec![0.0; w * nd];
        for p in 0..w {
            ey[p * n..(p + 1) * n].copy_from_slice(&proj[p * dim..p * dim + n]);
            zk[p * nd..(p + 1) * nd].copy_from_slice(&proj[p * dim + n..(p + 1) * dim]);
        }
        let zbar = level_mean(&zk, nd);
        let yk = implicit_step(driver, k, h, &ey, &zk, &zbar, n, nd)?;
        if !yk.iter().chain(&zk).all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                step: k,
                what: "backward state".into(),
            });
        }
        y.levels[k] = yk;
        z.levels[k] = zk;
    }
    Ok(BsdeSolution { y, z })
}

/// Solves `Y = ey - h g(k, Y, E Y, z, E z)` node-wise by fixed-point
/// iteration, the mean refreshed every sweep.
#[allow(clippy::too_many_arguments)]
fn implicit_step(
    driver: &dyn Driver,
    k: usize,
    h: f64,
    ey: &[f64],
    z: &[f64],
    zbar: &[f64],
    n: usize,
    nd: usize,
) -> Result<Vec<f64>> {
    let sweep = |cur: &[f64], out: &mut [f64]| {
        let ybar = level_mean(cur, n);
        par::for_each_chunk_mut(out, n, |p, row| {
            driver.eval(
                k,
                p,
                &cur[p * n..(p + 1) * n],
                &ybar,
                &z[p * nd..(p + 1) * nd],
                zbar,
                row,
            );
            for (a, r) in row.iter_mut().enumerate() {
                *r = ey[p * n + a] - h * *r;
            }
        });
    };
    let mut cur = ey.to_vec();
    let mut next = vec![0.0; cur.len()];
    sweep(&cur, &mut next);
    if driver.explicit() {
        return Ok(next);
    }
    let mut prev_gap = f64::INFINITY;
    let mut ratio: f64 = 0.0;
    for _ in 0..PICARD_MAX_ITERS {
        let gap = cur
            .iter()
            .zip(&next)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = next.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        std::mem::swap(&mut cur, &mut next);
        if gap <= PICARD_TOL * scale {
            return Ok(cur);
        }
        if prev_gap.is_finite() && prev_gap > 0.0 {
            ratio = ratio.max(gap / prev_gap);
        }
        if !gap.is_finite() {
            break;
        }
        prev_gap = gap;
        sweep(&cur, &mut next);
    }
    Err(Error::StepContraction { step: k, h_lip: ratio })
}

/// Empirical sides of the backward stability estimate:
/// `lhs = E[sup|y_A - y_B|^2 + sum|z_A - z_B|^2 h]`,
/// `rhs_core = E|y_A(T) - y_B(T)|^2 + E(sum|g_A - g_B| h)^2` along solution B.
pub fn bsde_estimate_report(
    sol_a: &BsdeSolution,
    sol_b: &BsdeSolution,
    g_a: &dyn Driver,
    g_b: &dyn Driver,
    backend: &Backend,
) -> Result<EstimateReport> {
    let layout = backend.layout();
    let grid = backend.grid();
    let (h, steps) = (grid.h(), grid.steps);
    let n = g_a.dims().n;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let lhs = expected_path_sup(layout, steps, |k, j| sq(sol_a.y.node(k, j), sol_b.y.node(k, j)))
        + expected_sum(layout, steps, |k, j| sq(sol_a.z.node(k, j), sol_b.z.node(k, j))) * h;
    let term: Vec<f64> = (0..layout.width(steps))
        .map(|j| sq(sol_a.y.node(steps, j), sol_b.y.node(steps, j)))
        .collect();
    let term = level_mean(&term, 1)[0];
    let gaps: Vec<Vec<f64>> = (0..steps)
        .map(|k| {
            let yb = level_mean(&sol_b.y.levels[k], n);
            let zb = level_mean(&sol_b.z.levels[k], sol_b.z.dim);
            par::map_collect(layout.width(k), |j| {
                let (mut ga, mut gb) = (vec![0.0; n], vec![0.0; n]);
                let (yv, zv) = (sol_b.y.node(k, j), sol_b.z.node(k, j));
                g_a.eval(k, j, yv, &yb, zv, &zb, &mut ga);
                g_b.eval(k, j, yv, &yb, zv, &zb, &mut gb);
                sq(&ga, &gb).sqrt()
            })
        })
        .collect();
    let drv = expected_path_sum_sq(layout, steps, |k, j| gaps[k][j] * h);
    EstimateReport::new(lhs, term + drv)
}
