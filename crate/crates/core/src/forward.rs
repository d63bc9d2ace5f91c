//! Mean-field SDE on a scenario backend by explicit Euler steps, with the
//! mean-field argument taken as the ensemble mean at the left endpoint.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    level_mean, CoefficientSet, Dimensions, Instant, Layout, Process, SolutionEnsemble, TimeGrid,
};
use crate::model::norms::{expected_path_sum_sq, expected_path_sup, expected_sum};
use crate::noise::Backend;
use crate::par;

/// Drift and diffusion of a forward equation. `diffusion` holds the
/// columns `sigma_1..sigma_d`, each of length `n`, back to back.
pub trait Dynamics: Sync {
    fn dims(&self) -> Dimensions;

    fn eval(
        &self,
        k: usize,
        node: usize,
        x: &[f64],
        xbar: &[f64],
        drift: &mut [f64],
        diffusion: &mut [f64],
    );
}

/// Dynamics from a closure `f(at, x, x', drift, diffusion)`.
pub struct FnDynamics<F> {
    dims: Dimensions,
    grid: TimeGrid,
    f: F,
}

impl<F> FnDynamics<F>
where
    F: Fn(Instant, &[f64], &[f64], &mut [f64], &mut [f64]) + Sync,
{
    pub fn new(dims: Dimensions, grid: TimeGrid, f: F) -> Self {
        FnDynamics { dims, grid, f }
    }
}

impl<F> Dynamics for FnDynamics<F>
where
    F: Fn(Instant, &[f64], &[f64], &mut [f64], &mut [f64]) + Sync,
{
    fn dims(&self) -> Dimensions {
        self.dims
    }

    fn eval(&self, k: usize, _: usize, x: &[f64], xb: &[f64], drift: &mut [f64], diff: &mut [f64]) {
        (self.f)(self.grid.at(k), x, xb, drift, diff)
    }
}

/// The `(b, sigma)` rows of a coefficient set with `(y, z)` frozen to a given
/// ensemble (or zero when absent).
pub struct CoefficientDynamics<'a> {
    pub coeffs: &'a CoefficientSet,
    pub grid: TimeGrid,
    pub frozen: Option<&'a SolutionEnsemble>,
}

impl Dynamics for CoefficientDynamics<'_> {
    fn dims(&self) -> Dimensions {
        self.coeffs.dims()
    }

    fn eval(&self, k: usize, node: usize, x: &[f64], xb: &[f64], drift: &mut [f64], diff: &mut [f64]) {
        let dims = self.coeffs.dims();
        let n = dims.n;
        let t = dims.theta();
        let mut th = vec![0.0; t];
        let mut tb = vec![0.0; t];
        if let Some(f) = self.frozen {
            f.theta(k, node, &mut th);
            f.theta_bar(k, &mut tb);
        }
        th[..n].copy_from_slice(x);
        tb[..n].copy_from_slice(xb);
        let mut out = vec![0.0; t];
        self.coeffs.gamma(self.grid.at(k), &th, &tb, &mut out);
        drift.copy_from_slice(&out[n..2 * n]);
        diff.copy_from_slice(&out[2 * n..]);
    }
}

/// Broadcasts an initial value of length `n` (or `width * n`) over the
/// scenarios at step 0.
pub(crate) fn initial_level(x_init: &[f64], n: usize, width: usize) -> Result<Vec<f64>> {
    if x_init.len() == n {
        Ok(x_init.repeat(width))
    } else if x_init.len() == n * width {
        Ok(x_init.to_vec())
    } else {
        Err(Error::Dimension {
            what: "initial value".into(),
            expected: n,
            got: x_init.len(),
        })
    }
}

/// Euler scheme
/// `x[k+1] = x[k] + b(s_k, x[k], E x[k]) h + sum_i sigma_i(s_k, x[k], E x[k]) dW_i`.
pub fn solve_mf_sde(dynamics: &dyn Dynamics, x_init: &[f64], backend: &Backend) -> Result<Process> {
    let dims = dynamics.dims();
    if dims.d != backend.d() {
        return Err(Error::Dimension {
            what: "brownian dimension".into(),
            expected: backend.d(),
            got: dims.d,
        });
    }
    let (n, d) = (dims.n, dims.d);
    let layout = backend.layout();
    let grid = backend.grid();
    let h = grid.h();
    let mut x = Process::zeros(layout, grid.steps, n);
    x.levels[0] = initial_level(x_init, n, layout.width(0))?;
    if !x.levels[0].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            what: "initial value".into(),
        });
    }
    let stride = n * (1 + d);
    for k in 0..grid.steps {
        let cur = &x.levels[k];
        let xbar = level_mean(cur, n);
        let mut coef = vec![0.0; layout.width(k) * stride];
        par::for_each_chunk_mut(&mut coef, stride, |j, row| {
            let (dr, df) = row.split_at_mut(n);
            dynamics.eval(k, j, &cur[j * n..(j + 1) * n], &xbar, dr, df);
        });
        let mut next = vec![0.0; layout.width(k + 1) * n];
        par::for_each_chunk_mut(&mut next, n, |j, row| {
            let p = layout.parent(j);
            let c = &coef[p * stride..(p + 1) * stride];
            let dw = backend.increment(k, j);
            for a in 0..n {
                let mut v = cur[p * n + a] + c[a] * h;
                for i in 0..d {
                    v += c[n + i * n + a] * dw[i];
                }
                row[a] = v;
            }
        });
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                step: k + 1,
                what: "forward state".into(),
            });
        }
        x.levels[k + 1] = next;
    }
    Ok(x)
}

/// Both sides of a stability estimate; `ratio = lhs / rhs_core` when defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub lhs: f64,
    pub rhs_core: f64,
    pub ratio: Option<f64>,
}

const TINY: f64 = 1e-12;

impl EstimateReport {
    pub(crate) fn new(lhs: f64, rhs_core: f64) -> Result<Self> {
        if rhs_core <= TINY * TINY {
            if lhs > TINY {
                return Err(Error::Consistency {
                    residual: lhs,
                    limit: TINY,
                });
            }
            return Ok(EstimateReport {
                lhs,
                rhs_core,
                ratio: None,
            });
        }
        Ok(EstimateReport {
            lhs,
            rhs_core,
            ratio: Some(lhs / rhs_core),
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Evaluates `(b, sigma)` of both dynamics along `x_b` and returns the
/// per-node squared gaps `(|db|, |dsigma|^2)` for every step below `N`.
fn coefficient_gaps(
    dyn_a: &dyn Dynamics,
    dyn_b: &dyn Dynamics,
    x_b: &Process,
    layout: Layout,
    steps: usize,
) -> Vec<Vec<(f64, f64)>> {
    let dims = dyn_a.dims();
    let (n, nd) = (dims.n, dims.z());
    (0..steps)
        .map(|k| {
            let xbar = level_mean(&x_b.levels[k], n);
            par::map_collect(layout.width(k), |j| {
                let x = x_b.node(k, j);
                let (mut da, mut sa) = (vec![0.0; n], vec![0.0; nd]);
                let (mut db, mut sb) = (vec![0.0; n], vec![0.0; nd]);
                dyn_a.eval(k, j, x, &xbar, &mut da, &mut sa);
                dyn_b.eval(k, j, x, &xbar, &mut db, &mut sb);
                (sq_dist(&da, &db).sqrt(), sq_dist(&sa, &sb))
            })
        })
        .collect()
}

/// Empirical sides of the forward stability estimate: `lhs = E sup|x_A - x_B|^2`
/// and `rhs_core = E|x_A(t0) - x_B(t0)|^2 + E(sum|db| h)^2 + E sum|dsigma|^2 h`,
/// coefficient gaps evaluated along solution B.
pub fn sde_estimate_report(
    sol_a: &Process,
    sol_b: &Process,
    dyn_a: &dyn Dynamics,
    dyn_b: &dyn Dynamics,
    backend: &Backend,
) -> Result<EstimateReport> {
    let layout = backend.layout();
    let grid = backend.grid();
    let h = grid.h();
    let steps = grid.steps;
    let lhs = expected_path_sup(layout, steps, |k, j| sq_dist(sol_a.node(k, j), sol_b.node(k, j)));
    let init: Vec<f64> = (0..layout.width(0))
        .map(|j| sq_dist(sol_a.node(0, j), sol_b.node(0, j)))
        .collect();
    let init = level_mean(&init, 1)[0];
    let gaps = coefficient_gaps(dyn_a, dyn_b, sol_b, layout, steps);
    let drift = expected_path_sum_sq(layout, steps, |k, j| gaps[k][j].0 * h);
    let diff = expected_sum(layout, steps, |k, j| gaps[k][j].1) * h;
    EstimateReport::new(lhs, init + drift + diff)
}

/// Writes `step,scenario,<name>1..` rows for the named processes, which must
/// share a layout. Rows beyond a process's last level are written as zeros.
pub fn write_paths_csv<W: Write>(mut w: W, columns: &[(&str, &Process)]) -> std::io::Result<()> {
    let mut header = String::from("step,scenario");
    for (name, p) in columns {
        for a in 0..p.dim {
            header.push_str(&format!(",{name}{}", a + 1));
        }
    }
    writeln!(w, "{header}")?;
    let Some((_, first)) = columns.first() else {
        return Ok(());
    };
    let mut line = String::new();
    for k in 0..first.levels.len() {
        for j in 0..first.width(k) {
            line.clear();
            line.push_str(&format!("{k},{j}"));
            for (_, p) in columns {
                for a in 0..p.dim {
                    let v = p.levels.get(k).map_or(0.0, |l| l[j * p.dim + a]);
                    line.push_str(&format!(",{v:e}"));
                }
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}
