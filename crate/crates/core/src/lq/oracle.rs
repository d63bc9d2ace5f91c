//! Direct minimization of the discrete costs on the tree.
//!
//! On a tree the discrete cost is an exact finite-dimensional quadratic in
//! the stacked controls. Its gradient comes from one forward pass of the
//! state scheme and one reverse pass of the exact discrete adjoint, and
//! conjugate gradient then minimizes it. Nothing here goes through the
//! Hamiltonian system, so the result is an independent check of it.
//!
//! Inner products weight each node by its probability (and `u` by the step
//! size), which keeps the problem conditioned independently of the tree
//! size. Adjoint variables are stored as densities: the partial derivative
//! times the number of nodes on the level.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lq::{
    invert, level_quadratic, mtv_acc, mv_acc, BackwardLQProblem, ControlBLQ, ControlFLQ,
    ForwardLQProblem,
};
use crate::model::{level_mean, Layout, Process, TimeGrid};
use crate::noise::Backend;
use crate::par;

/// Largest number of decision variables the oracle accepts.
pub const ORACLE_MAX_VARIABLES: usize = 50_000;

/// Relative reduction of the gradient norm at which CG stops.
pub const ORACLE_TOL: f64 = 1e-11;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult<C> {
    pub control: C,
    /// Discrete cost at `control`.
    pub cost: f64,
    pub iterations: usize,
    /// Norm of the gradient at `control` in the weighted metric.
    pub gradient_norm: f64,
}

/// A convex quadratic in a weighted inner product.
trait Quadratic: Sync {
    /// Metric weight per coordinate.
    fn weights(&self) -> &[f64];
    /// Gradient in the metric at `v`; `homogeneous` drops every affine term.
    fn gradient(&self, v: &[f64], homogeneous: bool) -> Vec<f64>;
}

fn wdot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let terms: Vec<f64> = w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).collect();
    par::pairwise_sum(&terms)
}

/// Conjugate gradient from zero.
fn minimize(q: &dyn Quadratic) -> Result<(Vec<f64>, usize, f64)> {
    let w = q.weights();
    let dim = w.len();
    let mut v = vec![0.0; dim];
    let mut r: Vec<f64> = q.gradient(&v, false).iter().map(|g| -g).collect();
    let r0 = wdot(w, &r, &r).sqrt();
    let mut rr = r0 * r0;
    let mut p = r.clone();
    let cap = 10 * dim.max(1);
    let mut iters = 0;
    while rr.sqrt() > ORACLE_TOL * r0 {
        if iters == cap {
            return Err(Error::Conditioning {
                iters,
                residual: rr.sqrt() / r0,
            });
        }
        let ap = q.gradient(&p, true);
        let curv = wdot(w, &p, &ap);
        if !(curv > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "oracle quadratic has curvature {curv:.3e} along a search direction"
            )));
        }
        let alpha = rr / curv;
        v.iter_mut().zip(&p).for_each(|(v, p)| *v += alpha * p);
        r.iter_mut().zip(&ap).for_each(|(r, a)| *r -= alpha * a);
        let next = wdot(w, &r, &r);
        let beta = next / rr;
        rr = next;
        p.iter_mut().zip(&r).for_each(|(p, r)| *p = r + beta * *p);
        iters += 1;
    }
    let g = q.gradient(&v, false);
    Ok((v, iters, wdot(w, &g, &g).sqrt()))
}

struct TreeShape {
    layout: Layout,
    grid: TimeGrid,
    fanout: usize,
    /// Increment per child slot, `fanout x d`.
    table: Vec<f64>,
    d: usize,
}

fn tree_shape(backend: &Backend, variables: usize) -> Result<TreeShape> {
    if !backend.is_tree() {
        return Err(Error::Config("the oracle needs the tree backend".into()));
    }
    if variables > ORACLE_MAX_VARIABLES {
        return Err(Error::Config(format!(
            "{variables} decision variables exceed the oracle limit of {ORACLE_MAX_VARIABLES}"
        )));
    }
    let layout = backend.layout();
    let fanout = layout.fanout();
    let d = backend.d();
    let table = (0..fanout).flat_map(|c| backend.increment(0, c).to_vec()).collect();
    Ok(TreeShape {
        layout,
        grid: backend.grid(),
        fanout,
        table,
        d,
    })
}

impl TreeShape {
    fn dw(&self, child: usize) -> &[f64] {
        let c = child % self.fanout;
        &self.table[c * self.d..(c + 1) * self.d]
    }

    /// Metric weights `h / W_k` for `dim` entries per node, steps `0..N`.
    fn process_weights(&self, dim: usize, out: &mut Vec<f64>) {
        let h = self.grid.h();
        for k in 0..self.grid.steps {
            let w = self.layout.width(k);
            out.extend(std::iter::repeat(h / w as f64).take(w * dim));
        }
    }

    /// Splits a flat vector of per-node values into a process with a zero
    /// row at step `N`.
    fn unpack(&self, flat: &[f64], dim: usize) -> Process {
        let mut p = Process::zeros(self.layout, self.grid.steps, dim);
        let mut at = 0;
        for k in 0..self.grid.steps {
            let len = p.levels[k].len();
            p.levels[k].copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        p
    }
}

fn add(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
}

fn scale(a: &mut [f64], s: f64) {
    a.iter_mut().for_each(|a| *a *= s);
}

// ---------------------------------------------------------------------------
// forward problem

struct Flq<'a> {
    prob: &'a ForwardLQProblem,
    tree: TreeShape,
    weights: Vec<f64>,
}

impl Flq<'_> {
    fn state(&self, xi: &[f64], u: &Process, homogeneous: bool) -> Process {
        let p = self.prob;
        let (n, nd) = (p.dims.n, p.dims.z());
        let t = &self.tree;
        let h = t.grid.h();
        let mut x = Process::zeros(t.layout, t.grid.steps, n);
        let x0 = x.node_mut(0, 0);
        mv_acc(&p.h, xi, x0);
        if !homogeneous {
            add(x0, p.x_t.as_slice());
        }
        for k in 0..t.grid.steps {
            let (cur, ubar) = (&x.levels[k], level_mean(&u.levels[k], p.m));
            let xbar = level_mean(cur, n);
            // per-parent drift and diffusion
            let stride = n + nd;
            let mut coef = vec![0.0; t.layout.width(k) * stride];
            par::for_each_chunk_mut(&mut coef, stride, |j, row| {
                let (dr, df) = row.split_at_mut(n);
                let (xj, uj) = (&cur[j * n..(j + 1) * n], u.node(k, j));
                if !homogeneous {
                    dr.copy_from_slice(p.alpha.at(k).as_slice());
                    df.copy_from_slice(p.beta.at(k).as_slice());
                }
                mv_acc(p.a.at(k), xj, dr);
                mv_acc(p.a_bar.at(k), &xbar, dr);
                mv_acc(p.b.at(k), uj, dr);
                mv_acc(p.b_bar.at(k), &ubar, dr);
                mv_acc(p.c.at(k), xj, df);
                mv_acc(p.c_bar.at(k), &xbar, df);
                mv_acc(p.d.at(k), uj, df);
                mv_acc(p.d_bar.at(k), &ubar, df);
            });
            let mut next = vec![0.0; t.layout.width(k + 1) * n];
            par::for_each_chunk_mut(&mut next, n, |c, row| {
                let j = c / t.fanout;
                let co = &coef[j * stride..(j + 1) * stride];
                let dw = t.dw(c);
                for a in 0..n {
                    let mut v = cur[j * n + a] + h * co[a];
                    for (i, w) in dw.iter().enumerate() {
                        v += co[n + i * n + a] * w;
                    }
                    row[a] = v;
                }
            });
            x.levels[k + 1] = next;
        }
        x
    }

    fn cost(&self, xi: &[f64], u: &Process, x: &Process) -> f64 {
        let p = self.prob;
        let c = &p.cost;
        let (n, m, steps) = (p.dims.n, p.m, self.tree.grid.steps);
        let mut mxi = vec![0.0; n];
        mv_acc(&c.m, xi, &mut mxi);
        let running: f64 = (0..steps)
            .map(|k| {
                level_quadratic(&x.levels[k], n, c.q.at(k), c.q_bar.at(k))
                    + level_quadratic(&u.levels[k], m, c.r.at(k), c.r_bar.at(k))
            })
            .sum();
        0.5 * (crate::linalg::dot(&mxi, xi)
            + level_quadratic(&x.levels[steps], n, &c.g, &c.g_bar)
            + self.tree.grid.h() * running)
    }
}

impl Quadratic for Flq<'_> {
    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn gradient(&self, v: &[f64], homogeneous: bool) -> Vec<f64> {
        let p = self.prob;
        let (n, nd, m) = (p.dims.n, p.dims.z(), p.m);
        let t = &self.tree;
        let (h, steps) = (t.grid.h(), t.grid.steps);
        let xi = &v[..n];
        let u = t.unpack(&v[n..], m);
        let x = self.state(xi, &u, homogeneous);

        let xbar_n = level_mean(&x.levels[steps], n);
        let mut xs = vec![0.0; x.levels[steps].len()];
        par::for_each_chunk_mut(&mut xs, n, |j, row| {
            mv_acc(&p.cost.g, x.node(steps, j), row);
            mv_acc(&p.cost.g_bar, &xbar_n, row);
        });
        let mut us = Process::zeros(t.layout, steps, m);
        for k in (0..steps).rev() {
            let w = t.layout.width(k);
            // a = E_k[x*], q = E_k[x* dW] per parent
            let stride = n + nd;
            let mut aq = vec![0.0; w * stride];
            par::for_each_chunk_mut(&mut aq, stride, |j, row| {
                for c in 0..t.fanout {
                    let child = j * t.fanout + c;
                    let xc = &xs[child * n..(child + 1) * n];
                    for a in 0..n {
                        row[a] += xc[a];
                    }
                    for (i, dw) in t.dw(child).iter().enumerate() {
                        for a in 0..n {
                            row[n + i * n + a] += xc[a] * dw;
                        }
                    }
                }
                scale(row, 1.0 / t.fanout as f64);
            });
            let mean = level_mean(&aq, stride);
            let (ea, eq) = mean.split_at(n);
            let (xbar, ubar) = (level_mean(&x.levels[k], n), level_mean(&u.levels[k], m));
            let mut common_x = vec![0.0; n];
            mtv_acc(&(h * p.a_bar.at(k)), ea, &mut common_x);
            mtv_acc(p.c_bar.at(k), eq, &mut common_x);
            mv_acc(&(h * p.cost.q_bar.at(k)), &xbar, &mut common_x);
            let mut common_u = vec![0.0; m];
            mtv_acc(&(h * p.b_bar.at(k)), ea, &mut common_u);
            mtv_acc(p.d_bar.at(k), eq, &mut common_u);
            mv_acc(&(h * p.cost.r_bar.at(k)), &ubar, &mut common_u);
            let ha = h * p.a.at(k);
            let hb = h * p.b.at(k);
            let hq = h * p.cost.q.at(k);
            let hr = h * p.cost.r.at(k);
            let mut next = vec![0.0; w * n];
            par::for_each_chunk_mut(&mut next, n, |j, row| {
                let (a, q) = aq[j * stride..(j + 1) * stride].split_at(n);
                row.copy_from_slice(&common_x);
                add(row, a);
                mtv_acc(&ha, a, row);
                mtv_acc(p.c.at(k), q, row);
                mv_acc(&hq, x.node(k, j), row);
            });
            par::for_each_chunk_mut(&mut us.levels[k], m, |j, row| {
                let (a, q) = aq[j * stride..(j + 1) * stride].split_at(n);
                row.copy_from_slice(&common_u);
                mtv_acc(&hb, a, row);
                mtv_acc(p.d.at(k), q, row);
                mv_acc(&hr, u.node(k, j), row);
            });
            xs = next;
        }

        let mut g = Vec::with_capacity(v.len());
        let mut gxi = vec![0.0; n];
        mv_acc(&p.cost.m, xi, &mut gxi);
        mtv_acc(&p.h, &xs, &mut gxi);
        g.extend(gxi);
        for k in 0..steps {
            g.extend(us.levels[k].iter().map(|v| v / h));
        }
        g
    }
}

/// Minimizes the discrete forward cost over `(xi, u)` on the tree.
pub fn oracle_flq(prob: &ForwardLQProblem, backend: &Backend) -> Result<OracleResult<ControlFLQ>> {
    prob.check_grid(backend.grid())?;
    invert("M", &prob.cost.m)?;
    let (n, m) = (prob.dims.n, prob.m);
    let steps = backend.grid().steps;
    let nodes: usize = (0..steps).map(|k| backend.width(k)).sum();
    let tree = tree_shape(backend, n + m * nodes)?;
    let mut weights = vec![1.0; n];
    tree.process_weights(m, &mut weights);
    let q = Flq { prob, tree, weights };
    let (v, iterations, gradient_norm) = minimize(&q)?;
    let xi = v[..n].to_vec();
    let u = q.tree.unpack(&v[n..], m);
    let x = q.state(&xi, &u, false);
    let cost = q.cost(&xi, &u, &x);
    Ok(OracleResult {
        control: ControlFLQ { xi, u },
        cost,
        iterations,
        gradient_norm,
    })
}

// ---------------------------------------------------------------------------
// backward problem

struct Blq<'a> {
    prob: &'a BackwardLQProblem,
    tree: TreeShape,
    weights: Vec<f64>,
    y_t: Vec<f64>,
    /// `(I + h A)^-1` and `(I + h (A + A'))^-1` per step.
    solves: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

struct BlqState {
    y: Process,
    z: Process,
}

impl Blq<'_> {
    fn state(&self, eta: &[f64], u: &Process, homogeneous: bool) -> BlqState {
        let p = self.prob;
        let (n, nd, m) = (p.dims.n, p.dims.z(), p.m);
        let t = &self.tree;
        let (h, steps) = (t.grid.h(), t.grid.steps);
        let mut y = Process::zeros(t.layout, steps, n);
        let mut z = Process::zeros(t.layout, steps, nd);
        let eta_bar = level_mean(eta, n);
        par::for_each_chunk_mut(&mut y.levels[steps], n, |j, row| {
            mv_acc(&p.p, &eta[j * n..(j + 1) * n], row);
            mv_acc(&p.p_bar, &eta_bar, row);
            if !homogeneous {
                add(row, &self.y_t[j * n..(j + 1) * n]);
            }
        });
        for k in (0..steps).rev() {
            let w = t.layout.width(k);
            let next = &y.levels[k + 1];
            let stride = n + nd;
            let mut ez = vec![0.0; w * stride];
            par::for_each_chunk_mut(&mut ez, stride, |j, row| {
                for c in 0..t.fanout {
                    let child = j * t.fanout + c;
                    let yc = &next[child * n..(child + 1) * n];
                    add(&mut row[..n], yc);
                    for (i, dw) in t.dw(child).iter().enumerate() {
                        for a in 0..n {
                            row[n + i * n + a] += yc[a] * dw / h;
                        }
                    }
                }
                scale(row, 1.0 / t.fanout as f64);
            });
            for j in 0..w {
                z.node_mut(k, j).copy_from_slice(&ez[j * stride + n..(j + 1) * stride]);
            }
            let zbar = level_mean(&z.levels[k], nd);
            let ubar = level_mean(&u.levels[k], m);
            let mut common = vec![0.0; n];
            if !homogeneous {
                common.copy_from_slice(p.alpha.at(k).as_slice());
            }
            mv_acc(p.b_bar.at(k), &zbar, &mut common);
            mv_acc(p.c_bar.at(k), &ubar, &mut common);
            let mut s = vec![0.0; w * n];
            par::for_each_chunk_mut(&mut s, n, |j, row| {
                let mut g = common.clone();
                mv_acc(p.b.at(k), z.node(k, j), &mut g);
                mv_acc(p.c.at(k), u.node(k, j), &mut g);
                for a in 0..n {
                    row[a] = ez[j * stride + a] - h * g[a];
                }
            });
            let (t1, t2) = &self.solves[k];
            let sbar = level_mean(&s, n);
            let mut mean_part = vec![0.0; n];
            mv_acc(t2, &sbar, &mut mean_part);
            par::for_each_chunk_mut(&mut y.levels[k], n, |j, row| {
                let dev: Vec<f64> = s[j * n..(j + 1) * n].iter().zip(&sbar).map(|(a, b)| a - b).collect();
                row.copy_from_slice(&mean_part);
                mv_acc(t1, &dev, row);
            });
        }
        BlqState { y, z }
    }

    fn cost(&self, eta: &[f64], u: &Process, st: &BlqState) -> f64 {
        let p = self.prob;
        let c = &p.cost;
        let (n, nd, m, steps) = (p.dims.n, p.dims.z(), p.m, self.tree.grid.steps);
        let zero = DMatrix::zeros(n, n);
        let running: f64 = (0..steps)
            .map(|k| {
                level_quadratic(&st.y.levels[k], n, c.q.at(k), c.q_bar.at(k))
                    + level_quadratic(&st.z.levels[k], nd, c.l.at(k), c.l_bar.at(k))
                    + level_quadratic(&u.levels[k], m, c.r.at(k), c.r_bar.at(k))
            })
            .sum();
        0.5 * (level_quadratic(&st.y.levels[0], n, &c.m, &zero)
            + level_quadratic(eta, n, &c.g, &c.g_bar)
            + self.tree.grid.h() * running)
    }

    /// `h (Q y + Q' E y)` at every node of step `k`, added into `out`.
    fn running_y(&self, k: usize, y: &[f64], out: &mut [f64]) {
        let p = self.prob;
        let n = p.dims.n;
        let h = self.tree.grid.h();
        let ybar = level_mean(y, n);
        let (hq, hqb) = (h * p.cost.q.at(k), h * p.cost.q_bar.at(k));
        let mut common = vec![0.0; n];
        mv_acc(&hqb, &ybar, &mut common);
        par::for_each_chunk_mut(out, n, |j, row| {
            add(row, &common);
            mv_acc(&hq, &y[j * n..(j + 1) * n], row);
        });
    }
}

impl Quadratic for Blq<'_> {
    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn gradient(&self, v: &[f64], homogeneous: bool) -> Vec<f64> {
        let p = self.prob;
        let (n, nd, m) = (p.dims.n, p.dims.z(), p.m);
        let t = &self.tree;
        let (h, steps) = (t.grid.h(), t.grid.steps);
        let n_eta = t.layout.width(steps) * n;
        let eta = &v[..n_eta];
        let u = t.unpack(&v[n_eta..], m);
        let st = self.state(eta, &u, homogeneous);

        // y* at step 0
        let mut ys = vec![0.0; n];
        mv_acc(&p.cost.m, st.y.node(0, 0), &mut ys);
        self.running_y(0, &st.y.levels[0], &mut ys);
        let mut us = Process::zeros(t.layout, steps, m);
        for k in 0..steps {
            let w = t.layout.width(k);
            let (t1, t2) = &self.solves[k];
            let ys_bar = level_mean(&ys, n);
            let mut s_mean = vec![0.0; n];
            mtv_acc(t2, &ys_bar, &mut s_mean);
            let mut ss = vec![0.0; w * n];
            par::for_each_chunk_mut(&mut ss, n, |j, row| {
                let dev: Vec<f64> = ys[j * n..(j + 1) * n].iter().zip(&ys_bar).map(|(a, b)| a - b).collect();
                row.copy_from_slice(&s_mean);
                mtv_acc(t1, &dev, row);
            });
            let es = level_mean(&ss, n);
            let (zbar, ubar) = (level_mean(&st.z.levels[k], nd), level_mean(&u.levels[k], m));
            let mut common_z = vec![0.0; nd];
            mv_acc(p.cost.l_bar.at(k), &zbar, &mut common_z);
            mtv_acc(&-p.b_bar.at(k), &es, &mut common_z);
            let mut common_u = vec![0.0; m];
            mv_acc(p.cost.r_bar.at(k), &ubar, &mut common_u);
            mtv_acc(&-p.c_bar.at(k), &es, &mut common_u);
            let mut zs = vec![0.0; w * nd];
            par::for_each_chunk_mut(&mut zs, nd, |j, row| {
                let s = &ss[j * n..(j + 1) * n];
                row.copy_from_slice(&common_z);
                mv_acc(p.cost.l.at(k), st.z.node(k, j), row);
                mtv_acc(&-p.b.at(k), s, row);
                scale(row, h);
            });
            par::for_each_chunk_mut(&mut us.levels[k], m, |j, row| {
                let s = &ss[j * n..(j + 1) * n];
                row.copy_from_slice(&common_u);
                mv_acc(p.cost.r.at(k), u.node(k, j), row);
                mtv_acc(&-p.c.at(k), s, row);
                scale(row, h);
            });
            let mut next = vec![0.0; t.layout.width(k + 1) * n];
            par::for_each_chunk_mut(&mut next, n, |c, row| {
                let j = c / t.fanout;
                row.copy_from_slice(&ss[j * n..(j + 1) * n]);
                let zj = &zs[j * nd..(j + 1) * nd];
                for (i, dw) in t.dw(c).iter().enumerate() {
                    for a in 0..n {
                        row[a] += zj[i * n + a] * dw / h;
                    }
                }
            });
            if k + 1 < steps {
                self.running_y(k + 1, &st.y.levels[k + 1], &mut next);
            }
            ys = next;
        }

        let eta_bar = level_mean(eta, n);
        let ys_bar = level_mean(&ys, n);
        let mut common = vec![0.0; n];
        mv_acc(&p.cost.g_bar, &eta_bar, &mut common);
        mtv_acc(&p.p_bar, &ys_bar, &mut common);
        let mut g = vec![0.0; n_eta];
        par::for_each_chunk_mut(&mut g, n, |j, row| {
            row.copy_from_slice(&common);
            mv_acc(&p.cost.g, &eta[j * n..(j + 1) * n], row);
            mtv_acc(&p.p, &ys[j * n..(j + 1) * n], row);
        });
        for k in 0..steps {
            g.extend(us.levels[k].iter().map(|v| v / h));
        }
        g
    }
}

/// Minimizes the discrete backward cost over `(eta, u)` on the tree.
pub fn oracle_blq(prob: &BackwardLQProblem, backend: &Backend) -> Result<OracleResult<ControlBLQ>> {
    prob.check_grid(backend.grid())?;
    let (n, m) = (prob.dims.n, prob.m);
    let grid = backend.grid();
    let steps = grid.steps;
    let leaves = backend.width(steps);
    let nodes: usize = (0..steps).map(|k| backend.width(k)).sum();
    let tree = tree_shape(backend, n * leaves + m * nodes)?;
    let h = grid.h();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut solves = Vec::with_capacity(steps);
    for k in 0..steps {
        let a = prob.a.at(k);
        solves.push((
            invert("I+hA", &(&eye + h * a))?,
            invert("I+h(A+A_bar)", &(&eye + h * (a + prob.a_bar.at(k))))?,
        ));
    }
    let mut weights = vec![1.0 / leaves as f64; n * leaves];
    tree.process_weights(m, &mut weights);
    let q = Blq {
        prob,
        tree,
        weights,
        y_t: prob.y_t.realize(backend),
        solves,
    };
    let (v, iterations, gradient_norm) = minimize(&q)?;
    let eta = v[..n * leaves].to_vec();
    let u = q.tree.unpack(&v[n * leaves..], m);
    let st = q.state(&eta, &u, false);
    let cost = q.cost(&eta, &u, &st);
    Ok(OracleResult {
        control: ControlBLQ { eta, u },
        cost,
        iterations,
        gradient_norm,
    })
}
