use crate::error::{Error, Result};
use crate::model::ensemble::{level_mean, PerturbationTriple, Process, SolutionEnsemble};
use crate::model::grid::{Layout, TimeGrid};
use crate::par::pairwise_sum;

pub use crate::linalg::operator_norm;

/// `E[sup_k f(k, j)]` along scenario paths, where `f` is evaluated per node.
pub fn expected_path_sup(layout: Layout, steps: usize, f: impl Fn(usize, usize) -> f64) -> f64 {
    let mut cur: Vec<f64> = (0..layout.width(0)).map(|j| f(0, j)).collect();
    for k in 1..=steps {
        cur = (0..layout.width(k))
            .map(|j| cur[layout.parent(j)].max(f(k, j)))
            .collect();
    }
    pairwise_sum(&cur) / cur.len() as f64
}

/// `E[(sum_{k<N} f(k, j))^2]` along scenario paths.
pub fn expected_path_sum_sq(layout: Layout, steps: usize, f: impl Fn(usize, usize) -> f64) -> f64 {
    let mut cur = vec![0.0; layout.width(0)];
    for k in 0..steps {
        let next_w = layout.width(k + 1);
        let here: Vec<f64> = (0..layout.width(k)).map(|j| cur[j] + f(k, j)).collect();
        cur = (0..next_w).map(|j| here[layout.parent(j)]).collect();
    }
    let sq: Vec<f64> = cur.iter().map(|v| v * v).collect();
    pairwise_sum(&sq) / sq.len() as f64
}

/// `E[sum_{k<N} f(k, j)]`.
pub fn expected_sum(layout: Layout, steps: usize, f: impl Fn(usize, usize) -> f64) -> f64 {
    (0..steps)
        .map(|k| {
            let v: Vec<f64> = (0..layout.width(k)).map(|j| f(k, j)).collect();
            pairwise_sum(&v) / v.len() as f64
        })
        .sum()
}

fn sq_node(p: &Process, k: usize, j: usize) -> f64 {
    p.node(k, j).iter().map(|v| v * v).sum()
}

/// Squared components of the M^2 norm: `(E sup|x|^2, E sup|y|^2, E sum |z|^2 h)`.
pub fn m2_parts(theta: &SolutionEnsemble) -> (f64, f64, f64) {
    let (l, n, h) = (theta.layout, theta.grid.steps, theta.grid.h());
    let sx = expected_path_sup(l, n, |k, j| sq_node(&theta.x, k, j));
    let sy = expected_path_sup(l, n, |k, j| sq_node(&theta.y, k, j));
    let sz = expected_sum(l, n, |k, j| sq_node(&theta.z, k, j)) * h;
    (sx, sy, sz)
}

/// `sqrt(E[sup|x|^2] + E[sup|y|^2] + E[sum |z|^2 h])`.
pub fn m2_norm(theta: &SolutionEnsemble) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::NonFinite {
            step: first_bad_step(theta),
            what: "solution ensemble".into(),
        });
    }
    let (a, b, c) = m2_parts(theta);
    Ok((a + b + c).sqrt())
}

/// M^2 distance between two ensembles on the same layout.
pub fn m2_gap(a: &SolutionEnsemble, b: &SolutionEnsemble) -> Result<f64> {
    m2_norm(&a.sub(b))
}

fn first_bad_step(theta: &SolutionEnsemble) -> usize {
    (0..=theta.grid.steps)
        .find(|&k| {
            [&theta.x, &theta.y, &theta.z]
                .iter()
                .any(|p| p.levels[k].iter().any(|v| !v.is_finite()))
        })
        .unwrap_or(0)
}

/// Squared components of the H norm:
/// `(|xi|^2, E|eta|^2, E(sum|phi|h)^2, E(sum|psi|h)^2, E sum|gamma|^2 h)`.
pub fn h_parts(p: &PerturbationTriple, layout: Layout, grid: TimeGrid, n: usize) -> [f64; 5] {
    let steps = grid.steps;
    let h = grid.h();
    let xi: f64 = p.xi.iter().map(|v| v * v).sum();
    let eta_sq: Vec<f64> = p.eta.chunks(n).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let eta = pairwise_sum(&eta_sq) / eta_sq.len().max(1) as f64;
    let block = |k: usize, j: usize, lo: usize, hi: usize| -> f64 {
        p.rho.node(k, j)[lo..hi].iter().map(|v| v * v).sum::<f64>()
    };
    let t = p.rho.dim;
    let phi = expected_path_sum_sq(layout, steps, |k, j| block(k, j, 0, n).sqrt() * h);
    let psi = expected_path_sum_sq(layout, steps, |k, j| block(k, j, n, 2 * n).sqrt() * h);
    let gam = expected_sum(layout, steps, |k, j| block(k, j, 2 * n, t)) * h;
    [xi, eta, phi, psi, gam]
}

/// `sqrt(|xi|^2 + E|eta|^2 + E(sum|phi|h)^2 + E(sum|psi|h)^2 + E sum|gamma|^2 h)`.
pub fn h_norm(p: &PerturbationTriple, layout: Layout, grid: TimeGrid) -> Result<f64> {
    let n = p.xi.len();
    let finite = p.xi.iter().chain(&p.eta).all(|v| v.is_finite()) && p.rho.is_finite();
    if !finite {
        return Err(Error::NonFinite {
            step: 0,
            what: "perturbation".into(),
        });
    }
    Ok(h_parts(p, layout, grid, n).iter().sum::<f64>().sqrt())
}

/// Splits per-scenario values into `(values - mean, mean)`.
pub fn decompose(values: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mean = level_mean(values, dim);
    let first = values
        .chunks(dim)
        .flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    (first, mean)
}
