use crate::model::grid::{Dimensions, Layout, TimeGrid};
use crate::par::pairwise_rows;

/// Values of an adapted process: `levels[k]` is row-major, one row of `dim`
/// entries per scenario at step `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Process {
    pub dim: usize,
    pub levels: Vec<Vec<f64>>,
}

impl Process {
    pub fn zeros(layout: Layout, steps: usize, dim: usize) -> Self {
        Process {
            dim,
            levels: (0..=steps).map(|k| vec![0.0; layout.width(k) * dim]).collect(),
        }
    }

    #[inline]
    pub fn node(&self, k: usize, j: usize) -> &[f64] {
        &self.levels[k][j * self.dim..(j + 1) * self.dim]
    }

    #[inline]
    pub fn node_mut(&mut self, k: usize, j: usize) -> &mut [f64] {
        &mut self.levels[k][j * self.dim..(j + 1) * self.dim]
    }

    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn width(&self, k: usize) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.levels[k].len() / self.dim
        }
    }

    /// Per-step means of the process.
    pub fn means(&self) -> Vec<Vec<f64>> {
        self.levels.iter().map(|l| level_mean(l, self.dim)).collect()
    }

    pub fn sub(&self, other: &Process) -> Process {
        Process {
            dim: self.dim,
            levels: self
                .levels
                .iter()
                .zip(&other.levels)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().flat_map(|l| l.iter()).all(|v| v.is_finite())
    }
}

/// Mean over the scenarios of one level (uniform weights).
pub fn level_mean(level: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    if dim == 0 || level.is_empty() {
        return out;
    }
    pairwise_rows(level, dim, &mut out);
    let w = (level.len() / dim) as f64;
    out.iter_mut().for_each(|v| *v /= w);
    out
}

/// A discrete solution `(x, y, z)` together with its per-step means.
/// `z` is defined for steps `0..N`; its step-`N` row is kept at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionEnsemble {
    pub dims: Dimensions,
    pub layout: Layout,
    pub grid: TimeGrid,
    pub x: Process,
    pub y: Process,
    pub z: Process,
    pub xbar: Vec<Vec<f64>>,
    pub ybar: Vec<Vec<f64>>,
    pub zbar: Vec<Vec<f64>>,
}

impl SolutionEnsemble {
    pub fn zeros(dims: Dimensions, layout: Layout, grid: TimeGrid) -> Self {
        let n = grid.steps;
        let x = Process::zeros(layout, n, dims.n);
        let y = Process::zeros(layout, n, dims.n);
        let z = Process::zeros(layout, n, dims.z());
        let mut s = SolutionEnsemble {
            dims,
            layout,
            grid,
            x,
            y,
            z,
            xbar: Vec::new(),
            ybar: Vec::new(),
            zbar: Vec::new(),
        };
        s.refresh_means();
        s
    }

    pub fn from_parts(
        dims: Dimensions,
        layout: Layout,
        grid: TimeGrid,
        x: Process,
        y: Process,
        z: Process,
    ) -> Self {
        let mut s = SolutionEnsemble {
            dims,
            layout,
            grid,
            x,
            y,
            z,
            xbar: Vec::new(),
            ybar: Vec::new(),
            zbar: Vec::new(),
        };
        s.refresh_means();
        s
    }

    pub fn refresh_means(&mut self) {
        self.xbar = self.x.means();
        self.ybar = self.y.means();
        self.zbar = self.z.means();
    }

    /// Writes `theta = (x, y, z)` at node `(k, j)` into `out`.
    #[inline]
    pub fn theta(&self, k: usize, j: usize, out: &mut [f64]) {
        let n = self.dims.n;
        out[..n].copy_from_slice(self.x.node(k, j));
        out[n..2 * n].copy_from_slice(self.y.node(k, j));
        out[2 * n..].copy_from_slice(self.z.node(k, j));
    }

    /// Writes the step-`k` mean of theta into `out`.
    #[inline]
    pub fn theta_bar(&self, k: usize, out: &mut [f64]) {
        let n = self.dims.n;
        out[..n].copy_from_slice(&self.xbar[k]);
        out[n..2 * n].copy_from_slice(&self.ybar[k]);
        out[2 * n..].copy_from_slice(&self.zbar[k]);
    }

    pub fn sub(&self, other: &SolutionEnsemble) -> SolutionEnsemble {
        SolutionEnsemble::from_parts(
            self.dims,
            self.layout,
            self.grid,
            self.x.sub(&other.x),
            self.y.sub(&other.y),
            self.z.sub(&other.z),
        )
    }

    /// `y(t0)`, averaged over the initial scenarios.
    pub fn y0(&self) -> Vec<f64> {
        self.ybar[0].clone()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Perturbation `(xi, eta, rho)` of the coupled system; `rho = (phi, psi,
/// gamma)` is stored per node in the same order as `(g, b, sigma)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationTriple {
    pub xi: Vec<f64>,
    /// Terminal perturbation, one row of `n` per terminal scenario.
    pub eta: Vec<f64>,
    /// Steps `0..N`, one row of `n * (2 + d)` per scenario.
    pub rho: Process,
}

impl PerturbationTriple {
    pub fn zeros(dims: Dimensions, layout: Layout, grid: TimeGrid) -> Self {
        PerturbationTriple {
            xi: vec![0.0; dims.n],
            eta: vec![0.0; layout.width(grid.steps) * dims.n],
            rho: Process::zeros(layout, grid.steps, dims.theta()),
        }
    }

    pub fn sub(&self, other: &PerturbationTriple) -> PerturbationTriple {
        PerturbationTriple {
            xi: self.xi.iter().zip(&other.xi).map(|(a, b)| a - b).collect(),
            eta: self.eta.iter().zip(&other.eta).map(|(a, b)| a - b).collect(),
            rho: self.rho.sub(&other.rho),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.xi.iter().all(|v| *v == 0.0)
            && self.eta.iter().all(|v| *v == 0.0)
            && self.rho.max_abs() == 0.0
    }
}
