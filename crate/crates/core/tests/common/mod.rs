#![allow(dead_code)]

use mffbsde::lq::{check_pd_blq, check_pd_flq, BackwardLQProblem, ForwardLQProblem, DEFAULT_DELTA_GAP};
use mffbsde::model::{Dimensions, LinearCoefficients, PerturbationTriple, Process, SolutionEnsemble, TimeGrid};
use mffbsde::noise::Backend;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn grid(steps: usize) -> TimeGrid {
    TimeGrid::new(0.0, 1.0, steps).unwrap()
}

pub fn tree(steps: usize) -> Backend {
    Backend::tree(grid(steps), 1).unwrap()
}

pub fn mc(seed: u64, paths: usize, steps: usize) -> Backend {
    Backend::monte_carlo(seed, paths, grid(steps), 1).unwrap()
}

pub fn scalar() -> Dimensions {
    Dimensions { n: 1, d: 1 }
}

pub fn one() -> DMatrix<f64> {
    DMatrix::from_element(1, 1, 1.0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mat(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

pub fn vec(rng: &mut impl Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// `S S'` for a random `S`: symmetric to the last bit, positive semidefinite.
pub fn gram(rng: &mut impl Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let s = mat(rng, n, n, scale.sqrt());
    &s * s.transpose()
}

pub fn random_linear(rng: &mut impl Rng, dims: Dimensions, scale: f64) -> LinearCoefficients {
    let (n, t) = (dims.n, dims.theta());
    let mut c = LinearCoefficients::zeros(dims);
    c.psi_y = mat(rng, n, n, scale);
    c.psi_0 = vec(rng, n, scale);
    c.phi_x = mat(rng, n, n, scale);
    c.phi_xbar = mat(rng, n, n, scale);
    c.phi_0 = vec(rng, n, scale);
    c.gamma_theta = mat(rng, t, t, scale).into();
    c.gamma_theta_bar = mat(rng, t, t, scale).into();
    c.gamma_0 = mat(rng, t, 1, scale).into();
    c
}

fn random_process(rng: &mut impl Rng, backend: &Backend, dim: usize, last: bool, scale: f64) -> Process {
    let steps = backend.grid().steps;
    let mut p = Process::zeros(backend.layout(), steps, dim);
    for (k, level) in p.levels.iter_mut().enumerate() {
        if k < steps || last {
            level.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        }
    }
    p
}

pub fn random_pert(rng: &mut impl Rng, dims: Dimensions, backend: &Backend, scale: f64) -> PerturbationTriple {
    let mut p = PerturbationTriple::zeros(dims, backend.layout(), backend.grid());
    p.xi.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    p.eta.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    p.rho = random_process(rng, backend, dims.theta(), false, scale);
    p
}

pub fn random_ensemble(rng: &mut impl Rng, dims: Dimensions, backend: &Backend, scale: f64) -> SolutionEnsemble {
    let x = random_process(rng, backend, dims.n, true, scale);
    let y = random_process(rng, backend, dims.n, true, scale);
    let z = random_process(rng, backend, dims.z(), false, scale);
    SolutionEnsemble::from_parts(dims, backend.layout(), backend.grid(), x, y, z)
}

/// Perturbation that makes the worked example nontrivial: `xi = 1`, `eta = W_T`.
pub fn example32_pert(backend: &Backend) -> PerturbationTriple {
    use mffbsde::lq::TerminalValue;
    let mut p = PerturbationTriple::zeros(scalar(), backend.layout(), backend.grid());
    p.xi = vec![1.0];
    p.eta = TerminalValue {
        constant: DVector::zeros(1),
        brownian: one(),
    }
    .realize(backend);
    p
}

fn dims_of(rng: &mut impl Rng) -> (Dimensions, usize) {
    let n = rng.random_range(1..=2);
    let m = rng.random_range(1..=2);
    (Dimensions { n, d: 1 }, m)
}

/// Random forward LQ problem with `n, m <= 2`, `d = 1` that passes the
/// definiteness checks.
pub fn random_pd_flq(rng: &mut impl Rng) -> ForwardLQProblem {
    let (dims, m) = dims_of(rng);
    let n = dims.n;
    let mut p = ForwardLQProblem::zeros(dims, m);
    p.a = mat(rng, n, n, 0.4).into();
    p.a_bar = mat(rng, n, n, 0.2).into();
    p.b = mat(rng, n, m, 1.0).into();
    p.b_bar = mat(rng, n, m, 0.3).into();
    p.c = mat(rng, n, n, 0.3).into();
    p.c_bar = mat(rng, n, n, 0.1).into();
    p.d = mat(rng, n, m, 0.4).into();
    p.d_bar = mat(rng, n, m, 0.1).into();
    p.h = DMatrix::identity(n, n) + mat(rng, n, n, 0.3);
    p.alpha = mat(rng, n, 1, 0.2).into();
    p.beta = mat(rng, n, 1, 0.2).into();
    p.x_t = vec(rng, n, 1.0);
    p.cost.m = DMatrix::identity(n, n) * 0.5 + gram(rng, n, 0.5);
    p.cost.g = gram(rng, n, 1.0);
    p.cost.g_bar = gram(rng, n, 0.5) - &p.cost.g;
    let q = gram(rng, n, 0.5);
    p.cost.q_bar = (gram(rng, n, 0.5) - &q).into();
    p.cost.q = q.into();
    let r = DMatrix::identity(m, m) * 0.5 + gram(rng, m, 0.5);
    p.cost.r_bar = (DMatrix::identity(m, m) * 0.5 + gram(rng, m, 0.5) - &r).into();
    p.cost.r = r.into();
    assert!(check_pd_flq(&p, DEFAULT_DELTA_GAP).unwrap().passed);
    p
}

/// Random backward LQ problem with `n, m <= 2`, `d = 1` that passes the
/// definiteness checks.
pub fn random_pd_blq(rng: &mut impl Rng) -> BackwardLQProblem {
    let (dims, m) = dims_of(rng);
    let n = dims.n;
    let mut p = BackwardLQProblem::zeros(dims, m);
    p.a = mat(rng, n, n, 0.3).into();
    p.a_bar = mat(rng, n, n, 0.2).into();
    p.b = mat(rng, n, n, 0.3).into();
    p.b_bar = mat(rng, n, n, 0.1).into();
    p.c = mat(rng, n, m, 1.0).into();
    p.c_bar = mat(rng, n, m, 0.3).into();
    p.p = DMatrix::identity(n, n) + mat(rng, n, n, 0.3);
    p.p_bar = mat(rng, n, n, 0.2);
    p.alpha = mat(rng, n, 1, 0.2).into();
    p.y_t.constant = vec(rng, n, 1.0);
    p.y_t.brownian = mat(rng, n, 1, 0.5);
    p.cost.m = gram(rng, n, 0.5);
    p.cost.g = DMatrix::identity(n, n) * 0.5 + gram(rng, n, 0.5);
    p.cost.g_bar = DMatrix::identity(n, n) * 0.5 + gram(rng, n, 0.5) - &p.cost.g;
    let q = gram(rng, n, 0.5);
    p.cost.q_bar = (gram(rng, n, 0.5) - &q).into();
    p.cost.q = q.into();
    let l = gram(rng, n, 0.3);
    p.cost.l_bar = (gram(rng, n, 0.3) - &l).into();
    p.cost.l = l.into();
    let r = DMatrix::identity(m, m) * 0.5 + gram(rng, m, 0.5);
    p.cost.r_bar = (DMatrix::identity(m, m) * 0.5 + gram(rng, m, 0.5) - &r).into();
    p.cost.r = r.into();
    assert!(check_pd_blq(&p, DEFAULT_DELTA_GAP).unwrap().passed);
    p
}
