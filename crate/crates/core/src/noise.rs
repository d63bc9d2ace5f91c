//! Scenario backends: an exact recombination-free binomial tree with
//! Rademacher increments, and a seeded Monte-Carlo ensemble.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{level_mean, Layout, TimeGrid};
use crate::par;

/// Default cap on the number of tree leaves.
pub const DEFAULT_TREE_CAP: u128 = 1 << 20;

#[derive(Clone, Debug)]
pub struct TreeBackend {
    pub grid: TimeGrid,
    pub d: usize,
    branching: usize,
    /// Increment of each child slot, `branching x d`.
    table: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MonteCarloBackend {
    pub grid: TimeGrid,
    pub d: usize,
    pub seed: u64,
    pub paths: usize,
    /// `increments[k]` is `paths x d` for the step `k -> k + 1`.
    increments: Vec<Vec<f64>>,
    /// `positions[k]` is `W(s_k) - W(t0)`, `paths x d`.
    positions: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub enum Backend {
    Tree(TreeBackend),
    MonteCarlo(MonteCarloBackend),
}

pub fn make_tree(grid: TimeGrid, d: usize, cap: u128) -> Result<TreeBackend> {
    grid.validate()?;
    if d == 0 {
        return Err(Error::Config("tree needs d >= 1".into()));
    }
    let bits = grid.steps as u128 * d as u128;
    let leaves = if bits >= 127 { u128::MAX } else { 1u128 << bits };
    if leaves > cap {
        return Err(Error::TreeBudget { leaves, cap });
    }
    let branching = 1usize << d;
    let sq = grid.h().sqrt();
    let mut table = vec![0.0; branching * d];
    for c in 0..branching {
        for i in 0..d {
            table[c * d + i] = if (c >> i) & 1 == 0 { sq } else { -sq };
        }
    }
    Ok(TreeBackend {
        grid,
        d,
        branching,
        table,
    })
}

/// Stream-positioned ChaCha generator: value `index` of stream `stream`
/// starts at word `index * words`, so draws do not depend on visit order.
pub fn counter_rng(seed: u64, stream: u64, index: u64, words: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * words as u128);
    rng
}

/// Uniform on `(0, 1]` from 53 random bits.
#[inline]
pub fn unit_open(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal by Box-Muller; always consumes four 32-bit words.
#[inline]
pub fn std_normal(rng: &mut impl RngCore) -> f64 {
    let u1 = unit_open(rng);
    let u2 = unit_open(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Derives a labeled sub-seed from a root seed.
pub fn sub_seed(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(root ^ splitmix(h))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_mc(seed: u64, paths: usize, grid: TimeGrid, d: usize) -> Result<MonteCarloBackend> {
    grid.validate()?;
    if paths < 2 {
        return Err(Error::Config(format!("monte-carlo needs at least 2 paths, got {paths}")));
    }
    if d == 0 {
        return Err(Error::Config("monte-carlo needs d >= 1".into()));
    }
    let sq = grid.h().sqrt();
    let increments: Vec<Vec<f64>> = (0..grid.steps)
        .map(|k| {
            let mut level = vec![0.0; paths * d];
            par::for_each_chunk_mut(&mut level, d, |p, row| {
                let mut rng = counter_rng(seed, k as u64, (p * d) as u64, 4);
                for v in row.iter_mut() {
                    *v = sq * std_normal(&mut rng);
                }
            });
            level
        })
        .collect();
    let mut positions = vec![vec![0.0; paths * d]];
    for k in 0..grid.steps {
        let next: Vec<f64> = positions[k]
            .iter()
            .zip(&increments[k])
            .map(|(w, dw)| w + dw)
            .collect();
        positions.push(next);
    }
    Ok(MonteCarloBackend {
        grid,
        d,
        seed,
        paths,
        increments,
        positions,
    })
}

impl TreeBackend {
    pub fn layout(&self) -> Layout {
        Layout::Tree {
            branching: self.branching,
        }
    }

    /// Increment leading into node `j` at step `k + 1`.
    #[inline]
    pub fn increment(&self, j: usize) -> &[f64] {
        let c = j % self.branching;
        &self.table[c * self.d..(c + 1) * self.d]
    }

    /// Equal-weight average over children: level `k + 1` values to level `k`.
    pub fn cond_exp(&self, k: usize, values: &[f64], dim: usize) -> Result<Vec<f64>> {
        if k >= self.grid.steps {
            return Err(Error::Config(format!(
                "conditional expectation at step {k} out of range 0..{}",
                self.grid.steps
            )));
        }
        let b = self.branching;
        let parents = self.layout().width(k);
        if values.len() != parents * b * dim {
            return Err(Error::Dimension {
                what: "conditional expectation input".into(),
                expected: parents * b * dim,
                got: values.len(),
            });
        }
        let inv = 1.0 / b as f64;
        let mut out = vec![0.0; parents * dim];
        par::for_each_chunk_mut(&mut out, dim, |p, row| {
            for c in 0..b {
                let child = &values[(p * b + c) * dim..(p * b + c + 1) * dim];
                for (o, v) in row.iter_mut().zip(child) {
                    *o += v;
                }
            }
            row.iter_mut().for_each(|o| *o *= inv);
        });
        Ok(out)
    }

    /// `W(s_k) - W(t0)` at node `j` of step `k`.
    pub fn position(&self, k: usize, mut j: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..k {
            for (o, v) in out.iter_mut().zip(self.increment(j)) {
                *o += v;
            }
            j /= self.branching;
        }
    }
}

impl MonteCarloBackend {
    pub fn layout(&self) -> Layout {
        Layout::Paths { count: self.paths }
    }

    #[inline]
    pub fn increment(&self, k: usize, p: usize) -> &[f64] {
        &self.increments[k][p * self.d..(p + 1) * self.d]
    }

    pub fn increments(&self, k: usize) -> &[f64] {
        &self.increments[k]
    }

    pub fn positions(&self, k: usize) -> &[f64] {
        &self.positions[k]
    }
}

impl Backend {
    pub fn layout(&self) -> Layout {
        match self {
            Backend::Tree(t) => t.layout(),
            Backend::MonteCarlo(m) => m.layout(),
        }
    }

    pub fn grid(&self) -> TimeGrid {
        match self {
            Backend::Tree(t) => t.grid,
            Backend::MonteCarlo(m) => m.grid,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Backend::Tree(t) => t.d,
            Backend::MonteCarlo(m) => m.d,
        }
    }

    pub fn width(&self, k: usize) -> usize {
        self.layout().width(k)
    }

    /// Brownian increment over `[s_k, s_{k+1}]` leading into node `j` at step `k + 1`.
    #[inline]
    pub fn increment(&self, k: usize, j: usize) -> &[f64] {
        match self {
            Backend::Tree(t) => t.increment(j),
            Backend::MonteCarlo(m) => m.increment(k, j),
        }
    }

    /// Expectation of per-scenario values at any step.
    pub fn mean(&self, values: &[f64], dim: usize) -> Vec<f64> {
        level_mean(values, dim)
    }

    /// Exact conditional expectation; only the tree supports it without a
    /// regression basis.
    pub fn cond_exp(&self, k: usize, values: &[f64], dim: usize) -> Result<Vec<f64>> {
        match self {
            Backend::Tree(t) => t.cond_exp(k, values, dim),
            Backend::MonteCarlo(_) => Err(Error::Config(
                "monte-carlo conditional expectations need a regression basis".into(),
            )),
        }
    }

    pub fn is_tree(&self) -> bool {
        matches!(self, Backend::Tree(_))
    }

    pub fn tree(grid: TimeGrid, d: usize) -> Result<Backend> {
        Ok(Backend::Tree(make_tree(grid, d, DEFAULT_TREE_CAP)?))
    }

    pub fn monte_carlo(seed: u64, paths: usize, grid: TimeGrid, d: usize) -> Result<Backend> {
        Ok(Backend::MonteCarlo(sample_mc(seed, paths, grid, d)?))
    }
}
