use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid `t0 = s_0 < ... < s_N = T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        let g = TimeGrid { t0, t_end, steps };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.t_end.is_finite()) || self.t_end <= self.t0 {
            return Err(Error::Config(format!(
                "grid needs t0 < T, got t0={} T={}",
                self.t0, self.t_end
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn h(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            self.t0 + k as f64 * self.h()
        }
    }

    pub fn horizon(&self) -> f64 {
        self.t_end - self.t0
    }

    pub fn at(&self, k: usize) -> Instant {
        Instant {
            k,
            s: self.time(k),
        }
    }

    /// Same interval with twice as many steps.
    pub fn refined(&self) -> Self {
        TimeGrid {
            steps: self.steps * 2,
            ..*self
        }
    }
}

/// A grid point handed to coefficient callbacks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Instant {
    pub k: usize,
    pub s: f64,
}

/// State and noise dimensions. `theta` stacks `(x, y, z_1, ..., z_d)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub n: usize,
    pub d: usize,
}

impl Dimensions {
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Config("dimensions n and d must be positive".into()));
        }
        Ok(Dimensions { n, d })
    }

    #[inline]
    pub fn theta(&self) -> usize {
        self.n * (2 + self.d)
    }

    #[inline]
    pub fn z(&self) -> usize {
        self.n * self.d
    }
}

/// How scenarios are arranged across time steps.
///
/// A tree has `branching^k` equiprobable nodes at step `k`; node `j` at step
/// `k + 1` descends from `j / branching`. Monte-Carlo paths keep a fixed index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    Tree { branching: usize },
    Paths { count: usize },
}

impl Layout {
    #[inline]
    pub fn width(&self, k: usize) -> usize {
        match *self {
            Layout::Tree { branching } => branching.pow(k as u32),
            Layout::Paths { count } => count,
        }
    }

    /// Parent (at step `k`) of node `j` at step `k + 1`.
    #[inline]
    pub fn parent(&self, j: usize) -> usize {
        match *self {
            Layout::Tree { branching } => j / branching,
            Layout::Paths { .. } => j,
        }
    }

    /// Number of successors of each node.
    #[inline]
    pub fn fanout(&self) -> usize {
        match *self {
            Layout::Tree { branching } => branching,
            Layout::Paths { .. } => 1,
        }
    }

    pub fn is_tree(&self) -> bool {
        matches!(self, Layout::Tree { .. })
    }
}
