//! Time grids, trapezoid weights and small numerical helpers shared by the
//! solvers and the path integrals.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Relative tolerance used when matching a time against a grid node.
const NODE_TOL: f64 = 1e-12;

/// A strictly increasing set of time nodes `t0 = s_0 < ... < s_N = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid of `steps` cells on `[t0, t_end]`. The last node is `t_end` exactly.
    pub fn uniform(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if steps < 1 {
            return domain("a time grid needs at least 2 points");
        }
        if !(t0.is_finite() && t_end.is_finite()) || t_end <= t0 {
            return domain(format!("invalid grid span [{t0}, {t_end}]"));
        }
        let span = t_end - t0;
        let mut times: Vec<f64> = (0..=steps)
            .map(|k| t0 + span * (k as f64) / (steps as f64))
            .collect();
        times[steps] = t_end;
        Ok(Self { times })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return domain("a time grid needs at least 2 points");
        }
        if times.iter().any(|t| !t.is_finite()) {
            return domain("grid contains a non-finite time");
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return domain("grid times must be strictly increasing");
        }
        Ok(Self { times })
    }

    #[inline]
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of nodes.
    #[inline]
    pub fn len(&self) -> usize {
        self.times.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of cells.
    #[inline]
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    #[inline]
    pub fn start(&self) -> f64 {
        self.times[0]
    }

    #[inline]
    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    /// Index of the node equal to `t` (up to a relative 1e-12), if any.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let scale = NODE_TOL * (1.0 + self.end().abs().max(self.start().abs()));
        let k = self.times.partition_point(|&s| s < t - scale);
        (k < self.times.len() && (self.times[k] - t).abs() <= scale).then_some(k)
    }

    /// Index `k` of the cell `[s_k, s_{k+1}]` containing `t`; `t` must lie in the span.
    pub fn cell_index(&self, t: f64) -> Option<usize> {
        if t < self.start() || t > self.end() {
            return None;
        }
        let k = self.times.partition_point(|&s| s <= t);
        Some(k.saturating_sub(1).min(self.steps() - 1))
    }

    /// Sub-grid made of nodes `first..=last`.
    pub fn slice(&self, first: usize, last: usize) -> Result<Self> {
        if last >= self.len() || first >= last {
            return domain(format!("invalid grid slice {first}..={last}"));
        }
        Ok(Self {
            times: self.times[first..=last].to_vec(),
        })
    }

    /// Trapezoid-rule weights of the nodes.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let n = self.len();
        let mut w = vec![0.0; n];
        for k in 0..n - 1 {
            let half = 0.5 * (self.times[k + 1] - self.times[k]);
            w[k] += half;
            w[k + 1] += half;
        }
        w
    }

    /// Whether both grids have identical nodes.
    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.times == other.times
    }
}

/// Lagrange interpolation through the (at most four) nodes around cell `k`,
/// evaluated at `t`. `value(j)` returns the sampled quantity at node `j`.
pub(crate) fn local_cubic(grid: &TimeGrid, k: usize, t: f64, value: impl Fn(usize) -> f64) -> f64 {
    let n = grid.len();
    let width = n.min(4);
    // Centre the stencil on the cell, shifted inward at the boundaries.
    let first = k.saturating_sub(1).min(n - width);
    let nodes = first..first + width;
    let mut acc = 0.0;
    for j in nodes.clone() {
        let mut basis = 1.0;
        for m in nodes.clone() {
            if m != j {
                basis *= (t - grid.time(m)) / (grid.time(j) - grid.time(m));
            }
        }
        acc += basis * value(j);
    }
    acc
}

/// Neumaier compensated summation.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}
