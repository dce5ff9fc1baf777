use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform node grid on the unit square. Row `i` sits at `s2 = i / (H-1)`,
/// column `j` at `s1 = j / (W-1)`; fields are stored row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < 3 || width < 3 {
            return Err(Error::invalid(format!(
                "grid must be at least 3x3, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn n_nodes(&self) -> usize {
        self.height * self.width
    }

    /// Node spacing along s1.
    pub fn dx(&self) -> f64 {
        1.0 / (self.width - 1) as f64
    }

    /// Node spacing along s2.
    pub fn dy(&self) -> f64 {
        1.0 / (self.height - 1) as f64
    }

    /// Coordinates `(s1, s2)` of node `(row, col)`.
    pub fn coords(&self, row: usize, col: usize) -> (f64, f64) {
        (col as f64 * self.dx(), row as f64 * self.dy())
    }

    /// Coordinates of every node in storage order.
    pub fn points(&self) -> Vec<(f64, f64)> {
        (0..self.n_nodes())
            .map(|p| self.coords(p / self.width, p % self.width))
            .collect()
    }

    /// Samples `f(s1, s2)` at every node.
    pub fn tabulate(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.points().into_iter().map(|(x, y)| f(x, y)).collect()
    }
}
