//! Count panels and flow tensors.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geo::NeighborSets;

/// `T × n` nonnegative counts, one row per snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct CountPanel {
    snapshots: usize,
    n: usize,
    data: Vec<f64>,
}

impl CountPanel {
    /// `data` is row-major with one row of `n` counts per snapshot.
    pub fn new(snapshots: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if snapshots < 2 {
            return Err(Error::input(format!("count panel needs at least 2 snapshots, got {snapshots}")));
        }
        if n == 0 {
            return Err(Error::input("count panel needs at least one region"));
        }
        if data.len() != snapshots * n {
            return Err(Error::input(format!(
                "count panel {snapshots}x{n} needs {} values, got {}",
                snapshots * n,
                data.len()
            )));
        }
        if let Some(p) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::input(format!("count at snapshot {}, region {} is {}", p / n, p % n, data[p])));
        }
        Ok(Self { snapshots, n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::input("count rows have differing lengths"));
        }
        Self::new(rows.len(), n, rows.concat())
    }

    /// Number of snapshots `T`.
    pub fn snapshots(&self) -> usize {
        self.snapshots
    }

    /// Number of transitions `T - 1`.
    pub fn steps(&self) -> usize {
        self.snapshots - 1
    }

    pub fn regions(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.data[t * self.n + i]
    }

    pub fn snapshot(&self, t: usize) -> &[f64] {
        &self.data[t * self.n..(t + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { snapshots: self.snapshots, n: self.n, data: self.data.iter().map(|v| v * c).collect() }
    }

    /// Keeps snapshots `range` (at least two).
    pub fn window(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.snapshots || range.len() < 2 {
            return Err(Error::input(format!("window {range:?} invalid for {} snapshots", self.snapshots)));
        }
        Self::new(range.len(), self.n, self.data[range.start * self.n..range.end * self.n].to_vec())
    }
}

/// `(T-1) × n × n` flows stored on the admissible pattern `Γ`.
///
/// Entries outside `Γ` are structural zeros and have no storage, so they can
/// never become positive.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTensor {
    steps: usize,
    pattern: Arc<NeighborSets>,
    values: Vec<f64>,
}

impl FlowTensor {
    pub fn zeros(steps: usize, pattern: Arc<NeighborSets>) -> Self {
        let values = vec![0.0; steps * pattern.nnz()];
        Self { steps, pattern, values }
    }

    /// `values` holds `steps` consecutive blocks of `pattern.nnz()` entries.
    pub fn from_values(steps: usize, pattern: Arc<NeighborSets>, values: Vec<f64>) -> Result<Self> {
        if values.len() != steps * pattern.nnz() {
            return Err(Error::input(format!(
                "flow tensor needs {} values, got {}",
                steps * pattern.nnz(),
                values.len()
            )));
        }
        Ok(Self { steps, pattern, values })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn regions(&self) -> usize {
        self.pattern.len()
    }

    pub fn pattern(&self) -> &Arc<NeighborSets> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn step(&self, t: usize) -> &[f64] {
        let nnz = self.pattern.nnz();
        &self.values[t * nnz..(t + 1) * nnz]
    }

    pub fn step_mut(&mut self, t: usize) -> &mut [f64] {
        let nnz = self.pattern.nnz();
        &mut self.values[t * nnz..(t + 1) * nnz]
    }

    /// Flow from `i` to `j` at step `t`; zero outside the pattern.
    pub fn get(&self, t: usize, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |p| self.values[t * self.pattern.nnz() + p])
    }

    /// Sets an admissible entry. Fails for structural zeros.
    pub fn set(&mut self, t: usize, i: usize, j: usize, v: f64) -> Result<()> {
        let p = self
            .pattern
            .position(i, j)
            .ok_or_else(|| Error::input(format!("({i},{j}) is not an admissible transition")))?;
        let nnz = self.pattern.nnz();
        self.values[t * nnz + p] = v;
        Ok(())
    }

    /// `Σ_j M_tij` for every origin.
    pub fn row_sums(&self, t: usize) -> Vec<f64> {
        let m = self.step(t);
        (0..self.regions()).map(|i| m[self.pattern.row_range(i)].iter().sum()).collect()
    }

    /// `Σ_i M_tij` for every destination.
    pub fn col_sums(&self, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.regions()];
        for (v, &j) in self.step(t).iter().zip(self.pattern.cols()) {
            out[j] += v;
        }
        out
    }

    /// Calls `f(t, i, j, value)` for every stored entry.
    pub fn for_each_active(&self, mut f: impl FnMut(usize, usize, usize, f64)) {
        let nnz = self.pattern.nnz();
        for t in 0..self.steps {
            for i in 0..self.regions() {
                for p in self.pattern.row_range(i) {
                    f(t, i, self.pattern.cols()[p], self.values[t * nnz + p]);
                }
            }
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            steps: self.steps,
            pattern: Arc::clone(&self.pattern),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    /// Row-major `(T-1) × n × n` copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.regions();
        let mut out = vec![0.0; self.steps * n * n];
        self.for_each_active(|t, i, j, v| out[(t * n + i) * n + j] = v);
        out
    }

    pub(crate) fn check_nonnegative(&self) -> Result<()> {
        if let Some(p) = self.values.iter().position(|v| v.is_nan() || *v < 0.0) {
            let nnz = self.pattern.nnz();
            let rows = self.pattern.rows();
            return Err(Error::input(format!(
                "flow at step {}, ({}, {}) is {}",
                p / nnz,
                rows[p % nnz],
                self.pattern.cols()[p % nnz],
                self.values[p]
            )));
        }
        Ok(())
    }

    pub(crate) fn check_shape(&self, counts: &CountPanel) -> Result<()> {
        if self.regions() != counts.regions() || self.steps != counts.steps() {
            return Err(Error::input(format!(
                "flow tensor is {}x{n}x{n} but counts imply {}x{m}x{m}",
                self.steps,
                counts.steps(),
                n = self.regions(),
                m = counts.regions()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern() -> Arc<NeighborSets> {
        Arc::new(NeighborSets::from_lists(vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]).unwrap())
    }

    #[test]
    fn counts_validation() {
        assert!(CountPanel::new(1, 2, vec![1.0, 2.0]).is_err());
        assert!(CountPanel::new(2, 1, vec![1.0, -2.0]).is_err());
        assert!(CountPanel::new(2, 1, vec![1.0, f64::INFINITY]).is_err());
        let c = CountPanel::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(c.steps(), 2);
        assert_eq!(c.get(2, 1), 6.0);
        assert_eq!(c.window(1..3).unwrap().snapshot(0), &[3.0, 4.0]);
        assert!(c.window(2..3).is_err());
    }

    #[test]
    fn structural_zeros_have_no_storage() {
        let mut m = FlowTensor::zeros(2, pattern());
        assert_eq!(m.values().len(), 2 * 7);
        assert!(m.set(0, 0, 2, 1.0).is_err());
        m.set(1, 1, 2, 5.0).unwrap();
        m.set(1, 2, 2, 1.0).unwrap();
        assert_eq!(m.get(1, 1, 2), 5.0);
        assert_eq!(m.get(1, 0, 2), 0.0);
        assert_eq!(m.row_sums(1), vec![0.0, 5.0, 1.0]);
        assert_eq!(m.col_sums(1), vec![0.0, 0.0, 6.0]);
        let dense = m.to_dense();
        assert_eq!(dense[9 + 3 + 2], 5.0);
    }
}
