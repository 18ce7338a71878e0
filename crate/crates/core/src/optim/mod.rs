//! Minimizers used by the solvers: a projected limited-memory quasi-Newton
//! method for box-constrained smooth objectives and bounded Brent search for
//! scalar functions.
//!
//! Every solver maximizes a likelihood by minimizing its negation.

mod brent;
mod lbfgsb;

pub use brent::{minimize_scalar_bounded, ScalarMinimum};
pub use lbfgsb::{minimize_box, minimize_box_preconditioned, minimize_box_with, InverseHessian, LbfgsOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-variable lower and upper bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::input("lower and upper bounds differ in length"));
        }
        if let Some(i) = (0..lower.len()).find(|&i| lower[i].is_nan() || upper[i].is_nan() || lower[i] > upper[i]) {
            return Err(Error::input(format!("bounds [{}, {}] invalid for variable {i}", lower[i], upper[i])));
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(n: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; n], upper: vec![f64::INFINITY; n] }
    }

    /// `[lo, +∞)` for every variable.
    pub fn lower_bounded(n: usize, lo: f64) -> Self {
        Self { lower: vec![lo; n], upper: vec![f64::INFINITY; n] }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, &lo), &hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len() && x.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| lo <= v && v <= hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    MaxIter,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub projected_gradient: f64,
    pub termination: Termination,
}
