//! Inverse Hessians of the negated flow objectives, used as the initial
//! matrix of the quasi-Newton solver.
//!
//! Both objectives have the form `Σ v log v + (λ/2)‖A v - b‖²` plus linear
//! terms, so the Hessian is `diag(1/v) + λ AᵀA`. For the decoupled objective
//! every variable sits in a single penalty term and the inverse follows from
//! Sherman-Morrison per block. For the full flow objective each flow sits in
//! one row sum and one column sum; Woodbury reduces the inverse to a `2n`
//! system per step, solved through its `n × n` Schur complement.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::geo::NeighborSets;
use crate::optim::InverseHessian;
use crate::M_MIN;

/// `(diag(1/m) + λ AᵀA)⁻¹` where `A` stacks the row and column sums of every
/// step of a flow tensor.
pub(crate) struct FlowCurvature<'a> {
    pattern: &'a NeighborSets,
    rows: Vec<usize>,
    steps: usize,
    lambda: f64,
    m: Vec<f64>,
    factors: Vec<Option<StepFactor>>,
}

struct StepFactor {
    /// `1 / (row_i + 1/λ)`.
    row_inv: Vec<f64>,
    /// Cholesky factor of `diag(col + 1/λ) - Mᵀ diag(row_inv) M`.
    schur: Cholesky<f64, Dyn>,
}

impl<'a> FlowCurvature<'a> {
    pub(crate) fn new(pattern: &'a NeighborSets, steps: usize, lambda: f64) -> Self {
        Self { pattern, rows: pattern.rows(), steps, lambda, m: Vec::new(), factors: Vec::new() }
    }

    fn factor_step(&self, m: &[f64]) -> Option<StepFactor> {
        let pattern = self.pattern;
        let n = pattern.len();
        let ridge = 1.0 / self.lambda;
        let mut col = vec![ridge; n];
        let mut row_inv = vec![0.0; n];
        for i in 0..n {
            let mut row = ridge;
            for (p, &j) in pattern.row_range(i).zip(pattern.neighbors(i)) {
                row += m[p];
                col[j] += m[p];
            }
            row_inv[i] = 1.0 / row;
        }
        // only the lower triangle is read by the factorization
        let mut s = DMatrix::<f64>::zeros(n, n);
        for (j, c) in col.iter().enumerate() {
            s[(j, j)] = *c;
        }
        for i in 0..n {
            let range = pattern.row_range(i);
            let cols = pattern.neighbors(i);
            let vals = &m[range];
            for (a, (&ja, &ma)) in cols.iter().zip(vals).enumerate() {
                let wa = row_inv[i] * ma;
                for (&jb, &mb) in cols[..=a].iter().zip(&vals[..=a]) {
                    s[(ja, jb)] -= wa * mb;
                }
            }
        }
        Cholesky::new(s).map(|schur| StepFactor { row_inv, schur })
    }

    fn apply_step(&self, t: usize, v: &[f64], out: &mut [f64]) {
        let pattern = self.pattern;
        let nnz = pattern.nnz();
        let m = &self.m[t * nnz..(t + 1) * nnz];
        let Some(factor) = &self.factors[t] else {
            // diagonal fallback: entropy curvature plus both penalty terms
            for ((o, v), m) in out.iter_mut().zip(v).zip(m) {
                *o = v / (1.0 / m + 2.0 * self.lambda);
            }
            return;
        };
        let n = pattern.len();
        let mut b_row = vec![0.0; n];
        let mut b_col = vec![0.0; n];
        for (p, (&i, &j)) in self.rows.iter().zip(pattern.cols()).enumerate() {
            let w = m[p] * v[p];
            b_row[i] += w;
            b_col[j] += w;
        }
        let mut rhs = DVector::from_vec(b_col);
        for (p, (&i, &j)) in self.rows.iter().zip(pattern.cols()).enumerate() {
            rhs[j] -= m[p] * factor.row_inv[i] * b_row[i];
        }
        factor.schur.solve_mut(&mut rhs);
        let y_col = rhs;
        let mut y_row = b_row;
        for (p, (&i, &j)) in self.rows.iter().zip(pattern.cols()).enumerate() {
            y_row[i] -= m[p] * y_col[j];
        }
        for (y, w) in y_row.iter_mut().zip(&factor.row_inv) {
            *y *= w;
        }
        for (p, (&i, &j)) in self.rows.iter().zip(pattern.cols()).enumerate() {
            out[p] = m[p] * (v[p] - y_row[i] - y_col[j]);
        }
    }
}

impl InverseHessian for FlowCurvature<'_> {
    fn update(&mut self, x: &[f64]) {
        self.m = x.iter().map(|v| v.max(M_MIN)).collect();
        if self.lambda <= 0.0 {
            return;
        }
        let nnz = self.pattern.nnz();
        let factors: Vec<_> = (0..self.steps)
            .into_par_iter()
            .map(|t| {
                let f = self.factor_step(&self.m[t * nnz..(t + 1) * nnz]);
                if f.is_none() {
                    log::debug!("flow curvature at step {t} is not positive definite; using its diagonal");
                }
                f
            })
            .collect();
        self.factors = factors;
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        if self.lambda <= 0.0 {
            for ((o, v), m) in out.iter_mut().zip(v).zip(&self.m) {
                *o = m * v;
            }
            return;
        }
        let nnz = self.pattern.nnz();
        out.par_chunks_mut(nnz).zip(v.par_chunks(nnz)).enumerate().for_each(|(t, (out, v))| self.apply_step(t, v, out));
    }
}

/// `(diag(1/v) + λ AᵀA)⁻¹` for the decoupled layout `X | Y | Z`, where each
/// row of `X` and each `(Y_ti, Z_ti)` pair share one penalty term.
pub(crate) struct BlockCurvature<'a> {
    pattern: &'a NeighborSets,
    steps: usize,
    lambda: f64,
    v: Vec<f64>,
}

impl<'a> BlockCurvature<'a> {
    pub(crate) fn new(pattern: &'a NeighborSets, steps: usize, lambda: f64) -> Self {
        Self { pattern, steps, lambda, v: Vec::new() }
    }

    /// Sherman-Morrison for one block: `D u - D 1 (1ᵀ D u) / (1/λ + 1ᵀ D 1)`.
    fn block(&self, d: &[f64], u: &[f64], out: &mut [f64]) {
        let du: f64 = d.iter().zip(u).map(|(d, u)| d * u).sum();
        let dsum: f64 = d.iter().sum();
        let shift = if self.lambda > 0.0 { du / (1.0 / self.lambda + dsum) } else { 0.0 };
        for ((o, d), u) in out.iter_mut().zip(d).zip(u) {
            *o = d * (u - shift);
        }
    }
}

impl InverseHessian for BlockCurvature<'_> {
    fn update(&mut self, x: &[f64]) {
        self.v = x.iter().map(|v| v.max(M_MIN)).collect();
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let pattern = self.pattern;
        let (n, nnz) = (pattern.len(), pattern.nnz());
        let x_len = self.steps * nnz;
        for t in 0..self.steps {
            for i in 0..n {
                let r = pattern.row_range(i);
                let r = t * nnz + r.start..t * nnz + r.end;
                self.block(&self.v[r.clone()], &u[r.clone()], &mut out[r]);
            }
        }
        let y_off = x_len;
        let z_off = x_len + self.steps * n;
        for k in 0..self.steps * n {
            let d = [self.v[y_off + k], self.v[z_off + k]];
            let mut o = [0.0; 2];
            self.block(&d, &[u[y_off + k], u[z_off + k]], &mut o);
            out[y_off + k] = o[0];
            out[z_off + k] = o[1];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense `diag(1/m) + λ AᵀA` for one step of a full pattern.
    fn dense_hessian(n: usize, m: &[f64], lambda: f64) -> DMatrix<f64> {
        let k = n * n;
        let mut h = DMatrix::zeros(k, k);
        for p in 0..k {
            h[(p, p)] = 1.0 / m[p];
            for q in 0..k {
                let same_row = p / n == q / n;
                let same_col = p % n == q % n;
                h[(p, q)] += lambda * (f64::from(u8::from(same_row)) + f64::from(u8::from(same_col)));
            }
        }
        h
    }

    #[test]
    fn flow_curvature_inverts_the_hessian() {
        let n = 4;
        let pattern = NeighborSets::from_lists((0..n).map(|_| (0..n).collect()).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..2 * n * n).map(|_| rng.random_range(0.1..50.0)).collect();
        let v: Vec<f64> = (0..2 * n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for lambda in [0.0, 0.3, 7.0] {
            let mut h = FlowCurvature::new(&pattern, 2, lambda);
            h.update(&x);
            let mut out = vec![0.0; v.len()];
            h.apply(&v, &mut out);
            for t in 0..2 {
                let r = t * n * n..(t + 1) * n * n;
                let back = dense_hessian(n, &x[r.clone()], lambda) * DVector::from_column_slice(&out[r.clone()]);
                for (a, b) in back.iter().zip(&v[r]) {
                    assert!((a - b).abs() < 1e-9, "lambda {lambda}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn block_curvature_inverts_the_hessian() {
        let pattern = NeighborSets::from_lists(vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]).unwrap();
        let (steps, n, nnz) = (1, 3, 7);
        let dim = steps * (nnz + 2 * n);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..20.0)).collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lambda = 2.5;
        // penalty groups: each X row, then each (Y, Z) pair
        let mut groups: Vec<Vec<usize>> = (0..n).map(|i| pattern.row_range(i).collect()).collect();
        groups.extend((0..n).map(|i| vec![nnz + i, nnz + n + i]));
        let mut h = DMatrix::zeros(dim, dim);
        for p in 0..dim {
            h[(p, p)] = 1.0 / x[p];
        }
        for g in &groups {
            for &p in g {
                for &q in g {
                    h[(p, q)] += lambda;
                }
            }
        }
        let mut op = BlockCurvature::new(&pattern, steps, lambda);
        op.update(&x);
        let mut out = vec![0.0; dim];
        op.apply(&v, &mut out);
        let back = h * DVector::from_vec(out);
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}
