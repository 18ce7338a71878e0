//! Transition kernel, penalized log-likelihood of a flow tensor and its
//! analytic gradient.
//!
//! For a flow tensor `M`, counts `N` and parameters `(π, s, β)` the objective
//! is
//!
//! ```text
//! L = L0 + L1 + L2 - (λ/2) C
//! L0 = Σ_t Σ_i log(1 - π_i) M_tii
//! L1 = Σ_t Σ_i Σ_{j∈Γ_i\i} (log π_i + log s_j - β d_ij - log S_i) M_tij
//! L2 = Σ_t Σ_i Σ_{j∈Γ_i} M_tij (1 - log M_tij)
//! C  = Σ_t Σ_i (N_ti - Σ_j M_tij)² + (N_t+1,i - Σ_j M_tji)²
//! ```
//!
//! with `S_i = Σ_{k∈Γ_i\i} s_k exp(-β d_ik)`. The bracketed L0/L1 weights only
//! depend on the parameters, so [`ExactObjective`] computes them once and
//! reuses them for every flow evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{CountPanel, FlowTensor};
use crate::geo::{DistanceMatrix, NeighborSets};
use crate::sum::{self, NeumaierSum};
use crate::M_MIN;

/// Entry count above which row blocks are evaluated in parallel.
pub(crate) const PAR_THRESHOLD: usize = 16_384;

/// Departure probabilities, gathering scores and distance decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub pi: Vec<f64>,
    pub s: Vec<f64>,
    pub beta: f64,
}

impl ModelParams {
    pub fn uniform(n: usize, pi: f64, s: f64, beta: f64) -> Self {
        Self { pi: vec![pi; n], s: vec![s; n], beta }
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.pi.len() != n || self.s.len() != n {
            return Err(Error::input(format!("parameters sized {}/{} for {n} regions", self.pi.len(), self.s.len())));
        }
        if let Some(i) = self.pi.iter().position(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::input(format!("pi[{i}] = {} outside [0, 1)", self.pi[i])));
        }
        if let Some(i) = self.s.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::input(format!("s[{i}] = {} must be positive", self.s[i])));
        }
        if !self.beta.is_finite() {
            return Err(Error::input(format!("beta = {} must be finite", self.beta)));
        }
        Ok(())
    }
}

/// Components of the penalized log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodBreakdown {
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub cost: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LikelihoodBreakdown {
    fn new(l0: f64, l1: f64, l2: f64, cost: f64, lambda: f64) -> Self {
        let total = l0 + l1 + l2 - 0.5 * lambda * cost;
        Self { l0, l1, l2, cost, lambda, total }
    }

    /// Fails with the name of the first non-finite component.
    pub fn check_finite(&self) -> Result<()> {
        for (term, value) in
            [("L0", self.l0), ("L1", self.l1), ("L2", self.l2), ("C", self.cost), ("total", self.total)]
        {
            if !value.is_finite() {
                return Err(Error::NonFinite { term: term.into(), value });
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn ln_floor(x: f64) -> f64 {
    x.max(f64::MIN_POSITIVE).ln()
}

/// `x (1 - log x)` with the convention `0 (1 - log 0) = 0`.
#[inline]
pub(crate) fn entropy_term(x: f64) -> f64 {
    if x > 0.0 {
        x * (1.0 - x.ln())
    } else {
        0.0
    }
}

/// `log S_i` for every origin, computed with a max shift. Origins without
/// non-self neighbors get `-inf`.
pub(crate) fn log_normalizers(s: &[f64], beta: f64, d: &DistanceMatrix, pattern: &NeighborSets) -> Vec<f64> {
    let row = |i: usize| {
        let drow = d.row(i);
        let mut shift = f64::NEG_INFINITY;
        for &k in pattern.neighbors(i) {
            if k != i {
                shift = shift.max(ln_floor(s[k]) - beta * drow[k]);
            }
        }
        if shift == f64::NEG_INFINITY {
            return shift;
        }
        let mut acc = 0.0;
        for &k in pattern.neighbors(i) {
            if k != i {
                acc += (ln_floor(s[k]) - beta * drow[k] - shift).exp();
            }
        }
        shift + acc.ln()
    };
    if pattern.nnz() >= PAR_THRESHOLD {
        (0..pattern.len()).into_par_iter().map(row).collect()
    } else {
        (0..pattern.len()).map(row).collect()
    }
}

fn check_destinations(params: &ModelParams, pattern: &NeighborSets) -> Result<()> {
    for i in 0..pattern.len() {
        if params.pi[i] > 0.0 && pattern.degree(i) == 0 {
            return Err(Error::Model(format!(
                "region {i} has departure probability {} but no admissible destination",
                params.pi[i]
            )));
        }
    }
    Ok(())
}

/// Row-stochastic transition probabilities on the admissible pattern.
#[derive(Debug, Clone)]
pub struct TransitionMatrix<'a> {
    pattern: &'a NeighborSets,
    values: Vec<f64>,
}

impl TransitionMatrix<'_> {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |p| self.values[p])
    }

    /// Probabilities for the destinations `pattern.neighbors(i)`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[self.pattern.row_range(i)]
    }

    /// Values aligned with the pattern's entry positions.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.pattern.len();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for (p, &j) in self.pattern.row_range(i).zip(self.pattern.neighbors(i)) {
                out[i * n + j] = self.values[p];
            }
        }
        out
    }
}

/// `θ_ii = 1 - π_i`, `θ_ij = π_i s_j e^{-β d_ij} / S_i` on `Γ_i \ {i}`.
pub fn transition_matrix<'a>(
    params: &ModelParams,
    d: &DistanceMatrix,
    pattern: &'a NeighborSets,
) -> Result<TransitionMatrix<'a>> {
    params.validate(pattern.len())?;
    check_destinations(params, pattern)?;
    let log_norm = log_normalizers(&params.s, params.beta, d, pattern);
    let mut values = vec![0.0; pattern.nnz()];
    for i in 0..pattern.len() {
        let drow = d.row(i);
        for (p, &j) in pattern.row_range(i).zip(pattern.neighbors(i)) {
            values[p] = if j == i {
                1.0 - params.pi[i]
            } else if params.pi[i] == 0.0 {
                0.0
            } else {
                params.pi[i] * (params.s[j].ln() - params.beta * drow[j] - log_norm[i]).exp()
            };
        }
    }
    Ok(TransitionMatrix { pattern, values })
}

/// Penalized log-likelihood as a function of the flows alone, with the
/// parameter-dependent weights precomputed.
#[derive(Debug, Clone)]
pub struct ExactObjective<'a> {
    pattern: &'a NeighborSets,
    counts: &'a CountPanel,
    weights: Vec<f64>,
    lambda: f64,
}

impl<'a> ExactObjective<'a> {
    pub fn new(
        params: &ModelParams,
        counts: &'a CountPanel,
        lambda: f64,
        d: &DistanceMatrix,
        pattern: &'a NeighborSets,
    ) -> Result<Self> {
        if counts.regions() != pattern.len() || d.len() != pattern.len() {
            return Err(Error::input("counts, distances and neighbor sets disagree on region count"));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::input(format!("lambda must be finite and nonnegative, got {lambda}")));
        }
        params.validate(pattern.len())?;
        check_destinations(params, pattern)?;
        let log_norm = log_normalizers(&params.s, params.beta, d, pattern);
        let mut weights = vec![0.0; pattern.nnz()];
        for i in 0..pattern.len() {
            let log_pi = ln_floor(params.pi[i]);
            let drow = d.row(i);
            for (p, &j) in pattern.row_range(i).zip(pattern.neighbors(i)) {
                weights[p] = if j == i {
                    (1.0 - params.pi[i]).ln()
                } else {
                    log_pi + params.s[j].ln() - params.beta * drow[j] - log_norm[i]
                };
            }
        }
        Ok(Self { pattern, counts, weights, lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Per-entry weight: `log(1-π_i)` on the diagonal, the L1 bracket
    /// elsewhere.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of flow variables (`steps × nnz`).
    pub fn dim(&self) -> usize {
        self.counts.steps() * self.pattern.nnz()
    }

    /// Likelihood components for flat flow values.
    pub fn breakdown(&self, values: &[f64]) -> LikelihoodBreakdown {
        self.evaluate(values, None)
    }

    /// Fills `grad` with `∂L/∂M` and returns the breakdown.
    pub fn value_and_gradient(&self, values: &[f64], grad: &mut [f64]) -> LikelihoodBreakdown {
        self.evaluate(values, Some(grad))
    }

    /// Objective for minimization: `-L` and its gradient.
    pub fn negated(&self, values: &[f64], grad: &mut [f64]) -> f64 {
        let b = self.evaluate(values, Some(grad));
        grad.iter_mut().for_each(|g| *g = -*g);
        -b.total
    }

    fn evaluate(&self, values: &[f64], mut grad: Option<&mut [f64]>) -> LikelihoodBreakdown {
        let pattern = self.pattern;
        let n = pattern.len();
        let nnz = pattern.nnz();
        let parallel = nnz >= PAR_THRESHOLD;
        let mut l0 = NeumaierSum::default();
        let mut l1 = NeumaierSum::default();
        let mut l2 = NeumaierSum::default();
        let mut cost = NeumaierSum::default();

        for t in 0..self.counts.steps() {
            let m = &values[t * nnz..(t + 1) * nnz];
            let row_sum = |i: usize| sum::sum(m[pattern.row_range(i)].iter().copied());
            let rows: Vec<f64> =
                if parallel { (0..n).into_par_iter().map(row_sum).collect() } else { (0..n).map(row_sum).collect() };
            let mut cols = vec![NeumaierSum::default(); n];
            for (v, &j) in m.iter().zip(pattern.cols()) {
                cols[j].add(*v);
            }
            let origin = self.counts.snapshot(t);
            let dest = self.counts.snapshot(t + 1);
            let row_res: Vec<f64> = (0..n).map(|i| origin[i] - rows[i]).collect();
            let col_res: Vec<f64> = (0..n).map(|j| dest[j] - cols[j].value()).collect();
            for i in 0..n {
                cost.add(row_res[i] * row_res[i]);
                cost.add(col_res[i] * col_res[i]);
            }

            let lambda = self.lambda;
            let weights = &self.weights;
            let row_terms = |i: usize, g: Option<&mut [f64]>| -> [f64; 3] {
                let range = pattern.row_range(i);
                let diag = pattern.diag_pos(i);
                let (mut a0, mut a1, mut a2) = (0.0, NeumaierSum::default(), NeumaierSum::default());
                for p in range.clone() {
                    let x = m[p];
                    if p == diag {
                        a0 = weights[p] * x;
                    } else {
                        a1.add(weights[p] * x);
                    }
                    a2.add(entropy_term(x));
                }
                if let Some(g) = g {
                    for (k, p) in range.enumerate() {
                        let j = pattern.cols()[p];
                        g[k] = weights[p] - m[p].max(M_MIN).ln() + lambda * (row_res[i] + col_res[j]);
                    }
                }
                [a0, a1.value(), a2.value()]
            };

            let parts: Vec<[f64; 3]> = match grad.as_deref_mut() {
                Some(g) => {
                    let slices = split_rows(pattern, &mut g[t * nnz..(t + 1) * nnz]);
                    if parallel {
                        slices.into_par_iter().enumerate().map(|(i, gi)| row_terms(i, Some(gi))).collect()
                    } else {
                        slices.into_iter().enumerate().map(|(i, gi)| row_terms(i, Some(gi))).collect()
                    }
                }
                None => {
                    if parallel {
                        (0..n).into_par_iter().map(|i| row_terms(i, None)).collect()
                    } else {
                        (0..n).map(|i| row_terms(i, None)).collect()
                    }
                }
            };
            for [a0, a1, a2] in parts {
                l0.add(a0);
                l1.add(a1);
                l2.add(a2);
            }
        }
        LikelihoodBreakdown::new(l0.value(), l1.value(), l2.value(), cost.value(), self.lambda)
    }
}

/// Splits a per-step buffer into one mutable slice per origin row.
pub(crate) fn split_rows<'b>(pattern: &NeighborSets, mut buf: &'b mut [f64]) -> Vec<&'b mut [f64]> {
    let mut out = Vec::with_capacity(pattern.len());
    for i in 0..pattern.len() {
        let (head, tail) = std::mem::take(&mut buf).split_at_mut(pattern.row_range(i).len());
        out.push(head);
        buf = tail;
    }
    out
}

/// Conservation cost `C(M, N)` alone.
pub fn conservation_cost(m: &FlowTensor, counts: &CountPanel) -> Result<f64> {
    m.check_shape(counts)?;
    let mut acc = NeumaierSum::default();
    for t in 0..m.steps() {
        for (r, n) in m.row_sums(t).iter().zip(counts.snapshot(t)) {
            acc.add((n - r).powi(2));
        }
        for (c, n) in m.col_sums(t).iter().zip(counts.snapshot(t + 1)) {
            acc.add((n - c).powi(2));
        }
    }
    Ok(acc.value())
}

/// Penalized log-likelihood of `m` and its components.
pub fn exact_loglik(
    m: &FlowTensor,
    params: &ModelParams,
    counts: &CountPanel,
    lambda: f64,
    d: &DistanceMatrix,
) -> Result<LikelihoodBreakdown> {
    m.check_shape(counts)?;
    m.check_nonnegative()?;
    let objective = ExactObjective::new(params, counts, lambda, d, m.pattern())?;
    Ok(objective.breakdown(m.values()))
}

/// `∂L/∂M_tij` on every admissible entry; `log M` is floored at [`M_MIN`].
pub fn exact_grad_m(
    m: &FlowTensor,
    params: &ModelParams,
    counts: &CountPanel,
    lambda: f64,
    d: &DistanceMatrix,
) -> Result<FlowTensor> {
    m.check_shape(counts)?;
    m.check_nonnegative()?;
    let objective = ExactObjective::new(params, counts, lambda, d, m.pattern())?;
    let mut grad = vec![0.0; m.values().len()];
    objective.value_and_gradient(m.values(), &mut grad);
    FlowTensor::from_values(m.steps(), std::sync::Arc::clone(m.pattern()), grad)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::geo::{build_distance_matrix, neighbor_sets, RegionSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(k: usize, spacing: f64) -> RegionSet {
        let mut ids = Vec::new();
        let mut coords = Vec::new();
        for r in 0..k {
            for c in 0..k {
                ids.push(format!("c{r}_{c}"));
                coords.push([c as f64 * spacing, r as f64 * spacing]);
            }
        }
        RegionSet::new(ids, coords).unwrap()
    }

    struct Instance {
        d: DistanceMatrix,
        pattern: Arc<NeighborSets>,
        counts: CountPanel,
        params: ModelParams,
        m: FlowTensor,
    }

    fn random_instance(seed: u64, n: usize, steps: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        let coords = (0..n).map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)]).collect();
        let regions = RegionSet::new(ids, coords).unwrap();
        let d = build_distance_matrix(&regions).unwrap();
        let pattern = Arc::new(neighbor_sets(&d, d.max()).unwrap());
        let counts =
            CountPanel::new(steps + 1, n, (0..(steps + 1) * n).map(|_| rng.random_range(5.0..50.0)).collect()).unwrap();
        let params = ModelParams {
            pi: (0..n).map(|_| rng.random_range(0.05..0.5)).collect(),
            s: (0..n).map(|_| rng.random_range(0.1..1.0)).collect(),
            beta: rng.random_range(-0.5..2.0),
        };
        let values = (0..steps * pattern.nnz()).map(|_| rng.random_range(0.5..20.0)).collect();
        let m = FlowTensor::from_values(steps, Arc::clone(&pattern), values).unwrap();
        Instance { d, pattern, counts, params, m }
    }

    /// Direct evaluation of the transition formula with dense loops.
    fn theta_oracle(params: &ModelParams, d: &DistanceMatrix, pattern: &NeighborSets) -> Vec<f64> {
        let n = pattern.len();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let denom: f64 = (0..n)
                .filter(|&k| k != i && pattern.contains(i, k))
                .map(|k| params.s[k] * (-params.beta * d.get(i, k)).exp())
                .sum();
            for j in 0..n {
                out[i * n + j] = if i == j {
                    1.0 - params.pi[i]
                } else if pattern.contains(i, j) {
                    params.pi[i] * params.s[j] * (-params.beta * d.get(i, j)).exp() / denom
                } else {
                    0.0
                };
            }
        }
        out
    }

    #[test]
    fn zero_departure_gives_identity() {
        let regions = grid(3, 1.0);
        let d = build_distance_matrix(&regions).unwrap();
        let g = neighbor_sets(&d, 2.0).unwrap();
        let theta = transition_matrix(&ModelParams::uniform(9, 0.0, 1.0, 1.0), &d, &g).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(theta.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn equidistant_neighbors_split_evenly() {
        let regions =
            RegionSet::new(vec!["a".into(), "b".into(), "c".into()], vec![[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
                .unwrap();
        let d = build_distance_matrix(&regions).unwrap();
        let g = neighbor_sets(&d, 1.0).unwrap();
        let params = ModelParams { pi: vec![0.5, 0.0, 0.0], s: vec![1.0; 3], beta: 0.7 };
        let theta = transition_matrix(&params, &d, &g).unwrap();
        assert!((theta.get(0, 1) - 0.25).abs() < 1e-15);
        assert!((theta.get(0, 2) - 0.25).abs() < 1e-15);
        assert_eq!(theta.get(0, 0), 0.5);
    }

    #[test]
    fn isolated_region_cannot_depart() {
        let regions = RegionSet::new(vec!["a".into(), "b".into()], vec![[0.0, 0.0], [5.0, 0.0]]).unwrap();
        let d = build_distance_matrix(&regions).unwrap();
        let g = neighbor_sets(&d, 1.0).unwrap();
        let params = ModelParams { pi: vec![0.1, 0.0], s: vec![1.0; 2], beta: 1.0 };
        assert!(matches!(transition_matrix(&params, &d, &g), Err(Error::Model(_))));
    }

    #[test]
    fn grid_scenario_matches_direct_formula() {
        let regions = grid(3, 1.0);
        let d = build_distance_matrix(&regions).unwrap();
        let g = neighbor_sets(&d, 2.0).unwrap();
        let params = ModelParams {
            pi: vec![0.012, 0.017, 0.011, 0.019, 0.1, 0.014, 0.016, 0.013, 0.018],
            s: vec![2.0, 1.0, 1.5, 1.0, 1.0, 3.0, 1.0, 2.5, 1.0],
            beta: 1.0,
        };
        let theta = transition_matrix(&params, &d, &g).unwrap().to_dense();
        let oracle = theta_oracle(&params, &d, &g);
        for (a, b) in theta.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn conserved_diagonal_has_zero_cost() {
        let regions = grid(2, 1.0);
        let d = build_distance_matrix(&regions).unwrap();
        let g = Arc::new(neighbor_sets(&d, 1.5).unwrap());
        let counts = CountPanel::from_rows(&vec![vec![10.0, 20.0, 30.0, 40.0]; 3]).unwrap();
        let mut m = FlowTensor::zeros(2, Arc::clone(&g));
        for t in 0..2 {
            for i in 0..4 {
                m.set(t, i, i, counts.get(t, i)).unwrap();
            }
        }
        let params = ModelParams::uniform(4, 0.1, 1.0, 1.0);
        let base = exact_loglik(&m, &params, &counts, 1.0, &d).unwrap();
        assert_eq!(base.cost, 0.0);
        assert_eq!(conservation_cost(&m, &counts).unwrap(), 0.0);

        let delta = 2.5;
        m.set(1, 2, 2, 30.0 - delta).unwrap();
        let changed = exact_loglik(&m, &params, &counts, 1.0, &d).unwrap();
        assert!((changed.cost - base.cost - 2.0 * delta * delta).abs() < 1e-12);
    }

    #[test]
    fn unit_flows_give_entry_count() {
        let inst = random_instance(3, 5, 2);
        let ones = FlowTensor::from_values(2, Arc::clone(&inst.pattern), vec![1.0; 2 * inst.pattern.nnz()]).unwrap();
        let b = exact_loglik(&ones, &inst.params, &inst.counts, 1.0, &inst.d).unwrap();
        assert_eq!(b.l2, (2 * inst.pattern.nnz()) as f64);
        assert!((b.total - (b.l0 + b.l1 + b.l2 - 0.5 * b.cost)).abs() < 1e-9);
    }

    #[test]
    fn negative_flow_rejected() {
        let mut inst = random_instance(4, 3, 1);
        inst.m.values_mut()[0] = -1.0;
        assert!(exact_loglik(&inst.m, &inst.params, &inst.counts, 1.0, &inst.d).is_err());
    }

    #[test]
    fn zero_flow_entropy_convention() {
        assert_eq!(entropy_term(0.0), 0.0);
        assert_eq!(entropy_term(1.0), 1.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let inst = random_instance(11, 5, 1);
        let lambda = 0.3;
        let grad = exact_grad_m(&inst.m, &inst.params, &inst.counts, lambda, &inst.d).unwrap();
        let mut probe = inst.m.clone();
        for p in 0..probe.values().len() {
            let x = inst.m.values()[p];
            let h = 1e-4 * x.abs().max(1.0);
            probe.values_mut()[p] = x + h;
            let up = exact_loglik(&probe, &inst.params, &inst.counts, lambda, &inst.d).unwrap().total;
            probe.values_mut()[p] = x - h;
            let down = exact_loglik(&probe, &inst.params, &inst.counts, lambda, &inst.d).unwrap().total;
            probe.values_mut()[p] = x;
            let fd = (up - down) / (2.0 * h);
            let g = grad.values()[p];
            assert!((g - fd).abs() / g.abs().max(1.0) < 1e-6, "entry {p}: {g} vs {fd}");
        }
    }

    #[test]
    fn conserved_flows_have_no_cost_gradient() {
        let inst = random_instance(5, 4, 1);
        // build M with exact row and column sums: take M and set counts from it
        let rows = inst.m.row_sums(0);
        let cols = inst.m.col_sums(0);
        let counts = CountPanel::from_rows(&[rows, cols]).unwrap();
        let with_cost = exact_grad_m(&inst.m, &inst.params, &counts, 7.0, &inst.d).unwrap();
        let without = exact_grad_m(&inst.m, &inst.params, &counts, 0.0, &inst.d).unwrap();
        for (a, b) in with_cost.values().iter().zip(without.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_entry_has_no_entropy_gradient() {
        let inst = random_instance(6, 3, 1);
        let mut m = inst.m.clone();
        m.values_mut()[1] = 1.0;
        let g = exact_grad_m(&m, &inst.params, &inst.counts, 0.0, &inst.d).unwrap();
        let obj = ExactObjective::new(&inst.params, &inst.counts, 0.0, &inst.d, &inst.pattern).unwrap();
        assert_eq!(g.values()[1], obj.weights()[1]);
    }

    #[test]
    fn parallel_and_serial_agree() {
        // large enough to cross the parallel threshold
        let regions = grid(16, 1.0);
        let d = build_distance_matrix(&regions).unwrap();
        let g = Arc::new(neighbor_sets(&d, 100.0).unwrap());
        assert!(g.nnz() >= PAR_THRESHOLD);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = g.len();
        let counts = CountPanel::new(2, n, (0..2 * n).map(|_| rng.random_range(1e3..1e5)).collect()).unwrap();
        let params = ModelParams::uniform(n, 0.05, 0.5, 0.3);
        let values: Vec<f64> = (0..g.nnz()).map(|_| rng.random_range(0.0..1e3)).collect();
        let obj = ExactObjective::new(&params, &counts, 2.0, &d, &g).unwrap();
        let par = obj.breakdown(&values);
        // serial reference through an explicit per-entry loop
        let rows = g.rows();
        let mut l0 = 0.0;
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for (p, &v) in values.iter().enumerate() {
            if rows[p] == g.cols()[p] {
                l0 += obj.weights()[p] * v;
            } else {
                l1 += obj.weights()[p] * v;
            }
            l2 += entropy_term(v);
        }
        for (a, b) in [(par.l0, l0), (par.l1, l1), (par.l2, l2)] {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn rows_are_stochastic(seed in 0u64..10_000, n in 2usize..8) {
            let inst = random_instance(seed, n, 1);
            let theta = transition_matrix(&inst.params, &inst.d, &inst.pattern).unwrap();
            for i in 0..n {
                let row = theta.row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn rescaling_s_leaves_theta_and_l1_unchanged(seed in 0u64..10_000, c in 1e-3f64..1e3) {
            let inst = random_instance(seed, 5, 2);
            let mut scaled = inst.params.clone();
            scaled.s.iter_mut().for_each(|s| *s *= c);
            let a = transition_matrix(&inst.params, &inst.d, &inst.pattern).unwrap();
            let b = transition_matrix(&scaled, &inst.d, &inst.pattern).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let la = exact_loglik(&inst.m, &inst.params, &inst.counts, 1.0, &inst.d).unwrap();
            let lb = exact_loglik(&inst.m, &scaled, &inst.counts, 1.0, &inst.d).unwrap();
            prop_assert!((la.l1 - lb.l1).abs() <= 1e-10 * la.l1.abs().max(1.0));
        }

        #[test]
        fn gradient_agrees_with_finite_differences(seed in 0u64..10_000, lambda in 0.0f64..5.0) {
            let inst = random_instance(seed, 4, 2);
            let grad = exact_grad_m(&inst.m, &inst.params, &inst.counts, lambda, &inst.d).unwrap();
            let mut probe = inst.m.clone();
            for p in 0..probe.values().len() {
                let x = inst.m.values()[p];
                let h = 1e-4 * x.abs().max(1.0);
                probe.values_mut()[p] = x + h;
                let up = exact_loglik(&probe, &inst.params, &inst.counts, lambda, &inst.d).unwrap().total;
                probe.values_mut()[p] = x - h;
                let down = exact_loglik(&probe, &inst.params, &inst.counts, lambda, &inst.d).unwrap().total;
                probe.values_mut()[p] = x;
                let fd = (up - down) / (2.0 * h);
                let g = grad.values()[p];
                prop_assert!((g - fd).abs() / g.abs().max(1.0) < 1e-5);
            }
        }

        #[test]
        fn cost_gradient_vanishes_iff_marginals_hold(seed in 0u64..10_000) {
            let inst = random_instance(seed, 4, 1);
            let rows = inst.m.row_sums(0);
            let cols = inst.m.col_sums(0);
            let mut bumped_rows = rows.clone();
            bumped_rows[1] += 3.0;
            let counts = CountPanel::from_rows(&[bumped_rows, cols]).unwrap();
            let with_cost = exact_grad_m(&inst.m, &inst.params, &counts, 1.0, &inst.d).unwrap();
            let without = exact_grad_m(&inst.m, &inst.params, &counts, 0.0, &inst.d).unwrap();
            let rowsv = inst.pattern.rows();
            for (p, (a, b)) in with_cost.values().iter().zip(without.values()).enumerate() {
                let touched = rowsv[p] == 1;
                prop_assert_eq!((a - b).abs() > 1e-9, touched);
            }
        }
    }
}
