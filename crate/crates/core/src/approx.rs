//! Approximate fitting through the inbound/outbound/stayer decomposition.
//!
//! The flows are replaced by three decoupled blocks: `X_tij = M_tji` (arrivals
//! at `i` from `j`, diagonal included), `Y_ti = Σ_{j≠i} M_tij` (departures) and
//! `Z_ti = M_tii` (stayers). The objective
//!
//! ```text
//! L_approx = Σ_tij X_tij (log μ_ij + 1 - log X_tij)
//!          + Σ_ti  Y_ti (log(N_ti π_i) + 1 - log Y_ti)
//!          + Σ_ti  Z_ti (log(N_ti (1 - π_i)) + 1 - log Z_ti)
//! C(X,Y,Z) = Σ_ti (N_ti - Y_ti - Z_ti)² + (N_t+1,i - Σ_j X_tij)²
//! ```
//!
//! with `μ_ij = Σ_t N_tj θ_ji` is maximized together with `π` and `(s, β)`;
//! flows are then recovered from the full likelihood with those parameters
//! fixed. Rounds can be chained, each starting from the previous flows.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curvature::BlockCurvature;
use crate::error::{Error, Result};
use crate::exact::{
    default_params, departure_ratio, maximize_flows, maximize_gathering, update_pi, update_s_beta, FitResult,
    FitTermination, GatheringStats, SolverConfig,
};
use crate::flow::{CountPanel, FlowTensor};
use crate::geo::{build_distance_matrix, neighbor_sets, DistanceMatrix, NeighborSets, RegionSet};
use crate::likelihood::{exact_loglik, transition_matrix, ModelParams};
use crate::metrics::nae;
use crate::optim::{minimize_box_preconditioned, BoxSpec};
use crate::sum::NeumaierSum;
use crate::M_MIN;

#[inline]
fn ln_m(x: f64) -> f64 {
    x.max(M_MIN).ln()
}

/// Decoupled flow variables.
#[derive(Debug, Clone, PartialEq)]
pub struct XyzState {
    /// Inbound view: entry `(i, j)` of step `t` is `M_tji`.
    pub x: FlowTensor,
    /// `steps × n` departures.
    pub y: Vec<f64>,
    /// `steps × n` stayers.
    pub z: Vec<f64>,
}

impl XyzState {
    pub fn from_flows(m: &FlowTensor) -> Result<Self> {
        let pattern = m.pattern();
        let transpose = transpose_or_err(pattern)?;
        let n = pattern.len();
        let steps = m.steps();
        let mut x = FlowTensor::zeros(steps, Arc::clone(pattern));
        let mut y = vec![0.0; steps * n];
        let mut z = vec![0.0; steps * n];
        for t in 0..steps {
            let src = m.step(t);
            for (dst, &q) in x.step_mut(t).iter_mut().zip(&transpose) {
                *dst = src[q];
            }
            for i in 0..n {
                for (p, &j) in pattern.row_range(i).zip(pattern.neighbors(i)) {
                    if j == i {
                        z[t * n + i] = src[p];
                    } else {
                        y[t * n + i] += src[p];
                    }
                }
            }
        }
        Ok(Self { x, y, z })
    }

    /// Flows read off the inbound view: `M_tij = X_tji`.
    pub fn to_flows(&self) -> Result<FlowTensor> {
        let pattern = self.x.pattern();
        let transpose = transpose_or_err(pattern)?;
        let mut m = FlowTensor::zeros(self.x.steps(), Arc::clone(pattern));
        for t in 0..self.x.steps() {
            let src = self.x.step(t);
            for (dst, &q) in m.step_mut(t).iter_mut().zip(&transpose) {
                *dst = src[q];
            }
        }
        Ok(m)
    }

    fn to_vec(&self) -> Vec<f64> {
        [self.x.values(), &self.y, &self.z].concat()
    }

    fn from_vec(&self, v: Vec<f64>) -> Result<Self> {
        let nx = self.x.values().len();
        let ny = self.y.len();
        let x = FlowTensor::from_values(self.x.steps(), Arc::clone(self.x.pattern()), v[..nx].to_vec())?;
        Ok(Self { x, y: v[nx..nx + ny].to_vec(), z: v[nx + ny..].to_vec() })
    }

    fn check(&self, counts: &CountPanel) -> Result<()> {
        self.x.check_shape(counts)?;
        self.x.check_nonnegative()?;
        let len = counts.steps() * counts.regions();
        if self.y.len() != len || self.z.len() != len {
            return Err(Error::input("departure and stayer blocks do not match the counts"));
        }
        if let Some(v) = self.y.iter().chain(&self.z).find(|v| v.is_nan() || **v < 0.0) {
            return Err(Error::input(format!("departure or stayer value {v} is negative")));
        }
        Ok(())
    }
}

fn transpose_or_err(pattern: &NeighborSets) -> Result<Vec<usize>> {
    pattern
        .transpose_positions()
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::input("inbound view needs symmetric neighbor sets"))
}

/// `π_i = Σ_t Y_ti / Σ_t (Y_ti + Z_ti)`, clamped like the exact update.
pub fn update_pi_approx(state: &XyzState) -> Vec<f64> {
    let n = state.x.regions();
    let mut away = vec![NeumaierSum::default(); n];
    let mut total = vec![NeumaierSum::default(); n];
    for (k, (y, z)) in state.y.iter().zip(&state.z).enumerate() {
        away[k % n].add(*y);
        total[k % n].add(*y);
        total[k % n].add(*z);
    }
    departure_ratio(
        &away.iter().map(NeumaierSum::value).collect::<Vec<_>>(),
        &total.iter().map(NeumaierSum::value).collect::<Vec<_>>(),
    )
}

/// Gathering statistics built from the decoupled blocks: arrivals from the
/// off-diagonal inbound view, departures from `Y`.
pub fn gathering_stats_approx(state: &XyzState, d: &DistanceMatrix) -> GatheringStats {
    let n = state.x.regions();
    let mut inflow = vec![NeumaierSum::default(); n];
    let mut outflow = vec![NeumaierSum::default(); n];
    let mut distance = NeumaierSum::default();
    state.x.for_each_active(|_, i, j, v| {
        if i != j {
            inflow[i].add(v);
            distance.add(d.get(i, j) * v);
        }
    });
    for (k, y) in state.y.iter().enumerate() {
        outflow[k % n].add(*y);
    }
    GatheringStats {
        inflow: inflow.iter().map(NeumaierSum::value).collect(),
        outflow: outflow.iter().map(NeumaierSum::value).collect(),
        distance_flow: distance.value(),
    }
}

/// Value of the approximate objective and its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxBreakdown {
    pub likelihood: f64,
    pub cost: f64,
    pub lambda: f64,
    /// `likelihood - (λ/2) cost`.
    pub total: f64,
}

/// Approximate objective with the parameter-dependent logarithms precomputed.
#[derive(Debug, Clone)]
pub struct ApproxObjective<'a> {
    pattern: &'a NeighborSets,
    counts: &'a CountPanel,
    log_mu: Vec<f64>,
    log_away: Vec<f64>,
    log_stay: Vec<f64>,
    lambda: f64,
}

impl<'a> ApproxObjective<'a> {
    pub fn new(
        params: &ModelParams,
        counts: &'a CountPanel,
        lambda: f64,
        d: &DistanceMatrix,
        pattern: &'a NeighborSets,
    ) -> Result<Self> {
        if counts.regions() != pattern.len() {
            return Err(Error::input("counts and neighbor sets disagree on region count"));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::input(format!("lambda must be finite and nonnegative, got {lambda}")));
        }
        let theta = transition_matrix(params, d, pattern)?;
        let transpose = transpose_or_err(pattern)?;
        let n = pattern.len();
        // μ_ij = Σ_t N_tj θ_ji over the origin snapshots of every step
        let mut log_mu = vec![0.0; pattern.nnz()];
        for i in 0..n {
            for (p, &j) in pattern.row_range(i).zip(pattern.neighbors(i)) {
                let mut mu = NeumaierSum::default();
                for t in 0..counts.steps() {
                    mu.add(counts.get(t, j) * theta.values()[transpose[p]]);
                }
                log_mu[p] = ln_m(mu.value());
            }
        }
        let mut log_away = vec![0.0; counts.steps() * n];
        let mut log_stay = vec![0.0; counts.steps() * n];
        for t in 0..counts.steps() {
            for i in 0..n {
                let c = counts.get(t, i);
                log_away[t * n + i] = ln_m(c * params.pi[i]);
                log_stay[t * n + i] = ln_m(c * (1.0 - params.pi[i]));
            }
        }
        Ok(Self { pattern, counts, log_mu, log_away, log_stay, lambda })
    }

    pub fn dim(&self) -> usize {
        self.counts.steps() * (self.pattern.nnz() + 2 * self.pattern.len())
    }

    pub fn breakdown(&self, values: &[f64]) -> ApproxBreakdown {
        self.evaluate(values, None)
    }

    /// Gradient layout matches [`XyzState`]: `X`, then `Y`, then `Z`.
    pub fn value_and_gradient(&self, values: &[f64], grad: &mut [f64]) -> ApproxBreakdown {
        self.evaluate(values, Some(grad))
    }

    pub fn negated(&self, values: &[f64], grad: &mut [f64]) -> f64 {
        let b = self.evaluate(values, Some(grad));
        grad.iter_mut().for_each(|g| *g = -*g);
        -b.total
    }

    fn evaluate(&self, values: &[f64], mut grad: Option<&mut [f64]>) -> ApproxBreakdown {
        let pattern = self.pattern;
        let n = pattern.len();
        let nnz = pattern.nnz();
        let steps = self.counts.steps();
        let (xs, rest) = values.split_at(steps * nnz);
        let (ys, zs) = rest.split_at(steps * n);
        let mut like = NeumaierSum::default();
        let mut cost = NeumaierSum::default();
        for t in 0..steps {
            for i in 0..n {
                let range = pattern.row_range(i);
                let base = t * nnz;
                let arrived: f64 = xs[base + range.start..base + range.end].iter().sum();
                let inbound_gap = self.counts.get(t + 1, i) - arrived;
                cost.add(inbound_gap * inbound_gap);
                for p in range {
                    let x = xs[base + p];
                    let log_x = ln_m(x);
                    like.add(x * (self.log_mu[p] + 1.0 - log_x));
                    if let Some(g) = grad.as_deref_mut() {
                        g[base + p] = self.log_mu[p] - log_x + self.lambda * inbound_gap;
                    }
                }

                let k = t * n + i;
                let (y, z) = (ys[k], zs[k]);
                let outbound_gap = self.counts.get(t, i) - y - z;
                cost.add(outbound_gap * outbound_gap);
                like.add(y * (self.log_away[k] + 1.0 - ln_m(y)));
                like.add(z * (self.log_stay[k] + 1.0 - ln_m(z)));
                if let Some(g) = grad.as_deref_mut() {
                    g[steps * nnz + k] = self.log_away[k] - ln_m(y) + self.lambda * outbound_gap;
                    g[steps * (nnz + n) + k] = self.log_stay[k] - ln_m(z) + self.lambda * outbound_gap;
                }
            }
        }
        let (likelihood, cost) = (like.value(), cost.value());
        ApproxBreakdown { likelihood, cost, lambda: self.lambda, total: likelihood - 0.5 * self.lambda * cost }
    }
}

/// Approximate objective at `state` and its gradient as a state-shaped value.
pub fn approx_loglik_and_grad(
    state: &XyzState,
    params: &ModelParams,
    counts: &CountPanel,
    lambda: f64,
    d: &DistanceMatrix,
) -> Result<(ApproxBreakdown, XyzState)> {
    state.check(counts)?;
    let objective = ApproxObjective::new(params, counts, lambda, d, state.x.pattern())?;
    let values = state.to_vec();
    let mut grad = vec![0.0; values.len()];
    let b = objective.value_and_gradient(&values, &mut grad);
    for (name, v) in [("likelihood", b.likelihood), ("cost", b.cost)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: format!("approximate {name}"), value: v });
        }
    }
    Ok((b, state.from_vec(grad)?))
}

/// When to stop chaining rounds.
#[derive(Debug, Clone)]
pub enum OuterStop {
    /// Run exactly `max_rounds` rounds.
    Rounds,
    /// Stop once NAE against `truth` reaches `target`, or as soon as a round
    /// fails to lower it (the previous round is then returned).
    NaeTarget { target: f64, truth: Arc<FlowTensor> },
    /// Stop when `max |ΔM| / max(1, M)` between rounds drops below `threshold`.
    FlowChange { threshold: f64 },
}

#[derive(Debug, Clone)]
pub struct OuterLoopConfig {
    pub max_rounds: usize,
    pub stop: OuterStop,
    /// Relative change of the approximate objective ending the inner loop.
    pub inner_tol: f64,
}

impl Default for OuterLoopConfig {
    fn default() -> Self {
        Self { max_rounds: 1, stop: OuterStop::FlowChange { threshold: 1e-2 }, inner_tol: 1e-5 }
    }
}

impl OuterLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(Error::input("at least one round is required"));
        }
        if !(self.inner_tol.is_finite() && self.inner_tol > 0.0) {
            return Err(Error::input(format!("inner tolerance must be positive, got {}", self.inner_tol)));
        }
        Ok(())
    }
}

/// Diagonal `N_ti` plus `U[0, 1)` on every off-diagonal active entry, one
/// stream per `(t, i)`.
pub fn init_approx(counts: &CountPanel, pattern: &Arc<NeighborSets>, seed: u64) -> FlowTensor {
    let n = pattern.len();
    let mut m = FlowTensor::zeros(counts.steps(), Arc::clone(pattern));
    for t in 0..counts.steps() {
        let step = m.step_mut(t);
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((t * n + i) as u64);
            for (p, &j) in pattern.row_range(i).zip(pattern.neighbors(i)) {
                step[p] = if j == i { counts.get(t, i) } else { rng.random_range(0.0..1.0) };
            }
        }
    }
    m
}

/// Largest `|a - b| / max(1, |b|)` over the entries.
pub fn relative_flow_change(a: &FlowTensor, b: &FlowTensor) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

struct Round {
    flows: FlowTensor,
    params: ModelParams,
    cycles: usize,
}

/// One pass of steps 1-6 starting from flows `m0`.
fn run_round(
    counts: &CountPanel,
    d: &DistanceMatrix,
    m0: &FlowTensor,
    config: &SolverConfig,
    inner_tol: f64,
) -> Result<Round> {
    let pattern = Arc::clone(m0.pattern());
    let gathering = config.gathering_options(d);
    let flow_opts = config.flow_options();

    let mut params = default_params(d, &pattern);
    params.pi = update_pi(m0);
    let fit = update_s_beta(m0, d, &params.s, params.beta, &gathering)?;
    params.s = fit.s;
    params.beta = fit.beta;
    let mut cycles = usize::from(fit.cycle_detected);

    let mut state = XyzState::from_flows(m0)?;
    let mut previous: Option<f64> = None;
    for iter in 1..=config.max_outer {
        let objective = ApproxObjective::new(&params, counts, config.lambda, d, &pattern)?;
        let bounds = BoxSpec::lower_bounded(objective.dim(), M_MIN);
        let (v, report) = minimize_box_preconditioned(
            |x, g| objective.negated(x, g),
            &mut BlockCurvature::new(&pattern, counts.steps(), config.lambda),
            &state.to_vec(),
            &bounds,
            &flow_opts,
        );
        log::debug!("approximate step: {} iterations, {:?}", report.iterations, report.termination);
        state = state.from_vec(v)?;

        params.pi = update_pi_approx(&state);
        let stats = gathering_stats_approx(&state, d);
        let fit = maximize_gathering(&stats, &params.s, params.beta, d, &pattern, &gathering)?;
        cycles += usize::from(fit.cycle_detected);
        params.s = fit.s;
        params.beta = fit.beta;

        let (b, _) = approx_loglik_and_grad(&state, &params, counts, config.lambda, d)?;
        let change = previous.map_or(f64::INFINITY, |p| (b.total - p).abs() / p.abs().max(1.0));
        log::info!("approximate iteration {iter}: L = {:.10e}, relative change {change:.3e}", b.total);
        previous = Some(b.total);
        if change < inner_tol {
            break;
        }
    }

    let (flows, _) = maximize_flows(&state.to_flows()?, &params, counts, config.lambda, d, &flow_opts)?;
    Ok(Round { flows, params, cycles })
}

/// Builds distances and neighbor sets, starts from [`init_approx`] and runs
/// [`fit_approx_from`].
pub fn fit_approx(
    counts: &CountPanel,
    regions: &RegionSet,
    config: &SolverConfig,
    outer: &OuterLoopConfig,
) -> Result<FitResult> {
    config.validate()?;
    let d = build_distance_matrix(regions)?;
    let pattern = Arc::new(neighbor_sets(&d, config.cutoff)?);
    if counts.regions() != pattern.len() {
        return Err(Error::input(format!(
            "counts cover {} regions but the geometry has {}",
            counts.regions(),
            pattern.len()
        )));
    }
    let m0 = init_approx(counts, &pattern, config.seed);
    fit_approx_from(counts, &d, m0, config, outer)
}

/// Chains rounds from `m0` until the outer stop rule fires.
pub fn fit_approx_from(
    counts: &CountPanel,
    d: &DistanceMatrix,
    m0: FlowTensor,
    config: &SolverConfig,
    outer: &OuterLoopConfig,
) -> Result<FitResult> {
    config.validate()?;
    outer.validate()?;
    m0.check_shape(counts)?;
    let clock = Instant::now();
    let mut current = m0;
    let mut best: Option<Round> = None;
    let mut trace = Vec::new();
    let mut metric = Vec::new();
    let mut cycles = 0;
    let mut termination = FitTermination::MaxIterations;
    let mut rounds = 0;

    for round in 1..=outer.max_rounds {
        let result = run_round(counts, d, &current, config, outer.inner_tol)?;
        cycles += result.cycles;
        let b = exact_loglik(&result.flows, &result.params, counts, config.lambda, d)?;
        b.check_finite()?;

        let mut stop = None;
        match &outer.stop {
            OuterStop::Rounds => {}
            OuterStop::NaeTarget { target, truth } => {
                let err = nae(&result.flows, truth)?;
                log::info!("round {round}: NAE {err:.5}");
                if metric.last().is_some_and(|&prev| err >= prev) {
                    termination = FitTermination::NoImprovement;
                    break;
                }
                metric.push(err);
                if err <= *target {
                    stop = Some(FitTermination::TargetReached);
                }
            }
            OuterStop::FlowChange { threshold } => {
                let change = relative_flow_change(&result.flows, &current);
                log::info!("round {round}: relative flow change {change:.3e}");
                metric.push(change);
                if change < *threshold {
                    stop = Some(FitTermination::FlowsSettled);
                }
            }
        }
        rounds = round;
        trace.push(b);
        current = result.flows.clone();
        best = Some(result);
        if let Some(reason) = stop {
            termination = reason;
            break;
        }
    }

    let best = best.expect("at least one round ran");
    Ok(FitResult {
        flows: best.flows,
        params: best.params,
        trace,
        termination,
        iterations: rounds,
        cycles_detected: cycles,
        round_metric: metric,
        seconds: clock.elapsed().as_secs_f64(),
    })
}
