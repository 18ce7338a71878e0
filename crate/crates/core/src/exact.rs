//! Alternating maximization of the penalized likelihood over the flows `M`,
//! the departure probabilities `π` and the gathering scores `(s, β)`.

use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::{Hash, Hasher};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curvature::FlowCurvature;
use crate::error::{Error, Result};
use crate::flow::{CountPanel, FlowTensor};
use crate::geo::{build_distance_matrix, neighbor_sets, DistanceMatrix, NeighborSets, RegionSet};
use crate::likelihood::{exact_loglik, ln_floor, log_normalizers, ExactObjective, LikelihoodBreakdown, ModelParams};
use crate::optim::{minimize_box_preconditioned, minimize_scalar_bounded, BoxSpec, LbfgsOptions, OptimReport};
use crate::sum::NeumaierSum;
use crate::{M_MIN, PI_MAX};

/// Floor applied to gathering scores after normalization.
pub const S_FLOOR: f64 = 1e-12;

const INIT_PI: f64 = 0.02;
const INIT_S: f64 = 0.02;

/// Settings shared by both fitting procedures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Travel cutoff `K` defining the admissible neighbor sets.
    pub cutoff: f64,
    /// Weight of the marginal conservation penalty.
    pub lambda: f64,
    /// Outer convergence threshold on the relative likelihood change.
    pub epsilon: f64,
    /// Search interval for `β`; `None` means `[-10/d̄, 50/d̄]`.
    pub beta_bounds: Option<(f64, f64)>,
    pub max_outer: usize,
    /// Iteration cap of the `(s, β)` maximization.
    pub max_inner: usize,
    /// Relative change of the gathering objective that ends the `(s, β)` loop.
    pub inner_tol: f64,
    /// Number of recent `(s, β)` states remembered for cycle detection.
    pub cycle_window: usize,
    /// Projected-gradient tolerance of the flow maximization.
    pub flow_tol: f64,
    /// Relative objective reduction below which the flow maximization stops.
    pub flow_ftol: f64,
    pub flow_max_iter: usize,
    pub flow_history: usize,
    /// Seed for random initializations.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            cutoff: 2.0,
            lambda: 1.0,
            epsilon: 1e-4,
            beta_bounds: None,
            max_outer: 200,
            max_inner: 500,
            inner_tol: 1e-9,
            cycle_window: 50,
            flow_tol: 1e-12,
            flow_ftol: 1e-12,
            flow_max_iter: 5_000,
            flow_history: 10,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::input(format!("{name} must be positive, got {v}")))
            }
        };
        if !(self.cutoff.is_finite() && self.cutoff >= 0.0) {
            return Err(Error::input(format!("cutoff must be finite and nonnegative, got {}", self.cutoff)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::input(format!("lambda must be finite and nonnegative, got {}", self.lambda)));
        }
        positive("epsilon", self.epsilon)?;
        positive("inner_tol", self.inner_tol)?;
        positive("flow_tol", self.flow_tol)?;
        if let Some((lo, hi)) = self.beta_bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::input(format!("beta bounds ({lo}, {hi}) are not an interval")));
            }
        }
        if self.max_outer == 0 || self.max_inner == 0 || self.flow_max_iter == 0 {
            return Err(Error::input("iteration caps must be at least 1"));
        }
        Ok(())
    }

    pub fn flow_options(&self) -> LbfgsOptions {
        LbfgsOptions {
            history: self.flow_history,
            tol: self.flow_tol,
            ftol: self.flow_ftol,
            max_iter: self.flow_max_iter,
            ..LbfgsOptions::default()
        }
    }

    pub fn gathering_options(&self, d: &DistanceMatrix) -> GatheringOptions {
        GatheringOptions {
            beta_bounds: self.beta_bounds.unwrap_or_else(|| default_beta_bounds(d)),
            inner_tol: self.inner_tol,
            max_iter: self.max_inner,
            cycle_window: self.cycle_window,
        }
    }
}

/// `[-10/d̄, 50/d̄]` with `d̄` the mean positive distance.
pub fn default_beta_bounds(d: &DistanceMatrix) -> (f64, f64) {
    let mean = d.mean_positive();
    if mean > 0.0 {
        (-10.0 / mean, 50.0 / mean)
    } else {
        (-10.0, 50.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Everyone stays: `M_tii = N_ti`.
    Static,
    /// Static plus uniform noise `δ_tij ~ U[0, N_ti)` on every active entry.
    StaticJittered { seed: u64 },
    /// Departures split evenly over neighbors: `|ΔN_i| / |Γ_i \ i|`.
    Moving,
}

/// Initial flows and parameters.
#[derive(Debug, Clone)]
pub struct Initialization {
    pub flows: FlowTensor,
    pub params: ModelParams,
    /// Regions with no neighbor whose count changes; their flows stay on the
    /// diagonal.
    pub flagged: Vec<usize>,
}

/// Default parameters: `π = s = 0.02`, `β = 50 / max d`. Regions without any
/// neighbor get `π = 0`.
pub fn default_params(d: &DistanceMatrix, pattern: &NeighborSets) -> ModelParams {
    let n = pattern.len();
    let max = d.max();
    let beta = if max > 0.0 { 50.0 / max } else { 0.0 };
    let mut params = ModelParams::uniform(n, INIT_PI, INIT_S, beta);
    for i in 0..n {
        if pattern.degree(i) == 0 {
            params.pi[i] = 0.0;
        }
    }
    params
}

fn check_counts(counts: &CountPanel, pattern: &NeighborSets) -> Result<()> {
    if counts.regions() != pattern.len() {
        return Err(Error::input(format!(
            "counts cover {} regions but the geometry has {}",
            counts.regions(),
            pattern.len()
        )));
    }
    Ok(())
}

/// Static or jittered initial flows with the default parameters.
///
/// Jitter draws come from an independent stream per `(t, i)` so the result
/// only depends on the seed.
pub fn init_static(
    counts: &CountPanel,
    d: &DistanceMatrix,
    pattern: &Arc<NeighborSets>,
    strategy: InitStrategy,
) -> Result<(FlowTensor, ModelParams)> {
    check_counts(counts, pattern)?;
    let mut m = FlowTensor::zeros(counts.steps(), Arc::clone(pattern));
    let seed = match strategy {
        InitStrategy::Static => None,
        InitStrategy::StaticJittered { seed } => Some(seed),
        InitStrategy::Moving => return Err(Error::input("init_static called with the moving strategy")),
    };
    let n = pattern.len();
    for t in 0..counts.steps() {
        let step = m.step_mut(t);
        for i in 0..n {
            let count = counts.get(t, i);
            let range = pattern.row_range(i);
            if let Some(seed) = seed {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((t * n + i) as u64);
                for p in range {
                    step[p] = if count > 0.0 { rng.random_range(0.0..count) } else { 0.0 };
                }
            }
            step[pattern.diag_pos(i)] += count;
        }
    }
    Ok((m, default_params(d, pattern)))
}

/// Moving initial flows: diagonal `N_ti`, every other active entry
/// `|N_ti - N_t+1,i| / |Γ_i \ i|`. Regions without neighbors whose count
/// changes are returned as flagged.
pub fn init_moving(counts: &CountPanel, pattern: &Arc<NeighborSets>) -> Result<(FlowTensor, Vec<usize>)> {
    check_counts(counts, pattern)?;
    let mut m = FlowTensor::zeros(counts.steps(), Arc::clone(pattern));
    let mut flagged = Vec::new();
    for t in 0..counts.steps() {
        let step = m.step_mut(t);
        for i in 0..pattern.len() {
            let change = (counts.get(t, i) - counts.get(t + 1, i)).abs();
            let degree = pattern.degree(i);
            for (p, &j) in pattern.row_range(i).zip(pattern.neighbors(i)) {
                step[p] = if j == i { counts.get(t, i) } else { change / degree as f64 };
            }
            if degree == 0 && change != 0.0 && !flagged.contains(&i) {
                flagged.push(i);
            }
        }
    }
    if !flagged.is_empty() {
        log::warn!("{} regions change count but have no admissible neighbor", flagged.len());
    }
    Ok((m, flagged))
}

/// Dispatches on the strategy; every strategy starts from the default
/// parameters.
pub fn initialize(
    counts: &CountPanel,
    d: &DistanceMatrix,
    pattern: &Arc<NeighborSets>,
    strategy: InitStrategy,
) -> Result<Initialization> {
    match strategy {
        InitStrategy::Moving => {
            let (flows, flagged) = init_moving(counts, pattern)?;
            Ok(Initialization { flows, params: default_params(d, pattern), flagged })
        }
        _ => {
            let (flows, params) = init_static(counts, d, pattern, strategy)?;
            Ok(Initialization { flows, params, flagged: Vec::new() })
        }
    }
}

/// `π_i = Σ_t Σ_{j≠i} M_tij / Σ_t Σ_j M_tij`, clamped to `[0, 1 - 1e-9]`.
/// Regions without any flow get `π_i = 0`.
pub fn update_pi(m: &FlowTensor) -> Vec<f64> {
    let pattern = m.pattern();
    let n = pattern.len();
    let mut away = vec![NeumaierSum::default(); n];
    let mut total = vec![NeumaierSum::default(); n];
    for t in 0..m.steps() {
        let step = m.step(t);
        for i in 0..n {
            for (p, &j) in pattern.row_range(i).zip(pattern.neighbors(i)) {
                total[i].add(step[p]);
                if j != i {
                    away[i].add(step[p]);
                }
            }
        }
    }
    departure_ratio(
        &away.iter().map(NeumaierSum::value).collect::<Vec<_>>(),
        &total.iter().map(NeumaierSum::value).collect::<Vec<_>>(),
    )
}

pub(crate) fn departure_ratio(away: &[f64], total: &[f64]) -> Vec<f64> {
    let mut zero = 0;
    let pi = away
        .iter()
        .zip(total)
        .map(|(&a, &tot)| {
            if tot > 0.0 {
                (a / tot).clamp(0.0, PI_MAX)
            } else {
                zero += 1;
                0.0
            }
        })
        .collect();
    if zero > 0 {
        log::warn!("{zero} regions carry no flow; their departure probability is set to 0");
    }
    pi
}

/// Sufficient statistics of the gathering objective
/// `f(s, β) = Σ_i A_i log s_i - Σ_i B_i log S_i - β D`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatheringStats {
    /// `A_i`: off-diagonal flow arriving at `i`.
    pub inflow: Vec<f64>,
    /// `B_i`: off-diagonal flow leaving `i`.
    pub outflow: Vec<f64>,
    /// `D = Σ d_ij M_tij` over off-diagonal entries.
    pub distance_flow: f64,
}

impl GatheringStats {
    pub fn from_flows(m: &FlowTensor, d: &DistanceMatrix) -> Self {
        let n = m.regions();
        let mut inflow = vec![NeumaierSum::default(); n];
        let mut outflow = vec![NeumaierSum::default(); n];
        let mut distance = NeumaierSum::default();
        m.for_each_active(|_, i, j, v| {
            if i != j {
                inflow[j].add(v);
                outflow[i].add(v);
                distance.add(d.get(i, j) * v);
            }
        });
        Self {
            inflow: inflow.iter().map(NeumaierSum::value).collect(),
            outflow: outflow.iter().map(NeumaierSum::value).collect(),
            distance_flow: distance.value(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.outflow.iter().all(|&b| b <= 0.0)
    }

    /// Gathering objective at `(s, β)`.
    pub fn objective(&self, s: &[f64], beta: f64, d: &DistanceMatrix, pattern: &NeighborSets) -> f64 {
        let log_norm = log_normalizers(s, beta, d, pattern);
        self.objective_with(s, beta, &log_norm)
    }

    fn objective_with(&self, s: &[f64], beta: f64, log_norm: &[f64]) -> f64 {
        let mut acc = NeumaierSum::default();
        for i in 0..s.len() {
            if self.inflow[i] > 0.0 {
                acc.add(self.inflow[i] * ln_floor(s[i]));
            }
            if self.outflow[i] > 0.0 {
                acc.add(-self.outflow[i] * log_norm[i]);
            }
        }
        acc.add(-beta * self.distance_flow);
        acc.value()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatheringOptions {
    pub beta_bounds: (f64, f64),
    pub inner_tol: f64,
    pub max_iter: usize,
    pub cycle_window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatheringFit {
    pub s: Vec<f64>,
    pub beta: f64,
    /// Gathering objective at the returned state.
    pub objective: f64,
    pub iterations: usize,
    pub cycle_detected: bool,
}

/// Maximizes the gathering objective from `(s0, β0)`.
///
/// Alternates the fixed-point update
/// `s_i = A_i / Σ_k C_k e^{-β d_ki}` with `C_k = B_k / S_k`, max
/// normalization, and a bounded scalar search for `β` that is only accepted
/// when it improves the objective. Stops on a relative objective change
/// below `inner_tol`, on the iteration cap, or when a rounded state repeats
/// within the last `cycle_window` iterations.
pub fn maximize_gathering(
    stats: &GatheringStats,
    s0: &[f64],
    beta0: f64,
    d: &DistanceMatrix,
    pattern: &NeighborSets,
    opts: &GatheringOptions,
) -> Result<GatheringFit> {
    let n = pattern.len();
    if s0.len() != n || stats.inflow.len() != n {
        return Err(Error::input("gathering scores and neighbor sets disagree on region count"));
    }
    let (lo, hi) = opts.beta_bounds;
    let mut s = s0.to_vec();
    let mut beta = beta0.clamp(lo, hi);
    if stats.is_empty() {
        log::warn!("no off-diagonal flow; gathering scores and beta left unchanged");
        let objective = stats.objective(&s, beta, d, pattern);
        return Ok(GatheringFit { s, beta: beta0, objective, iterations: 0, cycle_detected: false });
    }
    normalize_scores(&mut s);
    let mut f = stats.objective(&s, beta, d, pattern);
    let mut recent: VecDeque<u64> = VecDeque::with_capacity(opts.cycle_window + 1);
    let mut denom = vec![0.0; n];

    for iter in 1..=opts.max_iter {
        let log_norm = log_normalizers(&s, beta, d, pattern);
        denom.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..n {
            if stats.outflow[k] <= 0.0 {
                continue;
            }
            let drow = d.row(k);
            for &i in pattern.neighbors(k) {
                if i != k {
                    denom[i] += stats.outflow[k] * (-beta * drow[i] - log_norm[k]).exp();
                }
            }
        }
        for i in 0..n {
            if denom[i] > 0.0 {
                s[i] = stats.inflow[i] / denom[i];
            }
        }
        normalize_scores(&mut s);

        let at_current = stats.objective(&s, beta, d, pattern);
        let search = minimize_scalar_bounded(|b| -stats.objective(&s, b, d, pattern), lo, hi, 1e-10);
        let f_new = if -search.value > at_current {
            beta = search.x;
            -search.value
        } else {
            at_current
        };
        if !f_new.is_finite() {
            return Err(Error::NonFinite { term: "gathering objective".into(), value: f_new });
        }

        let change = (f_new - f).abs() / f.abs().max(1.0);
        f = f_new;
        if change < opts.inner_tol {
            return Ok(GatheringFit { s, beta, objective: f, iterations: iter, cycle_detected: false });
        }
        let key = state_key(&s, beta);
        if recent.contains(&key) {
            log::debug!("gathering iteration {iter} revisited an earlier state");
            return Ok(GatheringFit { s, beta, objective: f, iterations: iter, cycle_detected: true });
        }
        recent.push_back(key);
        if recent.len() > opts.cycle_window {
            recent.pop_front();
        }
    }
    Ok(GatheringFit { s, beta, objective: f, iterations: opts.max_iter, cycle_detected: false })
}

fn normalize_scores(s: &mut [f64]) {
    let max = s.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 && max.is_finite() {
        s.iter_mut().for_each(|v| *v = (*v / max).max(S_FLOOR));
    } else {
        s.iter_mut().for_each(|v| *v = 1.0);
    }
}

fn state_key(s: &[f64], beta: f64) -> u64 {
    let mut h = DefaultHasher::new();
    for v in s {
        ((v / 1e-10).round() as i64).hash(&mut h);
    }
    ((beta / 1e-12).round() as i64).hash(&mut h);
    h.finish()
}

/// `(s, β)` maximizing the gathering objective built from `m`.
pub fn update_s_beta(
    m: &FlowTensor,
    d: &DistanceMatrix,
    s0: &[f64],
    beta0: f64,
    opts: &GatheringOptions,
) -> Result<GatheringFit> {
    let stats = GatheringStats::from_flows(m, d);
    maximize_gathering(&stats, s0, beta0, d, m.pattern(), opts)
}

/// Maximizes the penalized likelihood over the active flows with the
/// parameters fixed, starting from `m`.
pub fn maximize_flows(
    m: &FlowTensor,
    params: &ModelParams,
    counts: &CountPanel,
    lambda: f64,
    d: &DistanceMatrix,
    opts: &LbfgsOptions,
) -> Result<(FlowTensor, OptimReport)> {
    m.check_shape(counts)?;
    let objective = ExactObjective::new(params, counts, lambda, d, m.pattern())?;
    let bounds = BoxSpec::lower_bounded(objective.dim(), M_MIN);
    let (x, report) = minimize_box_preconditioned(
        |x, g| objective.negated(x, g),
        &mut FlowCurvature::new(m.pattern(), m.steps(), lambda),
        m.values(),
        &bounds,
        opts,
    );
    log::debug!(
        "flow step: {} iterations, {} evaluations, {:?}",
        report.iterations,
        report.evaluations,
        report.termination
    );
    Ok((FlowTensor::from_values(m.steps(), Arc::clone(m.pattern()), x)?, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitTermination {
    /// Relative likelihood change fell below the threshold.
    Converged,
    /// Iteration or round cap reached.
    MaxIterations,
    /// Approximate procedure hit its NAE target.
    TargetReached,
    /// Approximate procedure stopped because NAE no longer decreased.
    NoImprovement,
    /// Approximate procedure stopped on a small relative change of `M`.
    FlowsSettled,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub flows: FlowTensor,
    pub params: ModelParams,
    /// Likelihood components at the start and after every outer iteration.
    pub trace: Vec<LikelihoodBreakdown>,
    pub termination: FitTermination,
    pub iterations: usize,
    /// Number of `(s, β)` maximizations that ended on a repeated state.
    pub cycles_detected: usize,
    /// Procedure-specific per-round diagnostic (NAE or relative flow change
    /// for the approximate procedure; empty for the exact one).
    pub round_metric: Vec<f64>,
    pub seconds: f64,
}

/// Builds distances and neighbor sets, initializes and runs [`fit_exact_from`].
pub fn fit_exact(
    counts: &CountPanel,
    regions: &RegionSet,
    config: &SolverConfig,
    init: InitStrategy,
) -> Result<FitResult> {
    config.validate()?;
    let d = build_distance_matrix(regions)?;
    let pattern = Arc::new(neighbor_sets(&d, config.cutoff)?);
    let start = initialize(counts, &d, &pattern, init)?;
    fit_exact_from(counts, &d, start.flows, start.params, config)
}

/// Alternating maximization from a given starting point.
pub fn fit_exact_from(
    counts: &CountPanel,
    d: &DistanceMatrix,
    flows: FlowTensor,
    params: ModelParams,
    config: &SolverConfig,
) -> Result<FitResult> {
    config.validate()?;
    let clock = Instant::now();
    let flow_opts = config.flow_options();
    let gathering = config.gathering_options(d);
    let mut m = flows;
    let mut params = params;
    let first = exact_loglik(&m, &params, counts, config.lambda, d)?;
    first.check_finite()?;
    let mut trace = vec![first];
    let mut cycles = 0;
    let mut termination = FitTermination::MaxIterations;
    let mut iterations = 0;

    for iter in 1..=config.max_outer {
        iterations = iter;
        let (next, _) = maximize_flows(&m, &params, counts, config.lambda, d, &flow_opts)?;
        m = next;
        params.pi = update_pi(&m);
        let fit = update_s_beta(&m, d, &params.s, params.beta, &gathering)?;
        if fit.cycle_detected {
            cycles += 1;
            log::info!("outer iteration {iter}: (s, beta) search entered a loop; returning to the flow step");
        }
        params.s = fit.s;
        params.beta = fit.beta;

        let b = exact_loglik(&m, &params, counts, config.lambda, d)?;
        b.check_finite()?;
        let prev = trace.last().map_or(b.total, |p| p.total);
        let change = (b.total - prev).abs() / prev.abs().max(1.0);
        log::info!(
            "outer iteration {iter}: L = {:.10e}, relative change {change:.3e}, beta = {:.5}",
            b.total,
            params.beta
        );
        trace.push(b);
        if change < config.epsilon {
            termination = FitTermination::Converged;
            break;
        }
    }
    Ok(FitResult {
        flows: m,
        params,
        trace,
        termination,
        iterations,
        cycles_detected: cycles,
        round_metric: Vec::new(),
        seconds: clock.elapsed().as_secs_f64(),
    })
}
