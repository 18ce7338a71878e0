//! Multinomial movement simulator producing count panels with known flows,
//! and the two benchmark scenarios used for validation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{CountPanel, FlowTensor};
use crate::geo::{build_distance_matrix, neighbor_sets, DistanceMatrix, NeighborSets, RegionSet};
use crate::likelihood::{transition_matrix, ModelParams};

/// Seed of the outer departure probabilities in [`make_benchmark_grid`].
const GRID_PI_SEED: u64 = 20_180_903;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub regions: RegionSet,
    pub pi: Vec<f64>,
    pub s: Vec<f64>,
    pub beta: f64,
    pub cutoff: f64,
    pub n0: Vec<u64>,
    /// Number of transitions `T - 1`.
    pub steps: usize,
    /// Each region gains or loses up to this fraction of its count, uniformly,
    /// before every movement step.
    #[serde(default)]
    pub noise_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn params(&self) -> ModelParams {
        ModelParams { pi: self.pi.clone(), s: self.s.clone(), beta: self.beta }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.regions.len();
        if self.pi.len() != n || self.s.len() != n || self.n0.len() != n {
            return Err(Error::input(format!(
                "scenario has {n} regions but {} departure probabilities, {} scores and {} initial counts",
                self.pi.len(),
                self.s.len(),
                self.n0.len()
            )));
        }
        if let Some(p) = self.pi.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::input(format!("departure probability {p} outside [0, 1]")));
        }
        if let Some(s) = self.s.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::input(format!("gathering score {s} is not positive")));
        }
        if !self.beta.is_finite() || !(self.cutoff.is_finite() && self.cutoff >= 0.0) {
            return Err(Error::input("beta and cutoff must be finite, cutoff nonnegative"));
        }
        if self.steps == 0 {
            return Err(Error::input("scenario needs at least one step"));
        }
        if !(self.noise_fraction.is_finite() && self.noise_fraction >= 0.0) {
            return Err(Error::input(format!("noise fraction {} is negative", self.noise_fraction)));
        }
        Ok(())
    }
}

/// Simulated counts together with the flows that produced them.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    /// Observed counts, recorded before each step's noise.
    pub counts: CountPanel,
    /// People moving from `i` to `j` during step `t`, after noise.
    pub flows: FlowTensor,
    pub params: ModelParams,
    pub distances: DistanceMatrix,
    pub pattern: Arc<NeighborSets>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draws a multinomial over `probs` by successive conditional binomials.
fn multinomial(rng: &mut ChaCha8Rng, trials: u64, probs: &[f64], out: &mut [f64]) {
    let mut left = trials;
    let mut mass: f64 = probs.iter().sum();
    for (k, &p) in probs.iter().enumerate() {
        if left == 0 || k + 1 == probs.len() {
            out[k] = if k + 1 == probs.len() { left as f64 } else { 0.0 };
            continue;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = Binomial::new(left, q).expect("probability within [0, 1]").sample(rng);
        out[k] = draw as f64;
        left -= draw;
        mass -= p;
    }
}

/// Runs the scenario. Each `(t, i)` uses its own random streams, so the
/// result depends only on the scenario, not on thread scheduling.
pub fn simulate(spec: &ScenarioSpec) -> Result<SyntheticTruth> {
    spec.validate()?;
    let n = spec.regions.len();
    let d = build_distance_matrix(&spec.regions)?;
    let pattern = Arc::new(neighbor_sets(&d, spec.cutoff)?);
    let params = spec.params();
    let theta = transition_matrix(&params, &d, &pattern)?;
    let mut flows = FlowTensor::zeros(spec.steps, Arc::clone(&pattern));
    let mut counts = Vec::with_capacity((spec.steps + 1) * n);
    let mut current = spec.n0.clone();

    for t in 0..spec.steps {
        counts.extend(current.iter().map(|&c| c as f64));
        let movers: Vec<u64> = current
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if spec.noise_fraction == 0.0 {
                    return c;
                }
                let mut rng = stream(spec.seed, 2 * (t * n + i) as u64);
                let width = spec.noise_fraction * c as f64;
                let delta = if width > 0.0 { rng.random_range(-width..=width).round() } else { 0.0 };
                (c as f64 + delta).max(0.0) as u64
            })
            .collect();

        let step = flows.step_mut(t);
        let mut rows = crate::likelihood::split_rows(&pattern, step);
        rows.par_iter_mut().enumerate().for_each(|(i, row)| {
            let mut rng = stream(spec.seed, 2 * (t * n + i) as u64 + 1);
            multinomial(&mut rng, movers[i], theta.row(i), row);
        });

        current = vec![0; n];
        flows.for_each_active(|s, _, j, v| {
            if s == t {
                current[j] += v as u64;
            }
        });
    }
    counts.extend(current.iter().map(|&c| c as f64));
    Ok(SyntheticTruth { counts: CountPanel::new(spec.steps + 1, n, counts)?, flows, params, distances: d, pattern })
}

/// Regular `k × k` grid of centroids whose outermost rows and columns sit
/// on the edges of `[-half, half]²`, ids `r0..` in row-major order.
pub fn grid_regions(k: usize, half: f64) -> RegionSet {
    lattice(k, |a| if k == 1 { 0.0 } else { -half + 2.0 * half * a as f64 / (k - 1) as f64 })
}

/// Centroids of the `k × k` equal cells tiling `[-half, half]²`.
pub fn cell_regions(k: usize, half: f64) -> RegionSet {
    lattice(k, |a| -half + half * (2 * a + 1) as f64 / k as f64)
}

fn lattice(k: usize, coord: impl Fn(usize) -> f64) -> RegionSet {
    let mut ids = Vec::with_capacity(k * k);
    let mut coords = Vec::with_capacity(k * k);
    for row in 0..k {
        for col in 0..k {
            ids.push(format!("r{}", row * k + col));
            coords.push([coord(col), coord(row)]);
        }
    }
    RegionSet::new(ids, coords).expect("grid ids are unique")
}

/// Nine regions on a 3×3 grid of width 2, a million people each, `K = 2`,
/// `β = 1`. The center leaves with probability 0.1, the rest with
/// probabilities drawn uniformly from `[0.01, 0.02]`; four regions have
/// elevated gathering scores.
pub fn make_benchmark_grid() -> ScenarioSpec {
    let regions = grid_regions(3, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(GRID_PI_SEED);
    let mut pi: Vec<f64> = (0..9).map(|_| rng.random_range(0.01..=0.02)).collect();
    pi[4] = 0.1;
    let mut s = vec![1.0; 9];
    s[0] = 2.0;
    s[2] = 1.5;
    s[5] = 3.0;
    s[7] = 2.5;
    ScenarioSpec {
        regions,
        pi,
        s,
        beta: 1.0,
        cutoff: 2.0,
        n0: vec![1_000_000; 9],
        steps: 1,
        noise_fraction: 0.0,
        seed: 0,
    }
}

/// 15×15 cells tiling `[-1, 1]²`, `K = 1.5`, three steps, population
/// concentrated on a ring of radius 0.8 and scaled by `nu`, gathering scores
/// peaked at the center and departure probabilities proportional to the
/// initial population (0.1 at the densest cell). Counts are perturbed by up
/// to 10% per step.
pub fn make_benchmark_ring(nu: f64) -> Result<ScenarioSpec> {
    if !(nu.is_finite() && nu > 0.0) {
        return Err(Error::input(format!("population scale must be positive, got {nu}")));
    }
    let regions = cell_regions(15, 1.0);
    let r0 = 0.8;
    let raw: Vec<f64> =
        regions.coords().iter().map(|[x, y]| nu * (-((x * x + y * y).sqrt() - r0).powi(2)).exp()).collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    let pi = raw.iter().map(|v| 0.1 * v / max).collect();
    let s = regions.coords().iter().map(|[x, y]| (-4.0 * (x * x + y * y)).exp()).collect();
    Ok(ScenarioSpec {
        regions,
        pi,
        s,
        beta: 1.0,
        cutoff: 1.5,
        n0: raw.iter().map(|v| v.round() as u64).collect(),
        steps: 3,
        noise_fraction: 0.1,
        seed: 0,
    })
}
