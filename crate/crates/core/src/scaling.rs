//! Population scaling so that active flows stay in the range where the
//! Stirling approximation behind the likelihood holds.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::init_moving;
use crate::flow::{CountPanel, FlowTensor};
use crate::geo::NeighborSets;

/// Largest factor [`plan_scaling`] will propose.
const MAX_FACTOR: f64 = 1e15;

/// How the penalty weight follows the population scale `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaRule {
    /// `λ / c`: likelihood terms grow like `c`, the cost like `c²`.
    #[default]
    InverseScale,
    /// `λ / c²`: keeps the penalty itself unchanged.
    InverseSquare,
}

impl LambdaRule {
    pub fn apply(self, lambda: f64, c: f64) -> f64 {
        match self {
            Self::InverseScale => lambda / c,
            Self::InverseSquare => lambda / (c * c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePlan {
    pub factor: f64,
    pub lambda_original: f64,
    pub lambda_scaled: f64,
    pub rule: LambdaRule,
}

impl ScalePlan {
    pub fn identity(lambda: f64) -> Self {
        Self { factor: 1.0, lambda_original: lambda, lambda_scaled: lambda, rule: LambdaRule::default() }
    }

    pub fn with_factor(factor: f64, lambda: f64, rule: LambdaRule) -> Result<Self> {
        if !(factor.is_finite() && factor >= 1.0) {
            return Err(Error::input(format!("scale factor must be at least 1, got {factor}")));
        }
        Ok(Self { factor, lambda_original: lambda, lambda_scaled: rule.apply(lambda, factor), rule })
    }
}

/// Smallest power of ten `c ≥ 1` for which the moving-start flows of `c·N`
/// reach `target_min_flow` on every entry whose origin count changes.
pub fn plan_scaling(
    counts: &CountPanel,
    pattern: &Arc<NeighborSets>,
    target_min_flow: f64,
    lambda: f64,
    rule: LambdaRule,
) -> Result<ScalePlan> {
    if !(target_min_flow.is_finite() && target_min_flow >= 1.0) {
        return Err(Error::input(format!("target flow must be at least 1, got {target_min_flow}")));
    }
    let (heuristic, _) = init_moving(counts, pattern)?;
    let mut smallest = f64::INFINITY;
    heuristic.for_each_active(|t, i, j, v| {
        if i != j && counts.get(t, i) != counts.get(t + 1, i) {
            smallest = smallest.min(v);
        }
    });
    let mut factor = 1.0;
    if smallest.is_finite() {
        while factor * smallest < target_min_flow && factor < MAX_FACTOR {
            factor *= 10.0;
        }
    }
    ScalePlan::with_factor(factor, lambda, rule)
}

/// `c · N`.
pub fn apply_scaling(counts: &CountPanel, plan: &ScalePlan) -> CountPanel {
    counts.scaled(plan.factor)
}

/// `M' / c`.
pub fn descale_flows(flows: &FlowTensor, plan: &ScalePlan) -> FlowTensor {
    let values = flows.values().iter().map(|v| v / plan.factor).collect();
    FlowTensor::from_values(flows.steps(), Arc::clone(flows.pattern()), values)
        .expect("descaling preserves the tensor shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star(neighbors: usize) -> Arc<NeighborSets> {
        let mut lists = vec![(0..=neighbors).collect::<Vec<_>>()];
        for j in 1..=neighbors {
            lists.push(vec![0, j]);
        }
        Arc::new(NeighborSets::from_lists(lists).unwrap())
    }

    #[test]
    fn large_counts_need_no_scaling() {
        let pattern = star(2);
        let counts = CountPanel::from_rows(&[vec![100.0, 50.0, 50.0], vec![90.0, 55.0, 55.0]]).unwrap();
        let plan = plan_scaling(&counts, &pattern, 1.0, 3.0, LambdaRule::InverseScale).unwrap();
        assert_eq!(plan.factor, 1.0);
        assert_eq!(plan.lambda_scaled, 3.0);
    }

    #[test]
    fn thin_counts_over_many_destinations() {
        // a change of 3 spread over 100 destinations gives flows of 0.03
        let pattern = star(100);
        let mut before = vec![10.0; 101];
        let mut after = before.clone();
        before[0] = 1000.0;
        after[0] = 997.0;
        after[1] += 3.0;
        let counts = CountPanel::from_rows(&[before, after]).unwrap();
        let plan = plan_scaling(&counts, &pattern, 1.0, 1.0, LambdaRule::InverseScale).unwrap();
        assert_eq!(plan.factor, 100.0);
        assert_eq!(plan.lambda_scaled, 0.01);
        let plan = plan_scaling(&counts, &pattern, 5.0, 1.0, LambdaRule::InverseSquare).unwrap();
        assert_eq!(plan.factor, 1000.0);
        assert!((plan.lambda_scaled - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn scaling_roundtrip() {
        let pattern = star(1);
        let counts = CountPanel::from_rows(&[vec![1.5, 2.0], vec![2.0, 1.5]]).unwrap();
        let plan = ScalePlan::with_factor(1000.0, 1.0, LambdaRule::InverseScale).unwrap();
        assert_eq!(apply_scaling(&counts, &plan).data(), &[1500.0, 2000.0, 2000.0, 1500.0]);
        let m = FlowTensor::from_values(1, pattern, vec![0.25, 3.0, 1.0, 0.5]).unwrap();
        assert_eq!(descale_flows(&m.scaled(plan.factor), &plan), m);
        let id = ScalePlan::identity(2.0);
        assert_eq!(apply_scaling(&counts, &id), counts);
        assert_eq!(descale_flows(&m, &id), m);
        assert!(ScalePlan::with_factor(0.5, 1.0, LambdaRule::InverseScale).is_err());
        assert!(plan_scaling(&counts, m.pattern(), 0.5, 1.0, LambdaRule::InverseScale).is_err());
    }

    #[test]
    fn factor_monotone_in_target() {
        let pattern = star(7);
        let counts = CountPanel::from_rows(&[
            vec![40.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0],
            vec![39.0, 4.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0],
        ])
        .unwrap();
        let mut last = 1.0;
        for target in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
            let c = plan_scaling(&counts, &pattern, target, 1.0, LambdaRule::InverseScale).unwrap().factor;
            assert!(c >= last);
            last = c;
        }
    }
}
