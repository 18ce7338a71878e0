//! Error measures against known flows, run-to-run stability statistics and
//! inbound/outbound totals.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowTensor;
use crate::sum::NeumaierSum;

/// Means below this are excluded from the std/mean ratios.
pub const MEAN_FLOOR: f64 = 1e-9;

const DEFAULT_BINS: usize = 30;
const DEFAULT_RANGE: f64 = 3.0;

fn check_same_shape(a: &FlowTensor, b: &FlowTensor) -> Result<()> {
    if a.steps() != b.steps() || a.regions() != b.regions() {
        return Err(Error::input(format!(
            "flow tensors differ in shape: {}x{} vs {}x{}",
            a.steps(),
            a.regions(),
            b.steps(),
            b.regions()
        )));
    }
    Ok(())
}

/// Sums `|est - truth|` and `truth` over every `(t, i, j)` accepted by `keep`.
fn abs_error(est: &FlowTensor, truth: &FlowTensor, keep: impl Fn(usize, usize) -> bool) -> Result<(f64, f64)> {
    check_same_shape(est, truth)?;
    let mut err = NeumaierSum::default();
    let mut mass = NeumaierSum::default();
    if est.pattern() == truth.pattern() {
        let rows = est.pattern().rows();
        let cols = est.pattern().cols();
        let nnz = cols.len();
        for (p, (e, t)) in est.values().iter().zip(truth.values()).enumerate() {
            if keep(rows[p % nnz], cols[p % nnz]) {
                err.add((e - t).abs());
                mass.add(*t);
            }
        }
    } else {
        let n = est.regions();
        for (p, (e, t)) in est.to_dense().iter().zip(truth.to_dense()).enumerate() {
            if keep((p / n) % n, p % n) {
                err.add((e - t).abs());
                mass.add(t);
            }
        }
    }
    Ok((err.value(), mass.value()))
}

/// Normalized absolute error `Σ|M - M*| / Σ M*` over all entries.
pub fn nae(est: &FlowTensor, truth: &FlowTensor) -> Result<f64> {
    let (err, mass) = abs_error(est, truth, |_, _| true)?;
    if mass <= 0.0 {
        return Err(Error::ZeroDenominator("true flows sum to zero".into()));
    }
    Ok(err / mass)
}

/// [`nae`] restricted to `i ≠ j`.
pub fn offdiag_nae(est: &FlowTensor, truth: &FlowTensor) -> Result<f64> {
    let (err, mass) = abs_error(est, truth, |i, j| i != j)?;
    if mass <= 0.0 {
        return Err(Error::ZeroDenominator("true off-diagonal flows sum to zero".into()));
    }
    Ok(err / mass)
}

/// Equal-width histogram; the last bin also collects values above `upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize, upper: f64) -> Self {
        let bins = bins.max(1);
        let width = upper / bins as f64;
        let edges = (0..=bins).map(|k| k as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = ((v / width).floor().max(0.0) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }

    /// `bin_start,bin_end,count` rows with a header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_start,bin_end,count")?;
        for (k, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{},{}", self.edges[k], self.edges[k + 1], c)?;
        }
        Ok(())
    }
}

/// Per-entry spread of fitted flows across repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub runs: usize,
    /// Per active entry, in flow-tensor storage order.
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    /// `std / mean`, `None` where the mean is below [`MEAN_FLOOR`].
    pub ratio: Vec<Option<f64>>,
    /// Entries excluded from the ratios.
    pub near_zero_mean: usize,
    /// Fraction of ratio-bearing entries with ratio below 1.
    pub fraction_below_one: f64,
    pub median_ratio: f64,
    pub histogram: Histogram,
}

impl StabilityReport {
    pub fn ratios(&self) -> Vec<f64> {
        self.ratio.iter().flatten().copied().collect()
    }
}

pub fn stability_report(runs: &[FlowTensor]) -> Result<StabilityReport> {
    if runs.len() < 2 {
        return Err(Error::input(format!("stability needs at least 2 runs, got {}", runs.len())));
    }
    let first = &runs[0];
    for r in &runs[1..] {
        check_same_shape(first, r)?;
        if r.pattern() != first.pattern() {
            return Err(Error::input("runs use different neighbor sets"));
        }
    }
    let k = runs.len() as f64;
    let len = first.values().len();
    let mut mean = vec![0.0; len];
    let mut std = vec![0.0; len];
    for p in 0..len {
        let mu = runs.iter().map(|r| r.values()[p]).sum::<f64>() / k;
        let var = runs.iter().map(|r| (r.values()[p] - mu).powi(2)).sum::<f64>() / k;
        mean[p] = mu;
        std[p] = var.sqrt();
    }
    let ratio: Vec<Option<f64>> =
        mean.iter().zip(&std).map(|(&m, &s)| (m.abs() >= MEAN_FLOOR).then(|| s / m.abs())).collect();
    let near_zero_mean = ratio.iter().filter(|r| r.is_none()).count();
    let mut values: Vec<f64> = ratio.iter().flatten().copied().collect();
    let fraction_below_one =
        if values.is_empty() { 0.0 } else { values.iter().filter(|&&r| r < 1.0).count() as f64 / values.len() as f64 };
    let histogram = Histogram::new(&values, DEFAULT_BINS, DEFAULT_RANGE);
    values.sort_by(f64::total_cmp);
    let median_ratio = median_sorted(&values);
    Ok(StabilityReport {
        runs: runs.len(),
        mean,
        std,
        ratio,
        near_zero_mean,
        fraction_below_one,
        median_ratio,
        histogram,
    })
}

/// Median of an ascending slice; NaN when empty.
pub fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Off-diagonal totals per region over a window of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InOutSummary {
    pub window: Range<usize>,
    pub outbound: Vec<f64>,
    pub inbound: Vec<f64>,
}

pub fn aggregate_inout(m: &FlowTensor, window: Range<usize>) -> Result<InOutSummary> {
    if window.is_empty() || window.end > m.steps() {
        return Err(Error::input(format!("step window {window:?} invalid for {} steps", m.steps())));
    }
    let n = m.regions();
    let mut outbound = vec![NeumaierSum::default(); n];
    let mut inbound = vec![NeumaierSum::default(); n];
    m.for_each_active(|t, i, j, v| {
        if i != j && window.contains(&t) {
            outbound[i].add(v);
            inbound[j].add(v);
        }
    });
    Ok(InOutSummary {
        window,
        outbound: outbound.iter().map(NeumaierSum::value).collect(),
        inbound: inbound.iter().map(NeumaierSum::value).collect(),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::geo::NeighborSets;
    use proptest::prelude::*;

    fn full(n: usize) -> Arc<NeighborSets> {
        Arc::new(NeighborSets::from_lists((0..n).map(|_| (0..n).collect()).collect()).unwrap())
    }

    fn tensor(n: usize, values: Vec<f64>) -> FlowTensor {
        let pattern = full(n);
        let steps = values.len() / pattern.nnz();
        FlowTensor::from_values(steps, pattern, values).unwrap()
    }

    #[test]
    fn nae_hand_values() {
        let truth = tensor(1, vec![4.0, 6.0]);
        let est = tensor(1, vec![5.0, 5.0]);
        assert!((nae(&est, &truth).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(nae(&truth, &truth).unwrap(), 0.0);
        assert_eq!(nae(&tensor(1, vec![0.0, 0.0]), &truth).unwrap(), 1.0);
        assert!(nae(&truth, &tensor(1, vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn offdiag_nae_hand_values() {
        let truth = tensor(2, vec![10.0, 3.0, 0.0, 5.0]);
        let est = tensor(2, vec![1.0, 6.0, 0.0, 9.0]);
        assert_eq!(offdiag_nae(&est, &truth).unwrap(), 1.0);
        let diag_only = tensor(2, vec![7.0, 3.0, 0.0, 1.0]);
        assert_eq!(offdiag_nae(&diag_only, &truth).unwrap(), 0.0);
    }

    #[test]
    fn nae_across_patterns() {
        let narrow = Arc::new(NeighborSets::from_lists(vec![vec![0], vec![1]]).unwrap());
        let est = FlowTensor::from_values(1, narrow, vec![4.0, 6.0]).unwrap();
        let truth = tensor(2, vec![4.0, 2.0, 0.0, 6.0]);
        assert!((nae(&est, &truth).unwrap() - 2.0 / 12.0).abs() < 1e-15);
        assert_eq!(offdiag_nae(&est, &truth).unwrap(), 1.0);
    }

    #[test]
    fn stability_arithmetic() {
        let a = tensor(1, vec![1.0]);
        let b = tensor(1, vec![3.0]);
        let r = stability_report(&[a.clone(), b]).unwrap();
        assert_eq!(r.mean, vec![2.0]);
        assert_eq!(r.std, vec![1.0]);
        assert_eq!(r.ratio, vec![Some(0.5)]);
        assert_eq!(r.fraction_below_one, 1.0);
        let same = stability_report(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(same.ratio, vec![Some(0.0)]);
        assert!(stability_report(&[a]).is_err());
    }

    #[test]
    fn zero_means_are_set_aside() {
        let a = tensor(2, vec![0.0, 1.0, 2.0, 0.0]);
        let r = stability_report(&[a.clone(), a]).unwrap();
        assert_eq!(r.near_zero_mean, 2);
        assert_eq!(r.ratios().len(), 2);
        assert_eq!(r.histogram.counts.iter().sum::<usize>(), 2);
    }

    #[test]
    fn histogram_csv() {
        let h = Histogram::new(&[0.05, 0.15, 0.16, 9.0], 3, 0.3);
        assert_eq!(h.counts, vec![1, 2, 1]);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("bin_start,bin_end,count\n0,"));
    }

    #[test]
    fn inout_totals() {
        let mut m = FlowTensor::zeros(2, full(3));
        m.set(0, 0, 0, 100.0).unwrap();
        m.set(0, 0, 1, 7.0).unwrap();
        m.set(1, 2, 1, 4.0).unwrap();
        let s = aggregate_inout(&m, 0..1).unwrap();
        assert_eq!(s.outbound, vec![7.0, 0.0, 0.0]);
        assert_eq!(s.inbound, vec![0.0, 7.0, 0.0]);
        let s = aggregate_inout(&m, 0..2).unwrap();
        assert_eq!(s.inbound[1], 11.0);
        assert!(aggregate_inout(&m, 1..1).is_err());
        assert!(aggregate_inout(&m, 0..3).is_err());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median_sorted(&[1.0, 2.0, 10.0]), 2.0);
        assert_eq!(median_sorted(&[1.0, 2.0, 4.0, 10.0]), 3.0);
        assert!(median_sorted(&[]).is_nan());
    }

    proptest! {
        #[test]
        fn nae_scale_invariant(vals in prop::collection::vec((0.0f64..100.0, 0.1f64..100.0), 4), c in 1e-3f64..1e3) {
            let est = tensor(2, vals.iter().map(|v| v.0).collect());
            let truth = tensor(2, vals.iter().map(|v| v.1).collect());
            let a = nae(&est, &truth).unwrap();
            let b = nae(&est.scaled(c), &truth.scaled(c)).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn inbound_equals_outbound(vals in prop::collection::vec(0.0f64..50.0, 18)) {
            let m = tensor(3, vals);
            let s = aggregate_inout(&m, 0..2).unwrap();
            let out: f64 = s.outbound.iter().sum();
            let inn: f64 = s.inbound.iter().sum();
            prop_assert!((out - inn).abs() <= 1e-9 * out.max(1.0));
            prop_assert!(s.outbound.iter().chain(&s.inbound).all(|&v| v >= 0.0));
        }

        #[test]
        fn stability_ratios_scale_invariant(vals in prop::collection::vec(0.1f64..50.0, 12), c in 1e-2f64..1e2) {
            let runs: Vec<_> = vals.chunks(4).map(|v| tensor(2, v.to_vec())).collect();
            let scaled: Vec<_> = runs.iter().map(|r| r.scaled(c)).collect();
            let a = stability_report(&runs).unwrap().ratios();
            let b = stability_report(&scaled).unwrap().ratios();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9 * x.max(1.0));
            }
        }
    }
}
