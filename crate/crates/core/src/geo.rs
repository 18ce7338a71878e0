//! Region geometry: centroid distances and neighbor sets under a travel cutoff.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered region identifiers with planar centroid coordinates.
///
/// The position of a region in `ids` is its canonical index everywhere else
/// in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRegionSet")]
pub struct RegionSet {
    ids: Vec<String>,
    coords: Vec<[f64; 2]>,
}

#[derive(Deserialize)]
struct RawRegionSet {
    ids: Vec<String>,
    coords: Vec<[f64; 2]>,
}

impl TryFrom<RawRegionSet> for RegionSet {
    type Error = Error;

    fn try_from(raw: RawRegionSet) -> Result<Self> {
        RegionSet::new(raw.ids, raw.coords)
    }
}

impl RegionSet {
    pub fn new(ids: Vec<String>, coords: Vec<[f64; 2]>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::input("region set must contain at least one region"));
        }
        if ids.len() != coords.len() {
            return Err(Error::input(format!("{} region ids but {} coordinate pairs", ids.len(), coords.len())));
        }
        let mut seen = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if let Some(prev) = seen.insert(id.as_str(), i) {
                return Err(Error::input(format!("duplicate region id {id:?} at rows {prev} and {i}")));
            }
        }
        Ok(Self { ids, coords })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Keeps only the regions at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let ids = indices.iter().map(|&i| self.ids[i].clone()).collect();
        let coords = indices.iter().map(|&i| self.coords[i]).collect();
        Self::new(ids, coords)
    }
}

/// Dense symmetric matrix of centroid-to-centroid distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    /// Wraps a row-major `n × n` matrix. It must be finite, nonnegative,
    /// symmetric and zero on the diagonal.
    pub fn from_dense(n: usize, d: Vec<f64>) -> Result<Self> {
        if n == 0 || d.len() != n * n {
            return Err(Error::input(format!("distance matrix needs {n}x{n} entries, got {}", d.len())));
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(Error::input(format!("d[{i},{i}] must be zero")));
            }
            for j in 0..n {
                let v = d[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::input(format!("d[{i},{j}] = {v} is not a valid distance")));
                }
                if v != d[j * n + i] {
                    return Err(Error::input(format!("distance matrix not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { n, d })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.n..(i + 1) * self.n]
    }

    pub fn max(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }

    /// Mean over strictly positive entries, or 0 if there are none.
    pub fn mean_positive(&self) -> f64 {
        let (sum, count) = self.d.iter().filter(|&&v| v > 0.0).fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Euclidean distances between all pairs of centroids.
pub fn build_distance_matrix(regions: &RegionSet) -> Result<DistanceMatrix> {
    let n = regions.len();
    for (i, c) in regions.coords().iter().enumerate() {
        if !c[0].is_finite() || !c[1].is_finite() {
            return Err(Error::input(format!(
                "region {:?} has non-finite coordinates ({}, {})",
                regions.ids()[i],
                c[0],
                c[1]
            )));
        }
    }
    let coords = regions.coords();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = coords[i][0] - coords[j][0];
            let dy = coords[i][1] - coords[j][1];
            let v = dx.hypot(dy);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(DistanceMatrix { n, d })
}

/// Admissible destinations per origin, `Γ_i = {j : d_ij ≤ K}`, stored in
/// compressed-row form.
///
/// Every flow tensor in the crate stores one value per entry of this pattern
/// and time step, so entry positions (`offsets[i] + k`) double as indices
/// into flow storage.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSets {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    diag: Vec<usize>,
}

impl NeighborSets {
    /// Builds the pattern from per-origin destination lists. Each list is
    /// sorted and deduplicated, and must contain its own origin.
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut diag = Vec::with_capacity(n);
        offsets.push(0);
        for (i, mut list) in lists.into_iter().enumerate() {
            list.sort_unstable();
            list.dedup();
            if let Some(&bad) = list.iter().find(|&&j| j >= n) {
                return Err(Error::input(format!("neighbor {bad} of region {i} out of range")));
            }
            let Ok(k) = list.binary_search(&i) else {
                return Err(Error::input(format!("region {i} missing from its own neighbor set")));
            };
            diag.push(cols.len() + k);
            cols.extend(list);
            offsets.push(cols.len());
        }
        Ok(Self { offsets, cols, diag })
    }

    /// Number of regions.
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Total number of admissible (origin, destination) pairs, self included.
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Destinations of `i`, ascending, including `i` itself.
    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.cols[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Entry position of the self-transition `(i, i)`.
    #[inline]
    pub fn diag_pos(&self, i: usize) -> usize {
        self.diag[i]
    }

    /// `|Γ_i \ {i}|`.
    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i] - 1
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.position(i, j).is_some()
    }

    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        self.neighbors(i).binary_search(&j).ok().map(|k| self.offsets[i] + k)
    }

    /// Column index of every entry, aligned with entry positions.
    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    /// Origin of every entry, aligned with entry positions.
    pub fn rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.nnz());
        for i in 0..self.len() {
            rows.extend(std::iter::repeat_n(i, self.offsets[i + 1] - self.offsets[i]));
        }
        rows
    }

    /// For every entry `(i, j)`, the position of `(j, i)`, if admissible.
    pub fn transpose_positions(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.nnz());
        for i in 0..self.len() {
            for &j in self.neighbors(i) {
                out.push(self.position(j, i));
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.len()).all(|i| self.neighbors(i).iter().all(|&j| self.contains(j, i)))
    }
}

/// Neighbor sets `Γ_i = {j : d_ij ≤ cutoff}`; ties are included.
pub fn neighbor_sets(d: &DistanceMatrix, cutoff: f64) -> Result<NeighborSets> {
    if cutoff.is_nan() || cutoff < 0.0 {
        return Err(Error::input(format!("cutoff must be nonnegative, got {cutoff}")));
    }
    let lists = (0..d.len())
        .map(|i| d.row(i).iter().enumerate().filter(|(_, &v)| v <= cutoff).map(|(j, _)| j).collect())
        .collect();
    NeighborSets::from_lists(lists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid3() -> RegionSet {
        let mut ids = Vec::new();
        let mut coords = Vec::new();
        for r in 0..3 {
            for c in 0..3 {
                ids.push(format!("r{r}{c}"));
                coords.push([c as f64 - 1.0, 1.0 - r as f64]);
            }
        }
        RegionSet::new(ids, coords).unwrap()
    }

    #[test]
    fn single_region_distance() {
        let rs = RegionSet::new(vec!["a".into()], vec![[0.0, 0.0]]).unwrap();
        let d = build_distance_matrix(&rs).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn three_four_five() {
        let rs = RegionSet::new(vec!["a".into(), "b".into()], vec![[0.0, 0.0], [3.0, 4.0]]).unwrap();
        let d = build_distance_matrix(&rs).unwrap();
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
    }

    #[test]
    fn grid_corner_to_corner() {
        let d = build_distance_matrix(&grid3()).unwrap();
        assert!((d.get(0, 8) - 2.0 * 2f64.sqrt()).abs() < 1e-15);
        assert!((d.get(2, 6) - 2.0 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn non_finite_coordinate_rejected() {
        let rs = RegionSet::new(vec!["a".into(), "b".into()], vec![[0.0, f64::NAN], [1.0, 1.0]]).unwrap();
        assert!(matches!(build_distance_matrix(&rs), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = RegionSet::new(vec!["a".into(), "a".into()], vec![[0.0, 0.0], [1.0, 1.0]]);
        assert!(err.is_err());
        assert!(RegionSet::new(vec![], vec![]).is_err());
        assert!(RegionSet::new(vec!["a".into()], vec![]).is_err());
    }

    #[test]
    fn grid_cutoff_two_drops_pairs_beyond_two() {
        let d = build_distance_matrix(&grid3()).unwrap();
        let g = neighbor_sets(&d, 2.0).unwrap();
        let mut missing = Vec::new();
        for i in 0..9 {
            for j in 0..9 {
                if !g.contains(i, j) {
                    assert!(d.get(i, j) > 2.0);
                    missing.push((i, j));
                } else {
                    assert!(d.get(i, j) <= 2.0);
                }
            }
        }
        // opposite corners at 2√2 and corner to far edge midpoint at √5
        for pair in [(0, 8), (2, 6), (6, 2), (8, 0)] {
            assert!(missing.contains(&pair));
        }
        assert_eq!(missing.iter().filter(|&&(i, j)| (d.get(i, j) - 5f64.sqrt()).abs() < 1e-12).count(), 16);
        assert_eq!(missing.len(), 20);
    }

    #[test]
    fn large_and_zero_cutoff() {
        let d = build_distance_matrix(&grid3()).unwrap();
        let all = neighbor_sets(&d, d.max()).unwrap();
        assert!((0..9).all(|i| all.neighbors(i).len() == 9));
        let none = neighbor_sets(&d, 0.0).unwrap();
        assert!((0..9).all(|i| none.neighbors(i) == [i]));
        assert_eq!(none.degree(4), 0);
        assert!(neighbor_sets(&d, -1.0).is_err());
    }

    #[test]
    fn tie_at_cutoff_included() {
        let d = build_distance_matrix(&grid3()).unwrap();
        let g = neighbor_sets(&d, 1.0).unwrap();
        assert!(g.contains(4, 1));
        assert!(!g.contains(4, 0));
    }

    #[test]
    fn positions_and_transpose() {
        let d = build_distance_matrix(&grid3()).unwrap();
        let g = neighbor_sets(&d, 1.0).unwrap();
        let tp = g.transpose_positions();
        let rows = g.rows();
        for (p, &j) in g.cols().iter().enumerate() {
            let i = rows[p];
            let q = tp[p].unwrap();
            assert_eq!(rows[q], j);
            assert_eq!(g.cols()[q], i);
        }
        for i in 0..9 {
            assert_eq!(g.cols()[g.diag_pos(i)], i);
        }
    }

    proptest! {
        #[test]
        fn neighbor_set_properties(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..25),
            k1 in 0.0f64..15.0,
            k2 in 0.0f64..15.0,
        ) {
            let ids = (0..pts.len()).map(|i| format!("p{i}")).collect();
            let coords = pts.iter().map(|&(x, y)| [x, y]).collect();
            let rs = RegionSet::new(ids, coords).unwrap();
            let d = build_distance_matrix(&rs).unwrap();
            let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            let small = neighbor_sets(&d, lo).unwrap();
            let big = neighbor_sets(&d, hi).unwrap();
            prop_assert!(small.is_symmetric());
            for i in 0..rs.len() {
                prop_assert!(small.contains(i, i));
                for &j in small.neighbors(i) {
                    prop_assert!(big.contains(i, j));
                }
            }
        }
    }
}
