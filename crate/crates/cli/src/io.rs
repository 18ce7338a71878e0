//! CSV and JSON formats read and written by the command-line tool.
//!
//! All tables are long format with a header row. Region order is always the
//! centroid-file order; files refer to regions by id only.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, NaiveDateTime};
use odflow::{CountPanel, FlowTensor, ModelParams, NeighborSets, RegionSet};
use serde::{Deserialize, Serialize};

/// How many offending ids an error message lists before summarizing.
const MAX_LISTED: usize = 20;

#[derive(Debug, Deserialize, Serialize)]
struct CentroidRow {
    region_id: String,
    x: f64,
    y: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct CountRow {
    region_id: String,
    timestamp: String,
    count: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct FlowRow {
    t: usize,
    origin_id: String,
    dest_id: String,
    flow: f64,
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))
}

fn list_ids<'a>(ids: impl IntoIterator<Item = &'a String>) -> String {
    let ids: Vec<&String> = ids.into_iter().collect();
    let mut out = ids.iter().take(MAX_LISTED).map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
    if ids.len() > MAX_LISTED {
        out.push_str(&format!(" and {} more", ids.len() - MAX_LISTED));
    }
    out
}

pub fn read_centroids(path: &Path) -> Result<RegionSet> {
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    for (line, row) in reader(path)?.deserialize::<CentroidRow>().enumerate() {
        let row = row.with_context(|| format!("{}: bad centroid record {}", path.display(), line + 1))?;
        ids.push(row.region_id);
        coords.push([row.x, row.y]);
    }
    RegionSet::new(ids, coords).with_context(|| format!("invalid centroids in {}", path.display()))
}

pub fn write_centroids(path: &Path, regions: &RegionSet) -> Result<()> {
    let mut w = writer(path)?;
    for (id, &[x, y]) in regions.ids().iter().zip(regions.coords()) {
        w.serialize(CentroidRow { region_id: id.clone(), x, y })?;
    }
    w.flush()?;
    Ok(())
}

/// Which snapshots of a counts file to keep.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Window {
    #[default]
    All,
    /// Snapshot positions after sorting, both ends inclusive.
    Snapshots { first: usize, last: usize },
    /// Timestamp bounds, both inclusive.
    Times { from: Option<String>, to: Option<String> },
}

impl Window {
    pub fn from_args(window: Option<&str>, from: Option<&str>, to: Option<&str>) -> Result<Self> {
        if let Some(spec) = window {
            let (first, last) = parse_index_range(spec)?;
            return Ok(Self::Snapshots { first, last });
        }
        if from.is_none() && to.is_none() {
            return Ok(Self::All);
        }
        Ok(Self::Times { from: from.map(str::to_owned), to: to.map(str::to_owned) })
    }
}

/// Parses `FIRST:LAST` into an inclusive index pair.
pub fn parse_index_range(spec: &str) -> Result<(usize, usize)> {
    let Some((a, b)) = spec.split_once(':') else {
        bail!("range {spec:?} is not of the form FIRST:LAST");
    };
    let first: usize = a.trim().parse().with_context(|| format!("bad range start in {spec:?}"))?;
    let last: usize = b.trim().parse().with_context(|| format!("bad range end in {spec:?}"))?;
    if last < first {
        bail!("range {spec:?} ends before it starts");
    }
    Ok((first, last))
}

/// Timestamps are integers (any unit) or date-times; both map to an ordered
/// integer key so spacing can be checked.
pub fn parse_timestamp(s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    bail!("unrecognized timestamp {s:?}")
}

#[derive(Debug, Clone)]
pub struct LoadedCounts {
    pub panel: CountPanel,
    /// Regions kept, in centroid order.
    pub regions: RegionSet,
    /// Timestamps of the kept snapshots as written in the file.
    pub timestamps: Vec<String>,
    /// Regions discarded for missing values inside the window.
    pub dropped: Vec<String>,
}

/// Reads `region_id,timestamp,count` rows and pivots them to a snapshot by
/// region panel over `window`. Regions without a value at every kept
/// snapshot are dropped and logged.
pub fn load_counts(path: &Path, centroids: &RegionSet, window: &Window) -> Result<LoadedCounts> {
    let n = centroids.len();
    let mut values: HashMap<(usize, i64), f64> = HashMap::new();
    let mut labels: HashMap<i64, String> = HashMap::new();
    let mut last_seen: Vec<Option<i64>> = vec![None; n];
    let mut unknown = BTreeSet::new();
    for (line, row) in reader(path)?.deserialize::<CountRow>().enumerate() {
        let row = row.with_context(|| format!("{}: bad count record {}", path.display(), line + 1))?;
        let Some(i) = centroids.index_of(&row.region_id) else {
            unknown.insert(row.region_id);
            continue;
        };
        let key =
            parse_timestamp(&row.timestamp).with_context(|| format!("{}: record {}", path.display(), line + 1))?;
        if !(row.count.is_finite() && row.count >= 0.0) {
            bail!("{}: count {} for region {} is not a nonnegative number", path.display(), row.count, row.region_id);
        }
        if values.insert((i, key), row.count).is_some() {
            bail!("{}: duplicate record for region {} at {}", path.display(), row.region_id, row.timestamp);
        }
        if let Some(prev) = last_seen[i] {
            if key < prev {
                bail!(
                    "{}: timestamps for region {} are not increasing ({} after {})",
                    path.display(),
                    row.region_id,
                    row.timestamp,
                    labels[&prev]
                );
            }
        }
        last_seen[i] = Some(key);
        labels.entry(key).or_insert(row.timestamp);
    }
    if !unknown.is_empty() {
        bail!("{}: region ids not in the centroid file: {}", path.display(), list_ids(&unknown));
    }

    let mut times: Vec<i64> = labels.keys().copied().collect();
    times.sort_unstable();
    check_spacing(&times, &labels)?;
    let kept = select_window(&times, window)?;
    if kept.len() < 2 {
        bail!("the selected window holds {} snapshot(s); at least 2 are needed", kept.len());
    }

    let mut keep_regions = Vec::new();
    let mut dropped = Vec::new();
    for i in 0..n {
        if kept.iter().all(|t| values.contains_key(&(i, *t))) {
            keep_regions.push(i);
        } else {
            dropped.push(centroids.ids()[i].clone());
        }
    }
    if !dropped.is_empty() {
        log::warn!("discarding {} region(s) with missing counts in the window: {}", dropped.len(), list_ids(&dropped));
    }
    if keep_regions.is_empty() {
        bail!("no region has counts at every selected snapshot");
    }
    let mut data = Vec::with_capacity(kept.len() * keep_regions.len());
    for t in &kept {
        data.extend(keep_regions.iter().map(|&i| values[&(i, *t)]));
    }
    let panel = CountPanel::new(kept.len(), keep_regions.len(), data)?;
    let regions = centroids.subset(&keep_regions)?;
    let timestamps = kept.iter().map(|t| labels[t].clone()).collect();
    Ok(LoadedCounts { panel, regions, timestamps, dropped })
}

fn check_spacing(times: &[i64], labels: &HashMap<i64, String>) -> Result<()> {
    let Some(step) = times.windows(2).map(|w| w[1] - w[0]).next() else {
        return Ok(());
    };
    for w in times.windows(2) {
        if w[1] - w[0] != step {
            bail!(
                "snapshots are not evenly spaced: {} to {} differs from the first interval",
                labels[&w[0]],
                labels[&w[1]]
            );
        }
    }
    Ok(())
}

fn select_window(times: &[i64], window: &Window) -> Result<Vec<i64>> {
    match window {
        Window::All => Ok(times.to_vec()),
        Window::Snapshots { first, last } => {
            if *last >= times.len() {
                bail!("window {first}:{last} is out of range for {} snapshots", times.len());
            }
            Ok(times[*first..=*last].to_vec())
        }
        Window::Times { from, to } => {
            let lo = from.as_deref().map(parse_timestamp).transpose()?.unwrap_or(i64::MIN);
            let hi = to.as_deref().map(parse_timestamp).transpose()?.unwrap_or(i64::MAX);
            Ok(times.iter().copied().filter(|t| (lo..=hi).contains(t)).collect())
        }
    }
}

pub fn write_counts(path: &Path, panel: &CountPanel, regions: &RegionSet, timestamps: &[String]) -> Result<()> {
    if timestamps.len() != panel.snapshots() || regions.len() != panel.regions() {
        bail!("counts shape does not match its labels");
    }
    let mut w = writer(path)?;
    for (i, id) in regions.ids().iter().enumerate() {
        for (t, stamp) in timestamps.iter().enumerate() {
            w.serialize(CountRow { region_id: id.clone(), timestamp: stamp.clone(), count: panel.get(t, i) })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes every active entry, including zeros, as `t,origin_id,dest_id,flow`.
pub fn write_flows(path: &Path, flows: &FlowTensor, regions: &RegionSet) -> Result<()> {
    if flows.regions() != regions.len() {
        bail!("flows cover {} regions but {} ids were given", flows.regions(), regions.len());
    }
    let ids = regions.ids();
    let mut w = writer(path)?;
    let mut result = Ok(());
    flows.for_each_active(|t, i, j, flow| {
        if result.is_ok() {
            result = w.serialize(FlowRow { t, origin_id: ids[i].clone(), dest_id: ids[j].clone(), flow });
        }
    });
    result?;
    w.flush()?;
    Ok(())
}

/// Reads a flows CSV onto the regions of `regions`. The sparsity pattern is
/// the union of listed pairs over all steps, plus every diagonal. Rows naming
/// unknown regions are an error unless `skip_unknown` is set.
pub fn read_flows(path: &Path, regions: &RegionSet, skip_unknown: bool) -> Result<FlowTensor> {
    let n = regions.len();
    let mut entries: HashMap<(usize, usize, usize), f64> = HashMap::new();
    let mut unknown = BTreeSet::new();
    let mut steps = 0;
    for (line, row) in reader(path)?.deserialize::<FlowRow>().enumerate() {
        let row = row.with_context(|| format!("{}: bad flow record {}", path.display(), line + 1))?;
        let (Some(i), Some(j)) = (regions.index_of(&row.origin_id), regions.index_of(&row.dest_id)) else {
            for id in [row.origin_id, row.dest_id] {
                if regions.index_of(&id).is_none() {
                    unknown.insert(id);
                }
            }
            continue;
        };
        if !(row.flow.is_finite() && row.flow >= 0.0) {
            bail!("{}: flow {} on record {} is not a nonnegative number", path.display(), row.flow, line + 1);
        }
        if entries.insert((row.t, i, j), row.flow).is_some() {
            bail!("{}: duplicate flow {} -> {} at step {}", path.display(), row.origin_id, row.dest_id, row.t);
        }
        steps = steps.max(row.t + 1);
    }
    if !unknown.is_empty() {
        if skip_unknown {
            log::info!("{}: ignoring flows of {} region(s) outside the fit", path.display(), unknown.len());
        } else {
            bail!("{}: region ids not in the centroid file: {}", path.display(), list_ids(&unknown));
        }
    }
    if steps == 0 {
        bail!("{}: no flows", path.display());
    }
    let mut lists: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for &(_, i, j) in entries.keys() {
        lists[i].push(j);
    }
    let pattern = Arc::new(NeighborSets::from_lists(lists)?);
    let mut m = FlowTensor::zeros(steps, pattern);
    for (&(t, i, j), &v) in &entries {
        m.set(t, i, j, v)?;
    }
    Ok(m)
}

#[derive(Debug, Serialize, Deserialize)]
struct RegionParams {
    region_id: String,
    pi: f64,
    s: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsFile {
    beta: f64,
    regions: Vec<RegionParams>,
}

pub fn write_params(path: &Path, params: &ModelParams, regions: &RegionSet) -> Result<()> {
    let file = ParamsFile {
        beta: params.beta,
        regions: regions
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| RegionParams { region_id: id.clone(), pi: params.pi[i], s: params.s[i] })
            .collect(),
    };
    write_json(path, &file)
}

pub fn read_params(path: &Path, regions: &RegionSet) -> Result<ModelParams> {
    let file: ParamsFile = read_json(path)?;
    let n = regions.len();
    let mut pi = vec![f64::NAN; n];
    let mut s = vec![f64::NAN; n];
    for r in file.regions {
        let Some(i) = regions.index_of(&r.region_id) else {
            bail!("{}: unknown region {}", path.display(), r.region_id);
        };
        pi[i] = r.pi;
        s[i] = r.s;
    }
    let missing: Vec<&String> = regions.ids().iter().zip(&pi).filter(|(_, v)| v.is_nan()).map(|(id, _)| id).collect();
    if !missing.is_empty() {
        bail!("{}: no parameters for {}", path.display(), list_ids(missing));
    }
    Ok(ModelParams { pi, s, beta: file.beta })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}
