//! Topology-based trajectory clustering: intersections first, then revisits,
//! then long linear stretches; leftovers join the closest cluster in time.

use std::fmt;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Point3;
use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, yaw_of, NeighborIndex, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    pub index: usize,
    pub pose: Pose,
    pub timestamp: f64,
    pub yaw: f64,
}

impl TrajectoryFrame {
    pub fn position(&self) -> Point3<f64> {
        Point3::from(*self.pose.translation())
    }
}

pub fn trajectory_frames(poses: &[Pose], timestamps: &[f64]) -> Result<Vec<TrajectoryFrame>> {
    if poses.len() != timestamps.len() {
        return Err(Error::LengthMismatch {
            what: "poses vs timestamps",
            left: poses.len(),
            right: timestamps.len(),
        });
    }
    if let Some(w) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "timestamps",
            format!("not strictly increasing at frame {}", w + 1),
        ));
    }
    poses
        .iter()
        .zip(timestamps)
        .enumerate()
        .map(|(index, (pose, &timestamp))| {
            Ok(TrajectoryFrame {
                index,
                pose: *pose,
                timestamp,
                yaw: yaw_of(pose)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    pub window: usize,
    /// Radians.
    pub yaw_threshold: f64,
    pub revisit_radius: f64,
    pub min_time_gap: f64,
    pub min_linear_len: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            window: 20,
            yaw_threshold: 30f64.to_radians(),
            revisit_radius: 10.0,
            min_time_gap: 60.0,
            min_linear_len: 100,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::invalid("window", "must be at least 2"));
        }
        if !(self.yaw_threshold > 0.0 && self.yaw_threshold < std::f64::consts::PI) {
            return Err(Error::invalid("yaw_threshold", "must lie in (0, π)"));
        }
        if !(self.revisit_radius > 0.0) {
            return Err(Error::invalid("revisit_radius", "must be positive"));
        }
        if !(self.min_time_gap > 0.0) {
            return Err(Error::invalid("min_time_gap", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterKind {
    Intersection,
    Revisit,
    #[default]
    Linear,
}

impl fmt::Display for ClusterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterKind::Intersection => "intersection",
            ClusterKind::Revisit => "revisit",
            ClusterKind::Linear => "linear",
        })
    }
}

impl FromStr for ClusterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intersection" => Ok(ClusterKind::Intersection),
            "revisit" => Ok(ClusterKind::Revisit),
            "linear" => Ok(ClusterKind::Linear),
            other => Err(Error::invalid("cluster kind", other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub kind: ClusterKind,
    /// Sorted frame indices.
    pub frames: Vec<usize>,
    pub subclusters: Vec<Range<usize>>,
}

impl Cluster {
    fn new(kind: ClusterKind, mut frames: Vec<usize>) -> Self {
        frames.sort_unstable();
        frames.dedup();
        let subclusters = decompose_subclusters(&frames);
        Self {
            kind,
            frames,
            subclusters,
        }
    }

    pub fn num_subclusters(&self) -> usize {
        self.subclusters.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPartition {
    pub num_frames: usize,
    pub clusters: Vec<Cluster>,
}

impl ClusterPartition {
    /// `(cluster id, subcluster id)` for every frame.
    pub fn assignment(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(usize::MAX, usize::MAX); self.num_frames];
        for (c, cluster) in self.clusters.iter().enumerate() {
            for (s, run) in cluster.subclusters.iter().enumerate() {
                for f in run.clone() {
                    out[f] = (c, s);
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_frames];
        for (c, cluster) in self.clusters.iter().enumerate() {
            if cluster.subclusters.is_empty() {
                return Err(Error::DegenerateInput(format!("cluster {c} is empty")));
            }
            if cluster.subclusters != decompose_subclusters(&cluster.frames) {
                return Err(Error::DegenerateInput(format!(
                    "cluster {c} subclusters are not maximal runs"
                )));
            }
            for &f in &cluster.frames {
                if f >= self.num_frames || std::mem::replace(&mut seen[f], true) {
                    return Err(Error::DegenerateInput(format!(
                        "frame {f} duplicated or out of range"
                    )));
                }
            }
        }
        if let Some(f) = seen.iter().position(|s| !s) {
            return Err(Error::DegenerateInput(format!("frame {f} not clustered")));
        }
        Ok(())
    }

    /// Total number of submap alignments a correction pass performs.
    pub fn alignment_count(&self) -> usize {
        self.clusters.iter().map(|c| c.num_subclusters() - 1).sum()
    }
}

/// Maximal runs of consecutive indices, ordered by first index.
pub fn decompose_subclusters(frames: &[usize]) -> Vec<Range<usize>> {
    let mut sorted = frames.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut runs: Vec<Range<usize>> = Vec::new();
    for f in sorted {
        match runs.last_mut() {
            Some(run) if run.end == f => run.end += 1,
            _ => runs.push(f..f + 1),
        }
    }
    runs
}

fn merge_ranges(mut ranges: Vec<Range<usize>>) -> Vec<Range<usize>> {
    ranges.sort_by_key(|r| r.start);
    let mut out: Vec<Range<usize>> = Vec::new();
    for r in ranges {
        match out.last_mut() {
            Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
            _ => out.push(r),
        }
    }
    out
}

/// Frame ranges whose windowed absolute yaw change exceeds the threshold.
/// Every qualifying window is marked in full and overlaps are merged.
pub fn detect_turn_regions(
    frames: &[TrajectoryFrame],
    window: usize,
    yaw_threshold: f64,
) -> Result<Vec<Range<usize>>> {
    if window < 2 {
        return Err(Error::invalid("window", "must be at least 2"));
    }
    if frames.len() < 2 {
        return Ok(Vec::new());
    }
    let steps: Vec<f64> = frames
        .windows(2)
        .map(|w| wrap_angle(w[1].yaw - w[0].yaw).abs())
        .collect();
    // A window of `window` frames spans `window - 1` steps.
    let span = (window - 1).min(steps.len());
    let mut sum: f64 = steps[..span].iter().sum();
    let mut hits = Vec::new();
    for start in 0..=steps.len() - span {
        if start > 0 {
            sum += steps[start + span - 1] - steps[start - 1];
        }
        if sum > yaw_threshold {
            hits.push(start..start + span + 1);
        }
    }
    Ok(merge_ranges(hits))
}

/// Pairs of frames that are close in space but far apart in time.
fn revisit_pairs(frames: &[TrajectoryFrame], radius: f64, min_time_gap: f64) -> Vec<(usize, usize)> {
    let positions: Vec<Point3<f64>> = frames.iter().map(TrajectoryFrame::position).collect();
    let index = NeighborIndex::new(&positions);
    let mut pairs = Vec::new();
    for (i, p) in positions.iter().enumerate() {
        for j in index.within(p, radius) {
            if j > i && frames[j].timestamp - frames[i].timestamp >= min_time_gap {
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Connected components of the pair graph, each sorted, ordered by first member.
fn components(n: usize, pairs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::<usize>::new(n);
    let mut involved = vec![false; n];
    for &(a, b) in pairs {
        uf.union(a, b);
        involved[a] = true;
        involved[b] = true;
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for f in (0..n).filter(|&f| involved[f]) {
        groups.entry(uf.find(f)).or_default().push(f);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

/// Groups of frames linked by revisits: within `radius` of each other while
/// at least `min_time_gap` seconds apart, closed transitively.
pub fn detect_revisits(
    frames: &[TrajectoryFrame],
    radius: f64,
    min_time_gap: f64,
) -> Result<Vec<Vec<usize>>> {
    if !(radius > 0.0) {
        return Err(Error::invalid("radius", "must be positive"));
    }
    if !(min_time_gap > 0.0) {
        return Err(Error::invalid("min_time_gap", "must be positive"));
    }
    let pairs = revisit_pairs(frames, radius, min_time_gap);
    Ok(components(frames.len(), &pairs))
}

fn mean_position(frames: &[TrajectoryFrame], members: &[usize]) -> Point3<f64> {
    let sum = members
        .iter()
        .fold(nalgebra::Vector3::zeros(), |acc, &f| acc + frames[f].position().coords);
    Point3::from(sum / members.len() as f64)
}

pub fn cluster_trajectory(frames: &[TrajectoryFrame], params: &ClusterParams) -> Result<ClusterPartition> {
    params.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptyInput("trajectory"));
    }
    let n = frames.len();
    let positions: Vec<Point3<f64>> = frames.iter().map(TrajectoryFrame::position).collect();
    let index = NeighborIndex::new(&positions);
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<(ClusterKind, Vec<usize>)> = Vec::new();

    // Step 1: intersections. Seeds are turn regions and crossings, i.e.
    // revisits whose headings differ by more than the threshold (antiparallel
    // passes of the same road do not count).
    let turns = detect_turn_regions(frames, params.window, params.yaw_threshold)?;
    let pairs = revisit_pairs(frames, params.revisit_radius, params.min_time_gap);
    let crossing_pairs: Vec<(usize, usize)> = pairs
        .iter()
        .copied()
        .filter(|&(a, b)| {
            let d = wrap_angle(frames[a].yaw - frames[b].yaw).abs();
            d.min(std::f64::consts::PI - d) > params.yaw_threshold
        })
        .collect();
    let mut seeds: Vec<Vec<usize>> = turns.into_iter().map(|r| r.collect()).collect();
    seeds.extend(components(n, &crossing_pairs));

    let centers: Vec<Point3<f64>> = seeds.iter().map(|s| mean_position(frames, s)).collect();
    let mut sites = UnionFind::<usize>::new(seeds.len());
    for a in 0..seeds.len() {
        for b in a + 1..seeds.len() {
            if (centers[a] - centers[b]).norm() <= 2.0 * params.revisit_radius {
                sites.union(a, b);
            }
        }
    }
    let mut site_members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (s, seed) in seeds.iter().enumerate() {
        site_members.entry(sites.find(s)).or_default().extend(seed);
    }
    let mut site_list: Vec<Vec<usize>> = site_members
        .into_values()
        .map(|mut v| {
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    site_list.sort_by_key(|s| s[0]);
    for seed_frames in site_list {
        let id = clusters.len();
        let mut members = Vec::new();
        for &f in &seed_frames {
            for g in std::iter::once(f).chain(index.within(&positions[f], params.revisit_radius)) {
                if owner[g].is_none() {
                    owner[g] = Some(id);
                    members.push(g);
                }
            }
        }
        if !members.is_empty() {
            clusters.push((ClusterKind::Intersection, members));
        }
    }

    // Step 2: remaining revisit groups, then long unclustered runs.
    for group in components(n, &pairs) {
        let members: Vec<usize> = group.into_iter().filter(|&f| owner[f].is_none()).collect();
        if members.is_empty() {
            continue;
        }
        let id = clusters.len();
        for &f in &members {
            owner[f] = Some(id);
        }
        clusters.push((ClusterKind::Revisit, members));
    }
    let free: Vec<usize> = (0..n).filter(|&f| owner[f].is_none()).collect();
    for run in decompose_subclusters(&free) {
        if run.len() >= params.min_linear_len {
            let id = clusters.len();
            for f in run.clone() {
                owner[f] = Some(id);
            }
            clusters.push((ClusterKind::Linear, run.collect()));
        }
    }
    if clusters.is_empty() {
        return Ok(ClusterPartition {
            num_frames: n,
            clusters: vec![Cluster::new(ClusterKind::Linear, (0..n).collect())],
        });
    }

    // Order clusters by first frame so "earlier" is well defined for ties.
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by_key(|&c| clusters[c].1.iter().min().copied());
    let mut rank = vec![0; clusters.len()];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    let owner: Vec<Option<usize>> = owner.into_iter().map(|o| o.map(|c| rank[c])).collect();
    let mut clusters: Vec<(ClusterKind, Vec<usize>)> = order
        .iter()
        .map(|&c| std::mem::take(&mut clusters[c]))
        .collect();

    // Step 3: leftovers join the cluster with the nearest member in frame
    // index, ties toward the earlier cluster.
    let mut left = vec![None; n];
    let mut last = None;
    for f in 0..n {
        if let Some(c) = owner[f] {
            last = Some((f, c));
        }
        left[f] = last;
    }
    let mut next = None;
    for f in (0..n).rev() {
        if let Some(c) = owner[f] {
            next = Some((f, c));
            continue;
        }
        let candidates = [left[f].map(|(g, c)| (f - g, c)), next.map(|(g, c)| (g - f, c))];
        let (_, c) = candidates
            .into_iter()
            .flatten()
            .min()
            .expect("at least one cluster exists");
        clusters[c].1.push(f);
    }

    Ok(ClusterPartition {
        num_frames: n,
        clusters: clusters
            .into_iter()
            .map(|(kind, frames)| Cluster::new(kind, frames))
            .collect(),
    })
}

/// Writes `frame_index cluster_id subcluster_id` rows; cluster kinds go in
/// leading comment lines.
pub fn write_partition_table(partition: &ClusterPartition, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (c, cluster) in partition.clusters.iter().enumerate() {
        writeln!(out, "# cluster {c} {}", cluster.kind)?;
    }
    writeln!(out, "# frame_index cluster_id subcluster_id")?;
    for (f, (c, s)) in partition.assignment().into_iter().enumerate() {
        writeln!(out, "{f} {c} {s}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_partition_table(path: impl AsRef<Path>) -> Result<ClusterPartition> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut kinds = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut num_frames = 0;
    for (lineno, line) in text.lines().enumerate() {
        let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            ["#", "cluster", _, kind] => kinds.push(kind.parse::<ClusterKind>()?),
            [first, ..] if first.starts_with('#') => {}
            [f, c, _] => {
                let f: usize = f.parse().map_err(|_| bad("bad frame index"))?;
                let c: usize = c.parse().map_err(|_| bad("bad cluster id"))?;
                if f != num_frames {
                    return Err(bad("frame indices must be contiguous"));
                }
                if c >= members.len() {
                    members.resize(c + 1, Vec::new());
                }
                members[c].push(f);
                num_frames += 1;
            }
            _ => return Err(bad("expected three columns")),
        }
    }
    if kinds.len() < members.len() {
        return Err(Error::format(path, "missing cluster kind header"));
    }
    let partition = ClusterPartition {
        num_frames,
        clusters: members
            .into_iter()
            .zip(kinds)
            .map(|(frames, kind)| Cluster::new(kind, frames))
            .collect(),
    };
    partition.validate()?;
    Ok(partition)
}
