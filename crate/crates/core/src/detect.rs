//! Cluster-then-detect annotation: ground removal, voxel-connected instances,
//! and a per-instance persistence test against the cluster's accumulated map.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelValue, MosClass};
use crate::error::{Error, Result};
use crate::geometry::{aabb_of_points, Aabb, PointCloud, Pose, VoxelKey};
use crate::sync::FrameSource;
use crate::trajectory::ClusterPartition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageModel {
    pub min_range: f64,
    pub max_range: f64,
    /// Elevation limits in degrees, sensor frame.
    pub vfov_min_deg: f64,
    pub vfov_max_deg: f64,
    /// Angular bin of the per-frame visibility image, degrees.
    pub bin_deg: f64,
    /// A point counts as visible when the frame saw something at least this
    /// close to its range along the same bin.
    pub occlusion_margin: f64,
}

impl Default for CoverageModel {
    fn default() -> Self {
        Self {
            min_range: 1.0,
            max_range: 60.0,
            vfov_min_deg: -22.5,
            vfov_max_deg: 22.5,
            bin_deg: 0.5,
            occlusion_margin: 0.5,
        }
    }
}

/// Returns of one frame keyed by azimuth/elevation bin, sensor frame,
/// sorted by bin and then range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeImage {
    bin_deg: f64,
    cols: usize,
    rows: usize,
    entries: Vec<(u32, f32)>,
    /// First occupied row and, per bin from there on, where its entries start.
    row_lo: usize,
    starts: Vec<u32>,
}

impl RangeImage {
    pub fn from_cloud(cloud: &PointCloud, bin_deg: f64) -> Self {
        let mut image = Self {
            bin_deg,
            cols: (360.0 / bin_deg).ceil() as usize,
            rows: (180.0 / bin_deg).ceil() as usize + 1,
            entries: Vec::new(),
            row_lo: 0,
            starts: vec![0],
        };
        let mut entries: Vec<(u32, f32)> = cloud
            .points
            .iter()
            .map(|p| {
                let (bin, range) = image.bin(&p.coords);
                (bin as u32, range as f32)
            })
            .collect();
        entries.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        if let (Some(first), Some(last)) = (entries.first(), entries.last()) {
            image.row_lo = first.0 as usize / image.cols;
            let base = image.row_lo * image.cols;
            let n = (last.0 as usize / image.cols + 1) * image.cols - base;
            image.starts = (0..=n)
                .map(|b| entries.partition_point(|e| (e.0 as usize) < base + b) as u32)
                .collect();
        }
        image.entries = entries;
        image
    }

    fn bin(&self, d: &Vector3<f64>) -> (usize, f64) {
        let range = d.norm();
        let az = d.y.atan2(d.x).to_degrees() + 180.0;
        let el = (d.z / range.max(1e-12)).clamp(-1.0, 1.0).asin().to_degrees() + 90.0;
        let c = ((az / self.bin_deg) as usize).min(self.cols - 1);
        let r = ((el / self.bin_deg) as usize).min(self.rows - 1);
        (r * self.cols + c, range)
    }

    fn ranges(&self, bin: u32) -> &[(u32, f32)] {
        let Some(b) = (bin as usize).checked_sub(self.row_lo * self.cols) else {
            return &[];
        };
        match (self.starts.get(b), self.starts.get(b + 1)) {
            (Some(&lo), Some(&hi)) => &self.entries[lo as usize..hi as usize],
            _ => &[],
        }
    }

    /// Sorted ranges of every bin in the 3×3 block around direction `d`.
    fn around(&self, d: &Vector3<f64>) -> impl Iterator<Item = &[(u32, f32)]> + '_ {
        let (bin, _) = self.bin(d);
        let (r, c) = ((bin / self.cols) as isize, (bin % self.cols) as isize);
        (-1..=1)
            .flat_map(move |dr| (-1..=1).map(move |dc| (r + dr, c + dc)))
            .filter(|(rr, _)| *rr >= 0 && *rr < self.rows as isize)
            .map(move |(rr, cc)| self.ranges((rr as usize * self.cols + cc.rem_euclid(self.cols as isize) as usize) as u32))
    }

    /// `(farthest return, some return within tol of |d|)` around `d`.
    fn probe(&self, d: &Vector3<f64>, tol: f64) -> (f64, bool) {
        let range = d.norm();
        let (lo, hi) = ((range - tol) as f32, (range + tol) as f32);
        let mut far = 0f32;
        let mut near = false;
        for b in self.around(d) {
            if let Some(last) = b.last() {
                far = far.max(last.1);
                if !near {
                    let i = b.partition_point(|e| e.1 < lo);
                    near = i < b.len() && b[i].1 <= hi;
                }
            }
        }
        (far as f64, near)
    }

    /// Farthest return around the direction of `d`, 0 when there is none.
    pub fn farthest(&self, d: &Vector3<f64>) -> f64 {
        self.around(d).filter_map(|b| b.last()).fold(0f32, |a, b| a.max(b.1)) as f64
    }

    /// Whether some return around the direction of `d` lies within `tol` of
    /// its range.
    pub fn returns_near(&self, d: &Vector3<f64>, tol: f64) -> bool {
        let range = d.norm();
        let (lo, hi) = ((range - tol) as f32, (range + tol) as f32);
        self.around(d).any(|b| {
            let i = b.partition_point(|e| e.1 < lo);
            i < b.len() && b[i].1 <= hi
        })
    }
}

impl CoverageModel {
    /// Whether a sensor at `pose` could observe the world point `p`.
    pub fn covers(&self, pose: &Pose, p: &Point3<f64>) -> bool {
        let d = pose.rotation().transpose() * (p.coords - pose.translation());
        let range = d.norm();
        if range < self.min_range || range > self.max_range {
            return false;
        }
        let elevation = d.z.atan2(d.xy().norm()).to_degrees();
        elevation >= self.vfov_min_deg && elevation <= self.vfov_max_deg
    }

    /// [`covers`](Self::covers), and the frame's returns show the line of
    /// sight to `p` was not blocked.
    pub fn sees(&self, pose: &Pose, image: &RangeImage, p: &Point3<f64>) -> bool {
        if !self.covers(pose, p) {
            return false;
        }
        let d = pose.rotation().transpose() * (p.coords - pose.translation());
        image.farthest(&d) >= d.norm() - self.occlusion_margin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectParams {
    pub ground_cell: f64,
    pub ground_lowest_fraction: f64,
    pub ground_threshold: f64,
    pub ground_min_points: usize,
    pub ground_min_normal_z: f64,
    pub instance_voxel: f64,
    pub min_instance_points: usize,
    pub max_instance_diag: f64,
    pub map_voxel: f64,
    pub rho_dyn: f64,
    pub min_coverage: usize,
    pub coverage: CoverageModel,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            ground_cell: 10.0,
            ground_lowest_fraction: 0.3,
            ground_threshold: 0.25,
            ground_min_points: 10,
            ground_min_normal_z: 0.9,
            instance_voxel: 0.5,
            min_instance_points: 10,
            max_instance_diag: 15.0,
            map_voxel: 0.2,
            rho_dyn: 0.35,
            min_coverage: 3,
            coverage: CoverageModel::default(),
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ground_cell", self.ground_cell),
            ("ground_threshold", self.ground_threshold),
            ("instance_voxel", self.instance_voxel),
            ("max_instance_diag", self.max_instance_diag),
            ("map_voxel", self.map_voxel),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.ground_lowest_fraction > 0.0 && self.ground_lowest_fraction <= 1.0) {
            return Err(Error::invalid("ground_lowest_fraction", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ground_min_normal_z) {
            return Err(Error::invalid("ground_min_normal_z", "must lie in [0, 1]"));
        }
        if !(self.rho_dyn > 0.0 && self.rho_dyn <= 1.0) {
            return Err(Error::invalid("rho_dyn", format!("must lie in (0, 1], got {}", self.rho_dyn)));
        }
        if self.min_coverage == 0 {
            return Err(Error::invalid("min_coverage", "must be at least 1"));
        }
        let c = &self.coverage;
        if !(c.min_range >= 0.0 && c.max_range > c.min_range) {
            return Err(Error::invalid("coverage", "need 0 <= min_range < max_range"));
        }
        if !(c.vfov_min_deg < c.vfov_max_deg && c.vfov_min_deg >= -90.0 && c.vfov_max_deg <= 90.0) {
            return Err(Error::invalid("coverage", "need -90 <= vfov_min_deg < vfov_max_deg <= 90"));
        }
        if !(c.bin_deg > 0.0 && c.bin_deg <= 90.0) {
            return Err(Error::invalid("bin_deg", "must lie in (0, 90]"));
        }
        if !(c.occlusion_margin >= 0.0) {
            return Err(Error::invalid("occlusion_margin", "must be non-negative"));
        }
        Ok(())
    }
}

/// Plane `z = a x + b y + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct GroundPlane {
    a: f64,
    b: f64,
    c: f64,
}

impl GroundPlane {
    fn distance(&self, p: &Point3<f64>) -> f64 {
        (self.a * p.x + self.b * p.y + self.c - p.z).abs() / (self.a * self.a + self.b * self.b + 1.0).sqrt()
    }

    fn normal_z(&self) -> f64 {
        1.0 / (self.a * self.a + self.b * self.b + 1.0).sqrt()
    }
}

fn fit_plane(points: &[Point3<f64>]) -> Option<GroundPlane> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for p in points {
        let row = Vector3::new(p.x - mean.x, p.y - mean.y, 1.0);
        ata += row * row.transpose();
        atb += row * (p.z - mean.z);
    }
    let sol = ata.cholesky()?.solve(&atb);
    let (a, b) = (sol.x, sol.y);
    Some(GroundPlane {
        a,
        b,
        c: mean.z + sol.z - a * mean.x - b * mean.y,
    })
}

/// Region-wise ground mask. Each 10 m cell fits a plane to its lowest
/// points; sparse cells borrow a neighbouring plane or mark nothing.
pub fn segment_ground(scan: &PointCloud, params: &DetectParams) -> Vec<bool> {
    let cell_of = |p: &Point3<f64>| {
        (
            (p.x / params.ground_cell).floor() as i64,
            (p.y / params.ground_cell).floor() as i64,
        )
    };
    let mut cells: FxHashMap<(i64, i64), Vec<usize>> = FxHashMap::default();
    for (i, p) in scan.points.iter().enumerate() {
        cells.entry(cell_of(p)).or_default().push(i);
    }
    let mut planes: FxHashMap<(i64, i64), (GroundPlane, usize)> = FxHashMap::default();
    for (cell, idx) in &cells {
        if idx.len() < params.ground_min_points {
            continue;
        }
        let mut zs: Vec<usize> = idx.clone();
        zs.sort_by(|&a, &b| scan.points[a].z.total_cmp(&scan.points[b].z).then(a.cmp(&b)));
        let take = ((zs.len() as f64 * params.ground_lowest_fraction).ceil() as usize).clamp(3, zs.len());
        // Walls can fill the lowest fraction of a cell; keep only the band
        // just above its low percentile.
        let base = scan.points[zs[zs.len() / 20]].z;
        let lowest: Vec<Point3<f64>> = zs[..take]
            .iter()
            .map(|&i| scan.points[i])
            .filter(|p| p.z <= base + 2.0 * params.ground_threshold)
            .collect();
        let plane = match fit_plane(&lowest) {
            Some(p) if p.normal_z() >= params.ground_min_normal_z => p,
            // Too steep to be ground: fall back to a level plane through the
            // median of the lowest points.
            _ => GroundPlane {
                a: 0.0,
                b: 0.0,
                c: lowest.get(lowest.len() / 2).map_or(base, |p| p.z),
            },
        };
        planes.insert(*cell, (plane, idx.len()));
    }
    let mut mask = vec![false; scan.len()];
    for (cell, idx) in &cells {
        let plane = planes.get(cell).map(|(p, _)| *p).or_else(|| {
            // Densest of the eight neighbours, ties broken by position.
            (-1..=1)
                .flat_map(|dx| (-1..=1).map(move |dy| (cell.0 + dx, cell.1 + dy)))
                .filter(|c| c != cell)
                .filter_map(|c| planes.get(&c).map(|(p, n)| (*n, c, *p)))
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
                .map(|(_, _, p)| p)
        });
        if let Some(plane) = plane {
            for &i in idx {
                mask[i] = plane.distance(&scan.points[i]) <= params.ground_threshold;
            }
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    /// Frame-local id, starting at 1.
    pub id: u16,
    pub indices: Vec<usize>,
    pub centroid: Point3<f64>,
    pub aabb: Aabb,
}

impl Instance {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// 26-connected voxel components of the non-ground points. Components that
/// are too small or too large stay background.
pub fn extract_instances(scan: &PointCloud, ground: &[bool], params: &DetectParams) -> Vec<Instance> {
    let mut voxels: FxHashMap<VoxelKey, Vec<usize>> = FxHashMap::default();
    let mut order: Vec<VoxelKey> = Vec::new();
    for (i, p) in scan.points.iter().enumerate() {
        if ground.get(i).copied().unwrap_or(false) {
            continue;
        }
        let key = VoxelKey::of(p, params.instance_voxel);
        voxels
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(i);
    }
    let mut visited: FxHashSet<VoxelKey> = FxHashSet::default();
    let mut instances = Vec::new();
    for start in order {
        if !visited.insert(start) {
            continue;
        }
        let mut indices = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(key) = queue.pop_front() {
            indices.extend_from_slice(&voxels[&key]);
            for n in key.neighbors26() {
                if voxels.contains_key(&n) && visited.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        if indices.len() < params.min_instance_points {
            continue;
        }
        indices.sort_unstable();
        let points: Vec<Point3<f64>> = indices.iter().map(|&i| scan.points[i]).collect();
        let aabb = aabb_of_points(&points, 0.0).expect("component is non-empty");
        if aabb.diagonal() > params.max_instance_diag {
            continue;
        }
        let centroid = Point3::from(points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / points.len() as f64);
        let id = u16::try_from(instances.len() + 1).unwrap_or(u16::MAX);
        instances.push(Instance {
            id,
            indices,
            centroid,
            aabb,
        });
    }
    instances
}

/// Accumulated voxel map of one trajectory cluster. Each voxel remembers the
/// frames that returned a point inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticMapModel {
    pub voxel_size: f64,
    pub coverage_model: CoverageModel,
    /// Sensor poses of the contributing frames, by frame index.
    pub frames: Vec<(usize, Pose)>,
    views: Vec<RangeImage>,
    voxels: FxHashMap<VoxelKey, Vec<u32>>,
}

impl StaticMapModel {
    pub fn num_voxels(&self) -> usize {
        self.voxels.len()
    }

    /// Distinct frames with a return in the 3×3×3 block around `key`.
    fn neighborhood_frames(&self, key: &VoxelKey) -> Vec<u32> {
        let mut frames: Vec<u32> = std::iter::once(*key)
            .chain(key.neighbors26())
            .filter_map(|k| self.voxels.get(&k))
            .flatten()
            .copied()
            .collect();
        frames.sort_unstable();
        frames.dedup();
        frames
    }

    fn sees(&self, view: usize, c: &Point3<f64>) -> bool {
        self.coverage_model.sees(&self.frames[view].1, &self.views[view], c)
    }

    /// Frames with an unobstructed view of the voxel centre.
    pub fn coverage(&self, key: &VoxelKey) -> usize {
        let c = key.center(self.voxel_size);
        (0..self.frames.len()).filter(|&v| self.sees(v, &c)).count()
    }

    /// Frames with a return in the voxel's neighbourhood.
    pub fn hits(&self, key: &VoxelKey) -> usize {
        self.neighborhood_frames(key).len()
    }

    /// `(hits among covering frames, coverage)` for one voxel. A covering
    /// frame also counts as a hit when it has a return at the voxel's range
    /// in the same angular bins, which keeps sparse far-range sampling from
    /// reading as absence.
    pub fn persistence(&self, key: &VoxelKey) -> (usize, usize) {
        let c = key.center(self.voxel_size);
        let hit_frames = self.neighborhood_frames(key);
        let mut hits = 0;
        let mut coverage = 0;
        let m = &self.coverage_model;
        for ((t, pose), view) in self.frames.iter().zip(&self.views) {
            if !m.covers(pose, &c) {
                continue;
            }
            let d = pose.rotation().transpose() * (c.coords - pose.translation());
            let (far, near) = view.probe(&d, m.occlusion_margin);
            if far >= d.norm() - m.occlusion_margin {
                coverage += 1;
                if near || hit_frames.binary_search(&(*t as u32)).is_ok() {
                    hits += 1;
                }
            }
        }
        (hits, coverage)
    }
}

/// Accumulates the given frames of one cluster in the world frame.
pub fn build_static_map(
    frames: &[usize],
    source: &dyn FrameSource,
    poses: &[Pose],
    params: &DetectParams,
) -> Result<StaticMapModel> {
    let per_frame: Vec<(usize, Vec<VoxelKey>, RangeImage)> = frames
        .par_iter()
        .map(|&t| {
            let pose = poses
                .get(t)
                .ok_or_else(|| Error::invalid("poses", format!("no pose for frame {t}")))?;
            let cloud = source.cloud(t)?;
            let mut keys: Vec<VoxelKey> = cloud
                .points
                .iter()
                .map(|p| VoxelKey::of(&pose.transform_point(p), params.map_voxel))
                .collect();
            keys.sort_unstable();
            keys.dedup();
            Ok((t, keys, RangeImage::from_cloud(&cloud, params.coverage.bin_deg)))
        })
        .collect::<Result<_>>()?;
    let mut voxels: FxHashMap<VoxelKey, Vec<u32>> = FxHashMap::default();
    let mut sorted = per_frame;
    sorted.sort_by_key(|(t, _, _)| *t);
    for (t, keys, _) in &sorted {
        for k in keys {
            voxels.entry(*k).or_default().push(*t as u32);
        }
    }
    Ok(StaticMapModel {
        voxel_size: params.map_voxel,
        coverage_model: params.coverage,
        frames: sorted.iter().map(|(t, _, _)| (*t, poses[*t])).collect(),
        views: sorted.into_iter().map(|(_, _, v)| v).collect(),
        voxels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Static,
    Dynamic,
    Unlabeled,
}

impl Verdict {
    pub fn class(self) -> MosClass {
        match self {
            Verdict::Static => MosClass::Static,
            Verdict::Dynamic => MosClass::Dynamic,
            Verdict::Unlabeled => MosClass::Unlabeled,
        }
    }
}

/// Mean persistence over the instance's well-covered voxels, or `None` when
/// no voxel is covered often enough.
pub fn occupancy_ratio(
    inst: &Instance,
    scan: &PointCloud,
    pose: &Pose,
    map: &StaticMapModel,
    params: &DetectParams,
) -> Option<f64> {
    let mut keys: Vec<VoxelKey> = inst
        .indices
        .iter()
        .map(|&i| VoxelKey::of(&pose.transform_point(&scan.points[i]), map.voxel_size))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    mean_ratio(keys.iter().map(|k| map.persistence(k)), params.min_coverage)
}

/// Mean `hits / coverage` over voxels covered at least `min_coverage` times.
fn mean_ratio(scores: impl Iterator<Item = (usize, usize)>, min_coverage: usize) -> Option<f64> {
    let (sum, n) = scores
        .filter(|(_, coverage)| *coverage >= min_coverage)
        .fold((0.0, 0usize), |(sum, n), (hits, coverage)| (sum + hits as f64 / coverage as f64, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn verdict_for(rho: Option<f64>, params: &DetectParams) -> Verdict {
    match rho {
        None => Verdict::Unlabeled,
        Some(r) if r < params.rho_dyn => Verdict::Dynamic,
        Some(_) => Verdict::Static,
    }
}

pub fn classify_instance(
    inst: &Instance,
    scan: &PointCloud,
    pose: &Pose,
    map: &StaticMapModel,
    params: &DetectParams,
) -> Verdict {
    verdict_for(occupancy_ratio(inst, scan, pose, map, params), params)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanAnnotation {
    pub frame: usize,
    pub labels: Vec<LabelValue>,
}

impl ScanAnnotation {
    pub fn dynamic_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_dynamic()).count()
    }
}

/// Ground and background are static; instance points take their verdict and
/// keep the instance id.
pub fn annotate_scan(frame: usize, len: usize, instances: &[Instance], verdicts: &[Verdict]) -> ScanAnnotation {
    let mut labels = vec![LabelValue::STATIC; len];
    for (inst, verdict) in instances.iter().zip(verdicts) {
        let value = LabelValue::new(verdict.class(), inst.id);
        for &i in &inst.indices {
            labels[i] = value;
        }
    }
    ScanAnnotation { frame, labels }
}

/// An instance with its verdict and world-frame geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedInstance {
    pub instance: Instance,
    pub verdict: Verdict,
    pub rho: Option<f64>,
    pub world_centroid: Point3<f64>,
    pub world_aabb: Aabb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetection {
    pub annotation: ScanAnnotation,
    pub instances: Vec<DetectedInstance>,
}

impl FrameDetection {
    pub fn frame(&self) -> usize {
        self.annotation.frame
    }
}

/// Detects dynamics in every frame of one cluster against that cluster's map.
pub fn detect_cluster(
    frames: &[usize],
    source: &dyn FrameSource,
    poses: &[Pose],
    params: &DetectParams,
) -> Result<Vec<FrameDetection>> {
    params.validate()?;
    let map = build_static_map(frames, source, poses, params)?;

    struct Pending {
        frame: usize,
        len: usize,
        instances: Vec<(Instance, Vec<VoxelKey>, Point3<f64>, Aabb)>,
    }
    let pending: Vec<Pending> = frames
        .par_iter()
        .map(|&t| {
            let scan = source.cloud(t)?;
            let pose = &poses[t];
            let ground = segment_ground(&scan, params);
            let instances = extract_instances(&scan, &ground, params)
                .into_iter()
                .map(|inst| {
                    let world: Vec<Point3<f64>> =
                        inst.indices.iter().map(|&i| pose.transform_point(&scan.points[i])).collect();
                    let mut keys: Vec<VoxelKey> = world.iter().map(|p| VoxelKey::of(p, map.voxel_size)).collect();
                    keys.sort_unstable();
                    keys.dedup();
                    let centroid = pose.transform_point(&inst.centroid);
                    let aabb = aabb_of_points(&world, 0.0)?;
                    Ok((inst, keys, centroid, aabb))
                })
                .collect::<Result<_>>()?;
            Ok(Pending {
                frame: t,
                len: scan.len(),
                instances,
            })
        })
        .collect::<Result<_>>()?;

    // Static structure recurs in most frames, so each voxel is scored once.
    let mut keys: Vec<VoxelKey> = pending
        .iter()
        .flat_map(|p| p.instances.iter().flat_map(|i| i.1.iter().copied()))
        .collect();
    keys.par_sort_unstable();
    keys.dedup();
    let scores: FxHashMap<VoxelKey, (usize, usize)> = keys.par_iter().map(|k| (*k, map.persistence(k))).collect();

    Ok(pending
        .into_par_iter()
        .map(|p| {
            let detected: Vec<DetectedInstance> = p
                .instances
                .into_iter()
                .map(|(instance, keys, world_centroid, world_aabb)| {
                    let rho = mean_ratio(keys.iter().map(|k| scores[k]), params.min_coverage);
                    DetectedInstance {
                        verdict: verdict_for(rho, params),
                        instance,
                        rho,
                        world_centroid,
                        world_aabb,
                    }
                })
                .collect();
            let (insts, verdicts): (Vec<Instance>, Vec<Verdict>) =
                detected.iter().map(|d| (d.instance.clone(), d.verdict)).unzip();
            FrameDetection {
                annotation: annotate_scan(p.frame, p.len, &insts, &verdicts),
                instances: detected,
            }
        })
        .collect())
}

/// Runs detection cluster by cluster and returns detections in frame order.
pub fn detect_sequence(
    partition: &ClusterPartition,
    source: &dyn FrameSource,
    poses: &[Pose],
    params: &DetectParams,
) -> Result<Vec<FrameDetection>> {
    let mut all: Vec<FrameDetection> = Vec::with_capacity(partition.num_frames);
    for cluster in &partition.clusters {
        all.extend(detect_cluster(&cluster.frames, source, poses, params)?);
    }
    all.sort_by_key(FrameDetection::frame);
    Ok(all)
}
