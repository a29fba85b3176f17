//! Synthetic multi-sensor scenes with exact moving-object ground truth.
//!
//! Scenes are built from an infinite ground plane, yaw-rotated boxes for
//! static structure and boxes following waypoint trajectories for movers.
//! Every sensor casts rays on its own angular pattern and keeps the first hit,
//! so each point knows which surface produced it.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use nalgebra::{Point3, Rotation3, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    frame_file_name, write_calib, write_labels, write_poses, write_scan, write_times, LabelValue, MosClass,
    SensorId,
};
use crate::detect::{FrameDetection, Verdict};
use crate::error::{Error, Result};
use crate::geometry::{compose, PointCloud, Pose};

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    /// Points `p` with `normal · p = offset`.
    pub normal: [f64; 3],
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: [f64; 3],
    /// Full edge lengths along the box's own axes.
    pub extents: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoverSpec {
    pub extents: [f64; 3],
    /// `[time_s, x, y, z]` of the box center, times strictly increasing.
    /// Positions are interpolated linearly and held past either end.
    pub waypoints: Vec<[f64; 4]>,
    /// Reference frames `[start, end)` during which the mover exists.
    pub active: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoSpec {
    /// Polyline in the ground plane, driven at constant speed.
    #[serde(default)]
    pub path: Vec<[f64; 2]>,
    #[serde(default)]
    pub speed: f64,
    /// Height of the reference sensor above the ground.
    #[serde(default = "default_height")]
    pub height: f64,
    /// Explicit per-frame poses as row-major 3×4 matrices; overrides `path`.
    #[serde(default)]
    pub poses: Vec<[f64; 12]>,
}

fn default_height() -> f64 {
    1.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScanPattern {
    /// Full-turn scanner with evenly spaced beams.
    Spinning { rows: usize, columns: usize, v_fov: [f64; 2] },
    /// Non-repetitive rose-curve pattern inside a forward cone.
    Rosette { h_fov: f64, v_fov: f64, points: usize, petals: usize },
    /// Jittered grid inside a forward cone.
    Stratified { h_fov: f64, v_fov: f64, rows: usize, columns: usize },
}

impl ScanPattern {
    /// `(horizontal, vertical)` half-angles in radians for forward-cone
    /// patterns, `None` for full-turn scanners.
    pub fn cone(&self) -> Option<(f64, f64)> {
        match *self {
            ScanPattern::Spinning { .. } => None,
            ScanPattern::Rosette { h_fov, v_fov, .. } | ScanPattern::Stratified { h_fov, v_fov, .. } => {
                Some((h_fov.to_radians() / 2.0, v_fov.to_radians() / 2.0))
            }
        }
    }

    /// Unit ray directions in the sensor frame (x forward, z up).
    fn directions(&self, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        let dir = |az: f64, el: f64| Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        match *self {
            ScanPattern::Spinning { rows, columns, v_fov } => {
                let (lo, hi) = (v_fov[0].to_radians(), v_fov[1].to_radians());
                let step = 2.0 * PI / columns as f64;
                let phase = rng.gen::<f64>() * step;
                let mut out = Vec::with_capacity(rows * columns);
                for c in 0..columns {
                    let az = phase + c as f64 * step - PI;
                    for r in 0..rows {
                        let el = if rows == 1 { (lo + hi) / 2.0 } else { lo + (hi - lo) * r as f64 / (rows - 1) as f64 };
                        out.push(dir(az, el));
                    }
                }
                out
            }
            ScanPattern::Rosette { h_fov, v_fov, points, petals } => {
                let (ha, va) = (h_fov.to_radians() / 2.0, v_fov.to_radians() / 2.0);
                let spin = rng.gen::<f64>() * 2.0 * PI;
                let k = petals as f64;
                (0..points)
                    .map(|i| {
                        let s = i as f64 / points as f64;
                        // A slowly rotating rose: r = cos(kθ) sweeps through the centre.
                        let theta = s * 2.0 * PI * 97.0;
                        let r = (k * theta).cos();
                        let psi = spin + s * 2.0 * PI;
                        let (u, v) = (r * (theta + psi).cos(), r * (theta + psi).sin());
                        dir(u * ha, v * va)
                    })
                    .collect()
            }
            ScanPattern::Stratified { h_fov, v_fov, rows, columns } => {
                let (ha, va) = (h_fov.to_radians() / 2.0, v_fov.to_radians() / 2.0);
                let mut out = Vec::with_capacity(rows * columns);
                for r in 0..rows {
                    for c in 0..columns {
                        let u = (c as f64 + rng.gen::<f64>()) / columns as f64;
                        let v = (r as f64 + rng.gen::<f64>()) / rows as f64;
                        out.push(dir(-ha + 2.0 * ha * u, -va + 2.0 * va * v));
                    }
                }
                out
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::SceneValidation(format!("scan pattern: {reason}")));
        match *self {
            ScanPattern::Spinning { rows, columns, v_fov } => {
                if rows == 0 || columns == 0 {
                    return bad("rows and columns must be positive");
                }
                if !(v_fov[0] <= v_fov[1] && v_fov[0] > -90.0 && v_fov[1] < 90.0) {
                    return bad("vertical field of view must lie inside (-90, 90) degrees");
                }
            }
            ScanPattern::Rosette { h_fov, v_fov, points, petals } => {
                if points == 0 || petals == 0 {
                    return bad("points and petals must be positive");
                }
                check_cone(h_fov, v_fov)?;
            }
            ScanPattern::Stratified { h_fov, v_fov, rows, columns } => {
                if rows == 0 || columns == 0 {
                    return bad("rows and columns must be positive");
                }
                check_cone(h_fov, v_fov)?;
            }
        }
        Ok(())
    }
}

fn check_cone(h_fov: f64, v_fov: f64) -> Result<()> {
    if !(h_fov > 0.0 && h_fov < 360.0 && v_fov > 0.0 && v_fov < 180.0) {
        return Err(Error::SceneValidation(format!(
            "field of view {h_fov}x{v_fov} degrees is not a forward cone"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub id: SensorId,
    pub pattern: ScanPattern,
    pub min_range: f64,
    pub max_range: f64,
    /// `[x, y, z, yaw_deg]` of the sensor in the reference sensor frame.
    #[serde(default)]
    pub mount: [f64; 4],
    /// Scan timestamp offset from the reference clock, seconds.
    #[serde(default)]
    pub time_offset: f64,
}

impl SensorSpec {
    pub fn extrinsic(&self) -> Pose {
        let [x, y, z, yaw] = self.mount;
        Pose::from_xyz_yaw(x, y, z, yaw.to_radians())
    }

    /// The four default profiles: a dense 128-line and a sparse 16-line
    /// spinning scanner, and two narrow forward-looking irregular scanners.
    pub fn defaults() -> Vec<SensorSpec> {
        vec![
            SensorSpec {
                id: SensorId::Aeva,
                pattern: ScanPattern::Stratified { h_fov: 120.0, v_fov: 19.2, rows: 64, columns: 320 },
                min_range: 1.0,
                max_range: 60.0,
                mount: [0.6, -0.3, -0.2, 0.0],
                time_offset: 0.02,
            },
            SensorSpec {
                id: SensorId::Livox,
                pattern: ScanPattern::Rosette { h_fov: 70.4, v_fov: 77.2, points: 24_000, petals: 7 },
                min_range: 1.0,
                max_range: 60.0,
                mount: [0.6, 0.3, -0.2, 0.0],
                time_offset: -0.03,
            },
            SensorSpec {
                id: SensorId::Ouster,
                pattern: ScanPattern::Spinning { rows: 128, columns: 512, v_fov: [-22.5, 22.5] },
                min_range: 1.0,
                max_range: 60.0,
                mount: [0.0; 4],
                time_offset: 0.0,
            },
            SensorSpec {
                id: SensorId::Velodyne,
                pattern: ScanPattern::Spinning { rows: 16, columns: 900, v_fov: [-15.0, 15.0] },
                min_range: 1.0,
                max_range: 60.0,
                mount: [-0.3, 0.0, 0.25, 0.0],
                time_offset: 0.04,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    #[serde(default = "default_period")]
    pub frame_period: f64,
    /// `[min, max]` corners of the world.
    pub bounds: [[f64; 3]; 2],
    /// Standard deviation of Gaussian range noise, meters.
    #[serde(default)]
    pub range_noise: f64,
    pub ego: EgoSpec,
    #[serde(default)]
    pub planes: Vec<PlaneSpec>,
    #[serde(default)]
    pub statics: Vec<BoxSpec>,
    #[serde(default)]
    pub movers: Vec<MoverSpec>,
    #[serde(default = "SensorSpec::defaults")]
    pub sensors: Vec<SensorSpec>,
}

fn default_period() -> f64 {
    0.1
}

fn inside(bounds: &[[f64; 3]; 2], p: &Point3<f64>) -> bool {
    (0..3).all(|i| p[i] >= bounds[0][i] && p[i] <= bounds[1][i])
}

impl SceneSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::Config(format!("scene spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("scene spec: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::SceneValidation(msg));
        if self.frames == 0 {
            return fail("frame count must be at least 1".into());
        }
        if !(self.frame_period > 0.0) {
            return fail("frame period must be positive".into());
        }
        if !(0..3).all(|i| self.bounds[0][i] < self.bounds[1][i]) {
            return fail("bounds must have min < max on every axis".into());
        }
        if !(self.range_noise >= 0.0) {
            return fail("range noise must be non-negative".into());
        }
        if self.ego.poses.is_empty() {
            if self.ego.path.len() < 2 || !(self.ego.speed > 0.0) {
                return fail("ego needs either explicit poses or a path of two or more points with positive speed".into());
            }
            if self.ego.path.windows(2).any(|w| w[0] == w[1]) {
                return fail("ego path has a zero-length segment".into());
            }
        } else if self.ego.poses.len() != self.frames {
            return fail(format!("{} ego poses for {} frames", self.ego.poses.len(), self.frames));
        }
        for t in 0..self.frames {
            let p = self.ego_pose(t as f64 * self.frame_period)?;
            if !inside(&self.bounds, &Point3::from(*p.translation())) {
                return fail(format!("ego leaves the world bounds at frame {t}"));
            }
        }
        for (i, plane) in self.planes.iter().enumerate() {
            if Vector3::from(plane.normal).norm() < EPS {
                return fail(format!("plane {i} has a zero normal"));
            }
        }
        for (i, b) in self.statics.iter().enumerate() {
            if b.extents.iter().any(|&e| !(e > 0.0)) {
                return fail(format!("static box {i} has a non-positive extent"));
            }
        }
        for (i, m) in self.movers.iter().enumerate() {
            if m.extents.iter().any(|&e| !(e > 0.0)) {
                return fail(format!("mover {i} has a non-positive extent"));
            }
            if m.waypoints.is_empty() || m.waypoints.windows(2).any(|w| !(w[1][0] > w[0][0])) {
                return fail(format!("mover {i} needs waypoints with strictly increasing times"));
            }
            if !(m.active[0] < m.active[1] && m.active[1] <= self.frames) {
                return fail(format!("mover {i} active range {:?} is not inside [0, {})", m.active, self.frames));
            }
            let half = Vector3::from(m.extents).norm() / 2.0;
            for w in &m.waypoints {
                let c = Point3::new(w[1], w[2], w[3]);
                let lo = c - Vector3::repeat(half);
                let hi = c + Vector3::repeat(half);
                if !inside(&self.bounds, &lo) || !inside(&self.bounds, &hi) {
                    return fail(format!("mover {i} leaves the world bounds at t = {}", w[0]));
                }
            }
        }
        if self.sensors.is_empty() {
            return fail("at least one sensor is required".into());
        }
        let mut seen = Vec::new();
        for s in &self.sensors {
            if seen.contains(&s.id) {
                return fail(format!("sensor {} listed twice", s.id));
            }
            seen.push(s.id);
            if !(s.min_range >= 0.0 && s.max_range > s.min_range) {
                return fail(format!("sensor {}: need 0 <= min_range < max_range", s.id));
            }
            if s.time_offset.abs() >= self.frame_period / 2.0 {
                return fail(format!("sensor {}: time offset must be under half a frame period", s.id));
            }
            s.pattern.validate()?;
        }
        Ok(())
    }

    /// Body (reference sensor) pose at time `t` seconds.
    pub fn ego_pose(&self, t: f64) -> Result<Pose> {
        if !self.ego.poses.is_empty() {
            return interpolate_poses(&self.ego.poses, t / self.frame_period);
        }
        let path = &self.ego.path;
        let mut s = (self.ego.speed * t).max(0.0);
        for (i, w) in path.windows(2).enumerate() {
            let d = Vector3::new(w[1][0] - w[0][0], w[1][1] - w[0][1], 0.0);
            let len = d.norm();
            let last = i + 2 == path.len();
            if s <= len || last {
                let u = if last { s.min(len) } else { s };
                let yaw = d.y.atan2(d.x);
                return Ok(Pose::from_xyz_yaw(
                    w[0][0] + d.x * u / len,
                    w[0][1] + d.y * u / len,
                    self.ego.height,
                    yaw,
                ));
            }
            s -= len;
        }
        unreachable!("validated path has at least one segment")
    }

    pub fn sensor(&self, id: SensorId) -> Option<&SensorSpec> {
        self.sensors.iter().find(|s| s.id == id)
    }
}

fn interpolate_poses(poses: &[[f64; 12]], f: f64) -> Result<Pose> {
    let f = f.clamp(0.0, (poses.len() - 1) as f64);
    let i = (f.floor() as usize).min(poses.len() - 1);
    let a = Pose::from_row_major_3x4(&poses[i], 1e-3)?;
    let frac = f - i as f64;
    if frac < EPS || i + 1 == poses.len() {
        return Ok(a);
    }
    let b = Pose::from_row_major_3x4(&poses[i + 1], 1e-3)?;
    let qa = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*a.rotation()));
    let qb = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*b.rotation()));
    let q = qa.slerp(&qb, frac);
    let t = a.translation().lerp(b.translation(), frac);
    Pose::from_parts(*q.to_rotation_matrix().matrix(), t)
}

/// Mover box center and heading at time `t`.
fn mover_state(m: &MoverSpec, t: f64) -> (Point3<f64>, f64) {
    let w = &m.waypoints;
    let pos = |k: usize| Point3::new(w[k][1], w[k][2], w[k][3]);
    let heading = |k: usize| {
        // Heading of segment k, or of the nearest moving segment.
        (k..w.len() - 1)
            .chain((0..k).rev())
            .map(|j| pos(j + 1) - pos(j))
            .find(|d| d.xy().norm() > EPS)
            .map_or(0.0, |d| d.y.atan2(d.x))
    };
    if w.len() == 1 || t <= w[0][0] {
        return (pos(0), heading(0));
    }
    let k = w.partition_point(|p| p[0] <= t);
    if k >= w.len() {
        return (pos(w.len() - 1), heading(w.len() - 2));
    }
    let s = (t - w[k - 1][0]) / (w[k][0] - w[k - 1][0]);
    (pos(k - 1) + (pos(k) - pos(k - 1)) * s, heading(k - 1))
}

/// What a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Surface {
    Plane(u16),
    Static(u16),
    Mover(u16),
}

impl Surface {
    /// Ground-truth label of a point sampled from this surface. Mover ids are
    /// written as instance `index + 1`.
    pub fn label(self) -> LabelValue {
        match self {
            Surface::Mover(i) => LabelValue::new(MosClass::Dynamic, i + 1),
            _ => LabelValue::STATIC,
        }
    }

    pub fn mover(self) -> Option<u16> {
        match self {
            Surface::Mover(i) => Some(i),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PlacedBox {
    surface: Surface,
    center: Point3<f64>,
    half: Vector3<f64>,
    radius: f64,
    cos: f64,
    sin: f64,
}

impl PlacedBox {
    fn new(surface: Surface, center: Point3<f64>, extents: [f64; 3], yaw: f64) -> Self {
        let half = Vector3::from(extents) / 2.0;
        Self {
            surface,
            center,
            half,
            radius: half.norm(),
            cos: yaw.cos(),
            sin: yaw.sin(),
        }
    }

    fn to_local(&self, v: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(self.cos * v.x + self.sin * v.y, -self.sin * v.x + self.cos * v.y, v.z)
    }

    /// Entry distance along a unit ray, slab method in the box frame.
    fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let o = self.to_local(&(origin - self.center));
        let d = self.to_local(dir);
        let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..3 {
            if d[i].abs() < EPS {
                if o[i].abs() > self.half[i] {
                    return None;
                }
                continue;
            }
            let a = (-self.half[i] - o[i]) / d[i];
            let b = (self.half[i] - o[i]) / d[i];
            near = near.max(a.min(b));
            far = far.min(a.max(b));
        }
        (near <= far && near > EPS).then_some(near)
    }

    fn reach(&self) -> f64 {
        self.radius
    }

    /// Whether a ray could touch the bounding sphere before distance `limit`.
    fn may_hit(&self, origin: &Point3<f64>, dir: &Vector3<f64>, limit: f64) -> bool {
        let oc = self.center - origin;
        let along = oc.dot(dir);
        along + self.radius > 0.0
            && along - self.radius < limit
            && oc.norm_squared() - along * along <= self.radius * self.radius
    }
}

/// One sensor scan with per-point ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub timestamp: f64,
    /// Body pose as it will be written to the dataset; see [`corrupt_bundle`].
    pub pose: Pose,
    pub true_pose: Pose,
    /// Points in the sensor frame.
    pub cloud: PointCloud,
    pub labels: Vec<LabelValue>,
    pub surfaces: Vec<Surface>,
}

impl SensorFrame {
    pub fn mover_ids(&self) -> Vec<Option<u16>> {
        self.surfaces.iter().map(|s| s.mover()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBundle {
    pub frame_period: f64,
    pub extrinsics: BTreeMap<SensorId, Pose>,
    pub sensors: BTreeMap<SensorId, Vec<SensorFrame>>,
}

impl GroundTruthBundle {
    /// Exact body poses of the reference sensor, one per frame.
    pub fn reference_poses(&self) -> Vec<Pose> {
        self.reference_frames().iter().map(|f| f.true_pose).collect()
    }

    pub fn reference_frames(&self) -> &[SensorFrame] {
        self.sensors
            .get(&SensorId::Ouster)
            .or_else(|| self.sensors.values().next())
            .map_or(&[], Vec::as_slice)
    }

    pub fn reference_clouds(&self) -> Vec<PointCloud> {
        self.reference_frames().iter().map(|f| f.cloud.clone()).collect()
    }
}

fn scan_once(
    spec: &SceneSpec,
    sensor: &SensorSpec,
    frame: usize,
    planes: &[(Vector3<f64>, f64)],
) -> Result<SensorFrame> {
    let timestamp = frame as f64 * spec.frame_period + sensor.time_offset;
    let body = spec.ego_pose(timestamp)?;
    let to_world = compose(&body, &sensor.extrinsic());
    let origin = Point3::from(*to_world.translation());

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((sensor.id.index() as u64) << 32) | frame as u64);
    let directions = sensor.pattern.directions(&mut rng);

    let reach = sensor.max_range;
    let mut boxes: Vec<PlacedBox> = spec
        .statics
        .iter()
        .enumerate()
        .map(|(i, b)| PlacedBox::new(Surface::Static(i as u16), Point3::from(b.center), b.extents, b.yaw_deg.to_radians()))
        .collect();
    let nearest_frame = (timestamp / spec.frame_period).round();
    for (i, m) in spec.movers.iter().enumerate() {
        if nearest_frame < m.active[0] as f64 || nearest_frame >= m.active[1] as f64 {
            continue;
        }
        let (c, yaw) = mover_state(m, timestamp);
        boxes.push(PlacedBox::new(Surface::Mover(i as u16), c, m.extents, yaw));
    }
    boxes.retain(|b| (b.center - origin).norm() <= reach + b.reach());

    let noise = (spec.range_noise > 0.0)
        .then(|| Normal::new(0.0, spec.range_noise))
        .transpose()
        .map_err(|e| Error::SceneValidation(format!("range noise: {e}")))?;

    let mut points = Vec::new();
    let mut surfaces = Vec::new();
    for d in &directions {
        let dw = to_world.transform_vector(d);
        let mut best: Option<(f64, Surface)> = None;
        for (i, (n, off)) in planes.iter().enumerate() {
            let denom = n.dot(&dw);
            if denom.abs() < EPS {
                continue;
            }
            let t = (off - n.dot(&origin.coords)) / denom;
            if t > EPS && best.is_none_or(|(b, _)| t < b) {
                best = Some((t, Surface::Plane(i as u16)));
            }
        }
        for b in &boxes {
            if !b.may_hit(&origin, &dw, best.map_or(f64::INFINITY, |(t, _)| t)) {
                continue;
            }
            if let Some(t) = b.intersect(&origin, &dw) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, b.surface));
                }
            }
        }
        let Some((mut range, surface)) = best else { continue };
        if let Some(n) = &noise {
            range += n.sample(&mut rng);
        }
        if range < sensor.min_range || range > sensor.max_range {
            continue;
        }
        points.push(Point3::from(d * range));
        surfaces.push(surface);
    }
    let labels = surfaces.iter().map(|s| s.label()).collect();
    Ok(SensorFrame {
        timestamp,
        pose: body,
        true_pose: body,
        cloud: PointCloud::new(points),
        labels,
        surfaces,
    })
}

/// Casts every sensor's rays for every frame, in parallel over frames.
pub fn generate_scene(spec: &SceneSpec) -> Result<GroundTruthBundle> {
    spec.validate()?;
    let planes: Vec<(Vector3<f64>, f64)> = spec
        .planes
        .iter()
        .map(|p| {
            let n = Vector3::from(p.normal);
            let len = n.norm();
            (n / len, p.offset / len)
        })
        .collect();
    let mut sensors = BTreeMap::new();
    let mut extrinsics = BTreeMap::new();
    for sensor in &spec.sensors {
        let frames = (0..spec.frames)
            .into_par_iter()
            .map(|t| scan_once(spec, sensor, t, &planes))
            .collect::<Result<Vec<_>>>()?;
        sensors.insert(sensor.id, frames);
        extrinsics.insert(sensor.id, sensor.extrinsic());
    }
    Ok(GroundTruthBundle {
        frame_period: spec.frame_period,
        extrinsics,
        sensors,
    })
}

/// Pose perturbation: a world-frame offset of length `drift` in a seeded
/// horizontal direction, eased in with a smoothstep over `ramp` frames and
/// held afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub drift: f64,
    pub ramp: Range<usize>,
    pub seed: u64,
}

impl DriftSpec {
    pub fn direction(&self) -> Vector3<f64> {
        let angle = ChaCha8Rng::seed_from_u64(self.seed).gen_range(0.0..2.0 * PI);
        Vector3::new(angle.cos(), angle.sin(), 0.0)
    }

    /// Offset magnitude at a (possibly fractional) frame position.
    pub fn magnitude_at(&self, frame: f64) -> f64 {
        let (a, b) = (self.ramp.start as f64, self.ramp.end as f64);
        let s = if b <= a {
            if frame >= a { 1.0 } else { 0.0 }
        } else {
            ((frame - a) / (b - a)).clamp(0.0, 1.0)
        };
        self.drift * s * s * (3.0 - 2.0 * s)
    }

    fn apply(&self, pose: &Pose, frame: f64, dir: &Vector3<f64>) -> Pose {
        let m = self.magnitude_at(frame);
        if m == 0.0 {
            return *pose;
        }
        let o = dir * m;
        compose(&Pose::from_translation(o.x, o.y, o.z), pose)
    }
}

pub fn corrupt_poses(poses: &[Pose], spec: &DriftSpec) -> Result<Vec<Pose>> {
    if !(spec.drift >= 0.0) {
        return Err(Error::invalid("drift", "must be non-negative"));
    }
    let dir = spec.direction();
    Ok(poses.iter().enumerate().map(|(t, p)| spec.apply(p, t as f64, &dir)).collect())
}

/// Applies the drift to every sensor's written poses, keeping `true_pose`.
pub fn corrupt_bundle(bundle: &GroundTruthBundle, spec: &DriftSpec) -> Result<GroundTruthBundle> {
    if !(spec.drift >= 0.0) {
        return Err(Error::invalid("drift", "must be non-negative"));
    }
    let dir = spec.direction();
    let mut out = bundle.clone();
    for frames in out.sensors.values_mut() {
        for f in frames.iter_mut() {
            f.pose = spec.apply(&f.true_pose, f.timestamp / bundle.frame_period, &dir);
        }
    }
    Ok(out)
}

/// Writes the bundle in the dataset layout; ground-truth labels go to each
/// sensor's `labels/` directory and exact poses to `poses_true.txt`.
pub fn write_dataset(bundle: &GroundTruthBundle, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for id in SensorId::ALL {
        if !bundle.sensors.contains_key(&id) {
            return Err(Error::SceneValidation(format!("dataset output needs all four sensors, {id} is missing")));
        }
    }
    std::fs::create_dir_all(root)?;
    write_calib(&bundle.extrinsics, root.join("calib.txt"))?;
    for (id, frames) in &bundle.sensors {
        let dir = root.join(id.name());
        std::fs::create_dir_all(dir.join("velodyne"))?;
        std::fs::create_dir_all(dir.join("labels"))?;
        for (t, f) in frames.iter().enumerate() {
            write_scan(&f.cloud, dir.join("velodyne").join(frame_file_name(t, "bin")))?;
            write_labels(&f.labels, dir.join("labels").join(frame_file_name(t, "label")))?;
        }
        write_poses(&frames.iter().map(|f| f.pose).collect::<Vec<_>>(), dir.join("poses.txt"))?;
        write_poses(&frames.iter().map(|f| f.true_pose).collect::<Vec<_>>(), dir.join("poses_true.txt"))?;
        write_times(&frames.iter().map(|f| f.timestamp).collect::<Vec<_>>(), dir.join("times.txt"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    /// Frames whose dynamic detections are deleted.
    pub drop_frames: Vec<usize>,
    /// Number of static instances flipped to dynamic.
    pub inject_static_fp: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegradeEdit {
    Dropped { frame: usize, instance: u16, points: usize },
    Injected { frame: usize, instance: u16, points: usize },
}

/// Deletes dynamic detections at chosen frames and flips randomly chosen
/// static instances (outside those frames) to dynamic.
pub fn degrade_detections(
    detections: &[FrameDetection],
    spec: &DegradeSpec,
) -> (Vec<FrameDetection>, Vec<DegradeEdit>) {
    let mut out = detections.to_vec();
    let mut edits = Vec::new();
    for det in out.iter_mut().filter(|d| spec.drop_frames.contains(&d.frame())) {
        let frame = det.frame();
        let labels = &mut det.annotation.labels;
        det.instances.retain(|inst| {
            if inst.verdict != Verdict::Dynamic {
                return true;
            }
            for &i in &inst.instance.indices {
                labels[i] = LabelValue::STATIC;
            }
            edits.push(DegradeEdit::Dropped {
                frame,
                instance: inst.instance.id,
                points: inst.instance.len(),
            });
            false
        });
    }
    let mut candidates: Vec<(usize, usize)> = out
        .iter()
        .enumerate()
        .filter(|(_, d)| !spec.drop_frames.contains(&d.frame()))
        .flat_map(|(f, d)| {
            d.instances
                .iter()
                .enumerate()
                .filter(|(_, i)| i.verdict == Verdict::Static)
                .map(move |(k, _)| (f, k))
        })
        .collect();
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    candidates.truncate(spec.inject_static_fp);
    candidates.sort_unstable();
    for (f, k) in candidates {
        let det = &mut out[f];
        let inst = &mut det.instances[k];
        inst.verdict = Verdict::Dynamic;
        let value = LabelValue::new(MosClass::Dynamic, inst.instance.id);
        for &i in &inst.instance.indices {
            det.annotation.labels[i] = value;
        }
        edits.push(DegradeEdit::Injected {
            frame: det.annotation.frame,
            instance: inst.instance.id,
            points: inst.instance.len(),
        });
    }
    (out, edits)
}

fn street_statics(rng: &mut ChaCha8Rng, x_range: Range<i32>) -> Vec<BoxSpec> {
    let mut statics = Vec::new();
    for side in [-1.0, 1.0] {
        let mut x = x_range.start as f64;
        while x < x_range.end as f64 {
            let len = rng.gen_range(12.0..22.0);
            let depth = rng.gen_range(5.0..8.0);
            let height = rng.gen_range(6.0..14.0);
            statics.push(BoxSpec {
                center: [x + len / 2.0, side * (12.0 + depth / 2.0), height / 2.0],
                extents: [len, depth, height],
                yaw_deg: 0.0,
            });
            x += len + rng.gen_range(2.0..5.0);
        }
        let mut x = x_range.start as f64 + rng.gen_range(0.0..6.0);
        while x < x_range.end as f64 {
            statics.push(BoxSpec {
                center: [x, side * 8.5, 2.0],
                extents: [0.3, 0.3, 4.0],
                yaw_deg: 0.0,
            });
            x += rng.gen_range(9.0..14.0);
        }
    }
    statics
}

fn ground() -> PlaneSpec {
    PlaneSpec {
        normal: [0.0, 0.0, 1.0],
        offset: 0.0,
    }
}

impl SceneSpec {
    /// A 100-frame street drive with two cars, a crossing cyclist and a
    /// parked car, seen by the four default sensors.
    pub fn urban_street(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut statics = street_statics(&mut rng, -70..130);
        statics.push(BoxSpec {
            center: [22.0, -6.5, 0.75],
            extents: [4.5, 1.9, 1.5],
            yaw_deg: 0.0,
        });
        let car = [4.4, 1.8, 1.3];
        let body_z = 0.4 + car[2] / 2.0;
        Self {
            seed,
            frames: 100,
            frame_period: 0.1,
            bounds: [[-100.0, -40.0, -5.0], [160.0, 40.0, 30.0]],
            range_noise: 0.0,
            ego: EgoSpec {
                path: vec![[0.0, 0.0], [60.0, 0.0]],
                speed: 5.0,
                height: default_height(),
                poses: Vec::new(),
            },
            planes: vec![ground()],
            statics,
            movers: vec![
                MoverSpec {
                    extents: car,
                    waypoints: vec![[0.0, -15.0, 3.0, body_z], [10.0, 75.0, 3.0, body_z]],
                    active: [0, 100],
                },
                MoverSpec {
                    extents: car,
                    waypoints: vec![[0.0, 70.0, -2.5, body_z], [10.0, -10.0, -2.5, body_z]],
                    active: [0, 100],
                },
                MoverSpec {
                    extents: [1.8, 0.7, 1.4],
                    waypoints: vec![[2.0, 28.0, -10.0, 1.1], [8.0, 28.0, 10.0, 1.1]],
                    active: [20, 80],
                },
            ],
            sensors: SensorSpec::defaults(),
        }
    }

    /// The first `frames` frames of this scene; movers that only appear
    /// later are dropped and the others clipped.
    pub fn truncated(mut self, frames: usize) -> Self {
        self.frames = frames.min(self.frames);
        let n = self.frames;
        self.movers.retain(|m| m.active[0] < n);
        for m in &mut self.movers {
            m.active[1] = m.active[1].min(n);
        }
        self
    }

    /// [`SceneSpec::urban_street`] with every mover removed.
    pub fn static_street(seed: u64) -> Self {
        Self {
            movers: Vec::new(),
            ..Self::urban_street(seed)
        }
    }

    /// Drives a 60×40 m block twice with a long excursion between the laps,
    /// one frame per second at 2 m/s. Only the reference sensor is simulated.
    pub fn revisit_loop(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut statics = vec![BoxSpec {
            center: [30.0, 20.0, 5.0],
            extents: [44.0, 24.0, 10.0],
            yaw_deg: 0.0,
        }];
        // Outer buildings around the block and along the excursion roads.
        let outer = [
            ([30.0, -12.0], [50.0, 6.0]),
            ([30.0, 52.0], [70.0, 6.0]),
            ([72.0, 20.0], [6.0, 70.0]),
            ([-12.0, 30.0], [6.0, 40.0]),
            ([-60.0, -92.0], [140.0, 6.0]),
            ([-60.0, -68.0], [100.0, 6.0]),
            ([-132.0, -40.0], [6.0, 100.0]),
            ([-60.0, 12.0], [100.0, 6.0]),
            ([-60.0, -12.0], [100.0, 6.0]),
            ([12.0, -50.0], [6.0, 60.0]),
            ([-108.0, -40.0], [6.0, 40.0]),
        ];
        for (c, e) in outer {
            statics.push(BoxSpec {
                center: [c[0], c[1], 4.0],
                extents: [e[0], e[1], 8.0],
                yaw_deg: 0.0,
            });
        }
        // Pillars give the alignment something to lock onto along each road.
        let roads: [([f64; 2], [f64; 2]); 8] = [
            ([0.0, 0.0], [60.0, 0.0]),
            ([60.0, 0.0], [60.0, 40.0]),
            ([60.0, 40.0], [0.0, 40.0]),
            ([0.0, 40.0], [0.0, 0.0]),
            ([0.0, 0.0], [0.0, -80.0]),
            ([0.0, -80.0], [-120.0, -80.0]),
            ([-120.0, -80.0], [-120.0, 0.0]),
            ([-120.0, 0.0], [0.0, 0.0]),
        ];
        for (a, b) in &roads {
            let d = Vector3::new(b[0] - a[0], b[1] - a[1], 0.0);
            let len = d.norm();
            let (u, n) = (d / len, Vector3::new(-d.y, d.x, 0.0) / len);
            let mut s = rng.gen_range(3.0..8.0);
            while s < len - 3.0 {
                let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let off = side * rng.gen_range(5.0..7.0);
                let p = Vector3::new(a[0], a[1], 0.0) + u * s + n * off;
                let h = rng.gen_range(1.0..4.0);
                let w = rng.gen_range(0.4..1.6);
                statics.push(BoxSpec {
                    center: [p.x, p.y, h / 2.0],
                    extents: [w, rng.gen_range(0.4..1.6), h],
                    yaw_deg: rng.gen_range(0.0..90.0),
                });
                s += rng.gen_range(6.0..12.0);
            }
        }
        let lap = [[0.0, 0.0], [60.0, 0.0], [60.0, 40.0], [0.0, 40.0], [0.0, 0.0]];
        let excursion = [[0.0, -80.0], [-120.0, -80.0], [-120.0, 0.0], [0.0, 0.0]];
        let path: Vec<[f64; 2]> = lap
            .iter()
            .chain(excursion.iter())
            .chain(lap[1..].iter())
            .copied()
            .collect();
        // 200 m lap, 400 m excursion, 200 m lap at 2 m per frame.
        let frames = 401;
        Self {
            seed,
            frames,
            frame_period: 1.0,
            bounds: [[-200.0, -150.0, -5.0], [150.0, 150.0, 30.0]],
            range_noise: 0.0,
            ego: EgoSpec {
                path,
                speed: 2.0,
                height: default_height(),
                poses: Vec::new(),
            },
            planes: vec![ground()],
            statics,
            movers: Vec::new(),
            sensors: SensorSpec::defaults()
                .into_iter()
                .filter(|s| s.id == SensorId::Ouster)
                .collect(),
        }
    }

    /// Frames of [`SceneSpec::revisit_loop`] driven along the far side of the
    /// excursion, away from the block and from turn windows.
    pub fn revisit_loop_ramp() -> Range<usize> {
        165..180
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{DetectedInstance, Instance, ScanAnnotation};
    use crate::geometry::{invert, Aabb};
    use proptest::prelude::*;

    fn small_spec() -> SceneSpec {
        let mut spec = SceneSpec::urban_street(3);
        spec.frames = 8;
        for s in &mut spec.sensors {
            match &mut s.pattern {
                ScanPattern::Spinning { rows, columns, .. } => {
                    *rows = (*rows).min(16);
                    *columns = 180;
                }
                ScanPattern::Rosette { points, .. } => *points = 2000,
                ScanPattern::Stratified { rows, columns, .. } => {
                    *rows = 16;
                    *columns = 60;
                }
            }
        }
        spec.movers.truncate(1);
        spec.movers[0].active = [0, 8];
        spec
    }

    #[test]
    fn empty_mover_list_is_all_static() {
        let mut spec = small_spec();
        spec.movers.clear();
        let b = generate_scene(&spec).unwrap();
        for frames in b.sensors.values() {
            for f in frames {
                assert!(!f.cloud.is_empty());
                assert!(f.labels.iter().all(|&l| l == LabelValue::STATIC));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
    }

    #[test]
    fn different_seeds_sample_differently() {
        let a = small_spec();
        let mut b = small_spec();
        b.seed += 1;
        let (a, b) = (generate_scene(&a).unwrap(), generate_scene(&b).unwrap());
        assert_ne!(a.sensors[&SensorId::Livox][0].cloud, b.sensors[&SensorId::Livox][0].cloud);
    }

    #[test]
    fn labels_follow_hit_surfaces() {
        let b = generate_scene(&small_spec()).unwrap();
        let mut dynamic = 0;
        for frames in b.sensors.values() {
            for f in frames {
                let rederived: Vec<LabelValue> = f.surfaces.iter().map(|s| s.label()).collect();
                assert_eq!(rederived, f.labels);
                dynamic += f.labels.iter().filter(|l| l.is_dynamic()).count();
            }
        }
        assert!(dynamic > 0);
    }

    /// Independent check of each point: it lies on the surface it claims,
    /// within the sensor's range, and inside its field of view.
    #[test]
    fn points_lie_on_their_surfaces_inside_the_view() {
        let spec = small_spec();
        let b = generate_scene(&spec).unwrap();
        for sensor in &spec.sensors {
            for f in &b.sensors[&sensor.id] {
                let to_world = compose(&f.true_pose, &sensor.extrinsic());
                for (p, s) in f.cloud.points.iter().zip(&f.surfaces) {
                    let r = p.coords.norm();
                    assert!(r <= sensor.max_range + 1e-9 && r >= sensor.min_range - 1e-9);
                    if let Some((ha, va)) = sensor.pattern.cone() {
                        let az = p.y.atan2(p.x);
                        let el = (p.z / r).asin();
                        assert!(az.abs() <= ha + 1e-9 && el.abs() <= va + 1e-9, "{az} {el}");
                    }
                    let w = to_world.transform_point(p);
                    match *s {
                        Surface::Plane(_) => assert!(w.z.abs() < 1e-6),
                        Surface::Static(i) => {
                            let bx = &spec.statics[i as usize];
                            let local = Pose::from_xyz_yaw(bx.center[0], bx.center[1], bx.center[2], bx.yaw_deg.to_radians());
                            let q = invert(&local).transform_point(&w);
                            assert!((0..3).all(|k| q[k].abs() <= bx.extents[k] / 2.0 + 1e-6));
                        }
                        Surface::Mover(i) => {
                            let m = &spec.movers[i as usize];
                            let (c, yaw) = mover_state(m, f.timestamp);
                            let q = invert(&Pose::from_xyz_yaw(c.x, c.y, c.z, yaw)).transform_point(&w);
                            assert!((0..3).all(|k| q[k].abs() <= m.extents[k] / 2.0 + 1e-6));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn truncation_clips_mover_windows() {
        let spec = SceneSpec::urban_street(0).truncated(30);
        assert_eq!(spec.frames, 30);
        assert_eq!(spec.movers.len(), 3);
        assert!(spec.movers.iter().all(|m| m.active[1] <= 30));
        spec.validate().unwrap();
        assert_eq!(SceneSpec::urban_street(0).truncated(10).movers.len(), 2);
        assert_eq!(SceneSpec::urban_street(0).truncated(500).frames, 100);
    }

    #[test]
    fn crossing_mover_is_seen_only_while_active() {
        let mut spec = small_spec();
        spec.frames = 20;
        spec.sensors.retain(|s| s.id == SensorId::Ouster);
        spec.movers = vec![MoverSpec {
            extents: [1.0, 1.0, 1.5],
            waypoints: vec![[0.0, 10.0, -8.0, 1.15], [2.0, 10.0, 8.0, 1.15]],
            active: [5, 15],
        }];
        let b = generate_scene(&spec).unwrap();
        for (t, f) in b.sensors[&SensorId::Ouster].iter().enumerate() {
            let seen = f.labels.iter().any(|l| l.is_dynamic());
            assert_eq!(seen, (5..15).contains(&t), "frame {t}");
        }
    }

    #[test]
    fn mover_outside_bounds_is_rejected() {
        let mut spec = small_spec();
        spec.movers[0].waypoints[1][1] = 500.0;
        assert!(matches!(generate_scene(&spec), Err(Error::SceneValidation(_))));
    }

    #[test]
    fn toml_round_trip() {
        let spec = small_spec();
        let text = spec.to_toml_string().unwrap();
        assert_eq!(SceneSpec::from_toml_str(&text).unwrap(), spec);
        let err = SceneSpec::from_toml_str(&format!("bogus = 1\n{text}")).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn ego_path_is_continuous_through_corners() {
        let spec = SceneSpec::revisit_loop(1);
        let a = spec.ego_pose(14.999).unwrap();
        let b = spec.ego_pose(15.001).unwrap();
        assert!((a.translation() - b.translation()).norm() < 0.01);
        assert_eq!(spec.ego_pose(0.0).unwrap().translation().xy(), spec.ego_pose(400.0).unwrap().translation().xy());
    }

    #[test]
    fn zero_drift_leaves_poses_alone() {
        let poses: Vec<Pose> = (0..10).map(|i| Pose::from_xyz_yaw(i as f64, 0.0, 0.0, 0.1 * i as f64)).collect();
        let spec = DriftSpec { drift: 0.0, ramp: 2..6, seed: 1 };
        assert_eq!(corrupt_poses(&poses, &spec).unwrap(), poses);
    }

    #[test]
    fn drift_reaches_full_size_at_ramp_end() {
        let poses: Vec<Pose> = (0..10).map(|i| Pose::from_xyz_yaw(i as f64, 0.0, 0.0, 0.0)).collect();
        let spec = DriftSpec { drift: 0.4, ramp: 2..6, seed: 9 };
        let out = corrupt_poses(&poses, &spec).unwrap();
        let err: Vec<f64> = out.iter().zip(&poses).map(|(a, b)| (a.translation() - b.translation()).norm()).collect();
        assert_eq!(&err[..3], &[0.0; 3]);
        assert!(err.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!(err[6..].iter().all(|&e| (e - 0.4).abs() < 1e-12));
        assert!(err.iter().all(|&e| e <= 0.4 + 1e-12));
        assert_eq!(corrupt_poses(&poses, &spec).unwrap(), out);
        assert!(corrupt_poses(&poses, &DriftSpec { drift: -1.0, ..spec }).is_err());
    }

    fn detection(frame: usize, verdicts: &[Verdict]) -> FrameDetection {
        let mut labels = Vec::new();
        let mut instances = Vec::new();
        for (k, v) in verdicts.iter().enumerate() {
            let id = k as u16 + 1;
            let indices: Vec<usize> = (labels.len()..labels.len() + 3).collect();
            labels.extend(std::iter::repeat(LabelValue::new(v.class(), id)).take(3));
            let c = Point3::new(k as f64, 0.0, 0.0);
            let aabb = Aabb::from_center_extents(c, Vector3::repeat(1.0));
            instances.push(DetectedInstance {
                instance: Instance { id, indices, centroid: c, aabb },
                verdict: *v,
                rho: Some(0.5),
                world_centroid: c,
                world_aabb: aabb,
            });
        }
        FrameDetection {
            annotation: ScanAnnotation { frame, labels },
            instances,
        }
    }

    fn track_fixture() -> Vec<FrameDetection> {
        (0..10).map(|t| detection(t, &[Verdict::Dynamic, Verdict::Static, Verdict::Static])).collect()
    }

    #[test]
    fn dropping_a_frame_leaves_a_hole() {
        let dets = track_fixture();
        let spec = DegradeSpec { drop_frames: vec![5], ..Default::default() };
        let (out, edits) = degrade_detections(&dets, &spec);
        assert_eq!(edits, vec![DegradeEdit::Dropped { frame: 5, instance: 1, points: 3 }]);
        assert_eq!(out[5].annotation.dynamic_count(), 0);
        assert!(out[5].instances.iter().all(|i| i.verdict != Verdict::Dynamic));
        for t in (0..10).filter(|&t| t != 5) {
            assert_eq!(out[t], dets[t]);
        }
    }

    #[test]
    fn injecting_two_false_positives() {
        let dets = track_fixture();
        let spec = DegradeSpec { inject_static_fp: 2, seed: 4, ..Default::default() };
        let (out, edits) = degrade_detections(&dets, &spec);
        assert_eq!(edits.len(), 2);
        let count = |d: &[FrameDetection]| -> usize {
            d.iter().map(|f| f.instances.iter().filter(|i| i.verdict == Verdict::Dynamic).count()).sum()
        };
        assert_eq!(count(&out), count(&dets) + 2);
        assert_eq!(degrade_detections(&dets, &spec).0, out);
    }

    #[test]
    fn no_edits_is_identity() {
        let dets = track_fixture();
        let (out, edits) = degrade_detections(&dets, &DegradeSpec::default());
        assert_eq!(out, dets);
        assert!(edits.is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn restricted_patterns_stay_in_their_cone(
            h in 10.0..170.0f64,
            v in 5.0..80.0f64,
            seed in any::<u64>(),
            rosette in any::<bool>(),
        ) {
            let pattern = if rosette {
                ScanPattern::Rosette { h_fov: h, v_fov: v, points: 500, petals: 5 }
            } else {
                ScanPattern::Stratified { h_fov: h, v_fov: v, rows: 10, columns: 30 }
            };
            let (ha, va) = pattern.cone().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for d in pattern.directions(&mut rng) {
                prop_assert!((d.norm() - 1.0).abs() < 1e-12);
                prop_assert!(d.y.atan2(d.x).abs() <= ha + 1e-12);
                prop_assert!(d.z.asin().abs() <= va + 1e-12);
            }
        }

        #[test]
        fn box_hits_agree_with_brute_force_marching(
            ox in -10.0..10.0f64, oy in -10.0..10.0f64,
            az in -3.1..3.1f64, el in -0.5..0.5f64,
            yaw in 0.0..3.1f64,
        ) {
            let b = PlacedBox::new(Surface::Static(0), Point3::new(2.0, 1.0, 1.0), [3.0, 1.5, 2.0], yaw);
            let origin = Point3::new(ox, oy, 1.5);
            prop_assume!(b.to_local(&(origin - b.center)).iter().zip(b.half.iter()).any(|(o, h)| o.abs() > *h + 0.05));
            let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let in_box = |t: f64| {
                let q = b.to_local(&(origin + dir * t - b.center));
                (0..3).all(|k| q[k].abs() <= b.half[k])
            };
            let step = 1e-3;
            let marched = (0..40_000).map(|i| i as f64 * step).find(|&t| in_box(t));
            match (b.intersect(&origin, &dir), marched) {
                (Some(t), Some(m)) => prop_assert!((t - m).abs() <= step + 1e-9, "{} vs {}", t, m),
                (None, None) => {}
                // A grazing chord shorter than the marching step.
                (Some(t), None) => {
                    let q = b.to_local(&(origin + dir * t - b.center));
                    prop_assert!((0..3).all(|k| q[k].abs() <= b.half[k] + 1e-6), "{} is not on the box", t);
                }
                (None, Some(m)) => prop_assert!(false, "marching found a hit at {} the slab test missed", m),
            }
        }
    }
}
