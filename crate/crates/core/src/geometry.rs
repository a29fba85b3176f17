//! Rigid transforms, point clouds, voxel sampling and axis-aligned boxes.
//!
//! Everything here is immutable after construction and cheap to share
//! between pipeline workers. Rotations are stored as matrices; composition
//! re-projects onto SO(3) whenever numerical drift exceeds [`ORTHO_DRIFT`].

use std::f64::consts::PI;

use rstar::primitives::GeomWithData;
use rstar::RTree;
use nalgebra::{Matrix3, Point3, Vector3};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Drift in `RᵀR - I` above which a composed rotation is re-orthonormalized.
pub const ORTHO_DRIFT: f64 = 1e-9;

/// Rigid transform `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Rotation about +z by `angle` radians.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
        }
    }

    /// Planar pose: yaw about +z followed by a translation.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        let mut pose = Self::rot_z(yaw);
        pose.translation = Vector3::new(x, y, z);
        pose
    }

    /// Builds a pose from parts, rejecting rotations that are not proper
    /// orthonormal within `1e-6`.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let drift = orthonormality_error(&rotation);
        if !drift.is_finite() || drift > 1e-6 || rotation.determinant() < 0.0 {
            return Err(Error::invalid(
                "rotation",
                format!("not a proper rotation (orthonormality error {drift:.3e})"),
            ));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation", "non-finite component"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Like [`Pose::from_parts`] but projects a nearly-orthonormal matrix back
    /// onto SO(3) when its error is within `tolerance`.
    pub fn from_parts_reorthonormalized(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tolerance: f64,
    ) -> Result<Self> {
        let drift = orthonormality_error(&rotation);
        if !drift.is_finite() || drift > tolerance || rotation.determinant() <= 0.0 {
            return Err(Error::invalid(
                "rotation",
                format!("orthonormality error {drift:.3e} exceeds {tolerance:.1e}"),
            ));
        }
        let rotation = if drift > ORTHO_DRIFT {
            project_to_rotation(&rotation)
        } else {
            rotation
        };
        Self::from_parts(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Row-major 3×4 `[R | t]`, the layout used by `poses.txt` and `calib.txt`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major_3x4(v: &[f64; 12], tolerance: f64) -> Result<Self> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::from_parts_reorthonormalized(rotation, Vector3::new(v[3], v[7], v[11]), tolerance)
    }

    /// Angle of the relative rotation between two poses, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Returns `a ∘ b`: the transform that applies `b` first, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let mut rotation = a.rotation * b.rotation;
    if orthonormality_error(&rotation) > ORTHO_DRIFT {
        rotation = project_to_rotation(&rotation);
    }
    Pose {
        rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert(a: &Pose) -> Pose {
    let rt = a.rotation.transpose();
    Pose {
        rotation: rt,
        translation: -(rt * a.translation),
    }
}

fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Nearest rotation in the Frobenius sense (polar decomposition via SVD).
fn project_to_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Heading of the pose's x-axis projected onto the ground plane, in `(-π, π]`.
pub fn yaw_of(pose: &Pose) -> Result<f64> {
    let x_axis = pose.rotation.column(0);
    if x_axis.z.abs() > 0.999 {
        return Err(Error::DegenerateOrientation(x_axis.z));
    }
    let yaw = x_axis.y.atan2(x_axis.x);
    Ok(if yaw <= -PI { PI } else { yaw })
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub intensities: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self {
            points,
            intensities: None,
        }
    }

    pub fn with_intensities(points: Vec<Point3<f64>>, intensities: Vec<f32>) -> Result<Self> {
        if points.len() != intensities.len() {
            return Err(Error::LengthMismatch {
                what: "points vs intensities",
                left: points.len(),
                right: intensities.len(),
            });
        }
        Ok(Self {
            points,
            intensities: Some(intensities),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn intensity(&self, i: usize) -> f32 {
        self.intensities.as_ref().map_or(0.0, |v| v[i])
    }

    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            intensities: self
                .intensities
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Appends `other`; intensities are kept only if both sides carry them,
    /// except that appending to an empty cloud adopts `other` wholesale.
    pub fn extend_from(&mut self, other: &PointCloud) {
        if self.points.is_empty() {
            self.intensities = other.intensities.clone();
        } else {
            match (&mut self.intensities, &other.intensities) {
                (Some(a), Some(b)) => a.extend_from_slice(b),
                (Some(_), None) => self.intensities = None,
                _ => {}
            }
        }
        self.points.extend_from_slice(&other.points);
    }
}

/// Maps every point through `pose`. Intensities and order are preserved; the
/// identity returns a bit-identical copy.
pub fn transform_cloud(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    if pose.is_identity() {
        return cloud.clone();
    }
    PointCloud {
        points: cloud.points.iter().map(|p| pose.transform_point(p)).collect(),
        intensities: cloud.intensities.clone(),
    }
}

/// Integer voxel index, `floor(p / size)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelKey(pub [i64; 3]);

impl VoxelKey {
    pub fn of(p: &Point3<f64>, voxel_size: f64) -> Self {
        let inv = 1.0 / voxel_size;
        VoxelKey([
            (p.x * inv).floor() as i64,
            (p.y * inv).floor() as i64,
            (p.z * inv).floor() as i64,
        ])
    }

    pub fn center(&self, voxel_size: f64) -> Point3<f64> {
        Point3::new(
            (self.0[0] as f64 + 0.5) * voxel_size,
            (self.0[1] as f64 + 0.5) * voxel_size,
            (self.0[2] as f64 + 0.5) * voxel_size,
        )
    }

    pub fn offset(&self, dx: i64, dy: i64, dz: i64) -> Self {
        VoxelKey([self.0[0] + dx, self.0[1] + dy, self.0[2] + dz])
    }

    /// The 26 neighbours sharing a face, edge or corner.
    pub fn neighbors26(&self) -> impl Iterator<Item = VoxelKey> + '_ {
        (-1..=1).flat_map(move |dx| {
            (-1..=1).flat_map(move |dy| {
                (-1..=1).filter_map(move |dz| {
                    (dx != 0 || dy != 0 || dz != 0).then(|| self.offset(dx, dy, dz))
                })
            })
        })
    }
}

pub(crate) fn check_voxel_size(voxel_size: f64) -> Result<()> {
    if voxel_size.is_finite() && voxel_size > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            "voxel_size",
            format!("must be positive, got {voxel_size}"),
        ))
    }
}

/// Hashed voxel grid keeping the first point inserted into each voxel.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    voxel_size: f64,
    slots: FxHashMap<VoxelKey, usize>,
    keys: Vec<VoxelKey>,
    representatives: Vec<usize>,
    cloud: PointCloud,
}

impl VoxelGrid {
    pub fn new(voxel_size: f64) -> Result<Self> {
        check_voxel_size(voxel_size)?;
        Ok(Self {
            voxel_size,
            slots: FxHashMap::default(),
            keys: Vec::new(),
            representatives: Vec::new(),
            cloud: PointCloud::default(),
        })
    }

    pub fn from_cloud(cloud: &PointCloud, voxel_size: f64) -> Result<Self> {
        let mut grid = Self::new(voxel_size)?;
        grid.cloud.intensities = cloud.intensities.as_ref().map(|_| Vec::new());
        for i in 0..cloud.len() {
            grid.insert(cloud.points[i], cloud.intensity(i));
        }
        Ok(grid)
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    /// Inserts a point; returns `true` if it became the voxel's representative.
    pub fn insert(&mut self, p: Point3<f64>, intensity: f32) -> bool {
        let key = VoxelKey::of(&p, self.voxel_size);
        if self.slots.contains_key(&key) {
            return false;
        }
        self.slots.insert(key, self.keys.len());
        self.keys.push(key);
        self.representatives.push(self.cloud.points.len());
        self.cloud.points.push(p);
        if let Some(v) = self.cloud.intensities.as_mut() {
            v.push(intensity);
        }
        true
    }

    pub fn contains(&self, key: &VoxelKey) -> bool {
        self.slots.contains_key(key)
    }

    pub fn representative(&self, key: &VoxelKey) -> Option<&Point3<f64>> {
        self.slots
            .get(key)
            .map(|&slot| &self.cloud.points[self.representatives[slot]])
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Occupied keys in first-insertion order.
    pub fn keys(&self) -> &[VoxelKey] {
        &self.keys
    }

    pub fn into_cloud(self) -> PointCloud {
        self.cloud
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }
}

/// Keeps the first point of every occupied voxel, in input order.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    Ok(VoxelGrid::from_cloud(cloud, voxel_size)?.into_cloud())
}

/// Axis-aligned box, inclusive on both corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    pub fn new(min: Point3<f64>, max: Point3<f64>) -> Result<Self> {
        if (0..3).any(|i| min[i] > max[i]) {
            return Err(Error::invalid("aabb", "min corner exceeds max corner"));
        }
        Ok(Self { min, max })
    }

    pub fn from_center_extents(center: Point3<f64>, extents: Vector3<f64>) -> Self {
        let half = extents.abs() * 0.5;
        Self {
            min: center - half,
            max: center + half,
        }
    }

    pub fn center(&self) -> Point3<f64> {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn extents(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extents().norm()
    }

    pub fn padded(&self, pad: f64) -> Self {
        let pad = Vector3::repeat(pad);
        Self {
            min: self.min - pad,
            max: self.max + pad,
        }
    }
}

pub fn aabb_of(cloud: &PointCloud, padding: f64) -> Result<Aabb> {
    aabb_of_points(&cloud.points, padding)
}

pub fn aabb_of_points(points: &[Point3<f64>], padding: f64) -> Result<Aabb> {
    if !(padding >= 0.0) {
        return Err(Error::invalid("padding", "must be non-negative"));
    }
    let first = points.first().ok_or(Error::EmptyInput("aabb_of"))?;
    let (mut min, mut max) = (*first, *first);
    for p in &points[1..] {
        for i in 0..3 {
            min[i] = min[i].min(p[i]);
            max[i] = max[i].max(p[i]);
        }
    }
    Ok(Aabb { min, max }.padded(padding))
}

pub fn point_in_box(p: &Point3<f64>, b: &Aabb) -> bool {
    (0..3).all(|i| b.min[i] <= p[i] && p[i] <= b.max[i])
}

/// Nearest-neighbour index over a fixed point set.
pub struct NeighborIndex {
    tree: RTree<GeomWithData<[f64; 3], usize>>,
}

impl NeighborIndex {
    pub fn new(points: &[Point3<f64>]) -> Self {
        let items = points
            .iter()
            .enumerate()
            .map(|(i, p)| GeomWithData::new([p.x, p.y, p.z], i))
            .collect();
        Self {
            tree: RTree::bulk_load(items),
        }
    }

    pub fn len(&self) -> usize {
        self.tree.size()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.size() == 0
    }

    /// Index and Euclidean distance of the closest point.
    pub fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        self.tree
            .nearest_neighbor_iter_with_distance_2(&[q.x, q.y, q.z])
            .next()
            .map(|(g, d2)| (g.data, d2.sqrt()))
    }

    /// Up to `k` closest points, nearest first.
    pub fn nearest_k(&self, q: &Point3<f64>, k: usize) -> Vec<(usize, f64)> {
        self.tree
            .nearest_neighbor_iter_with_distance_2(&[q.x, q.y, q.z])
            .take(k)
            .map(|(g, d2)| (g.data, d2.sqrt()))
            .collect()
    }

    /// All points within `radius`, unordered.
    pub fn within(&self, q: &Point3<f64>, radius: f64) -> Vec<usize> {
        self.tree
            .locate_within_distance([q.x, q.y, q.z], radius * radius)
            .map(|g| g.data)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p(x: f64, y: f64, z: f64) -> Point3<f64> {
        Point3::new(x, y, z)
    }

    fn assert_pose_eq(a: &Pose, b: &Pose, eps: f64) {
        assert!((a.rotation() - b.rotation()).abs().max() <= eps, "{a:?} vs {b:?}");
        assert!((a.translation() - b.translation()).abs().max() <= eps, "{a:?} vs {b:?}");
    }

    #[test]
    fn compose_examples() {
        let t = Pose::from_xyz_yaw(1.0, -2.0, 0.5, 0.7);
        assert_pose_eq(&compose(&Pose::identity(), &t), &t, 0.0);
        assert_pose_eq(&compose(&t, &invert(&t)), &Pose::identity(), 1e-9);
        let sum = compose(
            &Pose::from_translation(1.0, 0.0, 0.0),
            &Pose::from_translation(0.0, 2.0, 0.0),
        );
        assert_pose_eq(&sum, &Pose::from_translation(1.0, 2.0, 0.0), 0.0);
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let a = Pose::from_translation(1.0, 0.0, 0.0);
        let b = Pose::rot_z(PI / 2.0);
        let q = compose(&a, &b).transform_point(&p(1.0, 0.0, 0.0));
        assert_relative_eq!(q, p(1.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn invert_examples() {
        assert_eq!(invert(&Pose::identity()), Pose::identity());
        assert_pose_eq(
            &invert(&Pose::from_translation(1.0, 2.0, 3.0)),
            &Pose::from_translation(-1.0, -2.0, -3.0),
            0.0,
        );
        assert_pose_eq(&invert(&Pose::rot_z(PI / 2.0)), &Pose::rot_z(-PI / 2.0), 1e-15);
    }

    #[test]
    fn transform_examples() {
        let one = PointCloud::new(vec![p(0.0, 0.0, 0.0)]);
        let moved = transform_cloud(&one, &Pose::from_translation(1.0, 0.0, 0.0));
        assert_eq!(moved.points[0], p(1.0, 0.0, 0.0));

        let cloud =
            PointCloud::with_intensities(vec![p(-0.0, 1.5, -3.25), p(7.0, 0.1, 0.2)], vec![0.5, 1.0])
                .unwrap();
        let same = transform_cloud(&cloud, &Pose::identity());
        for (a, b) in cloud.points.iter().zip(&same.points) {
            for i in 0..3 {
                assert_eq!(a[i].to_bits(), b[i].to_bits());
            }
        }
        assert_eq!(same.intensities, cloud.intensities);

        let rotated = transform_cloud(&PointCloud::new(vec![p(1.0, 0.0, 0.0)]), &Pose::rot_z(PI / 2.0));
        assert_relative_eq!(rotated.points[0], p(0.0, 1.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn voxel_downsample_examples() {
        let same = PointCloud::new(vec![p(0.0, 0.0, 0.0), p(0.01, 0.0, 0.0)]);
        assert_eq!(voxel_downsample(&same, 0.1).unwrap().len(), 1);
        let apart = PointCloud::new(vec![p(0.0, 0.0, 0.0), p(1.0, 1.0, 1.0)]);
        assert_eq!(voxel_downsample(&apart, 0.5).unwrap().len(), 2);
        assert!(voxel_downsample(&PointCloud::default(), 0.5).unwrap().is_empty());
        assert!(matches!(
            voxel_downsample(&same, 0.0),
            Err(Error::InvalidParameter { .. })
        ));
        assert!(voxel_downsample(&same, -1.0).is_err());
    }

    #[test]
    fn voxel_representative_is_first_inserted() {
        let cloud = PointCloud::new(vec![p(0.05, 0.05, 0.05), p(0.01, 0.02, 0.03), p(0.3, 0.0, 0.0)]);
        let out = voxel_downsample(&cloud, 0.1).unwrap();
        assert_eq!(out.points, vec![p(0.05, 0.05, 0.05), p(0.3, 0.0, 0.0)]);
    }

    #[test]
    fn voxel_keys_use_mathematical_floor() {
        assert_eq!(VoxelKey::of(&p(-0.01, 0.0, 0.99), 1.0), VoxelKey([-1, 0, 0]));
        assert_eq!(VoxelKey::of(&p(-1.0, 1.0, 2.0), 1.0), VoxelKey([-1, 1, 2]));
    }

    #[test]
    fn yaw_examples() {
        assert_eq!(yaw_of(&Pose::identity()).unwrap(), 0.0);
        assert_relative_eq!(yaw_of(&Pose::rot_z(PI / 2.0)).unwrap(), PI / 2.0, epsilon = 1e-12);
        let a = -170f64.to_radians();
        assert_relative_eq!(yaw_of(&Pose::rot_z(a)).unwrap(), a, epsilon = 1e-12);
        assert_relative_eq!(yaw_of(&Pose::rot_z(PI)).unwrap(), PI, epsilon = 1e-12);
    }

    #[test]
    fn yaw_rejects_vertical_heading() {
        // x-axis rotated onto +z
        let r = Matrix3::new(0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
        let pose = Pose::from_parts(r, Vector3::zeros()).unwrap();
        assert!(matches!(yaw_of(&pose), Err(Error::DegenerateOrientation(_))));
    }

    #[test]
    fn aabb_examples() {
        let b = aabb_of(&PointCloud::new(vec![p(0.0, 0.0, 0.0), p(1.0, 2.0, 3.0)]), 0.0).unwrap();
        assert_eq!((b.min, b.max), (p(0.0, 0.0, 0.0), p(1.0, 2.0, 3.0)));
        let cube = aabb_of(&PointCloud::new(vec![p(2.0, 2.0, 2.0)]), 0.5).unwrap();
        assert_eq!(cube.extents(), Vector3::repeat(1.0));
        assert_eq!(cube.center(), p(2.0, 2.0, 2.0));
        let b = aabb_of(&PointCloud::new(vec![p(-1.0, 0.0, 0.0), p(1.0, 0.0, 0.0)]), 0.1).unwrap();
        assert_relative_eq!(b.min, p(-1.1, -0.1, -0.1), epsilon = 1e-12);
        assert_relative_eq!(b.max, p(1.1, 0.1, 0.1), epsilon = 1e-12);
        assert!(matches!(aabb_of(&PointCloud::default(), 0.0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn point_in_box_examples() {
        let unit = Aabb::new(p(0.0, 0.0, 0.0), p(1.0, 1.0, 1.0)).unwrap();
        assert!(point_in_box(&p(0.5, 0.5, 0.5), &unit));
        assert!(point_in_box(&p(1.0, 1.0, 1.0), &unit));
        assert!(!point_in_box(&p(1.001, 0.0, 0.0), &unit));
    }

    #[test]
    fn reorthonormalizes_slightly_off_rotation() {
        let mut r = *Pose::rot_z(0.3).rotation();
        r[(0, 0)] += 5e-5;
        let pose = Pose::from_parts_reorthonormalized(r, Vector3::zeros(), 1e-3).unwrap();
        assert!(orthonormality_error(pose.rotation()) < 1e-12);
        assert!(Pose::from_parts_reorthonormalized(r * 2.0, Vector3::zeros(), 1e-3).is_err());
    }

    #[test]
    fn neighbor_index_matches_brute_force() {
        let pts: Vec<_> = (0..200)
            .map(|i| {
                let f = i as f64;
                p((f * 0.37).sin() * 5.0, (f * 0.11).cos() * 3.0, 0.0)
            })
            .collect();
        let index = NeighborIndex::new(&pts);
        let q = p(0.3, -0.2, 0.1);
        let (best, d) = index.nearest(&q).unwrap();
        let brute = pts
            .iter()
            .map(|x| (x - q).norm())
            .fold(f64::INFINITY, f64::min);
        assert_relative_eq!(d, brute, epsilon = 1e-12);
        assert_relative_eq!((pts[best] - q).norm(), brute, epsilon = 1e-12);
        assert_eq!(index.nearest_k(&q, 5).len(), 5);
        assert!(NeighborIndex::new(&[]).nearest(&q).is_none());
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            -50.0..50.0f64,
            -50.0..50.0f64,
            -5.0..5.0f64,
            -PI..PI,
            -0.5..0.5f64,
            -0.5..0.5f64,
        )
            .prop_map(|(x, y, z, yaw, roll, pitch)| {
                let r = nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw);
                Pose::from_parts(*r.matrix(), Vector3::new(x, y, z)).unwrap()
            })
    }

    fn arb_cloud() -> impl Strategy<Value = PointCloud> {
        prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64, -3.0..3.0f64), 0..60)
            .prop_map(|v| PointCloud::new(v.into_iter().map(|(x, y, z)| p(x, y, z)).collect()))
    }

    proptest! {
        #[test]
        fn downsample_is_idempotent_and_shrinking(cloud in arb_cloud(), size in 0.05..3.0f64) {
            let once = voxel_downsample(&cloud, size).unwrap();
            let twice = voxel_downsample(&once, size).unwrap();
            prop_assert!(once.len() <= cloud.len());
            prop_assert_eq!(twice.len(), once.len());
            prop_assert_eq!(voxel_downsample(&cloud, size).unwrap(), once);
        }

        #[test]
        fn transforms_are_rigid(cloud in arb_cloud(), pose in arb_pose()) {
            let moved = transform_cloud(&cloud, &pose);
            for i in 0..cloud.len() {
                for j in (i + 1)..cloud.len() {
                    let before = (cloud.points[i] - cloud.points[j]).norm();
                    let after = (moved.points[i] - moved.points[j]).norm();
                    prop_assert!((before - after).abs() < 1e-9);
                }
            }
            let back = transform_cloud(&moved, &invert(&pose));
            for (a, b) in cloud.points.iter().zip(&back.points) {
                prop_assert!((a - b).abs().max() < 1e-9);
            }
        }

        #[test]
        fn composition_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let left = compose(&compose(&a, &b), &c);
            let right = compose(&a, &compose(&b, &c));
            prop_assert!((left.rotation() - right.rotation()).abs().max() < 1e-9);
            prop_assert!((left.translation() - right.translation()).abs().max() < 1e-9);
        }
    }
}
