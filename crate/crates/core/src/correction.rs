//! Submap construction and submap-to-submap ICP that pulls every subcluster
//! of a cluster onto its first subcluster.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix6, Point3, Rotation3, SymmetricEigen, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose, transform_cloud, voxel_downsample, NeighborIndex, PointCloud, Pose};
use crate::sync::FrameSource;
use crate::trajectory::ClusterPartition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Stop once the update (radians plus metres) falls below this.
    pub update_tolerance: f64,
    pub initial_gate: f64,
    pub min_gate: f64,
    pub min_points: usize,
    pub normal_neighbors: usize,
    /// RMS point-to-plane residual a converged alignment must reach.
    pub convergence_residual: f64,
    /// Fraction of source points that must find a correspondence.
    pub min_overlap: f64,
    pub max_source_points: usize,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            update_tolerance: 1e-4,
            initial_gate: 2.0,
            min_gate: 0.5,
            min_points: 500,
            normal_neighbors: 20,
            convergence_residual: 0.15,
            min_overlap: 0.2,
            max_source_points: 30_000,
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be positive"));
        }
        if !(self.initial_gate > 0.0 && self.min_gate > 0.0 && self.min_gate <= self.initial_gate) {
            return Err(Error::invalid("gate", "need 0 < min_gate <= initial_gate"));
        }
        if self.normal_neighbors < 3 {
            return Err(Error::invalid("normal_neighbors", "need at least 3"));
        }
        if !(0.0..=1.0).contains(&self.min_overlap) {
            return Err(Error::invalid("min_overlap", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionParams {
    pub voxel_size: f64,
    pub icp: IcpParams,
}

impl Default for CorrectionParams {
    fn default() -> Self {
        Self {
            voxel_size: 0.2,
            icp: IcpParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submap {
    pub id: usize,
    /// First member frame; the submap is expressed in the common world frame
    /// of the poses it was built from.
    pub reference_frame: usize,
    pub members: Vec<usize>,
    pub cloud: PointCloud,
}

/// Double voxel sampling of the member scans placed by their poses.
pub fn build_submap(
    id: usize,
    members: &[usize],
    frames: &dyn FrameSource,
    poses: &[Pose],
    voxel_size: f64,
) -> Result<Submap> {
    if members.is_empty() {
        return Err(Error::EmptyInput("subcluster"));
    }
    let mut union = PointCloud::default();
    for &t in members {
        let pose = poses
            .get(t)
            .ok_or_else(|| Error::invalid("poses", format!("no pose for frame {t}")))?;
        let placed = transform_cloud(&*frames.cloud(t)?, pose);
        union.extend_from(&voxel_downsample(&placed, voxel_size)?);
    }
    Ok(Submap {
        id,
        reference_frame: members[0],
        members: members.to_vec(),
        cloud: voxel_downsample(&union, voxel_size)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    /// Maps source coordinates onto the target.
    pub transform: Pose,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub overlap: f64,
}

fn estimate_normals(points: &[Point3<f64>], index: &NeighborIndex, k: usize) -> Vec<Option<Vector3<f64>>> {
    points
        .par_iter()
        .map(|p| {
            let nn = index.nearest_k(p, k);
            if nn.len() < 3 {
                return None;
            }
            let mean = nn
                .iter()
                .fold(Vector3::zeros(), |acc, &(i, _)| acc + points[i].coords)
                / nn.len() as f64;
            let cov = nn.iter().fold(Matrix3::zeros(), |acc, &(i, _)| {
                let d = points[i].coords - mean;
                acc + d * d.transpose()
            });
            let eig = SymmetricEigen::new(cov);
            let (min_i, _) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))?;
            let n = eig.eigenvectors.column(min_i).into_owned();
            (n.norm() > 0.5).then(|| n.normalize())
        })
        .collect()
}

pub fn icp_align(source: &Submap, target: &Submap, params: &IcpParams) -> Result<IcpResult> {
    icp_align_clouds(&source.cloud, &target.cloud, params)
}

/// Point-to-plane ICP from an identity initial guess.
pub fn icp_align_clouds(source: &PointCloud, target: &PointCloud, params: &IcpParams) -> Result<IcpResult> {
    params.validate()?;
    for (what, cloud) in [("source", source), ("target", target)] {
        if cloud.len() < params.min_points {
            return Err(Error::DegenerateInput(format!(
                "{what} has {} points, need {}",
                cloud.len(),
                params.min_points
            )));
        }
    }
    let index = NeighborIndex::new(&target.points);
    let normals = estimate_normals(&target.points, &index, params.normal_neighbors);
    let stride = source.len().div_ceil(params.max_source_points.max(1));
    let src: Vec<Point3<f64>> = source.points.iter().step_by(stride.max(1)).copied().collect();

    let mut transform = Pose::identity();
    let mut gate = params.initial_gate;
    let mut settled = false;
    let mut iterations = 0;
    let correspond = |transform: &Pose, gate: f64| -> Vec<(Point3<f64>, Point3<f64>, Vector3<f64>)> {
        src.par_iter()
            .filter_map(|p| {
                let moved = transform.transform_point(p);
                let (j, d) = index.nearest(&moved)?;
                if d > gate {
                    return None;
                }
                normals[j].map(|n| (moved, target.points[j], n))
            })
            .collect()
    };
    while iterations < params.max_iterations {
        iterations += 1;
        let pairs = correspond(&transform, gate);
        if pairs.len() < 6 {
            break;
        }
        let center = pairs.iter().fold(Vector3::zeros(), |acc, (p, _, _)| acc + p.coords) / pairs.len() as f64;
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (p, q, n) in &pairs {
            let arm = p.coords - center;
            let r = n.dot(&(p - q));
            let j = Vector6::new(
                arm.y * n.z - arm.z * n.y,
                arm.z * n.x - arm.x * n.z,
                arm.x * n.y - arm.y * n.x,
                n.x,
                n.y,
                n.z,
            );
            h += j * j.transpose();
            g += j * r;
        }
        h += Matrix6::identity() * (1e-9 * h.trace().max(1e-12));
        let Some(delta) = h.cholesky().map(|c| c.solve(&-g)) else {
            break;
        };
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        let rot = Rotation3::new(omega).into_inner();
        let step = Pose::from_parts_reorthonormalized(rot, center - rot * center + v, 1e-6)?;
        transform = compose(&step, &transform);
        if omega.norm() + v.norm() < params.update_tolerance {
            if gate * 0.5 >= params.min_gate {
                gate *= 0.5;
            } else {
                settled = true;
                break;
            }
        }
    }

    let pairs = correspond(&transform, gate);
    let residual = if pairs.is_empty() {
        f64::INFINITY
    } else {
        (pairs.iter().map(|(p, q, n)| n.dot(&(p - q)).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt()
    };
    let overlap = pairs.len() as f64 / src.len() as f64;
    Ok(IcpResult {
        transform,
        residual,
        iterations,
        converged: settled && residual <= params.convergence_residual && overlap >= params.min_overlap,
        overlap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRow {
    pub cluster: usize,
    /// Position among the cluster's (possibly merged) subclusters; 0 is the anchor.
    pub subcluster: usize,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub overlap: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub rows: Vec<CorrectionRow>,
    /// Subclusters too sparse for alignment that were folded into a neighbour.
    pub merged_subclusters: usize,
}

impl CorrectionReport {
    pub fn icp_calls(&self) -> usize {
        self.rows.len()
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.converged).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub poses: Vec<Pose>,
    pub report: CorrectionReport,
}

/// Folds subclusters whose submap is below `min_points` into the temporally
/// closer neighbour until every group is large enough or one group remains.
fn merge_sparse(
    mut groups: Vec<Vec<usize>>,
    frames: &dyn FrameSource,
    poses: &[Pose],
    params: &CorrectionParams,
) -> Result<(Vec<Submap>, usize)> {
    let mut submaps: Vec<Submap> = groups
        .par_iter()
        .enumerate()
        .map(|(i, g)| build_submap(i, g, frames, poses, params.voxel_size))
        .collect::<Result<_>>()?;
    let mut merged = 0;
    while groups.len() > 1 {
        let Some(i) = submaps.iter().position(|s| s.cloud.len() < params.icp.min_points) else {
            break;
        };
        let gap_before = (i > 0).then(|| groups[i][0] - groups[i - 1].last().unwrap());
        let gap_after = (i + 1 < groups.len()).then(|| groups[i + 1][0] - groups[i].last().unwrap());
        let into = match (gap_before, gap_after) {
            (Some(b), Some(a)) if a < b => i + 1,
            (Some(_), _) => i - 1,
            (None, _) => i + 1,
        };
        let moved = groups.remove(i);
        submaps.remove(i);
        let into = if into > i { into - 1 } else { into };
        groups[into].extend(moved);
        groups[into].sort_unstable();
        submaps[into] = build_submap(into, &groups[into], frames, poses, params.voxel_size)?;
        merged += 1;
    }
    for (i, s) in submaps.iter_mut().enumerate() {
        s.id = i;
    }
    Ok((submaps, merged))
}

/// Aligns every subcluster's submap to the first one of its cluster and
/// left-composes the resulting correction onto its member poses. A failed
/// alignment leaves its poses untouched and is flagged in the report.
pub fn correct_cluster_poses(
    partition: &ClusterPartition,
    frames: &dyn FrameSource,
    poses: &[Pose],
    params: &CorrectionParams,
) -> Result<CorrectionOutcome> {
    params.icp.validate()?;
    if poses.len() != partition.num_frames {
        return Err(Error::LengthMismatch {
            what: "poses vs partition",
            left: poses.len(),
            right: partition.num_frames,
        });
    }
    let per_cluster: Vec<(Vec<(Vec<usize>, Pose)>, Vec<CorrectionRow>, usize)> = partition
        .clusters
        .par_iter()
        .enumerate()
        .map(|(c, cluster)| {
            let groups: Vec<Vec<usize>> = cluster.subclusters.iter().map(|r| r.clone().collect()).collect();
            if groups.len() < 2 {
                return Ok((Vec::new(), Vec::new(), 0));
            }
            let (submaps, merged) = merge_sparse(groups, frames, poses, params)?;
            let anchor = &submaps[0];
            let results: Vec<(Vec<usize>, Pose, CorrectionRow)> = submaps[1..]
                .par_iter()
                .map(|s| {
                    let icp = icp_align(s, anchor, &params.icp)?;
                    if !icp.converged {
                        log::warn!(
                            "cluster {c} subcluster {}: alignment did not converge (residual {:.3}, overlap {:.2}); keeping poses",
                            s.id,
                            icp.residual,
                            icp.overlap
                        );
                    }
                    let correction = if icp.converged { icp.transform } else { Pose::identity() };
                    let row = CorrectionRow {
                        cluster: c,
                        subcluster: s.id,
                        residual: icp.residual,
                        iterations: icp.iterations,
                        converged: icp.converged,
                        overlap: icp.overlap,
                        frames: s.members.len(),
                    };
                    Ok((s.members.clone(), correction, row))
                })
                .collect::<Result<_>>()?;
            let mut updates = Vec::new();
            let mut rows = Vec::new();
            for (members, correction, row) in results {
                updates.push((members, correction));
                rows.push(row);
            }
            Ok((updates, rows, merged))
        })
        .collect::<Result<_>>()?;

    let mut corrected = poses.to_vec();
    let mut report = CorrectionReport::default();
    for (updates, rows, merged) in per_cluster {
        for (members, correction) in updates {
            if correction.is_identity() {
                continue;
            }
            for t in members {
                corrected[t] = compose(&correction, &poses[t]);
            }
        }
        report.rows.extend(rows);
        report.merged_subclusters += merged;
    }
    Ok(CorrectionOutcome {
        poses: corrected,
        report,
    })
}

pub fn write_correction_report(report: &CorrectionReport, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# cluster n residual iterations converged")?;
    for r in &report.rows {
        writeln!(
            out,
            "{} {} {:.6} {} {}",
            r.cluster,
            r.subcluster,
            r.residual,
            r.iterations,
            u8::from(r.converged)
        )?;
    }
    out.flush()?;
    Ok(())
}
