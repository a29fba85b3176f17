//! Software synchronization of the four sensors into the reference frame and
//! the inverse mapping of labels back onto each sensor's native scans.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_scan, LabelValue, MosClass, SensorId, SequenceManifest};
use crate::error::{Error, Result};
use crate::geometry::{compose, invert, transform_cloud, PointCloud, Pose};

pub const DEFAULT_MAX_SYNC_GAP: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncParams {
    pub max_sync_gap: f64,
    /// Chain each sensor's own body pose with the reference pose so that
    /// ego-motion between their timestamps is removed.
    pub compensate_motion: bool,
}

impl Default for SyncParams {
    fn default() -> Self {
        Self {
            max_sync_gap: DEFAULT_MAX_SYNC_GAP,
            compensate_motion: true,
        }
    }
}

/// Where a merged point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub sensor: SensorId,
    pub frame: u32,
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameQuadruple {
    pub reference_frame: usize,
    pub reference_timestamp: f64,
    /// Matched `(frame index, timestamp)` per sensor, reference included.
    pub members: BTreeMap<SensorId, (usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceScan {
    pub sensor: SensorId,
    pub frame: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncedScan {
    pub frame: usize,
    pub timestamp: f64,
    /// Reference-sensor body pose in the world.
    pub pose: Pose,
    pub cloud: PointCloud,
    pub provenance: Vec<Provenance>,
    pub sources: Vec<SourceScan>,
}

impl SyncedScan {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// Supplies native scans by sensor and frame index.
pub trait ScanSource: Sync {
    fn scan(&self, sensor: SensorId, frame: usize) -> Result<PointCloud>;
}

impl ScanSource for SequenceManifest {
    fn scan(&self, sensor: SensorId, frame: usize) -> Result<PointCloud> {
        read_scan(&self.sequence(sensor).frames[frame].scan_path)
    }
}

impl ScanSource for BTreeMap<SensorId, Vec<PointCloud>> {
    fn scan(&self, sensor: SensorId, frame: usize) -> Result<PointCloud> {
        self.get(&sensor)
            .and_then(|v| v.get(frame))
            .cloned()
            .ok_or_else(|| Error::Config(format!("no scan for {sensor} frame {frame}")))
    }
}

/// Random access to per-frame clouds in the reference sensor frame.
pub trait FrameSource: Sync {
    fn num_frames(&self) -> usize;
    fn cloud(&self, frame: usize) -> Result<Cow<'_, PointCloud>>;
}

impl FrameSource for Vec<SyncedScan> {
    fn num_frames(&self) -> usize {
        self.len()
    }

    fn cloud(&self, frame: usize) -> Result<Cow<'_, PointCloud>> {
        self.get(frame)
            .map(|s| Cow::Borrowed(&s.cloud))
            .ok_or_else(|| Error::invalid("frame", format!("{frame} out of range")))
    }
}

impl FrameSource for Vec<PointCloud> {
    fn num_frames(&self) -> usize {
        self.len()
    }

    fn cloud(&self, frame: usize) -> Result<Cow<'_, PointCloud>> {
        self.get(frame)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::invalid("frame", format!("{frame} out of range")))
    }
}

/// Index of the timestamp closest to `t`, ties toward the earlier frame.
fn nearest_index(times: &[f64], t: f64) -> Option<usize> {
    if times.is_empty() {
        return None;
    }
    let upper = times.partition_point(|&x| x < t);
    let candidates = [upper.checked_sub(1), (upper < times.len()).then_some(upper)];
    candidates
        .into_iter()
        .flatten()
        .min_by(|&a, &b| {
            (times[a] - t)
                .abs()
                .total_cmp(&(times[b] - t).abs())
                .then(a.cmp(&b))
        })
}

pub fn match_frames(
    manifest: &SequenceManifest,
    ref_frame: usize,
    params: &SyncParams,
) -> Result<FrameQuadruple> {
    let reference = manifest.reference_frames();
    let ref_ts = reference
        .get(ref_frame)
        .ok_or_else(|| Error::invalid("ref_frame", format!("{ref_frame} out of range")))?
        .timestamp;
    let mut members = BTreeMap::new();
    for (sensor, seq) in &manifest.sensors {
        if *sensor == manifest.reference {
            members.insert(*sensor, (ref_frame, ref_ts));
            continue;
        }
        let times: Vec<f64> = seq.frames.iter().map(|f| f.timestamp).collect();
        let gap_error = |gap| Error::SyncGap {
            sensor: *sensor,
            gap,
            max_gap: params.max_sync_gap,
        };
        let idx = nearest_index(&times, ref_ts).ok_or_else(|| gap_error(f64::INFINITY))?;
        let gap = (times[idx] - ref_ts).abs();
        if gap > params.max_sync_gap {
            return Err(gap_error(gap));
        }
        members.insert(*sensor, (idx, times[idx]));
    }
    Ok(FrameQuadruple {
        reference_frame: ref_frame,
        reference_timestamp: ref_ts,
        members,
    })
}

/// Transform taking sensor points at its matched timestamp into the
/// reference frame at the reference timestamp.
fn sensor_to_reference(
    manifest: &SequenceManifest,
    quad: &FrameQuadruple,
    sensor: SensorId,
    params: &SyncParams,
) -> Result<Pose> {
    let seq = manifest.sequence(sensor);
    let extrinsic = match seq.extrinsic {
        Some(e) => e,
        None if sensor == manifest.reference => Pose::identity(),
        None => return Err(Error::Config(format!("missing extrinsic for {sensor}"))),
    };
    if !params.compensate_motion {
        return Ok(extrinsic);
    }
    let (frame, _) = quad.members[&sensor];
    let body_at_sensor = seq.frames[frame].pose;
    let body_at_ref = manifest.reference_frames()[quad.reference_frame].pose;
    Ok(compose(
        &invert(&body_at_ref),
        &compose(&body_at_sensor, &extrinsic),
    ))
}

/// π: concatenates the matched scans in fixed sensor order.
pub fn merge_scans(
    quad: &FrameQuadruple,
    manifest: &SequenceManifest,
    source: &dyn ScanSource,
    params: &SyncParams,
) -> Result<SyncedScan> {
    let mut cloud = PointCloud::default();
    let mut provenance = Vec::new();
    let mut sources = Vec::new();
    for sensor in SensorId::ALL {
        let Some(&(frame, _)) = quad.members.get(&sensor) else {
            continue;
        };
        let to_ref = sensor_to_reference(manifest, quad, sensor, params)?;
        let scan = source.scan(sensor, frame)?;
        let moved = transform_cloud(&scan, &to_ref);
        provenance.extend((0..moved.len()).map(|i| Provenance {
            sensor,
            frame: frame as u32,
            index: i as u32,
        }));
        sources.push(SourceScan {
            sensor,
            frame,
            len: moved.len(),
        });
        cloud.extend_from(&moved);
    }
    Ok(SyncedScan {
        frame: quad.reference_frame,
        timestamp: quad.reference_timestamp,
        pose: manifest.reference_frames()[quad.reference_frame].pose,
        cloud,
        provenance,
        sources,
    })
}

/// Synchronizes every reference frame in parallel.
pub fn synchronize_all(
    manifest: &SequenceManifest,
    source: &dyn ScanSource,
    params: &SyncParams,
) -> Result<Vec<SyncedScan>> {
    (0..manifest.reference_frames().len())
        .into_par_iter()
        .map(|t| {
            let quad = match_frames(manifest, t, params)?;
            merge_scans(&quad, manifest, source, params)
        })
        .collect()
}

/// A synchronized sequence that rebuilds merged scans from the native
/// files on demand instead of holding every cloud in memory.
#[derive(Debug, Clone)]
pub struct SyncedSequence {
    manifest: Arc<SequenceManifest>,
    params: SyncParams,
    quads: Vec<FrameQuadruple>,
}

impl SyncedSequence {
    /// Matches every reference frame; fails on the first sync gap.
    pub fn new(manifest: Arc<SequenceManifest>, params: SyncParams) -> Result<Self> {
        let quads = (0..manifest.reference_frames().len())
            .map(|t| match_frames(&manifest, t, &params))
            .collect::<Result<_>>()?;
        Ok(Self::from_quads(manifest, params, quads))
    }

    pub fn from_quads(manifest: Arc<SequenceManifest>, params: SyncParams, quads: Vec<FrameQuadruple>) -> Self {
        Self {
            manifest,
            params,
            quads,
        }
    }

    pub fn manifest(&self) -> &SequenceManifest {
        &self.manifest
    }

    pub fn quads(&self) -> &[FrameQuadruple] {
        &self.quads
    }

    pub fn synced(&self, frame: usize) -> Result<SyncedScan> {
        let quad = self
            .quads
            .get(frame)
            .ok_or_else(|| Error::invalid("frame", format!("{frame} out of range")))?;
        merge_scans(quad, &self.manifest, &*self.manifest, &self.params)
    }

    /// Reference body poses, one per frame.
    pub fn poses(&self) -> Vec<Pose> {
        self.manifest.reference_frames().iter().map(|f| f.pose).collect()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.quads.iter().map(|q| q.reference_timestamp).collect()
    }
}

impl FrameSource for SyncedSequence {
    fn num_frames(&self) -> usize {
        self.quads.len()
    }

    fn cloud(&self, frame: usize) -> Result<Cow<'_, PointCloud>> {
        Ok(Cow::Owned(self.synced(frame)?.cloud))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceLabels {
    pub sensor: SensorId,
    pub frame: usize,
    pub labels: Vec<LabelValue>,
}

/// π⁻¹: routes merged labels back to their source scans. Source points that
/// no merged point refers to stay unlabeled.
pub fn split_labels(synced: &SyncedScan, labels: &[LabelValue]) -> Result<Vec<SourceLabels>> {
    if labels.len() != synced.len() {
        return Err(Error::LengthMismatch {
            what: "labels vs synced scan",
            left: labels.len(),
            right: synced.len(),
        });
    }
    let mut out: Vec<SourceLabels> = synced
        .sources
        .iter()
        .map(|s| SourceLabels {
            sensor: s.sensor,
            frame: s.frame,
            labels: vec![LabelValue::UNLABELED; s.len],
        })
        .collect();
    for (prov, label) in synced.provenance.iter().zip(labels) {
        let slot = out
            .iter_mut()
            .find(|s| s.sensor == prov.sensor && s.frame == prov.frame as usize)
            .expect("provenance refers to a recorded source");
        slot.labels[prov.index as usize] = *label;
    }
    Ok(out)
}

/// π applied to labels: gathers per-source labels into merged order.
pub fn merge_labels(synced: &SyncedScan, sources: &[SourceLabels]) -> Result<Vec<LabelValue>> {
    synced
        .provenance
        .iter()
        .map(|prov| {
            sources
                .iter()
                .find(|s| s.sensor == prov.sensor && s.frame == prov.frame as usize)
                .and_then(|s| s.labels.get(prov.index as usize).copied())
                .ok_or_else(|| {
                    Error::Config(format!(
                        "no label for {} frame {} index {}",
                        prov.sensor, prov.frame, prov.index
                    ))
                })
        })
        .collect()
}

fn precedence(l: LabelValue) -> u8 {
    match l.class() {
        Some(MosClass::Dynamic) => 2,
        Some(MosClass::Static) => 1,
        _ => 0,
    }
}

/// Assembles full per-sensor label arrays for every native frame. Frames no
/// synced scan selected are entirely unlabeled; when a native frame feeds
/// several synced scans, dynamic beats static beats unlabeled per point.
pub fn backpropagate(
    manifest_frame_counts: &BTreeMap<SensorId, Vec<usize>>,
    split: impl IntoIterator<Item = SourceLabels>,
) -> BTreeMap<SensorId, Vec<Vec<LabelValue>>> {
    let mut out: BTreeMap<SensorId, Vec<Vec<LabelValue>>> = manifest_frame_counts
        .iter()
        .map(|(s, sizes)| {
            (
                *s,
                sizes.iter().map(|&n| vec![LabelValue::UNLABELED; n]).collect(),
            )
        })
        .collect();
    for src in split {
        let Some(frames) = out.get_mut(&src.sensor) else {
            continue;
        };
        let target = &mut frames[src.frame];
        if target.len() != src.labels.len() {
            *target = vec![LabelValue::UNLABELED; src.labels.len()];
        }
        for (slot, l) in target.iter_mut().zip(src.labels) {
            if precedence(l) >= precedence(*slot) {
                *slot = l;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ManifestFrame, SensorSequence};
    use nalgebra::Point3;

    fn manifest_with(times: BTreeMap<SensorId, Vec<f64>>, extrinsics: BTreeMap<SensorId, Pose>) -> SequenceManifest {
        let sensors = SensorId::ALL
            .into_iter()
            .map(|s| {
                let frames = times[&s]
                    .iter()
                    .map(|&t| ManifestFrame {
                        scan_path: format!("{s}-{t}.bin").into(),
                        timestamp: t,
                        pose: Pose::identity(),
                    })
                    .collect();
                (
                    s,
                    SensorSequence {
                        frames,
                        extrinsic: extrinsics.get(&s).copied(),
                    },
                )
            })
            .collect();
        SequenceManifest {
            reference: SensorId::Ouster,
            sensors,
        }
    }

    fn identity_extrinsics() -> BTreeMap<SensorId, Pose> {
        SensorId::ALL.into_iter().map(|s| (s, Pose::identity())).collect()
    }

    fn single_times(ref_ts: f64, other: Vec<f64>) -> BTreeMap<SensorId, Vec<f64>> {
        SensorId::ALL
            .into_iter()
            .map(|s| {
                if s == SensorId::Ouster {
                    (s, vec![ref_ts])
                } else {
                    (s, other.clone())
                }
            })
            .collect()
    }

    #[test]
    fn match_picks_nearest() {
        let m = manifest_with(single_times(10.0, vec![9.40, 9.95, 10.55]), identity_extrinsics());
        let q = match_frames(&m, 0, &SyncParams::default()).unwrap();
        assert_eq!(q.members[&SensorId::Livox], (1, 9.95));
    }

    #[test]
    fn match_ties_go_to_earlier_frame() {
        let m = manifest_with(single_times(10.0, vec![9.875, 10.125]), identity_extrinsics());
        let q = match_frames(&m, 0, &SyncParams::default()).unwrap();
        assert_eq!(q.members[&SensorId::Aeva].0, 0);
    }

    #[test]
    fn match_rejects_large_gap() {
        let m = manifest_with(single_times(10.0, vec![10.30]), identity_extrinsics());
        match match_frames(&m, 0, &SyncParams::default()) {
            Err(Error::SyncGap { sensor, .. }) => assert_eq!(sensor, SensorId::Aeva),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn one_point_scans(empty: Option<SensorId>) -> BTreeMap<SensorId, Vec<PointCloud>> {
        SensorId::ALL
            .into_iter()
            .map(|s| {
                let cloud = if Some(s) == empty {
                    PointCloud::default()
                } else {
                    PointCloud::new(vec![Point3::new(s.index() as f64, 0.0, 0.0)])
                };
                (s, vec![cloud])
            })
            .collect()
    }

    #[test]
    fn merge_concatenates_in_sensor_order() {
        let m = manifest_with(single_times(1.0, vec![1.0]), identity_extrinsics());
        let q = match_frames(&m, 0, &SyncParams::default()).unwrap();
        let s = merge_scans(&q, &m, &one_point_scans(None), &SyncParams::default()).unwrap();
        let order: Vec<SensorId> = s.provenance.iter().map(|p| p.sensor).collect();
        assert_eq!(order, SensorId::ALL.to_vec());
        assert!(s.provenance.iter().all(|p| p.index == 0));

        let s = merge_scans(&q, &m, &one_point_scans(Some(SensorId::Livox)), &SyncParams::default()).unwrap();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn merge_applies_extrinsic() {
        let mut ext = identity_extrinsics();
        ext.insert(SensorId::Velodyne, Pose::from_translation(0.0, 0.0, 0.5));
        let m = manifest_with(single_times(1.0, vec![1.0]), ext);
        let q = match_frames(&m, 0, &SyncParams::default()).unwrap();
        let mut scans = one_point_scans(None);
        scans.insert(SensorId::Velodyne, vec![PointCloud::new(vec![Point3::origin()])]);
        let s = merge_scans(&q, &m, &scans, &SyncParams::default()).unwrap();
        assert_eq!(s.cloud.points[3], Point3::new(0.0, 0.0, 0.5));
    }

    #[test]
    fn merge_requires_extrinsics() {
        let mut ext = identity_extrinsics();
        ext.remove(&SensorId::Livox);
        let m = manifest_with(single_times(1.0, vec![1.0]), ext);
        let q = match_frames(&m, 0, &SyncParams::default()).unwrap();
        let err = merge_scans(&q, &m, &one_point_scans(None), &SyncParams::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn split_routes_labels_by_provenance() {
        let m = manifest_with(single_times(1.0, vec![1.0]), identity_extrinsics());
        let q = match_frames(&m, 0, &SyncParams::default()).unwrap();
        let mut scans = one_point_scans(None);
        scans.insert(
            SensorId::Velodyne,
            vec![PointCloud::new(vec![Point3::origin(); 8])],
        );
        let s = merge_scans(&q, &m, &scans, &SyncParams::default()).unwrap();
        let mut labels = vec![LabelValue::STATIC; s.len()];
        labels[3 + 7] = LabelValue::DYNAMIC;
        let split = split_labels(&s, &labels).unwrap();
        let velo = split.iter().find(|x| x.sensor == SensorId::Velodyne).unwrap();
        assert_eq!(velo.labels[7], LabelValue::DYNAMIC);
        assert_eq!(velo.labels.iter().filter(|l| l.is_dynamic()).count(), 1);
        assert_eq!(merge_labels(&s, &split).unwrap(), labels);
        assert!(split_labels(&s, &labels[1..]).is_err());
    }

    #[test]
    fn backpropagate_marks_unselected_frames_unlabeled() {
        let mut counts = BTreeMap::new();
        counts.insert(SensorId::Aeva, vec![2, 3]);
        let split = vec![SourceLabels {
            sensor: SensorId::Aeva,
            frame: 1,
            labels: vec![LabelValue::STATIC, LabelValue::DYNAMIC, LabelValue::STATIC],
        }];
        let out = backpropagate(&counts, split);
        assert_eq!(out[&SensorId::Aeva][0], vec![LabelValue::UNLABELED; 2]);
        assert!(out[&SensorId::Aeva][1][1].is_dynamic());
    }
}
