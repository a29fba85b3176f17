//! Tracking-based false-label filtering: static tracks are demoted, and boxes
//! interpolated across tracking gaps recover missed mover points.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelValue, MosClass};
use crate::detect::{FrameDetection, ScanAnnotation, Verdict};
use crate::error::{Error, Result};
use crate::geometry::{point_in_box, Aabb, Pose};
use crate::sync::FrameSource;
use crate::trajectory::ClusterPartition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackParams {
    pub max_assoc_dist: f64,
    pub max_gap: usize,
    pub min_displacement: f64,
    pub min_track_len: usize,
    pub box_pad: f64,
    pub augment: bool,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            max_assoc_dist: 2.0,
            max_gap: 5,
            min_displacement: 1.0,
            min_track_len: 3,
            box_pad: 0.2,
            augment: true,
        }
    }
}

impl TrackParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_assoc_dist > 0.0) {
            return Err(Error::invalid("max_assoc_dist", "must be positive"));
        }
        if !(self.min_displacement >= 0.0) {
            return Err(Error::invalid("min_displacement", "must be non-negative"));
        }
        if !(self.box_pad >= 0.0) {
            return Err(Error::invalid("box_pad", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: usize,
    pub instance: u16,
    pub centroid: Point3<f64>,
    pub aabb: Aabb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackStatus {
    ConfirmedMoving,
    RejectedStatic,
    Pending,
}

impl TrackStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackStatus::ConfirmedMoving => "confirmed-moving",
            TrackStatus::RejectedStatic => "rejected-static",
            TrackStatus::Pending => "pending",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u32,
    pub observations: Vec<Observation>,
    pub status: TrackStatus,
}

impl Track {
    /// Frame ranges strictly between consecutive observations.
    pub fn gaps(&self) -> Vec<Range<usize>> {
        self.observations
            .windows(2)
            .filter(|w| w[1].frame > w[0].frame + 1)
            .map(|w| w[0].frame + 1..w[1].frame)
            .collect()
    }

    /// Largest distance of any centroid from the first one.
    pub fn displacement(&self) -> f64 {
        let first = self.observations[0].centroid;
        self.observations
            .iter()
            .map(|o| (o.centroid - first).norm())
            .fold(0.0, f64::max)
    }

    /// Constant-velocity prediction from a least-squares line through the
    /// observations of the last few frames.
    fn predict(&self, frame: usize) -> Point3<f64> {
        const WINDOW: usize = 5;
        let last = self.observations.last().expect("tracks are never empty").frame;
        let recent: Vec<&Observation> = self
            .observations
            .iter()
            .rev()
            .take_while(|o| o.frame + WINDOW >= last)
            .collect();
        let n = recent.len() as f64;
        let mean_t = recent.iter().map(|o| o.frame as f64).sum::<f64>() / n;
        let mean_p = recent.iter().map(|o| o.centroid.coords).sum::<Vector3<f64>>() / n;
        let var_t: f64 = recent.iter().map(|o| (o.frame as f64 - mean_t).powi(2)).sum();
        let velocity = if var_t > 0.0 {
            recent
                .iter()
                .map(|o| (o.centroid.coords - mean_p) * (o.frame as f64 - mean_t))
                .sum::<Vector3<f64>>()
                / var_t
        } else {
            Vector3::zeros()
        };
        Point3::from(mean_p + velocity * (frame as f64 - mean_t))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
}

impl TrackSet {
    pub fn get(&self, id: u32) -> Option<&Track> {
        self.tracks.iter().find(|t| t.id == id)
    }

    /// Track id owning each `(frame, instance)` observation.
    pub fn owners(&self) -> BTreeMap<(usize, u16), u32> {
        self.tracks
            .iter()
            .flat_map(|t| t.observations.iter().map(move |o| ((o.frame, o.instance), t.id)))
            .collect()
    }
}

/// Greedy nearest-centroid association of dynamic instances with constant
/// velocity prediction. `detections` must be in increasing frame order.
/// Track ids start at `first_id`.
pub fn associate_tracks(detections: &[FrameDetection], params: &TrackParams, first_id: u32) -> TrackSet {
    let mut finished: Vec<Track> = Vec::new();
    let mut active: Vec<Track> = Vec::new();
    let mut next_id = first_id;
    for det in detections {
        let t = det.frame();
        let (alive, expired): (Vec<Track>, Vec<Track>) = active
            .into_iter()
            .partition(|tr| t.saturating_sub(tr.observations.last().unwrap().frame + 1) <= params.max_gap);
        finished.extend(expired);
        active = alive;

        let obs: Vec<Observation> = det
            .instances
            .iter()
            .filter(|d| d.verdict == Verdict::Dynamic)
            .map(|d| Observation {
                frame: t,
                instance: d.instance.id,
                centroid: d.world_centroid,
                aabb: d.world_aabb,
            })
            .collect();
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, tr) in active.iter().enumerate() {
            let predicted = tr.predict(t);
            for (oi, o) in obs.iter().enumerate() {
                let d = (o.centroid - predicted).norm();
                if d <= params.max_assoc_dist {
                    candidates.push((d, ti, oi));
                }
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; active.len()];
        let mut obs_used = vec![false; obs.len()];
        for (_, ti, oi) in candidates {
            if track_used[ti] || obs_used[oi] {
                continue;
            }
            track_used[ti] = true;
            obs_used[oi] = true;
            active[ti].observations.push(obs[oi]);
        }
        for (oi, o) in obs.into_iter().enumerate() {
            if !obs_used[oi] {
                active.push(Track {
                    id: next_id,
                    observations: vec![o],
                    status: TrackStatus::Pending,
                });
                next_id += 1;
            }
        }
    }
    finished.extend(active);
    finished.sort_by_key(|t| t.id);
    TrackSet { tracks: finished }
}

pub fn judge_track(track: &Track, params: &TrackParams) -> TrackStatus {
    if track.observations.len() < params.min_track_len || track.displacement() < params.min_displacement {
        TrackStatus::RejectedStatic
    } else {
        TrackStatus::ConfirmedMoving
    }
}

pub fn judge_tracks(tracks: &mut TrackSet, params: &TrackParams) {
    for t in &mut tracks.tracks {
        t.status = judge_track(t, params);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedBox {
    pub frame: usize,
    /// Interpolated instance centroid.
    pub centroid: Point3<f64>,
    pub aabb: Aabb,
    pub track: u32,
    pub lambda: f64,
}

/// Boxes for every gap frame at the linearly interpolated centroid, with the
/// larger of the two bracketing extents plus padding. The centroid of a
/// partially seen object sits off its box centre, so the box keeps the
/// interpolated centroid-to-centre offset of the bracketing observations.
pub fn augment_lost_boxes(track: &Track, params: &TrackParams) -> Vec<AugmentedBox> {
    let mut out = Vec::new();
    for w in track.observations.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.frame <= a.frame + 1 {
            continue;
        }
        let extents = a.aabb.extents().sup(&b.aabb.extents());
        for g in a.frame + 1..b.frame {
            let lambda = (g - a.frame) as f64 / (b.frame - a.frame) as f64;
            let centroid = a.centroid + (b.centroid - a.centroid) * lambda;
            let offset = (a.aabb.center() - a.centroid) * (1.0 - lambda) + (b.aabb.center() - b.centroid) * lambda;
            out.push(AugmentedBox {
                frame: g,
                centroid,
                aabb: Aabb::from_center_extents(centroid + offset, extents).padded(params.box_pad),
                track: track.id,
                lambda,
            });
        }
    }
    out
}

/// Applies track verdicts and augmented boxes to one frame's annotation.
/// `world` holds the frame's points in world coordinates.
pub fn filter_frame(
    annotation: &ScanAnnotation,
    world: &[Point3<f64>],
    statuses: &BTreeMap<u16, TrackStatus>,
    boxes: &[&AugmentedBox],
) -> ScanAnnotation {
    let mut labels = annotation.labels.clone();
    for l in &mut labels {
        if let Some(TrackStatus::RejectedStatic) = statuses.get(&l.instance()) {
            if l.is_dynamic() {
                *l = LabelValue::new(MosClass::Static, l.instance());
            }
        }
    }
    let mut next_instance = annotation.labels.iter().map(|l| l.instance()).max().unwrap_or(0);
    for b in boxes {
        next_instance = next_instance.saturating_add(1);
        let fresh = next_instance;
        for (l, p) in labels.iter_mut().zip(world) {
            if !l.is_dynamic() && point_in_box(p, &b.aabb) {
                let id = if l.instance() != 0 { l.instance() } else { fresh };
                *l = LabelValue::new(MosClass::Dynamic, id);
            }
        }
    }
    ScanAnnotation {
        frame: annotation.frame,
        labels,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    /// Refined annotations in frame order.
    pub annotations: Vec<ScanAnnotation>,
    pub tracks: TrackSet,
    pub boxes: Vec<AugmentedBox>,
}

/// Tracks, judges and relabels every cluster of the sequence.
pub fn filter_sequence(
    partition: &ClusterPartition,
    detections: &[FrameDetection],
    source: &dyn FrameSource,
    poses: &[Pose],
    params: &TrackParams,
) -> Result<FilterOutcome> {
    params.validate()?;
    if detections.len() != partition.num_frames {
        return Err(Error::LengthMismatch {
            what: "detections vs partition",
            left: detections.len(),
            right: partition.num_frames,
        });
    }
    let mut tracks = TrackSet::default();
    for cluster in &partition.clusters {
        let dets: Vec<FrameDetection> = cluster.frames.iter().map(|&f| detections[f].clone()).collect();
        let first_id = tracks.tracks.last().map_or(0, |t| t.id + 1);
        tracks.tracks.extend(associate_tracks(&dets, params, first_id).tracks);
    }
    judge_tracks(&mut tracks, params);
    let boxes: Vec<AugmentedBox> = if params.augment {
        tracks
            .tracks
            .iter()
            .filter(|t| t.status == TrackStatus::ConfirmedMoving)
            .flat_map(|t| augment_lost_boxes(t, params))
            .collect()
    } else {
        Vec::new()
    };

    let mut per_frame_status: Vec<BTreeMap<u16, TrackStatus>> = vec![BTreeMap::new(); detections.len()];
    for t in &tracks.tracks {
        for o in &t.observations {
            per_frame_status[o.frame].insert(o.instance, t.status);
        }
    }
    let mut per_frame_boxes: Vec<Vec<&AugmentedBox>> = vec![Vec::new(); detections.len()];
    for b in &boxes {
        per_frame_boxes[b.frame].push(b);
    }
    let annotations = detections
        .par_iter()
        .map(|det| {
            let t = det.frame();
            if per_frame_status[t].is_empty() && per_frame_boxes[t].is_empty() {
                return Ok(det.annotation.clone());
            }
            let world: Vec<Point3<f64>> = if per_frame_boxes[t].is_empty() {
                Vec::new()
            } else {
                source.cloud(t)?.points.iter().map(|p| poses[t].transform_point(p)).collect()
            };
            Ok(filter_frame(&det.annotation, &world, &per_frame_status[t], &per_frame_boxes[t]))
        })
        .collect::<Result<_>>()?;
    Ok(FilterOutcome {
        annotations,
        tracks,
        boxes,
    })
}

/// `track_id frame cx cy cz status` rows.
pub fn write_track_dump(tracks: &TrackSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# track_id frame cx cy cz status")?;
    for t in &tracks.tracks {
        for o in &t.observations {
            writeln!(
                out,
                "{} {} {:.4} {:.4} {:.4} {}",
                t.id,
                o.frame,
                o.centroid.x,
                o.centroid.y,
                o.centroid.z,
                t.status.as_str()
            )?;
        }
    }
    out.flush()?;
    Ok(())
}
