//! Point-level IoU, map-level preservation/rejection rates, and per-scan
//! dynamic ratios.

use std::fmt::Write as _;
use std::path::Path;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelValue, MosClass};
use crate::error::{Error, Result};
use crate::geometry::{check_voxel_size, PointCloud, Pose, VoxelKey};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Dynamic is the positive class; points unlabeled in the ground truth are
/// skipped. A prediction of unlabeled counts as negative.
pub fn confusion_counts(pred: &[LabelValue], gt: &[LabelValue]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "predicted vs ground-truth labels",
            left: pred.len(),
            right: gt.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (p, g) in pred.iter().zip(gt) {
        let truth = match g.class() {
            Some(MosClass::Dynamic) => true,
            Some(MosClass::Static) => false,
            _ => continue,
        };
        match (p.is_dynamic(), truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `TP / (TP + FP + FN)`, or 1.0 when nothing is positive on either side.
pub fn iou_mos(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// Harmonic mean of two rates given as fractions.
pub fn f1_score(pr: f64, rr: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&pr) || !(0.0..=1.0).contains(&rr) {
        return Err(Error::invalid("rates", format!("expected fractions, got {pr} and {rr}")));
    }
    if pr + rr == 0.0 {
        return Err(Error::UndefinedMetric("F1 with both rates zero".into()));
    }
    Ok(2.0 * pr * rr / (pr + rr))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapEvalResult {
    /// Percent.
    pub pr: f64,
    /// Percent.
    pub rr: f64,
    pub f1: f64,
    pub static_voxels: usize,
    pub dynamic_voxels: usize,
}

/// Voxel classes of the naively accumulated ground-truth map: a voxel is
/// dynamic if any dynamic point falls inside it.
pub fn ground_truth_voxels<'a>(
    scans: impl IntoIterator<Item = (&'a PointCloud, &'a [LabelValue], &'a Pose)>,
    voxel_size: f64,
) -> Result<FxHashMap<VoxelKey, bool>> {
    check_voxel_size(voxel_size)?;
    let mut voxels: FxHashMap<VoxelKey, bool> = FxHashMap::default();
    for (cloud, labels, pose) in scans {
        if labels.len() != cloud.len() {
            return Err(Error::CountMismatch {
                labels: labels.len(),
                points: cloud.len(),
            });
        }
        for (p, l) in cloud.points.iter().zip(labels) {
            let dynamic = voxels.entry(VoxelKey::of(&pose.transform_point(p), voxel_size)).or_insert(false);
            *dynamic |= l.is_dynamic();
        }
    }
    Ok(voxels)
}

/// Preservation and rejection rates of a cleaned map (world frame) against
/// the ground-truth labeled scans.
pub fn map_voxel_metrics<'a>(
    cleaned: &PointCloud,
    scans: impl IntoIterator<Item = (&'a PointCloud, &'a [LabelValue], &'a Pose)>,
    voxel_size: f64,
) -> Result<MapEvalResult> {
    let gt = ground_truth_voxels(scans, voxel_size)?;
    let kept: FxHashSet<VoxelKey> = cleaned.points.iter().map(|p| VoxelKey::of(p, voxel_size)).collect();
    let (mut statics, mut dynamics, mut preserved, mut remaining) = (0usize, 0usize, 0usize, 0usize);
    for (key, dynamic) in &gt {
        let present = kept.contains(key);
        if *dynamic {
            dynamics += 1;
            remaining += usize::from(present);
        } else {
            statics += 1;
            preserved += usize::from(present);
        }
    }
    if statics == 0 {
        return Err(Error::UndefinedMetric("ground truth has no static voxels".into()));
    }
    if dynamics == 0 {
        return Err(Error::UndefinedMetric("ground truth has no dynamic voxels".into()));
    }
    let pr = preserved as f64 / statics as f64;
    let rr = 1.0 - remaining as f64 / dynamics as f64;
    Ok(MapEvalResult {
        pr: pr * 100.0,
        rr: rr * 100.0,
        f1: f1_score(pr, rr)?,
        static_voxels: statics,
        dynamic_voxels: dynamics,
    })
}

/// Accumulates the points a labeling keeps as non-dynamic, in the world frame.
pub fn cleaned_map<'a>(scans: impl IntoIterator<Item = (&'a PointCloud, &'a [LabelValue], &'a Pose)>) -> PointCloud {
    let mut out = PointCloud::default();
    for (cloud, labels, pose) in scans {
        out.points.extend(
            cloud
                .points
                .iter()
                .zip(labels)
                .filter(|(_, l)| !l.is_dynamic())
                .map(|(p, _)| pose.transform_point(p)),
        );
    }
    out
}

pub fn dynamic_ratio(labels: &[LabelValue]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("dynamic ratio of an empty scan".into()));
    }
    Ok(labels.iter().filter(|l| l.is_dynamic()).count() as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub counts: ConfusionCounts,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub map: Option<MapEvalResult>,
    /// `(frame, ratio)` for non-empty scans of the reference sequence.
    pub dynamic_ratios: Vec<(usize, f64)>,
}

impl EvalReport {
    pub fn push(&mut self, name: impl Into<String>, counts: ConfusionCounts) {
        self.rows.push(EvalRow {
            name: name.into(),
            iou: iou_mos(&counts),
            counts,
        });
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$} {:>10} {:>10} {:>10} {:>12} {:>8}", "name", "tp", "fp", "fn", "tn", "iou");
        for r in &self.rows {
            let c = &r.counts;
            let _ = writeln!(
                s,
                "{:<width$} {:>10} {:>10} {:>10} {:>12} {:>8.4}",
                r.name, c.tp, c.fp, c.fn_, c.tn, r.iou
            );
        }
        if let Some(m) = &self.map {
            let _ = writeln!(
                s,
                "map: PR {:.3}  RR {:.3}  F1 {:.3}  (static voxels {}, dynamic voxels {})",
                m.pr, m.rr, m.f1, m.static_voxels, m.dynamic_voxels
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,tp,fp,fn,tn,iou\n");
        for r in &self.rows {
            let c = &r.counts;
            let _ = writeln!(s, "{},{},{},{},{},{:.6}", r.name, c.tp, c.fp, c.fn_, c.tn, r.iou);
        }
        if let Some(m) = &self.map {
            let _ = writeln!(s, "map_pr,,,,,{:.6}\nmap_rr,,,,,{:.6}\nmap_f1,,,,,{:.6}", m.pr, m.rr, m.f1);
        }
        s
    }

    pub fn ratios_csv(&self) -> String {
        let mut s = String::from("frame,dynamic_ratio\n");
        for (t, r) in &self.dynamic_ratios {
            let _ = writeln!(s, "{t},{r:.6}");
        }
        s
    }

    /// Writes `eval.txt`, `eval.csv` and `dynamic_ratio.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("eval.txt"), self.to_text())?;
        std::fs::write(dir.join("eval.csv"), self.to_csv())?;
        std::fs::write(dir.join("dynamic_ratio.csv"), self.ratios_csv())?;
        Ok(())
    }
}
