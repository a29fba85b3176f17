//! Degrades detections on the synthetic street (dropped movers in a few
//! frames, injected false positives) and compares IoU after detection alone,
//! after the track judge, and after judge plus box augmentation.
//!
//! cargo run --release --example filter_ablation

use std::sync::Arc;

use moslabel::dataset::{read_labels, LabelValue, SensorId, SequenceManifest};
use moslabel::detect::{detect_sequence, DetectParams, ScanAnnotation};
use moslabel::eval::{confusion_counts, iou_mos, ConfusionCounts};
use moslabel::sync::{merge_labels, SourceLabels, SyncParams, SyncedSequence};
use moslabel::synth::{degrade_detections, generate_scene, write_dataset, DegradeEdit, DegradeSpec, SceneSpec};
use moslabel::tracking::{filter_sequence, TrackParams};
use moslabel::trajectory::{cluster_trajectory, trajectory_frames, ClusterParams};

fn main() -> moslabel::Result<()> {
    let dir = tempfile_dir();
    write_dataset(&generate_scene(&SceneSpec::urban_street(5))?, &dir)?;
    let manifest = Arc::new(SequenceManifest::load(&dir, SensorId::Ouster)?);
    let seq = SyncedSequence::new(manifest.clone(), SyncParams::default())?;
    let poses = seq.poses();
    let partition = cluster_trajectory(&trajectory_frames(&poses, &seq.timestamps())?, &ClusterParams::default())?;
    let detections = detect_sequence(&partition, &seq, &poses, &DetectParams::default())?;

    let gt: Vec<Vec<LabelValue>> = (0..seq.quads().len())
        .map(|t| {
            let synced = seq.synced(t)?;
            let sources = synced
                .sources
                .iter()
                .map(|s| {
                    let path = dir
                        .join(s.sensor.name())
                        .join("labels")
                        .join(moslabel::dataset::frame_file_name(s.frame, "label"));
                    Ok(SourceLabels {
                        sensor: s.sensor,
                        frame: s.frame,
                        labels: read_labels(path, s.len)?,
                    })
                })
                .collect::<moslabel::Result<Vec<_>>>()?;
            merge_labels(&synced, &sources)
        })
        .collect::<moslabel::Result<_>>()?;
    let iou = |ann: &[ScanAnnotation]| -> moslabel::Result<f64> {
        let mut c = ConfusionCounts::default();
        for a in ann {
            c = c + confusion_counts(&a.labels, &gt[a.frame])?;
        }
        Ok(iou_mos(&c))
    };

    let spec = DegradeSpec {
        drop_frames: vec![25, 26, 40, 52, 53, 54, 70],
        inject_static_fp: 40,
        seed: 11,
    };
    let (degraded, edits) = degrade_detections(&detections, &spec);
    let dropped = edits.iter().filter(|e| matches!(e, DegradeEdit::Dropped { .. })).count();
    println!("dropped {dropped} dynamic instances, injected {}", edits.len() - dropped);

    let plain: Vec<ScanAnnotation> = degraded.iter().map(|d| d.annotation.clone()).collect();
    let judged = filter_sequence(&partition, &degraded, &seq, &poses, &TrackParams { augment: false, ..Default::default() })?;
    let augmented = filter_sequence(&partition, &degraded, &seq, &poses, &TrackParams::default())?;
    println!("IoU undegraded detect     {:.4}", iou(&detections.iter().map(|d| d.annotation.clone()).collect::<Vec<_>>())?);
    println!("IoU detect                {:.4}", iou(&plain)?);
    println!("IoU detect+judge          {:.4}", iou(&judged.annotations)?);
    println!("IoU detect+judge+augment  {:.4}", iou(&augmented.annotations)?);

    let (mut deleted, mut recovered, mut gt_movers, mut gt_recovered) = (0, 0, 0, 0);
    for &t in &spec.drop_frames {
        for (i, g) in gt[t].iter().enumerate() {
            if !g.is_dynamic() {
                continue;
            }
            let after = augmented.annotations[t].labels[i].is_dynamic();
            gt_movers += 1;
            gt_recovered += after as usize;
            if detections[t].annotation.labels[i].is_dynamic() {
                deleted += 1;
                recovered += after as usize;
            }
        }
    }
    println!("recovered {recovered}/{deleted} deleted mover points, {gt_recovered}/{gt_movers} of all mover points in those frames");
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("moslabel-ablation");
    let _ = std::fs::remove_dir_all(&dir);
    dir
}
