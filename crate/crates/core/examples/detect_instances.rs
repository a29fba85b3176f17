//! Runs instance-level dynamic detection on the reference sensor of the
//! synthetic street and scores it per frame.

use moslabel::detect::{detect_sequence, DetectParams, Verdict};
use moslabel::eval::{confusion_counts, iou_mos, ConfusionCounts};
use moslabel::synth::{generate_scene, SceneSpec};
use moslabel::trajectory::{cluster_trajectory, trajectory_frames, ClusterParams};

fn main() -> moslabel::Result<()> {
    let spec = SceneSpec::urban_street(2).truncated(40);
    let bundle = generate_scene(&spec)?;
    let clouds = bundle.reference_clouds();
    let poses = bundle.reference_poses();
    let times: Vec<f64> = bundle.reference_frames().iter().map(|f| f.timestamp).collect();
    let partition = cluster_trajectory(&trajectory_frames(&poses, &times)?, &ClusterParams::default())?;
    let detections = detect_sequence(&partition, &clouds, &poses, &DetectParams::default())?;

    let mut total = ConfusionCounts::default();
    for (det, truth) in detections.iter().zip(bundle.reference_frames()) {
        let c = confusion_counts(&det.annotation.labels, &truth.labels)?;
        total = total + c;
        if det.frame() % 5 == 0 {
            let dynamic = det.instances.iter().filter(|i| i.verdict == Verdict::Dynamic).count();
            println!(
                "frame {:>3}: {:>3} instances, {dynamic} dynamic, IoU {:.3}",
                det.frame(),
                det.instances.len(),
                iou_mos(&c)
            );
        }
    }
    println!("sequence IoU {:.4}", iou_mos(&total));
    Ok(())
}
