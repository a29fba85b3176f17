//! Matches the four sensors to the reference clock, merges one frame and
//! routes labels back to the native scans.

use std::sync::Arc;

use moslabel::dataset::{LabelValue, MosClass, SensorId, SequenceManifest};
use moslabel::sync::{merge_labels, split_labels, SyncParams, SyncedSequence};
use moslabel::synth::{generate_scene, write_dataset, SceneSpec};

fn main() -> moslabel::Result<()> {
    let spec = SceneSpec::urban_street(0).truncated(5);
    let dir = std::env::temp_dir().join("moslabel-sync");
    write_dataset(&generate_scene(&spec)?, &dir)?;

    let manifest = Arc::new(SequenceManifest::load(&dir, SensorId::Ouster)?);
    let seq = SyncedSequence::new(manifest, SyncParams::default())?;
    let quad = &seq.quads()[2];
    println!("reference frame {} at {:.3}s", quad.reference_frame, quad.reference_timestamp);
    for (sensor, (frame, t)) in &quad.members {
        println!("  {:<9} frame {frame} at {t:.3}s", sensor.name());
    }

    let synced = seq.synced(2)?;
    for s in &synced.sources {
        println!("  {:<9} contributes {} points", s.sensor.name(), s.len);
    }
    let labels: Vec<LabelValue> = synced
        .cloud
        .points
        .iter()
        .map(|p| if p.z > 0.5 { LabelValue::new(MosClass::Dynamic, 1) } else { LabelValue::STATIC })
        .collect();
    let split = split_labels(&synced, &labels)?;
    assert_eq!(merge_labels(&synced, &split)?, labels);
    println!("{} merged labels survive split and re-merge", labels.len());
    Ok(())
}
