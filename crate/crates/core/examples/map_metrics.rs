//! Map-level preservation/rejection rates and F1, first on the published
//! static-map comparison, then on a cleaned synthetic map.

use moslabel::eval::{cleaned_map, f1_score, map_voxel_metrics};
use moslabel::synth::{generate_scene, SceneSpec};

const TABLE: [(&str, f64, f64); 3] = [("Removert", 85.072, 47.170), ("ERASOR", 95.325, 82.490), ("ERASOR2", 99.522, 95.339)];

fn main() -> moslabel::Result<()> {
    for (method, pr, rr) in TABLE {
        println!("{method:<9} PR {pr:>6.3}  RR {rr:>6.3}  F1 {:.3}", f1_score(pr / 100.0, rr / 100.0)?);
    }

    let spec = SceneSpec::urban_street(0).truncated(20);
    let bundle = generate_scene(&spec)?;
    let frames = bundle.reference_frames();
    let scans: Vec<_> = frames.iter().map(|f| (&f.cloud, f.labels.as_slice(), &f.true_pose)).collect();
    // Ground-truth labels remove every dynamic point; a labeling that keeps
    // them all shows the other extreme.
    let perfect = map_voxel_metrics(&cleaned_map(scans.iter().copied()), scans.iter().copied(), 0.2)?;
    let keep_all: Vec<_> = frames.iter().map(|f| vec![moslabel::dataset::LabelValue::STATIC; f.cloud.len()]).collect();
    let naive = cleaned_map(frames.iter().zip(&keep_all).map(|(f, l)| (&f.cloud, l.as_slice(), &f.true_pose)));
    let naive = map_voxel_metrics(&naive, scans.iter().copied(), 0.2)?;
    for (name, m) in [("ground truth", perfect), ("keep all", naive)] {
        println!(
            "{name:<13} PR {:>6.2}  RR {:>6.2}  F1 {:.3}  ({} static / {} dynamic voxels)",
            m.pr, m.rr, m.f1, m.static_voxels, m.dynamic_voxels
        );
    }
    Ok(())
}
