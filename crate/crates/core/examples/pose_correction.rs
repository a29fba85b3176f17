//! Injects drift into a two-lap synthetic drive and removes it again.

use moslabel::correction::{correct_cluster_poses, CorrectionParams};
use moslabel::synth::{corrupt_poses, generate_scene, DriftSpec, SceneSpec};
use moslabel::trajectory::{cluster_trajectory, trajectory_frames, ClusterParams};

fn main() -> moslabel::Result<()> {
    env_logger::init();
    let spec = SceneSpec::revisit_loop(7);
    let t0 = std::time::Instant::now();
    let bundle = generate_scene(&spec)?;
    let truth = bundle.reference_poses();
    let clouds = bundle.reference_clouds();
    println!("generated {} frames in {:.1?}", clouds.len(), t0.elapsed());

    let drift = DriftSpec { drift: 0.4, ramp: SceneSpec::revisit_loop_ramp(), seed: 7 };
    let drifted = corrupt_poses(&truth, &drift)?;
    let times: Vec<f64> = bundle.reference_frames().iter().map(|f| f.timestamp).collect();
    let partition = cluster_trajectory(&trajectory_frames(&drifted, &times)?, &ClusterParams::default())?;
    for (c, cl) in partition.clusters.iter().enumerate() {
        println!("cluster {c} {} frames {:?}", cl.kind, cl.subclusters);
    }
    let t1 = std::time::Instant::now();
    let out = correct_cluster_poses(&partition, &clouds, &drifted, &CorrectionParams::default())?;
    println!("corrected in {:.1?}", t1.elapsed());

    let err = |poses: &[moslabel::geometry::Pose], t: usize| (poses[t].translation() - truth[t].translation()).norm();
    let mut worst = (0.0f64, 0usize);
    for cl in partition.clusters.iter().filter(|c| c.subclusters.len() > 1) {
        for &t in &cl.frames {
            let e = err(&out.poses, t);
            if e > worst.0 {
                worst = (e, t);
            }
        }
    }
    println!(
        "icp calls {} (expected {}), failures {}, worst revisited-frame error {:.4} m at frame {}",
        out.report.icp_calls(),
        partition.alignment_count(),
        out.report.failures(),
        worst.0,
        worst.1
    );
    Ok(())
}
