//! Partitions a two-lap drive into trajectory clusters and prints the table.

use moslabel::synth::{generate_scene, SceneSpec};
use moslabel::trajectory::{cluster_trajectory, trajectory_frames, write_partition_table, ClusterParams};

fn main() -> moslabel::Result<()> {
    let bundle = generate_scene(&SceneSpec::revisit_loop(1))?;
    let poses = bundle.reference_poses();
    let times: Vec<f64> = bundle.reference_frames().iter().map(|f| f.timestamp).collect();
    let partition = cluster_trajectory(&trajectory_frames(&poses, &times)?, &ClusterParams::default())?;
    for (c, cluster) in partition.clusters.iter().enumerate() {
        let spans: Vec<String> = cluster.subclusters.iter().map(|r| format!("{}..{}", r.start, r.end)).collect();
        println!("C{c:<3} {:<12} {:>4} frames  {}", cluster.kind.to_string(), cluster.frames.len(), spans.join(" "));
    }
    println!("{} alignments needed", partition.alignment_count());
    let path = std::env::temp_dir().join("moslabel-partition.txt");
    write_partition_table(&partition, &path)?;
    println!("table written to {}", path.display());
    Ok(())
}
