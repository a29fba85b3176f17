//! Generates a synthetic scene and writes it as a multi-sensor dataset.
//!
//! cargo run --release --example synth_scene -- [street|static|loop] [out dir]

use moslabel::synth::{generate_scene, write_dataset, SceneSpec};

fn main() -> moslabel::Result<()> {
    let mut args = std::env::args().skip(1);
    let scene = args.next().unwrap_or_else(|| "street".into());
    let out = args
        .next()
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("moslabel-synth"));
    let spec = match scene.as_str() {
        "street" => SceneSpec::urban_street(0),
        "static" => SceneSpec::static_street(0),
        "loop" => SceneSpec::revisit_loop(0),
        other => return Err(moslabel::Error::Config(format!("unknown scene `{other}`"))),
    };
    let bundle = generate_scene(&spec)?;
    for (sensor, frames) in &bundle.sensors {
        let points: usize = frames.iter().map(|f| f.cloud.len()).sum();
        let dynamic: usize = frames.iter().map(|f| f.labels.iter().filter(|l| l.is_dynamic()).count()).sum();
        println!(
            "{:<9} {} frames  {:>9} points  {:>5.2}% dynamic",
            sensor.name(),
            frames.len(),
            points,
            100.0 * dynamic as f64 / points.max(1) as f64
        );
    }
    if bundle.sensors.len() == 4 {
        write_dataset(&bundle, &out)?;
        println!("wrote {}", out.display());
    } else {
        println!("single-sensor scene, not written as a dataset");
    }
    Ok(())
}
