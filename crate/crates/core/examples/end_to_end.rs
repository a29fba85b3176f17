//! Generates the synthetic street, writes it as a dataset and runs every
//! stage on it, then prints the stage table and the evaluation rows.
//!
//! cargo run --release --example end_to_end [-- <work dir>]

use std::time::Instant;

use moslabel::pipeline::{Pipeline, PipelineConfig};
use moslabel::synth::{generate_scene, write_dataset, SceneSpec};

fn main() -> moslabel::Result<()> {
    env_logger::init();
    let work = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("moslabel-e2e"));
    let dataset = work.join("dataset");

    let start = Instant::now();
    let bundle = generate_scene(&SceneSpec::urban_street(3))?;
    write_dataset(&bundle, &dataset)?;
    println!("generated {} in {:.1}s", dataset.display(), start.elapsed().as_secs_f64());

    let mut config = PipelineConfig::default();
    config.input.dataset = dataset;
    config.output.dir = work.join("out");
    let pipeline = Pipeline::new(config)?;
    let report = pipeline.run()?;
    print!("{}", report.to_text());

    let eval = std::fs::read_to_string(work.join("out/eval/eval.txt"))?;
    print!("{eval}");
    Ok(())
}
