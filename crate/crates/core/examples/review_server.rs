//! Runs the pipeline on a short synthetic sequence and serves the result for
//! review until interrupted.
//!
//! cargo run --release --example review_server -- [addr]
//! curl -s localhost:8080/api/summary

use moslabel::pipeline::PipelineConfig;
use moslabel::review::serve_review;
use moslabel::synth::{generate_scene, write_dataset, SceneSpec};

fn main() -> moslabel::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let addr = std::env::args().nth(1).unwrap_or_else(|| "127.0.0.1:8080".into());
    let work = std::env::temp_dir().join("moslabel-review");
    let dataset = work.join("dataset");
    if !dataset.join("Ouster").is_dir() {
        let spec = SceneSpec::urban_street(4).truncated(30);
        write_dataset(&generate_scene(&spec)?, &dataset)?;
    }
    let mut config = PipelineConfig::default();
    config.input.dataset = dataset;
    config.output.dir = work.join("out");
    println!("edits are logged to {}", config.edit_log_path().display());
    serve_review(config, &addr)
}
