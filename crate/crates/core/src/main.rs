use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use moslabel::pipeline::{Pipeline, PipelineConfig, Stage};
use moslabel::review::serve_review;
use moslabel::synth::{generate_scene, write_dataset, SceneSpec};

#[derive(Parser)]
#[command(name = "moslabel", version, about = "Moving-object labels for multi-LiDAR sequences")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated stages; `run` goes through the latest one listed.
    #[arg(long, global = true, value_delimiter = ',')]
    stages: Option<Vec<Stage>>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for synthetic scenes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Review server address, e.g. 127.0.0.1:8080.
    #[arg(long, global = true)]
    serve_addr: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Match frames across sensors and merge them.
    Sync,
    /// Split the trajectory into clusters and subclusters.
    Cluster,
    /// Refine poses against per-subcluster submaps.
    Correct,
    /// Label moving instances against the static map.
    Detect,
    /// Filter detections through tracking.
    Track,
    /// Write labels, poses and splits per sensor.
    Export,
    /// Score exported labels against ground truth.
    Eval,
    /// Serve tracking output for review, running earlier stages as needed.
    Serve,
    /// Write a synthetic dataset plus a config for it under `--out`.
    Synth {
        #[arg(long, value_enum, default_value_t = Scene::Street)]
        scene: Scene,
        /// Scene description file; replaces `--scene`.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// All selected stages.
    Run,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scene {
    Street,
    Static,
    Loop,
}

fn load_config(cli: &Cli) -> moslabel::Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(stages) = &cli.stages {
        config.stages = stages.clone();
    }
    if let Some(out) = &cli.out {
        config.output.dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(addr) = &cli.serve_addr {
        config.review.serve_addr = addr.clone();
    }
    config.validate()?;
    Ok(config)
}

fn synth(cli: &Cli, scene: Scene, spec: Option<&PathBuf>) -> moslabel::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let spec = match spec {
        Some(path) => SceneSpec::load(path)?,
        None => match scene {
            Scene::Street => SceneSpec::urban_street(seed),
            Scene::Static => SceneSpec::static_street(seed),
            Scene::Loop => SceneSpec::revisit_loop(seed),
        },
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
    let dataset = out.join("dataset");
    write_dataset(&generate_scene(&spec)?, &dataset)?;
    std::fs::write(out.join("scene.toml"), spec.to_toml_string()?)?;
    let config = PipelineConfig {
        input: moslabel::pipeline::InputConfig {
            dataset: PathBuf::from("dataset"),
            ..Default::default()
        },
        output: moslabel::pipeline::OutputConfig { dir: PathBuf::from("out") },
        seed,
        ..Default::default()
    };
    std::fs::write(out.join("pipeline.toml"), config.to_toml_string()?)?;
    println!("wrote {} and {}", dataset.display(), out.join("pipeline.toml").display());
    Ok(())
}

fn run(cli: &Cli) -> moslabel::Result<()> {
    let last = match &cli.command {
        Command::Synth { scene, spec } => return synth(cli, *scene, spec.as_ref()),
        Command::Serve => {
            let config = load_config(cli)?;
            let addr = config.review.serve_addr.clone();
            return serve_review(config, &addr);
        }
        Command::Run => None,
        Command::Sync => Some(Stage::Sync),
        Command::Cluster => Some(Stage::Cluster),
        Command::Correct => Some(Stage::Correct),
        Command::Detect => Some(Stage::Detect),
        Command::Track => Some(Stage::Track),
        Command::Export => Some(Stage::Export),
        Command::Eval => Some(Stage::Eval),
    };
    let pipeline = Pipeline::new(load_config(cli)?)?;
    let report = match last {
        Some(stage) => pipeline.run_through(stage)?,
        None => pipeline.run()?,
    };
    print!("{}", report.to_text());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
