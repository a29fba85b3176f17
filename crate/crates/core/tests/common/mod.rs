#![allow(dead_code)]

use std::path::{Path, PathBuf};

use moslabel::pipeline::{PipelineConfig, Stage};
use moslabel::synth::{generate_scene, write_dataset, GroundTruthBundle, SceneSpec};

/// The first `frames` frames of the synthetic street, written under `dir`.
pub fn street_dataset(dir: &Path, frames: usize) -> GroundTruthBundle {
    let bundle = generate_scene(&SceneSpec::urban_street(1).truncated(frames)).unwrap();
    write_dataset(&bundle, dir).unwrap();
    bundle
}

pub fn config(dataset: &Path, out: &Path) -> PipelineConfig {
    let mut config = PipelineConfig::default();
    config.input.dataset = dataset.to_path_buf();
    config.output.dir = out.to_path_buf();
    config.stages = Stage::ALL.to_vec();
    config
}

pub fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let path = entry.unwrap().path();
        let target = to.join(path.file_name().unwrap());
        if path.is_dir() {
            copy_dir(&path, &target);
        } else {
            std::fs::copy(&path, &target).unwrap();
        }
    }
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
