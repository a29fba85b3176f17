//! Stage orchestration with a content-addressed cache.
//!
//! Stages run in a fixed order: sync, cluster, correct, detect, track, export
//! and eval. Each stage's artifact is stored under `<out>/cache` with a key
//! that hashes the stage name, its parameters and the keys of its inputs, so
//! changing one section of the config only invalidates that stage and the
//! ones after it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Instant, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::correction::{correct_cluster_poses, write_correction_report, CorrectionOutcome, CorrectionParams};
use crate::dataset::{
    export_layout, frame_file_name, make_splits, read_labels, read_scan, write_splits, ExportManifest, LabelValue,
    SensorId, SensorLabels, SequenceManifest, DEFAULT_SPLIT_RATIOS,
};
use crate::detect::{detect_sequence, DetectParams, FrameDetection, Verdict};
use crate::edits::{apply_edits, read_edit_log};
use crate::error::{Error, Result};
use crate::eval::{confusion_counts, dynamic_ratio, map_voxel_metrics, EvalReport};
use crate::geometry::{check_voxel_size, compose, PointCloud, Pose};
use crate::sync::{backpropagate, split_labels, FrameQuadruple, SyncParams, SyncedSequence};
use crate::tracking::{filter_sequence, write_track_dump, FilterOutcome, TrackParams, TrackStatus};
use crate::trajectory::{
    cluster_trajectory, trajectory_frames, write_partition_table, ClusterKind, ClusterParams, ClusterPartition,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sync,
    Cluster,
    Correct,
    Detect,
    Track,
    Export,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Sync,
        Stage::Cluster,
        Stage::Correct,
        Stage::Detect,
        Stage::Track,
        Stage::Export,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sync => "sync",
            Stage::Cluster => "cluster",
            Stage::Correct => "correct",
            Stage::Detect => "detect",
            Stage::Track => "track",
            Stage::Export => "export",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub dataset: PathBuf,
    pub reference: SensorId,
    /// Root holding `<Sensor>/labels/*.label` ground truth; defaults to the
    /// dataset itself.
    pub ground_truth: Option<PathBuf>,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset"),
            reference: SensorId::Ouster,
            ground_truth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub voxel_size: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { voxel_size: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReviewConfig {
    pub serve_addr: String,
    /// Stop `run` after tracking so edits can be made before export.
    pub pause: bool,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self {
            serve_addr: "127.0.0.1:8080".into(),
            pause: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub input: InputConfig,
    pub output: OutputConfig,
    /// Stages to run; the pipeline runs through the latest one listed.
    pub stages: Vec<Stage>,
    pub seed: u64,
    pub sync: SyncParams,
    pub traj_cluster: ClusterParams,
    pub pose_correction: CorrectionParams,
    pub mos_detect: DetectParams,
    pub track_filter: TrackParams,
    pub eval: EvalConfig,
    pub review: ReviewConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: InputConfig::default(),
            output: OutputConfig::default(),
            stages: Stage::ALL.to_vec(),
            seed: 0,
            sync: SyncParams::default(),
            traj_cluster: ClusterParams::default(),
            pose_correction: CorrectionParams::default(),
            mos_detect: DetectParams::default(),
            track_filter: TrackParams::default(),
            eval: EvalConfig::default(),
            review: ReviewConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Relative paths in a config file are relative to that file.
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut config.input.dataset);
            fix(&mut config.output.dir);
            if let Some(gt) = config.input.ground_truth.as_mut() {
                fix(gt);
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sync.max_sync_gap > 0.0) {
            return Err(Error::invalid("max_sync_gap", "must be positive"));
        }
        self.traj_cluster.validate()?;
        check_voxel_size(self.pose_correction.voxel_size)?;
        self.pose_correction.icp.validate()?;
        self.mos_detect.validate()?;
        self.track_filter.validate()?;
        check_voxel_size(self.eval.voxel_size)?;
        if self.stages.is_empty() {
            return Err(Error::Config("no stages selected".into()));
        }
        Ok(())
    }

    pub fn last_stage(&self) -> Stage {
        self.stages.iter().copied().max().unwrap_or(Stage::Eval)
    }

    pub fn ground_truth_root(&self) -> &Path {
        self.input.ground_truth.as_deref().unwrap_or(&self.input.dataset)
    }

    pub fn edit_log_path(&self) -> PathBuf {
        self.output.dir.join("edits.jsonl")
    }

    pub fn export_dir(&self) -> PathBuf {
        self.output.dir.join("export")
    }
}

fn hex_digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("config values serialize")
}

/// Per-stage artifacts under one directory, named `<stage>-<key>.bin` with a
/// `.json` summary beside each.
#[derive(Debug, Clone)]
pub struct StageCache {
    dir: PathBuf,
}

impl StageCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn key(stage: Stage, params: &[u8], inputs: &[&str]) -> String {
        let mut parts: Vec<&[u8]> = vec![stage.name().as_bytes(), params];
        parts.extend(inputs.iter().map(|s| s.as_bytes()));
        hex_digest(&parts)
    }

    fn artifact(&self, stage: Stage, key: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{key}.bin"))
    }

    fn summary_path(&self, stage: Stage, key: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{key}.json"))
    }

    pub fn contains(&self, stage: Stage, key: &str) -> bool {
        self.artifact(stage, key).is_file() && self.summary_path(stage, key).is_file()
    }

    pub fn load<T: DeserializeOwned>(&self, stage: Stage, key: &str) -> Result<Option<T>> {
        let path = self.artifact(stage, key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        bincode::deserialize(&bytes)
            .map(Some)
            .map_err(|e| Error::Cache(format!("{}: {e}", path.display())))
    }

    pub fn summary(&self, stage: Stage, key: &str) -> Result<Counts> {
        let path = self.summary_path(stage, key);
        serde_json::from_slice(&std::fs::read(&path)?).map_err(|e| Error::Cache(format!("{}: {e}", path.display())))
    }

    /// Writes through a temporary file so an interrupted run never leaves a
    /// truncated artifact behind.
    pub fn store<T: Serialize>(&self, stage: Stage, key: &str, value: &T, counts: &Counts) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let bytes = bincode::serialize(value).map_err(|e| Error::Cache(e.to_string()))?;
        let path = self.artifact(stage, key);
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
        std::fs::write(self.summary_path(stage, key), json(counts))?;
        Ok(())
    }
}

pub type Counts = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub cache_hit: bool,
    pub seconds: f64,
    pub counts: Counts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
}

impl PipelineReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.stages {
            let counts: Vec<String> = r.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
            s.push_str(&format!(
                "{:<8} {:>5} {:>8.2}s  {}\n",
                r.stage.name(),
                if r.cache_hit { "hit" } else { "run" },
                r.seconds,
                counts.join(" ")
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SyncArtifact {
    quads: Vec<FrameQuadruple>,
}

#[derive(Debug, Serialize)]
struct FileStamp {
    path: PathBuf,
    len: u64,
    modified_ns: u128,
}

fn stamp(path: &Path) -> Result<FileStamp> {
    let meta = std::fs::metadata(path)?;
    let modified_ns = meta
        .modified()
        .ok()
        .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
        .map_or(0, |d| d.as_nanos());
    Ok(FileStamp {
        path: path.to_path_buf(),
        len: meta.len(),
        modified_ns,
    })
}

/// Hash of the manifest (paths, poses, timestamps, extrinsics) plus the
/// size and modification time of every scan file.
fn dataset_fingerprint(manifest: &SequenceManifest) -> Result<String> {
    let stamps: Vec<FileStamp> = manifest
        .sensors
        .values()
        .flat_map(|s| s.frames.iter().map(|f| stamp(&f.scan_path)))
        .collect::<Result<_>>()?;
    Ok(hex_digest(&[&json(manifest), &json(&stamps)]))
}

fn gt_label_path(root: &Path, sensor: SensorId, frame: usize) -> PathBuf {
    root.join(sensor.name()).join("labels").join(frame_file_name(frame, "label"))
}

fn exported_label_path(root: &Path, sensor: SensorId, frame: usize) -> PathBuf {
    gt_label_path(root, sensor, frame)
}

fn ground_truth_fingerprint(manifest: &SequenceManifest, root: &Path) -> Result<String> {
    let mut stamps = Vec::new();
    for (sensor, seq) in &manifest.sensors {
        for t in 0..seq.frames.len() {
            let path = gt_label_path(root, *sensor, t);
            if path.is_file() {
                stamps.push(stamp(&path)?);
            }
        }
    }
    Ok(hex_digest(&[&json(&stamps)]))
}

#[derive(Debug, Clone)]
struct Keys {
    by_stage: BTreeMap<Stage, String>,
}

impl Keys {
    fn get(&self, stage: Stage) -> &str {
        &self.by_stage[&stage]
    }
}

/// A configured pipeline over one dataset.
pub struct Pipeline {
    config: PipelineConfig,
    manifest: Arc<SequenceManifest>,
    cache: StageCache,
}

impl Pipeline {
    /// Validates the config and loads the dataset manifest; no stage runs.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let manifest = Arc::new(SequenceManifest::load(&config.input.dataset, config.input.reference)?);
        let cache = StageCache::new(config.output.dir.join("cache"));
        Ok(Self {
            config,
            manifest,
            cache,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Arc<SequenceManifest> {
        &self.manifest
    }

    fn keys(&self) -> Result<Keys> {
        let c = &self.config;
        let data = dataset_fingerprint(&self.manifest)?;
        let reference = json(&c.input.reference);
        let mut by_stage = BTreeMap::new();
        let version = env!("CARGO_PKG_VERSION");
        let sync = StageCache::key(Stage::Sync, &[json(&c.sync), reference].concat(), &[version, &data]);
        let cluster = StageCache::key(Stage::Cluster, &json(&c.traj_cluster), &[&sync]);
        let correct = StageCache::key(Stage::Correct, &json(&c.pose_correction), &[&cluster]);
        let detect = StageCache::key(Stage::Detect, &json(&c.mos_detect), &[&correct]);
        let track = StageCache::key(Stage::Track, &json(&c.track_filter), &[&detect]);
        let edits = std::fs::read(c.edit_log_path()).unwrap_or_default();
        let export = StageCache::key(Stage::Export, &edits, &[&track]);
        let gt = ground_truth_fingerprint(&self.manifest, c.ground_truth_root())?;
        let eval = StageCache::key(Stage::Eval, &json(&c.eval), &[&export, &gt]);
        for (stage, key) in Stage::ALL.into_iter().zip([sync, cluster, correct, detect, track, export, eval]) {
            by_stage.insert(stage, key);
        }
        Ok(Keys { by_stage })
    }

    /// Runs every stage up to the config's last selected stage, or up to
    /// tracking when the review pause is on.
    pub fn run(&self) -> Result<PipelineReport> {
        let mut last = self.config.last_stage();
        if self.config.review.pause && last > Stage::Track {
            log::info!("review pause: stopping after tracking");
            last = Stage::Track;
        }
        self.run_through(last)
    }

    pub fn run_through(&self, last: Stage) -> Result<PipelineReport> {
        std::fs::create_dir_all(&self.config.output.dir)?;
        let mut run = Run::new(self, self.keys()?);
        for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
            run.ensure(stage).map_err(|e| match e {
                e @ Error::Stage { .. } => e,
                e => Error::Stage {
                    stage: stage.name(),
                    source: Box::new(e),
                },
            })?;
        }
        Ok(run.report)
    }

    pub fn synced_sequence(&self) -> Result<SyncedSequence> {
        let keys = self.keys()?;
        Run::new(self, keys).sequence()
    }

    /// Tracking output from the cache; the review service reads this.
    pub fn filtered(&self) -> Result<FilterOutcome> {
        let keys = self.keys()?;
        self.cache
            .load(Stage::Track, keys.get(Stage::Track))?
            .ok_or_else(|| Error::Cache("no tracking output for this config; run through `track` first".into()))
    }
}

struct Run<'p> {
    p: &'p Pipeline,
    keys: Keys,
    sequence: Option<SyncedSequence>,
    partition: Option<ClusterPartition>,
    correction: Option<CorrectionOutcome>,
    detections: Option<Vec<FrameDetection>>,
    filtered: Option<FilterOutcome>,
    report: PipelineReport,
}

impl<'p> Run<'p> {
    fn new(p: &'p Pipeline, keys: Keys) -> Self {
        Self {
            p,
            keys,
            sequence: None,
            partition: None,
            correction: None,
            detections: None,
            filtered: None,
            report: PipelineReport::default(),
        }
    }

    fn config(&self) -> &'p PipelineConfig {
        &self.p.config
    }

    fn reports_dir(&self) -> Result<PathBuf> {
        let dir = self.config().output.dir.join("reports");
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn hit(&self, stage: Stage) -> bool {
        let key = self.keys.get(stage);
        if !self.p.cache.contains(stage, key) {
            return false;
        }
        if stage == Stage::Export {
            // The artifact lists files outside the cache; all must still exist.
            let dir = self.config().export_dir();
            return match self.p.cache.load::<ExportManifest>(stage, key) {
                Ok(Some(m)) => m.files.iter().all(|f| dir.join(f).is_file()),
                _ => false,
            };
        }
        true
    }

    fn ensure(&mut self, stage: Stage) -> Result<()> {
        let start = Instant::now();
        if self.hit(stage) {
            let counts = self.p.cache.summary(stage, self.keys.get(stage))?;
            self.report.stages.push(StageReport {
                stage,
                cache_hit: true,
                seconds: start.elapsed().as_secs_f64(),
                counts,
            });
            return Ok(());
        }
        log::info!("running stage {stage}");
        let counts = match stage {
            Stage::Sync => self.compute_sync()?,
            Stage::Cluster => self.compute_cluster()?,
            Stage::Correct => self.compute_correct()?,
            Stage::Detect => self.compute_detect()?,
            Stage::Track => self.compute_track()?,
            Stage::Export => self.compute_export()?,
            Stage::Eval => self.compute_eval()?,
        };
        self.report.stages.push(StageReport {
            stage,
            cache_hit: false,
            seconds: start.elapsed().as_secs_f64(),
            counts,
        });
        Ok(())
    }

    fn load<T: DeserializeOwned>(&mut self, stage: Stage) -> Result<T> {
        if !self.hit(stage) {
            self.ensure(stage)?;
        }
        self.p
            .cache
            .load(stage, self.keys.get(stage))?
            .ok_or_else(|| Error::Cache(format!("artifact for stage {stage} vanished")))
    }

    fn store<T: Serialize>(&self, stage: Stage, value: &T, counts: &Counts) -> Result<()> {
        self.p.cache.store(stage, self.keys.get(stage), value, counts)
    }

    fn sequence(&mut self) -> Result<SyncedSequence> {
        if let Some(s) = &self.sequence {
            return Ok(s.clone());
        }
        let artifact: SyncArtifact = self.load(Stage::Sync)?;
        let seq = SyncedSequence::from_quads(self.p.manifest.clone(), self.config().sync, artifact.quads);
        self.sequence = Some(seq.clone());
        Ok(seq)
    }

    fn partition(&mut self) -> Result<ClusterPartition> {
        if self.partition.is_none() {
            self.partition = Some(self.load(Stage::Cluster)?);
        }
        Ok(self.partition.clone().unwrap())
    }

    fn correction(&mut self) -> Result<CorrectionOutcome> {
        if self.correction.is_none() {
            self.correction = Some(self.load(Stage::Correct)?);
        }
        Ok(self.correction.clone().unwrap())
    }

    fn detections(&mut self) -> Result<Vec<FrameDetection>> {
        if self.detections.is_none() {
            self.detections = Some(self.load(Stage::Detect)?);
        }
        Ok(self.detections.clone().unwrap())
    }

    fn filtered(&mut self) -> Result<FilterOutcome> {
        if self.filtered.is_none() {
            self.filtered = Some(self.load(Stage::Track)?);
        }
        Ok(self.filtered.clone().unwrap())
    }

    fn compute_sync(&mut self) -> Result<Counts> {
        let seq = SyncedSequence::new(self.p.manifest.clone(), self.config().sync)?;
        // Merge one frame up front so missing extrinsics fail here.
        if seq.quads().len() > 0 {
            seq.synced(0)?;
        }
        let points: u64 = seq
            .quads()
            .iter()
            .flat_map(|q| {
                q.members
                    .iter()
                    .map(|(s, (f, _))| self.p.manifest.sequence(*s).frames[*f].scan_path.clone())
            })
            .map(|p| std::fs::metadata(p).map(|m| m.len() / 16).unwrap_or(0))
            .sum();
        let counts = Counts::from([("frames".into(), seq.quads().len() as f64), ("points".into(), points as f64)]);
        self.store(Stage::Sync, &SyncArtifact { quads: seq.quads().to_vec() }, &counts)?;
        self.sequence = Some(seq);
        Ok(counts)
    }

    fn compute_cluster(&mut self) -> Result<Counts> {
        let seq = self.sequence()?;
        let frames = trajectory_frames(&seq.poses(), &seq.timestamps())?;
        let partition = cluster_trajectory(&frames, &self.config().traj_cluster)?;
        write_partition_table(&partition, self.reports_dir()?.join("partition.txt"))?;
        let counts = Counts::from([
            ("clusters".into(), partition.clusters.len() as f64),
            ("alignments".into(), partition.alignment_count() as f64),
        ]);
        self.store(Stage::Cluster, &partition, &counts)?;
        self.partition = Some(partition);
        Ok(counts)
    }

    fn compute_correct(&mut self) -> Result<Counts> {
        let seq = self.sequence()?;
        let partition = self.partition()?;
        let out = correct_cluster_poses(&partition, &seq, &seq.poses(), &self.config().pose_correction)?;
        write_correction_report(&out.report, self.reports_dir()?.join("correction.txt"))?;
        let counts = Counts::from([
            ("icp_calls".into(), out.report.icp_calls() as f64),
            ("failures".into(), out.report.failures() as f64),
        ]);
        self.store(Stage::Correct, &out, &counts)?;
        self.correction = Some(out);
        Ok(counts)
    }

    fn compute_detect(&mut self) -> Result<Counts> {
        let seq = self.sequence()?;
        let partition = self.partition()?;
        let poses = self.correction()?.poses;
        let dets = detect_sequence(&partition, &seq, &poses, &self.config().mos_detect)?;
        let dynamic_instances = dets
            .iter()
            .flat_map(|d| &d.instances)
            .filter(|i| i.verdict == Verdict::Dynamic)
            .count();
        let dynamic_points: usize = dets.iter().map(|d| d.annotation.dynamic_count()).sum();
        let counts = Counts::from([
            ("dynamic_instances".into(), dynamic_instances as f64),
            ("dynamic_points".into(), dynamic_points as f64),
        ]);
        self.store(Stage::Detect, &dets, &counts)?;
        self.detections = Some(dets);
        Ok(counts)
    }

    fn compute_track(&mut self) -> Result<Counts> {
        let seq = self.sequence()?;
        let partition = self.partition()?;
        let poses = self.correction()?.poses;
        let dets = self.detections()?;
        let out = filter_sequence(&partition, &dets, &seq, &poses, &self.config().track_filter)?;
        write_track_dump(&out.tracks, self.reports_dir()?.join("tracks.txt"))?;
        let status_count =
            |s: TrackStatus| out.tracks.tracks.iter().filter(|t| t.status == s).count() as f64;
        let counts = Counts::from([
            ("tracks".into(), out.tracks.tracks.len() as f64),
            ("confirmed".into(), status_count(TrackStatus::ConfirmedMoving)),
            ("rejected".into(), status_count(TrackStatus::RejectedStatic)),
            ("augmented_boxes".into(), out.boxes.len() as f64),
            (
                "dynamic_points".into(),
                out.annotations.iter().map(|a| a.dynamic_count()).sum::<usize>() as f64,
            ),
        ]);
        self.store(Stage::Track, &out, &counts)?;
        self.filtered = Some(out);
        Ok(counts)
    }

    fn compute_export(&mut self) -> Result<Counts> {
        let seq = self.sequence()?;
        let filtered = self.filtered()?;
        let partition = self.partition()?;
        let edits = read_edit_log(self.config().edit_log_path())?;
        let annotations = apply_edits(&filtered.annotations, &edits)?;
        let manifest = &self.p.manifest;

        let sizes: BTreeMap<SensorId, Vec<usize>> = manifest
            .sensors
            .iter()
            .map(|(s, seq)| {
                let n = seq
                    .frames
                    .iter()
                    .map(|f| Ok((std::fs::metadata(&f.scan_path)?.len() / 16) as usize))
                    .collect::<Result<Vec<_>>>()?;
                Ok((*s, n))
            })
            .collect::<Result<_>>()?;
        let mut split = Vec::new();
        for a in &annotations {
            split.extend(split_labels(&seq.synced(a.frame)?, &a.labels)?);
        }
        let per_sensor = backpropagate(&sizes, split);
        let labels: SensorLabels = per_sensor
            .into_iter()
            .map(|(s, frames)| (s, frames.into_iter().map(Some).collect()))
            .collect();
        let dir = self.config().export_dir();
        let mut manifest_out = export_layout(manifest, &labels, &dir)?;

        let revisits: Vec<usize> = partition
            .clusters
            .iter()
            .filter(|c| c.kind == ClusterKind::Revisit || c.num_subclusters() > 1)
            .filter_map(|c| c.frames.iter().min().copied())
            .collect();
        let n = seq.quads().len();
        let anchors = match revisits.as_slice() {
            [.., v, t] => (Some(*v), Some(*t)),
            _ => (None, None),
        };
        let splits = make_splits(n, DEFAULT_SPLIT_RATIOS, anchors.0, anchors.1).or_else(|e| {
            log::warn!("split anchors rejected ({e}); using trailing blocks");
            make_splits(n, DEFAULT_SPLIT_RATIOS, None, None)
        })?;
        let splits_path = dir.join("splits.txt");
        write_splits(&splits, &splits_path)?;
        manifest_out.files.push(splits_path);
        // Stored relative to the export directory so a moved output tree
        // stays valid.
        for f in &mut manifest_out.files {
            if let Ok(rel) = f.strip_prefix(&dir) {
                *f = rel.to_path_buf();
            }
        }

        let dynamic: usize = labels
            .values()
            .flatten()
            .flatten()
            .map(|l| l.iter().filter(|v| v.is_dynamic()).count())
            .sum();
        let counts = Counts::from([
            ("files".into(), manifest_out.files.len() as f64),
            ("edits".into(), edits.len() as f64),
            ("dynamic_points".into(), dynamic as f64),
        ]);
        self.store(Stage::Export, &manifest_out, &counts)?;
        Ok(counts)
    }

    fn compute_eval(&mut self) -> Result<Counts> {
        let report = evaluate_export(
            &self.p.manifest,
            &self.config().export_dir(),
            self.config().ground_truth_root(),
            self.config().eval.voxel_size,
        )?;
        report.write(self.config().output.dir.join("eval"))?;
        let mut counts = Counts::new();
        for r in &report.rows {
            counts.insert(format!("iou_{}", r.name), r.iou);
        }
        if let Some(m) = &report.map {
            counts.insert("map_pr".into(), m.pr);
            counts.insert("map_rr".into(), m.rr);
            counts.insert("map_f1".into(), m.f1);
        }
        self.store(Stage::Eval, &report, &counts)?;
        Ok(counts)
    }
}

struct LabeledScan {
    cloud: PointCloud,
    pred: Vec<LabelValue>,
    gt: Vec<LabelValue>,
    pose: Pose,
}

/// Compares exported labels against ground truth: one IoU row per sensor
/// plus an `all` row, map-level rates over every sensor's points, and the
/// reference sensor's per-frame dynamic ratio.
pub fn evaluate_export(
    manifest: &SequenceManifest,
    export_dir: &Path,
    gt_root: &Path,
    voxel_size: f64,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let mut scans = Vec::new();
    let mut total = Default::default();
    for (sensor, seq) in &manifest.sensors {
        let extrinsic = seq.extrinsic.unwrap_or_default();
        let mut counts = Default::default();
        for (t, frame) in seq.frames.iter().enumerate() {
            let cloud = read_scan(&frame.scan_path)?;
            let pred = read_labels(exported_label_path(export_dir, *sensor, t), cloud.len())?;
            let gt_path = gt_label_path(gt_root, *sensor, t);
            if !gt_path.is_file() {
                return Err(Error::Config(format!("ground truth {} is missing", gt_path.display())));
            }
            let gt = read_labels(gt_path, cloud.len())?;
            counts = counts + confusion_counts(&pred, &gt)?;
            if *sensor == manifest.reference && !pred.is_empty() {
                report.dynamic_ratios.push((t, dynamic_ratio(&pred)?));
            }
            scans.push(LabeledScan {
                cloud,
                pred,
                gt,
                pose: compose(&frame.pose, &extrinsic),
            });
        }
        report.push(sensor.name().to_lowercase(), counts);
        total = total + counts;
    }
    report.push("all", total);

    let cleaned = {
        let mut out = PointCloud::default();
        for s in &scans {
            out.points.extend(
                s.cloud
                    .points
                    .iter()
                    .zip(&s.pred)
                    .filter(|(_, l)| !l.is_dynamic())
                    .map(|(p, _)| s.pose.transform_point(p)),
            );
        }
        out
    };
    match map_voxel_metrics(&cleaned, scans.iter().map(|s| (&s.cloud, &s.gt[..], &s.pose)), voxel_size) {
        Ok(m) => report.map = Some(m),
        Err(Error::UndefinedMetric(why)) => log::info!("map metrics skipped: {why}"),
        Err(e) => return Err(e),
    }
    Ok(report)
}
