//! SemanticKITTI-style scans, labels, poses and the per-sensor output layout.
//!
//! Layout of an input or exported dataset directory:
//!
//! ```text
//! <root>/calib.txt                 Tr_<Sensor>: 12 floats (extrinsic into the reference frame)
//! <root>/<Sensor>/velodyne/NNNNNN.bin
//! <root>/<Sensor>/labels/NNNNNN.label
//! <root>/<Sensor>/poses.txt        row-major 3×4 body pose per frame
//! <root>/<Sensor>/times.txt        one timestamp (seconds) per frame
//! ```
//!
//! Exported sequence directories additionally carry their own `calib.txt`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{ByteOrder, LittleEndian};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose};

/// Bytes per scan record: x, y, z, intensity as little-endian `f32`.
pub const SCAN_RECORD_BYTES: usize = 16;

/// Rotation tolerance accepted when parsing pose files.
pub const POSE_ORTHO_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SensorId {
    Aeva,
    Livox,
    Ouster,
    Velodyne,
}

impl SensorId {
    /// Fixed concatenation order used when merging scans.
    pub const ALL: [SensorId; 4] = [
        SensorId::Aeva,
        SensorId::Livox,
        SensorId::Ouster,
        SensorId::Velodyne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SensorId::Aeva => "Aeva",
            SensorId::Livox => "Livox",
            SensorId::Ouster => "Ouster",
            SensorId::Velodyne => "Velodyne",
        }
    }

    pub fn code(self) -> char {
        self.name().chars().next().unwrap()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SensorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SensorId::ALL
            .into_iter()
            .find(|id| id.name().eq_ignore_ascii_case(s) || s.len() == 1 && id.code() == s.chars().next().unwrap().to_ascii_uppercase())
            .ok_or_else(|| Error::Config(format!("unknown sensor `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MosClass {
    Unlabeled,
    Static,
    Dynamic,
}

impl MosClass {
    pub const fn id(self) -> u16 {
        match self {
            MosClass::Unlabeled => 0,
            MosClass::Static => 9,
            MosClass::Dynamic => 251,
        }
    }

    pub fn from_id(id: u16) -> Option<Self> {
        match id {
            0 => Some(MosClass::Unlabeled),
            9 => Some(MosClass::Static),
            251 => Some(MosClass::Dynamic),
            _ => None,
        }
    }
}

/// Raw SemanticKITTI label: class id in the low 16 bits, instance id above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct LabelValue(pub u32);

impl LabelValue {
    pub const UNLABELED: LabelValue = LabelValue(0);
    pub const STATIC: LabelValue = LabelValue(9);
    pub const DYNAMIC: LabelValue = LabelValue(251);

    pub fn new(class: MosClass, instance: u16) -> Self {
        LabelValue(((instance as u32) << 16) | class.id() as u32)
    }

    pub fn class_id(self) -> u16 {
        (self.0 & 0xFFFF) as u16
    }

    /// `None` for class ids outside {0, 9, 251}.
    pub fn class(self) -> Option<MosClass> {
        MosClass::from_id(self.class_id())
    }

    pub fn instance(self) -> u16 {
        (self.0 >> 16) as u16
    }

    pub fn is_dynamic(self) -> bool {
        self.class_id() == MosClass::Dynamic.id()
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

/// Reads a `.bin` scan. Records with non-finite coordinates are dropped and
/// reported through the log.
pub fn read_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    decode_scan(path, &bytes)
}

pub(crate) fn decode_scan(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % SCAN_RECORD_BYTES != 0 {
        let offset = bytes.len() - bytes.len() % SCAN_RECORD_BYTES;
        return Err(Error::format(
            path,
            format!(
                "truncated scan record at byte offset {offset} (length {} is not a multiple of {SCAN_RECORD_BYTES})",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / SCAN_RECORD_BYTES;
    let mut points = Vec::with_capacity(n);
    let mut intensities = Vec::with_capacity(n);
    let mut rejected = 0usize;
    for rec in bytes.chunks_exact(SCAN_RECORD_BYTES) {
        let x = LittleEndian::read_f32(&rec[0..4]);
        let y = LittleEndian::read_f32(&rec[4..8]);
        let z = LittleEndian::read_f32(&rec[8..12]);
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            rejected += 1;
            continue;
        }
        points.push(Point3::new(x as f64, y as f64, z as f64));
        intensities.push(LittleEndian::read_f32(&rec[12..16]));
    }
    if rejected > 0 {
        log::warn!("{}: dropped {rejected} records with non-finite coordinates", path.display());
    }
    PointCloud::with_intensities(points, intensities)
}

pub(crate) fn encode_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = vec![0u8; cloud.len() * SCAN_RECORD_BYTES];
    for (i, rec) in out.chunks_exact_mut(SCAN_RECORD_BYTES).enumerate() {
        let p = &cloud.points[i];
        LittleEndian::write_f32(&mut rec[0..4], p.x as f32);
        LittleEndian::write_f32(&mut rec[4..8], p.y as f32);
        LittleEndian::write_f32(&mut rec[8..12], p.z as f32);
        LittleEndian::write_f32(&mut rec[12..16], cloud.intensity(i));
    }
    out
}

pub fn write_scan(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_scan(cloud))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>, expected_count: usize) -> Result<Vec<LabelValue>> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            path,
            format!("label file length {} is not a multiple of 4", bytes.len()),
        ));
    }
    if bytes.len() / 4 != expected_count {
        return Err(Error::CountMismatch {
            labels: bytes.len() / 4,
            points: expected_count,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| LabelValue(LittleEndian::read_u32(c)))
        .collect())
}

pub fn write_labels(labels: &[LabelValue], path: impl AsRef<Path>) -> Result<()> {
    let mut out = vec![0u8; labels.len() * 4];
    for (l, chunk) in labels.iter().zip(out.chunks_exact_mut(4)) {
        LittleEndian::write_u32(chunk, l.0);
    }
    write_bytes(path.as_ref(), &out)
}

fn parse_floats<const N: usize>(path: &Path, line_no: usize, text: &str) -> Result<[f64; N]> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() != N {
        return Err(Error::format(
            path,
            format!("line {line_no}: expected {N} values, found {}", tokens.len()),
        ));
    }
    let mut out = [0.0; N];
    for (slot, tok) in out.iter_mut().zip(tokens) {
        *slot = tok
            .parse()
            .map_err(|_| Error::format(path, format!("line {line_no}: `{tok}` is not a number")))?;
    }
    Ok(out)
}

fn non_blank_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    Ok(lines)
}

/// One pose per line, row-major 3×4 `[R | t]`.
pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let path = path.as_ref();
    non_blank_lines(path)?
        .into_iter()
        .map(|(no, line)| {
            let v = parse_floats::<12>(path, no, &line)?;
            Pose::from_row_major_3x4(&v, POSE_ORTHO_TOLERANCE)
                .map_err(|e| Error::format(path, format!("line {no}: {e}")))
        })
        .collect()
}

fn format_row(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_poses(poses: &[Pose], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for pose in poses {
        text.push_str(&format_row(&pose.to_row_major_3x4()));
        text.push('\n');
    }
    write_bytes(path.as_ref(), text.as_bytes())
}

pub fn read_times(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    non_blank_lines(path)?
        .into_iter()
        .map(|(no, line)| parse_floats::<1>(path, no, &line).map(|v| v[0]))
        .collect()
}

pub fn write_times(times: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for t in times {
        text.push_str(&format!("{t:e}\n"));
    }
    write_bytes(path.as_ref(), text.as_bytes())
}

/// Parses `Tr_<Sensor>: 12 floats` lines.
pub fn read_calib(path: impl AsRef<Path>) -> Result<BTreeMap<SensorId, Pose>> {
    let path = path.as_ref();
    let mut out = BTreeMap::new();
    for (no, line) in non_blank_lines(path)? {
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::format(path, format!("line {no}: missing `:`")))?;
        let name = key
            .trim()
            .strip_prefix("Tr_")
            .ok_or_else(|| Error::format(path, format!("line {no}: key must start with `Tr_`")))?;
        let sensor: SensorId = name.parse()?;
        let v = parse_floats::<12>(path, no, rest)?;
        let pose = Pose::from_row_major_3x4(&v, POSE_ORTHO_TOLERANCE)
            .map_err(|e| Error::format(path, format!("line {no}: {e}")))?;
        out.insert(sensor, pose);
    }
    Ok(out)
}

pub fn write_calib(extrinsics: &BTreeMap<SensorId, Pose>, path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for (sensor, pose) in extrinsics {
        text.push_str(&format!("Tr_{sensor}: {}\n", format_row(&pose.to_row_major_3x4())));
    }
    write_bytes(path.as_ref(), text.as_bytes())
}

pub fn frame_file_name(index: usize, extension: &str) -> String {
    format!("{index:06}.{extension}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub scan_path: PathBuf,
    pub timestamp: f64,
    /// Body (reference sensor) pose in the world at this scan's timestamp.
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSequence {
    pub frames: Vec<ManifestFrame>,
    /// Transform from this sensor's frame into the reference sensor frame.
    pub extrinsic: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub reference: SensorId,
    pub sensors: BTreeMap<SensorId, SensorSequence>,
}

impl SequenceManifest {
    /// Loads a dataset directory in the layout described in the module docs.
    pub fn load(root: impl AsRef<Path>, reference: SensorId) -> Result<Self> {
        let root = root.as_ref();
        let calib_path = root.join("calib.txt");
        let calib = if calib_path.exists() {
            read_calib(&calib_path)?
        } else {
            BTreeMap::new()
        };
        let mut sensors = BTreeMap::new();
        for sensor in SensorId::ALL {
            let dir = root.join(sensor.name());
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "missing sensor directory {}",
                    dir.display()
                )));
            }
            let poses = read_poses(dir.join("poses.txt"))?;
            let times = read_times(dir.join("times.txt"))?;
            let mut scans: Vec<PathBuf> = match fs::read_dir(dir.join("velodyne")) {
                Ok(entries) => entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                    .collect(),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            scans.sort();
            if scans.len() != poses.len() || scans.len() != times.len() {
                return Err(Error::format(
                    &dir,
                    format!(
                        "{} scans, {} poses and {} timestamps",
                        scans.len(),
                        poses.len(),
                        times.len()
                    ),
                ));
            }
            let frames = scans
                .into_iter()
                .zip(poses)
                .zip(times)
                .map(|((scan_path, pose), timestamp)| ManifestFrame {
                    scan_path,
                    timestamp,
                    pose,
                })
                .collect();
            let extrinsic = calib.get(&sensor).copied();
            sensors.insert(sensor, SensorSequence { frames, extrinsic });
        }
        let manifest = Self { reference, sensors };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sensors.len() != 4 {
            return Err(Error::Config(format!(
                "expected exactly four sensors, found {}",
                self.sensors.len()
            )));
        }
        if !self.sensors.contains_key(&self.reference) {
            return Err(Error::Config(format!("reference sensor {} missing", self.reference)));
        }
        for (sensor, seq) in &self.sensors {
            for w in seq.frames.windows(2) {
                if !(w[1].timestamp > w[0].timestamp) {
                    return Err(Error::Config(format!(
                        "{sensor}: timestamps not strictly increasing ({} then {})",
                        w[0].timestamp, w[1].timestamp
                    )));
                }
            }
            if let Some(missing) = seq.frames.iter().find(|f| !f.scan_path.exists()) {
                return Err(Error::Config(format!(
                    "{sensor}: scan {} does not exist",
                    missing.scan_path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn sequence(&self, sensor: SensorId) -> &SensorSequence {
        &self.sensors[&sensor]
    }

    pub fn reference_frames(&self) -> &[ManifestFrame] {
        &self.sequence(self.reference).frames
    }

    pub fn extrinsics(&self) -> BTreeMap<SensorId, Pose> {
        self.sensors
            .iter()
            .filter_map(|(s, seq)| seq.extrinsic.map(|e| (*s, e)))
            .collect()
    }
}

/// Per-sensor, per-frame labels to export; `None` marks a missing frame.
pub type SensorLabels = BTreeMap<SensorId, Vec<Option<Vec<LabelValue>>>>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub files: Vec<PathBuf>,
}

/// Writes one sequence directory per sensor under `out_dir`. Scans are
/// re-encoded from the manifest, so exported labels stay index-aligned with
/// the exported `.bin` files.
pub fn export_layout(
    manifest: &SequenceManifest,
    labels: &SensorLabels,
    out_dir: impl AsRef<Path>,
) -> Result<ExportManifest> {
    let out_dir = out_dir.as_ref();
    for (sensor, seq) in &manifest.sensors {
        let frame_labels = labels.get(sensor);
        let missing: Vec<usize> = (0..seq.frames.len())
            .filter(|&i| frame_labels.and_then(|l| l.get(i)).is_none_or(|l| l.is_none()))
            .collect();
        if !missing.is_empty() {
            log::error!("{sensor}: labels missing for {} frames", missing.len());
            return Err(Error::MissingLabels(missing));
        }
        if let Some((frame, bad)) = frame_labels.into_iter().flatten().enumerate().find_map(|(i, l)| {
            l.as_ref()
                .and_then(|l| l.iter().find(|v| v.class().is_none()).map(|v| (i, *v)))
        }) {
            return Err(Error::Config(format!(
                "{sensor} frame {frame}: label class id {} is not one of 0, 9, 251",
                bad.class_id()
            )));
        }
    }

    let mut written = Vec::new();
    for (sensor, seq) in &manifest.sensors {
        let seq_dir = out_dir.join(sensor.name());
        fs::create_dir_all(&seq_dir)?;
        let frame_labels = &labels[sensor];
        for (i, frame) in seq.frames.iter().enumerate() {
            let cloud = read_scan(&frame.scan_path)?;
            let l = frame_labels[i].as_ref().unwrap();
            if l.len() != cloud.len() {
                return Err(Error::CountMismatch {
                    labels: l.len(),
                    points: cloud.len(),
                });
            }
            let scan_path = seq_dir.join("velodyne").join(frame_file_name(i, "bin"));
            let label_path = seq_dir.join("labels").join(frame_file_name(i, "label"));
            write_scan(&cloud, &scan_path)?;
            write_labels(l, &label_path)?;
            written.push(scan_path);
            written.push(label_path);
        }
        let poses: Vec<Pose> = seq.frames.iter().map(|f| f.pose).collect();
        let poses_path = seq_dir.join("poses.txt");
        write_poses(&poses, &poses_path)?;
        let calib_path = seq_dir.join("calib.txt");
        let calib: BTreeMap<SensorId, Pose> = if seq.frames.is_empty() {
            BTreeMap::new()
        } else {
            seq.extrinsic.map(|e| (*sensor, e)).into_iter().collect()
        };
        write_calib(&calib, &calib_path)?;
        written.push(poses_path);
        written.push(calib_path);
    }
    Ok(ExportManifest { files: written })
}

/// Contiguous train/val/test partition of a frame sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<Range<usize>>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitAssignment {
    pub fn train_len(&self) -> usize {
        self.train.iter().map(|r| r.len()).sum()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.train.iter().flat_map(|r| r.clone()).collect()
    }
}

pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (0.68, 0.16, 0.16);

/// Train and val take `floor(ratio · N)` frames; test takes the remainder.
/// Val/test blocks start at their anchors (shifted back to fit), or follow
/// the training block at the end of the sequence when no anchors are given.
pub fn make_splits(
    frame_count: usize,
    ratios: (f64, f64, f64),
    val_anchor: Option<usize>,
    test_anchor: Option<usize>,
) -> Result<SplitAssignment> {
    let (r_train, r_val, r_test) = ratios;
    if [r_train, r_val, r_test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (r_train + r_val + r_test - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid("ratios", "must be non-negative and sum to 1"));
    }
    let n = frame_count;
    let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let n_train = floor(r_train);
    let n_val = floor(r_val);
    let n_test = n - n_train - n_val;

    let place = |anchor: Option<usize>, len: usize, default: usize| -> Result<Range<usize>> {
        let start = match anchor {
            Some(a) if a >= n && n > 0 => {
                return Err(Error::InvalidAnchor(format!("anchor {a} outside 0..{n}")))
            }
            Some(a) => a.min(n - len),
            None => default,
        };
        Ok(start..start + len)
    };
    let (val, test) = match (val_anchor, test_anchor) {
        (None, None) => (n_train..n_train + n_val, n_train + n_val..n),
        _ => (
            place(val_anchor, n_val, n_train)?,
            place(test_anchor, n_test, n_train + n_val)?,
        ),
    };
    if val.start < test.end && test.start < val.end {
        return Err(Error::InvalidAnchor(format!(
            "validation block {val:?} overlaps test block {test:?}"
        )));
    }
    let (first, second) = if val.start <= test.start {
        (&val, &test)
    } else {
        (&test, &val)
    };
    let train: Vec<Range<usize>> = [0..first.start, first.end..second.start, second.end..n]
        .into_iter()
        .filter(|r| !r.is_empty())
        .collect();
    Ok(SplitAssignment { train, val, test })
}

/// Writes the splits as `split first last_exclusive` lines.
pub fn write_splits(splits: &SplitAssignment, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for r in &splits.train {
        writeln!(w, "train {} {}", r.start, r.end)?;
    }
    writeln!(w, "val {} {}", splits.val.start, splits.val.end)?;
    writeln!(w, "test {} {}", splits.test.start, splits.test.end)?;
    w.flush()?;
    Ok(())
}
