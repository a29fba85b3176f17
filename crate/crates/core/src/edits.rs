//! Human corrections to refined annotations, kept as an append-only log.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{LabelValue, MosClass};
use crate::detect::ScanAnnotation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditScope {
    /// Every point carrying this instance id in the frame.
    Instance(u16),
    /// Explicit point indices into the frame's merged scan.
    Points(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRecord {
    pub frame: usize,
    pub scope: EditScope,
    pub class: MosClass,
    #[serde(default)]
    pub note: String,
    /// Seconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: f64,
}

/// Point indices an edit touches in `annotation`, or why it cannot apply.
pub fn resolve_scope(annotation: &ScanAnnotation, scope: &EditScope) -> std::result::Result<Vec<usize>, String> {
    match scope {
        EditScope::Instance(0) => Err("instance 0 is the background and cannot be edited as an instance".into()),
        EditScope::Instance(id) => {
            let hits: Vec<usize> = (0..annotation.labels.len())
                .filter(|&i| annotation.labels[i].instance() == *id)
                .collect();
            if hits.is_empty() {
                Err(format!("frame {} has no instance {id}", annotation.frame))
            } else {
                Ok(hits)
            }
        }
        EditScope::Points(idx) => {
            if idx.is_empty() {
                return Err("empty point list".into());
            }
            match idx.iter().find(|&&i| i as usize >= annotation.labels.len()) {
                Some(bad) => Err(format!(
                    "point {bad} out of range for frame {} ({} points)",
                    annotation.frame,
                    annotation.labels.len()
                )),
                None => Ok(idx.iter().map(|&i| i as usize).collect()),
            }
        }
    }
}

/// Applies one edit in place; instance ids are preserved.
pub fn apply_edit(annotation: &mut ScanAnnotation, edit: &EditRecord) -> std::result::Result<(), String> {
    for i in resolve_scope(annotation, &edit.scope)? {
        let old = annotation.labels[i];
        annotation.labels[i] = LabelValue::new(edit.class, old.instance());
    }
    Ok(())
}

/// Applies edits in list order, so later edits win where they overlap.
/// `annotations` must be indexed by frame.
pub fn apply_edits(annotations: &[ScanAnnotation], edits: &[EditRecord]) -> Result<Vec<ScanAnnotation>> {
    let mut out = annotations.to_vec();
    for (index, edit) in edits.iter().enumerate() {
        let target = out
            .get_mut(edit.frame)
            .filter(|a| a.frame == edit.frame)
            .ok_or_else(|| Error::Edit {
                index,
                reason: format!("frame {} does not exist", edit.frame),
            })?;
        apply_edit(target, edit).map_err(|reason| Error::Edit { index, reason })?;
    }
    Ok(out)
}

/// Reads a JSON-lines edit log; a missing file is an empty log.
pub fn read_edit_log(path: impl AsRef<Path>) -> Result<Vec<EditRecord>> {
    let path = path.as_ref();
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut edits = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let edit = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        edits.push(edit);
    }
    Ok(edits)
}

pub fn append_edit(path: impl AsRef<Path>, edit: &EditRecord) -> Result<()> {
    let mut line = serde_json::to_string(edit).map_err(|e| Error::Config(e.to_string()))?;
    line.push('\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(line.as_bytes())?;
    file.flush()?;
    Ok(())
}
