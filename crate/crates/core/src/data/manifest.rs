//! JSON-lines manifests.
//!
//! An optional first line `{"classes": [...], "split": "train"}` names the
//! classes and split; every other line is one bag record
//! `{"id": "...", "labels": [1, -1, ...], "file": "bags/train/x.avb"}` with
//! `file` relative to the manifest's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{format, Dataset, LabelVector, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub classes: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub labels: LabelVector,
    pub file: PathBuf,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Header(ManifestHeader),
    Record(ManifestRecord),
}

/// Loads every bag listed in the manifest, in listed order, and validates the
/// result as one [`Dataset`].
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest_err = |line: usize, message: String| Error::Manifest {
        path: manifest_path.to_path_buf(),
        line,
        message,
    };

    let mut header = None;
    let mut bags = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let line: Line =
            serde_json::from_str(raw).map_err(|e| manifest_err(line_no, e.to_string()))?;
        match line {
            Line::Header(h) => {
                if header.is_some() || !bags.is_empty() {
                    return Err(manifest_err(line_no, "header must be the first line".into()));
                }
                header = Some(h);
            }
            Line::Record(rec) => {
                let wrap = |source: Error| Error::Bag {
                    id: rec.id.clone(),
                    source: Box::new(source),
                };
                let mut bag = format::read_bag(root.join(&rec.file)).map_err(wrap)?;
                if bag.labels != rec.labels {
                    return Err(wrap(Error::invalid(
                        "labels in manifest disagree with bag file",
                    )));
                }
                bag.id = rec.id;
                bags.push(bag);
            }
        }
    }
    if bags.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let num_classes = bags[0].num_classes();
    let (class_names, split) = match header {
        Some(h) => (h.classes, h.split),
        None => {
            let split = manifest_path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .unwrap_or(Split::Test);
            (Dataset::default_class_names(num_classes), split)
        }
    };
    Dataset::new(bags, class_names, split)
}

/// Writes `<dir>/<split>.jsonl` and one `AVB1` file per bag under
/// `<dir>/bags/<split>/`. Returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let split = dataset.split().name();
    let bag_dir = dir.join("bags").join(split);
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;

    let mut out = Vec::new();
    let header = ManifestHeader {
        classes: dataset.class_names().to_vec(),
        split: dataset.split(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for bag in dataset.bags() {
        let file = PathBuf::from("bags").join(split).join(format!("{}.avb", bag.id));
        format::write_bag(bag, dir.join(&file))?;
        let record = ManifestRecord {
            id: bag.id.clone(),
            labels: bag.labels.clone(),
            file,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.push(b'\n');
    }
    let manifest = dir.join(format!("{split}.jsonl"));
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(&out).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
