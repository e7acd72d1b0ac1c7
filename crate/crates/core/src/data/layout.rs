use std::path::{Path, PathBuf};

use super::bytes::write_file;
use super::features::{read_feature_file, write_feature_file};
use super::labels::{read_labels, read_mapping, write_labels, write_mapping};
use super::{Dataset, Sample};
use crate::error::{Error, Result};

pub const MAPPING_FILE: &str = "mapping.txt";
pub const FEATURES_DIR: &str = "features";
pub const LABELS_DIR: &str = "groundTruth";
pub const SPLITS_DIR: &str = "splits";

pub fn split_path(root: &Path, fold: usize) -> PathBuf {
    root.join(SPLITS_DIR).join(format!("fold{fold}.txt"))
}

/// Where the pieces of a dataset live. [`DataPaths::under`] gives the
/// standard layout below one root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPaths {
    pub features: PathBuf,
    pub labels: PathBuf,
    pub mapping: PathBuf,
}

impl DataPaths {
    pub fn under(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref();
        Self {
            features: root.join(FEATURES_DIR),
            labels: root.join(LABELS_DIR),
            mapping: root.join(MAPPING_FILE),
        }
    }
}

/// Feature file of `id` in `dir`, binary preferred over CSV.
pub fn feature_path(dir: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["bin", "csv"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!(
        "no feature file for {id} in {}",
        dir.display()
    )))
}

/// Every video id with a feature file in `dir`, sorted.
pub fn feature_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if matches!(ext, Some("bin" | "csv")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    ids.dedup();
    Ok(ids)
}

/// Loads the listed videos, or every video when `ids` is `None`.
pub fn load_dataset(root: impl AsRef<Path>, ids: Option<&[String]>) -> Result<Dataset> {
    load_dataset_from(&DataPaths::under(root), ids)
}

/// [`load_dataset`] with explicit locations.
pub fn load_dataset_from(paths: &DataPaths, ids: Option<&[String]>) -> Result<Dataset> {
    let mapping = read_mapping(&paths.mapping)?;
    let ids = match ids {
        Some(ids) => ids.to_vec(),
        None => feature_ids(&paths.features)?,
    };
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let features = read_feature_file(feature_path(&paths.features, &id)?)?;
        let label_path = paths.labels.join(format!("{id}.txt"));
        let labels = read_labels(&label_path, &mapping)?;
        if labels.len() != features.shape()[1] {
            return Err(Error::Data(format!(
                "{id}: paired-length mismatch, {} feature frames vs {} labels",
                features.shape()[1],
                labels.len()
            )));
        }
        samples.push(Sample::new(id, features, labels)?);
    }
    Dataset::new(mapping, samples)
}

/// Video ids listed in a split manifest, one per line.
pub fn read_split(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Which side of a cross-validation fold to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldSubset {
    /// Every video not held out by the fold.
    Train,
    /// The fold's held-out videos.
    Test,
}

/// Ids for one side of fold `fold` (1-based). Fold 0 means "no split": every
/// video, for both sides.
pub fn fold_ids(root: impl AsRef<Path>, fold: usize, subset: FoldSubset) -> Result<Vec<String>> {
    let root = root.as_ref();
    let all = feature_ids(&root.join(FEATURES_DIR))?;
    if fold == 0 {
        return Ok(all);
    }
    let held = read_split(split_path(root, fold))?;
    if let Some(unknown) = held.iter().find(|id| !all.contains(id)) {
        return Err(Error::Data(format!(
            "fold {fold} lists unknown video {unknown}"
        )));
    }
    Ok(match subset {
        FoldSubset::Test => held,
        FoldSubset::Train => all.into_iter().filter(|id| !held.contains(id)).collect(),
    })
}

/// Writes a dataset in the directory layout, with one manifest per fold.
pub fn write_dataset(root: impl AsRef<Path>, ds: &Dataset, folds: &[Vec<String>]) -> Result<()> {
    let root = root.as_ref();
    write_mapping(root.join(MAPPING_FILE), &ds.mapping)?;
    for s in &ds.samples {
        write_feature_file(
            root.join(FEATURES_DIR).join(format!("{}.bin", s.id)),
            &s.features,
        )?;
        write_labels(
            root.join(LABELS_DIR).join(format!("{}.txt", s.id)),
            &s.labels,
            &ds.mapping,
        )?;
    }
    for (k, ids) in folds.iter().enumerate() {
        let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
        write_file(&split_path(root, k + 1), text.as_bytes())?;
    }
    Ok(())
}
