//! Dataset directories: one subdirectory per class holding chip files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::chip::Dataset;
use super::raster::{encode_array, load_chip, ARRAY_EXTENSION};
use crate::error::{Error, Result};

pub const DATASET_MANIFEST: &str = "dataset.toml";

/// Summary written next to an ingested or generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub origin: String,
    pub chip_size: usize,
    pub interpolation: String,
    pub normalization: String,
    pub counts: BTreeMap<String, usize>,
    #[serde(default)]
    pub degenerate_chips: usize,
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| !n.starts_with('.'))
        })
        .collect();
    entries.sort();
    Ok(entries)
}

fn files_recursive(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for p in read_dir_sorted(dir)? {
        if p.is_dir() {
            files_recursive(&p, out)?;
        } else if p.is_file() {
            out.push(p);
        }
    }
    Ok(())
}

/// Load every chip under `dir/<class>/...`. Class ids follow the sorted
/// order of the class directory names.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = read_dir_sorted(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::InsufficientData(format!("{} has no class directories", dir.display())));
    }
    let names = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let mut dataset = Dataset::new(names);
    for (class_id, class_dir) in class_dirs.iter().enumerate() {
        let mut files = Vec::new();
        files_recursive(class_dir, &mut files)?;
        for f in files {
            dataset.insert(load_chip(&f, class_id)?)?;
        }
    }
    Ok(dataset)
}

/// Write a dataset as portable array files plus a manifest.
pub fn save_dataset(dataset: &Dataset, dir: &Path, origin: &str) -> Result<DatasetManifest> {
    let mut degenerate = 0;
    for (class_id, chips) in &dataset.chips {
        let name = &dataset.classes[*class_id];
        let class_dir = dir.join(name);
        std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        for (i, chip) in chips.iter().enumerate() {
            degenerate += usize::from(chip.degenerate_range);
            let path = class_dir.join(format!("{i:05}.{ARRAY_EXTENSION}"));
            std::fs::write(&path, encode_array(chip, name)).map_err(|e| Error::io(&path, e))?;
        }
    }
    let manifest = DatasetManifest {
        origin: origin.to_string(),
        chip_size: super::chip::CHIP_SIZE,
        interpolation: "bilinear".into(),
        normalization: "per-chip min-max".into(),
        counts: dataset.counts(),
        degenerate_chips: degenerate,
    };
    let path = dir.join(DATASET_MANIFEST);
    let text = toml::to_string(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Convert a directory of raw chips into a normalized array-file dataset.
pub fn ingest(src: &Path, out: &Path) -> Result<DatasetManifest> {
    let dataset = load_dataset(src)?;
    save_dataset(&dataset, out, &format!("ingest:{}", src.display()))
}
