use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::chip::Dataset;
use crate::error::{Error, Result};

/// Class-disjoint partition of a dataset into base (train) and novel (test)
/// classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_classes: BTreeSet<usize>,
    pub test_classes: BTreeSet<usize>,
    pub seed: u64,
}

/// Shuffle the sorted class ids with a seeded generator; the first half
/// (rounded up) becomes the training side.
pub fn make_split(class_ids: &BTreeSet<usize>, seed: u64) -> Result<DatasetSplit> {
    if class_ids.len() < 2 {
        return Err(Error::InsufficientClasses(class_ids.len()));
    }
    let mut order: Vec<usize> = class_ids.iter().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = order.len().div_ceil(2);
    Ok(DatasetSplit {
        train_classes: order[..n_train].iter().copied().collect(),
        test_classes: order[n_train..].iter().copied().collect(),
        seed,
    })
}

/// On-disk record of a split, by class name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn from_split(split: &DatasetSplit, dataset: &Dataset) -> Self {
        let names = |ids: &BTreeSet<usize>| ids.iter().map(|&i| dataset.classes[i].clone()).collect();
        SplitManifest {
            seed: split.seed,
            train: names(&split.train_classes),
            test: names(&split.test_classes),
        }
    }

    pub fn to_split(&self, dataset: &Dataset) -> Result<DatasetSplit> {
        let ids = |names: &[String]| -> Result<BTreeSet<usize>> {
            names
                .iter()
                .map(|n| {
                    dataset
                        .class_id(n)
                        .ok_or_else(|| Error::Config(format!("split names class {n:?} not in dataset")))
                })
                .collect()
        };
        let split = DatasetSplit {
            train_classes: ids(&self.train)?,
            test_classes: ids(&self.test)?,
            seed: self.seed,
        };
        if !split.train_classes.is_disjoint(&split.test_classes) {
            return Err(Error::Config("train and test classes overlap".into()));
        }
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::from("# few-shot SAR class split\n");
        text.push_str(&toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))?);
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}
