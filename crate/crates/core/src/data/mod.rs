//! Datasets: synthetic shape scenes, directory loaders and labeled/unlabeled splits.

mod loader;
mod split;
pub mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::maps::SegSample;

pub use loader::{cityscapes_remap_table, load_segmentation_dataset, write_dataset, CityscapesRemap};
pub use split::{make_splits, Fraction, SplitSpec};
pub use synthetic::{generate_synthetic_dataset, SyntheticConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    VocLayout,
    CityscapesLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub num_classes: usize,
    /// Label value on disk that marks ignored pixels.
    #[serde(default = "default_ignore")]
    pub ignore_index: u8,
}

fn default_ignore() -> u8 {
    crate::maps::IGNORE_INDEX
}

/// In-memory collection of samples sharing one class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&SegSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Samples restricted to `ids`, in the order given.
    pub fn subset(&self, ids: &[String]) -> Vec<SegSample> {
        let index: std::collections::HashMap<&str, &SegSample> =
            self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        ids.iter().filter_map(|id| index.get(id.as_str()).map(|s| (*s).clone())).collect()
    }

    /// Ids whose label map has no supervised pixel (missing or all ignored).
    pub fn unusable_for_supervision(&self) -> Vec<&str> {
        self.samples
            .iter()
            .filter(|s| s.label.as_ref().is_none_or(|l| l.valid_count() == 0))
            .map(|s| s.id.as_str())
            .collect()
    }
}
