//! The `dataset` config section.

use std::path::PathBuf;
use std::sync::Arc;

use serde::Deserialize;
use serde_json::Value;

use super::{
    build_pipeline, generate_synthetic_dataset, BatchSampler, CollateOptions, DataLoader, DatasetDescriptor,
    DatasetError, Result, SegDataset, SyntheticSpec, DESCRIPTOR_FILE,
};
use crate::registry::{parse_params, Category, Registry};

/// ```json
/// "dataset": {
///   "source": {"type": "synthetic", "root": "data/shapes", "seed": 0, "count": 500, "size": [64, 64], "num_classes": 4},
///   "batch_size": 8,
///   "train_pipeline": [{"type": "random_flip"}, {"type": "normalize"}],
///   "test_pipeline": [{"type": "normalize"}]
/// }
/// ```
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: Value,
    #[serde(default = "default_train")]
    pub train_split: String,
    #[serde(default = "default_val")]
    pub val_split: String,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "yes")]
    pub shuffle: bool,
    /// Keep decoded samples in memory.
    #[serde(default = "yes")]
    pub cache: bool,
    #[serde(default)]
    pub train_pipeline: Vec<Value>,
    #[serde(default)]
    pub test_pipeline: Vec<Value>,
    #[serde(default)]
    pub pad_value: f32,
}

fn default_train() -> String {
    "train".into()
}
fn default_val() -> String {
    "val".into()
}
fn default_batch() -> usize {
    8
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FolderParams {
    root: PathBuf,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticParams {
    root: PathBuf,
    #[serde(default)]
    seed: u64,
    count: usize,
    size: (usize, usize),
    num_classes: usize,
    #[serde(default)]
    val_count: Option<usize>,
}

pub type SourceRegistry = Registry<(), PathBuf>;

/// Dataset sources resolve to a root directory. `folder` points at an
/// existing tree; `synthetic` generates one on first use.
pub fn source_registry() -> SourceRegistry {
    let mut r = Registry::new(Category::Dataset);
    r.register("folder", |_, p| Ok(parse_params::<FolderParams>(p)?.root)).unwrap();
    r.register("synthetic", |_, p| {
        let p: SyntheticParams = parse_params(p)?;
        if !p.root.join(DESCRIPTOR_FILE).exists() {
            let spec = SyntheticSpec { val_count: p.val_count, ..SyntheticSpec::new(p.seed, p.count, p.size, p.num_classes) };
            generate_synthetic_dataset(&spec, &p.root)?;
        }
        Ok(p.root)
    })
    .unwrap();
    r
}

impl DatasetSection {
    pub fn parse(node: &Value) -> Result<Self> {
        let s: Self =
            serde_json::from_value(node.clone()).map_err(|e| DatasetError::BadDescriptor(format!("dataset section: {e}")))?;
        if s.batch_size == 0 {
            return Err(DatasetError::Invalid("batch_size must be positive".into()));
        }
        Ok(s)
    }

    pub fn root(&self) -> Result<PathBuf> {
        source_registry().build(&mut (), &self.source).map_err(|e| DatasetError::BadDescriptor(e.to_string()))
    }

    fn open(&self, split: &str, pipeline: &[Value]) -> Result<SegDataset> {
        let desc = DatasetDescriptor::open(self.root()?, split)?;
        let ds = SegDataset::new(desc, build_pipeline(pipeline)?);
        if self.cache {
            ds.with_cache()
        } else {
            Ok(ds)
        }
    }

    pub fn train_set(&self) -> Result<SegDataset> {
        self.open(&self.train_split, &self.train_pipeline)
    }

    pub fn val_set(&self) -> Result<SegDataset> {
        self.open(&self.val_split, &self.test_pipeline)
    }

    /// Shuffled loader over the training split.
    pub fn train_loader(&self, seed: u64, size_divisor: usize) -> Result<DataLoader> {
        let ds = Arc::new(self.train_set()?);
        let sampler = BatchSampler::new(ds.len(), self.batch_size, self.shuffle, seed)?;
        let collate = CollateOptions { pad_value: self.pad_value, ignore_index: ds.descriptor.ignore_index, size_divisor };
        Ok(DataLoader::new(ds, sampler, collate, self.workers))
    }
}
