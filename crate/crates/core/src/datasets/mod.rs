//! Segmentation samples: on-disk layout, loading, transforms and batching.
//!
//! A dataset root holds
//!
//! ```text
//! meta.json             descriptor (classes, ignore index, palette, splits)
//! images/<id>.png       RGB image
//! annotations/<id>.png  8-bit single-channel class-index mask
//! ```

mod builder;
mod loader;
pub mod png_io;
pub mod synthetic;
pub mod transforms;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use builder::{source_registry, DatasetSection};
pub use loader::{collate, load_ordered, Batch, BatchSampler, CollateOptions, DataLoader, SamplerState};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};
pub use transforms::{apply_pipeline, build_pipeline, Transform};

pub const DEFAULT_IGNORE_INDEX: u8 = 255;
pub const DESCRIPTOR_FILE: &str = "meta.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt sample {path}: {reason}")]
    CorruptSample { path: String, reason: String },
    #[error("index {index} out of range for split of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("bad descriptor: {0}")]
    BadDescriptor(String),
    #[error("bad pipeline: {0}")]
    BadPipeline(String),
    #[error("cannot collate an empty batch")]
    EmptyBatch,
    #[error("mask value {value} is neither a class in 0..{num_classes} nor the ignore index")]
    LabelOutOfRange { value: u8, num_classes: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Float image, `H×W×3`, channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3, "image buffer size");
        Self { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Class-index mask, `H×W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "mask buffer size");
        Self { height, width, data }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub original_size: (usize, usize),
    pub current_size: (usize, usize),
    /// Top-left corner of the last random crop, `(y, x)`.
    pub crop_offset: Option<(usize, usize)>,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Image,
    pub mask: Mask,
    pub meta: SampleMeta,
}

impl SegSample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.height, self.image.width)
    }

    pub fn check_consistent(&self) -> Result<()> {
        if (self.image.height, self.image.width) != (self.mask.height, self.mask.width) {
            return Err(DatasetError::CorruptSample {
                path: self.meta.id.clone(),
                reason: format!(
                    "image {}x{} vs mask {}x{}",
                    self.image.height, self.image.width, self.mask.height, self.mask.width
                ),
            });
        }
        Ok(())
    }

    /// Check that every mask value is a class or the ignore index.
    pub fn check_labels(&self, num_classes: usize, ignore_index: u8) -> Result<()> {
        match self.mask.data.iter().find(|&&v| v != ignore_index && v as usize >= num_classes) {
            Some(&value) => Err(DatasetError::LabelOutOfRange { value, num_classes }),
            None => Ok(()),
        }
    }
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorFile {
    pub num_classes: usize,
    pub ignore_index: u8,
    pub palette: Vec<[u8; 3]>,
    pub class_names: Vec<String>,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DescriptorFile {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if !(1..=255).contains(&k) {
            return Err(DatasetError::BadDescriptor(format!("num_classes {k} not in 1..=255")));
        }
        if self.palette.len() != k || self.class_names.len() != k {
            return Err(DatasetError::BadDescriptor(format!(
                "{k} classes but {} palette entries and {} names",
                self.palette.len(),
                self.class_names.len()
            )));
        }
        if (self.ignore_index as usize) < k {
            return Err(DatasetError::BadDescriptor(format!(
                "ignore_index {} collides with a class index",
                self.ignore_index
            )));
        }
        Ok(())
    }
}

/// One split of an on-disk dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetDescriptor {
    pub root: PathBuf,
    pub split: String,
    pub num_classes: usize,
    pub ignore_index: u8,
    pub palette: Vec<[u8; 3]>,
    pub class_names: Vec<String>,
    pub ids: Vec<String>,
}

impl DatasetDescriptor {
    pub fn open(root: impl AsRef<Path>, split: &str) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(DESCRIPTOR_FILE);
        let text = fs::read_to_string(&path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
        let file: DescriptorFile =
            serde_json::from_str(&text).map_err(|e| DatasetError::BadDescriptor(format!("{}: {e}", path.display())))?;
        file.validate()?;
        let ids = file
            .splits
            .get(split)
            .cloned()
            .ok_or_else(|| DatasetError::BadDescriptor(format!("no split `{split}` in {}", path.display())))?;
        Ok(Self {
            root,
            split: split.to_string(),
            num_classes: file.num_classes,
            ignore_index: file.ignore_index,
            palette: file.palette,
            class_names: file.class_names,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn annotation_path(&self, id: &str) -> PathBuf {
        self.root.join("annotations").join(format!("{id}.png"))
    }
}

/// Decode sample `index` of the split: image scaled to `[0, 1]`, mask raw.
pub fn load_sample(desc: &DatasetDescriptor, index: usize) -> Result<SegSample> {
    let id = desc.ids.get(index).ok_or(DatasetError::IndexOutOfRange { index, len: desc.len() })?;
    let img_path = desc.image_path(id);
    let ann_path = desc.annotation_path(id);
    let rgb = png_io::read_rgb(&img_path)?;
    let ann = png_io::read_index(&ann_path)?;
    if (rgb.height, rgb.width) != (ann.height, ann.width) {
        return Err(DatasetError::CorruptSample {
            path: ann_path.display().to_string(),
            reason: format!("annotation {}x{} does not match image {}x{}", ann.height, ann.width, rgb.height, rgb.width),
        });
    }
    let size = (rgb.height, rgb.width);
    Ok(SegSample {
        image: Image::new(rgb.height, rgb.width, rgb.data.iter().map(|&v| v as f32 / 255.0).collect()),
        mask: Mask::new(ann.height, ann.width, ann.data),
        meta: SampleMeta { id: id.clone(), original_size: size, current_size: size, crop_offset: None, flipped: false },
    })
}

/// A split plus its transform pipeline.
pub struct SegDataset {
    pub descriptor: DatasetDescriptor,
    pipeline: Vec<Box<dyn Transform>>,
    cache: Option<Vec<SegSample>>,
}

impl SegDataset {
    pub fn new(descriptor: DatasetDescriptor, pipeline: Vec<Box<dyn Transform>>) -> Self {
        Self { descriptor, pipeline, cache: None }
    }

    /// Decode every sample once and keep it in memory.
    pub fn with_cache(mut self) -> Result<Self> {
        let samples = (0..self.descriptor.len()).map(|i| load_sample(&self.descriptor, i)).collect::<Result<_>>()?;
        self.cache = Some(samples);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.descriptor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptor.is_empty()
    }

    pub fn raw(&self, index: usize) -> Result<SegSample> {
        match &self.cache {
            Some(c) => c.get(index).cloned().ok_or(DatasetError::IndexOutOfRange { index, len: c.len() }),
            None => load_sample(&self.descriptor, index),
        }
    }

    /// Load and transform sample `index`; randomness comes only from `seed`.
    pub fn get(&self, index: usize, seed: u64) -> Result<SegSample> {
        let sample = self.raw(index)?;
        let out = apply_pipeline(sample, &self.pipeline, seed)?;
        out.check_labels(self.descriptor.num_classes, self.descriptor.ignore_index)?;
        Ok(out)
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e3779b97f4a7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        h = z ^ (z >> 31);
    }
    h
}
