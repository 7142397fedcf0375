use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormWeight,
    NormBias,
    /// Normalization running statistics; persisted but never optimized.
    RunningStat,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        self != ParamKind::RunningStat
    }

    pub fn is_norm(self) -> bool {
        matches!(self, ParamKind::NormWeight | ParamKind::NormBias)
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor>,
}

/// Flat, ordered collection of named parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.to_string(), kind, value: Arc::new(value) });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arc<Tensor> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Replace a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::Shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access for in-place updates (copies if the value is shared).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.iter().filter(|(_, p)| p.kind.is_trainable())
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.trainable().map(|(_, p)| p.value.numel()).sum()
    }

    /// Order-sensitive FNV-1a hash over names and exact value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.params {
            feed(p.name.as_bytes());
            for v in p.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// How a convolution weight is drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConvInit {
    /// Normal with std `sqrt(2 / fan_out)`, `fan_out = out * kh * kw`.
    KaimingFanOut,
    Normal(f32),
    Zeros,
}

/// Hierarchical parameter registration with a seeded initializer stream.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
    path: Vec<String>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self::extend(ParamStore::new(), seed)
    }

    /// Keep registering into an existing store.
    pub fn extend(store: ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), path: Vec::new() }
    }

    /// Independent initializer stream for a sub-component.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.path.push(name.to_string());
        let out = f(self);
        self.path.pop();
        out
    }

    pub fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.path.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn add(&mut self, leaf: &str, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        let name = self.full_name(leaf);
        self.store.add(&name, kind, value)
    }

    pub fn conv_weight(&mut self, leaf: &str, shape: [usize; 4], init: ConvInit) -> Result<ParamId> {
        let [o, _, kh, kw] = shape;
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            ConvInit::Zeros => vec![0.0; numel],
            ConvInit::KaimingFanOut | ConvInit::Normal(_) => {
                let std = match init {
                    ConvInit::Normal(s) => s,
                    _ => (2.0 / (o * kh * kw) as f32).sqrt(),
                };
                let dist = Normal::new(0.0f32, std).map_err(|e| TensorError::Invalid(e.to_string()))?;
                (0..numel).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        self.add(leaf, ParamKind::Weight, Tensor::from_vec(&shape, data)?)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }
}
