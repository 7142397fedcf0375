//! Batching: padding collate, deterministic epoch shuffling and an
//! order-preserving parallel loader.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ssseg_nn::Tensor;

use super::{mix_seed, DatasetError, Result, SampleMeta, SegDataset, SegSample};

/// `images` is `N×3×H×W`; `masks` is `N×H×W` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Vec<u8>,
    pub metas: Vec<SampleMeta>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    /// `(H, W)`.
    pub fn size(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }

    pub fn mask(&self, i: usize) -> &[u8] {
        let (h, w) = self.size();
        &self.masks[i * h * w..(i + 1) * h * w]
    }

    /// Samples `start..start+len` as their own batch.
    pub fn slice(&self, start: usize, len: usize) -> Batch {
        let (h, w) = self.size();
        let parts: Vec<Tensor> = (start..start + len).map(|i| self.images.select_batch(i)).collect();
        Batch {
            images: Tensor::stack_batch(&parts).expect("equal shapes"),
            masks: self.masks[start * h * w..(start + len) * h * w].to_vec(),
            metas: self.metas[start..start + len].to_vec(),
        }
    }

    /// Split into `n` contiguous shards whose sizes differ by at most one.
    pub fn shards(&self, n: usize) -> Vec<Batch> {
        let n = n.clamp(1, self.len().max(1));
        let (q, r) = (self.len() / n, self.len() % n);
        let mut start = 0;
        (0..n)
            .map(|i| {
                let len = q + usize::from(i < r);
                let b = self.slice(start, len);
                start += len;
                b
            })
            .collect()
    }
}

fn round_up(v: usize, divisor: usize) -> usize {
    v.div_ceil(divisor.max(1)) * divisor.max(1)
}

/// Stack samples, padding bottom/right to the largest size rounded up to a
/// multiple of `size_divisor`.
pub fn collate(samples: &[SegSample], pad_value: f32, ignore_index: u8, size_divisor: usize) -> Result<Batch> {
    if samples.is_empty() {
        return Err(DatasetError::EmptyBatch);
    }
    let h = round_up(samples.iter().map(|s| s.image.height).max().unwrap(), size_divisor);
    let w = round_up(samples.iter().map(|s| s.image.width).max().unwrap(), size_divisor);
    let n = samples.len();
    let mut images = vec![pad_value; n * 3 * h * w];
    let mut masks = vec![ignore_index; n * h * w];
    for (i, s) in samples.iter().enumerate() {
        s.check_consistent()?;
        let (sh, sw) = s.size();
        for c in 0..3 {
            let plane = &mut images[(i * 3 + c) * h * w..(i * 3 + c + 1) * h * w];
            for y in 0..sh {
                for x in 0..sw {
                    plane[y * w + x] = s.image.data[(y * sw + x) * 3 + c];
                }
            }
        }
        for y in 0..sh {
            let dst = (i * h + y) * w;
            masks[dst..dst + sw].copy_from_slice(&s.mask.data[y * sw..(y + 1) * sw]);
        }
    }
    Ok(Batch {
        images: Tensor::from_vec(&[n, 3, h, w], images).expect("sized above"),
        masks,
        metas: samples.iter().map(|s| s.meta.clone()).collect(),
    })
}

/// Position of a sampler in its (epoch, within-epoch) stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub epoch: u64,
    pub cursor: usize,
}

/// Endless stream of index batches. Each epoch is a fresh permutation
/// seeded by `(seed, epoch)`; the incomplete tail of an epoch is dropped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    state: SamplerState,
    order: Vec<usize>,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > len {
            return Err(DatasetError::Invalid(format!("batch size {batch_size} for a split of {len} samples")));
        }
        let mut s = Self { len, batch_size, shuffle, seed, state: SamplerState::default(), order: Vec::new() };
        s.order = s.epoch_order(0);
        Ok(s)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        if self.shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, epoch])));
        }
        order
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    pub fn set_state(&mut self, state: SamplerState) {
        if state.epoch != self.state.epoch || self.order.is_empty() {
            self.order = self.epoch_order(state.epoch);
        }
        self.state = state;
    }

    /// Next batch as `(dataset index, transform seed)` pairs. The seed is
    /// a function of the sampler seed and stream position only.
    pub fn next_indices(&mut self) -> Vec<(usize, u64)> {
        if self.state.cursor + self.batch_size > self.len {
            self.set_state(SamplerState { epoch: self.state.epoch + 1, cursor: 0 });
        }
        let SamplerState { epoch, cursor } = self.state;
        let out = (cursor..cursor + self.batch_size)
            .map(|p| (self.order[p], mix_seed(&[self.seed, epoch, p as u64, 0x5eed])))
            .collect();
        self.state.cursor += self.batch_size;
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollateOptions {
    pub pad_value: f32,
    pub ignore_index: u8,
    pub size_divisor: usize,
}

/// Loads, transforms and collates the sampler's batches. Samples are
/// prepared on up to `workers` threads and assembled in index order.
pub struct DataLoader {
    dataset: Arc<SegDataset>,
    sampler: BatchSampler,
    collate: CollateOptions,
    workers: usize,
}

impl DataLoader {
    pub fn new(dataset: Arc<SegDataset>, sampler: BatchSampler, collate: CollateOptions, workers: usize) -> Self {
        Self { dataset, sampler, collate, workers: workers.max(1) }
    }

    pub fn sampler(&self) -> &BatchSampler {
        &self.sampler
    }

    pub fn sampler_mut(&mut self) -> &mut BatchSampler {
        &mut self.sampler
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let picks = self.sampler.next_indices();
        let samples = load_ordered(&self.dataset, &picks, self.workers)?;
        let o = self.collate;
        collate(&samples, o.pad_value, o.ignore_index, o.size_divisor)
    }
}

/// `dataset.get` for every pick, results in pick order.
pub fn load_ordered(dataset: &SegDataset, picks: &[(usize, u64)], workers: usize) -> Result<Vec<SegSample>> {
    if workers <= 1 || picks.len() <= 1 {
        return picks.iter().map(|&(i, s)| dataset.get(i, s)).collect();
    }
    let chunk = picks.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = picks
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&(i, s)| dataset.get(i, s)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(picks.len());
        for h in handles {
            out.extend(h.join().expect("loader worker panicked")?);
        }
        Ok(out)
    })
}
