//! Dataset ingestion, preprocessing and deterministic batching.

mod augment;
mod csv;
mod idx;
mod sobel;
mod synth;

pub use augment::{augment, AugmentConfig};
pub use csv::{load_csv, save_csv};
pub use idx::load_idx;
pub use sobel::sobel_preprocess;
pub use synth::{make_blobs, make_glyphs};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Vector,
    Image,
}

/// Uniformly shaped samples with optional ground-truth labels. Labels are
/// only ever consulted for evaluation, never by training.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Tensor>,
    labels: Option<Vec<usize>>,
    kind: DataKind,
}

impl Dataset {
    pub fn new(samples: Vec<Tensor>, labels: Option<Vec<usize>>, kind: DataKind) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("dataset has no samples"));
        }
        let shape = samples[0].shape().to_vec();
        if samples.iter().any(|s| s.shape() != shape) {
            return Err(Error::data("dataset samples have inhomogeneous shapes"));
        }
        if let Some(l) = &labels {
            if l.len() != samples.len() {
                return Err(Error::data(format!(
                    "{} labels for {} samples",
                    l.len(),
                    samples.len()
                )));
            }
        }
        Ok(Dataset { samples, labels, kind })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.samples[0].shape()
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Tensor {
        &self.samples[i]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Replaces every sample through `f` (e.g. Sobel preprocessing).
    pub fn map_samples(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Dataset> {
        let samples: Result<Vec<Tensor>> = self.samples.iter().map(f).collect();
        Dataset::new(samples?, self.labels.clone(), self.kind)
    }

    /// Stacks the indexed samples into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i]).collect();
        Tensor::stack(&refs)
    }

    pub fn labels_for(&self, indices: &[usize]) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Epoch-deterministic shuffle; a final short batch is dropped because
    /// the batch statistics pathway assumes full batches.
    Train,
    /// Dataset order, short final batch kept (running stats cover it).
    Eval,
}

/// Index slices covering one epoch.
pub fn make_batches(
    num_samples: usize,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
    mode: BatchMode,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || (mode == BatchMode::Train && batch_size < 2) {
        return Err(Error::config(format!("batch size {batch_size} too small")));
    }
    if batch_size > num_samples {
        return Err(Error::config(format!(
            "batch size {batch_size} exceeds dataset size {num_samples}"
        )));
    }
    let mut order: Vec<usize> = (0..num_samples).collect();
    if mode == BatchMode::Train {
        let mixed = shuffle_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(mixed);
        order.shuffle(&mut rng);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if mode == BatchMode::Train {
        if let Some(last) = batches.last() {
            if last.len() != batch_size {
                batches.pop();
            }
        }
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_a_permutation() {
        let batches = make_batches(256, 128, 1, 0, BatchMode::Train).unwrap();
        assert_eq!(batches.len(), 2);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..256).collect::<Vec<_>>());
    }

    #[test]
    fn train_mode_drops_short_batch() {
        let batches = make_batches(300, 128, 1, 0, BatchMode::Train).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 128));
        // a different epoch drops different samples
        let next = make_batches(300, 128, 1, 1, BatchMode::Train).unwrap();
        assert_ne!(batches, next);
    }

    #[test]
    fn eval_mode_keeps_order_and_short_batch() {
        let batches = make_batches(300, 128, 1, 0, BatchMode::Eval).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].len(), 44);
        assert_eq!(batches[0][0], 0);
        assert_eq!(batches[2][43], 299);
    }

    #[test]
    fn same_seed_and_epoch_reproduce_order() {
        let a = make_batches(100, 10, 7, 3, BatchMode::Train).unwrap();
        let b = make_batches(100, 10, 7, 3, BatchMode::Train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        assert!(make_batches(10, 11, 0, 0, BatchMode::Train).is_err());
    }

    #[test]
    fn dataset_validates_uniformity() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(Dataset::new(vec![a.clone(), b], None, DataKind::Vector).is_err());
        assert!(Dataset::new(vec![a.clone()], Some(vec![0, 1]), DataKind::Vector).is_err());
        assert!(Dataset::new(vec![a], Some(vec![0]), DataKind::Vector).is_ok());
    }
}
