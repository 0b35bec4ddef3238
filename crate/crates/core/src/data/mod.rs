//! Datasets, batching and augmentation.

mod augment;
mod lcaf;
mod ppm;
mod synth;

pub use augment::{adjust_brightness, augment, hflip, translate, AugmentConfig};
pub use lcaf::{load_feature_file, read_feature_file, write_feature_file};
pub use ppm::{load_image_dir, parse_ppm, resize_bilinear, write_image_dir, write_ppm, PpmImage};
pub use synth::{class_glyphs, synth_glyphs, Glyph, GLYPH_SIZE, MAX_CLASSES};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    /// RGB pixels in `[0, 1]`.
    Image,
    /// Precomputed backbone feature maps.
    Features,
}

/// Samples stored contiguously as `N×C×H×W` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: SampleKind,
    pub sample_shape: [usize; 3],
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Fails when any label is outside `[0, num_classes)`.
    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= num_classes) {
            Some(&bad) => Err(Error::Data(format!(
                "label {bad} is out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn sample_hash(&self, i: usize) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.sample(i) {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Gathers the given sample indices into a batch.
    pub fn batch(&self, indices: &[usize]) -> SampleBatch {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let [c, h, w] = self.sample_shape;
        SampleBatch {
            kind: self.kind,
            inputs: Tensor::new(&[indices.len(), c, h, w], data).expect("batch shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub kind: SampleKind,
    /// `B×C×H×W`
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One epoch of batches. With a seed the order is a Fisher-Yates permutation,
/// without one it is the dataset's stored order. The last batch may be short.
pub fn batches(dataset: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Config {
            key: "batch_size".into(),
            msg: "must be at least 1".into(),
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::seed_from_u64(seed).shuffle(&mut order);
    }
    Ok(Batches {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = SampleBatch;

    fn next(&mut self) -> Option<SampleBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.dataset.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

#[cfg(test)]
pub(crate) fn toy_dataset(n: usize) -> Dataset {
    Dataset {
        kind: SampleKind::Image,
        sample_shape: [1, 1, 2],
        data: (0..2 * n).map(|v| v as f32 / (2 * n) as f32).collect(),
        labels: (0..n).map(|i| i % 3).collect(),
        class_names: vec!["a".into(), "b".into(), "c".into()],
    }
}
