//! Samples, datasets, the tensor file format and manifests.

mod manifest;
mod synth;
mod tensor_io;

pub use manifest::{load_manifest, write_dataset, Manifest, ManifestEntry};
pub use synth::{class_level, synth_dataset, synth_sample, BACKGROUND_LEVEL, NOISE_STD};
pub use tensor_io::{decode_tensor, encode_tensor, read_tensor, write_tensor, AnyTensor, TypedTensor, TENSOR_MAGIC};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::net::SIZE_DIVISOR;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One image `C×H×W` in `[0, 1]` and its `H×W` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: LabelMask,
}

impl Sample {
    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    /// Checks shapes, the size divisor and the class range.
    pub fn validate(&self, num_classes: usize) -> std::result::Result<(), String> {
        let s = self.image.shape();
        if s.len() != 3 {
            return Err(format!("image must be C×H×W, got {s:?}"));
        }
        if self.label.batch() != 1 || self.label.height() != s[1] || self.label.width() != s[2] {
            return Err(format!("label {:?} does not match image {s:?}", self.label.shape()));
        }
        if s[1] % SIZE_DIVISOR != 0 || s[2] % SIZE_DIVISOR != 0 {
            return Err(format!("image {}x{} is not divisible by {SIZE_DIVISOR}", s[1], s[2]));
        }
        self.label.check_classes(num_classes).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let first = samples[0].image.shape().to_vec();
        for (index, s) in samples.iter().enumerate() {
            s.validate(num_classes).map_err(|detail| Error::Validation { index, detail })?;
            if s.image.shape() != first.as_slice() {
                return Err(Error::Validation {
                    index,
                    detail: format!("image {:?} differs from sample 0 {first:?}", s.image.shape()),
                });
            }
        }
        Ok(Dataset { num_classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `C×H×W` of every image.
    pub fn image_shape(&self) -> &[usize] {
        self.samples[0].image.shape()
    }

    /// Stacks the given samples into `B×C×H×W` images and `B×H×W` labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, LabelMask)> {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| Error::InvalidArgument(format!("sample {i} out of range")))?;
            data.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
            labels.push(&s.label);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Ok((Tensor::new(shape, data)?, LabelMask::stack(&labels)?))
    }
}
