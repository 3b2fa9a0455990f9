//! Image batches and the normalization transform shared by loaders, losses,
//! and metrics.

use crate::error::{CoreError, Result};
use crate::tensor::Scalar;
use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

/// A set of normalized images with class labels; the unit of training and
/// evaluation. `images` has shape `[N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct ImageBatch<F> {
    pub images: Array4<F>,
    pub labels: Vec<u8>,
}

impl<F: Scalar> ImageBatch<F> {
    /// Validates shapes, finiteness, and label range.
    pub fn new(images: Array4<F>, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= num_classes) {
            return Err(CoreError::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("image ingestion".into()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given sample indices into a new batch.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), row)
                .assign(&self.images.index_axis(Axis(0), i));
            labels.push(self.labels[i]);
        }
        Self { images, labels }
    }

    /// First `n` samples (or all of them if fewer).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..self.len().min(n)).collect();
        self.subset(&idx)
    }

    /// Minimum and maximum pixel value over the whole batch (normalized
    /// units); the source of default trigger bounds.
    pub fn value_range(&self) -> (F, F) {
        let mut lo = F::infinity();
        let mut hi = F::neg_infinity();
        for &v in self.images.iter() {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }
}

/// Per-channel affine normalization between raw `[0,1]` pixels and the
/// model's input range: `normalized = (raw − mean) / std`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(CoreError::InvalidConfig(
                "normalization mean/std lengths differ".into(),
            ));
        }
        if std.iter().any(|&s| s <= 0.0) {
            return Err(CoreError::InvalidConfig(
                "normalization std must be positive".into(),
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize<F: Scalar>(&self, raw: F, channel: usize) -> F {
        (raw - F::from(self.mean[channel]).unwrap()) / F::from(self.std[channel]).unwrap()
    }

    pub fn denormalize<F: Scalar>(&self, value: F, channel: usize) -> F {
        value * F::from(self.std[channel]).unwrap() + F::from(self.mean[channel]).unwrap()
    }

    /// Maps a normalized value to the displayable 8-bit range, clamped.
    pub fn to_display<F: Scalar>(&self, value: F, channel: usize) -> F {
        let raw = self.denormalize(value, channel) * F::from(255.0).unwrap();
        raw.max(F::zero()).min(F::from(255.0).unwrap())
    }
}
