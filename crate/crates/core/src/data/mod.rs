//! Synthetic radiograph-like samples, augmentation, lung masking and
//! on-disk datasets.

mod augment;
mod dataset;
mod pgm;
mod synth;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::IMAGE_SIZE;
use crate::nn::NnError;
use crate::tensor::{Tensor, TensorError};

pub use augment::{augment, AffineParams};
pub use dataset::{
    build_dataset, load_dataset, save_dataset, segment_dataset, segment_dataset_with, Dataset, DatasetConfig,
    entry_paths, DatasetKind, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use pgm::{quantize, read_pgm, write_pgm};
pub use synth::{generate_sample, generate_sample_with_geometry, Ellipse, SampleGeometry, MASK_FRACTION_RANGE, NOISE_AMPLITUDE, OPACITY_PEAK, STRIPE_AMPLITUDE};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid label {0}, expected 0, 1 or 2")]
    InvalidLabel(u8),
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed PGM ({reason})")]
    Pgm { path: PathBuf, reason: String },
    #[error("{path}: bad manifest ({reason})")]
    Manifest { path: PathBuf, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Three-way finding label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Normal = 0,
    NotNormal = 1,
    LungOpacity = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Normal, Label::NotNormal, Label::LungOpacity];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl TryFrom<u8> for Label {
    type Error = DataError;

    fn try_from(v: u8) -> Result<Self, DataError> {
        match v {
            0 => Ok(Label::Normal),
            1 => Ok(Label::NotNormal),
            2 => Ok(Label::LungOpacity),
            other => Err(DataError::InvalidLabel(other)),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::NotNormal => "not-normal",
            Label::LungOpacity => "lung-opacity",
        })
    }
}

/// One grayscale image with its ground-truth lung mask, both `[1, 64, 64]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub label: Label,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

/// Elementwise `image * mask`.
pub fn apply_lung_mask(image: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>, DataError> {
    mask.ensure_shape(image.shape())?;
    let data = image.data().iter().zip(mask.data()).map(|(&p, &m)| p * m).collect();
    Ok(Tensor::from_vec(image.shape(), data)?)
}

/// Pixel value mapped to 0 at the model input.
pub const INPUT_CENTER: f32 = 0.4;
/// Pixel distance mapped to 1 at the model input.
pub const INPUT_SCALE: f32 = 0.15;

/// `(x - INPUT_CENTER) / INPUT_SCALE`, the fixed standardization every model
/// sees on its input.
pub fn normalize_input(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|x| (x - INPUT_CENTER) / INPUT_SCALE)
}

/// Batches sample images into a standardized `[B, 1, 64, 64]` model input.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Tensor<f32>, DataError> {
    Ok(normalize_input(&stack_field(samples, |s| &s.image)?))
}

/// Batches `[B, 1, 64, 64]` masks from samples.
pub fn stack_masks<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Tensor<f32>, DataError> {
    stack_field(samples, |s| &s.mask)
}

fn stack_field<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    field: impl Fn(&'a Sample) -> &'a Tensor<f32>,
) -> Result<Tensor<f32>, DataError> {
    let items: Vec<&Tensor<f32>> = samples.into_iter().map(field).collect();
    Ok(Tensor::stack(&items)?)
}

pub(crate) fn image_shape() -> [usize; 3] {
    [1, IMAGE_SIZE, IMAGE_SIZE]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(vals: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[1, 2, 2], vals.to_vec()).unwrap()
    }

    #[test]
    fn mask_identity_zero_and_checkerboard() {
        let image = img(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(apply_lung_mask(&image, &img(&[1.0; 4])).unwrap(), image);
        assert_eq!(apply_lung_mask(&image, &img(&[0.0; 4])).unwrap(), img(&[0.0; 4]));
        let out = apply_lung_mask(&image, &img(&[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(out, img(&[0.1, 0.0, 0.0, 0.4]));
    }

    #[test]
    fn masking_is_idempotent() {
        let image = img(&[0.9, 0.5, 0.7, 0.1]);
        let mask = img(&[0.0, 1.0, 1.0, 0.0]);
        let once = apply_lung_mask(&image, &mask).unwrap();
        assert_eq!(apply_lung_mask(&once, &mask).unwrap(), once);
    }

    #[test]
    fn mask_shape_mismatch() {
        let image = img(&[0.0; 4]);
        let mask = Tensor::zeros(&[1, 4, 1]);
        assert!(matches!(apply_lung_mask(&image, &mask), Err(DataError::Shape(_))));
    }

    #[test]
    fn label_codes() {
        for l in Label::ALL {
            assert_eq!(Label::try_from(u8::from(l)).unwrap(), l);
        }
        assert!(matches!(Label::try_from(3), Err(DataError::InvalidLabel(3))));
    }
}
