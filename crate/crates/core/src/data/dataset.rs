//! Class-balanced datasets with a per-class train/test split, stored as
//! `<root>/{train,test}/<id>_{img,mask}.pgm` plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{apply_lung_mask, generate_sample, read_pgm, stack_images, write_pgm, DataError, Label, Sample};
use crate::models::{build_network, ArchitectureId, ModelWeights};
use crate::nn::{Network, NnError};
use crate::seed;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const MIN_PER_CLASS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Full,
    Segmented,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Full => "full",
            DatasetKind::Segmented => "segmented",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Samples per class, indexed by label.
    pub per_class: [usize; 3],
    /// `train:test` ratio; the test share is rounded down, minimum 1 per class.
    pub split_ratio: [usize; 2],
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            per_class: [222; 3],
            split_ratio: [9, 1],
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if let Some(c) = self.per_class.iter().find(|&&c| c < MIN_PER_CLASS) {
            return Err(DataError::Config(format!(
                "need at least {MIN_PER_CLASS} samples per class, got {c}"
            )));
        }
        if self.split_ratio.contains(&0) {
            return Err(DataError::Config(format!(
                "split ratio parts must be positive, got {:?}",
                self.split_ratio
            )));
        }
        Ok(())
    }

    pub fn test_count(&self, class_count: usize) -> usize {
        let [train, test] = self.split_ratio;
        (class_count * test / (train + test)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: Split,
    pub label: Label,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub kind: DatasetKind,
    pub config: DatasetConfig,
    /// Per-class sample counts of each split, indexed by label.
    pub train_counts: [usize; 3],
    pub test_counts: [usize; 3],
    pub samples: Vec<ManifestEntry>,
}

/// Generates the dataset. Sample ids run class by class; within a class
/// the first `test_count` ids form the test split.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut id = 0;
    for label in Label::ALL {
        let count = config.per_class[label.index()];
        let n_test = config.test_count(count);
        for k in 0..count {
            let mut s = generate_sample(seed::derive(config.seed, "dataset", id as u64), label as u8)?;
            s.id = id;
            if k < n_test {
                test.push(s);
            } else {
                train.push(s);
            }
            id += 1;
        }
    }
    train.sort_by_key(|s| s.id);
    test.sort_by_key(|s| s.id);
    Ok(Dataset {
        kind: DatasetKind::Full,
        config: config.clone(),
        train,
        test,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    fn counts(samples: &[Sample]) -> [usize; 3] {
        let mut c = [0; 3];
        for s in samples {
            c[s.label.index()] += 1;
        }
        c
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut samples = Vec::with_capacity(self.train.len() + self.test.len());
        for split in [Split::Train, Split::Test] {
            for s in self.split(split) {
                samples.push(ManifestEntry {
                    id: s.id,
                    split,
                    label: s.label,
                    image: format!("{}/{:06}_img.pgm", split.dir(), s.id),
                    mask: format!("{}/{:06}_mask.pgm", split.dir(), s.id),
                });
            }
        }
        DatasetManifest {
            version: MANIFEST_VERSION,
            kind: self.kind,
            config: self.config.clone(),
            train_counts: Self::counts(&self.train),
            test_counts: Self::counts(&self.test),
            samples,
        }
    }
}

/// Writes images, masks and the manifest under `root`.
pub fn save_dataset(root: &Path, dataset: &Dataset) -> Result<DatasetManifest, DataError> {
    let manifest = dataset.manifest();
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.dir());
        fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
    }
    let all = dataset.train.iter().chain(&dataset.test);
    for (entry, s) in manifest.samples.iter().zip(all) {
        write_pgm(&root.join(&entry.image), &s.image)?;
        write_pgm(&root.join(&entry.mask), &s.mask)?;
    }
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    fs::write(&path, json + "\n").map_err(|e| DataError::io(&path, e))?;
    Ok(manifest)
}

pub fn load_dataset(root: &Path) -> Result<Dataset, DataError> {
    let path = root.join(MANIFEST_FILE);
    let bad = |reason: String| DataError::Manifest {
        path: path.clone(),
        reason,
    };
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for e in &manifest.samples {
        if !seen.insert(e.id) {
            return Err(bad(format!("sample id {} listed twice", e.id)));
        }
        let sample = Sample {
            id: e.id,
            label: e.label,
            image: read_pgm(&root.join(&e.image))?,
            mask: read_pgm(&root.join(&e.mask))?,
        };
        match e.split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    if Dataset::counts(&train) != manifest.train_counts || Dataset::counts(&test) != manifest.test_counts {
        return Err(bad("per-class counts do not match the sample list".into()));
    }
    Ok(Dataset {
        kind: manifest.kind,
        config: manifest.config,
        train,
        test,
    })
}

/// Replaces every image by `image * predict(sample)`. Ground-truth masks are kept.
pub fn segment_dataset_with(
    dataset: &Dataset,
    mut predict: impl FnMut(&Sample) -> Result<Tensor<f32>, DataError>,
) -> Result<Dataset, DataError> {
    let mut run = |samples: &[Sample]| -> Result<Vec<Sample>, DataError> {
        samples
            .iter()
            .map(|s| {
                let mask = predict(s)?;
                Ok(Sample {
                    image: apply_lung_mask(&s.image, &mask)?,
                    ..s.clone()
                })
            })
            .collect()
    };
    Ok(Dataset {
        kind: DatasetKind::Segmented,
        config: dataset.config.clone(),
        train: run(&dataset.train)?,
        test: run(&dataset.test)?,
    })
}

/// Masks both splits with the segmentation model's thresholded prediction.
pub fn segment_dataset(weights: &ModelWeights, dataset: &Dataset) -> Result<Dataset, DataError> {
    if weights.architecture != ArchitectureId::SegUnetMini.as_str() {
        return Err(NnError::IncompatibleWeights {
            name: weights.tensors.first().map(|(n, _)| n.clone()).unwrap_or_default(),
            reason: format!("expected a segmentation model, got `{}`", weights.architecture),
        }
        .into());
    }
    let (mut net, _): (Network<f32>, _) = build_network(ArchitectureId::SegUnetMini, 0)?;
    net.load_weights(weights)?;
    segment_dataset_with(dataset, |s| {
        let input = stack_images([s])?;
        let probs = net.forward(&input)?;
        let mask = probs.map(|p| if p > 0.5 { 1.0 } else { 0.0 });
        Ok(mask.reshape(s.image.shape())?)
    })
}

/// Paths of the image and mask file of a manifest entry.
pub fn entry_paths(root: &Path, e: &ManifestEntry) -> (PathBuf, PathBuf) {
    (root.join(&e.image), root.join(&e.mask))
}
