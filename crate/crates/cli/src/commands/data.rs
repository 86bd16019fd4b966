use std::path::Path;

use flcascade_core::data::{build_dataset, save_dataset, segment_dataset, DatasetConfig, DatasetManifest};

use super::{read_weights, write_atomically};
use crate::CliError;

/// Generates a dataset into `out`, which must be absent or empty. Nothing is
/// left behind on failure.
pub fn gen_data(out: &Path, config: &DatasetConfig) -> Result<DatasetManifest, CliError> {
    config.validate()?;
    write_atomically(out, |dir| {
        let data = build_dataset(config)?;
        Ok(save_dataset(dir, &data)?)
    })
}

/// Masks every image of the dataset at `dataset_root` with the segmentation
/// model's prediction and writes the result to `out`.
pub fn segment(weights: &Path, dataset_root: &Path, out: &Path) -> Result<DatasetManifest, CliError> {
    let weights = read_weights(weights)?;
    let data = flcascade_core::data::load_dataset(dataset_root)?;
    write_atomically(out, |dir| {
        let segmented = segment_dataset(&weights, &data)?;
        Ok(save_dataset(dir, &segmented)?)
    })
}
