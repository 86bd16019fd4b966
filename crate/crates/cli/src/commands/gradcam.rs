use std::path::{Path, PathBuf};

use flcascade_core::data::{Dataset, DatasetKind, Label, Sample};
use flcascade_core::models::{architecture_builder, ArchitectureId, ModelWeights};
use flcascade_core::xai::{grad_cam_sample, lung_focus_score, save_overlay, summarize};
use flcascade_core::Network;
use serde::Serialize;

use super::{create_dir, load_kind, read_weights};
use crate::metrics::{write_csv, CsvRow};
use crate::CliError;

#[derive(Debug, Clone)]
pub struct GradcamOptions {
    pub full_weights: PathBuf,
    pub segmented_weights: PathBuf,
    /// Full dataset; its lung-opacity test samples are explained.
    pub dataset_root: PathBuf,
    /// Segmented copy of the same dataset, fed to the segmented model. When
    /// absent that model sees the full images too.
    pub segmented_root: Option<PathBuf>,
    pub samples: usize,
    pub output_dir: PathBuf,
}

/// One line of `focus.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FocusRow {
    pub sample_id: usize,
    pub model_id: String,
    /// Kind of the images the model was shown.
    pub dataset_kind: String,
    pub score: f64,
}

impl CsvRow for FocusRow {
    const HEADER: &'static [&'static str] = &["sample_id", "model_id", "dataset_kind", "score"];
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcamSummary {
    pub rows: Vec<FocusRow>,
    /// `(mean, median)` focus score per model, `None` without samples.
    pub full: Option<(f64, f64)>,
    pub segmented: Option<(f64, f64)>,
}

struct Explained {
    id: String,
    net: Network<f32>,
    tap: usize,
}

fn classifier(path: &Path) -> Result<Explained, CliError> {
    let weights: ModelWeights = read_weights(path)?;
    let arch: ArchitectureId = weights.architecture.parse()?;
    let tap = arch
        .last_conv_activation()
        .ok_or_else(|| CliError::Config(format!("{}: {arch} is not a classifier", path.display())))?;
    let mut net = architecture_builder(arch).build::<f32>()?;
    net.load_weights(&weights)?;
    let id = path.file_stem().map_or_else(|| arch.to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Explained { id, net, tap })
}

fn find(data: &Dataset, id: usize) -> Result<&Sample, CliError> {
    data.test
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| CliError::Config(format!("sample {id} missing from the segmented dataset")))
}

/// Grad-CAM of the lung-opacity class for the first `samples` lung-opacity
/// test samples under both classifiers. Writes a pair of overlays per sample
/// under `overlays/` and every lung-focus score to `focus.csv`. Scores use
/// the ground-truth lung mask.
pub fn gradcam(options: &GradcamOptions) -> Result<GradcamSummary, CliError> {
    let mut full_model = classifier(&options.full_weights)?;
    let mut seg_model = classifier(&options.segmented_weights)?;
    let full = load_kind(&options.dataset_root, DatasetKind::Full)?;
    let segmented = options
        .segmented_root
        .as_deref()
        .map(|root| load_kind(root, DatasetKind::Segmented))
        .transpose()?;
    let picked: Vec<&Sample> = full
        .test
        .iter()
        .filter(|s| s.label == Label::LungOpacity)
        .take(options.samples)
        .collect();
    if picked.len() < options.samples {
        return Err(CliError::Config(format!(
            "asked for {} lung-opacity test samples, the dataset has {}",
            options.samples,
            picked.len()
        )));
    }
    let overlays = options.output_dir.join("overlays");
    create_dir(&overlays)?;

    let target = Label::LungOpacity.index();
    let mut rows = Vec::with_capacity(2 * picked.len());
    let (mut full_scores, mut seg_scores) = (Vec::new(), Vec::new());
    for &sample in &picked {
        let seg_input = match &segmented {
            Some(d) => find(d, sample.id)?,
            None => sample,
        };
        let runs = [
            (&mut full_model, sample, "full", &mut full_scores),
            (&mut seg_model, seg_input, if segmented.is_some() { "segmented" } else { "full" }, &mut seg_scores),
        ];
        for (suffix, (model, input, kind, scores)) in ["full", "segmented"].into_iter().zip(runs) {
            let heat = grad_cam_sample(&mut model.net, input, target, model.tap)?;
            let score = lung_focus_score(&heat.values, &sample.mask)?;
            save_overlay(&input.image, &heat.values, &overlays.join(format!("{:05}_{suffix}.ppm", sample.id)))?;
            scores.push(score);
            rows.push(FocusRow {
                sample_id: sample.id,
                model_id: model.id.clone(),
                dataset_kind: kind.into(),
                score,
            });
        }
    }
    write_csv(&options.output_dir.join("focus.csv"), &rows)?;
    Ok(GradcamSummary {
        rows,
        full: summarize(&full_scores),
        segmented: summarize(&seg_scores),
    })
}

#[cfg(test)]
mod tests {
    use std::fs;

    use flcascade_core::data::{build_dataset, save_dataset, DatasetConfig};
    use flcascade_core::models::build_network;
    use flcascade_core::transport::save_weights;

    use super::*;
    use crate::metrics::assert_header_matches;

    fn setup(dir: &Path) -> GradcamOptions {
        let data = build_dataset(&DatasetConfig {
            per_class: [20; 3],
            split_ratio: [9, 1],
            seed: 1,
        })
        .unwrap();
        save_dataset(&dir.join("data"), &data).unwrap();
        for (name, arch) in [("a.flw", ArchitectureId::ClsCnnPlain), ("b.flw", ArchitectureId::ClsCnnSkip)] {
            save_weights(&dir.join(name), &build_network::<f32>(arch, 3).unwrap().1).unwrap();
        }
        GradcamOptions {
            full_weights: dir.join("a.flw"),
            segmented_weights: dir.join("b.flw"),
            dataset_root: dir.join("data"),
            segmented_root: None,
            samples: 2,
            output_dir: dir.join("out"),
        }
    }

    #[test]
    fn writes_paired_overlays_and_scores() {
        let dir = tempfile::tempdir().unwrap();
        let opts = setup(dir.path());
        let summary = gradcam(&opts).unwrap();
        assert_eq!(summary.rows.len(), 4);
        assert_eq!(fs::read_dir(opts.output_dir.join("overlays")).unwrap().count(), 4);
        assert!(summary.rows.iter().all(|r| (0.0..=1.0).contains(&r.score)));
        assert_eq!(summary.rows[1].model_id, "b");
        assert_header_matches(&summary.rows[0]);
    }

    #[test]
    fn zero_samples_give_a_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let opts = GradcamOptions {
            samples: 0,
            ..setup(dir.path())
        };
        let summary = gradcam(&opts).unwrap();
        assert!(summary.rows.is_empty() && summary.full.is_none());
        assert_eq!(
            fs::read_to_string(opts.output_dir.join("focus.csv")).unwrap(),
            "sample_id,model_id,dataset_kind,score\n"
        );
    }

    #[test]
    fn missing_weights_or_too_many_samples_fail() {
        let dir = tempfile::tempdir().unwrap();
        let opts = setup(dir.path());
        let missing = GradcamOptions {
            full_weights: dir.path().join("nope.flw"),
            ..opts.clone()
        };
        assert!(gradcam(&missing).is_err());
        assert!(gradcam(&GradcamOptions { samples: 3, ..opts }).is_err());
    }
}
