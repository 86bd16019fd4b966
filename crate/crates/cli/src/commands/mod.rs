//! One function per CLI subcommand. Each takes already-parsed arguments and
//! writes its outputs under a directory it is given.

mod data;
mod gradcam;
mod network;
mod sweep;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use flcascade_core::data::{load_dataset, Dataset, DatasetKind};
use flcascade_core::models::ModelWeights;
use flcascade_core::transport::{load_weights, save_weights};

use crate::{CliError, ExperimentConfig};

pub use data::{gen_data, segment};
pub use gradcam::{gradcam, FocusRow, GradcamOptions, GradcamSummary};
pub use network::{client, serve};
pub use sweep::{median_rounds, sweep_seg, SweepRow, NOT_REACHED};
pub use train::{train, train_cls_grid, GridRow, RunSummary};

/// Builds a directory tree in a hidden sibling of `out` and moves it into
/// place only when `build` succeeds. `out` must be absent or empty.
pub(crate) fn write_atomically<T>(
    out: &Path,
    build: impl FnOnce(&Path) -> Result<T, CliError>,
) -> Result<T, CliError> {
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| CliError::io(out, e))?;
        if entries.next().is_some() {
            return Err(CliError::Config(format!("{} exists and is not empty", out.display())));
        }
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| CliError::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".flcascade-staging-")
        .tempdir_in(&parent)
        .map_err(|e| CliError::io(&parent, e))?;
    let value = build(staging.path())?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(staging.path(), fs::Permissions::from_mode(0o755))
            .map_err(|e| CliError::io(staging.path(), e))?;
    }
    if out.exists() {
        fs::remove_dir(out).map_err(|e| CliError::io(out, e))?;
    }
    let staged = staging.keep();
    fs::rename(&staged, out).map_err(|e| {
        let _ = fs::remove_dir_all(&staged);
        CliError::io(out, e)
    })?;
    Ok(value)
}

pub(crate) fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Loads a dataset and checks it is the kind the config expects.
pub(crate) fn load_kind(root: &Path, kind: DatasetKind) -> Result<Dataset, CliError> {
    let data = load_dataset(root)?;
    if data.kind != kind {
        return Err(CliError::Config(format!(
            "{} holds a {} dataset, expected {}",
            root.display(),
            data.kind.as_str(),
            kind.as_str()
        )));
    }
    Ok(data)
}

pub(crate) fn load_experiment_data(config: &ExperimentConfig) -> Result<Dataset, CliError> {
    load_kind(&config.dataset_root, config.dataset_kind)
}

pub(crate) fn write_weights(path: &Path, weights: &ModelWeights) -> Result<(), CliError> {
    save_weights(path, weights).map_err(|source| CliError::WeightsFile {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_weights(path: &Path) -> Result<ModelWeights, CliError> {
    load_weights(path).map_err(|source| CliError::WeightsFile {
        path: path.to_path_buf(),
        source,
    })
}

/// `<dir>/<stem>_<which>.flw`
pub fn weights_file(dir: &Path, stem: &str, which: &str) -> PathBuf {
    dir.join(format!("{stem}_{which}.flw"))
}

/// `<dir>/<stem>.csv`
pub fn log_file(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_nothing_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let err = write_atomically(&out, |p| {
            fs::write(p.join("half"), b"x").unwrap();
            Err::<(), _>(CliError::Config("boom".into()))
        });
        assert!(err.is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn atomic_write_fills_an_empty_dir_and_refuses_a_full_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        fs::create_dir(&out).unwrap();
        write_atomically(&out, |p| fs::write(p.join("a"), b"1").map_err(|e| CliError::io(p, e))).unwrap();
        assert_eq!(fs::read(out.join("a")).unwrap(), b"1");
        assert!(write_atomically(&out, |_| Ok(())).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
