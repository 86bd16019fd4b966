use std::path::Path;

use flcascade_core::data::{Dataset, DatasetKind};
use flcascade_core::federation::FlConfig;
use flcascade_core::models::ArchitectureId;
use log::{info, warn};
use serde::Serialize;

use super::{create_dir, load_experiment_data, load_kind, log_file, weights_file, write_weights};
use crate::metrics::{write_csv, CsvRow};
use crate::{run_simulation, CliError, ExperimentConfig, RunOutcome, Task};

/// One line of `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub repetition: usize,
    pub seed: u64,
    pub rounds: usize,
    pub best_round: usize,
    pub max_metric: f64,
    pub min_loss: f64,
    pub final_metric: f64,
    pub final_loss: f64,
    /// First round at or above the threshold, or `not_reached`.
    pub rounds_to_threshold: String,
}

impl CsvRow for RunSummary {
    const HEADER: &'static [&'static str] = &[
        "repetition",
        "seed",
        "rounds",
        "best_round",
        "max_metric",
        "min_loss",
        "final_metric",
        "final_loss",
        "rounds_to_threshold",
    ];
}

/// Output stem of repetition `rep`, e.g. `seg_rep0`.
pub(crate) fn run_stem(task: Task, rep: usize) -> String {
    format!("{}_rep{rep}", task.prefix())
}

/// Writes `<stem>.csv`, `<stem>_best.flw` and `<stem>_final.flw`.
pub(crate) fn save_run(dir: &Path, stem: &str, run: &RunOutcome) -> Result<(), CliError> {
    run.log().write(&log_file(dir, stem))?;
    if let Some((_, best)) = &run.best {
        write_weights(&weights_file(dir, stem, "best"), best)?;
    }
    write_weights(&weights_file(dir, stem, "final"), &run.final_weights)
}

/// Runs every repetition of the config's task in simulation mode and writes
/// one log plus best and final weights per repetition, and `runs.csv`.
pub fn train(config: &ExperimentConfig) -> Result<Vec<RunSummary>, CliError> {
    config.validate()?;
    let data = load_experiment_data(config)?;
    create_dir(&config.output_dir)?;
    let mut summaries = Vec::with_capacity(config.repetitions);
    for rep in 0..config.repetitions {
        let fl = config.repetition(rep);
        let run = run_simulation(&fl, config.architecture, &data.train, &data.test, config.record_timing, None)?;
        save_run(&config.output_dir, &run_stem(config.task, rep), &run)?;
        let last = run.history.last().expect("at least one round");
        let summary = RunSummary {
            repetition: rep,
            seed: fl.seed,
            rounds: run.history.len(),
            best_round: run.best.as_ref().map_or(0, |(r, _)| *r),
            max_metric: run.max_metric().unwrap_or(f64::NAN),
            min_loss: run.min_loss().unwrap_or(f64::NAN),
            final_metric: last.metric,
            final_loss: last.loss,
            rounds_to_threshold: run
                .rounds_to(config.threshold)
                .map_or_else(|| super::NOT_REACHED.to_string(), |r| r.to_string()),
        };
        info!(
            "repetition {rep}: best round {} max {:.4} final {:.4}",
            summary.best_round, summary.max_metric, summary.final_metric
        );
        summaries.push(summary);
    }
    write_csv(&config.output_dir.join("runs.csv"), &summaries)?;
    Ok(summaries)
}

/// One cell of the architecture x dataset x client-count grid. Metric
/// columns are empty for a failed cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub architecture: String,
    pub dataset_kind: String,
    pub num_clients: usize,
    pub max_accuracy: Option<f64>,
    pub min_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    /// `ok` or `error: <reason>`.
    pub status: String,
}

impl CsvRow for GridRow {
    const HEADER: &'static [&'static str] = &[
        "architecture",
        "dataset_kind",
        "num_clients",
        "max_accuracy",
        "min_loss",
        "final_accuracy",
        "final_loss",
        "status",
    ];
}

fn grid_cell(
    config: &ExperimentConfig,
    arch: ArchitectureId,
    data: &Dataset,
    clients: usize,
) -> Result<RunOutcome, CliError> {
    let fl = FlConfig {
        num_clients: clients,
        selected_per_round: clients,
        ..config.repetition(0)
    };
    fl.validate()?;
    let run = run_simulation(&fl, arch, &data.train, &data.test, config.record_timing, None)?;
    let stem = format!("grid_{arch}_{}_c{clients}", data.kind.as_str());
    save_run(&config.output_dir, &stem, &run)?;
    Ok(run)
}

/// Classification grid over `architectures` x {full, segmented} x
/// `client_counts`, each cell trained once with the config's seed and every
/// client selected. The full dataset is the config's `dataset_root`. A
/// failing cell is recorded and the grid continues. Writes `grid.csv`.
pub fn train_cls_grid(
    config: &ExperimentConfig,
    segmented_root: &Path,
    architectures: &[ArchitectureId],
    client_counts: &[usize],
) -> Result<Vec<GridRow>, CliError> {
    if config.task != Task::Classification {
        return Err(CliError::Config("the grid needs a classification config".into()));
    }
    if architectures.is_empty() || client_counts.is_empty() {
        return Err(CliError::Config("empty grid".into()));
    }
    let datasets = [
        load_kind(&config.dataset_root, DatasetKind::Full)?,
        load_kind(segmented_root, DatasetKind::Segmented)?,
    ];
    create_dir(&config.output_dir)?;
    let mut rows = Vec::new();
    for &arch in architectures {
        for data in &datasets {
            for &clients in client_counts {
                let mut row = GridRow {
                    architecture: arch.to_string(),
                    dataset_kind: data.kind.as_str().to_string(),
                    num_clients: clients,
                    max_accuracy: None,
                    min_loss: None,
                    final_accuracy: None,
                    final_loss: None,
                    status: "ok".into(),
                };
                match grid_cell(config, arch, data, clients) {
                    Ok(run) => {
                        let last = run.history.last().expect("at least one round");
                        row.max_accuracy = run.max_metric();
                        row.min_loss = run.min_loss();
                        row.final_accuracy = Some(last.metric);
                        row.final_loss = Some(last.loss);
                    }
                    Err(e) => {
                        warn!("grid cell {arch}/{}/{clients}: {e}", data.kind.as_str());
                        row.status = format!("error: {e}");
                    }
                }
                info!("{row:?}");
                rows.push(row);
            }
        }
    }
    write_csv(&config.output_dir.join("grid.csv"), &rows)?;
    Ok(rows)
}
