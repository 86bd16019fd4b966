use flcascade_core::federation::FlConfig;
use log::{info, warn};
use serde::Serialize;

use super::{create_dir, load_experiment_data, log_file};
use crate::metrics::{write_csv, CsvRow};
use crate::{run_simulation, CliError, ExperimentConfig, Task};

/// Marker for a run that never reached the threshold.
pub const NOT_REACHED: &str = "not_reached";
const ERROR: &str = "error";

/// One line of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepRow {
    pub le: usize,
    pub sc: usize,
    pub repetition: usize,
    /// A round number, [`NOT_REACHED`] or `error`.
    pub rounds_or_not_reached: String,
}

impl CsvRow for SweepRow {
    const HEADER: &'static [&'static str] = &["le", "sc", "repetition", "rounds_or_not_reached"];
}

/// Rounds-to-threshold for every `(le, sc)` cell and repetition of a
/// segmentation config. Each run stops as soon as it reaches the threshold.
/// A failing run is marked `error` and the sweep continues. Writes
/// `sweep.csv` and one log per run.
pub fn sweep_seg(config: &ExperimentConfig, sc_values: &[usize], le_values: &[usize]) -> Result<Vec<SweepRow>, CliError> {
    config.validate()?;
    if config.task != Task::Segmentation {
        return Err(CliError::Config("the sweep needs a segmentation config".into()));
    }
    if sc_values.is_empty() || le_values.is_empty() {
        return Err(CliError::Config("empty sweep grid".into()));
    }
    let data = load_experiment_data(config)?;
    create_dir(&config.output_dir)?;
    let mut rows = Vec::new();
    for &le in le_values {
        for &sc in sc_values {
            for rep in 0..config.repetitions {
                let fl = FlConfig {
                    selected_per_round: sc,
                    local_epochs: le,
                    ..config.repetition(rep)
                };
                let run = fl.validate().map_err(CliError::from).and_then(|()| {
                    run_simulation(&fl, config.architecture, &data.train, &data.test, config.record_timing, Some(config.threshold))
                });
                let cell = match run {
                    Ok(run) => {
                        run.log().write(&log_file(&config.output_dir, &format!("sweep_le{le}_sc{sc}_rep{rep}")))?;
                        run.rounds_to(config.threshold).map_or_else(|| NOT_REACHED.to_string(), |r| r.to_string())
                    }
                    Err(e) => {
                        warn!("sweep cell le={le} sc={sc} rep={rep}: {e}");
                        ERROR.to_string()
                    }
                };
                info!("le={le} sc={sc} rep={rep}: {cell}");
                rows.push(SweepRow {
                    le,
                    sc,
                    repetition: rep,
                    rounds_or_not_reached: cell,
                });
            }
        }
    }
    write_csv(&config.output_dir.join("sweep.csv"), &rows)?;
    Ok(rows)
}

/// Median rounds-to-threshold of one `(le, sc)` cell over repetitions, with
/// unreached runs counted as `not_reached_as`. `None` if the cell is missing
/// or any of its runs failed.
pub fn median_rounds(rows: &[SweepRow], le: usize, sc: usize, not_reached_as: f64) -> Option<f64> {
    let mut values = Vec::new();
    for r in rows.iter().filter(|r| r.le == le && r.sc == sc) {
        values.push(match r.rounds_or_not_reached.as_str() {
            NOT_REACHED => not_reached_as,
            s => s.parse::<f64>().ok()?,
        });
    }
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 0 {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::assert_header_matches;

    fn row(le: usize, sc: usize, rep: usize, v: &str) -> SweepRow {
        SweepRow {
            le,
            sc,
            repetition: rep,
            rounds_or_not_reached: v.into(),
        }
    }

    #[test]
    fn medians() {
        let rows = [row(1, 1, 0, "3"), row(1, 1, 1, "6"), row(1, 2, 0, NOT_REACHED), row(1, 3, 0, "error")];
        assert_eq!(median_rounds(&rows, 1, 1, 16.0), Some(4.5));
        assert_eq!(median_rounds(&rows, 1, 2, 16.0), Some(16.0));
        assert_eq!(median_rounds(&rows, 1, 3, 16.0), None);
        assert_eq!(median_rounds(&rows, 2, 1, 16.0), None);
        assert_header_matches(&rows[0]);
    }
}
