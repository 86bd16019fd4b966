use std::path::Path;

use flcascade_core::federation::RoundRecord;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One CSV row per completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub metric: f64,
    pub loss: f64,
    pub duration_ms: u64,
    /// Selected client ids joined with `;`.
    pub selected_ids: String,
}

impl From<&RoundRecord> for MetricsRow {
    fn from(r: &RoundRecord) -> Self {
        MetricsRow {
            round: r.round,
            metric: r.metric,
            loss: r.loss,
            duration_ms: r.duration_ms,
            selected_ids: r.selected.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
        }
    }
}

impl CsvRow for MetricsRow {
    const HEADER: &'static [&'static str] = &["round", "metric", "loss", "duration_ms", "selected_ids"];
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn from_history(history: &[RoundRecord]) -> Self {
        MetricsLog {
            rows: history.iter().map(MetricsRow::from).collect(),
        }
    }

    /// Writes the header even when there are no rows.
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_csv(path, &self.rows)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut reader = csv::Reader::from_path(path)?;
        let rows = reader.deserialize().collect::<Result<_, _>>()?;
        Ok(MetricsLog { rows })
    }
}

/// A row type with a fixed header, so that empty tables still get one.
pub(crate) trait CsvRow: Serialize {
    const HEADER: &'static [&'static str];
}

pub(crate) fn write_csv<T: CsvRow>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    writer.write_record(T::HEADER)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
pub(crate) fn assert_header_matches<T: CsvRow>(sample: &T) {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(sample).unwrap();
    let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
    assert_eq!(text.lines().next().unwrap(), T::HEADER.join(","));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: usize, selected: Vec<usize>) -> RoundRecord {
        RoundRecord {
            round,
            selected,
            metric: 0.1 + round as f64 / 3.0,
            loss: 1.0 / 7.0,
            duration_ms: 0,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let log = MetricsLog::from_history(&[record(1, vec![0, 2]), record(2, vec![1])]);
        log.write(&path).unwrap();
        assert_eq!(MetricsLog::read(&path).unwrap(), log);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("round,metric,loss,duration_ms,selected_ids\n1,"), "{text}");
        assert!(text.contains(",0;2\n"));
        assert_header_matches(&log.rows[0]);
    }

    #[test]
    fn empty_log_has_a_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        MetricsLog::default().write(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "round,metric,loss,duration_ms,selected_ids\n");
        assert!(MetricsLog::read(&path).unwrap().rows.is_empty());
    }
}
