use std::fs;
use std::path::{Path, PathBuf};

use flcascade_core::data::DatasetKind;
use flcascade_core::federation::{EvalMetric, FlConfig};
use flcascade_core::models::ArchitectureId;
use flcascade_core::nn::optim::OptimizerSpec;
use serde::Deserialize;

use crate::CliError;

pub const DEFAULT_REPETITIONS: usize = 2;
pub const DEFAULT_THRESHOLD: f64 = 0.92;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Classification,
}

impl Task {
    pub fn default_architecture(self) -> ArchitectureId {
        match self {
            Task::Segmentation => ArchitectureId::SegUnetMini,
            Task::Classification => ArchitectureId::ClsCnnPlain,
        }
    }

    pub fn metric(self) -> EvalMetric {
        match self {
            Task::Segmentation => EvalMetric::Jaccard,
            Task::Classification => EvalMetric::Accuracy,
        }
    }

    /// File-name prefix of this task's outputs.
    pub fn prefix(self) -> &'static str {
        match self {
            Task::Segmentation => "seg",
            Task::Classification => "cls",
        }
    }
}

/// The JSON document: everything but `task`, `dataset_root` and
/// `output_dir` may be omitted.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    task: Task,
    dataset_root: PathBuf,
    output_dir: PathBuf,
    architecture: Option<ArchitectureId>,
    dataset_kind: Option<DatasetKind>,
    num_clients: Option<usize>,
    selected_per_round: Option<usize>,
    local_epochs: Option<usize>,
    rounds: Option<usize>,
    batch_size: Option<usize>,
    optimizer: Option<OptimizerSpec>,
    seed: Option<u64>,
    augment: Option<bool>,
    persist_optimizer_state: Option<bool>,
    repetitions: Option<usize>,
    threshold: Option<f64>,
    record_timing: Option<bool>,
}

/// A validated experiment: what to train, on which data, and where the
/// logs and weights go.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub architecture: ArchitectureId,
    pub dataset_root: PathBuf,
    pub dataset_kind: DatasetKind,
    pub output_dir: PathBuf,
    /// Federation settings of repetition 0; repetition `r` uses `seed + r`.
    pub fl: FlConfig,
    pub repetitions: usize,
    /// Metric level whose first crossing is reported as rounds-to-threshold.
    pub threshold: f64,
    /// Keep wall-clock round durations in the logs (breaks bit-identical reruns).
    pub record_timing: bool,
}

impl ExperimentConfig {
    /// Task defaults: segmentation trains 3 clients, all selected, 1 local
    /// epoch, 15 rounds of Adagrad (lr 1e-3, batch 2); classification trains
    /// 2 clients, all selected, 3 local epochs, 10 rounds of Adam (lr 1e-3,
    /// wd 1e-5, batch 8).
    pub fn new(task: Task, dataset_root: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        let fl = match task {
            Task::Segmentation => FlConfig {
                num_clients: 3,
                selected_per_round: 3,
                local_epochs: 1,
                rounds: 15,
                batch_size: 2,
                optimizer: OptimizerSpec::adagrad(1e-3, 0.0),
                seed: 0,
                eval_metric: EvalMetric::Jaccard,
                augment: true,
                persist_optimizer_state: false,
            },
            Task::Classification => FlConfig {
                num_clients: 2,
                selected_per_round: 2,
                local_epochs: 3,
                rounds: 10,
                batch_size: 8,
                optimizer: OptimizerSpec::adam(1e-3, 1e-5),
                seed: 0,
                eval_metric: EvalMetric::Accuracy,
                augment: true,
                persist_optimizer_state: false,
            },
        };
        Self {
            task,
            architecture: task.default_architecture(),
            dataset_root: dataset_root.into(),
            dataset_kind: DatasetKind::Full,
            output_dir: output_dir.into(),
            fl,
            repetitions: DEFAULT_REPETITIONS,
            threshold: DEFAULT_THRESHOLD,
            record_timing: false,
        }
    }

    /// Parses and validates a JSON config. Relative paths stay relative to
    /// the working directory.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let file: ConfigFile = serde_json::from_str(text)?;
        let mut c = Self::new(file.task, file.dataset_root, file.output_dir);
        // When only num_clients is given, keep selecting every client.
        if let Some(n) = file.num_clients {
            c.fl.num_clients = n;
            c.fl.selected_per_round = n;
        }
        macro_rules! apply {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = file.$field { $target = v; })*
            };
        }
        apply!(
            architecture => c.architecture,
            dataset_kind => c.dataset_kind,
            selected_per_round => c.fl.selected_per_round,
            local_epochs => c.fl.local_epochs,
            rounds => c.fl.rounds,
            batch_size => c.fl.batch_size,
            optimizer => c.fl.optimizer,
            seed => c.fl.seed,
            augment => c.fl.augment,
            persist_optimizer_state => c.fl.persist_optimizer_state,
            repetitions => c.repetitions,
            threshold => c.threshold,
            record_timing => c.record_timing,
        );
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config = Self::from_json(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.architecture.is_segmentation() != (self.task == Task::Segmentation) {
            return Err(CliError::Config(format!(
                "architecture {} does not fit a {:?} task",
                self.architecture, self.task
            )));
        }
        if self.fl.eval_metric != self.task.metric() {
            return Err(CliError::Config(format!("metric {:?} does not fit the task", self.fl.eval_metric)));
        }
        if self.repetitions == 0 {
            return Err(CliError::Config("repetitions must be >= 1".into()));
        }
        if !self.threshold.is_finite() {
            return Err(CliError::Config(format!("threshold must be finite, got {}", self.threshold)));
        }
        self.fl.validate()?;
        Ok(())
    }

    /// Federation settings of repetition `rep`.
    pub fn repetition(&self, rep: usize) -> FlConfig {
        FlConfig {
            seed: self.fl.seed + rep as u64,
            ..self.fl.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(extra: &str) -> Result<ExperimentConfig, serde_json::Error> {
        ExperimentConfig::from_json(&format!(
            r#"{{"task": "classification", "dataset_root": "d", "output_dir": "o"{extra}}}"#
        ))
    }

    #[test]
    fn minimal_config_gets_task_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c, ExperimentConfig::new(Task::Classification, "d", "o"));
        assert_eq!(c.fl.batch_size, 8);
        assert_eq!((c.repetitions, c.threshold), (2, 0.92));
        c.validate().unwrap();
        let s = ExperimentConfig::new(Task::Segmentation, "d", "o");
        assert_eq!((s.fl.rounds, s.fl.batch_size, s.fl.optimizer), (15, 2, OptimizerSpec::adagrad(1e-3, 0.0)));
    }

    #[test]
    fn overrides_apply() {
        let c = parse(
            r#", "num_clients": 3, "rounds": 4, "seed": 9, "architecture": "cls-cnn-skip",
               "optimizer": {"kind": "sgd", "lr": 0.1}, "dataset_kind": "segmented""#,
        )
        .unwrap();
        assert_eq!((c.fl.num_clients, c.fl.selected_per_round, c.fl.rounds, c.fl.seed), (3, 3, 4, 9));
        assert_eq!(c.architecture, ArchitectureId::ClsCnnSkip);
        assert_eq!(c.fl.optimizer, OptimizerSpec::sgd(0.1, 0.0));
        assert_eq!(c.dataset_kind, DatasetKind::Segmented);
        assert_eq!(c.repetition(1).seed, 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse(r#", "roundz": 3"#).unwrap_err();
        assert!(err.to_string().contains("roundz"), "{err}");
        assert!(ExperimentConfig::from_json(r#"{"task": "classification"}"#).is_err());
    }

    #[test]
    fn validation_catches_mismatches() {
        assert!(parse(r#", "architecture": "seg-unet-mini""#).unwrap().validate().is_err());
        assert!(parse(r#", "selected_per_round": 5"#).unwrap().validate().is_err());
        assert!(parse(r#", "repetitions": 0"#).unwrap().validate().is_err());
        assert!(parse(r#", "optimizer": {"kind": "adam", "lr": -1.0}"#).unwrap().validate().is_err());
    }
}
