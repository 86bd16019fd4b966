use flcascade_core::data::Sample;
use flcascade_core::federation::{build_trainers, rounds_to_threshold, Federation, FlConfig, RoundRecord};
use flcascade_core::models::{build_network, ArchitectureId, ModelWeights};
use flcascade_core::transport::LoopbackDispatch;

use crate::{CliError, MetricsLog};

/// History and weights of one finished federation.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: Vec<RoundRecord>,
    /// Round and weights with the highest test metric.
    pub best: Option<(usize, ModelWeights)>,
    pub final_weights: ModelWeights,
}

impl RunOutcome {
    pub fn log(&self) -> MetricsLog {
        MetricsLog::from_history(&self.history)
    }

    pub fn metrics(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.metric).collect()
    }

    pub fn max_metric(&self) -> Option<f64> {
        self.history.iter().map(|r| r.metric).reduce(f64::max)
    }

    pub fn min_loss(&self) -> Option<f64> {
        self.history.iter().map(|r| r.loss).reduce(f64::min)
    }

    pub fn rounds_to(&self, threshold: f64) -> Option<usize> {
        rounds_to_threshold(&self.metrics(), threshold)
    }
}

/// Seeded starting weights shared by simulation and networked runs.
pub fn initial_weights(arch: ArchitectureId, seed: u64) -> Result<ModelWeights, CliError> {
    Ok(build_network::<f32>(arch, seed)?.1)
}

/// Runs a federation in-process over the loopback backend (every task and
/// update still goes through the wire codec). With `stop_at`, the run ends
/// after the first round whose metric reaches it.
pub fn run_simulation(
    fl: &FlConfig,
    arch: ArchitectureId,
    train: &[Sample],
    test: &[Sample],
    record_timing: bool,
    stop_at: Option<f64>,
) -> Result<RunOutcome, CliError> {
    let trainers = build_trainers(train, fl.num_clients, fl.seed)?;
    let mut dispatch = LoopbackDispatch::new(trainers)?;
    let mut fed = Federation::new(fl.clone(), initial_weights(arch, fl.seed)?)?.record_timing(record_timing);
    fed.run_until(&mut dispatch, test, |r| stop_at.is_some_and(|t| r.metric >= t))?;
    Ok(outcome(&fed))
}

pub(crate) fn outcome(fed: &Federation) -> RunOutcome {
    RunOutcome {
        history: fed.history().to_vec(),
        best: fed.best().map(|(r, w)| (r, w.clone())),
        final_weights: fed.global().clone(),
    }
}
