//! Transport-agnostic FedAvg: IID partitioning, client selection, local
//! training, weighted aggregation and the round state machine.

mod aggregate;
mod local;
mod round;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Sample};
use crate::models::ModelWeights;
use crate::nn::optim::OptimizerSpec;
use crate::nn::NnError;
use crate::seed;

pub use aggregate::fedavg_aggregate;
pub use local::{augment_seed, epoch_order, local_train, client_train_seed, LocalTrainer};
pub use round::{evaluate_global, rounds_to_threshold, run_round, ClientDispatch, Federation, EVAL_BATCH};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("aggregation failed: {0}")]
    Aggregation(String),
    #[error("round {round}: client {client_id} failed: {reason}")]
    ClientFailed {
        round: usize,
        client_id: usize,
        reason: String,
    },
    #[error("round {round} timed out waiting for clients {missing:?}")]
    Timeout { round: usize, missing: Vec<usize> },
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Server-side test metric; also fixes the training loss (Jaccard pairs
/// with BCE-Dice, accuracy with cross-entropy).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMetric {
    Jaccard,
    Accuracy,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    pub num_clients: usize,
    /// Clients selected per round (`sc`).
    pub selected_per_round: usize,
    /// Local epochs per round (`le`).
    pub local_epochs: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    pub eval_metric: EvalMetric,
    /// Random flip + affine on every training sample.
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Keep each client's optimizer accumulators across rounds instead of
    /// starting fresh from every downloaded global model.
    #[serde(default)]
    pub persist_optimizer_state: bool,
}

impl FlConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let counts = [
            ("num_clients", self.num_clients),
            ("selected_per_round", self.selected_per_round),
            ("local_epochs", self.local_epochs),
            ("rounds", self.rounds),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(FedError::Config(format!("{name} must be >= 1")));
        }
        if self.selected_per_round > self.num_clients {
            return Err(FedError::Config(format!(
                "selected_per_round {} exceeds num_clients {}",
                self.selected_per_round, self.num_clients
            )));
        }
        self.optimizer.validate()?;
        Ok(())
    }

    /// The instructions sent to every selected client in `round`.
    pub fn round_task(&self, round: usize, weights: ModelWeights) -> RoundTask {
        RoundTask {
            round,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed: self.seed,
            augment: self.augment,
            persist_optimizer_state: self.persist_optimizer_state,
            weights,
        }
    }
}

/// What a client needs to run one round of local training.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTask {
    pub round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    pub augment: bool,
    pub persist_optimizer_state: bool,
    pub weights: ModelWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: usize,
    pub weights: ModelWeights,
    pub num_samples: usize,
    /// Mean training loss over the last local epoch.
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub metric: f64,
    pub loss: f64,
    /// Wall-clock duration; 0 unless timing is recorded.
    pub duration_ms: u64,
}

/// Seeded shuffle of `0..dataset_size` cut into contiguous runs. Sizes differ
/// by at most one, the larger shares going to the lower client ids.
pub fn partition_iid(dataset_size: usize, num_clients: usize, seed: u64) -> Result<Vec<Vec<usize>>, FedError> {
    if num_clients == 0 || dataset_size < num_clients {
        return Err(FedError::Config(format!(
            "cannot split {dataset_size} samples among {num_clients} clients"
        )));
    }
    let mut idx: Vec<usize> = (0..dataset_size).collect();
    idx.shuffle(&mut seed::rng(seed::derive(seed, "partition", 0)));
    let (base, extra) = (dataset_size / num_clients, dataset_size % num_clients);
    let mut parts = Vec::with_capacity(num_clients);
    let mut start = 0;
    for k in 0..num_clients {
        let len = base + usize::from(k < extra);
        parts.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(parts)
}

/// One trainer per client over its [`partition_iid`] shard of `train`, each
/// shard kept in dataset order.
pub fn build_trainers(train: &[Sample], num_clients: usize, seed: u64) -> Result<Vec<LocalTrainer>, FedError> {
    partition_iid(train.len(), num_clients, seed)?
        .into_iter()
        .enumerate()
        .map(|(k, mut idx)| {
            idx.sort_unstable();
            LocalTrainer::new(k, idx.iter().map(|&i| train[i].clone()).collect())
        })
        .collect()
}

/// Sorted ids of the `sc` clients taking part in `round`, drawn without
/// replacement from a stream keyed by `(seed, round)`.
pub fn select_clients(num_clients: usize, sc: usize, round: usize, seed: u64) -> Result<Vec<usize>, FedError> {
    if sc == 0 || sc > num_clients {
        return Err(FedError::Config(format!(
            "cannot select {sc} of {num_clients} clients"
        )));
    }
    let mut rng = seed::rng(seed::derive(seed, "select", round as u64));
    let mut ids = sample(&mut rng, num_clients, sc).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_samples_three_clients() {
        let p = partition_iid(10, 3, 1).unwrap();
        assert_eq!(p.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 3]);
    }

    #[test]
    fn single_client_gets_everything() {
        let p = partition_iid(7, 1, 4).unwrap();
        let mut all = p[0].clone();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn partition_seeding() {
        assert_eq!(partition_iid(50, 3, 9).unwrap(), partition_iid(50, 3, 9).unwrap());
        assert_ne!(partition_iid(50, 3, 9).unwrap(), partition_iid(50, 3, 10).unwrap());
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(partition_iid(2, 3, 0), Err(FedError::Config(_))));
    }

    #[test]
    fn selection_edge_cases() {
        assert_eq!(select_clients(3, 3, 1, 5).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_clients(1, 1, 1, 5).unwrap(), vec![0]);
        assert_eq!(select_clients(5, 2, 4, 8).unwrap(), select_clients(5, 2, 4, 8).unwrap());
        assert!(select_clients(3, 4, 1, 0).is_err());
        assert!(select_clients(3, 0, 1, 0).is_err());
    }

    #[test]
    fn selection_varies_over_rounds() {
        let picks: std::collections::HashSet<_> =
            (1..=20).map(|r| select_clients(10, 3, r, 1).unwrap()).collect();
        assert!(picks.len() > 1);
    }

    #[test]
    fn config_validation() {
        let mut c = FlConfig {
            num_clients: 3,
            selected_per_round: 3,
            local_epochs: 1,
            rounds: 2,
            batch_size: 2,
            optimizer: OptimizerSpec::adagrad(1e-3, 0.0),
            seed: 0,
            eval_metric: EvalMetric::Jaccard,
            augment: true,
            persist_optimizer_state: false,
        };
        assert!(c.validate().is_ok());
        c.selected_per_round = 4;
        assert!(c.validate().is_err());
        c.selected_per_round = 1;
        c.rounds = 0;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_complete_and_balanced(n in 1usize..300, k in 1usize..12, seed: u64) {
            prop_assume!(n >= k);
            let parts = partition_iid(n, k, seed).unwrap();
            prop_assert_eq!(parts.len(), k);
            let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
            prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(sizes[0] - sizes[k - 1] <= 1);
        }

        #[test]
        fn selection_is_sorted_distinct_and_in_range(n in 1usize..20, seed: u64, round in 1usize..50) {
            let sc = 1 + (seed as usize % n);
            let s = select_clients(n, sc, round, seed).unwrap();
            prop_assert_eq!(s.len(), sc);
            prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.iter().all(|&c| c < n));
        }
    }
}
