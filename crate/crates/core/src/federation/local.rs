use std::borrow::Cow;

use rand::seq::SliceRandom;

use super::{ClientUpdate, FedError, RoundTask};
use crate::data::{augment, stack_images, stack_masks, Sample};
use crate::models::{architecture_builder, ArchitectureId};
use crate::nn::loss::{bce_dice_loss, cross_entropy_loss, CompensatedSum};
use crate::nn::optim::Optimizer;
use crate::nn::Network;
use crate::seed;

/// Seed of client `client_id`'s mini-batch shuffles.
pub fn client_train_seed(seed: u64, client_id: usize) -> u64 {
    seed::derive(seed, "client", client_id as u64)
}

/// Visiting order of a shard of `n` samples in epoch `global_epoch`, counted
/// across rounds from 0.
pub fn epoch_order(train_seed: u64, global_epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(train_seed, "epoch", global_epoch as u64)));
    order
}

/// Augmentation seed of one sample in one epoch.
pub fn augment_seed(seed: u64, global_epoch: usize, sample_id: usize) -> u64 {
    seed::derive(seed::derive(seed, "augment", global_epoch as u64), "sample", sample_id as u64)
}

/// A client: its local shard plus the network and optimizer it trains with.
#[derive(Debug)]
pub struct LocalTrainer {
    client_id: usize,
    shard: Vec<Sample>,
    net: Option<Network<f32>>,
    optimizer: Option<Optimizer<f32>>,
}

impl LocalTrainer {
    pub fn new(client_id: usize, shard: Vec<Sample>) -> Result<Self, FedError> {
        if shard.is_empty() {
            return Err(FedError::Config(format!("client {client_id} has an empty partition")));
        }
        Ok(Self {
            client_id,
            shard,
            net: None,
            optimizer: None,
        })
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn num_samples(&self) -> usize {
        self.shard.len()
    }

    pub fn shard(&self) -> &[Sample] {
        &self.shard
    }

    /// Loads the task's global weights and runs `local_epochs` passes.
    pub fn train(&mut self, task: &RoundTask) -> Result<ClientUpdate, FedError> {
        task.optimizer.validate()?;
        if task.local_epochs == 0 || task.batch_size == 0 || task.round == 0 {
            return Err(FedError::Config("round, local_epochs and batch_size must be >= 1".into()));
        }
        let arch: ArchitectureId = task.weights.architecture.parse()?;
        if self.net.as_ref().map(|n| n.architecture()) != Some(arch.as_str()) {
            self.net = Some(architecture_builder(arch).build()?);
            self.optimizer = None;
        }
        let net = self.net.as_mut().expect("network built above");
        net.load_weights(&task.weights)?;

        let keep = task.persist_optimizer_state
            && self.optimizer.as_ref().is_some_and(|o| *o.spec() == task.optimizer);
        if !keep {
            self.optimizer = if task.optimizer.lr > 0.0 {
                Some(Optimizer::new(task.optimizer)?)
            } else {
                None
            };
        }

        let train_seed = client_train_seed(task.seed, self.client_id);
        let mut last_loss = 0.0;
        for e in 0..task.local_epochs {
            let global_epoch = (task.round - 1) * task.local_epochs + e;
            last_loss = train_epoch(
                net,
                self.optimizer.as_mut(),
                &self.shard,
                arch.is_segmentation(),
                task,
                train_seed,
                global_epoch,
            )?;
        }
        Ok(ClientUpdate {
            client_id: self.client_id,
            round: task.round,
            weights: net.extract_weights(),
            num_samples: self.shard.len(),
            train_loss: last_loss,
        })
    }
}

/// One pass over `shard` in seeded mini-batches; the last batch may be short.
/// Returns the sample-weighted mean loss. Without an optimizer (lr = 0) the
/// weights are left untouched.
fn train_epoch(
    net: &mut Network<f32>,
    mut optimizer: Option<&mut Optimizer<f32>>,
    shard: &[Sample],
    segmentation: bool,
    task: &RoundTask,
    train_seed: u64,
    global_epoch: usize,
) -> Result<f64, FedError> {
    let order = epoch_order(train_seed, global_epoch, shard.len());
    let mut total = CompensatedSum::default();
    for chunk in order.chunks(task.batch_size) {
        let batch: Vec<Cow<Sample>> = chunk
            .iter()
            .map(|&i| {
                let s = &shard[i];
                if task.augment {
                    Cow::Owned(augment(s, augment_seed(task.seed, global_epoch, s.id)))
                } else {
                    Cow::Borrowed(s)
                }
            })
            .collect();
        let input = stack_images(batch.iter().map(|s| s.as_ref()))?;
        let out = net.forward(&input)?;
        let (loss, grad) = if segmentation {
            let mask = stack_masks(batch.iter().map(|s| s.as_ref()))?;
            bce_dice_loss(out, &mask)?
        } else {
            let labels: Vec<usize> = batch.iter().map(|s| s.label.index()).collect();
            cross_entropy_loss(out, &labels)?
        };
        total.add(loss * chunk.len() as f64);
        if let Some(opt) = optimizer.as_deref_mut() {
            net.backward(&grad)?;
            opt.step(net.params_mut())?;
        }
    }
    Ok(total.value() / shard.len() as f64)
}

/// Local training from fresh optimizer state; see [`LocalTrainer::train`].
pub fn local_train(client_id: usize, shard: &[Sample], task: &RoundTask) -> Result<ClientUpdate, FedError> {
    LocalTrainer::new(client_id, shard.to_vec())?.train(task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_sample;
    use crate::models::build_network;
    use crate::nn::optim::OptimizerSpec;

    fn shard(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut s = generate_sample(i as u64, (i % 3) as u8).unwrap();
                s.id = i;
                s
            })
            .collect()
    }

    fn task(arch: ArchitectureId, lr: f64, le: usize) -> RoundTask {
        RoundTask {
            round: 1,
            local_epochs: le,
            batch_size: 4,
            optimizer: OptimizerSpec::adam(lr, 0.0),
            seed: 17,
            augment: true,
            persist_optimizer_state: false,
            weights: build_network::<f32>(arch, 5).unwrap().1,
        }
    }

    #[test]
    fn zero_learning_rate_returns_input_weights() {
        let t = task(ArchitectureId::ClsCnnPlain, 0.0, 2);
        let u = local_train(0, &shard(6), &t).unwrap();
        assert!(u.weights.bit_eq(&t.weights));
        assert_eq!(u.num_samples, 6);
        assert!(u.train_loss > 0.0);
    }

    #[test]
    fn deterministic() {
        let t = task(ArchitectureId::SegUnetMini, 1e-3, 1);
        let a = local_train(1, &shard(5), &t).unwrap();
        let b = local_train(1, &shard(5), &t).unwrap();
        assert!(a.weights.bit_eq(&b.weights));
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
    }

    #[test]
    fn more_epochs_do_not_raise_the_loss() {
        let data = shard(12);
        let mut t = task(ArchitectureId::ClsCnnPlain, 3e-3, 1);
        t.augment = false;
        let one = local_train(0, &data, &t).unwrap();
        t.local_epochs = 4;
        let four = local_train(0, &data, &t).unwrap();
        assert!(four.train_loss <= one.train_loss, "{} > {}", four.train_loss, one.train_loss);
        assert!(!four.weights.bit_eq(&one.weights));
    }

    #[test]
    fn empty_partition_rejected() {
        let t = task(ArchitectureId::ClsCnnPlain, 1e-3, 1);
        assert!(matches!(local_train(0, &[], &t), Err(FedError::Config(_))));
    }

    #[test]
    fn epoch_orders_are_permutations_that_change_per_epoch() {
        let a = epoch_order(3, 0, 20);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_ne!(a, epoch_order(3, 1, 20));
    }
}
