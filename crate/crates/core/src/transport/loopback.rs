use crate::federation::{ClientDispatch, ClientUpdate, FedError, LocalTrainer, RoundRecord, RoundTask};

use super::wire::{decode_message, encode_message, Message};

/// Runs the selected clients in-process, one after another in ascending id
/// order. With serialization on (the default) every task and update is
/// encoded to a frame and decoded again, exactly as it would cross TCP.
#[derive(Debug)]
pub struct LoopbackDispatch {
    trainers: Vec<LocalTrainer>,
    serialize: bool,
    frames: usize,
    bytes: usize,
}

impl LoopbackDispatch {
    /// `trainers[k]` must be client `k`.
    pub fn new(trainers: Vec<LocalTrainer>) -> Result<Self, FedError> {
        if let Some((k, t)) = trainers.iter().enumerate().find(|(k, t)| t.client_id() != *k) {
            return Err(FedError::Config(format!("trainer at position {k} has client id {}", t.client_id())));
        }
        Ok(Self {
            trainers,
            serialize: true,
            frames: 0,
            bytes: 0,
        })
    }

    pub fn serialize(mut self, on: bool) -> Self {
        self.serialize = on;
        self
    }

    /// Frames and bytes pushed through the codec so far.
    pub fn traffic(&self) -> (usize, usize) {
        (self.frames, self.bytes)
    }

    pub fn trainers(&self) -> &[LocalTrainer] {
        &self.trainers
    }

    fn wire(&mut self, msg: Message) -> Result<Message, FedError> {
        if !self.serialize {
            return Ok(msg);
        }
        let bytes = encode_message(&msg)?;
        self.frames += 1;
        self.bytes += bytes.len();
        Ok(decode_message(&bytes)?)
    }
}

impl ClientDispatch for LoopbackDispatch {
    fn dispatch(&mut self, selected: &[usize], task: &RoundTask) -> Result<Vec<ClientUpdate>, FedError> {
        let mut ids = selected.to_vec();
        ids.sort_unstable();
        let mut updates = Vec::with_capacity(ids.len());
        for id in ids {
            if id >= self.trainers.len() {
                return Err(FedError::Config(format!("no client {id} registered")));
            }
            let Message::RoundStart(received) = self.wire(Message::RoundStart(task.clone()))? else {
                unreachable!("the codec preserves the message kind")
            };
            let update = self.trainers[id].train(&received).map_err(|e| FedError::ClientFailed {
                round: task.round,
                client_id: id,
                reason: e.to_string(),
            })?;
            let Message::RoundResult(update) = self.wire(Message::RoundResult(update))? else {
                unreachable!("the codec preserves the message kind")
            };
            updates.push(update);
        }
        Ok(updates)
    }

    fn report(&mut self, record: &RoundRecord) -> Result<(), FedError> {
        for _ in 0..self.trainers.len() {
            self.wire(Message::EvalReport {
                round: record.round,
                metric: record.metric,
                loss: record.loss,
            })?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<(), FedError> {
        for _ in 0..self.trainers.len() {
            self.wire(Message::Shutdown)?;
        }
        Ok(())
    }
}
