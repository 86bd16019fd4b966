use std::time::Instant;

use log::{info, warn};

use super::{fedavg_aggregate, select_clients, ClientUpdate, EvalMetric, FedError, FlConfig, RoundRecord, RoundTask};
use crate::data::{stack_images, stack_masks, Sample};
use crate::models::{architecture_builder, ArchitectureId, ModelWeights};
use crate::nn::loss::{bce_dice_loss, cross_entropy_loss, CompensatedSum};
use crate::nn::metrics::{accuracy, jaccard_per_sample};

/// Test samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 32;

/// How the server reaches its clients for one round.
pub trait ClientDispatch {
    /// Runs `task` on every client in `selected` (sorted ids) and returns
    /// their updates. Any failure fails the round.
    fn dispatch(&mut self, selected: &[usize], task: &RoundTask) -> Result<Vec<ClientUpdate>, FedError>;

    /// Called after each completed round.
    fn report(&mut self, _record: &RoundRecord) -> Result<(), FedError> {
        Ok(())
    }

    /// Called once when the federation ends, successfully or not.
    fn finish(&mut self) -> Result<(), FedError> {
        Ok(())
    }
}

/// Metric and loss of `weights` averaged over `test` in order, without augmentation.
pub fn evaluate_global(weights: &ModelWeights, test: &[Sample], metric: EvalMetric) -> Result<(f64, f64), FedError> {
    if test.is_empty() {
        return Err(FedError::Config("empty test set".into()));
    }
    let arch: ArchitectureId = weights.architecture.parse()?;
    if arch.is_segmentation() != (metric == EvalMetric::Jaccard) {
        return Err(FedError::Config(format!("metric {metric:?} does not fit architecture {arch}")));
    }
    let mut net = architecture_builder(arch).build::<f32>()?;
    net.load_weights(weights)?;
    let mut metric_sum = CompensatedSum::default();
    let mut loss_sum = CompensatedSum::default();
    for chunk in test.chunks(EVAL_BATCH) {
        let out = net.forward(&stack_images(chunk)?)?;
        let n = chunk.len() as f64;
        match metric {
            EvalMetric::Jaccard => {
                let mask = stack_masks(chunk)?;
                jaccard_per_sample(out, &mask, 0.5)?.into_iter().for_each(|j| metric_sum.add(j));
                loss_sum.add(bce_dice_loss(out, &mask)?.0 * n);
            }
            EvalMetric::Accuracy => {
                let labels: Vec<usize> = chunk.iter().map(|s| s.label.index()).collect();
                metric_sum.add(accuracy(out, &labels)? * n);
                loss_sum.add(cross_entropy_loss(out, &labels)?.0 * n);
            }
        }
    }
    let n = test.len() as f64;
    Ok((metric_sum.value() / n, loss_sum.value() / n))
}

/// 1-based index of the first round whose metric reaches `threshold`.
pub fn rounds_to_threshold(history: &[f64], threshold: f64) -> Option<usize> {
    history.iter().position(|&m| m >= threshold).map(|i| i + 1)
}

/// One federated round: select, dispatch, aggregate, evaluate. Returns the
/// new global weights; the caller's weights are untouched on error.
pub fn run_round(
    global: &ModelWeights,
    config: &FlConfig,
    round: usize,
    dispatch: &mut dyn ClientDispatch,
    test: &[Sample],
) -> Result<(ModelWeights, RoundRecord), FedError> {
    if round == 0 || round > config.rounds {
        return Err(FedError::Config(format!("round {round} outside 1..={}", config.rounds)));
    }
    let start = Instant::now();
    let selected = select_clients(config.num_clients, config.selected_per_round, round, config.seed)?;
    let task = config.round_task(round, global.clone());
    let updates = dispatch.dispatch(&selected, &task)?;

    let mut got: Vec<usize> = updates.iter().map(|u| u.client_id).collect();
    got.sort_unstable();
    if got != selected {
        return Err(FedError::Aggregation(format!(
            "round {round}: expected updates from {selected:?}, got {got:?}"
        )));
    }
    if let Some(u) = updates.iter().find(|u| u.round != round) {
        return Err(FedError::Aggregation(format!(
            "client {} answered round {} during round {round}",
            u.client_id, u.round
        )));
    }
    if let Some(u) = updates.iter().find(|u| u.weights.architecture != global.architecture) {
        return Err(FedError::ClientFailed {
            round,
            client_id: u.client_id,
            reason: format!("returned `{}` weights", u.weights.architecture),
        });
    }
    let new_global = fedavg_aggregate(&updates)?;
    let (metric, loss) = evaluate_global(&new_global, test, config.eval_metric)?;
    let record = RoundRecord {
        round,
        selected,
        metric,
        loss,
        duration_ms: start.elapsed().as_millis() as u64,
    };
    Ok((new_global, record))
}

/// Round-by-round driver holding the global model, the metric history and
/// the best weights seen so far.
#[derive(Debug, Clone)]
pub struct Federation {
    config: FlConfig,
    global: ModelWeights,
    history: Vec<RoundRecord>,
    best: Option<(usize, ModelWeights)>,
    record_timing: bool,
}

impl Federation {
    pub fn new(config: FlConfig, initial: ModelWeights) -> Result<Self, FedError> {
        config.validate()?;
        Ok(Self {
            config,
            global: initial,
            history: Vec::new(),
            best: None,
            record_timing: false,
        })
    }

    /// Keep wall-clock round durations in the history (otherwise 0, so that
    /// repeated runs produce identical records).
    pub fn record_timing(mut self, on: bool) -> Self {
        self.record_timing = on;
        self
    }

    pub fn config(&self) -> &FlConfig {
        &self.config
    }

    pub fn global(&self) -> &ModelWeights {
        &self.global
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    pub fn metric_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.metric).collect()
    }

    /// Round and weights with the highest test metric; earliest round on ties.
    pub fn best(&self) -> Option<(usize, &ModelWeights)> {
        self.best.as_ref().map(|(r, w)| (*r, w))
    }

    pub fn is_finished(&self) -> bool {
        self.history.len() >= self.config.rounds
    }

    /// Runs the next round. On error the global model is unchanged.
    pub fn step(&mut self, dispatch: &mut dyn ClientDispatch, test: &[Sample]) -> Result<&RoundRecord, FedError> {
        let round = self.history.len() + 1;
        let (weights, mut record) = run_round(&self.global, &self.config, round, dispatch, test)?;
        if !self.record_timing {
            record.duration_ms = 0;
        }
        info!(
            "round {round}: clients {:?} metric {:.4} loss {:.4}",
            record.selected, record.metric, record.loss
        );
        dispatch.report(&record)?;
        let better = self
            .best
            .as_ref()
            .is_none_or(|(r, _)| record.metric > self.history[r - 1].metric);
        if better {
            self.best = Some((round, weights.clone()));
        }
        self.global = weights;
        self.history.push(record);
        Ok(self.history.last().expect("just pushed"))
    }

    /// Runs the remaining rounds, or until `stop` returns true for a record.
    /// The dispatcher is finished in every case; the first error aborts.
    pub fn run_until(
        &mut self,
        dispatch: &mut dyn ClientDispatch,
        test: &[Sample],
        mut stop: impl FnMut(&RoundRecord) -> bool,
    ) -> Result<(), FedError> {
        let mut result = Ok(());
        while !self.is_finished() {
            match self.step(dispatch, test) {
                Ok(record) if stop(record) => break,
                Ok(_) => {}
                Err(e) => {
                    warn!("round {} aborted: {e}", self.history.len() + 1);
                    result = Err(e);
                    break;
                }
            }
        }
        let finished = dispatch.finish();
        result.and(finished)
    }

    pub fn run(&mut self, dispatch: &mut dyn ClientDispatch, test: &[Sample]) -> Result<(), FedError> {
        self.run_until(dispatch, test, |_| false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_sample;
    use crate::federation::{build_trainers, LocalTrainer};
    use crate::models::build_network;
    use crate::nn::optim::OptimizerSpec;
    use crate::tensor::Tensor;

    fn samples(n: usize, offset: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut s = generate_sample((i + offset) as u64, (i % 3) as u8).unwrap();
                s.id = i + offset;
                s
            })
            .collect()
    }

    struct Direct(Vec<LocalTrainer>);

    impl ClientDispatch for Direct {
        fn dispatch(&mut self, selected: &[usize], task: &RoundTask) -> Result<Vec<ClientUpdate>, FedError> {
            selected.iter().map(|&id| self.0[id].train(task)).collect()
        }
    }

    struct Failing;

    impl ClientDispatch for Failing {
        fn dispatch(&mut self, selected: &[usize], task: &RoundTask) -> Result<Vec<ClientUpdate>, FedError> {
            Err(FedError::ClientFailed {
                round: task.round,
                client_id: selected[0],
                reason: "injected".into(),
            })
        }
    }

    fn cls_config(num_clients: usize, lr: f64) -> FlConfig {
        FlConfig {
            num_clients,
            selected_per_round: num_clients,
            local_epochs: 1,
            rounds: 2,
            batch_size: 4,
            optimizer: OptimizerSpec::adam(lr, 0.0),
            seed: 3,
            eval_metric: EvalMetric::Accuracy,
            augment: false,
            persist_optimizer_state: false,
        }
    }

    fn trainers(data: &[Sample], config: &FlConfig) -> Direct {
        Direct(build_trainers(data, config.num_clients, config.seed).unwrap())
    }

    #[test]
    fn threshold_crossing() {
        assert_eq!(rounds_to_threshold(&[0.5, 0.93, 0.95], 0.92), Some(2));
        assert_eq!(rounds_to_threshold(&[0.5, 0.6], 0.92), None);
        assert_eq!(rounds_to_threshold(&[0.1], 0.0), Some(1));
    }

    #[test]
    fn zero_lr_round_keeps_the_global_model() {
        let config = cls_config(1, 0.0);
        let (_, w) = build_network::<f32>(ArchitectureId::ClsCnnPlain, 1).unwrap();
        let train = samples(6, 0);
        let test = samples(3, 100);
        let (next, record) = run_round(&w, &config, 1, &mut trainers(&train, &config), &test).unwrap();
        assert!(next.bit_eq(&w));
        assert_eq!(record.selected, vec![0]);
    }

    #[test]
    fn failed_round_leaves_global_unchanged() {
        let config = cls_config(2, 1e-3);
        let (_, w) = build_network::<f32>(ArchitectureId::ClsCnnPlain, 1).unwrap();
        let mut fed = Federation::new(config, w.clone()).unwrap();
        assert!(fed.run(&mut Failing, &samples(3, 100)).is_err());
        assert!(fed.global().bit_eq(&w));
        assert!(fed.history().is_empty());
    }

    #[test]
    fn federation_records_every_round_and_is_repeatable() {
        let config = cls_config(2, 1e-3);
        let (_, w) = build_network::<f32>(ArchitectureId::ClsCnnPlain, 2).unwrap();
        let train = samples(8, 0);
        let test = samples(3, 100);
        let run = || {
            let mut fed = Federation::new(config.clone(), w.clone()).unwrap();
            fed.run(&mut trainers(&train, &config), &test).unwrap();
            fed
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history().len(), 2);
        assert_eq!(a.history(), b.history());
        assert!(a.global().bit_eq(b.global()));
        assert!(a.history().iter().all(|r| r.duration_ms == 0));
    }

    #[test]
    fn best_weights_prefer_the_earliest_round_on_ties() {
        let config = FlConfig {
            rounds: 3,
            ..cls_config(1, 0.0)
        };
        let (_, w) = build_network::<f32>(ArchitectureId::ClsCnnPlain, 1).unwrap();
        let mut fed = Federation::new(config.clone(), w).unwrap();
        fed.run(&mut trainers(&samples(4, 0), &config), &samples(3, 50)).unwrap();
        assert_eq!(fed.best().unwrap().0, 1);
        let m = fed.metric_history();
        assert!(m.iter().all(|&x| x == m[0]));
    }

    #[test]
    fn uniform_logits_give_chance_accuracy_and_ln3() {
        let (mut net, _) = build_network::<f32>(ArchitectureId::ClsCnnPlain, 1).unwrap();
        for p in net.params_mut() {
            p.value.fill(0.0);
        }
        let w = net.extract_weights();
        let test = samples(3, 0);
        let (acc, loss) = evaluate_global(&w, &test, EvalMetric::Accuracy).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
        assert!((loss - 3f64.ln()).abs() < 1e-6);
        assert_eq!(evaluate_global(&w, &test, EvalMetric::Accuracy).unwrap(), (acc, loss));
    }

    #[test]
    fn mask_copying_model_scores_jaccard_one() {
        // enc1 channel 0 copies the input, reaches dec1 through the skip concat
        // (input channel 16) and the head turns it into a saturated logit. A
        // mask aligned to the 2x2 pooling grid survives pool + upsample exactly.
        let (mut net, _) = build_network::<f32>(ArchitectureId::SegUnetMini, 1).unwrap();
        for p in net.params_mut() {
            p.value.fill(0.0);
        }
        net.param_mut("enc1.weight").unwrap().value.data_mut()[4] = 1.0;
        net.param_mut("dec1.weight").unwrap().value.data_mut()[16 * 9 + 4] = 1.0;
        net.param_mut("head.weight").unwrap().value.data_mut()[4] = 200.0;
        net.param_mut("head.bias").unwrap().value.fill(-100.0);
        let w = net.extract_weights();

        let mut s = generate_sample(1, 0).unwrap();
        let mut mask = Tensor::zeros(&[1, 64, 64]);
        for y in 10..30 {
            for x in 20..40 {
                mask.data_mut()[y * 64 + x] = 1.0;
            }
        }
        s.image = mask.clone();
        s.mask = mask;
        let (jac, _) = evaluate_global(&w, &[s], EvalMetric::Jaccard).unwrap();
        assert_eq!(jac, 1.0);
    }

    #[test]
    fn metric_must_fit_architecture() {
        let (_, w) = build_network::<f32>(ArchitectureId::ClsCnnPlain, 1).unwrap();
        assert!(evaluate_global(&w, &samples(1, 0), EvalMetric::Jaccard).is_err());
        assert!(evaluate_global(&w, &[], EvalMetric::Accuracy).is_err());
    }
}
