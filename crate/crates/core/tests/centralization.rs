//! One client selected every round with persistent optimizer state is plain
//! centralized training split into rounds.

use flcascade_core::data::{augment, build_dataset, stack_images, DatasetConfig, Sample};
use flcascade_core::federation::{
    augment_seed, build_trainers, client_train_seed, epoch_order, EvalMetric, Federation, FlConfig,
};
use flcascade_core::models::{build_network, ArchitectureId};
use flcascade_core::nn::loss::cross_entropy_loss;
use flcascade_core::nn::optim::{Optimizer, OptimizerSpec};
use flcascade_core::transport::LoopbackDispatch;

fn config() -> FlConfig {
    FlConfig {
        num_clients: 1,
        selected_per_round: 1,
        local_epochs: 2,
        rounds: 3,
        batch_size: 8,
        optimizer: OptimizerSpec::adam(1e-3, 1e-5),
        seed: 21,
        eval_metric: EvalMetric::Accuracy,
        augment: true,
        persist_optimizer_state: true,
    }
}

fn centralized(train: &[Sample], config: &FlConfig, epochs: usize) -> flcascade_core::models::ModelWeights {
    let (mut net, _) = build_network::<f32>(ArchitectureId::ClsCnnPlain, config.seed).unwrap();
    let mut opt = Optimizer::new(config.optimizer).unwrap();
    let shuffle_seed = client_train_seed(config.seed, 0);
    for epoch in 0..epochs {
        let order = epoch_order(shuffle_seed, epoch, train.len());
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| augment(&train[i], augment_seed(config.seed, epoch, train[i].id)))
                .collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label.index()).collect();
            let out = net.forward(&stack_images(&batch).unwrap()).unwrap();
            let (_, grad) = cross_entropy_loss(out, &labels).unwrap();
            net.backward(&grad).unwrap();
            opt.step(net.params_mut()).unwrap();
        }
    }
    net.extract_weights()
}

#[test]
fn three_rounds_of_two_epochs_equal_six_centralized_epochs() {
    let data = build_dataset(&DatasetConfig {
        per_class: [12; 3],
        split_ratio: [9, 1],
        seed: 4,
    })
    .unwrap();
    let config = config();
    let (_, initial) = build_network::<f32>(ArchitectureId::ClsCnnPlain, config.seed).unwrap();
    let mut fed = Federation::new(config.clone(), initial).unwrap();
    let mut dispatch = LoopbackDispatch::new(build_trainers(&data.train, 1, config.seed).unwrap()).unwrap();
    fed.run(&mut dispatch, &data.test).unwrap();

    let central = centralized(&data.train, &config, 6);
    let diff = fed.global().max_abs_diff(&central).unwrap();
    assert!(diff <= 1e-6, "max abs diff {diff:e}");
}

#[test]
fn fresh_optimizer_per_round_is_not_centralized_training() {
    let data = build_dataset(&DatasetConfig {
        per_class: [12; 3],
        split_ratio: [9, 1],
        seed: 4,
    })
    .unwrap();
    let config = FlConfig {
        persist_optimizer_state: false,
        ..config()
    };
    let (_, initial) = build_network::<f32>(ArchitectureId::ClsCnnPlain, config.seed).unwrap();
    let mut fed = Federation::new(config.clone(), initial).unwrap();
    let mut dispatch = LoopbackDispatch::new(build_trainers(&data.train, 1, config.seed).unwrap()).unwrap();
    fed.run(&mut dispatch, &data.test).unwrap();
    let diff = fed.global().max_abs_diff(&centralized(&data.train, &config, 6)).unwrap();
    assert!(diff > 1e-6, "Adam moments restart each round, got {diff:e}");
}
