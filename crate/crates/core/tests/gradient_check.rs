use flcascade_core::data::generate_sample;
use flcascade_core::models::{build_network, ArchitectureId, IMAGE_SIZE};
use flcascade_core::nn::gradcheck::{gradient_check, LossTarget};
use flcascade_core::{seed, Tensor};
use rand::Rng;

fn batch(seed: u64) -> (Tensor<f64>, Tensor<f64>, Vec<usize>) {
    let mut rng = seed::rng(seed + 1000);
    let len = 2 * IMAGE_SIZE * IMAGE_SIZE;
    let input: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
    let samples: Vec<_> = (0..2).map(|i| generate_sample(seed * 7 + i, ((seed + i) % 3) as u8).unwrap()).collect();
    let mask: Vec<f64> = samples.iter().flat_map(|s| s.mask.data().iter().map(|&m| m as f64)).collect();
    let shape = [2, 1, IMAGE_SIZE, IMAGE_SIZE];
    (
        Tensor::from_vec(&shape, input).unwrap(),
        Tensor::from_vec(&shape, mask).unwrap(),
        samples.iter().map(|s| s.label.index()).collect(),
    )
}

#[test]
fn segmentation_and_classification_gradients_agree_with_differences() {
    for seed in 0..2 {
        let (input, mask, labels) = batch(seed);
        let (mut seg, _) = build_network::<f64>(ArchitectureId::SegUnetMini, seed).unwrap();
        let r = gradient_check(&mut seg, &input, LossTarget::Mask(&mask), 1e-4, seed).unwrap();
        assert!(r.max_rel_error < 1e-5, "seg seed {seed}: {r:?}");
        let (mut cls, _) = build_network::<f64>(ArchitectureId::ClsCnnPlain, seed).unwrap();
        let r = gradient_check(&mut cls, &input, LossTarget::Labels(&labels), 1e-4, seed).unwrap();
        assert!(r.max_rel_error < 1e-5, "cls seed {seed}: {r:?}");
    }
}

#[test]
fn single_precision_is_refused() {
    let (mut net, _) = build_network::<f32>(ArchitectureId::ClsCnnPlain, 0).unwrap();
    let input = Tensor::<f32>::zeros(&[1, 1, IMAGE_SIZE, IMAGE_SIZE]);
    assert!(gradient_check(&mut net, &input, LossTarget::Labels(&[0]), 1e-4, 0).is_err());
}
