use flcascade_core::federation::{fedavg_aggregate, ClientUpdate};
use flcascade_core::models::ModelWeights;
use flcascade_core::{seed, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Distance in representable f32 steps.
fn ulps(a: f32, b: f32) -> u32 {
    let key = |x: f32| {
        let bits = x.to_bits() as i32;
        if bits < 0 { i32::MIN - bits } else { bits }
    };
    key(a).abs_diff(key(b))
}

fn update(client_id: usize, num_samples: usize, tensors: Vec<(String, Tensor<f32>)>) -> ClientUpdate {
    ClientUpdate {
        client_id,
        round: 1,
        weights: ModelWeights {
            architecture: "cls-cnn-plain".into(),
            tensors,
        },
        num_samples,
        train_loss: 0.0,
    }
}

fn random_updates(seed: u64, clients: usize) -> Vec<ClientUpdate> {
    let mut rng = seed::rng(seed);
    let shapes: [&[usize]; 3] = [&[4, 1, 3, 3], &[4], &[3, 4]];
    (0..clients)
        .map(|k| {
            let n = rng.gen_range(1..500);
            let tensors = shapes
                .iter()
                .enumerate()
                .map(|(p, shape)| {
                    let len: usize = shape.iter().product();
                    let scale = 10f32.powi(rng.gen_range(-3..3));
                    let data = (0..len).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect();
                    (format!("p{p}"), Tensor::from_vec(shape, data).unwrap())
                })
                .collect();
            update(k, n, tensors)
        })
        .collect()
}

/// Independent weighted mean: `sum(n_k * w_k) / sum(n_k)` element by element.
fn oracle(updates: &[ClientUpdate]) -> Vec<Vec<f32>> {
    let total: f64 = updates.iter().map(|u| u.num_samples as f64).sum();
    let first = &updates[0].weights.tensors;
    (0..first.len())
        .map(|p| {
            (0..first[p].1.len())
                .map(|i| {
                    let mut s = 0.0f64;
                    for u in updates {
                        s += u.num_samples as f64 * u.weights.tensors[p].1.data()[i] as f64;
                    }
                    (s / total) as f32
                })
                .collect()
        })
        .collect()
}

fn max_ulps(updates: &[ClientUpdate]) -> u32 {
    let got = fedavg_aggregate(updates).unwrap();
    let want = oracle(updates);
    got.tensors
        .iter()
        .zip(&want)
        .flat_map(|((_, t), w)| t.data().iter().zip(w).map(|(&a, &b)| ulps(a, b)))
        .max()
        .unwrap()
}

#[test]
fn matches_scalar_oracle_within_one_ulp() {
    for seed in 0..12 {
        for clients in 3..=5 {
            let worst = max_ulps(&random_updates(seed, clients));
            assert!(worst <= 1, "seed {seed}, {clients} clients: {worst} ulps");
        }
    }
}

#[test]
fn identical_clients_average_to_themselves() {
    let base = random_updates(7, 1).remove(0);
    let updates: Vec<_> = (0..4).map(|k| update(k, 10 + 5 * k, base.weights.tensors.clone())).collect();
    let avg = fedavg_aggregate(&updates).unwrap();
    for ((_, a), (_, b)) in avg.tensors.iter().zip(&base.weights.tensors) {
        for (&x, &y) in a.data().iter().zip(b.data()) {
            assert!(ulps(x, y) <= 1, "{x} vs {y}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arrival_order_does_not_matter(seed: u64, clients in 3usize..6, rotate in 0usize..6) {
        let updates = random_updates(seed, clients);
        let mut shuffled = updates.clone();
        shuffled.rotate_left(rotate % clients);
        shuffled.swap(0, clients - 1);
        let a = fedavg_aggregate(&updates).unwrap();
        let b = fedavg_aggregate(&shuffled).unwrap();
        prop_assert!(a.bit_eq(&b));
        prop_assert!(max_ulps(&updates) <= 1);
    }
}
