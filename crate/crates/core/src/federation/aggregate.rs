use super::{ClientUpdate, FedError};
use crate::models::ModelWeights;
use crate::tensor::Tensor;

/// Sample-count weighted mean of client weights.
///
/// Each element is `sum_k (n_k / n) * w_k`, accumulated in f64 in ascending
/// client-id order and rounded once to f32, so the result does not depend on
/// the order updates arrived in.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ModelWeights, FedError> {
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let first = *order
        .first()
        .ok_or_else(|| FedError::Aggregation("no updates to aggregate".into()))?;
    if order.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(FedError::Aggregation("duplicate client id".into()));
    }
    for u in &order {
        if u.round != first.round {
            return Err(FedError::Aggregation(format!(
                "mixed rounds {} and {}",
                first.round, u.round
            )));
        }
        if u.weights.architecture != first.weights.architecture {
            return Err(FedError::Aggregation(format!(
                "mixed architectures `{}` and `{}`",
                first.weights.architecture, u.weights.architecture
            )));
        }
        if u.num_samples == 0 {
            return Err(FedError::Aggregation(format!("client {} reported 0 samples", u.client_id)));
        }
        let same_layout = u.weights.tensors.len() == first.weights.tensors.len()
            && u.weights.tensors.iter().zip(&first.weights.tensors).all(|((na, ta), (nb, tb))| {
                na == nb && ta.shape() == tb.shape()
            });
        if !same_layout {
            return Err(FedError::Aggregation(format!(
                "client {} sent a different parameter layout",
                u.client_id
            )));
        }
    }
    let total: f64 = order.iter().map(|u| u.num_samples as f64).sum();
    let coeffs: Vec<f64> = order.iter().map(|u| u.num_samples as f64 / total).collect();

    let mut tensors = Vec::with_capacity(first.weights.tensors.len());
    let mut acc = Vec::new();
    for (p, (name, t0)) in first.weights.tensors.iter().enumerate() {
        acc.clear();
        acc.resize(t0.len(), 0.0f64);
        for (u, &c) in order.iter().zip(&coeffs) {
            for (a, &w) in acc.iter_mut().zip(u.weights.tensors[p].1.data()) {
                *a += c * w as f64;
            }
        }
        let data = acc.iter().map(|&a| a as f32).collect();
        tensors.push((name.clone(), Tensor::from_vec(t0.shape(), data).expect("layout checked")));
    }
    Ok(ModelWeights {
        architecture: first.weights.architecture.clone(),
        tensors,
    })
}
