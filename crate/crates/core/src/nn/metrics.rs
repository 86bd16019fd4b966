//! Evaluation metrics.

use super::NnError;
use crate::tensor::{Element, Tensor};

pub const JACCARD_SMOOTH: f64 = 1e-6;

/// Per-sample smoothed intersection-over-union of `probs > threshold` against a binary mask.
pub fn jaccard_per_sample<T: Element>(probs: &Tensor<T>, mask: &Tensor<T>, threshold: f64) -> Result<Vec<f64>, NnError> {
    mask.ensure_shape(probs.shape())?;
    let n = probs.shape()[0];
    Ok((0..n)
        .map(|i| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &m) in probs.item(i).iter().zip(mask.item(i)) {
                let pred = p.as_f64() > threshold;
                let truth = m.as_f64() > 0.5;
                inter += (pred && truth) as usize;
                union += (pred || truth) as usize;
            }
            (inter as f64 + JACCARD_SMOOTH) / (union as f64 + JACCARD_SMOOTH)
        })
        .collect())
}

/// Batch-mean Jaccard index.
pub fn jaccard_index<T: Element>(probs: &Tensor<T>, mask: &Tensor<T>, threshold: f64) -> Result<f64, NnError> {
    let per = jaccard_per_sample(probs, mask, threshold)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Row argmax; ties go to the lowest index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64, NnError> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(NnError::Input(format!(
            "accuracy needs [N, K] logits and N labels, got {:?} and {}",
            logits.shape(),
            labels.len()
        )));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.item(i)) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}
