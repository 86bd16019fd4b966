//! Training losses. Each returns the batch-mean loss and its gradient with
//! respect to the network output.

use super::NnError;
use crate::tensor::{Element, Tensor};

/// Probability clamp applied before logs in [`bce_dice_loss`].
pub const PROB_CLAMP: f64 = 1e-7;
/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// Neumaier-compensated running sum. Loss reductions run over thousands of
/// pixels; plain summation leaves rounding noise that swamps central
/// differences of small gradients.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    pub(crate) fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Softmax cross-entropy over `[N, K]` logits.
pub fn cross_entropy_loss<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>), NnError> {
    if logits.rank() != 2 {
        return Err(NnError::Input(format!("logits must be [N, K], got {:?}", logits.shape())));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(NnError::Input(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::Input(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let inv_n = 1.0 / n as f64;
    let mut total = CompensatedSum::default();
    for (row, &label) in labels.iter().enumerate() {
        let z = logits.item(row);
        // Softmax relative to the top logit: `rest` is the exp-sum of all
        // other classes, so confident rows keep their tiny loss and gradient
        // instead of rounding `ln(1 + rest)` and `p - 1` to zero.
        let top = (0..k).fold(0, |best, j| if z[j].as_f64() > z[best].as_f64() { j } else { best });
        let max = z[top].as_f64();
        let exps: Vec<f64> = z.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let rest: f64 = exps.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, e)| e).sum();
        total.add(rest.ln_1p() + (max - z[label].as_f64()));
        let sum = 1.0 + rest;
        let g = grad.item_mut(row);
        for (j, e) in exps.iter().enumerate() {
            let d = match (j == label, j == top) {
                (true, true) => -rest / sum,
                (true, false) => e / sum - 1.0,
                (false, _) => e / sum,
            };
            g[j] = T::from_f64(d * inv_n);
        }
    }
    Ok((total.value() * inv_n, grad))
}

/// Binary cross-entropy plus `1 - soft Dice`, both averaged over the batch.
///
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; the clamp passes no
/// gradient for values outside that range.
pub fn bce_dice_loss<T: Element>(probs: &Tensor<T>, mask: &Tensor<T>) -> Result<(f64, Tensor<T>), NnError> {
    mask.ensure_shape(probs.shape())?;
    if probs.rank() < 2 {
        return Err(NnError::Input(format!("probs must be batched, got {:?}", probs.shape())));
    }
    let n = probs.shape()[0];
    let pixels = probs.len() / n;
    let (lo, hi) = (PROB_CLAMP, 1.0 - PROB_CLAMP);
    let inv_n = 1.0 / n as f64;
    let inv_p = 1.0 / pixels as f64;
    let mut grad = Tensor::zeros(probs.shape());
    let mut total = CompensatedSum::default();

    for i in 0..n {
        let p = probs.item(i);
        let m = mask.item(i);
        let mut bce = CompensatedSum::default();
        let mut inter = CompensatedSum::default();
        let mut sum = CompensatedSum::default();
        for (&pv, &mv) in p.iter().zip(m) {
            let pc = pv.as_f64().clamp(lo, hi);
            let mv = mv.as_f64();
            bce.add(-(mv * pc.ln() + (1.0 - mv) * (1.0 - pc).ln()));
            inter.add(pc * mv);
            sum.add(pc + mv);
        }
        let inter = inter.value();
        let denom = sum.value() + DICE_SMOOTH;
        let dice = (2.0 * inter + DICE_SMOOTH) / denom;
        total.add(bce.value() * inv_p + 1.0 - dice);

        let g = grad.item_mut(i);
        for ((gv, &pv), &mv) in g.iter_mut().zip(p).zip(m) {
            let raw = pv.as_f64();
            if raw < lo || raw > hi {
                continue;
            }
            let mv = mv.as_f64();
            let d_bce = -(mv / raw - (1.0 - mv) / (1.0 - raw)) * inv_p;
            let d_dice = (2.0 * mv * denom - (2.0 * inter + DICE_SMOOTH)) / (denom * denom);
            *gv = T::from_f64((d_bce - d_dice) * inv_n);
        }
    }
    Ok((total.value() * inv_n, grad))
}
