//! Central-difference gradient verification.

use rand::seq::index::sample;

use super::loss::{bce_dice_loss, cross_entropy_loss};
use super::{Network, NnError};
use crate::seed;
use crate::tensor::{Element, Precision, Tensor};

/// Elements checked per parameter tensor; smaller tensors are checked whole.
pub const ELEMENTS_PER_PARAM: usize = 100;

#[derive(Debug, Clone, Copy)]
pub enum LossTarget<'a, T: Element> {
    /// Class labels for cross-entropy on `[N, K]` logits.
    Labels(&'a [usize]),
    /// Binary mask for BCE-Dice on `[N, 1, H, W]` probabilities.
    Mask(&'a Tensor<T>),
}

/// Forward pass plus loss. Returns the loss and its output gradient.
pub fn forward_loss<T: Element>(
    net: &mut Network<T>,
    input: &Tensor<T>,
    target: LossTarget<'_, T>,
) -> Result<(f64, Tensor<T>), NnError> {
    let out = net.forward(input)?;
    match target {
        LossTarget::Labels(labels) => cross_entropy_loss(out, labels),
        LossTarget::Mask(mask) => bce_dice_loss(out, mask),
    }
}

/// Step refinements tried when `±h` crosses a ReLU or pooling kink.
const MAX_REFINEMENTS: usize = 4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst element, and that element's two estimates.
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Largest `|analytic - numeric|` over all checked elements.
    pub max_abs_error: f64,
    pub checked: usize,
    /// Elements whose step had to be shrunk to stay on one linear piece.
    pub refined: usize,
    /// Elements sitting on a kink even at the smallest step; not compared.
    pub skipped_at_kink: usize,
}

/// Compares analytic parameter gradients with `(f(w+h) - f(w-h)) / 2h`.
///
/// Relative error per element is `|a - n| / max(1e-12, |a| + |n|)`. Requires a
/// double-precision network. Parameter values are restored afterwards.
///
/// ReLU and max-pool make the loss piecewise smooth. When `w ± h` lands on a
/// different piece than `w` (detected through [`Network::kink_signature`]) the
/// difference quotient is meaningless, so the step is divided by 10 up to
/// four times; elements still straddling a kink are counted and skipped.
pub fn gradient_check<T: Element>(
    net: &mut Network<T>,
    input: &Tensor<T>,
    target: LossTarget<'_, T>,
    h: f64,
    sample_seed: u64,
) -> Result<GradCheckReport, NnError> {
    if T::PRECISION != Precision::Double {
        return Err(NnError::Precision {
            required: Precision::Double,
            actual: T::PRECISION,
        });
    }
    let (_, out_grad) = forward_loss(net, input, target)?;
    let base_signature = net.kink_signature();
    net.backward(&out_grad)?;
    let analytic: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g.as_f64()).collect())
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        refined: 0,
        skipped_at_kink: 0,
    };
    #[allow(clippy::needless_range_loop)]
    for pi in 0..net.params().len() {
        let len = net.params()[pi].value.len();
        let indices: Vec<usize> = if len <= ELEMENTS_PER_PARAM {
            (0..len).collect()
        } else {
            let mut rng = seed::rng(seed::derive(sample_seed, &net.params()[pi].name, 0));
            let mut picked = sample(&mut rng, len, ELEMENTS_PER_PARAM).into_vec();
            picked.sort_unstable();
            picked
        };
        for idx in indices {
            let original = net.params()[pi].value.data()[idx];
            let mut step = h;
            let mut numeric = None;
            for attempt in 0..=MAX_REFINEMENTS {
                net.params_mut()[pi].value.data_mut()[idx] = T::from_f64(original.as_f64() + step);
                let (plus, _) = forward_loss(net, input, target)?;
                let same_plus = net.kink_signature() == base_signature;
                net.params_mut()[pi].value.data_mut()[idx] = T::from_f64(original.as_f64() - step);
                let (minus, _) = forward_loss(net, input, target)?;
                let same_minus = net.kink_signature() == base_signature;
                net.params_mut()[pi].value.data_mut()[idx] = original;
                if same_plus && same_minus {
                    if attempt > 0 {
                        report.refined += 1;
                    }
                    numeric = Some((plus - minus) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            let Some(numeric) = numeric else {
                report.skipped_at_kink += 1;
                continue;
            };
            let a = analytic[pi][idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            if !rel.is_finite() {
                return Err(NnError::Input(format!(
                    "non-finite gradient comparison at {}[{idx}]",
                    net.params()[pi].name
                )));
            }
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = net.params()[pi].name.clone();
                report.worst_index = idx;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
