//! First-order optimizers with coupled L2 weight decay.

use serde::{Deserialize, Serialize};

use super::{NnError, Parameter};
use crate::tensor::Element;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAGRAD_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
    Adam,
}

impl OptimizerKind {
    pub fn code(self) -> u8 {
        match self {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adagrad => 1,
            OptimizerKind::Adam => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OptimizerKind::Sgd),
            1 => Some(OptimizerKind::Adagrad),
            2 => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimizerSpec {
    pub fn adagrad(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adagrad,
            lr,
            weight_decay,
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            weight_decay,
        }
    }

    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay,
        }
    }

    /// Checks this optimizer spec for use in a training loop, where `lr == 0` means
    /// "evaluate only" and is allowed.
    pub fn validate(&self) -> Result<(), NnError> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(NnError::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(NnError::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Slot<T> {
    Sgd,
    Adagrad { sum_sq: Vec<T> },
    Adam { m: Vec<T>, v: Vec<T> },
}

/// Optimizer plus its per-parameter accumulators.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Element = f32> {
    spec: OptimizerSpec,
    slots: Vec<Slot<T>>,
    steps: u64,
}

impl<T: Element> Optimizer<T> {
    pub fn new(spec: OptimizerSpec) -> Result<Self, NnError> {
        spec.validate()?;
        if spec.lr <= 0.0 {
            return Err(NnError::Config(format!("learning rate must be > 0, got {}", spec.lr)));
        }
        Ok(Self {
            spec,
            slots: Vec::new(),
            steps: 0,
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    /// Number of steps taken so far (Adam's `t`).
    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn ensure_slots(&mut self, params: &[Parameter<T>]) -> Result<(), NnError> {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| {
                    let n = p.value.len();
                    match self.spec.kind {
                        OptimizerKind::Sgd => Slot::Sgd,
                        OptimizerKind::Adagrad => Slot::Adagrad {
                            sum_sq: vec![T::zero(); n],
                        },
                        OptimizerKind::Adam => Slot::Adam {
                            m: vec![T::zero(); n],
                            v: vec![T::zero(); n],
                        },
                    }
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(NnError::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.slots.len(),
                params.len()
            )));
        }
        for (slot, p) in self.slots.iter().zip(params) {
            let len = match slot {
                Slot::Sgd => p.value.len(),
                Slot::Adagrad { sum_sq } => sum_sq.len(),
                Slot::Adam { m, .. } => m.len(),
            };
            if len != p.value.len() || p.grad.shape() != p.value.shape() {
                return Err(NnError::Config(format!("optimizer state does not match `{}`", p.name)));
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [Parameter<T>]) -> Result<(), NnError> {
        self.ensure_slots(params)?;
        self.steps += 1;
        let lr = T::from_f64(self.spec.lr);
        let wd = T::from_f64(self.spec.weight_decay);
        let decay = self.spec.weight_decay != 0.0;
        let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
        let bc1 = T::from_f64(1.0 - ADAM_BETA1.powi(self.steps as i32));
        let bc2 = T::from_f64(1.0 - ADAM_BETA2.powi(self.steps as i32));
        let adam_eps = T::from_f64(ADAM_EPS);
        let adagrad_eps = T::from_f64(ADAGRAD_EPS);

        for (slot, p) in self.slots.iter_mut().zip(params.iter_mut()) {
            let grads = p.grad.data();
            let values = p.value.data_mut();
            match slot {
                Slot::Sgd => {
                    for (w, &g) in values.iter_mut().zip(grads) {
                        let g = if decay { g + wd * *w } else { g };
                        *w -= lr * g;
                    }
                }
                Slot::Adagrad { sum_sq } => {
                    for ((w, &g), acc) in values.iter_mut().zip(grads).zip(sum_sq.iter_mut()) {
                        let g = if decay { g + wd * *w } else { g };
                        *acc += g * g;
                        *w -= lr * g / (acc.sqrt() + adagrad_eps);
                    }
                }
                Slot::Adam { m, v } => {
                    for (((w, &g), mi), vi) in values.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = if decay { g + wd * *w } else { g };
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + adam_eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(w: f64, g: f64) -> Vec<Parameter<f64>> {
        vec![Parameter {
            name: "p".into(),
            value: Tensor::from_f64s(&[1], &[w]).unwrap(),
            grad: Tensor::from_f64s(&[1], &[g]).unwrap(),
        }]
    }

    #[test]
    fn adagrad_first_and_second_step() {
        let mut opt = Optimizer::new(OptimizerSpec::adagrad(1e-3, 0.0)).unwrap();
        let mut p = param(0.0, 2.0);
        opt.step(&mut p).unwrap();
        let w1 = p[0].value.data()[0];
        assert!((w1 + 1e-3).abs() < 1e-12);
        opt.step(&mut p).unwrap();
        let delta = w1 - p[0].value.data()[0];
        assert!((delta - 1e-3 * 2.0 / 8f64.sqrt()).abs() < 1e-12);
        assert!((delta - 7.071e-4).abs() < 1e-7);
    }

    #[test]
    fn adagrad_zero_gradient_is_a_no_op() {
        let mut opt = Optimizer::new(OptimizerSpec::adagrad(1e-3, 0.0)).unwrap();
        let mut p = param(0.37, 0.0);
        opt.step(&mut p).unwrap();
        assert_eq!(p[0].value.data()[0].to_bits(), 0.37f64.to_bits());
        match &opt.slots[0] {
            Slot::Adagrad { sum_sq } => assert_eq!(sum_sq[0], 0.0),
            _ => unreachable!(),
        }
    }

    #[test]
    fn adam_first_step_is_lr_against_gradient() {
        let mut opt = Optimizer::new(OptimizerSpec::adam(1e-4, 0.0)).unwrap();
        let mut p = param(0.0, 1.0);
        opt.step(&mut p).unwrap();
        assert!((p[0].value.data()[0] + 1e-4).abs() < 1e-11);
        assert_eq!(opt.steps(), 1);

        let mut p = param(0.0, -3.0);
        let mut opt = Optimizer::new(OptimizerSpec::adam(1e-4, 0.0)).unwrap();
        opt.step(&mut p).unwrap();
        assert!(p[0].value.data()[0] > 0.0);
    }

    #[test]
    fn adam_zero_gradient_keeps_zero_weight() {
        let mut opt = Optimizer::new(OptimizerSpec::adam(1e-4, 0.0)).unwrap();
        let mut p = param(0.0, 0.0);
        for t in 1..=5 {
            opt.step(&mut p).unwrap();
            assert_eq!(opt.steps(), t);
        }
        assert_eq!(p[0].value.data()[0], 0.0);
    }

    #[test]
    fn coupled_weight_decay_enters_the_gradient() {
        let mut opt = Optimizer::new(OptimizerSpec::sgd(0.1, 0.5)).unwrap();
        let mut p = param(2.0, 0.0);
        opt.step(&mut p).unwrap();
        assert!((p[0].value.data()[0] - (2.0 - 0.1 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn non_positive_lr_is_rejected() {
        assert!(Optimizer::<f32>::new(OptimizerSpec::adam(0.0, 0.0)).is_err());
        assert!(Optimizer::<f32>::new(OptimizerSpec::adagrad(-1.0, 0.0)).is_err());
        assert!(OptimizerSpec::adam(0.0, 0.0).validate().is_ok());
    }
}
