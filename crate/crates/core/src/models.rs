//! The three toy architectures and the weight container exchanged between
//! server and clients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::{Network, NetworkBuilder, NnError};
use crate::tensor::{Element, Tensor};

/// Side length of every model input.
pub const IMAGE_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchitectureId {
    #[serde(rename = "seg-unet-mini")]
    SegUnetMini,
    #[serde(rename = "cls-cnn-plain")]
    ClsCnnPlain,
    #[serde(rename = "cls-cnn-skip")]
    ClsCnnSkip,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 3] = [
        ArchitectureId::SegUnetMini,
        ArchitectureId::ClsCnnPlain,
        ArchitectureId::ClsCnnSkip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureId::SegUnetMini => "seg-unet-mini",
            ArchitectureId::ClsCnnPlain => "cls-cnn-plain",
            ArchitectureId::ClsCnnSkip => "cls-cnn-skip",
        }
    }

    pub fn is_segmentation(self) -> bool {
        self == ArchitectureId::SegUnetMini
    }

    /// Layer id of the last convolutional activation (the Grad-CAM tap).
    pub fn last_conv_activation(self) -> Option<usize> {
        match self {
            ArchitectureId::SegUnetMini => None,
            ArchitectureId::ClsCnnPlain => Some(7),
            ArchitectureId::ClsCnnSkip => Some(10),
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureId {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArchitectureId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| NnError::Config(format!("unknown architecture `{s}`")))
    }
}

/// Ordered named parameter tensors of one architecture, always single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub architecture: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl ModelWeights {
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and NaN payloads.
    pub fn bit_eq(&self, other: &ModelWeights) -> bool {
        self.architecture == other.architecture
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            })
    }

    /// Largest elementwise absolute difference; `None` if layouts differ.
    pub fn max_abs_diff(&self, other: &ModelWeights) -> Option<f64> {
        if self.tensors.len() != other.tensors.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if na != nb {
                return None;
            }
            worst = worst.max(ta.max_abs_diff(tb).ok()?);
        }
        Some(worst)
    }
}

/// Layer stack of `arch` without initialization.
pub fn architecture_builder(arch: ArchitectureId) -> NetworkBuilder {
    let input = [1, IMAGE_SIZE, IMAGE_SIZE];
    match arch {
        // 0 enc1 1->8 @64 | 1 relu | 2 pool ->32 (skip source)
        // 3 enc2 8->16 @32 | 4 relu | 5 pool ->16
        // 6 mid 16->16 @16 | 7 relu | 8 up ->32 | 9 concat(2) -> 24ch
        // 10 dec1 24->8 @32 | 11 relu | 12 up ->64 | 13 head 8->1 | 14 sigmoid
        ArchitectureId::SegUnetMini => NetworkBuilder::new(arch.as_str(), &input)
            .conv("enc1", 1, 8, 3, 1)
            .relu()
            .max_pool()
            .conv("enc2", 8, 16, 3, 1)
            .relu()
            .max_pool()
            .conv("mid", 16, 16, 3, 1)
            .relu()
            .upsample()
            .concat(2)
            .conv("dec1", 24, 8, 3, 1)
            .relu()
            .upsample()
            .conv("head", 8, 1, 3, 1)
            .sigmoid(),
        // 0 conv1 | 1 relu | 2 pool | 3 conv2 | 4 relu | 5 pool
        // 6 conv3 | 7 relu | 8 pool | 9 gap | 10 fc
        ArchitectureId::ClsCnnPlain => NetworkBuilder::new(arch.as_str(), &input)
            .conv("conv1", 1, 8, 3, 1)
            .relu()
            .max_pool()
            .conv("conv2", 8, 16, 3, 1)
            .relu()
            .max_pool()
            .conv("conv3", 16, 32, 3, 1)
            .relu()
            .max_pool()
            .global_avg_pool()
            .dense("fc", 32, NUM_CLASSES),
        // Middle stage is a residual block: conv2 -> relu -> conv2b -> relu, plus relu(conv2).
        // 0 conv1 | 1 relu | 2 pool | 3 conv2 | 4 relu | 5 conv2b | 6 relu | 7 add(4)
        // 8 pool | 9 conv3 | 10 relu | 11 pool | 12 gap | 13 fc
        ArchitectureId::ClsCnnSkip => NetworkBuilder::new(arch.as_str(), &input)
            .conv("conv1", 1, 8, 3, 1)
            .relu()
            .max_pool()
            .conv("conv2", 8, 16, 3, 1)
            .relu()
            .conv("conv2b", 16, 16, 3, 1)
            .relu()
            .add_skip(4)
            .max_pool()
            .conv("conv3", 16, 32, 3, 1)
            .relu()
            .max_pool()
            .global_avg_pool()
            .dense("fc", 32, NUM_CLASSES),
    }
}

/// Builds `arch` with seeded He-uniform weights.
pub fn build_network<T: Element>(arch: ArchitectureId, seed: u64) -> Result<(Network<T>, ModelWeights), NnError> {
    let mut net: Network<T> = architecture_builder(arch).build()?;
    net.init_he_uniform(seed);
    let weights = net.extract_weights();
    Ok((net, weights))
}

impl<T: Element> Network<T> {
    /// Current parameters as single-precision [`ModelWeights`].
    pub fn extract_weights(&self) -> ModelWeights {
        ModelWeights {
            architecture: self.architecture().to_string(),
            tensors: self.params().iter().map(|p| (p.name.clone(), p.value.cast())).collect(),
        }
    }

    /// Replaces all parameters. Fails without modifying the network if the
    /// architecture, names or shapes differ.
    pub fn load_weights(&mut self, weights: &ModelWeights) -> Result<(), NnError> {
        if weights.architecture != self.architecture() {
            return Err(NnError::IncompatibleWeights {
                name: weights.tensors.first().map(|(n, _)| n.clone()).unwrap_or_default(),
                reason: format!(
                    "architecture `{}` does not match network `{}`",
                    weights.architecture,
                    self.architecture()
                ),
            });
        }
        if weights.tensors.len() != self.params().len() {
            let name = self
                .params()
                .iter()
                .map(|p| p.name.as_str())
                .zip(weights.tensors.iter().map(|(n, _)| n.as_str()).chain(std::iter::repeat("")))
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.to_string())
                .unwrap_or_else(|| weights.tensors.last().map(|(n, _)| n.clone()).unwrap_or_default());
            return Err(NnError::IncompatibleWeights {
                name,
                reason: format!("expected {} tensors, got {}", self.params().len(), weights.tensors.len()),
            });
        }
        for (p, (name, t)) in self.params().iter().zip(&weights.tensors) {
            if &p.name != name {
                return Err(NnError::IncompatibleWeights {
                    name: name.clone(),
                    reason: format!("expected parameter `{}`", p.name),
                });
            }
            if p.value.shape() != t.shape() {
                return Err(NnError::IncompatibleWeights {
                    name: name.clone(),
                    reason: format!("shape {:?} != expected {:?}", t.shape(), p.value.shape()),
                });
            }
        }
        for (p, (_, t)) in self.params_mut().iter_mut().zip(&weights.tensors) {
            p.value = t.cast();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_follow_layer_arithmetic() {
        let conv = |i: usize, o: usize| i * o * 9 + o;
        let expected = [
            (ArchitectureId::SegUnetMini, conv(1, 8) + conv(8, 16) + conv(16, 16) + conv(24, 8) + conv(8, 1)),
            (ArchitectureId::ClsCnnPlain, conv(1, 8) + conv(8, 16) + conv(16, 32) + 32 * 3 + 3),
            (
                ArchitectureId::ClsCnnSkip,
                conv(1, 8) + conv(8, 16) + conv(16, 16) + conv(16, 32) + 32 * 3 + 3,
            ),
        ];
        for (arch, count) in expected {
            let (_, a) = build_network::<f32>(arch, 1).unwrap();
            let (_, b) = build_network::<f32>(arch, 99).unwrap();
            assert_eq!(a.parameter_count(), count, "{arch}");
            assert_eq!(b.parameter_count(), count, "{arch}");
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let (_, a) = build_network::<f32>(ArchitectureId::SegUnetMini, 7).unwrap();
        let (_, b) = build_network::<f32>(ArchitectureId::SegUnetMini, 7).unwrap();
        let (_, c) = build_network::<f32>(ArchitectureId::SegUnetMini, 8).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn he_uniform_bounds() {
        let (net, _) = build_network::<f64>(ArchitectureId::ClsCnnPlain, 3).unwrap();
        let w = net.param("conv2.weight").unwrap();
        let bound = (6.0f64 / 72.0).sqrt();
        assert!(w.value.data().iter().all(|v| v.abs() <= bound));
        assert!(net.param("conv2.bias").unwrap().value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seg_output_is_probability_map() {
        let (mut net, _) = build_network::<f32>(ArchitectureId::SegUnetMini, 1).unwrap();
        let x = Tensor::full(&[1, 1, 64, 64], 0.5);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn classifiers_emit_three_logits() {
        for arch in [ArchitectureId::ClsCnnPlain, ArchitectureId::ClsCnnSkip] {
            let (mut net, _) = build_network::<f32>(arch, 1).unwrap();
            let y = net.forward(&Tensor::full(&[3, 1, 64, 64], 0.2)).unwrap();
            assert_eq!(y.shape(), &[3, 3]);
            let tap = arch.last_conv_activation().unwrap();
            assert_eq!(net.layers()[tap].spec, crate::nn::LayerSpec::Relu);
            assert_eq!(net.layer_output_shape(tap).unwrap().len(), 3);
        }
    }

    #[test]
    fn load_extract_round_trip() {
        let (mut net, w) = build_network::<f32>(ArchitectureId::ClsCnnSkip, 4).unwrap();
        net.load_weights(&w).unwrap();
        assert!(net.extract_weights().bit_eq(&w));
    }

    #[test]
    fn load_rejects_altered_shape_naming_the_parameter() {
        let (mut net, mut w) = build_network::<f32>(ArchitectureId::ClsCnnPlain, 4).unwrap();
        w.tensors[2].1 = Tensor::zeros(&[16, 8, 3, 2]);
        match net.load_weights(&w).unwrap_err() {
            NnError::IncompatibleWeights { name, .. } => assert_eq!(name, "conv2.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_other_architecture() {
        let (mut net, _) = build_network::<f32>(ArchitectureId::ClsCnnPlain, 4).unwrap();
        let (_, seg) = build_network::<f32>(ArchitectureId::SegUnetMini, 4).unwrap();
        assert!(matches!(net.load_weights(&seg), Err(NnError::IncompatibleWeights { .. })));
    }

    #[test]
    fn unknown_architecture_id() {
        assert!("resnet50".parse::<ArchitectureId>().is_err());
        assert_eq!("cls-cnn-skip".parse::<ArchitectureId>().unwrap(), ArchitectureId::ClsCnnSkip);
    }
}
