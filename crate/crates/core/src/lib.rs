//! Federated training of a segmentation -> classification cascade on
//! synthetic chest-radiograph-like images.
//!
//! * [`nn`] - tensors, layers, hand-written backprop, losses, metrics, optimizers
//! * [`models`] - the three toy architectures and their weight containers
//! * [`federation`] - IID partitioning, client selection, local training, FedAvg, rounds
//! * [`transport`] - binary wire protocol, TCP server/client, in-process loopback
//! * [`data`] - synthetic sample generator, augmentation, masking, PGM I/O, datasets
//! * [`xai`] - Grad-CAM heatmaps and lung-focus scoring

pub mod data;
pub mod federation;
pub mod models;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod transport;
pub mod xai;

pub use nn::{LayerSpec, Network, NetworkBuilder, NnError, Parameter};
pub use tensor::{Element, Precision, Tensor, TensorError};
