//! Minimal layered network engine with hand-written backpropagation.
//!
//! A [`Network`] is a list of layers applied in order. Two layer kinds reach
//! back to an earlier layer's output (`ConcatChannels`, `AddSkip`), which is
//! enough for encoder-decoder skips and residual blocks. `forward` keeps every
//! layer output so `backward` and Grad-CAM can read them afterwards.

pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod ops;
pub mod optim;

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use crate::seed;
use crate::tensor::{Element, Precision, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {index} ({name}): {reason}")]
    Shape {
        index: usize,
        name: String,
        reason: String,
    },
    #[error("backward called before forward")]
    NoForward,
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("operation requires {required} precision, network is {actual}")]
    Precision {
        required: Precision,
        actual: Precision,
    },
    #[error("incompatible weights at `{name}`: {reason}")]
    IncompatibleWeights { name: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Sigmoid,
    /// 2x2 window, stride 2.
    MaxPool2d,
    /// Nearest-neighbour, factor 2.
    Upsample2d,
    GlobalAvgPool,
    Flatten,
    /// Appends the channels of layer `source`'s output after the current ones.
    ConcatChannels { source: usize },
    /// Adds layer `source`'s output to the current one.
    AddSkip { source: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::MaxPool2d => "maxpool",
            LayerSpec::Upsample2d => "upsample",
            LayerSpec::GlobalAvgPool => "gap",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ConcatChannels { .. } => "concat",
            LayerSpec::AddSkip { .. } => "add",
        }
    }

    fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Element> Parameter<T> {
    fn new(name: String, shape: &[usize]) -> Self {
        Self {
            name,
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct NetworkBuilder {
    architecture: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl NetworkBuilder {
    pub fn new(architecture: &str, input_shape: &[usize]) -> Self {
        Self {
            architecture: architecture.to_string(),
            input_shape: input_shape.to_vec(),
            layers: Vec::new(),
        }
    }

    /// Index the next pushed layer will get.
    pub fn next_id(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(mut self, name: &str, spec: LayerSpec) -> Self {
        let name = if name.is_empty() {
            format!("{}{}", spec.kind(), self.layers.len())
        } else {
            name.to_string()
        };
        self.layers.push(Layer { name, spec });
        self
    }

    pub fn conv(self, name: &str, in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        self.layer(
            name,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride: 1,
                padding,
            },
        )
    }

    pub fn dense(self, name: &str, inputs: usize, outputs: usize) -> Self {
        self.layer(name, LayerSpec::Dense { inputs, outputs })
    }

    pub fn relu(self) -> Self {
        self.layer("", LayerSpec::Relu)
    }

    pub fn sigmoid(self) -> Self {
        self.layer("", LayerSpec::Sigmoid)
    }

    pub fn max_pool(self) -> Self {
        self.layer("", LayerSpec::MaxPool2d)
    }

    pub fn upsample(self) -> Self {
        self.layer("", LayerSpec::Upsample2d)
    }

    pub fn global_avg_pool(self) -> Self {
        self.layer("", LayerSpec::GlobalAvgPool)
    }

    pub fn flatten(self) -> Self {
        self.layer("", LayerSpec::Flatten)
    }

    pub fn concat(self, source: usize) -> Self {
        self.layer("", LayerSpec::ConcatChannels { source })
    }

    pub fn add_skip(self, source: usize) -> Self {
        self.layer("", LayerSpec::AddSkip { source })
    }

    pub fn build<T: Element>(self) -> Result<Network<T>, NnError> {
        Network::new(&self.architecture, &self.input_shape, self.layers)
    }
}

/// Parameter slots of one layer: (weight index, bias index) into `params`.
type ParamSlots = Option<(usize, usize)>;

pub struct Network<T: Element = f32> {
    architecture: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    out_shapes: Vec<Vec<usize>>,
    params: Vec<Parameter<T>>,
    slots: Vec<ParamSlots>,
    input: Option<Tensor<T>>,
    activations: Vec<Tensor<T>>,
    output_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network")
            .field("architecture", &self.architecture)
            .field("input_shape", &self.input_shape)
            .field("layers", &self.layers.len())
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

fn shape_err(index: usize, layer: &Layer, reason: impl Into<String>) -> NnError {
    NnError::Shape {
        index,
        name: layer.name.clone(),
        reason: reason.into(),
    }
}

impl<T: Element> Network<T> {
    /// Validates the layer chain against `input_shape` (per-sample, e.g. `[C, H, W]`)
    /// and allocates zeroed parameters.
    pub fn new(architecture: &str, input_shape: &[usize], layers: Vec<Layer>) -> Result<Self, NnError> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(NnError::Input(format!("bad input shape {input_shape:?}")));
        }
        let mut out_shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(layers.len());
        let mut names = HashSet::new();

        for (i, layer) in layers.iter().enumerate() {
            if !names.insert(layer.name.clone()) {
                return Err(shape_err(i, layer, "duplicate layer name"));
            }
            let cur: &[usize] = if i == 0 { input_shape } else { &out_shapes[i - 1] };
            let source_shape = |src: usize| -> Result<&Vec<usize>, NnError> {
                if src >= i {
                    return Err(shape_err(i, layer, format!("source layer {src} is not earlier")));
                }
                Ok(&out_shapes[src])
            };
            let need_rank = |r: usize| -> Result<(), NnError> {
                if cur.len() != r {
                    return Err(shape_err(i, layer, format!("expected rank-{r} input, got {cur:?}")));
                }
                Ok(())
            };
            let out = match &layer.spec {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    need_rank(3)?;
                    if cur[0] != *in_channels {
                        return Err(shape_err(i, layer, format!("expects {in_channels} channels, input has {}", cur[0])));
                    }
                    if *out_channels == 0 || *kernel == 0 {
                        return Err(shape_err(i, layer, "zero channels or kernel"));
                    }
                    let oh = ops::conv_out_size(cur[1], *kernel, *stride, *padding);
                    let ow = ops::conv_out_size(cur[2], *kernel, *stride, *padding);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => vec![*out_channels, oh, ow],
                        _ => return Err(shape_err(i, layer, format!("kernel {kernel} does not fit input {cur:?}"))),
                    }
                }
                LayerSpec::Dense { inputs, outputs } => {
                    need_rank(1)?;
                    if cur[0] != *inputs {
                        return Err(shape_err(i, layer, format!("expects {inputs} features, input has {}", cur[0])));
                    }
                    vec![*outputs]
                }
                LayerSpec::Relu | LayerSpec::Sigmoid => cur.to_vec(),
                LayerSpec::MaxPool2d => {
                    need_rank(3)?;
                    if cur[1] < 2 || cur[2] < 2 {
                        return Err(shape_err(i, layer, "spatial size below pooling window"));
                    }
                    vec![cur[0], cur[1] / 2, cur[2] / 2]
                }
                LayerSpec::Upsample2d => {
                    need_rank(3)?;
                    vec![cur[0], cur[1] * 2, cur[2] * 2]
                }
                LayerSpec::GlobalAvgPool => {
                    need_rank(3)?;
                    vec![cur[0]]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::ConcatChannels { source } => {
                    need_rank(3)?;
                    let src = source_shape(*source)?;
                    if src.len() != 3 || src[1..] != cur[1..] {
                        return Err(shape_err(i, layer, format!("cannot concat {cur:?} with {src:?}")));
                    }
                    vec![cur[0] + src[0], cur[1], cur[2]]
                }
                LayerSpec::AddSkip { source } => {
                    let src = source_shape(*source)?;
                    if src.as_slice() != cur {
                        return Err(shape_err(i, layer, format!("cannot add {src:?} to {cur:?}")));
                    }
                    cur.to_vec()
                }
            };
            if layer.spec.has_params() {
                let (wshape, bshape) = match &layer.spec {
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    } => (vec![*out_channels, *in_channels, *kernel, *kernel], vec![*out_channels]),
                    LayerSpec::Dense { inputs, outputs } => (vec![*outputs, *inputs], vec![*outputs]),
                    _ => unreachable!(),
                };
                params.push(Parameter::new(format!("{}.weight", layer.name), &wshape));
                params.push(Parameter::new(format!("{}.bias", layer.name), &bshape));
                slots.push(Some((params.len() - 2, params.len() - 1)));
            } else {
                slots.push(None);
            }
            out_shapes.push(out);
        }
        if layers.is_empty() {
            return Err(NnError::Config("network has no layers".into()));
        }
        Ok(Self {
            architecture: architecture.to_string(),
            input_shape: input_shape.to_vec(),
            output_grads: vec![None; layers.len()],
            layers,
            out_shapes,
            params,
            slots,
            input: None,
            activations: Vec::new(),
        })
    }

    pub fn architecture(&self) -> &str {
        &self.architecture
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> &[usize] {
        self.out_shapes.last().expect("non-empty network")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Per-sample output shape of layer `index`.
    pub fn layer_output_shape(&self, index: usize) -> Option<&[usize]> {
        self.out_shapes.get(index).map(Vec::as_slice)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// He-uniform init: weights uniform in `±sqrt(6 / fan_in)`, biases zero.
    /// Each parameter draws from its own counter-based stream keyed by
    /// `(seed, name)`, so values do not depend on layer order.
    pub fn init_he_uniform(&mut self, seed: u64) {
        for p in &mut self.params {
            if p.name.ends_with(".bias") {
                p.value.fill(T::zero());
                continue;
            }
            let fan_in: usize = p.value.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let key = seed::derive(seed, &p.name, 0);
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                let u = seed::counter_uniform(key, i as u64);
                *v = T::from_f64((2.0 * u - 1.0) * bound);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Runs every layer and keeps all intermediate outputs.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<&Tensor<T>, NnError> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] || shape[0] == 0 {
            return Err(NnError::Input(format!(
                "network `{}` expects [N, {}], got {shape:?}",
                self.architecture,
                self.input_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
            )));
        }
        let n = shape[0];
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &acts[i - 1] };
            let out = match &layer.spec {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let (w, b) = self.slots[i].expect("conv has params");
                    ops::conv2d_forward(x, &self.params[w].value, &self.params[b].value, *stride, *padding)
                }
                LayerSpec::Dense { .. } => {
                    let (w, b) = self.slots[i].expect("dense has params");
                    ops::dense_forward(x, &self.params[w].value, &self.params[b].value)
                }
                LayerSpec::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
                LayerSpec::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
                LayerSpec::MaxPool2d => ops::max_pool2_forward(x),
                LayerSpec::Upsample2d => ops::upsample2_forward(x),
                LayerSpec::GlobalAvgPool => ops::global_avg_pool_forward(x),
                LayerSpec::Flatten => {
                    let features = self.out_shapes[i][0];
                    x.clone().reshape(&[n, features])?
                }
                LayerSpec::ConcatChannels { source } => ops::concat_channels(x, &acts[*source]),
                LayerSpec::AddSkip { source } => {
                    let mut out = x.clone();
                    out.add_assign(&acts[*source])?;
                    out
                }
            };
            acts.push(out);
        }
        self.input = Some(input.clone());
        self.activations = acts;
        self.output_grads.iter_mut().for_each(|g| *g = None);
        Ok(self.activations.last().expect("non-empty network"))
    }

    /// Output of layer `index` from the last forward pass.
    pub fn activation(&self, index: usize) -> Option<&Tensor<T>> {
        self.activations.get(index)
    }

    pub fn output(&self) -> Option<&Tensor<T>> {
        self.activations.last()
    }

    /// Gradient of the backpropagated objective with respect to layer
    /// `index`'s output, from the last backward pass.
    pub fn output_grad(&self, index: usize) -> Option<&Tensor<T>> {
        self.output_grads.get(index).and_then(Option::as_ref)
    }

    /// Hash of the piecewise-linear region selected by the last forward pass:
    /// the sign pattern at every ReLU and the argmax of every pooling window.
    /// Two inputs with equal signatures lie on the same linear piece.
    pub fn kink_signature(&self) -> Option<u64> {
        let input = self.input.as_ref()?;
        let mut h: u64 = 0x243F_6A88_85A3_08D3;
        let mut push = |v: u64| h = seed::mix64(h ^ v);
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &self.activations[i - 1] };
            match layer.spec {
                LayerSpec::Relu => {
                    for chunk in x.data().chunks(64) {
                        let bits = chunk
                            .iter()
                            .enumerate()
                            .fold(0u64, |acc, (j, v)| acc | (((*v > T::zero()) as u64) << j));
                        push(bits);
                    }
                }
                LayerSpec::MaxPool2d => {
                    let y = &self.activations[i];
                    let [_, _, hh, ww] = ops::dims4(x);
                    let (oh, ow) = (hh / 2, ww / 2);
                    for (p, (xp, yp)) in x.data().chunks(hh * ww).zip(y.data().chunks(oh * ow)).enumerate() {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let v = yp[oy * ow + ox];
                                let at = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                    .iter()
                                    .position(|(dy, dx)| xp[(2 * oy + dy) * ww + 2 * ox + dx] == v)
                                    .unwrap_or(0);
                                push(((p * oh * ow + oy * ow + ox) as u64) << 2 | at as u64);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        Some(h)
    }

    /// Backpropagates `output_grad` through the last forward pass. Overwrites
    /// every parameter gradient and returns the gradient for the input.
    pub fn backward(&mut self, output_grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let input = self.input.as_ref().ok_or(NnError::NoForward)?;
        let last = self.activations.last().ok_or(NnError::NoForward)?;
        output_grad.ensure_shape(last.shape())?;
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }

        let count = self.layers.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; count];
        grads[count - 1] = Some(output_grad.clone());
        let mut grad_input = Tensor::zeros(input.shape());

        for i in (0..count).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let x = if i == 0 { input } else { &self.activations[i - 1] };
            let y = &self.activations[i];
            let mut gx = Tensor::zeros(x.shape());
            match &self.layers[i].spec {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let (wi, bi) = self.slots[i].expect("conv has params");
                    let (gw, gb) = grads_pair(&mut self.params, wi, bi);
                    ops::conv2d_backward(
                        x,
                        gw.0,
                        &g,
                        *stride,
                        *padding,
                        gx.data_mut(),
                        gw.1.data_mut(),
                        gb.data_mut(),
                    );
                }
                LayerSpec::Dense { .. } => {
                    let (wi, bi) = self.slots[i].expect("dense has params");
                    let (gw, gb) = grads_pair(&mut self.params, wi, bi);
                    ops::dense_backward(x, gw.0, &g, gx.data_mut(), gw.1.data_mut(), gb.data_mut());
                }
                LayerSpec::Relu => {
                    for ((d, &xv), &gv) in gx.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
                        *d = if xv > T::zero() { gv } else { T::zero() };
                    }
                }
                LayerSpec::Sigmoid => {
                    for ((d, &yv), &gv) in gx.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                        *d = gv * yv * (T::one() - yv);
                    }
                }
                LayerSpec::MaxPool2d => ops::max_pool2_backward(x, &g, gx.data_mut()),
                LayerSpec::Upsample2d => ops::upsample2_backward(&g, gx.data_mut()),
                LayerSpec::GlobalAvgPool => ops::global_avg_pool_backward(x.shape(), &g, gx.data_mut()),
                LayerSpec::Flatten => {
                    gx = g.clone().reshape(x.shape())?;
                }
                LayerSpec::ConcatChannels { source } => {
                    let src = *source;
                    let mut gs = Tensor::zeros(self.activations[src].shape());
                    ops::concat_channels_backward(&g, x.shape()[1], gx.data_mut(), gs.data_mut());
                    accumulate(&mut grads[src], gs)?;
                }
                LayerSpec::AddSkip { source } => {
                    gx = g.clone();
                    accumulate(&mut grads[*source], g.clone())?;
                }
            }
            if i > 0 {
                accumulate(&mut grads[i - 1], gx)?;
            } else {
                grad_input = gx;
            }
            self.output_grads[i] = Some(g);
        }
        Ok(grad_input)
    }
}

/// Borrows `(weight value, weight grad)` and the bias grad of one layer.
fn grads_pair<T: Element>(
    params: &mut [Parameter<T>],
    wi: usize,
    bi: usize,
) -> ((&Tensor<T>, &mut Tensor<T>), &mut Tensor<T>) {
    debug_assert!(wi < bi);
    let (head, tail) = params.split_at_mut(bi);
    let w = &mut head[wi];
    ((&w.value, &mut w.grad), &mut tail[0].grad)
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<(), NnError> {
    match slot {
        Some(existing) => existing.add_assign(&g)?,
        None => *slot = Some(g),
    }
    Ok(())
}
