use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv;
use super::weights::TensorStore;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Elu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: &mut Tensor) {
        match self {
            Activation::Identity => {}
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Elu => x.mapv_inplace(|v| if v > 0.0 { v } else { v.exp_m1() }),
            Activation::Sigmoid => x.mapv_inplace(|v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            }),
        }
    }

    /// Multiplies `grad` by the activation derivative, expressed through the
    /// activation output `y`.
    fn backprop(self, y: &Tensor, grad: &mut Tensor) {
        match self {
            Activation::Identity => {}
            Activation::Relu => Zip::from(grad).and(y).for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Elu => Zip::from(grad).and(y).for_each(|g, &y| {
                if y <= 0.0 {
                    *g *= y + 1.0
                }
            }),
            Activation::Sigmoid => Zip::from(grad).and(y).for_each(|g, &y| *g *= y * (1.0 - y)),
        }
    }
}

/// Weight matrix and bias vector of a conv or linear layer. Conv weights are
/// stored as `(out, in*k*k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    /// Kaiming-uniform weights, zero bias.
    fn init(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Params {
        let bound = (6.0 / fan_in as f64).sqrt();
        Params {
            weight: Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(rows),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Same-padded, stride-1 convolution with a fused activation.
    Conv2d {
        params: Params,
        in_channels: usize,
        kernel: usize,
        activation: Activation,
    },
    /// Fully connected layer over the flattened per-sample input; output
    /// has shape `(N, out, 1, 1)`.
    Linear { params: Params, activation: Activation },
    MaxPool2,
    AvgPool2,
    Upsample2,
    GlobalAvgPool,
    Reshape { channels: usize, height: usize, width: usize },
}

impl Layer {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, activation: Activation, rng: &mut impl Rng) -> Layer {
        let fan_in = in_channels * kernel * kernel;
        Layer::Conv2d {
            params: Params::init(out_channels, fan_in, fan_in, rng),
            in_channels,
            kernel,
            activation,
        }
    }

    pub fn linear(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Layer {
        Layer::Linear {
            params: Params::init(outputs, inputs, inputs, rng),
            activation,
        }
    }

    pub fn params(&self) -> Option<&Params> {
        match self {
            Layer::Conv2d { params, .. } | Layer::Linear { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut Params> {
        match self {
            Layer::Conv2d { params, .. } | Layer::Linear { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv2d {
                params,
                kernel,
                activation,
                in_channels,
            } => {
                assert_eq!(x.dim().1, *in_channels, "conv input channels");
                let mut y = conv::conv_forward(x, &params.weight, &params.bias, *kernel);
                activation.apply(&mut y);
                y
            }
            Layer::Linear { params, activation } => {
                let n = x.dim().0;
                let flat = x.as_standard_layout();
                let flat = flat.view().into_shape_with_order((n, x.len() / n.max(1))).expect("flatten");
                let mut y2 = flat.dot(&params.weight.t());
                y2 += &params.bias;
                let out = params.weight.nrows();
                let mut y = y2.into_shape_with_order((n, out, 1, 1)).expect("reshape");
                activation.apply(&mut y);
                y
            }
            Layer::MaxPool2 => conv::max_pool2(x),
            Layer::AvgPool2 => conv::avg_pool2(x),
            Layer::Upsample2 => conv::upsample2(x),
            Layer::GlobalAvgPool => {
                let (n, c, _, _) = x.dim();
                let m = x.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap();
                m.into_shape_with_order((n, c, 1, 1)).expect("reshape")
            }
            Layer::Reshape {
                channels,
                height,
                width,
            } => {
                let n = x.dim().0;
                x.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, *channels, *height, *width))
                    .expect("reshape size")
            }
        }
    }

    /// Given input `x`, output `y` and `dL/dy`, returns `dL/dx` (when
    /// `need_dx`) and accumulates parameter gradients into `grads`.
    pub fn backward(&self, x: &Tensor, y: &Tensor, grad: Tensor, grads: Option<&mut Params>, need_dx: bool) -> Option<Tensor> {
        match self {
            Layer::Conv2d {
                params,
                kernel,
                activation,
                ..
            } => {
                let mut g = grad;
                activation.backprop(y, &mut g);
                let (dw, db) = match grads {
                    Some(p) => (Some(&mut p.weight), Some(&mut p.bias)),
                    None => (None, None),
                };
                conv::conv_backward(x, &g, &params.weight, *kernel, dw, db, need_dx)
            }
            Layer::Linear { params, activation } => {
                let mut g = grad;
                activation.backprop(y, &mut g);
                let n = x.dim().0;
                let g2 = g.into_shape_with_order((n, params.weight.nrows())).expect("linear grad");
                if let Some(p) = grads {
                    let flat = x.as_standard_layout();
                    let flat = flat.view().into_shape_with_order((n, x.len() / n.max(1))).expect("flatten");
                    p.weight += &g2.t().dot(&flat);
                    p.bias += &g2.sum_axis(Axis(0));
                }
                need_dx.then(|| {
                    g2.dot(&params.weight)
                        .into_shape_with_order(x.raw_dim())
                        .expect("linear dx shape")
                })
            }
            Layer::MaxPool2 => need_dx.then(|| conv::max_pool2_backward(x, &grad)),
            Layer::AvgPool2 => need_dx.then(|| conv::avg_pool2_backward(&grad)),
            Layer::Upsample2 => need_dx.then(|| conv::upsample2_backward(&grad)),
            Layer::GlobalAvgPool => need_dx.then(|| {
                let (n, c, h, w) = x.dim();
                let scale = 1.0 / (h * w) as f64;
                Tensor::from_shape_fn((n, c, h, w), |(a, b, _, _)| grad[[a, b, 0, 0]] * scale)
            }),
            Layer::Reshape { .. } => need_dx.then(|| {
                grad.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(x.raw_dim())
                    .expect("reshape grad")
            }),
        }
    }

    fn stored_shape(&self) -> Option<Vec<usize>> {
        match self {
            Layer::Conv2d {
                params,
                in_channels,
                kernel,
                ..
            } => Some(vec![params.weight.nrows(), *in_channels, *kernel, *kernel]),
            Layer::Linear { params, .. } => Some(vec![params.weight.nrows(), params.weight.ncols()]),
            _ => None,
        }
    }
}

/// Layer inputs recorded during a forward pass, plus the final output.
#[derive(Debug, Clone)]
pub struct Tape {
    start: usize,
    inputs: Vec<Tensor>,
    output: Tensor,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn into_output(self) -> Tensor {
        self.output
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.inputs.len()
    }

    /// Output of layer `idx`.
    pub fn activation(&self, idx: usize) -> &Tensor {
        let rel = idx - self.start;
        if rel + 1 < self.inputs.len() {
            &self.inputs[rel + 1]
        } else {
            assert_eq!(rel + 1, self.inputs.len(), "layer {idx} outside tape");
            &self.output
        }
    }

    pub fn input(&self, idx: usize) -> &Tensor {
        &self.inputs[idx - self.start]
    }
}

/// Per-layer gradient buffers; `None` for parameter-free or frozen layers.
#[derive(Debug, Clone)]
pub struct Grads {
    pub layers: Vec<Option<Params>>,
}

impl Grads {
    pub fn zero(&mut self) {
        for p in self.layers.iter_mut().flatten() {
            p.weight.fill(0.0);
            p.bias.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for p in self.layers.iter_mut().flatten() {
            p.weight *= factor;
            p.bias *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|p| p.weight.iter().chain(p.bias.iter()).all(|v| v.is_finite()))
    }
}

/// A straight chain of layers, optionally with names attached to the
/// outputs of selected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
    names: BTreeMap<String, usize>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential {
            layers,
            names: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn push(&mut self, layer: Layer) -> usize {
        self.layers.push(layer);
        self.layers.len() - 1
    }

    pub fn name_output(&mut self, name: impl Into<String>, idx: usize) {
        self.names.insert(name.into(), idx);
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.names.get(name).copied()
    }

    pub fn named_outputs(&self) -> &BTreeMap<String, usize> {
        &self.names
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_range(x, 0..self.layers.len())
    }

    pub fn forward_range(&self, x: &Tensor, range: Range<usize>) -> Tensor {
        let mut cur = x.clone();
        for layer in &self.layers[range] {
            cur = layer.forward(&cur);
        }
        cur
    }

    pub fn forward_tape(&self, x: Tensor) -> Tape {
        self.forward_tape_range(x, 0..self.layers.len())
    }

    pub fn forward_tape_range(&self, x: Tensor, range: Range<usize>) -> Tape {
        let start = range.start;
        let mut inputs = Vec::with_capacity(range.len());
        let mut cur = x;
        for layer in &self.layers[range] {
            let next = layer.forward(&cur);
            inputs.push(cur);
            cur = next;
        }
        Tape {
            start,
            inputs,
            output: cur,
        }
    }

    /// Gradient buffers for layers in `trainable`; other layers get `None`.
    pub fn grads_for(&self, trainable: Range<usize>) -> Grads {
        Grads {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    if trainable.contains(&i) {
                        l.params().map(Params::zeros_like)
                    } else {
                        None
                    }
                })
                .collect(),
        }
    }

    pub fn grads(&self) -> Grads {
        self.grads_for(0..self.layers.len())
    }

    /// Reverse pass over the taped layers. `grad_out` is the gradient w.r.t.
    /// the tape output; `injections` add gradients w.r.t. intermediate layer
    /// outputs. Returns the gradient w.r.t. the tape input when `need_input`.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_out: Option<Tensor>,
        mut injections: BTreeMap<usize, Tensor>,
        mut grads: Option<&mut Grads>,
        need_input: bool,
    ) -> Option<Tensor> {
        let range = tape.range();
        // Lowest layer that still needs a gradient flowing into it.
        let lowest_needed = if need_input {
            range.start
        } else {
            grads
                .as_ref()
                .and_then(|g| range.clone().find(|&i| g.layers[i].is_some()))
                .unwrap_or(range.end)
        };
        let mut g: Option<Tensor> = grad_out;
        for idx in range.clone().rev() {
            if let Some(extra) = injections.remove(&idx) {
                g = Some(match g {
                    Some(cur) => cur + extra,
                    None => extra,
                });
            }
            if idx < lowest_needed {
                break;
            }
            let Some(cur) = g.take() else { continue };
            let layer_grads = grads.as_deref_mut().and_then(|gs| gs.layers[idx].as_mut());
            let need_dx = need_input || idx > lowest_needed;
            g = self.layers[idx].backward(tape.input(idx), tape.activation(idx), cur, layer_grads, need_dx);
        }
        if need_input {
            Some(g.unwrap_or_else(|| Tensor::zeros(tape.input(range.start).raw_dim())))
        } else {
            None
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().filter_map(Layer::params).map(Params::len).sum()
    }

    /// Writes parameters as `{prefix}{idx}.weight` / `{prefix}{idx}.bias`.
    pub fn export(&self, store: &mut TensorStore, prefix: &str) {
        for (i, layer) in self.layers.iter().enumerate() {
            if let (Some(p), Some(shape)) = (layer.params(), layer.stored_shape()) {
                store.insert(format!("{prefix}{i}.weight"), shape, p.weight.iter().copied().collect());
                store.insert(format!("{prefix}{i}.bias"), vec![p.bias.len()], p.bias.to_vec());
            }
        }
    }

    /// Loads parameters written by [`Sequential::export`], checking shapes.
    pub fn import(&mut self, store: &TensorStore, prefix: &str) -> Result<()> {
        let names: Vec<String> = (0..self.layers.len()).map(|i| format!("{prefix}{i}")).collect();
        self.import_named(store, |i| Some(names[i].clone()))
    }

    /// Loads parameters using a caller-supplied `layer index -> tensor stem`
    /// mapping. Every parameterized layer must be present.
    pub fn import_named(&mut self, store: &TensorStore, stem: impl Fn(usize) -> Option<String>) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let Some(shape) = layer.stored_shape() else { continue };
            let Some(stem) = stem(i) else { continue };
            let (wshape, wdata) = store
                .get(&format!("{stem}.weight"))
                .ok_or_else(|| Error::Weights(format!("missing tensor {stem}.weight")))?;
            if wshape != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{stem}.weight has shape {wshape:?}, expected {shape:?}"
                )));
            }
            let (bshape, bdata) = store
                .get(&format!("{stem}.bias"))
                .ok_or_else(|| Error::Weights(format!("missing tensor {stem}.bias")))?;
            let p = layer.params_mut().expect("parameterized layer");
            if bshape != [p.bias.len()] {
                return Err(Error::Shape(format!(
                    "{stem}.bias has shape {bshape:?}, expected [{}]",
                    p.bias.len()
                )));
            }
            p.weight = Array2::from_shape_vec(p.weight.dim(), wdata.to_vec()).expect("checked shape");
            p.bias = Array1::from_vec(bdata.to_vec());
        }
        Ok(())
    }
}
