use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, Sequential, Tape, Tensor, TensorStore};

/// The 13 convolution layers, in order.
pub const CONV_NAMES: [&str; 13] = [
    "conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3", "conv4_1", "conv4_2", "conv4_3", "conv5_1",
    "conv5_2", "conv5_3",
];

/// Full-size channel width of each block.
pub const BLOCK_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

/// Convolutions per block.
pub const BLOCK_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];

/// Indices of the convolutions inside torchvision's `vgg16().features`.
const TORCHVISION_INDICES: [usize; 13] = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28];

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Avg,
}

/// VGG16 convolutional trunk. Each block ends in a 2x2 pooling layer.
///
/// The trunk expects ImageNet-normalized input; see [`VggBackbone::preprocess`].
#[derive(Debug, Clone, PartialEq)]
pub struct VggBackbone {
    net: Sequential,
    width_divisor: usize,
    pooling: Pooling,
}

impl VggBackbone {
    /// Kaiming-initialized trunk with every block width divided by
    /// `width_divisor`.
    pub fn random(width_divisor: usize, pooling: Pooling, seed: u64) -> Result<Self> {
        if width_divisor == 0 || BLOCK_WIDTHS.iter().any(|w| w % width_divisor != 0) {
            return Err(Error::Config(format!("width divisor {width_divisor} does not divide the block widths")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Sequential::new(Vec::new());
        let mut in_ch = 3;
        let mut names = CONV_NAMES.iter();
        for (width, depth) in BLOCK_WIDTHS.iter().zip(BLOCK_DEPTHS) {
            let out_ch = width / width_divisor;
            for _ in 0..depth {
                let idx = net.push(Layer::conv(in_ch, out_ch, 3, Activation::Relu, &mut rng));
                net.name_output(*names.next().expect("13 names"), idx);
                in_ch = out_ch;
            }
            net.push(match pooling {
                Pooling::Max => Layer::MaxPool2,
                Pooling::Avg => Layer::AvgPool2,
            });
        }
        Ok(VggBackbone {
            net,
            width_divisor,
            pooling,
        })
    }

    /// Loads conv weights from a tensor file. Tensors may be named
    /// `conv1_1.weight` or, as in torchvision checkpoints, `features.0.weight`.
    /// Shapes must match the requested width.
    pub fn from_store(store: &TensorStore, width_divisor: usize, pooling: Pooling) -> Result<Self> {
        let mut vgg = VggBackbone::random(width_divisor, pooling, 0)?;
        let torchvision = store.get("features.0.weight").is_some();
        let by_index: BTreeMap<usize, String> = CONV_NAMES
            .iter()
            .zip(TORCHVISION_INDICES)
            .map(|(name, tv)| {
                let stem = if torchvision {
                    format!("features.{tv}")
                } else {
                    name.to_string()
                };
                (vgg.net.layer_index(name).expect("named conv"), stem)
            })
            .collect();
        vgg.net.import_named(store, |i| by_index.get(&i).cloned())?;
        Ok(vgg)
    }

    pub fn load(path: &Path, width_divisor: usize, pooling: Pooling) -> Result<Self> {
        VggBackbone::from_store(&TensorStore::load(path)?, width_divisor, pooling)
    }

    /// Writes conv weights under their layer names.
    pub fn export(&self, store: &mut TensorStore, prefix: &str) {
        let mut tmp = TensorStore::default();
        self.net.export(&mut tmp, "");
        for name in CONV_NAMES {
            let idx = self.net.layer_index(name).expect("named conv");
            for part in ["weight", "bias"] {
                let (shape, data) = tmp.get(&format!("{idx}.{part}")).expect("exported");
                store.insert(format!("{prefix}{name}.{part}"), shape.to_vec(), data.to_vec());
            }
        }
    }

    /// Re-reads weights written by [`VggBackbone::export`].
    pub fn import(&mut self, store: &TensorStore, prefix: &str) -> Result<()> {
        let stems: BTreeMap<usize, String> = CONV_NAMES
            .iter()
            .map(|n| (self.net.layer_index(n).expect("named conv"), format!("{prefix}{n}")))
            .collect();
        self.net.import_named(store, |i| stems.get(&i).cloned())
    }

    /// Same weights with a different pooling layer type.
    pub fn with_pooling(&self, pooling: Pooling) -> Self {
        let mut out = self.clone();
        for layer in &mut out.net.layers {
            if matches!(layer, Layer::MaxPool2 | Layer::AvgPool2) {
                *layer = match pooling {
                    Pooling::Max => Layer::MaxPool2,
                    Pooling::Avg => Layer::AvgPool2,
                };
            }
        }
        out.pooling = pooling;
        out
    }

    pub fn width_divisor(&self) -> usize {
        self.width_divisor
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    /// Channels produced by the last block.
    pub fn out_channels(&self) -> usize {
        BLOCK_WIDTHS[4] / self.width_divisor
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.net
            .layer_index(name)
            .ok_or_else(|| Error::Invalid(format!("unknown layer {name:?}")))
    }

    /// Index of the pooling layer closing block `b` (1-based).
    pub fn block_end(&self, b: usize) -> usize {
        assert!((1..=5).contains(&b), "block {b}");
        BLOCK_DEPTHS[..b].iter().sum::<usize>() + b - 1
    }

    /// Expected `(channels, side)` of a named activation for input side `side`.
    pub fn expected_shape(&self, name: &str, side: usize) -> Result<(usize, usize)> {
        let pos = CONV_NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::Invalid(format!("unknown layer {name:?}")))?;
        let block = name.as_bytes()[4] as usize - b'1' as usize;
        debug_assert!(pos < 13);
        Ok((BLOCK_WIDTHS[block] / self.width_divisor, side >> block))
    }

    /// Maps `[0, 1]` RGB to ImageNet-normalized input.
    pub fn preprocess(x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for c in 0..3 {
            out.index_axis_mut(ndarray::Axis(1), c)
                .mapv_inplace(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
        }
        out
    }

    /// Chains a gradient w.r.t. preprocessed input back to `[0, 1]` RGB.
    pub fn preprocess_backward(grad: &Tensor) -> Tensor {
        let mut out = grad.clone();
        for c in 0..3 {
            out.index_axis_mut(ndarray::Axis(1), c).mapv_inplace(|v| v / IMAGENET_STD[c]);
        }
        out
    }

    fn check_side(x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 || h != w || h == 0 || h % 32 != 0 {
            return Err(Error::Shape(format!(
                "backbone input must be 3 x S x S with S divisible by 32, got {c} x {h} x {w}"
            )));
        }
        Ok(())
    }

    /// Full trunk output (after block 5 pooling).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        VggBackbone::check_side(x)?;
        Ok(self.net.forward(x))
    }

    /// Activations of the named convolutions; runs only as deep as needed.
    pub fn extract_features(&self, x: &Tensor, layer_names: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        VggBackbone::check_side(x)?;
        let indices = layer_names
            .iter()
            .map(|n| self.layer_index(n).map(|i| (n.to_string(), i)))
            .collect::<Result<Vec<_>>>()?;
        let Some(deepest) = indices.iter().map(|(_, i)| *i).max() else {
            return Ok(BTreeMap::new());
        };
        let tape = self.net.forward_tape_range(x.clone(), 0..deepest + 1);
        Ok(indices
            .into_iter()
            .map(|(n, i)| (n, tape.activation(i).clone()))
            .collect())
    }

    /// Taped forward pass up to and including the deepest named layer, for
    /// callers that backpropagate through selected activations.
    pub fn tape_to(&self, x: &Tensor, layer_names: &[&str]) -> Result<Tape> {
        VggBackbone::check_side(x)?;
        let mut deepest = 0;
        for n in layer_names {
            deepest = deepest.max(self.layer_index(n)?);
        }
        Ok(self.net.forward_tape_range(x.clone(), 0..deepest + 1))
    }
}
