//! Discriminative appearance model: a VGG16-topology trunk with a
//! single-logit head, fine-tuned to score how strongly an image depicts the
//! theme.

mod vgg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use vgg::{Pooling, VggBackbone, BLOCK_DEPTHS, BLOCK_WIDTHS, CONV_NAMES, IMAGENET_MEAN, IMAGENET_STD};

use crate::error::{Error, IoContext, Result};
use crate::imaging::{images_to_tensor, ClassLabel, ImageRecord};
use crate::nn::{Activation, Adam, AdamConfig, Layer, Params, Sequential, Tensor, TensorStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DamConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Leading blocks whose weights stay fixed (0..=5).
    pub frozen_blocks: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub image_side: u32,
    /// Channel widths are divided by this; 1 is the full network.
    pub width_divisor: usize,
    /// Share of the labeled set held out for evaluation.
    pub holdout_fraction: f64,
    pub backbone_weights: Option<PathBuf>,
    /// Permit training from a random trunk when no weights file is given.
    pub allow_random_init: bool,
}

impl Default for DamConfig {
    fn default() -> Self {
        DamConfig {
            learning_rate: 1e-4,
            epochs: 10,
            frozen_blocks: 3,
            seed: 0,
            batch_size: 16,
            image_side: 224,
            width_divisor: 1,
            holdout_fraction: 0.1,
            backbone_weights: None,
            allow_random_init: false,
        }
    }
}

impl DamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frozen_blocks > 5 {
            return Err(Error::Config(format!("dam.frozen_blocks must be at most 5, got {}", self.frozen_blocks)));
        }
        if self.image_side == 0 || self.image_side % 32 != 0 {
            return Err(Error::Config(format!("dam.image_side must be a multiple of 32, got {}", self.image_side)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("dam.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("dam.holdout_fraction must be in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("dam.learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Trunk as configured: pretrained weights if a file is set, otherwise a
    /// seeded random trunk when allowed.
    pub fn backbone(&self) -> Result<VggBackbone> {
        match &self.backbone_weights {
            Some(path) => VggBackbone::load(path, self.width_divisor, Pooling::Max),
            None if self.allow_random_init => VggBackbone::random(self.width_divisor, Pooling::Max, self.seed),
            None => Err(Error::Config(
                "dam.backbone_weights is not set; set it or enable dam.allow_random_init".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DamModel {
    pub backbone: VggBackbone,
    /// Global average pool followed by one linear logit.
    pub head: Sequential,
    pub config: DamConfig,
    pub report: DamReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DamReport {
    pub train_accuracy: f64,
    pub holdout_accuracy: Option<f64>,
    pub train_size: usize,
    pub holdout_size: usize,
    pub epoch_losses: Vec<f64>,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedImage {
    pub record: ImageRecord,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Hash over the sorted `(id, label)` pairs of a labeled set.
pub fn dataset_hash(records: &[ImageRecord]) -> String {
    let mut pairs: Vec<(&str, &str)> = records.iter().map(|r| (r.id.as_str(), r.class_label.dir_name())).collect();
    pairs.sort();
    let mut h = Sha256::new();
    for (id, label) in pairs {
        h.update(id.as_bytes());
        h.update(b":");
        h.update(label.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn new_head(channels: usize) -> Sequential {
    Sequential::new(vec![
        Layer::GlobalAvgPool,
        Layer::Linear {
            params: Params {
                weight: ndarray::Array2::zeros((1, channels)),
                bias: ndarray::Array1::zeros(1),
            },
            activation: Activation::Identity,
        },
    ])
}

fn stack(samples: &[&Tensor]) -> Tensor {
    let views: Vec<_> = samples.iter().map(|t| t.view()).collect();
    concatenate(Axis(0), &views).expect("equal sample shapes")
}

fn check_record_side(r: &ImageRecord, side: u32) -> Result<()> {
    if r.pixels.dimensions() != (side, side) {
        return Err(Error::Shape(format!(
            "image {} is {:?}, expected {side}x{side}",
            r.id,
            r.pixels.dimensions()
        )));
    }
    Ok(())
}

fn target(label: ClassLabel) -> Result<f64> {
    match label {
        ClassLabel::Positive => Ok(1.0),
        ClassLabel::Negative => Ok(0.0),
        ClassLabel::Unlabeled => Err(Error::Invalid("training images must be POSITIVE or NEGATIVE".into())),
    }
}

/// Fine-tunes a classifier on labeled, square-normalized images.
pub fn train_dam(dataset: &[ImageRecord], config: &DamConfig) -> Result<DamModel> {
    config.validate()?;
    let targets = dataset.iter().map(|r| target(r.class_label)).collect::<Result<Vec<f64>>>()?;
    let positives = targets.iter().filter(|&&t| t == 1.0).count();
    if positives == 0 || positives == targets.len() {
        return Err(Error::Invalid("DAM training needs both POSITIVE and NEGATIVE images".into()));
    }
    for r in dataset {
        check_record_side(r, config.image_side)?;
    }
    let mut backbone = config.backbone()?;
    let mut head = new_head(backbone.out_channels());

    // Deterministic split: order by id, then shuffle with the seed.
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| dataset[a].id.cmp(&dataset[b].id));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    order.shuffle(&mut rng);
    let n_holdout = (dataset.len() as f64 * config.holdout_fraction).floor() as usize;
    let (holdout, train) = order.split_at(n_holdout);
    let mut train = train.to_vec();
    train.sort_by(|&a, &b| dataset[a].id.cmp(&dataset[b].id));

    let split = if config.frozen_blocks == 0 {
        0
    } else {
        backbone.block_end(config.frozen_blocks) + 1
    };
    let depth = backbone.net().len();

    // The frozen prefix never changes, so its outputs are computed once.
    let mut cached: Vec<Tensor> = Vec::with_capacity(train.len());
    for chunk in train.chunks(config.batch_size) {
        let pixels: Vec<_> = chunk.iter().map(|&i| &dataset[i].pixels).collect();
        let x = VggBackbone::preprocess(&images_to_tensor(&pixels)?);
        let feats = backbone.net().forward_range(&x, 0..split);
        for s in feats.outer_iter() {
            cached.push(s.insert_axis(Axis(0)).to_owned());
        }
    }

    let adam_cfg = AdamConfig::with_lr(config.learning_rate);
    let mut trunk_opt = Adam::new(backbone.net(), adam_cfg);
    let mut head_opt = Adam::new(&head, adam_cfg);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut positions: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        positions.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in positions.chunks(config.batch_size) {
            let x = stack(&batch.iter().map(|&p| &cached[p]).collect::<Vec<_>>());
            let y: Vec<f64> = batch.iter().map(|&p| targets[train[p]]).collect();
            let trunk_tape = backbone.net().forward_tape_range(x, split..depth);
            let head_tape = head.forward_tape(trunk_tape.output().clone());
            let logits = head_tape.output();
            let b = batch.len() as f64;
            let mut dlogit = Tensor::zeros(logits.raw_dim());
            for (i, &t) in y.iter().enumerate() {
                let z = logits[[i, 0, 0, 0]];
                total += softplus(z) - t * z;
                dlogit[[i, 0, 0, 0]] = (sigmoid(z) - t) / b;
            }
            let mut head_grads = head.grads();
            let mut trunk_grads = backbone.net().grads_for(split..depth);
            let trainable_trunk = split < depth;
            let dfeat = head.backward(&head_tape, Some(dlogit), BTreeMap::new(), Some(&mut head_grads), trainable_trunk);
            if let Some(dfeat) = dfeat {
                backbone
                    .net()
                    .backward(&trunk_tape, Some(dfeat), BTreeMap::new(), Some(&mut trunk_grads), false);
            }
            if !head_grads.is_finite() || !trunk_grads.is_finite() {
                return Err(Error::NonFinite(format!("DAM gradient in epoch {}", epoch + 1)));
            }
            head_opt.step(&mut head, &head_grads);
            trunk_opt.step(backbone.net_mut(), &trunk_grads);
        }
        let mean = total / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("DAM loss in epoch {}", epoch + 1)));
        }
        log::info!("dam epoch {}/{}: loss {mean:.5}", epoch + 1, config.epochs);
        epoch_losses.push(mean);
    }

    let mut model = DamModel {
        backbone,
        head,
        config: config.clone(),
        report: DamReport::default(),
    };
    let train_records: Vec<ImageRecord> = train.iter().map(|&i| dataset[i].clone()).collect();
    let holdout_records: Vec<ImageRecord> = holdout.iter().map(|&i| dataset[i].clone()).collect();
    model.report = DamReport {
        train_accuracy: model.accuracy(&train_records)?,
        holdout_accuracy: if holdout_records.is_empty() {
            None
        } else {
            Some(model.accuracy(&holdout_records)?)
        },
        train_size: train_records.len(),
        holdout_size: holdout_records.len(),
        epoch_losses,
        dataset_hash: dataset_hash(dataset),
    };
    Ok(model)
}

impl DamModel {
    /// Raw logits for a batch of `[0, 1]` RGB images.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let feats = self.backbone.forward(&VggBackbone::preprocess(x))?;
        Ok(self.head.forward(&feats).iter().copied().collect())
    }

    /// Theme probabilities, in input order.
    pub fn score_images(&self, images: &[ImageRecord]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.config.batch_size.max(1)) {
            for r in chunk {
                check_record_side(r, self.config.image_side)?;
            }
            let pixels: Vec<_> = chunk.iter().map(|r| &r.pixels).collect();
            out.extend(self.logits(&images_to_tensor(&pixels)?)?.into_iter().map(sigmoid));
        }
        Ok(out)
    }

    pub fn score_image(&self, image: &ImageRecord) -> Result<f64> {
        Ok(self.score_images(std::slice::from_ref(image))?[0])
    }

    /// Fraction of labeled images classified correctly at threshold 0.5.
    pub fn accuracy(&self, images: &[ImageRecord]) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let scores = self.score_images(images)?;
        let mut correct = 0;
        for (r, s) in images.iter().zip(scores) {
            if (s >= 0.5) == (target(r.class_label)? == 1.0) {
                correct += 1;
            }
        }
        Ok(correct as f64 / images.len() as f64)
    }

    pub fn rank_images(&self, images: &[ImageRecord], top_k: usize) -> Result<Vec<RankedImage>> {
        if images.is_empty() {
            return Err(Error::Invalid("no images to rank".into()));
        }
        let scores = self.score_images(images)?;
        Ok(rank_scored(images.iter().cloned().zip(scores).collect(), top_k))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let mut store = TensorStore::default();
        self.backbone.export(&mut store, "backbone.");
        self.head.export(&mut store, "head.");
        store.save(&dir.join("model.safetensors"))?;
        let meta = serde_json::json!({ "config": self.config, "report": self.report });
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).at(&path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let meta: serde_json::Value = serde_json::from_slice(&fs::read(&path).at(&path)?)?;
        let config: DamConfig = serde_json::from_value(meta["config"].clone())?;
        let report: DamReport = serde_json::from_value(meta["report"].clone())?;
        let store = TensorStore::load(&dir.join("model.safetensors"))?;
        let mut backbone = VggBackbone::random(config.width_divisor, Pooling::Max, 0)?;
        backbone.import(&store, "backbone.")?;
        let mut head = new_head(backbone.out_channels());
        head.import(&store, "head.")?;
        Ok(DamModel {
            backbone,
            head,
            config,
            report,
        })
    }
}

/// Sorts by descending score, ties by ascending id, and keeps the first
/// `top_k`.
pub fn rank_scored(mut scored: Vec<(ImageRecord, f64)>, top_k: usize) -> Vec<RankedImage> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
    scored
        .into_iter()
        .take(top_k)
        .enumerate()
        .map(|(i, (record, score))| RankedImage {
            record,
            score,
            rank: i + 1,
        })
        .collect()
}

/// Activations of the named layers for a batch of `[0, 1]` RGB images.
pub fn extract_features(backbone: &VggBackbone, images: &Tensor, layer_names: &[&str]) -> Result<BTreeMap<String, Tensor>> {
    backbone.extract_features(&VggBackbone::preprocess(images), layer_names)
}
