//! Boundary-equilibrium GAN: an autoencoder discriminator, a generator with
//! the decoder's topology, and the proportional control of `k_t`.

mod train;

use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use train::{load_history, train_began, BeganReport, StepRecord, CHECKPOINT_PREFIX};

use crate::error::{Error, IoContext, Result};
use crate::imaging::{sample_to_image, ClassLabel, ImageRecord, ImageSource, Provenance};
use crate::nn::{Activation, Layer, Sequential, Tensor, TensorStore};

pub const LATENT_DIM: usize = 100;

/// Side of the first generator feature map.
const BASE_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeganConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub image_side: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub lambda_k: f64,
    pub k_initial: f64,
    pub seed: u64,
    /// Filter count `n` of the first stage.
    pub channels: usize,
    pub embedding_dim: usize,
    pub checkpoint_interval: usize,
    /// Checkpoints retained on disk.
    pub keep_checkpoints: usize,
}

impl Default for BeganConfig {
    fn default() -> Self {
        BeganConfig {
            iterations: 17000,
            batch_size: 16,
            image_side: 128,
            learning_rate: 1e-4,
            gamma: 0.5,
            lambda_k: 1e-3,
            k_initial: 0.0,
            seed: 0,
            channels: 64,
            embedding_dim: 64,
            checkpoint_interval: 500,
            keep_checkpoints: 2,
        }
    }
}

impl BeganConfig {
    pub fn latent_dim(&self) -> usize {
        LATENT_DIM
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("began.gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(self.lambda_k > 0.0) {
            return bad(format!("began.lambda_k must be positive, got {}", self.lambda_k));
        }
        if self.image_side < 32 || !self.image_side.is_power_of_two() {
            return bad(format!("began.image_side must be a power of two >= 32, got {}", self.image_side));
        }
        if !(0.0..=1.0).contains(&self.k_initial) {
            return bad("began.k_initial must be in [0, 1]".into());
        }
        if self.batch_size == 0 || self.channels == 0 || self.embedding_dim == 0 {
            return bad("began.batch_size, channels and embedding_dim must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("began.learning_rate must be positive".into());
        }
        if self.checkpoint_interval == 0 {
            return bad("began.checkpoint_interval must be positive".into());
        }
        Ok(())
    }

    /// Resolutions from 8 up to `image_side`.
    fn stages(&self) -> usize {
        (self.image_side / BASE_SIDE).trailing_zeros() as usize + 1
    }
}

/// One step of the `k_t` controller, clamped to `[0, 1]`.
pub fn update_k(k: f64, l_real: f64, l_fake: f64, gamma: f64, lambda_k: f64) -> f64 {
    (k + lambda_k * (gamma * l_real - l_fake)).clamp(0.0, 1.0)
}

/// Convergence measure `L(x) + |gamma L(x) - L(G(z))|`.
pub fn m_global(l_real: f64, l_fake: f64, gamma: f64) -> f64 {
    l_real + (gamma * l_real - l_fake).abs()
}

/// Mean absolute reconstruction error per sample, averaged over the batch.
pub fn reconstruction_loss(v: &Tensor, reconstruction: &Tensor) -> f64 {
    (v - reconstruction).mapv(f64::abs).mean().unwrap_or(0.0)
}

/// Generator input: `LATENT_DIM` values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != LATENT_DIM {
            return Err(Error::Invalid(format!("latent vector has {} values, expected {LATENT_DIM}", values.len())));
        }
        if values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Invalid("latent values must lie in [-1, 1]".into()));
        }
        Ok(LatentVector(values))
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        LatentVector((0..LATENT_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn batch_latents(zs: &[&LatentVector]) -> Tensor {
    let mut t = Tensor::zeros((zs.len(), LATENT_DIM, 1, 1));
    for (i, z) in zs.iter().enumerate() {
        for (j, v) in z.values().iter().enumerate() {
            t[[i, j, 0, 0]] = *v;
        }
    }
    t
}

/// Linear map to an 8x8 map, then two ELU convs per resolution with
/// nearest-neighbor doubling between resolutions, then a sigmoid RGB conv.
fn decoder(input_dim: usize, config: &BeganConfig, rng: &mut impl Rng) -> Vec<Layer> {
    let n = config.channels;
    let mut layers = vec![
        Layer::linear(input_dim, n * BASE_SIDE * BASE_SIDE, Activation::Identity, rng),
        Layer::Reshape {
            channels: n,
            height: BASE_SIDE,
            width: BASE_SIDE,
        },
    ];
    let stages = config.stages();
    for s in 0..stages {
        layers.push(Layer::conv(n, n, 3, Activation::Elu, rng));
        layers.push(Layer::conv(n, n, 3, Activation::Elu, rng));
        if s + 1 < stages {
            layers.push(Layer::Upsample2);
        }
    }
    layers.push(Layer::conv(n, 3, 3, Activation::Sigmoid, rng));
    layers
}

/// Mirror of the decoder: channels grow by `n` per halving, average pooling
/// between resolutions, then a linear embedding.
fn encoder(config: &BeganConfig, rng: &mut impl Rng) -> Vec<Layer> {
    let n = config.channels;
    let stages = config.stages();
    let mut layers = vec![Layer::conv(3, n, 3, Activation::Elu, rng)];
    for s in 0..stages {
        let ch = n * (s + 1);
        let next = if s + 1 < stages { n * (s + 2) } else { ch };
        layers.push(Layer::conv(ch, ch, 3, Activation::Elu, rng));
        layers.push(Layer::conv(ch, next, 3, Activation::Elu, rng));
        if s + 1 < stages {
            layers.push(Layer::AvgPool2);
        }
    }
    let last = n * stages;
    layers.push(Layer::linear(last * BASE_SIDE * BASE_SIDE, config.embedding_dim, Activation::Identity, rng));
    layers
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeganModel {
    pub generator: Sequential,
    /// Autoencoder: encoder followed by a generator-shaped decoder.
    pub discriminator: Sequential,
    pub config: BeganConfig,
}

impl BeganModel {
    pub fn new(config: &BeganConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Sequential::new(decoder(LATENT_DIM, config, &mut rng));
        let mut d = encoder(config, &mut rng);
        d.extend(decoder(config.embedding_dim, config, &mut rng));
        Ok(BeganModel {
            generator,
            discriminator: Sequential::new(d),
            config: config.clone(),
        })
    }

    /// Generator output for a batch of latents, shape `(N, 3, S, S)`.
    pub fn generate_batch(&self, zs: &[&LatentVector]) -> Tensor {
        self.generator.forward(&batch_latents(zs))
    }

    pub fn generate(&self, z: &LatentVector) -> RgbImage {
        sample_to_image(&self.generate_batch(&[z]), 0)
    }

    /// Autoencoder reconstruction.
    pub fn reconstruct(&self, x: &Tensor) -> Tensor {
        self.discriminator.forward(x)
    }

    /// `count` records from latents drawn with `seed`; each keeps its latent.
    pub fn sample_candidates(&self, count: usize, seed: u64) -> Vec<ImageRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let z = LatentVector::sample(&mut rng);
                let mut rec = ImageRecord::from_pixels(
                    self.generate(&z),
                    ImageSource {
                        provider: "began".into(),
                        query: format!("seed {seed}"),
                        locator: format!("sample/{i}"),
                    },
                    ClassLabel::Unlabeled,
                    Provenance::Generated,
                );
                rec.latent = Some(z.0);
                rec
            })
            .collect()
    }

    /// Re-renders a generated record from its stored latent.
    pub fn regenerate(&self, record: &ImageRecord) -> Result<RgbImage> {
        let z = record
            .latent
            .clone()
            .ok_or_else(|| Error::Invalid(format!("record {} has no latent vector", record.id)))?;
        Ok(self.generate(&LatentVector::new(z)?))
    }

    pub(crate) fn export(&self, store: &mut TensorStore) {
        self.generator.export(store, "generator.");
        self.discriminator.export(store, "discriminator.");
    }

    pub(crate) fn import(&mut self, store: &TensorStore) -> Result<()> {
        self.generator.import(store, "generator.")?;
        self.discriminator.import(store, "discriminator.")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let mut store = TensorStore::default();
        self.export(&mut store);
        store.save(&dir.join("model.safetensors"))?;
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_vec_pretty(&self.config)?).at(&path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("config.json");
        let config: BeganConfig = serde_json::from_slice(&fs::read(&path).at(&path)?)?;
        let mut model = BeganModel::new(&config)?;
        model.import(&TensorStore::load(&dir.join("model.safetensors"))?)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
