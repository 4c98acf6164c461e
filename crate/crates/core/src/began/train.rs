use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_latents, m_global, reconstruction_loss, update_k, BeganConfig, BeganModel, LatentVector};
use crate::control::Control;
use crate::error::{Error, IoContext, Result};
use crate::imaging::{images_to_tensor, ImageRecord};
use crate::nn::{Adam, AdamConfig, Grads, Tensor, TensorStore};

/// Checkpoint directories are named `ckpt-<iteration>`.
pub const CHECKPOINT_PREFIX: &str = "ckpt-";

const CSV_HEADER: &str = "iter,L_real,L_fake,k_t,m_global";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub l_real: f64,
    pub l_fake: f64,
    /// Balance variable after this step's update.
    pub k_t: f64,
    pub m_global: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BeganReport {
    pub history: Vec<StepRecord>,
    /// Iteration of the checkpoint training resumed from, if any.
    pub resumed_from: Option<usize>,
}

impl BeganReport {
    pub fn to_csv(&self) -> String {
        history_csv(&self.history)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).at(path)
    }
}

fn history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(out, "{},{},{},{},{}", r.iter, r.l_real, r.l_fake, r.k_t, r.m_global);
    }
    out
}

/// Reads a training report written by [`BeganReport::write_csv`].
pub fn load_history(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {CSV_HEADER:?}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |m: String| Error::Parse { line: i + 1, message: m };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            Ok(StepRecord {
                iter: f[0].parse().map_err(|e| bad(format!("{:?}: {e}", f[0])))?,
                l_real: num(f[1])?,
                l_fake: num(f[2])?,
                k_t: num(f[3])?,
                m_global: num(f[4])?,
            })
        })
        .collect()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Losses and parameter gradients for one batch: discriminator gradients of
/// `L(x) - k L(G(z))` with the generator output held fixed, and generator
/// gradients of `L(G(z))`.
pub(super) fn gradients(model: &BeganModel, x: &Tensor, zs: &[LatentVector], k: f64) -> (f64, f64, Grads, Grads) {
    let g_tape = model.generator.forward_tape(batch_latents(&zs.iter().collect::<Vec<_>>()));
    let fake = g_tape.output();
    let real_tape = model.discriminator.forward_tape(x.clone());
    let fake_tape = model.discriminator.forward_tape(fake.clone());
    let l_real = reconstruction_loss(x, real_tape.output());
    let l_fake = reconstruction_loss(fake, fake_tape.output());

    // d|r - v| / dr, averaged over every element of the batch
    let count = fake.len() as f64;
    let dr = |recon: &Tensor, v: &Tensor| -> Tensor { Zip::from(recon).and(v).map_collect(|&r, &v| sign(r - v) / count) };
    let dr_real = dr(real_tape.output(), x);
    let dr_fake = dr(fake_tape.output(), fake);

    let mut d_grads = model.discriminator.grads();
    model
        .discriminator
        .backward(&real_tape, Some(dr_real), BTreeMap::new(), Some(&mut d_grads), false);
    // One pass over the fake batch yields both dL(G(z))/dD, which enters L_D
    // scaled by -k, and the gradient w.r.t. the generated images.
    let mut fake_grads = model.discriminator.grads();
    let d_input = model
        .discriminator
        .backward(&fake_tape, Some(dr_fake.clone()), BTreeMap::new(), Some(&mut fake_grads), true)
        .expect("input gradient");
    for (d, f) in d_grads.layers.iter_mut().zip(&fake_grads.layers) {
        if let (Some(d), Some(f)) = (d, f) {
            d.weight.scaled_add(-k, &f.weight);
            d.bias.scaled_add(-k, &f.bias);
        }
    }
    // The generated images also reach L(G(z)) directly.
    let dfake = d_input - &dr_fake;
    let mut g_grads = model.generator.grads();
    model
        .generator
        .backward(&g_tape, Some(dfake), BTreeMap::new(), Some(&mut g_grads), false);
    (l_real, l_fake, d_grads, g_grads)
}

struct Trainer {
    model: BeganModel,
    g_opt: Adam,
    d_opt: Adam,
    k: f64,
    iteration: usize,
    history: Vec<StepRecord>,
}

impl Trainer {
    fn fresh(config: &BeganConfig) -> Result<Self> {
        let model = BeganModel::new(config)?;
        let adam = AdamConfig::with_lr(config.learning_rate);
        Ok(Trainer {
            g_opt: Adam::new(&model.generator, adam),
            d_opt: Adam::new(&model.discriminator, adam),
            k: config.k_initial,
            iteration: 0,
            history: Vec::new(),
            model,
        })
    }

    /// One simultaneous update of both networks and of `k_t`.
    fn step(&mut self, data: &[ImageRecord]) -> Result<StepRecord> {
        let iter = self.iteration + 1;
        let cfg = &self.model.config;
        let b = cfg.batch_size;
        // A per-iteration stream keeps batches identical across resumes.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(iter as u64);
        let idx = rand::seq::index::sample(&mut rng, data.len(), b).into_vec();
        let zs: Vec<LatentVector> = (0..b).map(|_| LatentVector::sample(&mut rng)).collect();
        let x = images_to_tensor(&idx.iter().map(|&i| &data[i].pixels).collect::<Vec<_>>())?;

        let (l_real, l_fake, d_grads, g_grads) = gradients(&self.model, &x, &zs, self.k);
        let finite = l_real.is_finite() && l_fake.is_finite() && d_grads.is_finite() && g_grads.is_finite();
        if !finite {
            return Err(Error::NonFinite(format!("BEGAN iteration {iter}")));
        }
        self.d_opt.step(&mut self.model.discriminator, &d_grads);
        self.g_opt.step(&mut self.model.generator, &g_grads);
        let gamma = self.model.config.gamma;
        self.k = update_k(self.k, l_real, l_fake, gamma, self.model.config.lambda_k);
        self.iteration = iter;
        let record = StepRecord {
            iter,
            l_real,
            l_fake,
            k_t: self.k,
            m_global: m_global(l_real, l_fake, gamma),
        };
        self.history.push(record);
        Ok(record)
    }

    fn save_checkpoint(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(format!("{CHECKPOINT_PREFIX}{}", self.iteration));
        let partial = root.join(format!(".{CHECKPOINT_PREFIX}{}.partial", self.iteration));
        if partial.exists() {
            fs::remove_dir_all(&partial).at(&partial)?;
        }
        fs::create_dir_all(&partial).at(&partial)?;
        let mut store = TensorStore::default();
        self.model.export(&mut store);
        self.g_opt.export(&mut store, "g_opt.");
        self.d_opt.export(&mut store, "d_opt.");
        store.set_metadata("iteration", self.iteration.to_string());
        store.set_metadata("k_t", format!("{:?}", self.k));
        store.set_metadata("config", serde_json::to_string(&self.model.config)?);
        store.save(&partial.join("state.safetensors"))?;
        let hist = partial.join("history.csv");
        fs::write(&hist, history_csv(&self.history)).at(&hist)?;
        if dir.exists() {
            fs::remove_dir_all(&dir).at(&dir)?;
        }
        fs::rename(&partial, &dir).at(&dir)?;
        Ok(dir)
    }

    fn load_checkpoint(dir: &Path, config: &BeganConfig) -> Result<Self> {
        let store = TensorStore::load(&dir.join("state.safetensors"))?;
        let meta = |k: &str| {
            store
                .metadata(k)
                .ok_or_else(|| Error::Weights(format!("checkpoint {} lacks {k}", dir.display())))
        };
        let saved: BeganConfig = serde_json::from_str(meta("config")?)?;
        let comparable = |c: &BeganConfig| BeganConfig {
            iterations: 0,
            checkpoint_interval: 0,
            keep_checkpoints: 0,
            ..c.clone()
        };
        if comparable(&saved) != comparable(config) {
            return Err(Error::Conflict(format!(
                "checkpoint {} was written with a different BEGAN configuration",
                dir.display()
            )));
        }
        let mut t = Trainer::fresh(config)?;
        t.model.import(&store)?;
        t.g_opt.import(&store, "g_opt.")?;
        t.d_opt.import(&store, "d_opt.")?;
        let parse_err = |k: &str| Error::Weights(format!("bad {k} in {}", dir.display()));
        t.iteration = meta("iteration")?.parse().map_err(|_| parse_err("iteration"))?;
        t.k = meta("k_t")?.parse().map_err(|_| parse_err("k_t"))?;
        t.history = load_history(&dir.join("history.csv"))?;
        Ok(t)
    }
}

/// Checkpoint directories under `root`, oldest first.
pub(crate) fn list_checkpoints(root: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = match fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(root, e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.at(root)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix(CHECKPOINT_PREFIX).and_then(|n| n.parse().ok()) {
            out.push((n, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn prune(root: &Path, keep: usize) -> Result<()> {
    let all = list_checkpoints(root)?;
    for (_, path) in all.iter().take(all.len().saturating_sub(keep.max(1))) {
        fs::remove_dir_all(path).at(path)?;
    }
    Ok(())
}

/// Trains on square images at `config.image_side`.
///
/// With a checkpoint directory, training resumes from its newest checkpoint
/// and writes a new one every `checkpoint_interval` iterations. Cancellation
/// through `control` returns `Interrupted` and leaves the checkpoints intact.
pub fn train_began(
    dataset: &[ImageRecord],
    config: &BeganConfig,
    checkpoints: Option<&Path>,
    control: &Control,
) -> Result<(BeganModel, BeganReport)> {
    config.validate()?;
    if dataset.len() < config.batch_size {
        return Err(Error::Invalid(format!(
            "BEGAN dataset has {} images, fewer than the batch size {}",
            dataset.len(),
            config.batch_size
        )));
    }
    let side = config.image_side as u32;
    if let Some(r) = dataset.iter().find(|r| r.pixels.dimensions() != (side, side)) {
        return Err(Error::Shape(format!(
            "image {} is {:?}, expected {side}x{side}",
            r.id,
            r.pixels.dimensions()
        )));
    }
    let mut report = BeganReport::default();
    let mut trainer = match checkpoints.map(list_checkpoints).transpose()?.and_then(|c| c.last().cloned()) {
        Some((iter, dir)) => {
            log::info!("resuming BEGAN training from iteration {iter}");
            report.resumed_from = Some(iter);
            Trainer::load_checkpoint(&dir, config)?
        }
        None => Trainer::fresh(config)?,
    };
    let mut last_good: Option<PathBuf> = None;
    while trainer.iteration < config.iterations {
        control.check()?;
        let rec = trainer.step(dataset).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(match &last_good {
                Some(p) => format!("{m}; last good checkpoint {}", p.display()),
                None => format!("{m}; no checkpoint written yet"),
            }),
            other => other,
        })?;
        if let Some(root) = checkpoints {
            if rec.iter % config.checkpoint_interval == 0 {
                last_good = Some(trainer.save_checkpoint(root)?);
                prune(root, config.keep_checkpoints)?;
            }
        }
        control.report("gan_train", rec.iter, config.iterations);
    }
    report.history = trainer.history;
    Ok((trainer.model, report))
}
