//! Gram-matrix style transfer by direct pixel optimization against a tiled
//! style mosaic, using the appearance model's trunk as feature extractor.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use image::RgbImage;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::control::Control;
use crate::dam::{VggBackbone, CONV_NAMES};
use crate::error::{Error, Result};
use crate::imaging::{center_crop_resize, image_to_tensor, sample_to_image, ClassLabel, ImageRecord, ImageSource, Provenance};
use crate::nn::Tensor;

/// Largest accepted output side.
pub const MAX_OUTPUT_SIDE: u32 = 1048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleConfig {
    pub style_layers: Vec<String>,
    /// One weight per style layer.
    pub layer_weights: Vec<f64>,
    pub content_layer: String,
    /// alpha
    pub content_weight: f64,
    /// beta
    pub style_weight: f64,
    pub output_side: u32,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        StyleConfig {
            style_layers: ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"].map(String::from).to_vec(),
            layer_weights: vec![0.2; 5],
            content_layer: "conv4_2".into(),
            content_weight: 1.0,
            style_weight: 1e3,
            output_side: 1024,
            steps: 500,
            step_size: 0.02,
            seed: 0,
        }
    }
}

impl StyleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for name in self.style_layers.iter().chain(std::iter::once(&self.content_layer)) {
            if !CONV_NAMES.contains(&name.as_str()) {
                return bad(format!("unknown backbone layer {name:?}"));
            }
        }
        if self.layer_weights.len() != self.style_layers.len() {
            return bad(format!(
                "{} style layer weights for {} style layers",
                self.layer_weights.len(),
                self.style_layers.len()
            ));
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.content_weight) || !nonneg(self.style_weight) || !self.layer_weights.iter().all(|&w| nonneg(w)) {
            return bad("style weights must be finite and non-negative".into());
        }
        if self.output_side == 0 || self.output_side % 32 != 0 || self.output_side > MAX_OUTPUT_SIDE {
            return bad(format!(
                "style.output_side must be a multiple of 32 no larger than {MAX_OUTPUT_SIDE}, got {}",
                self.output_side
            ));
        }
        if !(self.step_size > 0.0) {
            return bad("style.step_size must be positive".into());
        }
        Ok(())
    }
}

/// `(rows, cols)` for `n` tiles: `cols = ceil(sqrt(n))`, `rows = ceil(n / cols)`.
pub fn mosaic_layout(n: usize) -> (usize, usize) {
    let mut cols = (n as f64).sqrt().ceil() as usize;
    // guard against float rounding for perfect squares
    while cols * cols < n {
        cols += 1;
    }
    while cols > 1 && (cols - 1) * (cols - 1) >= n {
        cols -= 1;
    }
    (n.div_ceil(cols.max(1)), cols)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleReference {
    pub mosaic: RgbImage,
    pub rows: usize,
    pub cols: usize,
    pub cell_side: u32,
    pub source_ids: Vec<String>,
}

/// Tiles square-normalized exemplars row-major, cycling from the first
/// exemplar to fill any remaining cells.
pub fn build_style_reference(exemplars: &[ImageRecord], cell_side: u32) -> Result<StyleReference> {
    if exemplars.is_empty() {
        return Err(Error::Invalid("style reference needs at least one exemplar".into()));
    }
    if cell_side == 0 {
        return Err(Error::Invalid("cell side must be positive".into()));
    }
    let (rows, cols) = mosaic_layout(exemplars.len());
    let cells: Vec<RgbImage> = exemplars.iter().map(|e| center_crop_resize(&e.pixels, cell_side)).collect();
    let mut mosaic = RgbImage::new(cols as u32 * cell_side, rows as u32 * cell_side);
    for i in 0..rows * cols {
        let (r, c) = (i / cols, i % cols);
        image::imageops::replace(
            &mut mosaic,
            &cells[i % cells.len()],
            (c as u32 * cell_side) as i64,
            (r as u32 * cell_side) as i64,
        );
    }
    Ok(StyleReference {
        mosaic,
        rows,
        cols,
        cell_side,
        source_ids: exemplars.iter().map(|e| e.id.clone()).collect(),
    })
}

/// `F Fᵀ / (C N)` for a `C x N` feature matrix.
pub fn gram(features: ArrayView2<f64>) -> Array2<f64> {
    let (c, n) = features.dim();
    let mut g = features.dot(&features.t());
    g /= (c * n).max(1) as f64;
    g
}

/// `(1, C, H, W)` activation as a `C x HW` matrix.
fn as_matrix(t: &Tensor) -> ArrayView2<'_, f64> {
    let (n, c, h, w) = t.dim();
    assert_eq!(n, 1, "single image");
    t.view()
        .into_shape_with_order((c, h * w))
        .expect("standard layout activation")
}

/// Fixed optimization targets: mosaic Grams and content features.
#[derive(Debug, Clone)]
pub struct Targets {
    grams: Vec<Array2<f64>>,
    content: Array2<f64>,
}

/// Losses of one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

/// Loss function over `[0, 1]` RGB images of one size.
pub struct Objective<'a> {
    backbone: &'a VggBackbone,
    config: &'a StyleConfig,
    style_idx: Vec<usize>,
    content_idx: usize,
    targets: Targets,
}

impl<'a> Objective<'a> {
    /// Targets from a content image and a style image, both `(1, 3, S, S)`.
    pub fn new(backbone: &'a VggBackbone, config: &'a StyleConfig, content: &Tensor, style: &Tensor) -> Result<Self> {
        config.validate()?;
        if content.dim() != style.dim() {
            return Err(Error::Shape(format!("content {:?} and style {:?} differ in size", content.dim(), style.dim())));
        }
        let style_idx = config
            .style_layers
            .iter()
            .map(|n| backbone.layer_index(n))
            .collect::<Result<Vec<_>>>()?;
        let content_idx = backbone.layer_index(&config.content_layer)?;
        let names: Vec<&str> = config.style_layers.iter().map(String::as_str).collect();
        let style_tape = backbone.tape_to(&VggBackbone::preprocess(style), &names)?;
        let grams = style_idx.iter().map(|&i| gram(as_matrix(style_tape.activation(i)))).collect();
        let content_feats = backbone.extract_features(&VggBackbone::preprocess(content), &[&config.content_layer])?;
        let content = as_matrix(&content_feats[&config.content_layer]).to_owned();
        Ok(Objective {
            backbone,
            config,
            style_idx,
            content_idx,
            targets: Targets { grams, content },
        })
    }

    fn layer_names(&self) -> Vec<&str> {
        self.config
            .style_layers
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(self.config.content_layer.as_str()))
            .collect()
    }

    /// Losses and, when `with_grad`, the gradient of the weighted total.
    pub fn evaluate(&self, x: &Tensor, with_grad: bool) -> Result<(LossBreakdown, Option<Tensor>)> {
        let (_, _, h, w) = x.dim();
        let expected = self.targets.content.dim();
        let tape = self.backbone.tape_to(&VggBackbone::preprocess(x), &self.layer_names())?;
        let mut injections: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut add = |idx: usize, g: Array2<f64>, shape: (usize, usize, usize, usize)| {
            let g = g.into_shape_with_order(shape).expect("activation shape");
            injections
                .entry(idx)
                .and_modify(|cur| *cur += &g)
                .or_insert(g);
        };
        let (alpha, beta) = (self.config.content_weight, self.config.style_weight);

        let mut style = 0.0;
        for ((&idx, target), &wl) in self.style_idx.iter().zip(&self.targets.grams).zip(&self.config.layer_weights) {
            let act = tape.activation(idx);
            let f = as_matrix(act);
            let (c, n) = f.dim();
            let diff = gram(f) - target;
            style += wl * diff.iter().map(|d| d * d).sum::<f64>();
            if with_grad && beta * wl != 0.0 {
                let mut df = diff.dot(&f);
                df *= beta * wl * 4.0 / (c * n) as f64;
                add(idx, df, act.dim());
            }
        }

        let act = tape.activation(self.content_idx);
        let f = as_matrix(act);
        if f.dim() != expected {
            return Err(Error::Shape(format!("image is {h}x{w}; targets were built at another size")));
        }
        let (c, n) = f.dim();
        let diff = &f - &self.targets.content;
        let content = diff.iter().map(|d| d * d).sum::<f64>() / (c * n) as f64;
        if with_grad && alpha != 0.0 {
            add(self.content_idx, diff * (2.0 * alpha / (c * n) as f64), act.dim());
        }

        let losses = LossBreakdown {
            content,
            style,
            total: alpha * content + beta * style,
        };
        if !with_grad {
            return Ok((losses, None));
        }
        let grad = if injections.is_empty() {
            Tensor::zeros(x.raw_dim())
        } else {
            let g = self
                .backbone
                .net()
                .backward(&tape, None, injections, None, true)
                .expect("input gradient");
            VggBackbone::preprocess_backward(&g)
        };
        Ok((losses, Some(grad)))
    }
}

/// Unweighted content loss between two equally sized images and its gradient
/// w.r.t. `output`.
pub fn content_loss(output: &Tensor, content: &Tensor, config: &StyleConfig, backbone: &VggBackbone) -> Result<(f64, Tensor)> {
    let cfg = StyleConfig {
        content_weight: 1.0,
        style_weight: 0.0,
        ..config.clone()
    };
    let obj = Objective::new(backbone, &cfg, content, content)?;
    let (l, g) = obj.evaluate(output, true)?;
    Ok((l.content, g.expect("gradient")))
}

/// Unweighted (sum over layers of `w_l ‖G - A‖²`) style loss of `output`
/// against `style` and its gradient w.r.t. `output`.
pub fn style_loss(output: &Tensor, style: &Tensor, config: &StyleConfig, backbone: &VggBackbone) -> Result<(f64, Tensor)> {
    let cfg = StyleConfig {
        content_weight: 0.0,
        style_weight: 1.0,
        ..config.clone()
    };
    let obj = Objective::new(backbone, &cfg, style, style)?;
    let (l, g) = obj.evaluate(output, true)?;
    Ok((l.style, g.expect("gradient")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Stylized {
    pub record: ImageRecord,
    /// Losses before each update; the last entry is the final iterate.
    pub losses: Vec<StepLoss>,
    /// Step whose iterate was returned.
    pub best_step: usize,
    pub warnings: Vec<String>,
}

impl Stylized {
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("step,content,style,total\n");
        for l in &self.losses {
            let _ = writeln!(out, "{},{},{},{}", l.step, l.content, l.style, l.total);
        }
        out
    }
}

/// Optimizes the pixels of the upscaled content image with Adam, clamping to
/// `[0, 1]` after every step, and returns the lowest-loss iterate.
pub fn stylize(
    content: &ImageRecord,
    reference: &StyleReference,
    config: &StyleConfig,
    backbone: &VggBackbone,
    control: &Control,
) -> Result<Stylized> {
    config.validate()?;
    let side = config.output_side;
    let content_px = center_crop_resize(&content.pixels, side);
    let style_px = center_crop_resize(&reference.mosaic, side);
    let content_t = image_to_tensor(&content_px);
    let objective = Objective::new(backbone, config, &content_t, &image_to_tensor(&style_px))?;

    let mut x = content_t;
    let mut m = Tensor::zeros(x.raw_dim());
    let mut v = Tensor::zeros(x.raw_dim());
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut losses = Vec::with_capacity(config.steps + 1);
    let mut warnings = Vec::new();
    let mut best = (f64::INFINITY, 0usize, x.clone());
    for step in 0..=config.steps {
        control.check()?;
        let last = step == config.steps;
        let (l, grad) = objective.evaluate(&x, !last)?;
        if !l.total.is_finite() {
            let msg = format!("non-finite style loss at step {step}; returning the last finite iterate");
            log::warn!("{msg}");
            warnings.push(msg);
            break;
        }
        losses.push(StepLoss {
            step,
            content: l.content,
            style: l.style,
            total: l.total,
        });
        if l.total < best.0 {
            best = (l.total, step, x.clone());
        }
        control.report("stylize", step, config.steps);
        let Some(g) = grad else { break };
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        ndarray::Zip::from(&mut x)
            .and(&mut m)
            .and(&mut v)
            .and(&g)
            .for_each(|x, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x = (*x - config.step_size * (*m / c1) / ((*v / c2).sqrt() + eps)).clamp(0.0, 1.0);
            });
    }
    let (_, best_step, best_x) = best;
    let pixels = sample_to_image(&best_x, 0);
    let record = ImageRecord::from_pixels(
        pixels,
        ImageSource {
            provider: "style_transfer".into(),
            query: content.id.clone(),
            locator: format!("styled/{}.png", content.id),
        },
        ClassLabel::Unlabeled,
        Provenance::Styled,
    );
    Ok(Stylized {
        record,
        losses,
        best_step,
        warnings,
    })
}
