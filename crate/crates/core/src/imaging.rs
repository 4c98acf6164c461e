//! Image records, content hashing, validation and raster conversions.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::ImageFormat;
pub use image::RgbImage;
use ndarray::{s, ArrayView3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::nn::Tensor;

/// Smallest accepted side of a harvested image.
pub const MIN_IMAGE_SIDE: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ClassLabel {
    Positive,
    Negative,
    Unlabeled,
}

impl ClassLabel {
    pub fn dir_name(self) -> &'static str {
        match self {
            ClassLabel::Positive => "positive",
            ClassLabel::Negative => "negative",
            ClassLabel::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Provenance {
    Article,
    Harvested,
    Generated,
    Styled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSource {
    pub provider: String,
    pub query: String,
    pub locator: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// SHA-256 of the original encoded bytes.
    pub id: String,
    pub source: ImageSource,
    pub pixels: RgbImage,
    pub class_label: ClassLabel,
    pub provenance: Provenance,
    /// Generator input, for records produced by a generator.
    pub latent: Option<Vec<f64>>,
}

/// Everything in a record except its pixels; one manifest line per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: String,
    pub source: ImageSource,
    pub class_label: ClassLabel,
    pub provenance: Provenance,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<f64>>,
}

/// Why raw bytes were rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    Undecodable(String),
    TooSmall { width: u32, height: u32 },
}

impl ImageRecord {
    /// Decodes and validates raw bytes; the id is the hash of those bytes.
    pub fn from_bytes(
        bytes: &[u8],
        source: ImageSource,
        class_label: ClassLabel,
        provenance: Provenance,
        min_side: u32,
    ) -> std::result::Result<Self, Rejection> {
        let pixels = decode_rgb(bytes).map_err(|e| Rejection::Undecodable(e.to_string()))?;
        if pixels.width().min(pixels.height()) < min_side {
            return Err(Rejection::TooSmall {
                width: pixels.width(),
                height: pixels.height(),
            });
        }
        Ok(ImageRecord {
            id: content_hash(bytes),
            source,
            pixels,
            class_label,
            provenance,
            latent: None,
        })
    }

    /// Record for a raster produced in-process; the id hashes its PNG encoding.
    pub fn from_pixels(pixels: RgbImage, source: ImageSource, class_label: ClassLabel, provenance: Provenance) -> Self {
        let id = content_hash(&encode_png(&pixels));
        ImageRecord {
            id,
            source,
            pixels,
            class_label,
            provenance,
            latent: None,
        }
    }

    pub fn meta(&self) -> RecordMeta {
        RecordMeta {
            id: self.id.clone(),
            source: self.source.clone(),
            class_label: self.class_label,
            provenance: self.provenance,
            width: self.pixels.width(),
            height: self.pixels.height(),
            latent: self.latent.clone(),
        }
    }

    pub fn from_meta(meta: RecordMeta, pixels: RgbImage) -> Self {
        ImageRecord {
            id: meta.id,
            source: meta.source,
            pixels,
            class_label: meta.class_label,
            provenance: meta.provenance,
            latent: meta.latent,
        }
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory png encoding");
    out.into_inner()
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, encode_png(img)).at(path)
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).at(path)?;
    decode_rgb(&bytes)
}

/// Center-crops to a square, then bilinearly resizes to `side x side`.
/// A square input already at `side` is returned unchanged.
pub fn center_crop_resize(img: &RgbImage, side: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let crop = w.min(h);
    let x0 = (w - crop) / 2;
    let y0 = (h - crop) / 2;
    let square = if w == h {
        img.clone()
    } else {
        imageops::crop_imm(img, x0, y0, crop, crop).to_image()
    };
    if crop == side {
        square
    } else {
        imageops::resize(&square, side, side, FilterType::Triangle)
    }
}

/// Bilinear resize without cropping.
pub fn resize_exact(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        img.clone()
    } else {
        imageops::resize(img, width, height, FilterType::Triangle)
    }
}

/// Square-normalizes every record's pixels; ids and provenance are kept.
pub fn normalize_images(records: &[ImageRecord], side: u32) -> Vec<ImageRecord> {
    records
        .iter()
        .map(|r| ImageRecord {
            pixels: center_crop_resize(&r.pixels, side),
            ..r.clone()
        })
        .collect()
}

/// Stacks equally sized images into a `(N, 3, H, W)` tensor scaled to [0, 1].
pub fn images_to_tensor(images: &[&RgbImage]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Invalid("no images to stack".into()));
    };
    let (w, h) = first.dimensions();
    let mut t = Tensor::zeros((images.len(), 3, h as usize, w as usize));
    for (n, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape(format!(
                "image {n} is {:?}, expected {:?}",
                img.dimensions(),
                (w, h)
            )));
        }
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                t[[n, c, y as usize, x as usize]] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(t)
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    images_to_tensor(&[img]).expect("single image")
}

/// Converts a `(3, H, W)` raster in [0, 1] to 8-bit, rounding and clamping.
pub fn tensor_to_image(t: ArrayView3<f64>) -> RgbImage {
    let (c, h, w) = t.dim();
    assert_eq!(c, 3, "expected 3 channels");
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (t[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn sample_to_image(t: &Tensor, n: usize) -> RgbImage {
    tensor_to_image(t.slice(s![n, .., .., ..]))
}
