//! Synthetic data for tests, examples and offline toy runs.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{IoContext, Result};
use crate::imaging::{save_png, ClassLabel, ImageRecord, ImageSource, Provenance};

fn source(query: &str, locator: String) -> ImageSource {
    ImageSource {
        provider: "synthetic".into(),
        query: query.into(),
        locator,
    }
}

/// Uniform color with a little per-pixel jitter.
pub fn solid_image(side: u32, color: [u8; 3], jitter: u8, rng: &mut impl Rng) -> RgbImage {
    RgbImage::from_fn(side, side, |_, _| {
        Rgb(color.map(|c| {
            let d = if jitter == 0 { 0 } else { rng.random_range(0..=jitter) };
            c.saturating_sub(d)
        }))
    })
}

pub fn noise_image(side: u32, rng: &mut impl Rng) -> RgbImage {
    RgbImage::from_fn(side, side, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

/// Red squares labeled POSITIVE and white-noise images labeled NEGATIVE.
pub fn planted_dam_records(n_pos: usize, n_neg: usize, side: u32, seed: u64) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_pos + n_neg);
    for i in 0..n_pos {
        let red = rng.random_range(180..=255);
        let img = solid_image(side, [red, 0, 0], 12, &mut rng);
        out.push(ImageRecord::from_pixels(
            img,
            source("red", format!("red/{i}")),
            ClassLabel::Positive,
            Provenance::Harvested,
        ));
    }
    for i in 0..n_neg {
        let img = noise_image(side, &mut rng);
        out.push(ImageRecord::from_pixels(
            img,
            source("noise", format!("noise/{i}")),
            ClassLabel::Negative,
            Provenance::Harvested,
        ));
    }
    out
}

/// Soft "object on background" scenes: a vertical color gradient with one
/// filled disk. UNLABELED, as a concept harvest would be.
pub fn concept_images(n: usize, side: u32, seed: u64) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let top: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let bottom: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let disk: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let s = side as f64;
            let (cx, cy) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
            let r = rng.random_range(0.15..0.3) * s;
            let img = RgbImage::from_fn(side, side, |x, y| {
                let t = y as f64 / (s - 1.0).max(1.0);
                let inside = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r;
                Rgb(std::array::from_fn(|c| {
                    let v = if inside { disk[c] } else { top[c] * (1.0 - t) + bottom[c] * t };
                    (v * 255.0).round() as u8
                }))
            });
            ImageRecord::from_pixels(
                img,
                source("concept", format!("concept/{i}")),
                ClassLabel::Unlabeled,
                Provenance::Harvested,
            )
        })
        .collect()
}

/// Terms planted in the theme documents of the offline fixture.
pub const THEME_TERMS: [&str; 15] = [
    "algorithm", "android", "automation", "circuit", "cognition", "computing", "learning", "machine", "neural",
    "processor", "robot", "sensor", "silicon", "software", "synthetic",
];

/// Terms planted in the other documents.
pub const OTHER_TERMS: [&str; 15] = [
    "ballet", "beach", "cheese", "garden", "harvest", "museum", "opera", "orchard", "pastry", "recipe", "sailing",
    "soccer", "tennis", "village", "wine",
];

const FILLER: [&str; 10] = [
    "city", "week", "report", "people", "story", "morning", "editor", "column", "series", "weekend",
];

/// Files of an offline fixture tree.
#[derive(Debug, Clone)]
pub struct OfflineFixture {
    pub corpus: PathBuf,
    /// Root for the local search provider.
    pub images: PathBuf,
    pub style: PathBuf,
}

fn stripes(side: u32, a: [u8; 3], b: [u8; 3], period: u32, diagonal: bool) -> RgbImage {
    RgbImage::from_fn(side, side, |x, y| {
        let k = if diagonal { (x + y) / period } else { x / period };
        Rgb(if k % 2 == 0 { a } else { b })
    })
}

/// Writes a complete offline fixture under `root`:
///
/// * `tiny.jsonl`: 20 THEME and 20 OTHER documents, separable by the planted
///   terms, the first 12 THEME documents listing article images;
/// * `images/<term>/`: three red images per theme term and three noise
///   images per other term, plus 60 scenes under `images/ai/` for the
///   concept harvest with theme `ai`;
/// * `articles/`: the article images, alternating red and noise;
/// * `style/`: four patterned exemplars.
pub fn write_offline_fixture(root: &Path) -> Result<OfflineFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(2018);
    let images = root.join("images");
    let style = root.join("style");
    let corpus = root.join("tiny.jsonl");

    let mut lines = String::new();
    for (label, terms, prefix) in [("THEME", &THEME_TERMS, "t"), ("OTHER", &OTHER_TERMS, "o")] {
        for i in 0..20 {
            let mut words: Vec<&str> = (0..8).map(|j| terms[(i + j) % terms.len()]).collect();
            words.extend((0..4).map(|j| FILLER[(i + j) % FILLER.len()]));
            let text = format!("{}.", words.join(" "));
            let mut doc = serde_json::json!({"id": format!("{prefix}{i:02}"), "text": text, "label": label});
            if label == "THEME" && i < 12 {
                doc["meta"] = serde_json::json!({"images": format!("articles/a{i:02}.png"), "source": "fixture"});
            }
            lines.push_str(&doc.to_string());
            lines.push('\n');
        }
    }
    std::fs::create_dir_all(root).at(root)?;
    std::fs::write(&corpus, lines).at(&corpus)?;

    for term in THEME_TERMS {
        for k in 0..3 {
            let red = rng.random_range(180..=255);
            save_png(&images.join(term).join(format!("{k}.png")), &solid_image(72, [red, 0, 0], 12, &mut rng))?;
        }
    }
    for term in OTHER_TERMS {
        for k in 0..3 {
            save_png(&images.join(term).join(format!("{k}.png")), &noise_image(72, &mut rng))?;
        }
    }
    for (k, rec) in concept_images(60, 64, 7).iter().enumerate() {
        save_png(&images.join("ai").join(format!("{k:02}.png")), &rec.pixels)?;
    }
    for i in 0..12 {
        let img = if i % 2 == 0 {
            solid_image(80, [rng.random_range(180..=255), 0, 0], 12, &mut rng)
        } else {
            noise_image(80, &mut rng)
        };
        save_png(&root.join("articles").join(format!("a{i:02}.png")), &img)?;
    }
    let palettes = [
        ([20, 20, 20], [235, 225, 200], 6, false),
        ([180, 30, 40], [240, 240, 240], 9, true),
        ([30, 60, 140], [220, 200, 60], 5, true),
        ([60, 60, 60], [200, 200, 200], 12, false),
    ];
    for (k, (a, b, period, diagonal)) in palettes.into_iter().enumerate() {
        save_png(&style.join(format!("s{k}.png")), &stripes(96, a, b, period, diagonal))?;
    }
    Ok(OfflineFixture { corpus, images, style })
}
