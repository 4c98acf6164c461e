//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `ACCEPTANCE_ONLY=<substring>` runs a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use concept_canvas::began::{train_began, update_k, BeganConfig, BeganModel, LatentVector};
use concept_canvas::config::Config;
use concept_canvas::control::Control;
use concept_canvas::corpus::{build_vocabulary, tfidf_vectorize, Corpus, Document, Label, Tokenizer, VocabularyConfig};
use concept_canvas::dam::{train_dam, DamConfig, Pooling, VggBackbone, CONV_NAMES};
use concept_canvas::dtm::{extract_discriminative_terms, logistic_loss_and_grad, train_dtm, DtmConfig};
use concept_canvas::fixtures::{concept_images, planted_dam_records, write_offline_fixture};
use concept_canvas::imaging::{center_crop_resize, content_hash, load_png, save_png, ClassLabel};
use concept_canvas::nn::Tensor;
use concept_canvas::style::{build_style_reference, content_loss, gram, mosaic_layout, style_loss, stylize, Objective, StyleConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_concept-canvas");

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Runner {
    only: Option<String>,
    failed: Vec<String>,
}

impl Runner {
    fn check(&mut self, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Check) {
        if self.only.as_deref().is_some_and(|o| !name.contains(o)) {
            return;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let timing = match limit {
            Some(l) => format!("{:.2} s of {} s", elapsed.as_secs_f64(), l.as_secs()),
            None => format!("{:.2} s", elapsed.as_secs_f64()),
        };
        let (ok, detail) = match outcome {
            Ok(d) if limit.is_some_and(|l| elapsed > l) => (false, format!("{d}; over the time limit")),
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        println!("[{}] {name}: {detail} ({timing})", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(name.to_string());
        }
    }
}

fn main() -> ExitCode {
    let mut r = Runner {
        only: std::env::var("ACCEPTANCE_ONLY").ok().filter(|s| !s.is_empty()),
        failed: Vec::new(),
    };
    r.check("tfidf-oracle", Some(Duration::from_secs(1)), tfidf_oracle);
    r.check("dtm-separability", Some(Duration::from_secs(10)), dtm_separability);
    r.check("dtm-gradient", None, dtm_gradient);
    r.check("dam-planted-classes", Some(Duration::from_secs(120)), dam_planted);
    r.check("vgg-shapes", None, vgg_shapes);
    r.check("began-control-law", None, began_control_law);
    let mut trained = None;
    r.check("began-defaults-and-toy-run", Some(Duration::from_secs(180)), || began_toy(&mut trained));
    r.check("generator-determinism", None, || generator_determinism(trained.as_ref()));
    r.check("style-losses", Some(Duration::from_secs(120)), style_losses);
    r.check("style-layers-and-1024", None, style_layers_and_1024);
    r.check("pipeline-end-to-end", Some(Duration::from_secs(600)), pipeline_end_to_end);
    r.check("api-contract", None, api_contract);
    if r.failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} failed: {}", r.failed.len(), r.failed.join(", "));
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- tf/idf

/// Brute-force tf/idf over clean token lists.
fn oracle_tfidf(docs: &[Vec<String>], min_df: usize, max_df_fraction: f64) -> (Vec<String>, Vec<Vec<f64>>) {
    let n = docs.len();
    let mut vocab: Vec<String> = docs.iter().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let df = |t: &str| docs.iter().filter(|d| d.iter().any(|x| x == t)).count();
    vocab.retain(|t| {
        let d = df(t);
        d >= min_df && d as f64 <= max_df_fraction * n as f64
    });
    let rows = docs
        .iter()
        .map(|d| {
            let raw: Vec<f64> = vocab
                .iter()
                .map(|t| {
                    let tf = d.iter().filter(|x| *x == t).count() as f64;
                    tf * (((1 + n) as f64 / (1 + df(t)) as f64).ln() + 1.0)
                })
                .collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            raw.iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }).collect()
        })
        .collect();
    (vocab, rows)
}

fn tfidf_oracle() -> Check {
    let mut worst = 0.0f64;
    let mut cells = 0usize;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let pool_size = rng.random_range(20..=50);
        let pool: Vec<String> = (0..pool_size).map(|i| format!("term{i:02}")).collect();
        let n_docs = rng.random_range(4..=10);
        let mut tokens = Vec::new();
        let mut documents = Vec::new();
        for d in 0..n_docs {
            let len = rng.random_range(3..=15);
            let words: Vec<String> = (0..len).map(|_| pool[rng.random_range(0..pool_size)].clone()).collect();
            // mixed case and punctuation exercise the tokenizer
            let text = words
                .iter()
                .enumerate()
                .map(|(i, w)| if i % 3 == 0 { format!("{}, ", w.to_uppercase()) } else { format!("{w} ") })
                .collect::<String>();
            documents.push(Document {
                id: format!("d{d:02}"),
                text,
                label: if d % 2 == 0 { Label::Theme } else { Label::Other },
                metadata: BTreeMap::new(),
            });
            tokens.push(words);
        }
        let (min_df, max_df) = if seed < 2 { (1, 1.0) } else { (2, 0.9) };
        let corpus = Corpus::new(documents).map_err(|e| e.to_string())?;
        let tokenized = corpus.tokenize(&Tokenizer::default());
        let vocab = build_vocabulary(
            &tokenized,
            VocabularyConfig {
                min_df,
                max_df_fraction: max_df,
            },
        )
        .map_err(|e| e.to_string())?;
        let matrix = tfidf_vectorize(&tokenized, &vocab);
        let (o_vocab, o_rows) = oracle_tfidf(&tokens, min_df, max_df);
        ensure(vocab.terms() == o_vocab.as_slice(), || format!("corpus {seed}: vocabulary differs"))?;
        for (r, id) in matrix.rows.iter().enumerate() {
            let d: usize = id[1..].parse().unwrap();
            for c in 0..o_vocab.len() {
                worst = worst.max((matrix.get(r, c) - o_rows[d][c]).abs());
                cells += 1;
            }
        }
    }
    ensure(worst <= 1e-9, || format!("max |diff| {worst:e} > 1e-9"))?;
    Ok(format!("5 corpora, {cells} cells, max |diff| {worst:.1e} (tol 1e-9)"))
}

// ---------------------------------------------------------------- DTM

const PLANTED_THEME: [&str; 15] = [
    "android", "algorithm", "circuit", "cognition", "compute", "cyborg", "dataset", "neuron", "processor", "robot",
    "sensor", "silicon", "software", "synthetic", "automaton",
];
const PLANTED_OTHER: [&str; 15] = [
    "ballet", "beach", "cheese", "garden", "harvest", "museum", "opera", "orchard", "pastry", "recipe", "sailing",
    "soup", "tennis", "tulip", "vineyard",
];
const FILLERS: [&str; 10] = [
    "report", "city", "morning", "market", "season", "county", "weekend", "photo", "editor", "column",
];

/// 20 + 20 documents; each class uses its own 15 terms in the same pattern,
/// and both classes share the same filler pattern.
fn planted_corpus() -> Corpus {
    let mut docs = Vec::new();
    for (label, terms) in [(Label::Theme, PLANTED_THEME), (Label::Other, PLANTED_OTHER)] {
        for i in 0..20 {
            let mut words: Vec<&str> = (0..8).map(|k| terms[(i * 8 + k) % 15]).collect();
            words.extend([FILLERS[i % 10], FILLERS[(i + 1) % 10], FILLERS[(i + 4) % 10]]);
            docs.push(Document {
                id: format!("{}-{i:02}", label.as_str().to_lowercase()),
                text: words.join(" "),
                label,
                metadata: BTreeMap::new(),
            });
        }
    }
    Corpus::new(docs).unwrap()
}

fn dtm_separability() -> Check {
    let corpus = planted_corpus();
    let tokenized = corpus.tokenize(&Tokenizer::default());
    let vocab = build_vocabulary(&tokenized, VocabularyConfig::default()).map_err(|e| e.to_string())?;
    let matrix = tfidf_vectorize(&tokenized, &vocab);
    let labels = corpus.labels();
    let model = train_dtm(&matrix, &labels, DtmConfig::default()).map_err(|e| e.to_string())?;
    let acc = model.accuracy(&matrix, &labels);
    ensure(acc == 1.0, || format!("training accuracy {acc}"))?;
    let terms = extract_discriminative_terms(&model, &vocab, 15, 15).map_err(|e| e.to_string())?;
    let pos: BTreeSet<&str> = terms.positives.iter().map(|t| t.term.as_str()).collect();
    let neg: BTreeSet<&str> = terms.negatives.iter().map(|t| t.term.as_str()).collect();
    ensure(pos == PLANTED_THEME.into_iter().collect(), || format!("positives {pos:?}"))?;
    ensure(neg == PLANTED_OTHER.into_iter().collect(), || format!("negatives {neg:?}"))?;
    Ok(format!(
        "accuracy 1.0, top 15+15 are exactly the 30 planted terms (weakest planted |w| {:.3})",
        terms.positives.iter().chain(&terms.negatives).map(|t| t.weight.abs()).fold(f64::INFINITY, f64::min)
    ))
}

fn dtm_gradient() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d) = (30, 12);
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|_| {
            let mut row = Vec::new();
            for c in 0..d {
                if rng.random_bool(0.5) {
                    row.push((c, rng.random_range(-1.0..1.0)));
                }
            }
            row
        })
        .collect();
    let refs: Vec<&[(usize, f64)]> = rows.iter().map(Vec::as_slice).collect();
    let targets: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = 0.3;
    let l2 = 1e-3;
    let (_, gw, gb) = logistic_loss_and_grad(&refs, &targets, &w, b, l2);
    let loss_at = |w: &[f64], b: f64| logistic_loss_and_grad(&refs, &targets, w, b, l2).0;
    let eps = 1e-6;
    let mut numeric = Vec::with_capacity(d + 1);
    for j in 0..d {
        let (mut p, mut m) = (w.clone(), w.clone());
        p[j] += eps;
        m[j] -= eps;
        numeric.push((loss_at(&p, b) - loss_at(&m, b)) / (2.0 * eps));
    }
    numeric.push((loss_at(&w, b + eps) - loss_at(&w, b - eps)) / (2.0 * eps));
    let analytic: Vec<f64> = gw.iter().copied().chain([gb]).collect();
    let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    let rel = diff / scale;
    ensure(rel < 1e-5, || format!("relative error {rel:e}"))?;
    Ok(format!("relative error {rel:.1e} over {} parameters (tol 1e-5)", d + 1))
}

// ---------------------------------------------------------------- DAM

fn dam_planted() -> Check {
    let train = planted_dam_records(40, 40, 224, 1);
    let holdout = planted_dam_records(10, 10, 224, 2);
    let config = DamConfig {
        width_divisor: 8,
        image_side: 224,
        epochs: 5,
        learning_rate: 1e-3,
        holdout_fraction: 0.0,
        allow_random_init: true,
        ..DamConfig::default()
    };
    let model = train_dam(&train, &config).map_err(|e| e.to_string())?;
    let acc = model.accuracy(&train).map_err(|e| e.to_string())?;
    ensure(acc >= 0.95, || format!("train accuracy {acc:.3} after 5 epochs"))?;
    let ranked = model.rank_images(&holdout, holdout.len()).map_err(|e| e.to_string())?;
    let labels: Vec<ClassLabel> = ranked.iter().map(|r| r.record.class_label).collect();
    let first_neg = labels.iter().position(|l| *l != ClassLabel::Positive).unwrap_or(labels.len());
    ensure(first_neg == 10 && labels[10..].iter().all(|l| *l != ClassLabel::Positive), || {
        format!("holdout order {labels:?}")
    })?;
    Ok(format!(
        "train accuracy {acc:.3} (>= 0.95) in 5 epochs; holdout 20 ranked with all 10 positives first"
    ))
}

fn vgg_shapes() -> Check {
    let widths = [64, 128, 256, 512, 512];
    let depths = [2, 2, 3, 3, 3];
    let mut expected_names = Vec::new();
    for (b, &depth) in depths.iter().enumerate() {
        for i in 0..depth {
            expected_names.push((format!("conv{}_{}", b + 1, i + 1), b));
        }
    }
    ensure(expected_names.len() == 13, || "table".into())?;
    let vgg = VggBackbone::random(1, Pooling::Max, 0).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for side in [128usize, 224] {
        let x = Tensor::zeros((1, 3, side, side));
        let names: Vec<&str> = expected_names.iter().map(|(n, _)| n.as_str()).collect();
        ensure(names == CONV_NAMES, || format!("layer names {CONV_NAMES:?}"))?;
        let feats = vgg.extract_features(&x, &names).map_err(|e| e.to_string())?;
        for (name, b) in &expected_names {
            let want = (1, widths[*b], side >> b, side >> b);
            let got = feats[name].dim();
            ensure(got == want, || format!("{name} at {side}: {got:?}, expected {want:?}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} activation shapes at inputs 128 and 224 match the topology table"))
}

// ---------------------------------------------------------------- BEGAN

fn began_control_law() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (gamma, lambda) = (0.5, 1e-3);
    for _ in 0..10_000 {
        let k = rng.random_range(0.0..=1.0);
        let l_real = rng.random_range(0.0..5.0);
        let l_fake = rng.random_range(0.0..5.0);
        let next = update_k(k, l_real, l_fake, gamma, lambda);
        ensure((0.0..=1.0).contains(&next), || format!("k={k} L_real={l_real} L_fake={l_fake} gives {next}"))?;
        let fixed = update_k(k, l_real, gamma * l_real, gamma, lambda);
        ensure(fixed == k, || format!("equilibrium moved {k} to {fixed}"))?;
    }
    let hand = update_k(0.5, 0.2, 0.05, 0.5, 1e-3);
    ensure((hand - 0.50005).abs() < 1e-12, || format!("hand case gives {hand}"))?;
    Ok(format!("10000 triples stay in [0, 1] with exact fixed points; hand case {hand}"))
}

fn began_toy(trained: &mut Option<BeganModel>) -> Check {
    let d = BeganConfig::default();
    let audit = [
        ("iterations", d.iterations as f64, 17000.0),
        ("batch", d.batch_size as f64, 16.0),
        ("side", d.image_side as f64, 128.0),
        ("lr", d.learning_rate, 1e-4),
        ("gamma", d.gamma, 0.5),
        ("z-dim", d.latent_dim() as f64, 100.0),
    ];
    for (name, got, want) in audit {
        ensure(got == want, || format!("default {name} is {got}, expected {want}"))?;
    }
    let config = BeganConfig {
        iterations: 200,
        ..Config::toy().began
    };
    let data = concept_images(64, 32, 1);
    let (model, report) = train_began(&data, &config, None, &Control::new()).map_err(|e| e.to_string())?;
    let h = &report.history;
    ensure(h.len() == 200, || format!("{} history rows", h.len()))?;
    for s in h {
        ensure(s.l_real.is_finite() && s.l_fake.is_finite() && s.m_global.is_finite(), || format!("non-finite at {}", s.iter))?;
        ensure((0.0..=1.0).contains(&s.k_t), || format!("k_t {} at {}", s.k_t, s.iter))?;
    }
    let (m1, m200) = (h[0].m_global, h[199].m_global);
    ensure(m200 < m1, || format!("M_global(200) {m200:.4} >= M_global(1) {m1:.4}"))?;
    *trained = Some(model);
    Ok(format!(
        "defaults 17000/16/128/1e-4/0.5/100; 200 toy iterations at 32 px finite, k_t in [0, 1], M_global {m1:.4} -> {m200:.4}"
    ))
}

fn generator_determinism(trained: Option<&BeganModel>) -> Check {
    let fresh;
    let model = match trained {
        Some(m) => m,
        None => {
            fresh = BeganModel::new(&Config::toy().began).map_err(|e| e.to_string())?;
            &fresh
        }
    };
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).map_err(|e| e.to_string())?;
    let loaded = BeganModel::load(dir.path()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..8 {
        let z = LatentVector::sample(&mut rng);
        let a = model.generate_batch(&[&z]);
        ensure(a == model.generate_batch(&[&z]), || format!("repeated call {i} differs"))?;
        ensure(a == loaded.generate_batch(&[&z]), || format!("save/load changed output {i}"))?;
        ensure(model.generate(&z) == loaded.generate(&z), || format!("image {i} differs"))?;
    }
    Ok("8 latents: outputs bit-identical across repeated calls and a save/load round trip".into())
}

// ---------------------------------------------------------------- style

fn random_image(side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_shape_fn((1, 3, side, side), |_| rng.random_range(0.05..0.95))
}

fn style_losses() -> Check {
    // Gram: symmetric, positive semidefinite, equal to F Fᵀ / (C N)
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut min_eig = f64::INFINITY;
    for _ in 0..1000 {
        let (c, n) = (rng.random_range(1..=8), rng.random_range(1..=64));
        let f = Array2::from_shape_fn((c, n), |_| rng.random_range(-2.0..2.0));
        let g = gram(f.view());
        for i in 0..c {
            for j in 0..c {
                ensure(g[[i, j]] == g[[j, i]], || "gram not symmetric".into())?;
                let brute = (0..n).map(|k| f[[i, k]] * f[[j, k]]).sum::<f64>() / (c * n) as f64;
                ensure((g[[i, j]] - brute).abs() <= 1e-12 * brute.abs().max(1.0), || "gram value".into())?;
            }
        }
        let m = nalgebra::DMatrix::from_fn(c, c, |i, j| g[[i, j]]);
        let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
        let eig = m.symmetric_eigen().eigenvalues.min() / scale;
        min_eig = min_eig.min(eig);
        ensure(eig >= -1e-12, || format!("gram eigenvalue {eig:e}"))?;
    }

    let vgg = VggBackbone::random(8, Pooling::Avg, 11).map_err(|e| e.to_string())?;
    let small = StyleConfig {
        output_side: 32,
        ..StyleConfig::default()
    };
    let x = random_image(32, 1);
    let (s0, _) = style_loss(&x, &x, &small, &vgg).map_err(|e| e.to_string())?;
    let (c0, _) = content_loss(&x, &x, &small, &vgg).map_err(|e| e.to_string())?;
    ensure(s0 == 0.0 && c0 == 0.0, || format!("identity losses {s0} {c0}"))?;

    // combined gradient against central differences
    let obj = Objective::new(&vgg, &small, &random_image(32, 4), &random_image(32, 5)).map_err(|e| e.to_string())?;
    let x = random_image(32, 6);
    let grad = obj.evaluate(&x, true).map_err(|e| e.to_string())?.1.unwrap();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..16 {
        let idx = (0, rng.random_range(0..3), rng.random_range(0..32), rng.random_range(0..32));
        let (mut p, mut m) = (x.clone(), x.clone());
        p[idx] += eps;
        m[idx] -= eps;
        let total = |t: &Tensor| obj.evaluate(t, false).map(|r| r.0.total).map_err(|e| e.to_string());
        let numeric = (total(&p)? - total(&m)?) / (2.0 * eps);
        let rel = (grad[idx] - numeric).abs() / grad[idx].abs().max(numeric.abs()).max(1e-10);
        worst = worst.max(rel);
    }
    ensure(worst < 1e-3, || format!("gradient relative error {worst:e}"))?;

    // style only at 64 px
    let cfg = StyleConfig {
        content_weight: 0.0,
        output_side: 64,
        steps: 50,
        ..StyleConfig::default()
    };
    let reference = build_style_reference(&concept_images(4, 64, 10), 32).map_err(|e| e.to_string())?;
    let content = concept_images(1, 64, 8).remove(0);
    let out = stylize(&content, &reference, &cfg, &vgg, &Control::new()).map_err(|e| e.to_string())?;
    let first = out.losses[0].style;
    let best = out.losses[out.best_step].style;
    ensure(out.losses.len() <= 51 && best < first, || format!("style loss {first} -> {best}"))?;

    // mosaic layouts and fill
    let exemplars = concept_images(9, 40, 2);
    for n in [1usize, 4, 5, 9] {
        let cols = (1..).find(|c| c * c >= n).unwrap();
        let rows = n.div_ceil(cols);
        ensure(mosaic_layout(n) == (rows, cols), || format!("layout({n}) = {:?}", mosaic_layout(n)))?;
        let cell = 16u32;
        let r = build_style_reference(&exemplars[..n], cell).map_err(|e| e.to_string())?;
        ensure(r.mosaic.dimensions() == (cols as u32 * cell, rows as u32 * cell), || format!("mosaic size for {n}"))?;
        for i in 0..rows * cols {
            let tile = image::imageops::crop_imm(&r.mosaic, (i % cols) as u32 * cell, (i / cols) as u32 * cell, cell, cell).to_image();
            ensure(tile == center_crop_resize(&exemplars[i % n].pixels, cell), || format!("cell {i} of {n}"))?;
        }
    }
    Ok(format!(
        "1000 Grams symmetric and PSD (min scaled eigenvalue {min_eig:.1e}); zero at identity; gradient rel err {worst:.1e} (tol 1e-3); style loss {first:.3e} -> {best:.3e} in 50 steps; mosaics for 1, 4, 5, 9"
    ))
}

fn style_layers_and_1024() -> Check {
    let d = StyleConfig::default();
    ensure(d.style_layers == ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"], || format!("{:?}", d.style_layers))?;
    ensure(d.content_layer == "conv4_2", || d.content_layer.clone())?;
    let cfg = StyleConfig {
        output_side: 1024,
        steps: 2,
        ..d
    };
    let vgg = VggBackbone::random(8, Pooling::Avg, 0).map_err(|e| e.to_string())?;
    let reference = build_style_reference(&concept_images(4, 128, 3), 128).map_err(|e| e.to_string())?;
    let content = concept_images(1, 128, 4).remove(0);
    let out = stylize(&content, &reference, &cfg, &vgg, &Control::new()).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("styled.png");
    save_png(&path, &out.record.pixels).map_err(|e| e.to_string())?;
    let back = load_png(&path).map_err(|e| e.to_string())?;
    ensure(back.dimensions() == (1024, 1024), || format!("{:?}", back.dimensions()))?;
    Ok("style layers conv1_1..conv5_1, content conv4_2; output_side 1024 writes a 1024x1024 PNG".into())
}

// ---------------------------------------------------------------- pipeline

fn cli<S: AsRef<str>>(root: &Path, args: &[S]) -> Result<Value, String> {
    let args: Vec<&str> = args.iter().map(AsRef::as_ref).collect();
    let out = Command::new(BIN)
        .args(&args)
        .arg("--json")
        .env("CONCEPT_CANVAS_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| format!("{args:?}: {e}"))
}

const FINAL_FILES: [&str; 3] = ["final/final.png", "final/provenance.json", "gan/report.csv"];

fn final_bytes(run_dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    FINAL_FILES
        .iter()
        .map(|f| std::fs::read(run_dir.join(f)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

/// Every planned stage recorded artifacts, and each one matches its hash.
fn check_manifest(run_dir: &Path) -> Result<usize, String> {
    let m: Value = serde_json::from_slice(&std::fs::read(run_dir.join("manifest.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(m["stage"] == "DONE", || format!("stage {}", m["stage"]))?;
    let plan = [
        "CORPUS", "DTM", "TERM_REVIEW", "HARVEST", "DAM_TRAIN", "RANKING", "CONCEPT_SELECTION", "CONCEPT_HARVEST",
        "GAN_TRAIN", "GENERATION", "CANDIDATE_SELECTION", "STYLE_BUILD", "STYLIZE", "FINAL_SELECTION",
    ];
    let mut n = 0;
    for stage in plan {
        let arts = m["artifacts"][stage].as_array().ok_or_else(|| format!("no artifacts for {stage}"))?;
        ensure(!arts.is_empty(), || format!("empty artifacts for {stage}"))?;
        for a in arts {
            let path = run_dir.join(a["path"].as_str().unwrap());
            let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            ensure(content_hash(&bytes) == a["sha256"].as_str().unwrap(), || format!("hash mismatch {}", path.display()))?;
            n += 1;
        }
    }
    ensure(m["gate_decisions"].as_array().map(Vec::len) == Some(4), || "gate decisions".into())?;
    Ok(n)
}

fn stage_command(stage: &str) -> Option<&'static str> {
    Some(match stage {
        "DTM" => "train-dtm",
        "HARVEST" | "CONCEPT_HARVEST" => "harvest",
        "DAM_TRAIN" => "train-dam",
        "RANKING" => "rank",
        "GAN_TRAIN" => "train-gan",
        "GENERATION" => "generate",
        "STYLE_BUILD" => "style-ref",
        "STYLIZE" => "stylize",
        _ => return None,
    })
}

fn spawn_cli<S: AsRef<str>>(root: &Path, args: &[S]) -> Child {
    Command::new(BIN)
        .args(args.iter().map(AsRef::as_ref))
        .env("CONCEPT_CANVAS_ROOT", root)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap()
}

/// Kills `child` with SIGKILL once `stage` has reported progress.
fn kill_during(child: &mut Child, events: &Path, stage: &str) -> Result<(), String> {
    let start = Instant::now();
    loop {
        if let Some(status) = child.try_wait().map_err(|e| e.to_string())? {
            return Err(format!("process exited ({status}) before {stage} made progress"));
        }
        if let Ok(f) = std::fs::File::open(events) {
            let hit = BufReader::new(f).lines().map_while(Result::ok).any(|l| {
                serde_json::from_str::<Value>(&l).is_ok_and(|e| e["stage"] == stage && e["kind"] == "progress")
            });
            if hit {
                child.kill().map_err(|e| e.to_string())?;
                child.wait().map_err(|e| e.to_string())?;
                return Ok(());
            }
        }
        ensure(start.elapsed() < Duration::from_secs(300), || format!("{stage} never started"))?;
        std::thread::sleep(Duration::from_millis(10));
    }
}

fn pipeline_end_to_end() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let fx = write_offline_fixture(&tmp.path().join("fixture")).map_err(|e| e.to_string())?;
    let root = tmp.path().join("runs");
    let corpus = fx.corpus.display().to_string();
    let provider = format!("local:{}", fx.images.display());
    let new_run = |cmd: &str, id: &str, auto: bool| -> Vec<String> {
        let mut args = vec![cmd, "--theme", "ai", "--corpus", &corpus, "--provider", &provider, "--toy", "--run", id];
        if auto {
            args.extend(["--gates", "auto"]);
        }
        args.into_iter().map(String::from).collect()
    };

    // straight through in one process
    let v = cli(&root, &new_run("run", "straight", true))?;
    ensure(v["stage"] == "DONE", || format!("run ended at {}", v["stage"]))?;
    let n_artifacts = check_manifest(&root.join("straight"))?;
    let reference = final_bytes(&root.join("straight"))?;

    // a fresh process for every stage and gate
    cli(&root, &new_run("ingest", "stepwise", false))?;
    let mut processes = 1;
    loop {
        let status = cli(&root, &["status", "--run", "stepwise"])?;
        let stage = status["stage"].as_str().unwrap().to_string();
        if stage == "DONE" {
            break;
        }
        match stage_command(&stage) {
            Some(cmd) => cli(&root, &[cmd, "--run", "stepwise"])?,
            None => cli(&root, &["select", "--run", "stepwise", "--default"])?,
        };
        processes += 1;
    }
    ensure(final_bytes(&root.join("stepwise"))? == reference, || "stepwise run differs".into())?;
    check_manifest(&root.join("stepwise"))?;

    // SIGKILL inside the two checkpointed stages, then resume
    let mut child = spawn_cli(&root, &new_run("run", "killed", true));
    let events = root.join("killed/events.jsonl");
    kill_during(&mut child, &events, "GAN_TRAIN")?;
    let mut child = spawn_cli(&root, &["resume", "--run", "killed", "--gates", "auto"]);
    kill_during(&mut child, &events, "STYLIZE")?;
    let v = cli(&root, &["resume", "--run", "killed", "--gates", "auto"])?;
    ensure(v["stage"] == "DONE", || format!("resumed run ended at {}", v["stage"]))?;
    ensure(final_bytes(&root.join("killed"))? == reference, || "killed-and-resumed run differs".into())?;
    check_manifest(&root.join("killed"))?;

    Ok(format!(
        "toy run DONE with {n_artifacts} hashed artifacts; {processes} separate processes and a SIGKILL in GAN_TRAIN and STYLIZE reproduce {} byte-identically",
        FINAL_FILES.join(", ")
    ))
}

// ---------------------------------------------------------------- API

struct Server {
    child: Child,
    base: String,
    agent: ureq::Agent,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

const TOKEN: &str = "acceptance-token";

impl Server {
    fn start(root: &Path) -> Result<Server, String> {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let child = Command::new(BIN)
            .args(["serve", "--listen", &format!("127.0.0.1:{port}")])
            .env("CONCEPT_CANVAS_ROOT", root)
            .env("CONCEPT_CANVAS_TOKEN", TOKEN)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        let server = Server {
            child,
            base: format!("http://127.0.0.1:{port}"),
            agent,
        };
        let start = Instant::now();
        while server.get("/api/spec").map(|r| r.0) != Ok(200) {
            ensure(start.elapsed() < Duration::from_secs(20), || "server did not come up".into())?;
            std::thread::sleep(Duration::from_millis(50));
        }
        Ok(server)
    }

    fn get(&self, path: &str) -> Result<(u16, Vec<u8>), String> {
        let mut resp = self.agent.get(format!("{}{path}", self.base)).call().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        Ok((status, resp.body_mut().read_to_vec().map_err(|e| e.to_string())?))
    }

    fn get_json(&self, path: &str) -> Result<(u16, Value), String> {
        let (s, b) = self.get(path)?;
        Ok((s, serde_json::from_slice(&b).map_err(|e| format!("{path}: {e}"))?))
    }

    fn post(&self, path: &str, token: Option<&str>, body: Option<Value>) -> Result<(u16, Value), String> {
        let mut req = self.agent.post(format!("{}{path}", self.base));
        if let Some(t) = token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = match body {
            Some(b) => req.content_type("application/json").send(b.to_string()),
            None => req.send_empty(),
        }
        .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let bytes = resp.body_mut().read_to_vec().map_err(|e| e.to_string())?;
        Ok((status, serde_json::from_slice(&bytes).map_err(|e| format!("{path}: {e}"))?))
    }

    /// Advances through automated stages until a gate or DONE.
    fn drive(&self, run: &str) -> Result<String, String> {
        loop {
            let (status, body) = self.post(&format!("/runs/{run}/advance"), Some(TOKEN), None)?;
            match status {
                202 => {
                    let from = body["stage"].clone();
                    let start = Instant::now();
                    loop {
                        let (_, m) = self.get_json(&format!("/runs/{run}"))?;
                        if m["stage"] != from {
                            ensure(m["stage"] != "FAILED", || format!("run failed: {}", m["failure"]))?;
                            break;
                        }
                        ensure(start.elapsed() < Duration::from_secs(300), || format!("{from} never finished"))?;
                        std::thread::sleep(Duration::from_millis(50));
                    }
                }
                200 => return Ok(body["stage"].as_str().unwrap_or_default().to_string()),
                409 if body["code"] == "busy" => std::thread::sleep(Duration::from_millis(50)),
                409 => {
                    let (_, m) = self.get_json(&format!("/runs/{run}"))?;
                    return Ok(m["stage"].as_str().unwrap_or_default().to_string());
                }
                other => return Err(format!("advance answered {other}: {body}")),
            }
        }
    }
}

fn error_schema(v: &Value) -> bool {
    v["code"].is_string() && v["message"].is_string() && v.get("details").is_some()
}

fn api_contract() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let fx = write_offline_fixture(&tmp.path().join("fixture")).map_err(|e| e.to_string())?;
    let server = Server::start(&tmp.path().join("runs"))?;
    let body = json!({
        "run_id": "api", "theme": "ai", "corpus": fx.corpus, "toy": true,
        "config": {"provider.root": fx.images},
    });

    let (s, v) = server.post("/runs", Some("wrong"), Some(body.clone()))?;
    ensure(s == 401 && error_schema(&v), || format!("bad token: {s} {v}"))?;
    ensure(server.get("/runs/api")?.0 == 404, || "bad token created a run".into())?;
    let (s, v) = server.post("/runs", Some(TOKEN), Some(json!({"corpus": fx.corpus})))?;
    ensure(s == 400 && v["details"]["field"] == "theme", || format!("missing theme: {s} {v}"))?;
    let (s, v) = server.post("/runs", Some(TOKEN), Some(body.clone()))?;
    ensure(s == 201 && v == json!({"run_id": "api", "stage": "CORPUS"}), || format!("create: {s} {v}"))?;
    ensure(server.post("/runs", Some(TOKEN), Some(body))?.0 == 409, || "duplicate id".into())?;
    ensure(server.get("/runs/api/gates/current")?.0 == 409, || "gate before any gate".into())?;
    ensure(server.get("/runs/api/artifacts/final.png")?.0 == 404, || "final.png early".into())?;

    ensure(server.drive("api")? == "TERM_REVIEW", || "did not reach TERM_REVIEW".into())?;
    let (_, all) = server.get_json("/runs/api/gates/current?size=100")?;
    let (_, p2) = server.get_json("/runs/api/gates/current?page=2&size=10")?;
    let total = all["total"].as_u64().unwrap_or(0) as usize;
    let want: Vec<Value> = all["candidates"].as_array().unwrap()[10..20.min(total)].to_vec();
    ensure(total >= 20 && p2["candidates"].as_array() == Some(&want), || format!("page 2 of {total}"))?;
    let (s, _) = server.post("/runs/api/gates/TERM_REVIEW/selection", Some(TOKEN), Some(json!({})))?;
    ensure(s == 200, || format!("term review: {s}"))?;

    ensure(server.drive("api")? == "CONCEPT_SELECTION", || "did not reach CONCEPT_SELECTION".into())?;
    let (_, gate) = server.get_json("/runs/api/gates/current")?;
    let c = gate["candidates"].as_array().unwrap();
    let (s, v) = server.post(
        "/runs/api/gates/CONCEPT_SELECTION/selection",
        Some(TOKEN),
        Some(json!({"ids": [c[0]["id"], c[1]["id"]]})),
    )?;
    ensure(s == 422 && error_schema(&v), || format!("arity: {s} {v}"))?;
    let sel = json!({"ids": [c[0]["id"]]});
    let (s, m) = server.post("/runs/api/gates/CONCEPT_SELECTION/selection", Some(TOKEN), Some(sel.clone()))?;
    ensure(s == 200 && m["stage"] == "CONCEPT_HARVEST", || format!("concept: {s} {}", m["stage"]))?;
    ensure(m["gate_decisions"][1]["selected"] == json!([c[0]["id"]]), || "decision missing".into())?;
    ensure(server.get_json("/runs/api")?.1 == m, || "GET after POST differs".into())?;
    let (s, v) = server.post("/runs/api/gates/CONCEPT_SELECTION/selection", Some(TOKEN), Some(sel))?;
    ensure(s == 409 && error_schema(&v), || format!("double resolution: {s} {v}"))?;

    ensure(server.drive("api")? == "CANDIDATE_SELECTION", || "did not reach CANDIDATE_SELECTION".into())?;
    let (_, gate) = server.get_json("/runs/api/gates/current")?;
    let c = gate["candidates"].as_array().unwrap();
    ensure(c.iter().all(|c| c["thumbnail_url"].is_string()), || "thumbnail urls".into())?;
    let (s, thumb) = server.get(c[0]["thumbnail_url"].as_str().unwrap())?;
    ensure(s == 200 && thumb.starts_with(b"\x89PNG"), || "thumbnail".into())?;
    server.post("/runs/api/gates/CANDIDATE_SELECTION/selection", Some(TOKEN), Some(json!({"ids": [c[0]["id"]]})))?;
    ensure(server.drive("api")? == "FINAL_SELECTION", || "did not reach FINAL_SELECTION".into())?;
    let (_, gate) = server.get_json("/runs/api/gates/current")?;
    let (s, m) = server.post(
        "/runs/api/gates/FINAL_SELECTION/selection",
        Some(TOKEN),
        Some(json!({"ids": [gate["candidates"][0]["id"]]})),
    )?;
    ensure(s == 200 && m["stage"] == "DONE", || format!("final: {s}"))?;
    let (s, png) = server.get("/runs/api/artifacts/final.png")?;
    ensure(s == 200 && png.starts_with(b"\x89PNG"), || "final.png".into())?;

    let (_, ev) = server.get_json("/runs/api/events")?;
    let seqs: Vec<u64> = ev["events"].as_array().unwrap().iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    ensure(seqs.windows(2).all(|w| w[0] < w[1]) && seqs.first() == Some(&1), || "event order".into())?;
    let (_, tail) = server.get_json("/runs/api/events?after_seq=5")?;
    let tail: Vec<u64> = tail["events"].as_array().unwrap().iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    ensure(tail.first() == Some(&6) && tail == seqs[5..], || format!("cursor: {tail:?}"))?;

    Ok(format!(
        "HTTP lifecycle to DONE: 201/400/401/404/409/422 contracts, page 2 of {total}, {} events strictly increasing, after_seq=5 starts at 6",
        seqs.len()
    ))
}
