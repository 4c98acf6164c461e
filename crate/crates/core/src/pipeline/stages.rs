//! Automated stage bodies. Each reads earlier stages' files from the run
//! directory and writes only its own outputs.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::store::{read_json, write_atomic, write_json};
use super::{Manifest, Mode, Stage};
use crate::acquisition::{Harvester, HttpSearchProvider, LocalDirProvider, SearchProvider};
use crate::began::{train_began, BeganModel};
use crate::config::ProviderKind;
use crate::control::Control;
use crate::corpus::{build_vocabulary, load_corpus, tfidf_vectorize, DocTermMatrix, Label, Tokenizer, Vocabulary};
use crate::dam::{train_dam, DamModel, Pooling};
use crate::dtm::{extract_discriminative_terms, train_dtm, DiscriminativeTermSet, DtmModel};
use crate::error::{Error, IoContext, Result};
use crate::imaging::{
    content_hash, encode_png, load_png, normalize_images, ClassLabel, ImageRecord, ImageSource, Provenance, RecordMeta,
};
use crate::style::{build_style_reference, stylize, StyleConfig, StyleReference};

/// Run-relative locations of every stage output.
pub(crate) mod layout {
    pub const CORPUS_COPY: &str = "corpus/corpus.jsonl";
    pub const VOCABULARY: &str = "corpus/vocabulary.json";
    pub const TFIDF: &str = "corpus/tfidf.json";
    pub const CORPUS_SUMMARY: &str = "corpus/summary.json";
    pub const ARTICLES: &str = "corpus/articles.jsonl";
    pub const DTM_MODEL: &str = "dtm/model.json";
    pub const DTM_REPORT: &str = "dtm/report.json";
    pub const TERMS: &str = "dtm/terms.json";
    pub const REVIEWED_TERMS: &str = "dtm/terms.reviewed.json";
    pub const HARVEST: &str = "harvest/manifest.jsonl";
    pub const HARVEST_REPORT: &str = "harvest/report.json";
    pub const DAM_MODEL: &str = "dam/model";
    pub const DAM_REPORT: &str = "dam/report.json";
    pub const RANKING: &str = "rank/ranking.json";
    pub const RANKED_IMAGES: &str = "rank/images.jsonl";
    pub const RANK_REPORT: &str = "rank/report.json";
    pub const CONCEPT: &str = "rank/concept.json";
    pub const DATASET: &str = "gan/dataset.jsonl";
    pub const DATASET_REPORT: &str = "gan/dataset_report.json";
    pub const CHECKPOINTS: &str = "gan/checkpoints";
    pub const GAN_MODEL: &str = "gan/model";
    pub const GAN_REPORT: &str = "gan/report.csv";
    pub const SAMPLES: &str = "gan/samples.jsonl";
    pub const SELECTED_CANDIDATES: &str = "gan/selected.json";
    pub const STYLE_REFERENCE: &str = "style/reference.png";
    pub const STYLE_REFERENCE_META: &str = "style/reference.json";
    pub const STYLED_INDEX: &str = "styled/index.json";
    pub const FINAL_IMAGE: &str = "final/final.png";
    pub const PROVENANCE: &str = "final/provenance.json";

    pub fn ranked_image(id: &str) -> String {
        format!("rank/images/{id}.png")
    }

    pub fn sample_image(id: &str) -> String {
        format!("gan/samples/{id}.png")
    }
}

/// Paths a stage owns; they are removed before the stage (re)runs.
fn owned_paths(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Corpus => &["corpus"],
        Stage::Dtm => &["dtm"],
        Stage::Harvest => &["harvest"],
        Stage::DamTrain => &["dam"],
        Stage::Ranking => &["rank"],
        Stage::ConceptHarvest => &["gan/dataset", layout::DATASET, layout::DATASET_REPORT],
        // checkpoints survive so an interrupted training resumes
        Stage::GanTrain => &[layout::GAN_MODEL, layout::GAN_REPORT],
        Stage::Generation => &["gan/samples", layout::SAMPLES],
        Stage::StyleBuild => &["style"],
        Stage::Stylize => &["styled"],
        _ => &[],
    }
}

fn clear(dir: &Path, stage: Stage) -> Result<()> {
    for rel in owned_paths(stage) {
        let p = dir.join(rel);
        let res = if p.is_dir() {
            fs::remove_dir_all(&p)
        } else if p.exists() {
            fs::remove_file(&p)
        } else {
            Ok(())
        };
        res.at(&p)?;
    }
    Ok(())
}

/// Executes `stage`; returns the run-relative paths it produced.
pub(crate) fn run_stage(stage: Stage, dir: &Path, m: &Manifest, control: &Control) -> Result<Vec<String>> {
    control.check()?;
    clear(dir, stage)?;
    match stage {
        Stage::Corpus => corpus_stage(dir, m),
        Stage::Dtm => dtm_stage(dir, m),
        Stage::Harvest => harvest_stage(dir, m),
        Stage::DamTrain => dam_stage(dir, m),
        Stage::Ranking => ranking_stage(dir, m),
        Stage::ConceptHarvest => concept_harvest_stage(dir, m),
        Stage::GanTrain => gan_stage(dir, m, control),
        Stage::Generation => generation_stage(dir, m),
        Stage::StyleBuild => style_build_stage(dir, m),
        Stage::Stylize => stylize_stage(dir, m, control),
        other => Err(Error::Conflict(format!("{other} is not an automated stage"))),
    }
}

/// A record line in a `*.jsonl` image manifest: the file next to its metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredRecord {
    file: String,
    #[serde(flatten)]
    meta: RecordMeta,
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Stores each record as `<image_dir>/[<label>/]<id>.png` and indexes them in
/// `manifest_rel`.
fn store_records(dir: &Path, image_dir: &str, manifest_rel: &str, records: &[ImageRecord], by_label: bool) -> Result<()> {
    let mut lines = Vec::with_capacity(records.len());
    for r in records {
        let file = if by_label {
            format!("{image_dir}/{}/{}.png", r.class_label.dir_name(), r.id)
        } else {
            format!("{image_dir}/{}.png", r.id)
        };
        write_atomic(&dir.join(&file), &encode_png(&r.pixels))?;
        lines.push(StoredRecord { file, meta: r.meta() });
    }
    write_jsonl(&dir.join(manifest_rel), &lines)
}

/// Loads the records indexed by a run-relative `*.jsonl` image manifest.
pub fn load_records(run_dir: &Path, manifest_rel: &str) -> Result<Vec<ImageRecord>> {
    read_jsonl::<StoredRecord>(&run_dir.join(manifest_rel))?
        .into_iter()
        .map(|s| Ok(ImageRecord::from_meta(s.meta, load_png(&run_dir.join(&s.file))?)))
        .collect()
}

fn tokenizer(m: &Manifest) -> Result<Tokenizer> {
    match &m.config.corpus.stopwords {
        Some(p) => Tokenizer::from_stopword_file(p),
        None => Ok(Tokenizer::default()),
    }
}

fn corpus_stage(dir: &Path, m: &Manifest) -> Result<Vec<String>> {
    let bytes = fs::read(&m.corpus_path).at(&m.corpus_path)?;
    let corpus = load_corpus(&m.corpus_path)?;
    write_atomic(&dir.join(layout::CORPUS_COPY), &bytes)?;
    let tokenized = corpus.tokenize(&tokenizer(m)?);
    let vocab = build_vocabulary(&tokenized, m.config.corpus.vocabulary())?;
    let matrix = tfidf_vectorize(&tokenized, &vocab);
    write_json(&dir.join(layout::VOCABULARY), &json!({"hash": vocab.hash(), "terms": vocab.terms()}))?;
    write_json(&dir.join(layout::TFIDF), &matrix)?;

    // images attached to theme documents: `meta.images`, comma-separated,
    // relative to the corpus file
    let base = m.corpus_path.parent().unwrap_or(Path::new("."));
    let mut articles = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for doc in corpus.documents.iter().filter(|d| d.label == Label::Theme) {
        let Some(list) = doc.metadata.get("images") else { continue };
        for loc in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let path = base.join(loc);
            let raw = match fs::read(&path) {
                Ok(b) => b,
                Err(e) => {
                    warnings.push(format!("article image {loc} of {}: {e}", doc.id));
                    continue;
                }
            };
            let source = ImageSource {
                provider: "article".into(),
                query: doc.id.clone(),
                locator: loc.to_string(),
            };
            match ImageRecord::from_bytes(&raw, source, ClassLabel::Unlabeled, Provenance::Article, m.config.harvest.min_side) {
                Ok(rec) if seen.insert(rec.id.clone()) => articles.push(rec),
                Ok(_) => {}
                Err(r) => warnings.push(format!("article image {loc} of {} rejected: {r:?}", doc.id)),
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    articles.sort_by(|a, b| a.id.cmp(&b.id));
    store_records(dir, "corpus/articles", layout::ARTICLES, &articles, false)?;
    write_json(
        &dir.join(layout::CORPUS_SUMMARY),
        &json!({
            "documents": corpus.len(),
            "label_counts": corpus.label_counts(),
            "vocabulary_size": vocab.len(),
            "article_images": articles.len(),
            "warnings": warnings,
        }),
    )?;
    Ok(vec!["corpus".into()])
}

fn load_vocabulary(dir: &Path) -> Result<Vocabulary> {
    #[derive(Deserialize)]
    struct Stored {
        terms: Vec<String>,
    }
    let stored: Stored = read_json(&dir.join(layout::VOCABULARY))?;
    Ok(Vocabulary::from_terms(stored.terms))
}

fn dtm_stage(dir: &Path, m: &Manifest) -> Result<Vec<String>> {
    let corpus = load_corpus(&dir.join(layout::CORPUS_COPY))?;
    let vocab = load_vocabulary(dir)?;
    let matrix: DocTermMatrix = read_json(&dir.join(layout::TFIDF))?;
    let model = train_dtm(&matrix, &corpus.labels(), m.config.dtm.training())?;
    fs::create_dir_all(dir.join("dtm")).at(dir.join("dtm"))?;
    model.save(&dir.join(layout::DTM_MODEL), &vocab)?;
    let terms = extract_discriminative_terms(&model, &vocab, m.config.dtm.k_pos, m.config.dtm.k_neg)?;
    write_json(&dir.join(layout::TERMS), &terms)?;
    write_json(
        &dir.join(layout::DTM_REPORT),
        &json!({"train_accuracy": model.train_accuracy, "final_loss": model.final_loss}),
    )?;
    Ok(vec!["dtm".into()])
}

pub(crate) fn reextract_terms(dir: &Path, k_pos: usize, k_neg: usize) -> Result<DiscriminativeTermSet> {
    let vocab = load_vocabulary(dir)?;
    let model = DtmModel::load(&dir.join(layout::DTM_MODEL), &vocab)?;
    extract_discriminative_terms(&model, &vocab, k_pos, k_neg)
}

fn provider(m: &Manifest) -> Result<Box<dyn SearchProvider>> {
    let p = &m.config.provider;
    match p.kind {
        ProviderKind::Local => {
            let root = p
                .root
                .clone()
                .ok_or_else(|| Error::Config("provider.root is required for the local provider".into()))?;
            Ok(Box::new(LocalDirProvider::new(root)))
        }
        ProviderKind::Http => {
            if p.http.endpoint.is_empty() {
                return Err(Error::Config("provider.http.endpoint is required for the http provider".into()));
            }
            Ok(Box::new(HttpSearchProvider::from_env(p.http.clone())))
        }
    }
}

fn harvest_stage(dir: &Path, m: &Manifest) -> Result<Vec<String>> {
    let terms: DiscriminativeTermSet = read_json(&dir.join(layout::REVIEWED_TERMS))?;
    let provider = provider(m)?;
    let harvest = Harvester::new(provider.as_ref(), m.config.harvest.options()).harvest_term_images(&terms)?;
    store_records(dir, "harvest", layout::HARVEST, &harvest.records, true)?;
    write_json(&dir.join(layout::HARVEST_REPORT), &harvest.report)?;
    Ok(vec!["harvest".into()])
}

fn dam_stage(dir: &Path, m: &Manifest) -> Result<Vec<String>> {
    let records = load_records(dir, layout::HARVEST)?;
    let dataset = normalize_images(&records, m.config.dam.image_side);
    let model = train_dam(&dataset, &m.config.dam)?;
    model.save(&dir.join(layout::DAM_MODEL))?;
    write_json(&dir.join(layout::DAM_REPORT), &model.report)?;
    Ok(vec!["dam".into()])
}

/// One line of `rank/ranking.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct RankedEntry {
    pub rank: usize,
    pub id: String,
    pub score: f64,
    pub provenance: Provenance,
    pub source: ImageSource,
}

fn ranking_stage(dir: &Path, m: &Manifest) -> Result<Vec<String>> {
    let model = DamModel::load(&dir.join(layout::DAM_MODEL))?;
    let mut pool = load_records(dir, layout::ARTICLES)?;
    let mut warnings = Vec::new();
    if pool.is_empty() {
        let msg = "the corpus lists no article images; ranking the harvested images instead".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
        pool = load_records(dir, layout::HARVEST)?;
    }
    let normalized = normalize_images(&pool, m.config.dam.image_side);
    let ranked = model.rank_images(&normalized, normalized.len())?;
    let entries: Vec<RankedEntry> = ranked
        .iter()
        .map(|r| RankedEntry {
            rank: r.rank,
            id: r.record.id.clone(),
            score: r.score,
            provenance: r.record.provenance,
            source: r.record.source.clone(),
        })
        .collect();
    // originals, in rank order
    let originals: Vec<ImageRecord> = entries
        .iter()
        .map(|e| pool.iter().find(|p| p.id == e.id).expect("ranked from pool").clone())
        .collect();
    store_records(dir, "rank/images", layout::RANKED_IMAGES, &originals, false)?;
    write_json(&dir.join(layout::RANKING), &entries)?;
    write_json(&dir.join(layout::RANK_REPORT), &json!({"ranked": entries.len(), "warnings": warnings}))?;
    Ok(vec!["rank".into()])
}

fn concept_query(m: &Manifest) -> String {
    m.decision(Stage::ConceptSelection)
        .and_then(|d| d.concept_query.clone())
        .or_else(|| m.config.concept.query.clone())
        .unwrap_or_else(|| m.theme.clone())
}

fn concept_harvest_stage(dir: &Path, m: &Manifest) -> Result<Vec<String>> {
    let provider = provider(m)?;
    let query = concept_query(m);
    let harvest = Harvester::new(provider.as_ref(), m.config.harvest.options())
        .harvest_concept_images(&query, m.config.harvest.concept_target)?;
    store_records(dir, "gan/dataset", layout::DATASET, &harvest.records, false)?;
    write_json(&dir.join(layout::DATASET_REPORT), &json!({"query": query, "report": harvest.report}))?;
    Ok(vec!["gan/dataset".into(), layout::DATASET.into(), layout::DATASET_REPORT.into()])
}

fn gan_stage(dir: &Path, m: &Manifest, control: &Control) -> Result<Vec<String>> {
    let records = load_records(dir, layout::DATASET)?;
    let dataset = normalize_images(&records, m.config.began.image_side as u32);
    let ckpts = dir.join(layout::CHECKPOINTS);
    let (model, report) = train_began(&dataset, &m.config.began, Some(&ckpts), control)?;
    model.save(&dir.join(layout::GAN_MODEL))?;
    report.write_csv(&dir.join(layout::GAN_REPORT))?;
    Ok(vec![layout::GAN_MODEL.into(), layout::GAN_REPORT.into()])
}

fn generation_stage(dir: &Path, m: &Manifest) -> Result<Vec<String>> {
    let model = BeganModel::load(&dir.join(layout::GAN_MODEL))?;
    let samples = model.sample_candidates(m.config.generation.count, m.config.generation.seed);
    store_records(dir, "gan/samples", layout::SAMPLES, &samples, false)?;
    Ok(vec!["gan/samples".into(), layout::SAMPLES.into()])
}

fn read_exemplars(root: &Path) -> Result<Vec<ImageRecord>> {
    let entries = fs::read_dir(root).map_err(|e| Error::Invalid(format!("style exemplar directory {}: {e}", root.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let bytes = fs::read(&p).at(&p)?;
        let source = ImageSource {
            provider: "exemplar".into(),
            query: String::new(),
            locator: p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        match ImageRecord::from_bytes(&bytes, source, ClassLabel::Unlabeled, Provenance::Article, 1) {
            Ok(r) => out.push(r),
            Err(r) => log::warn!("skipping style exemplar {}: {r:?}", p.display()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReferenceMeta {
    rows: usize,
    cols: usize,
    cell_side: u32,
    source_ids: Vec<String>,
    sources: Vec<String>,
}

fn style_build_stage(dir: &Path, m: &Manifest) -> Result<Vec<String>> {
    let root = m
        .config
        .style_reference
        .exemplars
        .clone()
        .ok_or_else(|| Error::Config("style_reference.exemplars is not set".into()))?;
    let exemplars = read_exemplars(&root)?;
    if exemplars.is_empty() {
        return Err(Error::Invalid(format!("no style exemplars in {}", root.display())));
    }
    let reference = build_style_reference(&exemplars, m.config.style_reference.cell_side)?;
    write_atomic(&dir.join(layout::STYLE_REFERENCE), &encode_png(&reference.mosaic))?;
    write_json(
        &dir.join(layout::STYLE_REFERENCE_META),
        &ReferenceMeta {
            rows: reference.rows,
            cols: reference.cols,
            cell_side: reference.cell_side,
            source_ids: reference.source_ids.clone(),
            sources: exemplars.iter().map(|e| e.source.locator.clone()).collect(),
        },
    )?;
    Ok(vec!["style".into()])
}

fn load_reference(dir: &Path) -> Result<StyleReference> {
    let meta: ReferenceMeta = read_json(&dir.join(layout::STYLE_REFERENCE_META))?;
    Ok(StyleReference {
        mosaic: load_png(&dir.join(layout::STYLE_REFERENCE))?,
        rows: meta.rows,
        cols: meta.cols,
        cell_side: meta.cell_side,
        source_ids: meta.source_ids,
    })
}

/// One stylized image, listed in `styled/index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyledOutput {
    /// Content hash of the styled PNG.
    pub id: String,
    pub content_id: String,
    /// Run-relative path of the PNG.
    pub path: String,
    pub best_step: usize,
}

/// Images the stylize stage works on: the chosen generator candidates, or
/// the chosen ranked image in direct mode.
fn content_records(dir: &Path, m: &Manifest) -> Result<Vec<ImageRecord>> {
    let (ids, pool) = match m.mode {
        Mode::Generative => (
            read_json::<Vec<String>>(&dir.join(layout::SELECTED_CANDIDATES))?,
            load_records(dir, layout::SAMPLES)?,
        ),
        Mode::Direct => {
            let concept: Value = read_json(&dir.join(layout::CONCEPT))?;
            let id = concept["id"].as_str().unwrap_or_default().to_string();
            (vec![id], load_records(dir, layout::RANKED_IMAGES)?)
        }
    };
    ids.iter()
        .map(|id| {
            pool.iter()
                .find(|r| &r.id == id)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("content image {id}")))
        })
        .collect()
}

fn style_backbone(dir: &Path) -> Result<crate::dam::VggBackbone> {
    Ok(DamModel::load(&dir.join(layout::DAM_MODEL))?.backbone.with_pooling(Pooling::Avg))
}

fn stylize_stage(dir: &Path, m: &Manifest, control: &Control) -> Result<Vec<String>> {
    let contents = content_records(dir, m)?;
    let reference = load_reference(dir)?;
    let backbone = style_backbone(dir)?;
    let mut index = Vec::with_capacity(contents.len());
    for content in &contents {
        let out = stylize(content, &reference, &m.config.style, &backbone, control)?;
        let path = format!("styled/{}.png", content.id);
        let png = encode_png(&out.record.pixels);
        write_atomic(&dir.join(&path), &png)?;
        write_atomic(&dir.join(format!("styled/{}.losses.csv", content.id)), out.losses_csv().as_bytes())?;
        if !out.warnings.is_empty() {
            write_json(&dir.join(format!("styled/{}.warnings.json", content.id)), &out.warnings)?;
        }
        index.push(StyledOutput {
            id: content_hash(&png),
            content_id: content.id.clone(),
            path,
            best_step: out.best_step,
        });
    }
    write_json(&dir.join(layout::STYLED_INDEX), &index)?;
    Ok(vec!["styled".into()])
}

pub(crate) fn stylize_adhoc(dir: &Path, m: &Manifest, content_id: &str, side: u32, control: &Control) -> Result<PathBuf> {
    let config = StyleConfig {
        output_side: side,
        ..m.config.style.clone()
    };
    config.validate()?;
    let mut content = None;
    for rel in [layout::RANKED_IMAGES, layout::SAMPLES, layout::DATASET, layout::HARVEST] {
        if !dir.join(rel).is_file() {
            continue;
        }
        if let Some(r) = load_records(dir, rel)?.into_iter().find(|r| r.id == content_id) {
            content = Some(r);
            break;
        }
    }
    let content = content.ok_or_else(|| Error::NotFound(format!("image {content_id} in run {}", m.run_id)))?;
    if !dir.join(layout::STYLE_REFERENCE).is_file() || !dir.join(layout::DAM_MODEL).is_dir() {
        return Err(Error::Conflict("stylizing needs a trained appearance model and a style reference".into()));
    }
    let out = stylize(&content, &load_reference(dir)?, &config, &style_backbone(dir)?, control)?;
    let path = dir.join(format!("adhoc/styled/{content_id}-{side}.png"));
    write_atomic(&path, &encode_png(&out.record.pixels))?;
    write_atomic(&path.with_extension("losses.csv"), out.losses_csv().as_bytes())?;
    Ok(path)
}

/// Record of how the final image came about. Contains no timestamps, so
/// identical runs produce identical bytes.
pub(crate) fn provenance(dir: &Path, m: &Manifest, chosen: &StyledOutput) -> Result<Value> {
    let terms: DiscriminativeTermSet = read_json(&dir.join(layout::REVIEWED_TERMS))?;
    let concept: Value = read_json(&dir.join(layout::CONCEPT))?;
    let reference = load_reference(dir)?;
    let reference_bytes = fs::read(dir.join(layout::STYLE_REFERENCE)).at(dir.join(layout::STYLE_REFERENCE))?;
    let candidate = match m.mode {
        Mode::Generative => {
            let samples = read_jsonl::<StoredRecord>(&dir.join(layout::SAMPLES))?;
            let s = samples
                .iter()
                .find(|s| s.meta.id == chosen.content_id)
                .ok_or_else(|| Error::NotFound(format!("generated candidate {}", chosen.content_id)))?;
            json!({"id": s.meta.id, "z": s.meta.latent})
        }
        Mode::Direct => Value::Null,
    };
    let dam_report: Value = read_json(&dir.join(layout::DAM_REPORT))?;
    Ok(json!({
        "theme": m.theme,
        "mode": m.mode,
        "terms": terms,
        "concept": concept,
        "concept_query": if m.mode == Mode::Generative { Value::from(concept_query(m)) } else { Value::Null },
        "candidate": candidate,
        "content_id": chosen.content_id,
        "final_id": chosen.id,
        "style_config": m.config.style,
        "style_reference": {
            "sha256": content_hash(&reference_bytes),
            "rows": reference.rows,
            "cols": reference.cols,
            "source_ids": reference.source_ids,
        },
        "appearance_model": {"dataset_hash": dam_report["dataset_hash"], "config": m.config.dam},
        "generator_config": if m.mode == Mode::Generative { serde_json::to_value(&m.config.began)? } else { Value::Null },
    }))
}
