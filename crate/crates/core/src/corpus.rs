//! Corpus loading, tokenization and tf/idf vectorization.
//!
//! The corpus file is line-delimited JSON, one document per line:
//!
//! ```text
//! {"id": "d1", "text": "Robots shake hands.", "label": "THEME", "meta": {"source": "archive"}}
//! ```
//!
//! Weights use raw term counts and the smoothed inverse document frequency
//! `ln((1 + N) / (1 + df)) + 1`, after which every non-empty row is scaled to
//! unit L2 norm.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Binary theme label of a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Theme,
    Other,
}

impl Label {
    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "THEME" => Some(Label::Theme),
            "OTHER" => Some(Label::Other),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Theme => "THEME",
            Label::Other => "OTHER",
        }
    }

    /// 1.0 for the theme class, 0.0 otherwise.
    pub fn target(self) -> f64 {
        match self {
            Label::Theme => 1.0,
            Label::Other => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub label: Label,
    #[serde(default, rename = "meta", skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

impl Corpus {
    /// Builds a corpus from documents, enforcing id uniqueness.
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for doc in &documents {
            if doc.id.is_empty() {
                return Err(Error::Invalid("document id must be nonempty".into()));
            }
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate document id {:?}", doc.id)));
            }
        }
        Ok(Corpus { documents })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn label_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for doc in &self.documents {
            *counts.entry(doc.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<Label> {
        self.documents.iter().map(|d| d.label).collect()
    }

    pub fn tokenize(&self, tokenizer: &Tokenizer) -> TokenizedCorpus {
        TokenizedCorpus {
            ids: self.documents.iter().map(|d| d.id.clone()).collect(),
            tokens: self
                .documents
                .iter()
                .map(|d| tokenizer.tokenize(&d.text))
                .collect(),
        }
    }
}

/// Reads a line-delimited corpus file. Blank lines are skipped; every other
/// line must be a complete record.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let content = fs::read_to_string(path).at(path)?;
    parse_corpus(&content)
}

pub fn parse_corpus(content: &str) -> Result<Corpus> {
    let mut documents = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let doc = parse_record(raw, line)?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate id {:?}", doc.id),
            });
        }
        documents.push(doc);
    }
    if documents.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Corpus { documents })
}

fn parse_record(raw: &str, line: usize) -> Result<Document> {
    let err = |message: String| Error::Parse { line, message };
    let value: serde_json::Value =
        serde_json::from_str(raw).map_err(|e| err(format!("malformed record: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| err("record is not an object".into()))?;

    let id = match obj.get("id") {
        Some(serde_json::Value::String(s)) if !s.is_empty() => s.clone(),
        Some(serde_json::Value::String(_)) => return Err(err("empty id".into())),
        _ => return Err(err("missing string field `id`".into())),
    };
    let text = match obj.get("text") {
        Some(serde_json::Value::String(s)) => s.clone(),
        _ => return Err(err("missing string field `text`".into())),
    };
    let label = match obj.get("label") {
        Some(serde_json::Value::String(s)) => {
            Label::parse(s).ok_or_else(|| err(format!("unknown label value {s:?}")))?
        }
        Some(other) => return Err(err(format!("unknown label value {other}"))),
        None => return Err(err("missing field `label`".into())),
    };
    let mut metadata = BTreeMap::new();
    match obj.get("meta") {
        None | Some(serde_json::Value::Null) => {}
        Some(serde_json::Value::Object(m)) => {
            for (k, v) in m {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                metadata.insert(k.clone(), s);
            }
        }
        Some(_) => return Err(err("`meta` must be an object".into())),
    }
    Ok(Document {
        id,
        text,
        label,
        metadata,
    })
}

/// Lowercasing splitter with stopword removal. Any character that is not
/// alphanumeric separates tokens, so hyphens and apostrophes split words.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    stopwords: HashSet<String>,
    min_len: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::with_stopwords(DEFAULT_STOPWORDS.lines())
    }
}

impl Tokenizer {
    pub fn with_stopwords<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let stopwords = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        Tokenizer {
            stopwords,
            min_len: 2,
        }
    }

    /// Stopword file: one token per line.
    pub fn from_stopword_file(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).at(path)?;
        Ok(Tokenizer::with_stopwords(content.lines()))
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| t.chars().count() >= self.min_len)
            .filter(|t| !self.stopwords.contains(*t))
            .map(str::to_owned)
            .collect()
    }
}

/// Tokenizes with the shipped stopword list.
pub fn tokenize(text: &str) -> Vec<String> {
    Tokenizer::default().tokenize(text)
}

/// Token lists aligned with the corpus documents.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedCorpus {
    pub ids: Vec<String>,
    pub tokens: Vec<Vec<String>>,
}

impl TokenizedCorpus {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of documents containing each token at least once.
    pub fn document_frequencies(&self) -> HashMap<&str, usize> {
        let mut df = HashMap::new();
        for doc in &self.tokens {
            let unique: HashSet<&str> = doc.iter().map(String::as_str).collect();
            for t in unique {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        df
    }
}

/// Lexicographically ordered term list with its inverse index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Sorts and deduplicates the given terms.
    pub fn from_terms<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut terms: Vec<String> = terms.into_iter().map(Into::into).collect();
        terms.sort();
        terms.dedup();
        let index = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { terms, index }
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn position(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    /// Stable digest of the ordered term list.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.terms {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.terms.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let terms = Vec::<String>::deserialize(d)?;
        Ok(Vocabulary::from_terms(terms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabularyConfig {
    pub min_df: usize,
    pub max_df_fraction: f64,
}

impl Default for VocabularyConfig {
    fn default() -> Self {
        VocabularyConfig {
            min_df: 2,
            max_df_fraction: 0.9,
        }
    }
}

/// Keeps every term whose document frequency satisfies
/// `min_df <= df <= max_df_fraction * N`.
pub fn build_vocabulary(corpus: &TokenizedCorpus, config: VocabularyConfig) -> Result<Vocabulary> {
    if config.min_df < 1 {
        return Err(Error::Invalid("min_df must be at least 1".into()));
    }
    if !(config.max_df_fraction > 0.0 && config.max_df_fraction <= 1.0) {
        return Err(Error::Invalid(format!(
            "max_df_fraction must be in (0, 1], got {}",
            config.max_df_fraction
        )));
    }
    let max_df = config.max_df_fraction * corpus.len() as f64;
    let vocab = Vocabulary::from_terms(
        corpus
            .document_frequencies()
            .into_iter()
            .filter(|&(_, df)| df >= config.min_df && df as f64 <= max_df)
            .map(|(t, _)| t.to_owned()),
    );
    if vocab.is_empty() {
        return Err(Error::Invalid("resulting vocabulary is empty".into()));
    }
    Ok(vocab)
}

/// Sparse document-term matrix; each row lists `(column, weight)` pairs in
/// ascending column order with zero weights omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocTermMatrix {
    pub rows: Vec<String>,
    pub values: Vec<Vec<(usize, f64)>>,
    pub n_cols: usize,
}

impl DocTermMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row]
            .binary_search_by_key(&col, |&(c, _)| c)
            .map(|i| self.values[row][i].1)
            .unwrap_or(0.0)
    }

    pub fn dense_row(&self, row: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for &(c, v) in &self.values[row] {
            out[c] = v;
        }
        out
    }

    pub fn row_norm(&self, row: usize) -> f64 {
        self.values[row].iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    /// Multiplies every weight by `factor`.
    pub fn scaled(&self, factor: f64) -> DocTermMatrix {
        let mut out = self.clone();
        for row in &mut out.values {
            for (_, v) in row.iter_mut() {
                *v *= factor;
            }
        }
        out
    }
}

/// Inverse document frequency with add-one smoothing on both counts.
pub fn smoothed_idf(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

/// Unnormalized `tf * idf` weights. Out-of-vocabulary tokens are ignored.
pub fn raw_tfidf(corpus: &TokenizedCorpus, vocab: &Vocabulary) -> DocTermMatrix {
    let n = corpus.len();
    let mut df = vec![0usize; vocab.len()];
    let counts: Vec<BTreeMap<usize, usize>> = corpus
        .tokens
        .iter()
        .map(|doc| {
            let mut tf = BTreeMap::new();
            for tok in doc {
                if let Some(col) = vocab.position(tok) {
                    *tf.entry(col).or_insert(0) += 1;
                }
            }
            tf
        })
        .collect();
    for tf in &counts {
        for &col in tf.keys() {
            df[col] += 1;
        }
    }
    let idf: Vec<f64> = df.iter().map(|&d| smoothed_idf(n, d)).collect();
    let values = counts
        .into_iter()
        .map(|tf| {
            tf.into_iter()
                .map(|(col, count)| (col, count as f64 * idf[col]))
                .collect()
        })
        .collect();
    DocTermMatrix {
        rows: corpus.ids.clone(),
        values,
        n_cols: vocab.len(),
    }
}

/// tf/idf with L2 row normalization; empty rows stay zero.
pub fn tfidf_vectorize(corpus: &TokenizedCorpus, vocab: &Vocabulary) -> DocTermMatrix {
    let mut matrix = raw_tfidf(corpus, vocab);
    for row in &mut matrix.values {
        let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, v) in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    matrix
}
