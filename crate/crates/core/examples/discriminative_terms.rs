//! Mines the terms that separate THEME from OTHER articles.
//!
//! ```text
//! cargo run -p concept-canvas --example discriminative_terms [corpus.jsonl]
//! ```
//! Without an argument the committed fixture corpus is used.

use std::path::PathBuf;

use concept_canvas::corpus::{build_vocabulary, load_corpus, tfidf_vectorize, Tokenizer, VocabularyConfig};
use concept_canvas::dtm::{extract_discriminative_terms, train_dtm, DtmConfig};

fn main() -> concept_canvas::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/tiny.jsonl"));
    let corpus = load_corpus(&path)?;
    let tokenized = corpus.tokenize(&Tokenizer::default());
    let vocab = build_vocabulary(&tokenized, VocabularyConfig::default())?;
    let matrix = tfidf_vectorize(&tokenized, &vocab);
    let labels = corpus.labels();

    let model = train_dtm(&matrix, &labels, DtmConfig::default())?;
    println!(
        "{} documents, {} terms, training accuracy {:.3}",
        corpus.len(),
        vocab.len(),
        model.accuracy(&matrix, &labels)
    );
    let terms = extract_discriminative_terms(&model, &vocab, 15, 15)?;
    for t in terms.positives.iter().chain(&terms.negatives) {
        println!("{:+.4}  {}", t.weight, t.term);
    }
    Ok(())
}
