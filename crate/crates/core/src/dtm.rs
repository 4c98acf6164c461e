//! Discriminative text model: L2-regularized logistic regression over tf/idf
//! rows, trained by full-batch gradient descent, and extraction of the most
//! theme-positive and theme-negative terms from its weight vector.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DocTermMatrix, Label, Vocabulary};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtmConfig {
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DtmConfig {
    fn default() -> Self {
        DtmConfig {
            learning_rate: 0.1,
            l2_penalty: 1e-3,
            epochs: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub config: DtmConfig,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// On-disk form of a trained model, bound to the vocabulary it was trained on.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PersistedDtm {
    vocab_hash: String,
    weights: Vec<f64>,
    bias: f64,
    config: DtmConfig,
    #[serde(default)]
    train_accuracy: f64,
    #[serde(default)]
    final_loss: f64,
}

impl DtmModel {
    pub fn logit(&self, row: &[(usize, f64)]) -> f64 {
        self.bias + row.iter().map(|&(c, v)| self.weights[c] * v).sum::<f64>()
    }

    pub fn predict(&self, row: &[(usize, f64)]) -> Label {
        if self.logit(row) > 0.0 {
            Label::Theme
        } else {
            Label::Other
        }
    }

    pub fn accuracy(&self, matrix: &DocTermMatrix, labels: &[Label]) -> f64 {
        let correct = matrix
            .values
            .iter()
            .zip(labels)
            .filter(|(row, &label)| self.predict(row) == label)
            .count();
        correct as f64 / labels.len().max(1) as f64
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        let persisted = PersistedDtm {
            vocab_hash: vocab.hash(),
            weights: self.weights.clone(),
            bias: self.bias,
            config: self.config,
            train_accuracy: self.train_accuracy,
            final_loss: self.final_loss,
        };
        fs::write(path, serde_json::to_vec_pretty(&persisted)?).at(path)
    }

    /// Refuses to load when the stored vocabulary hash differs from `vocab`.
    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        let p: PersistedDtm = serde_json::from_slice(&bytes)?;
        if p.vocab_hash != vocab.hash() {
            return Err(Error::Invalid(format!(
                "model {} was trained against a different vocabulary",
                path.display()
            )));
        }
        if p.weights.len() != vocab.len() {
            return Err(Error::Shape(format!(
                "model has {} weights, vocabulary has {} terms",
                p.weights.len(),
                vocab.len()
            )));
        }
        Ok(DtmModel {
            weights: p.weights,
            bias: p.bias,
            config: p.config,
            train_accuracy: p.train_accuracy,
            final_loss: p.final_loss,
        })
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss and gradient of
/// `mean(softplus(z) - y*z) + l2/2 * |w|^2` with `z = w.x + b`.
/// The bias is not regularized.
pub fn logistic_loss_and_grad(
    rows: &[&[(usize, f64)]],
    targets: &[f64],
    weights: &[f64],
    bias: f64,
    l2_penalty: f64,
) -> (f64, Vec<f64>, f64) {
    let n = rows.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (row, &y) in rows.iter().zip(targets) {
        let z = bias + row.iter().map(|&(c, v)| weights[c] * v).sum::<f64>();
        loss += softplus(z) - y * z;
        let residual = sigmoid(z) - y;
        for &(c, v) in row.iter() {
            grad_w[c] += residual * v;
        }
        grad_b += residual;
    }
    loss /= n;
    grad_b /= n;
    let mut reg = 0.0;
    for (g, &w) in grad_w.iter_mut().zip(weights) {
        *g = *g / n + l2_penalty * w;
        reg += w * w;
    }
    loss += 0.5 * l2_penalty * reg;
    (loss, grad_w, grad_b)
}

/// Trains from zero initialization. Rows are visited in document-id order so
/// the result does not depend on corpus order.
pub fn train_dtm(matrix: &DocTermMatrix, labels: &[Label], config: DtmConfig) -> Result<DtmModel> {
    if matrix.n_rows() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} matrix rows but {} labels",
            matrix.n_rows(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == Label::Theme).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Invalid(
            "training labels contain a single class".into(),
        ));
    }

    let mut order: Vec<usize> = (0..matrix.n_rows()).collect();
    order.sort_by(|&a, &b| matrix.rows[a].cmp(&matrix.rows[b]));
    let rows: Vec<&[(usize, f64)]> = order.iter().map(|&i| matrix.values[i].as_slice()).collect();
    let targets: Vec<f64> = order.iter().map(|&i| labels[i].target()).collect();

    let mut weights = vec![0.0; matrix.n_cols];
    let mut bias = 0.0;
    for epoch in 0..config.epochs {
        let (l, gw, gb) = logistic_loss_and_grad(&rows, &targets, &weights, bias, config.l2_penalty);
        if !l.is_finite() {
            return Err(Error::NonFinite(format!(
                "logistic loss became {l} at epoch {epoch}"
            )));
        }
        for (w, g) in weights.iter_mut().zip(&gw) {
            *w -= config.learning_rate * g;
        }
        bias -= config.learning_rate * gb;
    }
    if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
        return Err(Error::NonFinite("weights diverged".into()));
    }
    let (final_loss, _, _) = logistic_loss_and_grad(&rows, &targets, &weights, bias, config.l2_penalty);
    let mut model = DtmModel {
        weights,
        bias,
        config,
        train_accuracy: 0.0,
        final_loss,
    };
    model.train_accuracy = model.accuracy(matrix, labels);
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedTerm {
    pub term: String,
    pub weight: f64,
}

/// Most theme-positive terms (descending weight) and most theme-negative
/// terms (ascending weight). The two lists never share a term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeTermSet {
    pub positives: Vec<WeightedTerm>,
    pub negatives: Vec<WeightedTerm>,
}

impl DiscriminativeTermSet {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }

    pub fn all_terms(&self) -> impl Iterator<Item = &str> {
        self.positives
            .iter()
            .chain(&self.negatives)
            .map(|t| t.term.as_str())
    }
}

pub const DEFAULT_K: usize = 15;

/// Ties at equal weight go to the lexicographically smaller term.
pub fn extract_discriminative_terms(
    model: &DtmModel,
    vocab: &Vocabulary,
    k_pos: usize,
    k_neg: usize,
) -> Result<DiscriminativeTermSet> {
    if model.weights.len() != vocab.len() {
        return Err(Error::Shape(format!(
            "model has {} weights, vocabulary has {} terms",
            model.weights.len(),
            vocab.len()
        )));
    }
    if k_pos + k_neg > vocab.len() {
        return Err(Error::Invalid(format!(
            "k_pos + k_neg = {} exceeds vocabulary size {}",
            k_pos + k_neg,
            vocab.len()
        )));
    }
    let terms = vocab.terms();
    let mut idx: Vec<usize> = (0..terms.len()).collect();
    idx.sort_by(|&a, &b| {
        model.weights[b]
            .partial_cmp(&model.weights[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| terms[a].cmp(&terms[b]))
    });
    let positives: Vec<usize> = idx[..k_pos].to_vec();

    let mut rest: Vec<usize> = idx[k_pos..].to_vec();
    rest.sort_by(|&a, &b| {
        model.weights[a]
            .partial_cmp(&model.weights[b])
            .unwrap_or(Ordering::Equal)
            .then_with(|| terms[a].cmp(&terms[b]))
    });
    let negatives: Vec<usize> = rest[..k_neg].to_vec();

    let pick = |ids: Vec<usize>| {
        ids.into_iter()
            .map(|i| WeightedTerm {
                term: terms[i].clone(),
                weight: model.weights[i],
            })
            .collect()
    };
    Ok(DiscriminativeTermSet {
        positives: pick(positives),
        negatives: pick(negatives),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_with(weights: Vec<f64>) -> DtmModel {
        DtmModel {
            weights,
            bias: 0.0,
            config: DtmConfig::default(),
            train_accuracy: 0.0,
            final_loss: 0.0,
        }
    }

    #[test]
    fn extract_picks_extremes() {
        let vocab = Vocabulary::from_terms(["a", "b", "c"]);
        let m = model_with(vec![3.1, -2.0, 0.5]);
        let set = extract_discriminative_terms(&m, &vocab, 1, 1).unwrap();
        assert_eq!(set.positives, vec![WeightedTerm { term: "a".into(), weight: 3.1 }]);
        assert_eq!(set.negatives, vec![WeightedTerm { term: "b".into(), weight: -2.0 }]);
    }

    #[test]
    fn extract_tie_break_is_lexicographic() {
        let vocab = Vocabulary::from_terms(["alpha", "beta", "gamma", "delta"]);
        // terms sorted: alpha, beta, delta, gamma
        let m = model_with(vec![1.0, 1.0, -1.0, -1.0]);
        let set = extract_discriminative_terms(&m, &vocab, 1, 1).unwrap();
        assert_eq!(set.positives[0].term, "alpha");
        assert_eq!(set.negatives[0].term, "delta");
    }

    #[test]
    fn extract_rejects_oversized_k() {
        let vocab = Vocabulary::from_terms(["a", "b", "c"]);
        let m = model_with(vec![0.0; 3]);
        assert!(extract_discriminative_terms(&m, &vocab, 2, 2).is_err());
    }

    #[test]
    fn extract_thirty_from_hundred() {
        let terms: Vec<String> = (0..100).map(|i| format!("t{i:03}")).collect();
        let vocab = Vocabulary::from_terms(terms);
        let weights = (0..100).map(|i| ((i * 37) % 100) as f64 - 50.0).collect();
        let set = extract_discriminative_terms(&model_with(weights), &vocab, DEFAULT_K, DEFAULT_K).unwrap();
        assert_eq!(set.len(), 30);
        let pos: std::collections::HashSet<_> = set.positives.iter().map(|t| &t.term).collect();
        assert!(set.negatives.iter().all(|t| !pos.contains(&t.term)));
        assert!(set.positives.windows(2).all(|w| w[0].weight >= w[1].weight));
        assert!(set.negatives.windows(2).all(|w| w[0].weight <= w[1].weight));
    }

    #[test]
    fn single_class_rejected() {
        let m = DocTermMatrix {
            rows: vec!["a".into(), "b".into()],
            values: vec![vec![(0, 1.0)], vec![(0, 1.0)]],
            n_cols: 1,
        };
        let err = train_dtm(&m, &[Label::Theme, Label::Theme], DtmConfig::default()).unwrap_err();
        assert!(err.to_string().contains("single class"));
    }

    #[test]
    fn diverging_training_aborts() {
        let m = DocTermMatrix {
            rows: vec!["a".into(), "b".into()],
            values: vec![vec![(0, 1.0)], vec![(0, -1.0)]],
            n_cols: 1,
        };
        let cfg = DtmConfig {
            learning_rate: 1e308,
            l2_penalty: 1e300,
            epochs: 50,
            seed: 0,
        };
        assert!(matches!(
            train_dtm(&m, &[Label::Theme, Label::Other], cfg),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn zero_features_leave_weights_at_init() {
        let m = DocTermMatrix {
            rows: (0..4).map(|i| format!("d{i}")).collect(),
            values: vec![vec![]; 4],
            n_cols: 3,
        };
        let labels = [Label::Theme, Label::Theme, Label::Theme, Label::Other];
        let model = train_dtm(&m, &labels, DtmConfig::default()).unwrap();
        assert!(model.weights.iter().all(|&w| w == 0.0));
        // three of four positive: bias moves toward the positive log-odds
        assert!(model.bias > 0.0);
    }

    #[test]
    fn persistence_checks_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let vocab = Vocabulary::from_terms(["a", "b"]);
        let m = model_with(vec![0.25, -0.5]);
        m.save(&path, &vocab).unwrap();
        let loaded = DtmModel::load(&path, &vocab).unwrap();
        assert_eq!(loaded.weights, m.weights);
        let other = Vocabulary::from_terms(["a", "c"]);
        assert!(DtmModel::load(&path, &other).is_err());
    }
}
