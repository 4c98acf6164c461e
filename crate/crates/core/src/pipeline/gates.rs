//! Gate descriptors, selection validation and the files a decision writes.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::stages::{self, layout, RankedEntry, StyledOutput};
use super::store::{read_json, unix_now, write_atomic, write_json};
use super::{GateDecision, Manifest, Stage};
use crate::dtm::{DiscriminativeTermSet, WeightedTerm};
use crate::error::{Error, IoContext, Result};
use crate::imaging::RecordMeta;

/// One selectable item. Images carry the run-relative path of their file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    /// 1-based position in presentation order.
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDescriptor {
    pub gate: Stage,
    pub min_select: usize,
    pub max_select: usize,
    /// Only the term review accepts a replacement list.
    pub editable_terms: bool,
    pub candidates: Vec<Candidate>,
}

/// Replacement term lists for the term review.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermEdit {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

/// What an editor submits at a gate.
///
/// At the term review, empty `ids` and no `terms` approves the extracted set,
/// `ids` keeps a subset of it and `terms` replaces it. Image gates take
/// candidate ids; the concept selection may also name the search phrase for
/// the generator dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Selection {
    pub ids: Vec<String>,
    pub terms: Option<TermEdit>,
    pub concept_query: Option<String>,
}

impl Selection {
    pub fn ids<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Self {
        Selection {
            ids: ids.into_iter().map(Into::into).collect(),
            ..Selection::default()
        }
    }
}

pub(crate) fn describe(dir: &Path, m: &Manifest) -> Result<GateDescriptor> {
    let gate = m.stage;
    let image = |id: String, rank: usize, score: Option<f64>, artifact: String| Candidate {
        id,
        rank,
        score,
        polarity: None,
        artifact: Some(artifact),
    };
    let (min_select, max_select, candidates) = match gate {
        Stage::TermReview => {
            let terms: DiscriminativeTermSet = read_json(&dir.join(layout::TERMS))?;
            let mut cands = Vec::new();
            for (polarity, list) in [("positive", &terms.positives), ("negative", &terms.negatives)] {
                for t in list {
                    cands.push(Candidate {
                        id: t.term.clone(),
                        rank: cands.len() + 1,
                        score: Some(t.weight),
                        polarity: Some(polarity.into()),
                        artifact: None,
                    });
                }
            }
            (0, cands.len(), cands)
        }
        Stage::ConceptSelection => {
            let ranking: Vec<RankedEntry> = read_json(&dir.join(layout::RANKING))?;
            let cands: Vec<Candidate> = ranking
                .into_iter()
                .take(m.config.rank.top_k)
                .map(|r| image(r.id.clone(), r.rank, Some(r.score), layout::ranked_image(&r.id)))
                .collect();
            (1, 1, cands)
        }
        Stage::CandidateSelection => {
            let samples = stages::read_jsonl::<RecordMeta>(&dir.join(layout::SAMPLES))?;
            let cands: Vec<Candidate> = samples
                .into_iter()
                .enumerate()
                .map(|(i, s)| image(s.id.clone(), i + 1, None, layout::sample_image(&s.id)))
                .collect();
            let n = cands.len();
            (1, n, cands)
        }
        Stage::FinalSelection => {
            let styled: Vec<StyledOutput> = read_json(&dir.join(layout::STYLED_INDEX))?;
            let cands = styled
                .into_iter()
                .enumerate()
                .map(|(i, s)| image(s.id, i + 1, None, s.path))
                .collect();
            (1, 1, cands)
        }
        other => return Err(Error::Conflict(format!("{other} is not a gate"))),
    };
    if candidates.is_empty() && min_select > 0 {
        return Err(Error::Invalid(format!("gate {gate} has no candidates")));
    }
    Ok(GateDescriptor {
        gate,
        min_select,
        max_select,
        editable_terms: gate == Stage::TermReview,
        candidates,
    })
}

pub(crate) fn default_selection(desc: &GateDescriptor) -> Selection {
    match desc.gate {
        Stage::TermReview => Selection::default(),
        _ => Selection::ids(desc.candidates.first().map(|c| c.id.clone())),
    }
}

fn normalize_terms(list: &[String]) -> Vec<String> {
    list.iter().map(|t| t.trim().to_lowercase()).collect()
}

/// Checks a selection against the descriptor and turns it into a decision.
pub(crate) fn validate(desc: &GateDescriptor, selection: Selection, actor: &str) -> Result<GateDecision> {
    let gate = desc.gate;
    let presented: HashSet<&str> = desc.candidates.iter().map(|c| c.id.as_str()).collect();
    let mut seen = HashSet::new();
    for id in &selection.ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Selection(format!("id {id} selected twice")));
        }
        if !presented.contains(id.as_str()) {
            return Err(Error::Selection(format!("{id} is not a candidate at {gate}")));
        }
    }
    let n = selection.ids.len();
    let mut terms = None;
    if gate == Stage::TermReview {
        if let Some(edit) = selection.terms {
            if n > 0 {
                return Err(Error::Selection("give either ids or a term list, not both".into()));
            }
            let edit = TermEdit {
                positives: normalize_terms(&edit.positives),
                negatives: normalize_terms(&edit.negatives),
            };
            let all: Vec<&String> = edit.positives.iter().chain(&edit.negatives).collect();
            if all.is_empty() {
                return Err(Error::Selection("edited term set is empty".into()));
            }
            let mut uniq = HashSet::new();
            if let Some(t) = all.iter().find(|t| t.is_empty() || !uniq.insert(t.as_str())) {
                return Err(Error::Selection(format!("term {t:?} is blank or listed twice")));
            }
            terms = Some(edit);
        }
    } else {
        if selection.terms.is_some() {
            return Err(Error::Selection(format!("{gate} does not take a term list")));
        }
        if n < desc.min_select || n > desc.max_select {
            let want = if desc.min_select == desc.max_select {
                format!("exactly {}", desc.min_select)
            } else {
                format!("{} to {}", desc.min_select, desc.max_select)
            };
            return Err(Error::Selection(format!("{gate} takes {want} ids, got {n}")));
        }
    }
    let concept_query = match selection.concept_query.map(|q| q.trim().to_string()) {
        Some(q) if gate != Stage::ConceptSelection => {
            return Err(Error::Selection(format!("concept_query {q:?} is only accepted at CONCEPT_SELECTION")));
        }
        Some(q) if q.is_empty() => None,
        other => other,
    };
    if actor.trim().is_empty() {
        return Err(Error::Invalid("actor must not be empty".into()));
    }
    Ok(GateDecision {
        gate,
        selected: selection.ids,
        terms,
        concept_query,
        actor: actor.to_string(),
        timestamp: unix_now(),
    })
}

/// Writes the decision's consequences; returns the run-relative outputs.
pub(crate) fn apply(dir: &Path, m: &Manifest, decision: &GateDecision) -> Result<Vec<String>> {
    match decision.gate {
        Stage::TermReview => {
            let extracted: DiscriminativeTermSet = read_json(&dir.join(layout::TERMS))?;
            let reviewed = reviewed_terms(&extracted, decision);
            write_json(&dir.join(layout::REVIEWED_TERMS), &reviewed)?;
            Ok(vec![layout::REVIEWED_TERMS.into()])
        }
        Stage::ConceptSelection => {
            let ranking: Vec<RankedEntry> = read_json(&dir.join(layout::RANKING))?;
            let id = &decision.selected[0];
            let entry = ranking.iter().find(|r| &r.id == id).expect("validated id");
            write_json(
                &dir.join(layout::CONCEPT),
                &json!({"id": id, "rank": entry.rank, "score": entry.score, "concept_query": decision.concept_query}),
            )?;
            Ok(vec![layout::CONCEPT.into()])
        }
        Stage::CandidateSelection => {
            write_json(&dir.join(layout::SELECTED_CANDIDATES), &decision.selected)?;
            Ok(vec![layout::SELECTED_CANDIDATES.into()])
        }
        Stage::FinalSelection => {
            let styled: Vec<StyledOutput> = read_json(&dir.join(layout::STYLED_INDEX))?;
            let chosen = styled.iter().find(|s| s.id == decision.selected[0]).expect("validated id");
            let src = dir.join(&chosen.path);
            let bytes = fs::read(&src).at(&src)?;
            write_atomic(&dir.join(layout::FINAL_IMAGE), &bytes)?;
            let provenance = stages::provenance(dir, m, chosen)?;
            write_json(&dir.join(layout::PROVENANCE), &provenance)?;
            Ok(vec![layout::FINAL_IMAGE.into(), layout::PROVENANCE.into()])
        }
        other => Err(Error::Conflict(format!("{other} is not a gate"))),
    }
}

/// Terms the harvest uses after review: kept weights come from the model,
/// terms added by an editor get weight 0.
fn reviewed_terms(extracted: &DiscriminativeTermSet, decision: &GateDecision) -> DiscriminativeTermSet {
    let weight_of = |t: &str| {
        extracted
            .positives
            .iter()
            .chain(&extracted.negatives)
            .find(|w| w.term == t)
            .map_or(0.0, |w| w.weight)
    };
    if let Some(edit) = &decision.terms {
        let pick = |list: &[String]| {
            list.iter()
                .map(|t| WeightedTerm {
                    term: t.clone(),
                    weight: weight_of(t),
                })
                .collect()
        };
        return DiscriminativeTermSet {
            positives: pick(&edit.positives),
            negatives: pick(&edit.negatives),
        };
    }
    if decision.selected.is_empty() {
        return extracted.clone();
    }
    let keep: HashSet<&str> = decision.selected.iter().map(String::as_str).collect();
    let filter = |list: &[WeightedTerm]| list.iter().filter(|t| keep.contains(t.term.as_str())).cloned().collect();
    DiscriminativeTermSet {
        positives: filter(&extracted.positives),
        negatives: filter(&extracted.negatives),
    }
}

