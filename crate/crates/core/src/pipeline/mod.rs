//! Persisted, resumable run orchestration with human review gates.
//!
//! A run lives in `<root>/<run_id>/`. `manifest.json` is the single source of
//! truth; every mutation happens under the run's writer lock and is followed
//! by an atomic manifest rewrite. Automated stages write only into their own
//! subdirectories, so a stage interrupted by a crash is simply re-run.

mod gates;
mod stages;
mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

pub use gates::{Candidate, GateDescriptor, Selection, TermEdit};
pub use stages::{load_records, StyledOutput};
pub use store::{read_events, Artifact, Event, EventKind, RunLock, EVENTS_FILE, MANIFEST_FILE};

use crate::acquisition::slug;
use crate::config::{Config, GatePolicy};
use crate::control::Control;
use crate::corpus::load_corpus;
use crate::error::{Error, IoContext, Result};
use store::{collect_artifacts, load_manifest, save_manifest, unix_now, EventLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Corpus,
    Dtm,
    TermReview,
    Harvest,
    DamTrain,
    Ranking,
    ConceptSelection,
    ConceptHarvest,
    GanTrain,
    Generation,
    CandidateSelection,
    StyleBuild,
    Stylize,
    FinalSelection,
    Done,
    Failed,
}

const GENERATIVE_PLAN: [Stage; 15] = [
    Stage::Corpus,
    Stage::Dtm,
    Stage::TermReview,
    Stage::Harvest,
    Stage::DamTrain,
    Stage::Ranking,
    Stage::ConceptSelection,
    Stage::ConceptHarvest,
    Stage::GanTrain,
    Stage::Generation,
    Stage::CandidateSelection,
    Stage::StyleBuild,
    Stage::Stylize,
    Stage::FinalSelection,
    Stage::Done,
];

const DIRECT_PLAN: [Stage; 11] = [
    Stage::Corpus,
    Stage::Dtm,
    Stage::TermReview,
    Stage::Harvest,
    Stage::DamTrain,
    Stage::Ranking,
    Stage::ConceptSelection,
    Stage::StyleBuild,
    Stage::Stylize,
    Stage::FinalSelection,
    Stage::Done,
];

impl Stage {
    pub const GATES: [Stage; 4] = [
        Stage::TermReview,
        Stage::ConceptSelection,
        Stage::CandidateSelection,
        Stage::FinalSelection,
    ];

    pub fn is_gate(self) -> bool {
        Stage::GATES.contains(&self)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Stage::Done | Stage::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Corpus => "CORPUS",
            Stage::Dtm => "DTM",
            Stage::TermReview => "TERM_REVIEW",
            Stage::Harvest => "HARVEST",
            Stage::DamTrain => "DAM_TRAIN",
            Stage::Ranking => "RANKING",
            Stage::ConceptSelection => "CONCEPT_SELECTION",
            Stage::ConceptHarvest => "CONCEPT_HARVEST",
            Stage::GanTrain => "GAN_TRAIN",
            Stage::Generation => "GENERATION",
            Stage::CandidateSelection => "CANDIDATE_SELECTION",
            Stage::StyleBuild => "STYLE_BUILD",
            Stage::Stylize => "STYLIZE",
            Stage::FinalSelection => "FINAL_SELECTION",
            Stage::Done => "DONE",
            Stage::Failed => "FAILED",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        GENERATIVE_PLAN.iter().chain(&[Stage::Failed]).copied().find(|st| st.as_str() == norm)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    /// Generator stages produce the content image.
    #[default]
    Generative,
    /// The selected ranked image is stylized as is.
    Direct,
}

impl Mode {
    pub fn plan(self) -> &'static [Stage] {
        match self {
            Mode::Generative => &GENERATIVE_PLAN,
            Mode::Direct => &DIRECT_PLAN,
        }
    }

    /// Stage after `stage` in this mode's plan.
    pub fn next(self, stage: Stage) -> Option<Stage> {
        let plan = self.plan();
        plan.iter().position(|&s| s == stage).and_then(|i| plan.get(i + 1).copied())
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s.to_ascii_lowercase().as_str() {
            "generative" => Some(Mode::Generative),
            "direct" => Some(Mode::Direct),
            _ => None,
        }
    }
}

/// An editor's recorded choice at a gate. Never modified once written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub gate: Stage,
    pub selected: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<TermEdit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_query: Option<String>,
    pub actor: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub theme: String,
    pub mode: Mode,
    pub stage: Stage,
    pub corpus_path: PathBuf,
    pub config: Config,
    pub artifacts: BTreeMap<Stage, Vec<Artifact>>,
    pub gate_decisions: Vec<GateDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
    pub created_at: u64,
    /// Incremented on every write.
    pub revision: u64,
}

impl Manifest {
    pub fn decision(&self, gate: Stage) -> Option<&GateDecision> {
        self.gate_decisions.iter().find(|d| d.gate == gate)
    }

    pub fn planned_stages(&self) -> &'static [Stage] {
        self.mode.plan()
    }

    /// Looks up an artifact by its run-relative path.
    pub fn artifact(&self, path: &str) -> Option<&Artifact> {
        self.artifacts.values().flatten().find(|a| a.path == path)
    }
}

#[derive(Debug, Clone)]
pub struct NewRun {
    /// Generated from the theme when absent.
    pub run_id: Option<String>,
    pub theme: String,
    pub corpus: PathBuf,
    pub mode: Mode,
    pub config: Config,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Advance {
    /// One automated stage ran; the run is now at `to`.
    Completed { from: Stage, to: Stage },
    /// The run waits at a gate; nothing changed.
    Blocked(Stage),
}

/// Entry point over a directory of runs.
#[derive(Debug, Clone)]
pub struct Pipeline {
    root: PathBuf,
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 96 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Pipeline {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Pipeline { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf> {
        if !valid_run_id(run_id) {
            return Err(Error::NotFound(format!("run {run_id:?}")));
        }
        Ok(self.root.join(run_id))
    }

    /// Validates inputs, then materializes the run directory in one rename.
    pub fn create_run(&self, req: NewRun) -> Result<Manifest> {
        let theme = req.theme.trim().to_string();
        if theme.is_empty() {
            return Err(Error::Invalid("theme must not be empty".into()));
        }
        let mut config = req.config;
        config.validate()?;
        let corpus_path = if req.corpus.is_absolute() {
            req.corpus.clone()
        } else {
            std::env::current_dir().at(".")?.join(&req.corpus)
        };
        let corpus = load_corpus(&corpus_path)?;
        let cwd = std::env::current_dir().at(".")?;
        config.absolutize(&cwd);
        if config.style_reference.exemplars.is_none() {
            config.style_reference.exemplars = corpus_path.parent().map(|p| p.join("style"));
        }

        let run_id = match req.run_id {
            Some(id) if valid_run_id(&id) => id,
            Some(id) => return Err(Error::Invalid(format!("run id {id:?} may only contain letters, digits, '-' and '_'"))),
            None => {
                let mut h = Sha256::new();
                h.update(theme.as_bytes());
                h.update(corpus_path.to_string_lossy().as_bytes());
                h.update(format!("{:?}{}", std::time::SystemTime::now(), std::process::id()).as_bytes());
                let s = slug(&theme);
                format!("{}-{}", if s.is_empty() { "run" } else { &s }, &hex::encode(h.finalize())[..8])
            }
        };
        let dir = self.root.join(&run_id);
        if dir.exists() {
            return Err(Error::Conflict(format!("run {run_id} already exists")));
        }
        fs::create_dir_all(&self.root).at(&self.root)?;
        let tmp = self.root.join(format!(".tmp-{run_id}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&tmp);
        let manifest = Manifest {
            run_id: run_id.clone(),
            theme,
            mode: req.mode,
            stage: Stage::Corpus,
            corpus_path,
            config,
            artifacts: BTreeMap::new(),
            gate_decisions: Vec::new(),
            failure: None,
            created_at: unix_now(),
            revision: 1,
        };
        let build = || -> Result<()> {
            fs::create_dir_all(&tmp).at(&tmp)?;
            save_manifest(&tmp, &manifest)?;
            EventLog::open(&tmp)?.append(
                Stage::Corpus,
                EventKind::RunCreated,
                json!({"mode": manifest.mode, "documents": corpus.len(), "plan": manifest.planned_stages()}),
            )?;
            if dir.exists() {
                return Err(Error::Conflict(format!("run {run_id} already exists")));
            }
            fs::rename(&tmp, &dir).map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists | std::io::ErrorKind::DirectoryNotEmpty => {
                    Error::Conflict(format!("run {run_id} already exists"))
                }
                _ => Error::io(&dir, e),
            })
        };
        if let Err(e) = build() {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
        log::info!("created run {run_id} ({:?})", manifest.mode);
        Ok(manifest)
    }

    /// Lock-free snapshot of a run's state.
    pub fn load(&self, run_id: &str) -> Result<Manifest> {
        load_manifest(&self.run_dir(run_id)?, run_id)
    }

    /// Reconstructs a run from disk for a fresh process; same as `load`.
    pub fn resume(&self, run_id: &str) -> Result<Manifest> {
        let m = self.load(run_id)?;
        log::info!("run {run_id} is at {}", m.stage);
        Ok(m)
    }

    pub fn list_runs(&self) -> Result<Vec<String>> {
        let Ok(entries) = fs::read_dir(&self.root) else {
            return Ok(Vec::new());
        };
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(MANIFEST_FILE).is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn events(&self, run_id: &str, after_seq: u64) -> Result<Vec<Event>> {
        let dir = self.run_dir(run_id)?;
        if !dir.is_dir() {
            return Err(Error::NotFound(format!("run {run_id}")));
        }
        read_events(&dir.join(EVENTS_FILE), after_seq)
    }

    /// Runs exactly one automated stage, or reports the gate the run waits at.
    ///
    /// A failing stage moves the run to FAILED (earlier artifacts stay) and the
    /// error is returned. Cancellation leaves the run at the same stage.
    pub fn advance(&self, run_id: &str, control: &Control) -> Result<Advance> {
        let dir = self.run_dir(run_id)?;
        load_manifest(&dir, run_id)?;
        let _lock = RunLock::acquire(&dir, run_id)?;
        // re-read under the lock: another writer may have finished meanwhile
        let mut m = load_manifest(&dir, run_id)?;
        let stage = m.stage;
        match stage {
            Stage::Done => return Err(Error::Conflict(format!("run {run_id} is DONE and read-only"))),
            Stage::Failed => {
                let why = m.failure.as_ref().map(|f| format!(" at {}: {}", f.stage, f.message)).unwrap_or_default();
                return Err(Error::Conflict(format!("run {run_id} FAILED{why}")));
            }
            s if s.is_gate() => return Ok(Advance::Blocked(s)),
            _ => {}
        }
        let events = Arc::new(EventLog::open(&dir)?);
        events.append(stage, EventKind::StageStarted, json!({}))?;
        let progress = progress_sink(events.clone(), stage);
        let control = control.also_report(progress);
        let outcome = stages::run_stage(stage, &dir, &m, &control);
        drop(control);
        match outcome {
            Ok(outputs) => {
                let next = m.mode.next(stage).expect("automated stages have a successor");
                m.artifacts.insert(stage, collect_artifacts(&dir, &outputs)?);
                m.stage = next;
                m.revision += 1;
                save_manifest(&dir, &m)?;
                events.append(
                    stage,
                    EventKind::StageCompleted,
                    json!({"next": next, "artifacts": m.artifacts[&stage].len()}),
                )?;
                log::info!("run {run_id}: {stage} complete, now at {next}");
                self.enter_gate(&dir, &mut m, &events)?;
                Ok(Advance::Completed { from: stage, to: m.stage })
            }
            Err(Error::Interrupted) => {
                events.append(stage, EventKind::StageInterrupted, json!({}))?;
                Err(Error::Interrupted)
            }
            Err(e) => {
                let message = e.to_string();
                log::error!("run {run_id}: {stage} failed: {message}");
                m.failure = Some(Failure {
                    stage,
                    message: message.clone(),
                });
                m.stage = Stage::Failed;
                m.revision += 1;
                save_manifest(&dir, &m)?;
                events.append(stage, EventKind::StageFailed, json!({"message": message}))?;
                Err(e)
            }
        }
    }

    /// Like `advance`, but only if the run is at `expected`.
    pub fn advance_stage(&self, run_id: &str, expected: Stage, control: &Control) -> Result<Advance> {
        let m = self.load(run_id)?;
        if m.stage != expected {
            return Err(Error::Conflict(format!("run {run_id} is at {}, not {expected}", m.stage)));
        }
        self.advance(run_id, control)
    }

    /// Announces a gate the run just reached, resolving it at once where the
    /// config says so.
    fn enter_gate(&self, dir: &Path, m: &mut Manifest, events: &EventLog) -> Result<()> {
        if !m.stage.is_gate() {
            if m.stage == Stage::Done {
                events.append(Stage::Done, EventKind::RunDone, json!({}))?;
            }
            return Ok(());
        }
        let desc = gates::describe(dir, m)?;
        events.append(
            m.stage,
            EventKind::GatePending,
            json!({"candidates": desc.candidates.len(), "min": desc.min_select, "max": desc.max_select}),
        )?;
        if m.stage == Stage::TermReview && m.config.gates.term_review == GatePolicy::Auto {
            self.apply_decision(dir, m, events, &desc, Selection::default(), "auto")?;
        }
        Ok(())
    }

    /// Candidates and selection rules of the gate the run waits at.
    pub fn current_gate(&self, run_id: &str) -> Result<GateDescriptor> {
        let dir = self.run_dir(run_id)?;
        let m = load_manifest(&dir, run_id)?;
        if !m.stage.is_gate() {
            return Err(Error::Conflict(format!("no gate pending; run {run_id} is at {}", m.stage)));
        }
        gates::describe(&dir, &m)
    }

    /// Records a decision at `gate` and moves the run past it.
    pub fn resolve_gate(&self, run_id: &str, gate: Stage, selection: Selection, actor: &str) -> Result<Manifest> {
        let dir = self.run_dir(run_id)?;
        load_manifest(&dir, run_id)?;
        let _lock = RunLock::acquire(&dir, run_id)?;
        let mut m = load_manifest(&dir, run_id)?;
        if !gate.is_gate() || !m.planned_stages().contains(&gate) {
            return Err(Error::NotFound(format!("gate {gate} in a {:?} run", m.mode)));
        }
        if m.decision(gate).is_some() {
            return Err(Error::Conflict(format!("gate {gate} already resolved")));
        }
        if m.stage != gate {
            return Err(Error::Conflict(format!("run {run_id} is at {}, not at gate {gate}", m.stage)));
        }
        let desc = gates::describe(&dir, &m)?;
        let events = EventLog::open(&dir)?;
        self.apply_decision(&dir, &mut m, &events, &desc, selection, actor)?;
        Ok(m)
    }

    fn apply_decision(
        &self,
        dir: &Path,
        m: &mut Manifest,
        events: &EventLog,
        desc: &GateDescriptor,
        selection: Selection,
        actor: &str,
    ) -> Result<()> {
        let gate = m.stage;
        let decision = gates::validate(desc, selection, actor)?;
        let outputs = gates::apply(dir, m, &decision)?;
        let next = m.mode.next(gate).expect("gates have a successor");
        m.gate_decisions.push(decision.clone());
        m.artifacts.insert(gate, collect_artifacts(dir, &outputs)?);
        m.stage = next;
        m.revision += 1;
        save_manifest(dir, m)?;
        events.append(
            gate,
            EventKind::GateResolved,
            json!({"selected": decision.selected, "actor": decision.actor, "next": next}),
        )?;
        log::info!("run {}: gate {gate} resolved by {actor}", m.run_id);
        self.enter_gate(dir, m, events)
    }

    /// The selection `--gates auto` makes: approve the terms as extracted, or
    /// take the first (rank-1) candidate.
    pub fn default_selection(&self, run_id: &str) -> Result<Selection> {
        Ok(gates::default_selection(&self.current_gate(run_id)?))
    }

    /// Advances until DONE. Gates are resolved by their default selection when
    /// `auto_gates` is set; otherwise the run stops at the first open gate.
    pub fn run_until_blocked(&self, run_id: &str, auto_gates: bool, control: &Control) -> Result<Manifest> {
        loop {
            let m = self.load(run_id)?;
            if m.stage == Stage::Done {
                return Ok(m);
            }
            match self.advance(run_id, control)? {
                Advance::Completed { .. } => {}
                Advance::Blocked(gate) if auto_gates => {
                    let sel = self.default_selection(run_id)?;
                    self.resolve_gate(run_id, gate, sel, "auto")?;
                }
                Advance::Blocked(_) => return self.load(run_id),
            }
        }
    }

    /// Re-extracts the term lists from the run's trained text model with
    /// other list sizes. Nothing is written.
    pub fn terms(&self, run_id: &str, k_pos: usize, k_neg: usize) -> Result<crate::dtm::DiscriminativeTermSet> {
        stages::reextract_terms(&self.run_dir(run_id)?, k_pos, k_neg)
    }

    /// Stylizes any stored image of the run outside the stage sequence, at
    /// `side` pixels, into `adhoc/styled/`. Needs the appearance model and the
    /// style reference.
    pub fn stylize_adhoc(&self, run_id: &str, content_id: &str, side: u32, control: &Control) -> Result<PathBuf> {
        let dir = self.run_dir(run_id)?;
        let m = load_manifest(&dir, run_id)?;
        let _lock = RunLock::acquire(&dir, run_id)?;
        stages::stylize_adhoc(&dir, &m, content_id, side, control)
    }
}

/// Progress reports become events, at most one per percent per task.
fn progress_sink(events: Arc<EventLog>, stage: Stage) -> impl Fn(&str, usize, usize) + Send + Sync + 'static {
    let last: Mutex<Option<(String, usize)>> = Mutex::new(None);
    move |task: &str, done: usize, total: usize| {
        let pct = if total == 0 { 100 } else { done * 100 / total };
        let mut last = last.lock().unwrap();
        if last.as_ref().is_some_and(|(t, p)| t == task && *p == pct) {
            return;
        }
        *last = Some((task.to_string(), pct));
        let payload = json!({"task": task, "done": done, "total": total});
        if let Err(e) = events.append(stage, EventKind::Progress, payload) {
            log::warn!("could not record progress: {e}");
        }
    }
}

#[cfg(test)]
mod tests;
