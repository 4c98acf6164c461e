//! Run configuration: one section per module plus orchestration settings.
//!
//! Layers apply in order: built-in defaults, the optional toy preset, a TOML
//! file, `CONCEPT_CANVAS__SECTION__KEY` environment variables, then dotted
//! `section.key=value` overrides. Every layer is checked against the full
//! schema, so a misspelled key is an error rather than a silent no-op.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::acquisition::{HarvestOptions, HttpProviderConfig, RetryPolicy};
use crate::began::BeganConfig;
use crate::corpus::VocabularyConfig;
use crate::dam::DamConfig;
use crate::dtm::{DtmConfig, DEFAULT_K};
use crate::error::{Error, IoContext, Result};
use crate::style::StyleConfig;

/// Prefix of environment overrides; `__` separates path segments.
pub const ENV_PREFIX: &str = "CONCEPT_CANVAS__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub min_df: usize,
    pub max_df_fraction: f64,
    /// Replaces the built-in stopword list.
    pub stopwords: Option<PathBuf>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let v = VocabularyConfig::default();
        CorpusSection {
            min_df: v.min_df,
            max_df_fraction: v.max_df_fraction,
            stopwords: None,
        }
    }
}

impl CorpusSection {
    pub fn vocabulary(&self) -> VocabularyConfig {
        VocabularyConfig {
            min_df: self.min_df,
            max_df_fraction: self.max_df_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtmSection {
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub epochs: usize,
    pub seed: u64,
    pub k_pos: usize,
    pub k_neg: usize,
}

impl Default for DtmSection {
    fn default() -> Self {
        let d = DtmConfig::default();
        DtmSection {
            learning_rate: d.learning_rate,
            l2_penalty: d.l2_penalty,
            epochs: d.epochs,
            seed: d.seed,
            k_pos: DEFAULT_K,
            k_neg: DEFAULT_K,
        }
    }
}

impl DtmSection {
    pub fn training(&self) -> DtmConfig {
        DtmConfig {
            learning_rate: self.learning_rate,
            l2_penalty: self.l2_penalty,
            epochs: self.epochs,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestSection {
    pub per_term: usize,
    pub min_yield: usize,
    pub min_side: u32,
    pub parallelism: usize,
    pub retry: RetryPolicy,
    /// Size of the unlabeled generator dataset.
    pub concept_target: usize,
}

impl Default for HarvestSection {
    fn default() -> Self {
        let h = HarvestOptions::default();
        HarvestSection {
            per_term: h.per_term,
            min_yield: h.min_yield,
            min_side: h.min_side,
            parallelism: h.parallelism,
            retry: h.retry,
            concept_target: 1000,
        }
    }
}

impl HarvestSection {
    pub fn options(&self) -> HarvestOptions {
        HarvestOptions {
            per_term: self.per_term,
            min_yield: self.min_yield,
            min_side: self.min_side,
            parallelism: self.parallelism,
            retry: self.retry.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Local,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    /// Root of the local image tree (`<root>/<query-slug>/*.png`).
    pub root: Option<PathBuf>,
    pub http: HttpProviderConfig,
}

impl ProviderSection {
    /// Parses `local:<dir>` or `http`.
    pub fn parse_spec(spec: &str) -> Result<(ProviderKind, Option<PathBuf>)> {
        match spec.split_once(':') {
            Some(("local", dir)) if !dir.is_empty() => Ok((ProviderKind::Local, Some(PathBuf::from(dir)))),
            None if spec == "http" => Ok((ProviderKind::Http, None)),
            _ => Err(Error::Config(format!("provider must be `local:<dir>` or `http`, got {spec:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankSection {
    /// Ranked images presented for concept selection.
    pub top_k: usize,
}

impl Default for RankSection {
    fn default() -> Self {
        RankSection { top_k: 30 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptSection {
    /// Search phrase for the generator dataset when the selection does not
    /// carry one; the run theme is the last fallback.
    pub query: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub count: usize,
    pub seed: u64,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection { count: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleReferenceSection {
    /// Exemplar directory; defaults to `style/` next to the corpus file.
    pub exemplars: Option<PathBuf>,
    pub cell_side: u32,
}

impl Default for StyleReferenceSection {
    fn default() -> Self {
        StyleReferenceSection {
            exemplars: None,
            cell_side: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatePolicy {
    #[default]
    Manual,
    Auto,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatesSection {
    pub term_review: GatePolicy,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiSection {
    /// Start the next stage right after a gate selection is recorded.
    pub auto_advance: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusSection,
    pub dtm: DtmSection,
    pub harvest: HarvestSection,
    pub provider: ProviderSection,
    pub dam: DamConfig,
    pub rank: RankSection,
    pub concept: ConceptSection,
    pub began: BeganConfig,
    pub generation: GenerationSection,
    pub style: StyleConfig,
    pub style_reference: StyleReferenceSection,
    pub gates: GatesSection,
    pub api: ApiSection,
}

impl Config {
    /// Reduced widths and short schedules for offline runs on a laptop CPU.
    pub fn toy() -> Config {
        let mut c = Config::default();
        c.harvest.per_term = 8;
        c.harvest.concept_target = 48;
        c.harvest.parallelism = 2;
        c.dam.width_divisor = 8;
        c.dam.image_side = 64;
        c.dam.epochs = 3;
        c.dam.batch_size = 8;
        c.dam.learning_rate = 1e-3;
        c.dam.allow_random_init = true;
        c.began.iterations = 60;
        c.began.batch_size = 8;
        c.began.image_side = 32;
        c.began.channels = 8;
        c.began.embedding_dim = 16;
        c.began.checkpoint_interval = 20;
        c.generation.count = 4;
        c.style.output_side = 64;
        c.style.steps = 20;
        c.style_reference.cell_side = 64;
        c
    }

    /// Applies one seed to every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.dtm.seed = seed;
        self.dam.seed = seed;
        self.began.seed = seed;
        self.generation.seed = seed;
        self.style.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.min_df == 0 || !(c.max_df_fraction > 0.0 && c.max_df_fraction <= 1.0) {
            return Err(Error::Config("corpus.min_df must be >= 1 and corpus.max_df_fraction in (0, 1]".into()));
        }
        if !(self.dtm.learning_rate > 0.0) || self.dtm.l2_penalty < 0.0 {
            return Err(Error::Config("dtm.learning_rate must be positive and dtm.l2_penalty non-negative".into()));
        }
        if self.dtm.k_pos == 0 || self.dtm.k_neg == 0 {
            return Err(Error::Config("dtm.k_pos and dtm.k_neg must be positive".into()));
        }
        if self.harvest.per_term == 0 || self.harvest.concept_target == 0 {
            return Err(Error::Config("harvest.per_term and harvest.concept_target must be positive".into()));
        }
        if self.rank.top_k == 0 {
            return Err(Error::Config("rank.top_k must be positive".into()));
        }
        if self.generation.count == 0 {
            return Err(Error::Config("generation.count must be positive".into()));
        }
        if self.style_reference.cell_side == 0 {
            return Err(Error::Config("style_reference.cell_side must be positive".into()));
        }
        self.dam.validate()?;
        self.began.validate()?;
        self.style.validate()
    }

    /// Makes every configured path absolute against `base`.
    pub fn absolutize(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.corpus.stopwords);
        fix(&mut self.provider.root);
        fix(&mut self.dam.backbone_weights);
        fix(&mut self.style_reference.exemplars);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Config> {
        let value: Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        from_value(value)
    }

    /// Defaults plus the given layers, environment taken from the process.
    pub fn load(toy: bool, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Config> {
        Config::load_with_env(toy, file, std::env::vars(), overrides)
    }

    pub fn load_with_env(
        toy: bool,
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Config> {
        let base = if toy { Config::toy() } else { Config::default() };
        let mut tree = serde_json::to_value(&base)?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).at(path)?;
            let layer: Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, layer);
            check(&tree, &format!("config file {}", path.display()))?;
        }
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_PREFIX)?;
                Some((rest.split("__").map(str::to_lowercase).collect::<Vec<_>>().join("."), v))
            })
            .collect();
        env.sort();
        for (key, raw) in &env {
            set_dotted(&mut tree, key, parse_scalar(raw))?;
            check(&tree, &format!("environment override {key}"))?;
        }
        for (key, raw) in overrides {
            set_dotted(&mut tree, key, parse_scalar(raw))?;
            check(&tree, &format!("override {key}"))?;
        }
        let config = from_value(tree)?;
        config.validate()?;
        Ok(config)
    }

    /// Applies one dotted override given as a command-line string.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Config> {
        self.with_value(key, parse_scalar(raw))
    }

    /// Applies one dotted override given as a typed value; the result is
    /// validated.
    pub fn with_value(&self, key: &str, value: Value) -> Result<Config> {
        let mut tree = serde_json::to_value(self)?;
        set_dotted(&mut tree, key, value)?;
        let config = from_value(tree)?;
        config.validate()?;
        Ok(config)
    }
}

fn from_value(value: Value) -> Result<Config> {
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

fn check(tree: &Value, layer: &str) -> Result<()> {
    from_value(tree.clone()).map(drop).map_err(|e| Error::Config(format!("{layer}: {e}")))
}

/// Recursive table merge; `overlay` wins on scalars and arrays.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Scalar from a command-line or environment string: anything that parses as
/// a TOML value (number, boolean, array, quoted string) is taken as such, the
/// rest as a bare string.
pub fn parse_scalar(raw: &str) -> Value {
    #[derive(Deserialize)]
    struct Wrapper {
        v: Value,
    }
    toml::from_str::<Wrapper>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("{key}: parent is not a section")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
