//! Candidate image collection from a search provider: per-term harvests for
//! the appearance model and a single-query harvest for the generator dataset.
//!
//! Downloads run on a bounded worker pool, transient provider failures are
//! retried with exponential backoff, and results are deduplicated by content
//! hash (first query wins) and returned sorted by hash.

mod http;
mod local;
mod retry;

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use http::{HttpProviderConfig, HttpSearchProvider, SEARCH_KEY_ENV};
pub use local::{slug, LocalDirProvider};
pub use retry::{RateLimiter, RetryPolicy, Sleeper, ThreadSleeper};

use crate::dtm::DiscriminativeTermSet;
use crate::error::{Error, Result};
use crate::imaging::{ClassLabel, ImageRecord, ImageSource, Provenance, Rejection, MIN_IMAGE_SIDE};

/// One search result: an opaque locator the provider can fetch.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SearchHit {
    pub locator: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("request failed: {0}")]
    Permanent(String),
}

/// An image search backend.
///
/// `search` returns at most `n` hits with no duplicate locators.
pub trait SearchProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Maximum requests per second, if the backend imposes one.
    fn rate_limit(&self) -> Option<f64> {
        None
    }

    fn search(&self, query: &str, n: usize) -> std::result::Result<Vec<SearchHit>, ProviderError>;

    fn fetch(&self, hit: &SearchHit) -> std::result::Result<Vec<u8>, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestOptions {
    pub per_term: usize,
    pub min_yield: usize,
    pub min_side: u32,
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for HarvestOptions {
    fn default() -> Self {
        HarvestOptions {
            per_term: 40,
            min_yield: 1,
            min_side: MIN_IMAGE_SIDE,
            parallelism: 4,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HarvestReport {
    /// Records kept per query, after deduplication.
    pub kept_per_query: BTreeMap<String, usize>,
    pub hits: usize,
    pub download_failures: usize,
    pub decode_failures: usize,
    pub too_small: usize,
    pub duplicates: usize,
    pub shortfall: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Harvest {
    pub records: Vec<ImageRecord>,
    pub report: HarvestReport,
}

/// Harvesting front end bound to one provider.
pub struct Harvester<'a> {
    provider: &'a dyn SearchProvider,
    options: HarvestOptions,
    sleeper: Arc<dyn Sleeper>,
    limiter: RateLimiter,
}

enum Fetched {
    Ok(ImageRecord),
    Download(String),
    Rejected(Rejection),
}

impl<'a> Harvester<'a> {
    pub fn new(provider: &'a dyn SearchProvider, options: HarvestOptions) -> Self {
        Harvester::with_sleeper(provider, options, Arc::new(ThreadSleeper))
    }

    pub fn with_sleeper(provider: &'a dyn SearchProvider, options: HarvestOptions, sleeper: Arc<dyn Sleeper>) -> Self {
        let limiter = RateLimiter::new(provider.rate_limit(), sleeper.clone());
        Harvester {
            provider,
            options,
            sleeper,
            limiter,
        }
    }

    fn with_retry<T>(&self, mut op: impl FnMut() -> std::result::Result<T, ProviderError>) -> std::result::Result<T, ProviderError> {
        let policy = &self.options.retry;
        let mut attempt = 0;
        loop {
            self.limiter.acquire();
            match op() {
                Err(ProviderError::Transient(msg)) => {
                    if attempt >= policy.max_retries {
                        return Err(ProviderError::Transient(msg));
                    }
                    log::debug!("transient provider error (attempt {}): {msg}", attempt + 1);
                    self.sleeper.sleep(policy.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Searches one query; auth failures are fatal, anything else degrades to
    /// an empty result with a warning.
    fn search(&self, query: &str, n: usize, report: &mut HarvestReport) -> Result<Vec<SearchHit>> {
        match self.with_retry(|| self.provider.search(query, n)) {
            Ok(mut hits) => {
                hits.truncate(n);
                let mut seen = HashSet::new();
                hits.retain(|h| seen.insert(h.locator.clone()));
                if hits.is_empty() {
                    let msg = format!("query {query:?} returned no results");
                    log::warn!("{msg}");
                    report.warnings.push(msg);
                }
                report.hits += hits.len();
                Ok(hits)
            }
            Err(ProviderError::Auth(msg)) => Err(Error::ProviderAuth(msg)),
            Err(e) => {
                let msg = format!("query {query:?} skipped: {e}");
                log::warn!("{msg}");
                report.warnings.push(msg);
                Ok(Vec::new())
            }
        }
    }

    /// Downloads and validates hits concurrently; output order follows `hits`.
    fn fetch_all(&self, query: &str, hits: &[SearchHit], label: ClassLabel) -> Result<Vec<Fetched>> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, Fetched)>> = Mutex::new(Vec::with_capacity(hits.len()));
        let auth_failure: Mutex<Option<String>> = Mutex::new(None);
        let workers = self.options.parallelism.clamp(1, hits.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= hits.len() || auth_failure.lock().unwrap().is_some() {
                        break;
                    }
                    let hit = &hits[i];
                    let outcome = match self.with_retry(|| self.provider.fetch(hit)) {
                        Ok(bytes) => {
                            let source = ImageSource {
                                provider: self.provider.name().to_string(),
                                query: query.to_string(),
                                locator: hit.locator.clone(),
                            };
                            match ImageRecord::from_bytes(&bytes, source, label, Provenance::Harvested, self.options.min_side) {
                                Ok(rec) => Fetched::Ok(rec),
                                Err(r) => Fetched::Rejected(r),
                            }
                        }
                        Err(ProviderError::Auth(msg)) => {
                            *auth_failure.lock().unwrap() = Some(msg);
                            break;
                        }
                        Err(e) => Fetched::Download(e.to_string()),
                    };
                    results.lock().unwrap().push((i, outcome));
                });
            }
        });
        if let Some(msg) = auth_failure.into_inner().unwrap() {
            return Err(Error::ProviderAuth(msg));
        }
        let mut results = results.into_inner().unwrap();
        results.sort_by_key(|(i, _)| *i);
        Ok(results.into_iter().map(|(_, f)| f).collect())
    }

    /// Folds fetched items into `kept`, updating counters. Returns how many
    /// new records were kept, stopping once `limit` is reached.
    fn absorb(
        &self,
        query: &str,
        hits: &[SearchHit],
        fetched: Vec<Fetched>,
        kept: &mut Vec<ImageRecord>,
        seen: &mut HashSet<String>,
        report: &mut HarvestReport,
        limit: usize,
    ) -> usize {
        let mut added = 0;
        for (hit, f) in hits.iter().zip(fetched) {
            if added >= limit {
                break;
            }
            match f {
                Fetched::Ok(rec) => {
                    if seen.insert(rec.id.clone()) {
                        kept.push(rec);
                        added += 1;
                    } else {
                        report.duplicates += 1;
                    }
                }
                Fetched::Download(msg) => {
                    log::warn!("download of {} for {query:?} failed: {msg}", hit.locator);
                    report.download_failures += 1;
                }
                Fetched::Rejected(Rejection::Undecodable(msg)) => {
                    log::warn!("{} for {query:?} is not a decodable image: {msg}", hit.locator);
                    report.decode_failures += 1;
                }
                Fetched::Rejected(Rejection::TooSmall { .. }) => report.too_small += 1,
            }
        }
        *report.kept_per_query.entry(query.to_string()).or_insert(0) += added;
        added
    }

    fn finish(&self, mut records: Vec<ImageRecord>, report: HarvestReport) -> Result<Harvest> {
        if records.len() < self.options.min_yield {
            return Err(Error::InsufficientYield(format!(
                "{} images kept, minimum is {}; report: {}",
                records.len(),
                self.options.min_yield,
                serde_json::to_string(&report)?
            )));
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Harvest { records, report })
    }

    /// Up to `per_term` images per term, labeled by the term's polarity.
    /// Positive terms are queried first, each list in order.
    pub fn harvest_term_images(&self, terms: &DiscriminativeTermSet) -> Result<Harvest> {
        let mut report = HarvestReport::default();
        let mut kept = Vec::new();
        let mut seen = HashSet::new();
        let queries = terms
            .positives
            .iter()
            .map(|t| (t.term.as_str(), ClassLabel::Positive))
            .chain(terms.negatives.iter().map(|t| (t.term.as_str(), ClassLabel::Negative)));
        for (term, label) in queries {
            let hits = self.search(term, self.options.per_term, &mut report)?;
            if hits.is_empty() {
                report.kept_per_query.entry(term.to_string()).or_insert(0);
                continue;
            }
            let fetched = self.fetch_all(term, &hits, label)?;
            self.absorb(term, &hits, fetched, &mut kept, &mut seen, &mut report, usize::MAX);
        }
        self.finish(kept, report)
    }

    /// Unlabeled images for one concept phrase, up to `target_count`.
    pub fn harvest_concept_images(&self, query: &str, target_count: usize) -> Result<Harvest> {
        let mut report = HarvestReport::default();
        let mut kept = Vec::new();
        let mut seen = HashSet::new();
        // over-request so failed downloads do not immediately cause a shortfall
        let request = target_count + target_count.div_ceil(4);
        let hits = self.search(query, request, &mut report)?;
        if !hits.is_empty() {
            let fetched = self.fetch_all(query, &hits, ClassLabel::Unlabeled)?;
            self.absorb(query, &hits, fetched, &mut kept, &mut seen, &mut report, target_count);
        }
        if kept.len() < target_count {
            report.shortfall = target_count - kept.len();
            let msg = format!("concept harvest for {query:?} kept {} of {target_count} requested images", kept.len());
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
        self.finish(kept, report)
    }
}

/// Per-term harvest with default options apart from `per_term`.
pub fn harvest_term_images(terms: &DiscriminativeTermSet, per_term: usize, provider: &dyn SearchProvider) -> Result<Harvest> {
    let options = HarvestOptions {
        per_term,
        ..HarvestOptions::default()
    };
    Harvester::new(provider, options).harvest_term_images(terms)
}

pub fn harvest_concept_images(query: &str, target_count: usize, provider: &dyn SearchProvider) -> Result<Harvest> {
    Harvester::new(provider, HarvestOptions::default()).harvest_concept_images(query, target_count)
}
