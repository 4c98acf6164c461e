use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ProviderError, SearchHit, SearchProvider};

/// Environment variable holding the search API credential.
pub const SEARCH_KEY_ENV: &str = "CONCEPT_CANVAS_SEARCH_KEY";

/// Adapter description for a JSON image-search API.
///
/// `endpoint` may contain `{query}` (percent-encoded) and `{n}`. The response
/// array is found at `results_pointer` (a JSON pointer) and each element's
/// image URL under `url_field`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpProviderConfig {
    pub name: String,
    pub endpoint: String,
    pub results_pointer: String,
    pub url_field: String,
    pub auth_header: String,
    pub auth_prefix: String,
    pub rate_limit: Option<f64>,
    pub timeout_secs: u64,
}

impl Default for HttpProviderConfig {
    fn default() -> Self {
        HttpProviderConfig {
            name: "http".into(),
            endpoint: String::new(),
            results_pointer: "/results".into(),
            url_field: "url".into(),
            auth_header: "Authorization".into(),
            auth_prefix: "Bearer ".into(),
            rate_limit: Some(5.0),
            timeout_secs: 30,
        }
    }
}

pub struct HttpSearchProvider {
    config: HttpProviderConfig,
    key: Option<String>,
    agent: ureq::Agent,
}

fn percent_encode(s: &str) -> String {
    let mut out = String::new();
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

fn classify(status: u16, url: &str) -> ProviderError {
    let msg = format!("HTTP {status} from {url}");
    match status {
        401 | 403 => ProviderError::Auth(msg),
        408 | 429 | 500..=599 => ProviderError::Transient(msg),
        _ => ProviderError::Permanent(msg),
    }
}

impl HttpSearchProvider {
    pub fn new(config: HttpProviderConfig, key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpSearchProvider { config, key, agent }
    }

    /// Reads the credential from [`SEARCH_KEY_ENV`].
    pub fn from_env(config: HttpProviderConfig) -> Self {
        let key = std::env::var(SEARCH_KEY_ENV).ok().filter(|k| !k.is_empty());
        HttpSearchProvider::new(config, key)
    }

    fn get(&self, url: &str, authed: bool) -> Result<Vec<u8>, ProviderError> {
        let mut req = self.agent.get(url);
        if authed {
            if let Some(key) = &self.key {
                req = req.header(self.config.auth_header.as_str(), format!("{}{key}", self.config.auth_prefix));
            }
        }
        let mut resp = req.call().map_err(|e| ProviderError::Transient(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(classify(status, url));
        }
        resp.body_mut()
            .with_config()
            .limit(64 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| ProviderError::Transient(format!("{url}: {e}")))
    }
}

impl SearchProvider for HttpSearchProvider {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn rate_limit(&self) -> Option<f64> {
        self.config.rate_limit
    }

    fn search(&self, query: &str, n: usize) -> Result<Vec<SearchHit>, ProviderError> {
        let url = self
            .config
            .endpoint
            .replace("{query}", &percent_encode(query))
            .replace("{n}", &n.to_string());
        let body = self.get(&url, true)?;
        let json: serde_json::Value =
            serde_json::from_slice(&body).map_err(|e| ProviderError::Permanent(format!("bad search response: {e}")))?;
        let items = json
            .pointer(&self.config.results_pointer)
            .and_then(|v| v.as_array())
            .ok_or_else(|| ProviderError::Permanent(format!("no array at {}", self.config.results_pointer)))?;
        let mut seen = std::collections::HashSet::new();
        Ok(items
            .iter()
            .filter_map(|item| item.get(&self.config.url_field).and_then(|u| u.as_str()))
            .filter(|u| seen.insert(u.to_string()))
            .take(n)
            .map(|u| SearchHit { locator: u.to_string() })
            .collect())
    }

    fn fetch(&self, hit: &SearchHit) -> Result<Vec<u8>, ProviderError> {
        self.get(&hit.locator, false)
    }
}
