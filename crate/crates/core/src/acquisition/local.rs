use std::fs;
use std::path::{Path, PathBuf};

use super::{ProviderError, SearchHit, SearchProvider};

/// Lowercase, with every run of non-alphanumeric characters collapsed to `-`.
pub fn slug(query: &str) -> String {
    let mut out = String::new();
    for c in query.to_lowercase().chars() {
        if c.is_alphanumeric() {
            out.push(c);
        } else if !out.is_empty() && !out.ends_with('-') {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

/// Offline provider reading `<root>/<query-slug>/*.{png,jpg,jpeg}` in file
/// name order.
#[derive(Debug, Clone)]
pub struct LocalDirProvider {
    root: PathBuf,
}

impl LocalDirProvider {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        LocalDirProvider { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl SearchProvider for LocalDirProvider {
    fn name(&self) -> &str {
        "local"
    }

    fn search(&self, query: &str, n: usize) -> Result<Vec<SearchHit>, ProviderError> {
        let dir = self.root.join(slug(query));
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(ProviderError::Permanent(format!("{}: {e}", dir.display()))),
        };
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        Ok(files
            .into_iter()
            .take(n)
            .map(|p| SearchHit {
                locator: p.to_string_lossy().into_owned(),
            })
            .collect())
    }

    fn fetch(&self, hit: &SearchHit) -> Result<Vec<u8>, ProviderError> {
        fs::read(&hit.locator).map_err(|e| ProviderError::Permanent(format!("{}: {e}", hit.locator)))
    }
}
