//! Educational-domain category file and host classification.
//!
//! The category file is a newline-delimited domain list (one entry per
//! line, `#` comments allowed). Queries default to label-boundary suffix
//! matching, the standard blocklist semantics: a host matches an entry iff
//! it equals the entry or ends with `"." + entry`. A raw-containment mode
//! is kept behind a flag for compatibility experiments; it trades label
//! boundaries for substring scans and admits mid-label false positives.

use std::collections::HashSet;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read category file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// How a host is tested against the category list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMode {
    /// Label-boundary suffix match.
    #[default]
    Suffix,
    /// Raw substring containment in either direction: the host occurring
    /// inside the concatenated entries, or an entry occurring inside the
    /// host.
    Substring,
}

impl std::str::FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "suffix" => Ok(MatchMode::Suffix),
            "substring" => Ok(MatchMode::Substring),
            other => Err(format!(
                "unknown match mode {other:?} (expected suffix or substring)"
            )),
        }
    }
}

/// The set of educational domains, queryable by host.
///
/// Immutable after load; reloading builds a fresh index.
#[derive(Debug, Clone)]
pub struct CategoryIndex {
    domains: HashSet<String>,
    /// Entries run together in sorted order, for substring-mode scans.
    concatenated: String,
    source_path: PathBuf,
    skipped: usize,
}

impl CategoryIndex {
    /// Load a newline-delimited domain file.
    ///
    /// Entries are trimmed, lowercased, stripped of stray dots, and
    /// deduplicated. Empty lines and `#` comments are ignored; entries
    /// containing whitespace or `/` are skipped and counted.
    pub fn load(path: &Path) -> Result<Self, LoadError> {
        let content = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_content(&content, path.to_path_buf()))
    }

    /// Build an index from in-memory entries (tests and generators).
    pub fn from_entries<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let content: String = entries
            .into_iter()
            .map(|e| format!("{}\n", e.as_ref()))
            .collect();
        Self::from_content(&content, PathBuf::from("<memory>"))
    }

    fn from_content(content: &str, source_path: PathBuf) -> Self {
        let mut domains = HashSet::new();
        let mut skipped = 0;
        for line in content.lines() {
            let entry = line.trim();
            if entry.is_empty() || entry.starts_with('#') {
                continue;
            }
            if entry.contains(char::is_whitespace) || entry.contains('/') {
                skipped += 1;
                continue;
            }
            let normalized = entry.trim_matches('.').to_ascii_lowercase();
            if normalized.is_empty() {
                skipped += 1;
                continue;
            }
            domains.insert(normalized);
        }

        let mut sorted: Vec<&str> = domains.iter().map(String::as_str).collect();
        sorted.sort_unstable();
        let concatenated = sorted.concat();

        Self {
            domains,
            concatenated,
            source_path,
            skipped,
        }
    }

    /// Number of distinct stored domains.
    pub fn entry_count(&self) -> usize {
        self.domains.len()
    }

    /// Malformed entries skipped during load.
    pub fn skipped_entries(&self) -> usize {
        self.skipped
    }

    pub fn source_path(&self) -> &Path {
        &self.source_path
    }

    /// Exact-entry membership test.
    pub fn contains(&self, domain: &str) -> bool {
        self.domains.contains(domain)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.domains.iter().map(String::as_str)
    }

    /// Whether `host` (normalized, as produced by host extraction) counts
    /// as educational under the given match mode.
    pub fn is_educational(&self, host: &str, mode: MatchMode) -> bool {
        match mode {
            MatchMode::Suffix => {
                // Walk the label-boundary suffixes of the host; cost depends
                // on the host's label count, not on the index size.
                let mut candidate = host;
                loop {
                    if self.domains.contains(candidate) {
                        return true;
                    }
                    match candidate.find('.') {
                        Some(dot) => candidate = &candidate[dot + 1..],
                        None => return false,
                    }
                }
            }
            MatchMode::Substring => {
                self.concatenated.contains(host)
                    || self.domains.iter().any(|d| host.contains(d.as_str()))
            }
        }
    }
}
