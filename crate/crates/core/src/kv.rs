//! Minimal `key=value` text documents used for manifests, configs and
//! metric reports.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{RainError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                RainError::Format(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            doc.set(k.trim(), v.trim());
        }
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RainError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| RainError::io(path, e))
    }

    /// Inserts or replaces `key`, keeping first-insertion order.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn parse_key<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| RainError::Format(format!("missing key {key:?}")))?;
        raw.parse()
            .map_err(|_| RainError::Format(format!("bad value for {key:?}: {raw:?}")))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.parse_key(key),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &KvDoc) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    /// Fails on the first key that is not in `known`.
    pub fn reject_unknown(&self, known: &BTreeSet<String>) -> Result<()> {
        for k in self.keys() {
            if !known.contains(k) {
                return Err(RainError::Usage(format!("unknown config key {k:?}")));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for KvDoc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_overrides() {
        let doc = KvDoc::parse("# c\na=1\nb = two\na=3\n").unwrap();
        assert_eq!(doc.get("a"), Some("3"));
        assert_eq!(doc.get("b"), Some("two"));
        assert_eq!(doc.keys().count(), 2);
    }

    #[test]
    fn malformed_line_is_format_error() {
        assert!(matches!(KvDoc::parse("novalue"), Err(RainError::Format(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let doc = KvDoc::parse("a=1\nzz=2").unwrap();
        let known: BTreeSet<String> = ["a".to_string()].into_iter().collect();
        assert!(matches!(doc.reject_unknown(&known), Err(RainError::Usage(_))));
    }
}
