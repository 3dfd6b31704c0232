//! Flat `key = value` text documents with `#` comments.
//!
//! Used for network specs (also embedded in checkpoints) and training configs.
//! Keys must be unique; [`KvDoc::finish`] rejects any key nobody asked for.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    line: usize,
    used: bool,
}

#[derive(Debug, Clone, Default)]
pub struct KvDoc {
    entries: Vec<Entry>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", i + 1)));
            }
            if entries.iter().any(|e| e.key == key) {
                return Err(Error::config(format!(
                    "line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
            entries.push(Entry {
                key: key.to_string(),
                value: v.trim().to_string(),
                line: i + 1,
                used: false,
            });
        }
        Ok(KvDoc { entries })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.iter().any(|e| e.key == key)
    }

    /// Raw value of `key`, marking it consumed.
    pub fn take(&mut self, key: &str) -> Option<String> {
        let e = self.entries.iter_mut().find(|e| e.key == key)?;
        e.used = true;
        Some(e.value.clone())
    }

    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let line = self.entries.iter().find(|e| e.key == key).map(|e| e.line);
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::config(format!(
                    "line {}: cannot parse `{v}` for `{key}`",
                    line.unwrap_or(0)
                ))
            }),
        }
    }

    pub fn require(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::config(format!("missing key `{key}`")))
    }

    /// Errors if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().find(|e| !e.used) {
            Some(e) => Err(Error::config(format!(
                "line {}: unknown key `{}`",
                e.line, e.key
            ))),
            None => Ok(()),
        }
    }
}

/// Parses a comma-separated list.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| {
            let s = s.trim();
            s.parse()
                .map_err(|_| Error::config(format!("`{key}`: cannot parse list item `{s}`")))
        })
        .collect()
}
