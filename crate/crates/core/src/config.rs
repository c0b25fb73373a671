//! Flat `key = value` configuration files.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored. Keys are
//! case-sensitive and may appear once.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed entries, ordered by key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(pos) => &line[..pos],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                row: k + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    row: k + 1,
                    message: "empty key".into(),
                });
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Parse {
                    row: k + 1,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Sets or replaces a key, e.g. from a command-line flag.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` with `FromStr`, if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    /// Parses a comma-separated list, if present.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>()
                            .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
                    })
                    .collect()
            })
            .transpose()
    }
}

/// Parses `a,b` into a pair.
pub fn parse_pair(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("expected a range `a,b`, got {s:?}"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let a = a.trim().parse().map_err(|_| bad())?;
    let b = b.trim().parse().map_err(|_| bad())?;
    Ok((a, b))
}

/// Parses `a,b;c,d;...` into pairs.
pub fn parse_pairs(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(parse_pair)
        .collect()
}
