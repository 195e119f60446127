//! Minimal `key = value` text format shared by the gateway config file and
//! the job manifest inside uploaded archives.
//!
//! * One pair per line; whitespace around key and value is trimmed.
//! * Blank lines and lines starting with `#` are ignored.
//! * A value may be wrapped in double quotes, which are stripped.
//! * Keys may appear only once.

use std::collections::BTreeMap;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("unknown key `{0}`")]
    Unknown(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<KvMap, KvError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(KvError::Malformed { line: idx + 1 })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(KvError::Malformed { line: idx + 1 });
            }
            let mut value = value.trim();
            if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
                value = &value[1..value.len() - 1];
            }
            if entries.insert(key.to_owned(), value.to_owned()).is_some() {
                return Err(KvError::Duplicate {
                    line: idx + 1,
                    key: key.to_owned(),
                });
            }
        }
        Ok(KvMap { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, KvError> {
        self.get(key)
            .ok_or_else(|| KvError::Missing(key.to_owned()))
    }

    /// Parses `key` if present.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        self.get(key)
            .map(|v| {
                v.parse().map_err(|_| KvError::BadValue {
                    key: key.to_owned(),
                    value: v.to_owned(),
                })
            })
            .transpose()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Fails on the first key not in `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<(), KvError> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(KvError::Unknown(k.to_owned())),
            None => Ok(()),
        }
    }
}
