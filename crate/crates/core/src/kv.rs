//! Flat `key=value` text used for configs and manifests.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered `key=value` pairs. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap(BTreeMap<String, String>);

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.0.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    /// Parses `key` if present; `None` when absent.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("{key}={v}: {e}")))
            })
            .transpose()
    }

    /// Overwrites `slot` with the parsed value of `key` when present.
    pub fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// Canonical text form: sorted `key=value` lines.
    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
