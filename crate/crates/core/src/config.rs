//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Consumers pull keys through [`KvConfig::take`] and finish with
//! [`KvConfig::finish`], which rejects any key nobody asked for.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", no + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            if cfg.entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", no + 1)));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets or overrides a key.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// All keys, sorted.
    pub fn keys(&self) -> impl Iterator<Item = String> + '_ {
        self.entries.keys().cloned()
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present and marks it consumed.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some(raw) = self.entries.get(key) else {
            return Ok(None);
        };
        self.used.insert(key.to_string());
        raw.parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("cannot parse {key} = '{raw}'")))
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Errors on the first key that was never taken.
    pub fn finish(&self) -> Result<()> {
        match self.entries.keys().find(|k| !self.used.contains(*k)) {
            Some(k) => Err(Error::Config(format!("unknown key '{k}'"))),
            None => Ok(()),
        }
    }

    /// Canonical text form, sorted by key.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_take_finish() {
        let mut c = KvConfig::parse("# run\niters = 10\nlr=1e-4  # base\n\nschema = med\n").unwrap();
        assert_eq!(c.take::<u64>("iters").unwrap(), Some(10));
        assert_eq!(c.take::<f64>("lr").unwrap(), Some(1e-4));
        assert!(c.finish().is_err());
        assert_eq!(c.take::<String>("schema").unwrap().as_deref(), Some("med"));
        c.finish().unwrap();
        assert_eq!(c.take_or("batch", 8usize).unwrap(), 8);
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(KvConfig::parse("novalue").is_err());
        assert!(KvConfig::parse("a = 1\na = 2").is_err());
        let mut c = KvConfig::parse("iters = ten").unwrap();
        assert!(c.take::<u64>("iters").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = KvConfig::parse("b = 2\na = 1").unwrap();
        c.set("a", 5);
        let back = KvConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back.raw("a"), Some("5"));
        assert_eq!(back.to_text(), "a = 5\nb = 2\n");
    }
}
