//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; dotted keys such as
//! `train.alpha` act as sections. Lists are comma separated.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

fn is_key_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-')
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Schema(format!("line {}: expected 'key = value'", i + 1)))?;
            let key = key.trim();
            if key.is_empty() || !key.chars().all(is_key_char) {
                return Err(CliError::Schema(format!("line {}: bad key '{key}'", i + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::Schema(format!("line {}: duplicate key '{key}'", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Schema(format!("{key}: cannot parse '{v}': {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>()
                            .map_err(|e| CliError::Schema(format!("{key}: cannot parse '{s}': {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Sorted `key = value` lines; the hash input for output directories.
    pub fn normalized(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of [`Config::normalized`].
    pub fn content_hash(&self) -> String {
        hash_hex(self.normalized().as_bytes())
    }
}

pub fn hash_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_lists() {
        let c = Config::parse("# header\nname = demo  # trailing\n\ntrain.hidden = 64, 32\ntrain.lr=0.05\n").unwrap();
        assert_eq!(c.raw("name"), Some("demo"));
        assert_eq!(c.get_list::<usize>("train.hidden").unwrap(), Some(vec![64, 32]));
        assert_eq!(c.get::<f64>("train.lr").unwrap(), Some(0.05));
        assert_eq!(c.get_or::<usize>("missing", 7).unwrap(), 7);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Config::parse("just words").is_err());
        assert!(Config::parse("a = 1\na = 2").is_err());
        assert!(Config::parse("bad key = 1").is_err());
        let c = Config::parse("n = ten").unwrap();
        assert!(c.get::<usize>("n").is_err());
    }

    #[test]
    fn hash_ignores_layout() {
        let a = Config::parse("b = 2\na = 1\n").unwrap();
        let b = Config::parse("# comment\na=1\n\n  b =   2").unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 16);
        let c = Config::parse("a = 1\nb = 3").unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }
}
