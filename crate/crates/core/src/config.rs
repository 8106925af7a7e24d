//! Line-oriented `key = value` configuration files.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("config key {key}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("config key {key}: {msg}")]
    Invalid { key: String, msg: String },
}

/// Parsed key/value pairs. `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KeyValues { entries })
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Typed lookup; `None` when the key is absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError::Value {
                key: key.to_string(),
                value: v.clone(),
            }),
        }
    }

    /// Overwrites `*slot` when `key` is present.
    pub fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on any key outside `known` that starts with `prefix`.
    pub fn check_known(&self, prefix: &str, known: &[&str]) -> Result<(), ConfigError> {
        for k in self.entries.keys() {
            if let Some(rest) = k.strip_prefix(prefix) {
                if !known.contains(&rest) {
                    return Err(ConfigError::UnknownKey(k.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = KeyValues::parse("# header\nbeta_max = 0.5\n\n k_crop=8 # bars\n").unwrap();
        assert_eq!(kv.get::<f64>("beta_max").unwrap(), Some(0.5));
        assert_eq!(kv.get::<usize>("k_crop").unwrap(), Some(8));
        assert_eq!(kv.get::<usize>("missing").unwrap(), None);
        assert!(kv.get::<usize>("beta_max").is_err());
    }

    #[test]
    fn rejects_bad_lines_and_unknown_keys() {
        assert_eq!(KeyValues::parse("a = 1\noops\n"), Err(ConfigError::Syntax { line: 2 }));
        let kv = KeyValues::parse("train.steps = 3\ntrain.bogus = 1\nmodel.d_model = 8").unwrap();
        assert_eq!(
            kv.check_known("train.", &["steps"]),
            Err(ConfigError::UnknownKey("train.bogus".into()))
        );
        assert!(kv.check_known("model.", &["d_model"]).is_ok());
    }
}
