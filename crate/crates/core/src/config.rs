//! Key = value run configuration.
//!
//! Precedence is: explicit command-line flags, then the config file, then
//! built-in defaults. Every key a run actually consumed is recorded with its
//! final value, so the CLI can write a "resolved" sidecar that makes the run
//! reproducible from the sidecar alone.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::format(
                    "config",
                    format!("line {}: expected 'key = value', got '{raw}'", lineno + 1),
                ));
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::format(
                    "config",
                    format!("line {}: empty key", lineno + 1),
                ));
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::format(
                    "config",
                    format!("line {}: duplicate key '{key}'", lineno + 1),
                ));
            }
        }
        Ok(KvConfig { values, resolved: BTreeMap::new() })
    }

    /// Override from a command-line flag; wins over the file.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Typed lookup with a default; records the final value as consumed.
    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.values.get(key) {
            Some(raw) => {
                let parsed: T = raw.parse().map_err(|e| {
                    Error::format("config", format!("key '{key}': cannot parse '{raw}': {e}"))
                })?;
                self.resolved.insert(key.to_string(), raw.clone());
                Ok(parsed)
            }
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn get_str(&mut self, key: &str, default: &str) -> String {
        let value = self.values.get(key).cloned().unwrap_or_else(|| default.to_string());
        self.resolved.insert(key.to_string(), value.clone());
        value
    }

    /// Keys present in the file or flags but never consumed by the run; a
    /// typo in a config file should be loud, not silent.
    pub fn unused_keys(&self) -> Vec<&str> {
        self.values
            .keys()
            .filter(|k| !self.resolved.contains_key(*k))
            .map(|k| k.as_str())
            .collect()
    }

    /// Deterministic "key = value" rendering of every consumed key.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write_resolved(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.resolved_text()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_spacing() {
        let cfg = KvConfig::parse(
            "# a comment\n\nbatch_size = 32\nlearning_rate=1e-3\n  loss =  edge-sobel  \n",
        )
        .unwrap();
        let mut cfg = cfg;
        assert_eq!(cfg.get::<usize>("batch_size", 64).unwrap(), 32);
        assert_eq!(cfg.get::<f64>("learning_rate", 1e-4).unwrap(), 1e-3);
        assert_eq!(cfg.get_str("loss", "mse"), "edge-sobel");
    }

    #[test]
    fn flag_overrides_file_overrides_default() {
        let mut cfg = KvConfig::parse("epochs = 10\n").unwrap();
        cfg.set("epochs", 20u32);
        assert_eq!(cfg.get::<u32>("epochs", 5).unwrap(), 20);
        assert_eq!(cfg.get::<u32>("seed", 5).unwrap(), 5);
    }

    #[test]
    fn malformed_lines_and_duplicates_error() {
        assert!(KvConfig::parse("no equals sign\n").is_err());
        assert!(KvConfig::parse("= value\n").is_err());
        assert!(KvConfig::parse("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn parse_failure_names_the_key() {
        let mut cfg = KvConfig::parse("batch_size = not-a-number\n").unwrap();
        let err = cfg.get::<usize>("batch_size", 1).unwrap_err().to_string();
        assert!(err.contains("batch_size"), "error was: {err}");
    }

    #[test]
    fn resolved_text_is_sorted_and_complete() {
        let mut cfg = KvConfig::parse("zeta = 1\nalpha = 2\n").unwrap();
        let _ = cfg.get::<u32>("zeta", 0).unwrap();
        let _ = cfg.get::<u32>("alpha", 0).unwrap();
        let _ = cfg.get::<u32>("mid", 7).unwrap();
        assert_eq!(cfg.resolved_text(), "alpha = 2\nmid = 7\nzeta = 1\n");
    }

    #[test]
    fn unused_keys_are_reported() {
        let mut cfg = KvConfig::parse("used = 1\ntypo_key = 2\n").unwrap();
        let _ = cfg.get::<u32>("used", 0).unwrap();
        assert_eq!(cfg.unused_keys(), vec!["typo_key"]);
    }
}
