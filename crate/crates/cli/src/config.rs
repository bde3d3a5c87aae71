//! Experiment configuration: a plain `key = value` file merged with command-line flags.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! key = value      # trailing comments are allowed
//! ```
//!
//! Keys are lowercase letters, digits and `-`. Blank lines are ignored. A key may appear
//! once per file. Flags override file entries; keys unknown to the command are rejected.

use std::collections::BTreeMap;
use std::fmt;

/// Where a setting came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Line number in the config file (1-based).
    File(usize),
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::File(line) => write!(f, "config line {line}"),
            Source::Flag => f.write_str("command line"),
        }
    }
}

/// Validation failure with its location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub source: Option<Source>,
    pub msg: String,
}

impl ConfigError {
    pub fn new(source: Option<Source>, msg: impl Into<String>) -> Self {
        ConfigError { source, msg: msg.into() }
    }

    fn at_line(line: usize, msg: impl Into<String>) -> Self {
        Self::new(Some(Source::File(line)), msg)
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.source {
            Some(s) => write!(f, "{s}: {}", self.msg),
            None => f.write_str(&self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

/// One parsed `key = value` entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.starts_with(|c: char| c.is_ascii_lowercase())
        && key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
}

/// Parse config text into entries, rejecting malformed lines and duplicate keys.
pub fn parse_config(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| ConfigError::at_line(line, format!("expected 'key = value', got '{content}'")))?;
        let (key, value) = (key.trim(), value.trim());
        if !valid_key(key) {
            return Err(ConfigError::at_line(line, format!("invalid key '{key}'")));
        }
        if value.is_empty() {
            return Err(ConfigError::at_line(line, format!("missing value for '{key}'")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(ConfigError::at_line(line, format!("duplicate key '{key}' (first set on line {})", prev.line)));
        }
        out.push(Entry { line, key: key.to_string(), value: value.to_string() });
    }
    Ok(out)
}

/// A key accepted by a command.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub help: &'static str,
}

/// Merged, validated settings of one command.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, (String, Source)>,
}

impl Settings {
    /// Merge file entries and flags (flags win) after checking every key against `keys`.
    pub fn merge(
        command: &str,
        keys: &[KeySpec],
        file: &[Entry],
        flags: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let known = |k: &str| keys.iter().any(|s| s.name == k);
        let mut values = BTreeMap::new();
        for e in file {
            if !known(&e.key) {
                return Err(ConfigError::at_line(e.line, format!("unknown key '{}' for '{command}'", e.key)));
            }
            values.insert(e.key.clone(), (e.value.clone(), Source::File(e.line)));
        }
        for (k, v) in flags {
            if !known(k) {
                return Err(ConfigError::new(Some(Source::Flag), format!("unknown key '{k}' for '{command}'")));
            }
            values.insert(k.clone(), (v.clone(), Source::Flag));
        }
        Ok(Settings { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    fn source(&self, key: &str) -> Option<Source> {
        self.values.get(key).map(|(_, s)| *s)
    }

    fn error(&self, key: &str, msg: String) -> ConfigError {
        ConfigError::new(self.source(key), format!("'{key}': {msg}"))
    }

    /// Canonical `key=value` lines, sorted, excluding `skip`; input to the config hash.
    pub fn canonical(&self, skip: &[&str]) -> String {
        self.values
            .iter()
            .filter(|(k, _)| !skip.contains(&k.as_str()))
            .map(|(k, (v, _))| format!("{k}={v}\n"))
            .collect()
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(self.error(key, format!("expected a finite number, got '{v}'"))),
            },
        }
    }

    pub fn f64_required(&self, key: &str) -> Result<f64, ConfigError> {
        if self.raw(key).is_none() {
            return Err(ConfigError::new(None, format!("missing required key '{key}'")));
        }
        self.f64_or(key, 0.0)
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => {
                v.parse::<usize>().map_err(|_| self.error(key, format!("expected a non-negative integer, got '{v}'")))
            }
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => {
                v.parse::<u64>().map_err(|_| self.error(key, format!("expected a non-negative integer, got '{v}'")))
            }
        }
    }

    /// One of `choices`, or `default`.
    pub fn choice_or(
        &self,
        key: &str,
        choices: &[&'static str],
        default: &'static str,
    ) -> Result<&'static str, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => choices
                .iter()
                .copied()
                .find(|c| *c == v)
                .ok_or_else(|| self.error(key, format!("expected one of {}, got '{v}'", choices.join(", ")))),
        }
    }

    /// Comma-separated numbers.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|s| match s.trim().parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(self.error(key, format!("expected comma-separated numbers, got '{}'", s.trim()))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Interval list `a:b,c:d`.
    pub fn intervals(&self, key: &str) -> Result<Option<Vec<(f64, f64)>>, ConfigError> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|s| {
                let bad = || self.error(key, format!("expected intervals 'a:b,c:d', got '{}'", s.trim()));
                let (a, b) = s.trim().split_once(':').ok_or_else(bad)?;
                match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
                    (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() && a < b => Ok((a, b)),
                    _ => Err(bad()),
                }
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Check a value with `pred`, naming the requirement on failure.
    pub fn ensure(&self, key: &str, ok: bool, requirement: &str) -> Result<(), ConfigError> {
        if ok {
            Ok(())
        } else {
            Err(self.error(key, requirement.to_string()))
        }
    }
}
