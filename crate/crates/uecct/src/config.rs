//! Flat key-value run-configuration text with `[section]` headers.
//!
//! The format carries resolved run settings and manifests:
//!
//! ```text
//! # comment
//! key = value            # keys before any header live in the global section
//! [train]
//! epochs = 50
//! ```
//!
//! Keys and values are trimmed; the first `=` splits them, so values may
//! contain `=`. Later duplicates win. Serialization is deterministic
//! (sections and keys sorted), so equal configurations produce byte-identical
//! text. The parser returns errors instead of panicking on any input.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed configuration: section name -> key -> value. The global section is
/// the empty string.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RunConfig {
    pub fn new() -> RunConfig {
        RunConfig::default()
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::new();
        let mut current = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let Some(name) = inner.strip_suffix(']') else {
                    return Err(Error::config(format!(
                        "line {}: section header '{line}' is missing ']'",
                        idx + 1
                    )));
                };
                let name = name.trim();
                if name.is_empty() || !name.chars().all(is_name_char) {
                    return Err(Error::config(format!(
                        "line {}: invalid section name '{name}'",
                        idx + 1
                    )));
                }
                current = name.to_string();
            } else if let Some((key, value)) = line.split_once('=') {
                let key = key.trim();
                if key.is_empty() || !key.chars().all(is_name_char) {
                    return Err(Error::config(format!("line {}: invalid key '{key}'", idx + 1)));
                }
                cfg.set(&current, key, value.trim());
            } else {
                return Err(Error::config(format!(
                    "line {}: expected 'key = value' or '[section]', got '{line}'",
                    idx + 1
                )));
            }
        }
        Ok(cfg)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Display) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    /// Apply one `section.key=value` override (global keys omit the section:
    /// `key=value`).
    pub fn apply_override(&mut self, dotted: &str) -> Result<()> {
        let Some((path, value)) = dotted.split_once('=') else {
            return Err(Error::config(format!(
                "override '{dotted}' is not of the form section.key=value"
            )));
        };
        let path = path.trim();
        let (section, key) = match path.split_once('.') {
            Some((s, k)) => (s.trim(), k.trim()),
            None => ("", path),
        };
        if key.is_empty() || !key.chars().all(is_name_char) {
            return Err(Error::config(format!("override '{dotted}' has an invalid key")));
        }
        if !section.is_empty() && !section.chars().all(is_name_char) {
            return Err(Error::config(format!(
                "override '{dotted}' has an invalid section"
            )));
        }
        self.set(section, key, value.trim());
        Ok(())
    }

    /// Typed lookup; absent keys are Ok(None), malformed values are config
    /// errors naming the offending key.
    pub fn get_parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(text) => text.parse::<T>().map(Some).map_err(|_| {
                Error::config(format!(
                    "cannot parse [{section}] {key} = '{text}' as {}",
                    std::any::type_name::<T>()
                ))
            }),
        }
    }

    /// Section names in sorted order.
    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }

    /// Keys of one section in sorted order.
    pub fn keys(&self, section: &str) -> impl Iterator<Item = &str> {
        self.sections
            .get(section)
            .into_iter()
            .flat_map(|s| s.keys().map(String::as_str))
    }

    /// Deterministic rendering: the global section first, then named sections
    /// and keys in sorted order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (section, keys) in &self.sections {
            if !section.is_empty() {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
            }
            for (key, value) in keys {
                out.push_str(&format!("{key} = {value}\n"));
            }
        }
        out
    }
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.'
}
