//! Plain `key=value` config files.
//!
//! One entry per line, `#` starts a comment, keys may repeat (`relation=`
//! lines do). Every consumer reads the keys it knows and ignores the rest, so
//! schema, training and evaluation settings can share one file.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Last value wins for scalar keys.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| Error::Config {
                key: key.to_string(),
                message: format!("`{v}`: {e}"),
            }),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.retain(|(k, _)| k != key);
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Overlays `other` on top of `self` (other's scalar keys win).
    pub fn overlay(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.push((k.clone(), v.clone()));
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_repeats_and_last_wins() {
        let cfg = KvConfig::parse(
            "# schema\nfields=user,item\nrelation=user,item\nrelation=item,user\nlr=0.1\nlr = 0.2 # override\n",
        )
        .unwrap();
        assert_eq!(cfg.get("lr"), Some("0.2"));
        assert_eq!(cfg.get_all("relation").count(), 2);
        assert_eq!(cfg.parsed::<f64>("lr").unwrap(), Some(0.2));
        assert!(cfg.parsed::<u32>("lr").is_err());
    }

    #[test]
    fn missing_equals_names_the_line() {
        let err = KvConfig::parse("a=1\nbogus\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
