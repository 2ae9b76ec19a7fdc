//! Flat `key = value` documents used for run configuration and
//! hyperparameter sets.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! a repeated key is a parse error.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    entries: BTreeMap<String, String>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse(format!("line {}: expected 'key = value'", lineno + 1)));
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", lineno + 1)));
            }
            if doc.entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
        }
        Ok(doc)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    /// Stores a float with round-trip precision.
    pub fn set_f64(&mut self, key: impl Into<String>, value: f64) {
        self.entries.insert(key.into(), format!("{value:?}"));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Parse(format!("missing key '{key}'")))
    }

    pub fn parse_opt<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Parse(format!("key '{key}': cannot parse '{v}': {e}"))),
        }
    }

    pub fn parse_req<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.parse_opt(key)?
            .ok_or_else(|| Error::Parse(format!("missing key '{key}'")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn extend(&mut self, other: &KvDoc) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}

impl fmt::Display for KvDoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let doc = KvDoc::parse("# header\n\n a = 1 \nb=two\n").unwrap();
        assert_eq!(doc.get("a"), Some("1"));
        assert_eq!(doc.get("b"), Some("two"));
        assert_eq!(doc.parse_req::<i32>("a").unwrap(), 1);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(KvDoc::parse("a = 1\na = 2").is_err());
        assert!(KvDoc::parse("no equals sign").is_err());
        assert!(KvDoc::parse("a = x").unwrap().parse_req::<f64>("a").is_err());
    }

    #[test]
    fn display_round_trips() {
        let mut doc = KvDoc::new();
        doc.set_f64("x", 0.1 + 0.2);
        doc.set("name", "2Mat");
        let back = KvDoc::parse(&doc.to_string()).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.parse_req::<f64>("x").unwrap(), 0.1 + 0.2);
    }
}
