//! Flat `key = value` configuration files with dotted section prefixes.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Keys are case-sensitive. Typed getters report the offending key in their
//! error message.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|s| s.as_str())
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>> {
        self.typed(key, "number")
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>> {
        self.typed(key, "integer")
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>> {
        self.typed(key, "integer")
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>> {
        self.typed(key, "boolean")
    }

    /// Comma-separated list of numbers, e.g. `90.36,35.67`.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .split(',')
                .map(|tok| {
                    tok.trim().parse().map_err(|_| {
                        Error::Argument(format!("config key `{key}`: bad number `{tok}`"))
                    })
                })
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    /// Comma-separated list of 1-based indices, e.g. `3,5,9,14,18`.
    pub fn index_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .split(',')
                .map(|tok| {
                    tok.trim().parse().map_err(|_| {
                        Error::Argument(format!("config key `{key}`: bad index `{tok}`"))
                    })
                })
                .collect::<Result<Vec<usize>>>()
                .map(Some),
        }
    }

    fn typed<T: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s.parse().map(Some).map_err(|_| {
                Error::Argument(format!("config key `{key}`: expected {kind}, got `{s}`"))
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blanks() {
        let c = Config::parse("# header\ngrid.hx = 0.5\n\nmethod = afm # inline\n").unwrap();
        assert_eq!(c.f64("grid.hx").unwrap(), Some(0.5));
        assert_eq!(c.get("method"), Some("afm"));
        assert_eq!(c.get("missing"), None);
    }

    #[test]
    fn bad_syntax_reports_line() {
        match Config::parse("a = 1\nnonsense\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn typed_getter_names_key() {
        let c = Config::parse("n = abc\n").unwrap();
        let err = c.usize("n").unwrap_err().to_string();
        assert!(err.contains("`n`"), "{err}");
    }

    #[test]
    fn lists_parse() {
        let c = Config::parse("xi = 90.36, 35.67\nreceivers = 3,5,9\n").unwrap();
        assert_eq!(c.f64_list("xi").unwrap(), Some(vec![90.36, 35.67]));
        assert_eq!(c.index_list("receivers").unwrap(), Some(vec![3, 5, 9]));
    }
}
