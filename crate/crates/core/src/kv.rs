//! Flat `key=value` text files with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key/value pairs, keeping the line each key came from.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
    source: String,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(
                    source,
                    i + 1,
                    format!("expected key=value, got `{line}`"),
                ));
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::parse(source, i + 1, "empty key"));
            }
            if entries
                .insert(key.to_string(), (v.trim().to_string(), i + 1))
                .is_some()
            {
                return Err(Error::parse(
                    source,
                    i + 1,
                    format!("duplicate key `{key}`"),
                ));
            }
        }
        Ok(KeyValues {
            entries,
            source: source.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), (value.to_string(), 0));
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!(
                    "{}:{line}: invalid value `{v}` for `{key}`",
                    self.source
                ))
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("{}: missing key `{key}`", self.source)))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|s| s.trim().parse::<T>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| {
                    Error::Config(format!(
                        "{}:{line}: invalid list `{v}` for `{key}`",
                        self.source
                    ))
                }),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, (v, _))| format!("{k}={v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv =
            KeyValues::parse("# header\nepochs = 3 # inline\ndilations=1,2,1\n\n", "cfg").unwrap();
        assert_eq!(kv.require::<usize>("epochs").unwrap(), 3);
        assert_eq!(
            kv.get_list::<usize>("dilations").unwrap().unwrap(),
            vec![1, 2, 1]
        );
        assert_eq!(kv.get_or("missing", 7usize).unwrap(), 7);
    }

    #[test]
    fn reports_bad_lines() {
        assert!(matches!(
            KeyValues::parse("a=1\nnonsense\n", "cfg"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(KeyValues::parse("a=1\na=2\n", "cfg").is_err());
        let kv = KeyValues::parse("epochs=abc", "cfg").unwrap();
        assert!(matches!(kv.get::<usize>("epochs"), Err(Error::Config(_))));
    }
}
