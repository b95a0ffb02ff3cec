//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may carry a
//! section prefix (`gen.`, `weak.`, `main.`, `sweep.`). Every key must be
//! consumed by a reader; leftovers are reported as unknown.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(i + 1, "empty key"));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::config(key, format!("defined twice (line {})", i + 1)));
            }
        }
        Ok(Self {
            entries,
            used: RefCell::default(),
        })
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self {
            entries: pairs
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            used: RefCell::default(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(key, format!("cannot parse `{v}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::config(key, format!("cannot parse list item `{s}`")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
        }
    }

    /// Fails on the first key no reader asked for.
    pub fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.keys().find(|k| !used.contains(*k)) {
            Some(k) => Err(Error::config(k.as_str(), "unknown key")),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_tracks_keys() {
        let kv = KeyValues::parse("# comment\n\ngen.k = 3\nsweep.values = 0.1, 0.5,0.9\nflag=true\n").unwrap();
        assert_eq!(kv.get::<usize>("gen.k").unwrap(), Some(3));
        assert_eq!(kv.get_list::<f64>("sweep.values").unwrap(), Some(vec![0.1, 0.5, 0.9]));
        assert!(matches!(kv.reject_unknown(), Err(Error::InvalidConfig { key, .. }) if key == "flag"));
        assert!(kv.get_bool("flag", false).unwrap());
        kv.reject_unknown().unwrap();
    }

    #[test]
    fn errors_name_the_key() {
        let kv = KeyValues::parse("gen.p_cheat = high").unwrap();
        match kv.get::<f64>("gen.p_cheat") {
            Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "gen.p_cheat"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(KeyValues::parse("novalue"), Err(Error::Parse { line: 1, .. })));
        assert!(KeyValues::parse("a=1\na=2").is_err());
    }
}
