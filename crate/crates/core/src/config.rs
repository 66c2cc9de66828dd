//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Later keys replace
//! earlier ones. Consumers pull typed values with [`KvConfig::take`] and
//! finish with [`KvConfig::finish`], which rejects unknown keys.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            values.insert(k.to_owned(), v.trim().to_owned());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_owned(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Removes and parses `key`, if present.
    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {raw}: {e}"))),
        }
    }

    /// Removes `key` and parses it as a comma-separated list.
    pub fn take_list<V: FromStr>(&mut self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some(raw) if raw.is_empty() => Ok(Some(Vec::new())),
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| Error::Config(format!("{key} = {raw}: {e}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    pub fn take_into<V: FromStr>(&mut self, key: &str, slot: &mut V) -> Result<()>
    where
        V::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Keeps only keys with `prefix`, stripping the prefix.
    pub fn section(&self, prefix: &str) -> KvConfig {
        let values = self
            .values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_owned(), v.clone())))
            .collect();
        KvConfig { values }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Errors if any key was left unconsumed.
    pub fn finish(self) -> Result<()> {
        if self.values.is_empty() {
            Ok(())
        } else {
            let keys: Vec<_> = self.values.into_keys().collect();
            Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
        }
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn parse_bool(raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("expected a boolean, got `{raw}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_consumes() {
        let mut c = KvConfig::parse("# comment\nepochs = 3\n\nmargin=0.2\nlist = 1, 2,3\n").unwrap();
        assert_eq!(c.take::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(c.take::<f64>("margin").unwrap(), Some(0.2));
        assert_eq!(c.take_list::<u32>("list").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(c.take::<f64>("absent").unwrap(), None);
        c.finish().unwrap();
    }

    #[test]
    fn reports_bad_lines_and_leftovers() {
        assert!(KvConfig::parse("novalue").is_err());
        let mut c = KvConfig::parse("epochs = x\nstray = 1").unwrap();
        assert!(c.take::<usize>("epochs").is_err());
        let err = c.finish().unwrap_err().to_string();
        assert!(err.contains("stray"));
    }

    #[test]
    fn text_round_trip() {
        let c = KvConfig::parse("b = 2\na = 1\n").unwrap();
        assert_eq!(KvConfig::parse(&c.to_text()).unwrap(), c);
    }
}
