//! Flat `key = value` configuration files.
//!
//! Keys carry a section prefix (`seq.`, `data.`, `solver.`, `experiment.`).
//! Lists are comma separated. `#` starts a comment. Consumers take the keys
//! they understand and then call [`KeyValues::finish`], which rejects any key
//! left over so that misspelled keys never fall back to silent defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if kv.contains(key) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            kv.entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _)| k == key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Inserts or replaces a value, keeping the original position of the key.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn set_list<T: ToString>(&mut self, key: &str, values: &[T]) {
        let joined = values.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ");
        self.set(key, joined);
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        let pos = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(pos).1)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| Error::Config(format!("bad value for `{key}`: `{v}`"))),
        }
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<T>().map_err(|_| Error::Config(format!("bad list entry for `{key}`: `{s}`"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// A 3-vector; a single value is broadcast to all three channels.
    pub fn take_triple(&mut self, key: &str) -> Result<Option<[f64; 3]>> {
        match self.take_list::<f64>(key)? {
            None => Ok(None),
            Some(v) if v.len() == 1 => Ok(Some([v[0]; 3])),
            Some(v) if v.len() == 3 => Ok(Some([v[0], v[1], v[2]])),
            Some(v) => Err(Error::Config(format!("`{key}` expects 1 or 3 values, got {}", v.len()))),
        }
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<_> = self.entries.iter().map(|(k, _)| k.as_str()).collect();
            Err(Error::Config(format!("unknown keys: {}", keys.join(", "))))
        }
    }

    pub fn merge(&mut self, other: KeyValues) {
        for (k, v) in other.entries {
            self.set(&k, v);
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Formats a float so that parsing it back yields the identical value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_rejects_leftovers() {
        let text = "# header\nseq.L = 3 # trailing\nseq.tr = 10, 11.5 ,12\n\nsolver.typo = 1\n";
        let mut kv = KeyValues::parse(text).unwrap();
        assert_eq!(kv.take::<usize>("seq.L").unwrap(), Some(3));
        assert_eq!(kv.take_list::<f64>("seq.tr").unwrap(), Some(vec![10.0, 11.5, 12.0]));
        let err = kv.finish().unwrap_err();
        assert!(err.to_string().contains("solver.typo"));
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse(" = 2").is_err());
    }

    #[test]
    fn triple_broadcasts_scalar() {
        let mut kv = KeyValues::parse("a = 2\nb = 1,2,3\nc = 1,2").unwrap();
        assert_eq!(kv.take_triple("a").unwrap(), Some([2.0; 3]));
        assert_eq!(kv.take_triple("b").unwrap(), Some([1.0, 2.0, 3.0]));
        assert!(kv.take_triple("c").is_err());
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1e-300, 12.345678901234567, -3.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
