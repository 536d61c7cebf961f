//! Flat `key = value` config files.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! win, and `--set KEY=VALUE` flags are applied after the file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use orderhint::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.into(),
                line: i + 1,
                reason: "expected `key = value`".into(),
            })?;
            kv.insert(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(KeyValues::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    pub fn insert(&mut self, key: &str, value: &str) {
        self.entries.insert(key.replace('-', "_"), value.to_string());
    }

    /// Applies `KEY=VALUE` overrides.
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::input(format!("--set expects KEY=VALUE, got `{s}`")))?;
            self.insert(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.insert(key, &v.to_string());
        }
    }

    /// Removes and parses `key`, leaving `slot` untouched when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.entries.remove(key) {
            *slot = v
                .parse()
                .map_err(|e| Error::input(format!("config key `{key}`: cannot parse `{v}`: {e}")))?;
        }
        Ok(())
    }

    pub fn take_string(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Fails on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::input(format!("unknown config key `{k}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut kv = KeyValues::parse("# c\nlr = 0.5\n\nsteps=3\nlr=0.25\n", "t").unwrap();
        kv.apply_sets(&["steps=7".into()]).unwrap();
        let (mut lr, mut steps) = (0.0f64, 0usize);
        kv.take("lr", &mut lr).unwrap();
        kv.take("steps", &mut steps).unwrap();
        assert_eq!((lr, steps), (0.25, 7));
        kv.finish().unwrap();
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(KeyValues::parse("oops\n", "t").is_err());
        let kv = KeyValues::parse("mystery = 1", "t").unwrap();
        assert!(kv.finish().is_err());
        let mut kv = KeyValues::parse("lr = fast", "t").unwrap();
        let mut lr = 0.0f64;
        assert!(kv.take("lr", &mut lr).is_err());
    }
}
