//! Flat `key=value` configuration shared by every config record.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered `key=value` pairs; later assignments win.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn new() -> Self {
        FlatConfig::default()
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = FlatConfig::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(origin, i + 1, "expected key=value"))?;
            cfg.set(k.trim(), v.trim());
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Copies every entry of `other` over this one.
    pub fn merge(&mut self, other: &FlatConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Hex SHA-256 of [`FlatConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl From<BTreeMap<String, String>> for FlatConfig {
    fn from(entries: BTreeMap<String, String>) -> Self {
        FlatConfig { entries }
    }
}

/// A config struct that maps onto `prefix.field=value` entries.
pub trait ConfigRecord: Sized {
    fn to_entries(&self, prefix: &str) -> Vec<(String, String)>;

    /// Overwrites fields named in `cfg`, then validates.
    fn apply(&mut self, prefix: &str, cfg: &FlatConfig) -> Result<()>;

    fn validate(&self) -> Result<()> {
        Ok(())
    }

    fn to_flat(&self, prefix: &str) -> FlatConfig {
        let mut cfg = FlatConfig::new();
        for (k, v) in self.to_entries(prefix) {
            cfg.set(k, v);
        }
        cfg
    }
}

macro_rules! config_record {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::config::ConfigRecord for $ty {
            fn to_entries(&self, prefix: &str) -> Vec<(String, String)> {
                vec![$((format!("{prefix}.{}", stringify!($field)), self.$field.to_string())),*]
            }

            fn apply(&mut self, prefix: &str, cfg: &$crate::config::FlatConfig) -> $crate::error::Result<()> {
                $(
                    let key = format!("{prefix}.{}", stringify!($field));
                    if let Some(v) = cfg.get(&key) {
                        self.$field = v.parse().map_err(|_| {
                            $crate::error::Error::Config(format!("invalid value '{v}' for {key}"))
                        })?;
                    }
                )*
                <Self as $crate::config::ConfigRecord>::validate(self)
            }

            fn validate(&self) -> $crate::error::Result<()> {
                self.check()
            }
        }
    };
}

pub(crate) use config_record;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut a = FlatConfig::parse("# c\n a = 1\n\nb=x=y\n", "mem").unwrap();
        assert_eq!(a.get("a"), Some("1"));
        assert_eq!(a.get("b"), Some("x=y"));
        let b = FlatConfig::parse("a=2", "mem").unwrap();
        a.merge(&b);
        assert_eq!(a.get("a"), Some("2"));
    }

    #[test]
    fn missing_equals_is_format_error() {
        let err = FlatConfig::parse("a=1\noops\n", "cfg").unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }));
    }

    #[test]
    fn hash_depends_on_content_only() {
        let a = FlatConfig::parse("x=1\ny=2", "a").unwrap();
        let b = FlatConfig::parse("y=2\nx=1", "b").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = FlatConfig::parse("x=1\ny=3", "c").unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
