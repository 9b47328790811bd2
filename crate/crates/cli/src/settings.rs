//! `key = value` config files and flag/file/default resolution.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::CliError;

/// Parsed config file: one `key = value` per line, `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
            let key = k.trim().replace('_', "-");
            if key.is_empty() {
                return Err(CliError::Usage(format!("config line {}: empty key", i + 1)));
            }
            entries.insert(key, v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Picks each setting from the flag, then the config file, then the default,
/// and remembers the resolved values for the artifact header.
#[derive(Debug, Default)]
pub struct Resolver {
    file: KvFile,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(file: KvFile) -> Self {
        Self {
            file,
            resolved: BTreeMap::new(),
        }
    }

    pub fn pick<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(text)) => text
                .parse()
                .map_err(|e| CliError::Usage(format!("config `{key}`: {e}")))?,
            (None, None) => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Comma-separated list setting.
    pub fn pick_list<T>(&mut self, key: &str, flag: Option<Vec<T>>, default: Vec<T>) -> Result<Vec<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(text)) => parse_list(text).map_err(|e| CliError::Usage(format!("config `{key}`: {e}")))?,
            (None, None) => default,
        };
        let shown: Vec<String> = value.iter().map(|v| v.to_string()).collect();
        self.resolved.insert(key.to_string(), shown.join(";"));
        Ok(value)
    }

    /// Rejects config-file keys that no setting consumed.
    pub fn finish(self) -> Result<Settings, CliError> {
        if let Some(k) = self.file.keys().find(|k| !self.resolved.contains_key(*k)) {
            return Err(CliError::Usage(format!("unknown config key `{k}`")));
        }
        Ok(Settings {
            values: self.resolved,
        })
    }
}

/// Items separated by `;` or by `,` when no `;` is present, so that
/// pattern lists such as `sink:1,2;stride:4` stay unambiguous.
pub fn parse_list<T>(text: &str) -> Result<Vec<T>, String>
where
    T: FromStr,
    T::Err: Display,
{
    let sep = if text.contains(';') { ';' } else { ',' };
    text.split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

/// Resolved settings of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of the canonical `key=value` listing.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_parsing() {
        let f = KvFile::parse("# comment\nseed = 7\nblock_size=16 # trailing\n\n").unwrap();
        assert_eq!(f.get("seed"), Some("7"));
        assert_eq!(f.get("block-size"), Some("16"));
        assert!(KvFile::parse("novalue\n").is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut r = Resolver::new(KvFile::parse("seed = 7\nsteps = 9").unwrap());
        assert_eq!(r.pick("seed", Some(3u64), 0).unwrap(), 3);
        assert_eq!(r.pick("steps", None, 1usize).unwrap(), 9);
        assert_eq!(r.pick("batch", None, 4usize).unwrap(), 4);
        let s = r.finish().unwrap();
        assert_eq!(s.canonical(), "batch=4\nseed=3\nsteps=9\n");
        assert_eq!(s.hash().len(), 64);
    }

    #[test]
    fn unknown_and_bad_keys() {
        let r = Resolver::new(KvFile::parse("bogus = 1").unwrap());
        assert!(r.finish().is_err());
        let mut r = Resolver::new(KvFile::parse("seed = x").unwrap());
        assert!(r.pick("seed", None, 0u64).is_err());
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<usize>("64, 256,1024").unwrap(), vec![64, 256, 1024]);
        let p: Vec<longgen_core::Pattern> = parse_list("full;sink:1,2").unwrap();
        assert_eq!(p.len(), 2);
        assert!(parse_list::<usize>("1,x").is_err());
    }
}
