//! Parameter resolution: a key-value config file overlaid with flags.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use cprop::kv::KvConfig;
use cprop::Error;

/// Flags override keys read from `--config`; whatever a command actually
/// used is written back out so every run leaves its full parameter set
/// next to its results.
#[derive(Debug, Clone, Default)]
pub struct Params {
    kv: KvConfig,
}

impl Params {
    pub fn load(config: Option<&Path>) -> Result<Self> {
        let kv = match config {
            Some(path) => KvConfig::load(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => KvConfig::new(),
        };
        Ok(Self { kv })
    }

    /// Applies a flag override when the flag was given.
    pub fn flag<T: Display>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.kv.set(key, v);
        }
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.kv.set(key, value);
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        Ok(self.kv.get(key)?)
    }

    /// Reads `key`, falling back to `default` and recording the value used.
    pub fn resolve<T: FromStr + Display + Clone>(&mut self, key: &str, default: T) -> Result<T> {
        let v = self.kv.get_or(key, default)?;
        self.kv.set(key, v.clone());
        Ok(v)
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        Ok(self.kv.require(key)?)
    }

    pub fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.kv.raw(key).map(PathBuf::from))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)?
            .ok_or_else(|| Error::Config(format!("missing required field `{key}`")).into())
    }

    pub fn kv(&self) -> &KvConfig {
        &self.kv
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.kv.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Parses `lo:hi` with `lo <= hi`.
pub fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected `lo:hi`, got `{s}`"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("bad lower bound `{lo}`: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("bad upper bound `{hi}`: {e}"))?;
    if !(lo <= hi) {
        return Err(format!("lower bound {lo} exceeds upper bound {hi}"));
    }
    Ok((lo, hi))
}

/// Parses `key=value`.
pub fn parse_assignment(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected `key=value`, got `{s}`"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in `{s}`"));
    }
    Ok((k.to_owned(), v.trim().to_owned()))
}
