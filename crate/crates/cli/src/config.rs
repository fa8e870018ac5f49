//! Flat key-value config files.
//!
//! Format (see `docs/formats.md`): one `key = value` pair per line, `#`
//! comments, and a mandatory `schema_version = 1` entry. Every key mirrors a
//! command-line flag; flags win over file values.

use anyhow::{anyhow, bail, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

pub const CONFIG_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn empty() -> Self {
        ConfigFile::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow!("cannot read config {}: {e}", path.display()))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("config line {} is not `key = value`: {raw:?}", lineno + 1);
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if values.insert(key.clone(), value).is_some() {
                bail!("duplicate config key {key:?} at line {}", lineno + 1);
            }
        }
        let cfg = ConfigFile { values };
        match cfg.get::<u64>("schema_version")? {
            Some(CONFIG_SCHEMA_VERSION) => Ok(cfg),
            Some(v) => bail!("unsupported config schema_version {v} (expected {CONFIG_SCHEMA_VERSION})"),
            None => bail!("config file must declare schema_version = {CONFIG_SCHEMA_VERSION}"),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow!("config key {key} = {raw:?}: {e}")),
        }
    }

    pub fn get_string(&self, key: &str) -> Option<String> {
        self.values.get(key).cloned()
    }

    /// Command line wins; the file fills gaps.
    pub fn resolve<T: FromStr>(&self, cli: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match cli {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    pub fn resolve_or<T: FromStr>(&self, cli: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.resolve(cli, key)?.unwrap_or(default))
    }

    pub fn known_keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

/// Parses `"1,2;3,4"` into site vectors.
pub fn parse_sites(raw: &str, d: usize) -> Result<Vec<Vec<i64>>> {
    let mut out = Vec::new();
    for part in raw.split(';') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let site: Vec<i64> = part
            .split(',')
            .map(|c| c.trim().parse::<i64>().map_err(|e| anyhow!("bad coordinate {c:?}: {e}")))
            .collect::<Result<_>>()?;
        if site.len() != d {
            bail!("site {part:?} has {} coordinates, expected {d}", site.len());
        }
        out.push(site);
    }
    if out.is_empty() {
        bail!("no sites in {raw:?}");
    }
    Ok(out)
}

/// Parses `"4,8,16"` into a grid.
pub fn parse_grid(raw: &str) -> Result<Vec<i64>> {
    let grid: Vec<i64> = raw
        .split(',')
        .map(|c| c.trim().parse::<i64>().map_err(|e| anyhow!("bad grid entry {c:?}: {e}")))
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        bail!("empty grid");
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves() {
        let dir = std::env::temp_dir().join(format!("brwre_cfg_{}", std::process::id()));
        std::fs::write(&dir, "# comment\nschema_version = 1\nd = 3\nmaster_seed = 42\n").unwrap();
        let cfg = ConfigFile::load(&dir).unwrap();
        assert_eq!(cfg.get::<usize>("d").unwrap(), Some(3));
        // CLI wins.
        assert_eq!(cfg.resolve(Some(5usize), "d").unwrap(), Some(5));
        assert_eq!(cfg.resolve::<usize>(None, "d").unwrap(), Some(3));
        assert_eq!(cfg.resolve_or::<u64>(None, "replicates", 7).unwrap(), 7);
        std::fs::remove_file(&dir).ok();
    }

    #[test]
    fn rejects_missing_schema_version() {
        let dir = std::env::temp_dir().join(format!("brwre_cfg2_{}", std::process::id()));
        std::fs::write(&dir, "d = 3\n").unwrap();
        assert!(ConfigFile::load(&dir).is_err());
        std::fs::remove_file(&dir).ok();
    }

    #[test]
    fn site_and_grid_parsing() {
        assert_eq!(parse_sites("1,2;3,-4", 2).unwrap(), vec![vec![1, 2], vec![3, -4]]);
        assert!(parse_sites("1,2", 3).is_err());
        assert_eq!(parse_grid("4, 8,16").unwrap(), vec![4, 8, 16]);
    }
}
