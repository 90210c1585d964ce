//! Plain-text key/value configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; lists are comma-separated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Result, RfpmError};
use crate::pyramid::{DownsamplerKind, PyramidColumnSpec, RfpmConfig};

/// Parsed key/value pairs.
#[derive(Clone, Debug, Default)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(RfpmError::Format(format!(
                    "config line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn remove(&mut self, key: &str) {
        self.map.remove(key);
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.map.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    /// Typed lookup; `None` when the key is absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                RfpmError::Format(format!("config key '{key}': cannot parse '{v}'"))
            }),
        }
    }

    /// Typed lookup with a default.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list lookup.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) if v.trim().is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim().parse::<T>().map_err(|_| {
                        RfpmError::Format(format!("config key '{key}': bad list entry '{p}'"))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn list_string<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Serializes a pyramid config into canonical key/value form.
pub fn rfpm_to_kv(cfg: &RfpmConfig, kv: &mut KvConfig) {
    kv.set("ncols", cfg.columns.len());
    for (i, col) in cfg.columns.iter().enumerate() {
        kv.set(
            &format!("kinds.{i}"),
            col.kinds.iter().map(|k| k.as_char()).collect::<String>(),
        );
        kv.set(&format!("channels.{i}"), list_string(col.channels.iter()));
    }
    kv.set("mask_levels", list_string(cfg.mask_levels.iter()));
    kv.set("seed", cfg.seed);
}

/// Reads a pyramid config; accepts either the canonical per-column form
/// (`ncols`, `kinds.N`, `channels.N`) or the short form
/// (`preset` / `columns` + `channels`).
pub fn rfpm_from_kv(kv: &KvConfig) -> Result<RfpmConfig> {
    let seed = kv.get_or("seed", 42u64)?;
    if let Some(ncols) = kv.get::<usize>("ncols")? {
        let mut columns = Vec::new();
        for i in 0..ncols {
            let kinds_str: String = kv
                .get(&format!("kinds.{i}"))?
                .ok_or_else(|| RfpmError::Config(format!("missing kinds.{i}")))?;
            let kinds = kinds_str
                .chars()
                .map(DownsamplerKind::from_char)
                .collect::<Result<Vec<_>>>()?;
            let channels: Vec<usize> = kv
                .get_list(&format!("channels.{i}"))?
                .ok_or_else(|| RfpmError::Config(format!("missing channels.{i}")))?;
            columns.push(PyramidColumnSpec { channels, kinds });
        }
        let mask_levels: Vec<usize> = kv.get_list("mask_levels")?.unwrap_or_default();
        let cfg = RfpmConfig {
            columns,
            mask_levels: mask_levels.into_iter().collect(),
            seed,
        };
        cfg.validate()?;
        return Ok(cfg);
    }
    let mut cfg = match kv.raw("preset") {
        Some(name) => RfpmConfig::preset(name, seed)?,
        None => RfpmConfig::preset("toy", seed)?,
    };
    if let Some(columns) = kv.raw("columns") {
        let channels: Vec<usize> = kv
            .get_list("channels")?
            .unwrap_or_else(|| cfg.columns[0].channels.clone());
        let masks: Vec<usize> = kv
            .get_list("mask_levels")?
            .unwrap_or_else(|| cfg.mask_levels.iter().copied().collect());
        cfg = RfpmConfig::with_channels(columns, &channels, &masks, seed)?;
    } else {
        if let Some(channels) = kv.get_list::<usize>("channels")? {
            for col in &mut cfg.columns {
                let kind = col.kinds[0];
                *col = PyramidColumnSpec::uniform(kind, &channels);
            }
        }
        if let Some(masks) = kv.get_list::<usize>("mask_levels")? {
            cfg.mask_levels = masks.into_iter().collect();
        }
        cfg.validate()?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_basics() {
        let kv = KvConfig::parse("a = 1\n# comment\nlist = 1, 2,3\nname = W/R/W # trailing\n")
            .unwrap();
        assert_eq!(kv.get::<i32>("a").unwrap(), Some(1));
        assert_eq!(kv.get_list::<u32>("list").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(kv.raw("name"), Some("W/R/W"));
        assert_eq!(kv.get::<i32>("missing").unwrap(), None);
        assert!(kv.get::<i32>("name").is_err());
        assert!(KvConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn rfpm_round_trip() {
        for preset in ["toy", "irr-pwc", "raft"] {
            let cfg = RfpmConfig::preset(preset, 9).unwrap();
            let mut kv = KvConfig::default();
            rfpm_to_kv(&cfg, &mut kv);
            let back = rfpm_from_kv(&KvConfig::parse(&kv.to_text()).unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn rfpm_short_form() {
        let kv = KvConfig::parse("columns = W/R\nmask_levels = 1\nseed = 5\n").unwrap();
        let cfg = rfpm_from_kv(&kv).unwrap();
        assert_eq!(cfg.columns.len(), 2);
        assert_eq!(cfg.kinds_string(), "W/R");
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.levels(), 4);
    }
}
