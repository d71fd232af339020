//! Flat `key = value` settings.
//!
//! Lines starting with `#` are comments. Later assignments override earlier
//! ones, so command-line values can be layered over a file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{AttnScale, PoolKind};
use crate::backbone::{BackboneConfig, Preset};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Keys understood by [`Settings::model_config`].
pub const MODEL_KEYS: &[&str] = &[
    "backbone",
    "backbone_channels",
    "stem_channels",
    "stem_layers",
    "stage_layers",
    "neck",
    "channels",
    "heads",
    "blocks",
    "r_cross",
    "r_self",
    "mlp_ratio",
    "attn_scale",
    "pool",
    "search_res",
    "template_res",
    "search_context",
    "template_context",
    "window_influence",
    "penalty_k",
    "size_lr",
    "seed",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            s.set(k, v.trim());
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &Settings) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
            })
            .transpose()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Fails on any key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown setting `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Builds a model configuration starting from `base`. A `backbone` preset
    /// is applied before any explicit width overrides.
    pub fn model_config(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        if let Some(p) = self.get::<Preset>("backbone")? {
            cfg.backbone = BackboneConfig {
                stem_layers: cfg.backbone.stem_layers,
                stage_layers: cfg.backbone.stage_layers,
                ..BackboneConfig::preset(p)
            };
        }
        let b = &mut cfg.backbone;
        if let Some(v) = self.raw("backbone_channels") {
            let ch = triple(v, "backbone_channels")?;
            if ch != b.channels {
                b.channels = ch;
                b.preset = Preset::Custom;
            }
        }
        set(self, "stem_channels", &mut b.stem_channels)?;
        set(self, "stem_layers", &mut b.stem_layers)?;
        set(self, "stage_layers", &mut b.stage_layers)?;
        let n = &mut cfg.neck;
        set(self, "neck", &mut n.kind)?;
        set(self, "channels", &mut n.channels)?;
        set(self, "heads", &mut n.heads)?;
        set(self, "blocks", &mut n.blocks)?;
        if let Some(v) = self.raw("r_cross") {
            n.r_cross = triple(v, "r_cross")?;
        }
        set(self, "r_self", &mut n.r_self)?;
        set(self, "mlp_ratio", &mut n.mlp_ratio)?;
        if let Some(v) = self.raw("attn_scale") {
            n.attn.scale = match v {
                "per-head" => AttnScale::PerHead,
                "full" => AttnScale::FullDim,
                _ => {
                    return Err(Error::Config(format!(
                        "attn_scale must be per-head or full, got `{v}`"
                    )))
                }
            };
        }
        if let Some(v) = self.raw("pool") {
            n.attn.pool = match v {
                "avg" => PoolKind::Avg,
                "max" => PoolKind::Max,
                _ => return Err(Error::Config(format!("pool must be avg or max, got `{v}`"))),
            };
        }
        set(self, "search_res", &mut cfg.search_res)?;
        set(self, "template_res", &mut cfg.template_res)?;
        set(self, "search_context", &mut cfg.search_context)?;
        set(self, "template_context", &mut cfg.template_context)?;
        set(self, "window_influence", &mut cfg.post.window_influence)?;
        set(self, "penalty_k", &mut cfg.post.penalty_k)?;
        set(self, "size_lr", &mut cfg.post.lr)?;
        set(self, "seed", &mut cfg.seed)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T: FromStr>(s: &Settings, key: &str, slot: &mut T) -> Result<()> {
    if let Some(v) = s.get(key)? {
        *slot = v;
    }
    Ok(())
}

fn triple(v: &str, key: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            Error::Config(format!(
                "`{key}` needs three comma-separated integers, got `{v}`"
            ))
        })?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs exactly three values, got `{v}`")))
}

impl ModelConfig {
    /// Settings that reproduce this configuration via [`Settings::model_config`].
    pub fn to_settings(&self) -> Settings {
        let mut s = Settings::new();
        for (k, v) in self.echo() {
            s.set(&k, v);
        }
        let scale = match self.neck.attn.scale {
            AttnScale::PerHead => "per-head",
            AttnScale::FullDim => "full",
        };
        let pool = match self.neck.attn.pool {
            PoolKind::Avg => "avg",
            PoolKind::Max => "max",
        };
        s.set("attn_scale", scale);
        s.set("pool", pool);
        s.set("search_context", self.search_context.to_string());
        s.set("template_context", self.template_context.to_string());
        s.set("window_influence", self.post.window_influence.to_string());
        s.set("penalty_k", self.post.penalty_k.to_string());
        s.set("size_lr", self.post.lr.to_string());
        s.set("seed", self.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tpn::NeckKind;

    #[test]
    fn parse_and_override() {
        let mut s =
            Settings::parse("# comment\nchannels = 32\n\nheads=4\nneck = tpn-nopool\n").unwrap();
        let mut cli = Settings::new();
        cli.set("heads", "2");
        s.merge(&cli);
        let cfg = s.model_config(&ModelConfig::toy(16, 2, 1)).unwrap();
        assert_eq!(cfg.neck.channels, 32);
        assert_eq!(cfg.neck.heads, 2);
        assert_eq!(cfg.neck.kind, NeckKind::TpnNoPool);
    }

    #[test]
    fn malformed_lines_and_values_rejected() {
        assert!(Settings::parse("channels 32").is_err());
        assert!(Settings::parse(" = 3").is_err());
        let s = Settings::parse("channels = lots").unwrap();
        assert!(s.model_config(&ModelConfig::default()).is_err());
        let s = Settings::parse("r_cross = 4,2").unwrap();
        assert!(s.model_config(&ModelConfig::default()).is_err());
        assert!(Settings::parse("bogus = 1")
            .unwrap()
            .check_keys(MODEL_KEYS)
            .is_err());
    }

    #[test]
    fn settings_round_trip_the_config() {
        let mut cfg = ModelConfig::toy(24, 3, 2);
        cfg.neck.r_cross = [2, 2, 1];
        cfg.post.penalty_k = 0.1;
        let text = cfg.to_settings().to_text();
        let back = Settings::parse(&text)
            .unwrap()
            .model_config(&ModelConfig::default())
            .unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn preset_then_widths() {
        let s = Settings::parse("backbone = mobile\nchannels = 16\nheads = 2").unwrap();
        let cfg = s.model_config(&ModelConfig::default()).unwrap();
        assert_eq!(cfg.backbone.channels, [32, 96, 320]);
    }
}
