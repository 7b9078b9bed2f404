use std::fmt::Write as _;

use crate::attention::{AttentionConfig, TileConfig};
use crate::dual_fusion::{DflConfig, SharingMode};
use crate::error::{bail, Result};
use crate::large_kernel::LkdConfig;

/// Model hyperparameters. Serialized as flat `key = value` text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub groups: usize,
    pub ha_depth: usize,
    pub lkd_depth: usize,
    pub lkd_k_core: usize,
    pub lkd_dilation: usize,
    pub lkd_k_extra: Option<usize>,
    pub lkd_reduction: usize,
    pub wmsa_window: usize,
    pub wmsa_heads: usize,
    pub hpa_enabled: bool,
    pub hpa_window: usize,
    pub hpa_heads: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub mlp_ratio: usize,
    pub dfl_heads: usize,
    pub dfl_normalized: bool,
    pub dfl_positional: bool,
    pub sharing: SharingMode,
    pub scale: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            groups: 2,
            ha_depth: 3,
            lkd_depth: 4,
            lkd_k_core: 5,
            lkd_dilation: 2,
            lkd_k_extra: None,
            lkd_reduction: 4,
            wmsa_window: 16,
            wmsa_heads: 4,
            hpa_enabled: true,
            hpa_window: 32,
            hpa_heads: 4,
            tile_rows: 64,
            tile_cols: 64,
            mlp_ratio: 2,
            dfl_heads: 2,
            dfl_normalized: true,
            dfl_positional: false,
            sharing: SharingMode::Semi,
            scale: 2,
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    match v.parse() {
        Ok(x) => Ok(x),
        Err(_) => bail!(Config, "invalid value {v:?} for {key}"),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!(Config, "invalid boolean {v:?} for {key}"),
    }
}

impl ModelConfig {
    pub fn lkd(&self) -> LkdConfig {
        LkdConfig {
            k_core: self.lkd_k_core,
            dilation: self.lkd_dilation,
            k_extra: self.lkd_k_extra,
            reduction: self.lkd_reduction,
            channels: self.channels,
        }
    }

    pub fn wmsa(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.wmsa_heads,
            head_dim: self.channels / self.wmsa_heads,
            window: Some(self.wmsa_window),
        }
    }

    pub fn hpa(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.hpa_heads,
            head_dim: self.channels / self.hpa_heads,
            window: Some(self.hpa_window),
        }
    }

    pub fn tiles(&self) -> TileConfig {
        TileConfig::new(self.tile_rows, self.tile_cols)
    }

    pub fn dfl(&self) -> DflConfig {
        DflConfig {
            heads: self.dfl_heads,
            normalized: self.dfl_normalized,
            positional: self.dfl_positional,
        }
    }

    pub fn esa_channels(&self) -> usize {
        (self.channels / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c < 16 || !c.is_multiple_of(2) {
            bail!(Config, "channels must be even and >= 16, got {c}");
        }
        for (name, v) in [
            ("groups", self.groups),
            ("ha_depth", self.ha_depth),
            ("wmsa_window", self.wmsa_window),
            ("hpa_window", self.hpa_window),
            ("tile_rows", self.tile_rows),
            ("tile_cols", self.tile_cols),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                bail!(Config, "{name} must be >= 1");
            }
        }
        AttentionConfig::new(c, self.wmsa_heads, Some(self.wmsa_window))?;
        AttentionConfig::new(c, self.hpa_heads, Some(self.hpa_window))?;
        if self.dfl_heads == 0 || !(c / 2).is_multiple_of(self.dfl_heads) {
            bail!(Config, "dfl_heads {} must divide {}", self.dfl_heads, c / 2);
        }
        if !(2..=4).contains(&self.scale) {
            bail!(Config, "scale must be 2, 3 or 4, got {}", self.scale);
        }
        self.lkd().validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("channels", self.channels.to_string());
        kv("groups", self.groups.to_string());
        kv("ha_depth", self.ha_depth.to_string());
        kv("lkd_depth", self.lkd_depth.to_string());
        kv("lkd_k_core", self.lkd_k_core.to_string());
        kv("lkd_dilation", self.lkd_dilation.to_string());
        kv(
            "lkd_k_extra",
            self.lkd_k_extra.map_or("none".into(), |k| k.to_string()),
        );
        kv("lkd_reduction", self.lkd_reduction.to_string());
        kv("wmsa_window", self.wmsa_window.to_string());
        kv("wmsa_heads", self.wmsa_heads.to_string());
        kv("hpa_enabled", self.hpa_enabled.to_string());
        kv("hpa_window", self.hpa_window.to_string());
        kv("hpa_heads", self.hpa_heads.to_string());
        kv("tile_rows", self.tile_rows.to_string());
        kv("tile_cols", self.tile_cols.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("dfl_heads", self.dfl_heads.to_string());
        kv("dfl_normalized", self.dfl_normalized.to_string());
        kv("dfl_positional", self.dfl_positional.to_string());
        kv(
            "sharing",
            match self.sharing {
                SharingMode::Semi => "semi",
                SharingMode::Full => "full",
            }
            .into(),
        );
        kv("scale", self.scale.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    /// Parses `key = value` lines; `#` starts a comment, missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(Config, "line {}: expected key = value", lineno + 1);
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "channels" => self.channels = parse_num(key, v)?,
            "groups" => self.groups = parse_num(key, v)?,
            "ha_depth" => self.ha_depth = parse_num(key, v)?,
            "lkd_depth" => self.lkd_depth = parse_num(key, v)?,
            "lkd_k_core" => self.lkd_k_core = parse_num(key, v)?,
            "lkd_dilation" => self.lkd_dilation = parse_num(key, v)?,
            "lkd_k_extra" => {
                self.lkd_k_extra = match v {
                    "none" | "" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "lkd_reduction" => self.lkd_reduction = parse_num(key, v)?,
            "wmsa_window" => self.wmsa_window = parse_num(key, v)?,
            "wmsa_heads" => self.wmsa_heads = parse_num(key, v)?,
            "hpa_enabled" => self.hpa_enabled = parse_bool(key, v)?,
            "hpa_window" => self.hpa_window = parse_num(key, v)?,
            "hpa_heads" => self.hpa_heads = parse_num(key, v)?,
            "tile_rows" => self.tile_rows = parse_num(key, v)?,
            "tile_cols" => self.tile_cols = parse_num(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse_num(key, v)?,
            "dfl_heads" => self.dfl_heads = parse_num(key, v)?,
            "dfl_normalized" => self.dfl_normalized = parse_bool(key, v)?,
            "dfl_positional" => self.dfl_positional = parse_bool(key, v)?,
            "sharing" => {
                self.sharing = match v {
                    "semi" => SharingMode::Semi,
                    "full" => SharingMode::Full,
                    _ => bail!(Config, "sharing must be semi or full, got {v:?}"),
                }
            }
            "scale" => self.scale = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            _ => bail!(Config, "unknown config key {key:?}"),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ModelConfig {
            lkd_k_extra: Some(11),
            lkd_dilation: 3,
            sharing: SharingMode::Full,
            seed: 99,
            ..ModelConfig::default()
        };
        cfg.hpa_enabled = false;
        assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(ModelConfig::parse("").unwrap(), ModelConfig::default());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ModelConfig::parse("bogus = 1").is_err());
        assert!(ModelConfig::parse("channels = x").is_err());
        assert!(ModelConfig::parse("channels").is_err());
        assert!(ModelConfig::parse("scale = 5").is_err());
        assert!(ModelConfig::parse("channels = 30").is_err());
        assert!(ModelConfig::parse("lkd_k_core = 4").is_err());
        assert!(ModelConfig::parse("wmsa_heads = 3").is_err());
    }
}
