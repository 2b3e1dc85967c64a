use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::scan_io::{builtin_config, DatasetConfig};

/// Network hyperparameters, read from a UTF-8 `key = value` file.
///
/// Recognised keys: `dataset`, `C`, `depths`, `widths`, `strides`, `C_a`,
/// `seed`. Lists are comma separated. Missing keys take the defaults of
/// [`ModelConfig::default`]; `widths` defaults to `[C, 2C, 4C, 4C]` and `C_a`
/// to `C` for whatever `C` the file sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub dataset: String,
    pub channels: usize,
    pub attn_channels: usize,
    pub backbone: BackboneConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_channels(128)
    }
}

impl ModelConfig {
    pub fn with_channels(c: usize) -> Self {
        Self {
            dataset: "semantickitti".into(),
            channels: c,
            attn_channels: c,
            backbone: BackboneConfig::standard(c),
            seed: 0,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = k.trim().to_string();
            if entries.iter().any(|(e, _)| *e == key) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            entries.push((key, v.trim().to_string()));
        }
        let get = |key: &str| entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        for (k, _) in &entries {
            if !["dataset", "C", "depths", "widths", "strides", "C_a", "seed"].contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }

        let c = get("C").map(|v| number(v, "C")).transpose()?.unwrap_or(128);
        let mut cfg = Self::with_channels(c);
        if let Some(v) = get("dataset") {
            cfg.dataset = v.to_string();
        }
        if let Some(v) = get("C_a") {
            cfg.attn_channels = number(v, "C_a")?;
        }
        if let Some(v) = get("depths") {
            cfg.backbone.depths = list(v, "depths")?;
        }
        if let Some(v) = get("widths") {
            cfg.backbone.widths = list(v, "widths")?;
        }
        if let Some(v) = get("strides") {
            cfg.backbone.strides = list(v, "strides")?;
        }
        if let Some(v) = get("seed") {
            cfg.seed = number(v, "seed")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "C = {}", self.channels);
        let _ = writeln!(s, "C_a = {}", self.attn_channels);
        let _ = writeln!(s, "depths = {}", join(&self.backbone.depths));
        let _ = writeln!(s, "widths = {}", join(&self.backbone.widths));
        let _ = writeln!(s, "strides = {}", join(&self.backbone.strides));
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.attn_channels == 0 {
            return Err(Error::Config("C and C_a must be positive".into()));
        }
        self.backbone.validate()?;
        self.dataset_config()?;
        Ok(())
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        builtin_config(&self.dataset)
    }

    pub fn num_stages(&self) -> usize {
        self.backbone.num_stages()
    }
}

fn number<N: std::str::FromStr>(v: &str, key: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn list(v: &str, key: &str) -> Result<Vec<usize>> {
    v.trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|x| number(x.trim(), key))
        .collect()
}
