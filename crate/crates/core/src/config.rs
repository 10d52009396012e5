//! Flat `key = value` run configuration with documented defaults.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

/// Every accepted key with its default and meaning.
pub const DEFAULTS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed for data order, initialization and sampling"),
    ("data.image_size", "16", "rendered image side length"),
    ("data.seed", "0", "dataset shuffle seed"),
    ("diffusion.T", "100", "number of diffusion steps"),
    ("diffusion.beta_start", "0.001", "first beta of the linear schedule"),
    ("diffusion.beta_end", "0.09", "last beta of the linear schedule"),
    ("guidance.scale", "2.0", "classifier-free guidance scale for text-to-image"),
    ("guidance.uncond_mode", "max-noise-condition", "unconditional branch: max-noise-condition or null-token"),
    ("joint.steps", "1000", "joint pretraining steps"),
    ("joint.batch", "16", "joint pretraining batch size"),
    ("joint.lr", "0.002", "joint pretraining peak learning rate"),
    ("bidiffuser.steps", "3500", "bidirectional fine-tuning steps"),
    ("bidiffuser.batch", "16", "bidirectional fine-tuning batch size"),
    ("bidiffuser.lr", "0.003", "bidirectional fine-tuning peak learning rate"),
    ("bidiffuser.alpha", "4.0", "weight of the image-to-text term"),
    ("llm.variant", "decoder-only", "decoder-only or encoder-decoder"),
    ("llm.steps", "1500", "language-model pretraining steps"),
    ("llm.batch", "8", "language-model pretraining batch size"),
    ("llm.lr", "0.002", "language-model pretraining peak learning rate"),
    ("align.manner", "pre", "pre or mid"),
    ("align.freeze_llm", "true", "keep the LLM frozen in Pre-Align"),
    ("align.steps", "600", "alignment steps"),
    ("align.batch", "8", "alignment batch size"),
    ("align.lr", "0.003", "alignment peak learning rate"),
    ("adapter.lambda", "0.3", "fusion weight of the adapter output"),
    ("adapter.steps", "400", "adapter training steps"),
    ("adapter.batch", "8", "adapter batch size"),
    ("adapter.lr", "0.001", "adapter peak learning rate"),
    ("dialogue.steps", "800", "dialogue training steps"),
    ("dialogue.lr", "0.001", "dialogue peak learning rate"),
    ("eval.samples", "256", "generated images per toy-FID arm"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self { values: DEFAULTS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl Config {
    /// Defaults overridden by `text`. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get_str(key)?;
        raw.parse().map_err(|_| Error::Config(format!("`{key}` = `{raw}` cannot be parsed")))
    }

    /// Every key in sorted order, one `key = value` per line.
    pub fn resolved(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}
