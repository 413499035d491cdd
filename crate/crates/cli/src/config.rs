//! TOML configuration with `CAGE_<SECTION>__<FIELD>` environment overrides.
//!
//! Every section is optional; a missing file behaves like an empty one.
//! Override values are parsed as TOML scalars (`CAGE_TRAIN__EPOCHS=200`,
//! `CAGE_TRAIN__AUGMENT=false`) and fall back to plain strings.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use artigen_core::nn::DenoiserConfig;
use artigen_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "CAGE_";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub output: OutputSection,
    pub service: ServiceSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub dir: PathBuf,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { dir: "corpus".into() }
    }
}

/// A named preset with optional per-field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub token_dim: Option<usize>,
    pub slots: Option<usize>,
    pub ffn_mult: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "desk".into(),
            layers: None,
            heads: None,
            token_dim: None,
            slots: None,
            ffn_mult: None,
        }
    }
}

impl ModelSection {
    pub fn build(&self) -> Result<DenoiserConfig> {
        let mut cfg = match self.preset.as_str() {
            "full" => DenoiserConfig::full(),
            "desk" => DenoiserConfig::desk(),
            "tiny" => DenoiserConfig::tiny(),
            other => bail!("unknown model preset '{other}' (expected full, desk or tiny)"),
        };
        cfg.layers = self.layers.unwrap_or(cfg.layers);
        cfg.heads = self.heads.unwrap_or(cfg.heads);
        cfg.token_dim = self.token_dim.unwrap_or(cfg.token_dim);
        cfg.slots = self.slots.unwrap_or(cfg.slots);
        cfg.ffn_mult = self.ffn_mult.unwrap_or(cfg.ffn_mult);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub addr: String,
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub max_count: usize,
    pub steps: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            addr: "127.0.0.1:8080".into(),
            checkpoint: None,
            corpus: None,
            max_count: 16,
            steps: artigen_core::diffusion::DEFAULT_INFERENCE_STEPS,
        }
    }
}

fn scalar(raw: &str) -> toml::Value {
    // reuse the TOML parser for numbers and booleans
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `CAGE_SECTION__FIELD=value` pairs on top of a parsed table.
pub fn apply_overrides<I>(table: &mut toml::Table, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    for (key, value) in vars {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let Some((section, field)) = rest.split_once("__") else {
            continue;
        };
        let (section, field) = (section.to_ascii_lowercase(), field.to_ascii_lowercase());
        let entry = table
            .entry(section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let Some(t) = entry.as_table_mut() else {
            bail!("{key}: [{section}] is not a table");
        };
        t.insert(field, scalar(&value));
    }
    Ok(())
}

impl Config {
    pub fn parse(text: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("parsing configuration")?;
        apply_overrides(&mut table, vars)?;
        let cfg: Config = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (empty when `None`) with overrides from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Self::parse(&text, std::env::vars())
    }
}
