//! The experiment file and its command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};

use gazetr::data::SyntheticConfig;
use gazetr::models::{ModelVariant, VariantTag};
use gazetr::train::TrainPlan;
use gazetr::transformer::{AttentionMode, TransformerConfig};

pub const EFFECTIVE_CONFIG: &str = "config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    /// Reduced widths and stems for small images.
    #[default]
    Toy,
    /// Full-size configuration for 224×224 inputs.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: VariantTag,
    pub scale: Scale,
    /// Toy scale only; full scale is fixed at 224.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    pub seed: u64,
    pub attention_mode: AttentionMode,
    /// Replaces the variant's encoder configuration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transformer: Option<TransformerConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: VariantTag::Hybrid,
            scale: Scale::Toy,
            image_size: None,
            seed: 0,
            attention_mode: AttentionMode::Learned,
            transformer: None,
        }
    }
}

pub const DEFAULT_TOY_SIZE: usize = 64;

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelVariant> {
        self.resolve_as(self.variant)
    }

    /// The configured scale and overrides applied to another variant.
    pub fn resolve_as(&self, tag: VariantTag) -> Result<ModelVariant> {
        let mut v = match self.scale {
            Scale::Toy => ModelVariant::toy(tag, self.image_size.unwrap_or(DEFAULT_TOY_SIZE)),
            Scale::Full => {
                if let Some(s) = self.image_size.filter(|&s| s != 224) {
                    bail!("full-scale models take 224-pixel images, not {s}");
                }
                ModelVariant::full(tag)
            }
        };
        if let Some(t) = &self.transformer {
            match v.transformer_mut() {
                Some(slot) => *slot = t.clone(),
                None => bail!("the {tag} variant has no transformer to configure"),
            }
        }
        Ok(v.with_attention(self.attention_mode))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory. Written by `gen`, read by the other commands.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub generator: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output: PathBuf,
    /// Checkpoint to start training from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PathBuf>,
    pub overwrite: bool,
    pub model: ModelSection,
    pub train: TrainPlan,
    pub data: DataSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("runs/default"),
            pretrain: None,
            overwrite: false,
            model: ModelSection::default(),
            train: TrainPlan::default(),
            data: DataSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `overrides` and checks the result.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in &overrides.0 {
            set(&mut table, key, value.clone())?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .with_context(|| format!("invalid configuration{}", path.map(|p| format!(" in {}", p.display())).unwrap_or_default()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn data_dir(&self) -> Result<&Path> {
        match &self.data.dir {
            Some(d) => Ok(d),
            None => bail!("no dataset location: pass --data or set data.dir"),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Dotted-key assignments, applied in order after the file is read.
#[derive(Clone, Debug, Default)]
pub struct Overrides(pub Vec<(String, toml::Value)>);

impl Overrides {
    pub fn push(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.0.push((key.to_string(), value.into()));
    }

    pub fn opt<T: Into<toml::Value>>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.push(key, v);
        }
    }

    pub fn seed(&mut self, key: &str, value: Option<u64>) -> Result<()> {
        if let Some(v) = value {
            let v = i64::try_from(v).context("seeds are limited to 2^63 - 1")?;
            self.push(key, v);
        }
        Ok(())
    }

    pub fn usize(&mut self, key: &str, value: Option<usize>) -> Result<()> {
        if let Some(v) = value {
            self.push(key, i64::try_from(v)?);
        }
        Ok(())
    }

    pub fn path(&mut self, key: &str, value: Option<&PathBuf>) {
        if let Some(p) = value {
            self.push(key, p.display().to_string());
        }
    }

    /// `key=value` from `--set`; the value is read as TOML, falling back to a bare string.
    pub fn parse_assignment(&mut self, raw: &str) -> Result<()> {
        let Some((key, value)) = raw.split_once('=') else {
            bail!("--set expects key=value, got {raw:?}");
        };
        let value = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        self.push(key.trim(), value);
        Ok(())
    }
}

fn set(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).with_context(|| format!("empty key {key:?}"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("{key}: {p} is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
