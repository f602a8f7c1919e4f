//! Run configuration: presets, TOML files and `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{FinetuneConfig, MetaConfig};
use crate::corpus::SplitSpec;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::extractor::ExtractorConfig;
use crate::generation::GanConfig;
use crate::synthetic::SyntheticSpec;

/// Input files and preprocessing. Paths left unset fall back to the output
/// of `gen-synthetic` under the artifact root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    pub hierarchy: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Documents are truncated to this many tokens.
    pub max_len: usize,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            hierarchy: None,
            embeddings: None,
            max_len: 2500,
            split: SplitSpec::default(),
        }
    }
}

/// Feature dumps and keyword sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Negative rows kept per code in the dump.
    pub negatives_per_code: usize,
    /// Keywords extracted per (document, code) pair, `k`.
    pub keywords_per_doc: usize,
    /// Keywords listed per code when reporting generated-feature semantics.
    pub keyword_predictions: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            negatives_per_code: 1024,
            keywords_per_doc: 10,
            keyword_predictions: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Name of the preset the configuration started from.
    pub preset: String,
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    /// Replicates averaged by `reproduce-table`.
    pub seeds: usize,
    pub synthetic: SyntheticSpec,
    pub data: DataConfig,
    pub extractor: ExtractorConfig,
    pub features: FeatureConfig,
    pub gan: GanConfig,
    pub finetune: FinetuneConfig,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::full()
    }
}

pub const PRESETS: [&str; 2] = ["full", "desk"];

impl RunConfig {
    /// Full-scale hyperparameters.
    pub fn full() -> Self {
        Self {
            preset: "full".into(),
            seed: 0,
            seeds: 10,
            synthetic: SyntheticSpec::default(),
            data: DataConfig::default(),
            extractor: ExtractorConfig::default(),
            features: FeatureConfig::default(),
            gan: GanConfig::default(),
            finetune: FinetuneConfig::default(),
            meta: MetaConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Small dimensions and step sizes that fit the shipped synthetic corpus
    /// on a laptop CPU.
    pub fn desk() -> Self {
        let full = Self::full();
        Self {
            preset: "desk".into(),
            data: DataConfig {
                max_len: 200,
                ..full.data
            },
            extractor: ExtractorConfig {
                filters: 32,
                feature_dim: 32,
                freeze_embeddings: true,
                ..full.extractor
            },
            gan: GanConfig {
                hidden: 128,
                noise_dim: 16,
                encoder_hidden: 32,
                batch_size: 64,
                learning_rate: 1e-3,
                epochs: 30,
                ..full.gan
            },
            finetune: FinetuneConfig {
                learning_rate: 1e-2,
                max_epochs: 10,
                positive_weight: 8.0,
                ..full.finetune
            },
            ..full
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}`; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Layers a TOML file and `key=value` overrides over a preset.
    ///
    /// The preset is `preset` when given, else the file's `preset` key, else
    /// `full`. Later layers win.
    pub fn load(preset: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file_table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let table: toml::Table = toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                Some(table)
            }
            None => None,
        };
        let name = match (preset, file_table.as_ref().and_then(|t| t.get("preset"))) {
            (Some(p), _) => p.to_string(),
            (None, Some(toml::Value::String(p))) => p.clone(),
            (None, Some(_)) => return Err(Error::Config("`preset` must be a string".into())),
            (None, None) => "full".to_string(),
        };
        let mut value = toml::Value::try_from(Self::preset(&name)?)
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(table) = file_table {
            merge(&mut value, toml::Value::Table(table));
        }
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        if let toml::Value::Table(t) = &mut value {
            t.insert("preset".into(), toml::Value::String(name));
        }
        let config: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.seeds == 0 {
            return fail("seeds must be positive");
        }
        if self.extractor.filters == 0 || self.extractor.feature_dim == 0 || self.extractor.kernel_width == 0 {
            return fail("extractor dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.extractor.dropout) {
            return fail("extractor.dropout must lie in [0, 1)");
        }
        if self.gan.hidden == 0 || self.gan.noise_dim == 0 || self.gan.encoder_hidden == 0 {
            return fail("gan dimensions must be positive");
        }
        if self.gan.critic_steps == 0 || self.gan.batch_size == 0 {
            return fail("gan.critic_steps and gan.batch_size must be positive");
        }
        if self.finetune.synthesized == 0 {
            return fail("finetune.synthesized must be positive");
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return fail("eval.threshold must lie in [0, 1]");
        }
        if self.features.keywords_per_doc == 0 {
            return fail("features.keywords_per_doc must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`; the value is parsed as a TOML literal and falls
/// back to a bare string.
fn apply_override(value: &mut toml::Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = value;
    for (i, key) in keys.iter().enumerate() {
        let toml::Value::Table(table) = node else {
            return Err(Error::Config(format!("override `{path}` descends into a non-table")));
        };
        if i + 1 == keys.len() {
            table.insert(key.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}

/// SHA-256 of the canonical JSON form of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&canonical)?.as_bytes());
    Ok(hex::encode(h.finalize()))
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of `stage` in replicate `replicate`: the master seed is mixed with
/// the counter `stage << 32 | replicate`.
pub fn derive_seed(master: u64, stage: u32, replicate: u32) -> u64 {
    splitmix64(master ^ splitmix64(((stage as u64) << 32) | replicate as u64))
}
