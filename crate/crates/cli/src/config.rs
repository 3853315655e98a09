//! Run configuration: defaults, then a TOML file, then `section.key=value` overrides.

use std::path::Path;

use echogen::data::DataConfig;
use echogen::evaluation::{Ablation, EvalProtocol};
use echogen::model::ModelConfig;
use echogen::sampling::{Decoding, GuidanceScales};
use echogen::tokenizer::TokenizerConfig;
use echogen::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("override {0:?} is not of the form section.key=value")]
    Override(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub prompt: String,
    /// PNG path of the reference image; empty for none.
    pub reference: String,
    pub text: f64,
    pub image: f64,
    /// `0` selects argmax decoding.
    pub temperature: f64,
    pub seed: u64,
    pub num_images: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        let g = GuidanceScales::default();
        Self {
            prompt: String::new(),
            reference: String::new(),
            text: g.text,
            image: g.image,
            temperature: 0.0,
            seed: 0,
            num_images: 1,
        }
    }
}

pub fn decoding(temperature: f64) -> Decoding {
    if temperature == 0.0 {
        Decoding::Argmax
    } else {
        Decoding::Temperature(temperature)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub subjects: usize,
    pub prompts_per_subject: usize,
    pub images_per_pair: usize,
    pub seed: u64,
    pub temperature: f64,
    pub text: f64,
    pub image: f64,
    pub ablations: Vec<Ablation>,
    /// Guidance grids of the sweep; the sweep is skipped when either is empty.
    pub text_grid: Vec<f64>,
    pub image_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = EvalProtocol::default();
        Self {
            subjects: p.subjects,
            prompts_per_subject: p.prompts_per_subject,
            images_per_pair: p.images_per_pair,
            seed: p.seed,
            temperature: 1.0,
            text: p.scales.text,
            image: p.scales.image,
            ablations: Ablation::ALL.to_vec(),
            text_grid: Vec::new(),
            image_grid: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            subjects: self.subjects,
            prompts_per_subject: self.prompts_per_subject,
            images_per_pair: self.images_per_pair,
            seed: self.seed,
            decoding: decoding(self.temperature),
            scales: GuidanceScales {
                text: self.text,
                image: self.image,
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// Defaults, overlaid by `file` (if any), overlaid by each `section.key=value` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.display().to_string(),
                    source,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Hash of the sections that shape trained artifacts (data, tokenizer, model, train).
    pub fn training_hash(&self) -> String {
        training_hash(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// [`Config::training_hash`] of a serialized config.
pub fn training_hash(config: &serde_json::Value) -> String {
    let picked: serde_json::Map<String, serde_json::Value> =
        ["data", "tokenizer", "model", "train"]
            .iter()
            .map(|k| (k.to_string(), config.get(*k).cloned().unwrap_or_default()))
            .collect();
    hex::encode(Sha256::digest(
        serde_json::to_vec(&picked).expect("json serializes"),
    ))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.into()))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| ConfigError::Override(spec.into()))?;
    if section.is_empty() || key.is_empty() || key.contains('.') {
        return Err(ConfigError::Override(spec.into()));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sec) = entry else {
        return Err(ConfigError::Invalid(format!("{section} is not a section")));
    };
    sec.insert(key.to_string(), value);
    Ok(())
}
