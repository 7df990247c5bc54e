//! Declarative run configuration: one TOML file, dotted-key overrides,
//! and a content hash for manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{AdamConfig, EncoderConfig};
use crate::error::{check_probability, LpdError, Result};
use crate::eval::EvalSettings;
use crate::pipeline::{BenchmarkConfig, PretrainRunConfig, TrainConfig};
use crate::pretrain::PretrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every artifact a command writes.
    pub out_dir: PathBuf,
    /// Seed for model initialisation.
    pub model_seed: u64,
    pub data: BenchmarkConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainRunConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub ablate: AblateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Training seeds; each row reports the mean and spread over them.
    pub seeds: Vec<u64>,
    /// Share of description tokens deleted in the corrupted-description row.
    pub corrupt_fraction: f64,
    /// Start every row from the pre-trained checkpoint when one exists.
    pub use_pretrained: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: vec![0, 1, 2],
            corrupt_fraction: 0.5,
            use_pretrained: true,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/default"),
            model_seed: 0,
            data: BenchmarkConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainRunConfig {
                steps: 1500,
                batch: PretrainConfig {
                    temperature: 4.0,
                    ..PretrainConfig::default()
                },
                adam: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                seed: 0,
            },
            train: TrainConfig {
                steps: 1000,
                temperature: 4.0,
                adam: AdamConfig {
                    lr: 2e-4,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            },
            // Representations are cached, so 10k episodes are cheap.
            eval: EvalSettings {
                n_episodes: 10_000,
                ..EvalSettings::default()
            },
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| LpdError::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LpdError::format("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pretrain.batch;
        p.validate()?;
        check_probability("train.alpha_train", self.train.alpha_train)?;
        check_probability("eval.alpha_test", self.eval.alpha_test)?;
        check_probability("data.text.head_first_prob", self.data.text.head_first_prob)?;
        if !(self.ablate.corrupt_fraction > 0.0 && self.ablate.corrupt_fraction < 1.0) {
            return Err(LpdError::invalid("ablate.corrupt_fraction must be in (0, 1)"));
        }
        if self.ablate.seeds.is_empty() {
            return Err(LpdError::invalid("ablate.seeds must not be empty"));
        }
        for (name, a) in [("pretrain.adam", &self.pretrain.adam), ("train.adam", &self.train.adam)] {
            if !(a.lr > 0.0) {
                return Err(LpdError::invalid(format!("{name}.lr must be positive")));
            }
        }
        if !(self.train.temperature > 0.0) {
            return Err(LpdError::invalid("train.temperature must be positive"));
        }
        let enc = EncoderConfig {
            vocab_size: self.encoder.vocab_size.max(crate::tokenizer::NUM_SPECIAL + 1),
            ..self.encoder.clone()
        };
        enc.validate()
    }

    /// Apply `key.path=value` overrides. Values are parsed as TOML
    /// literals, falling back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc: toml::Value =
            toml::Value::try_from(self).map_err(|e| LpdError::format("config", e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| LpdError::invalid(format!("override `{item}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut doc, key.trim(), value)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e| LpdError::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.out_dir.join("pretrain")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out_dir.join("train")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.out_dir.join("ablate")
    }

    pub fn project_dir(&self) -> PathBuf {
        self.out_dir.join("project")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| LpdError::invalid(format!("`{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) {
                return Err(LpdError::invalid(format!("unknown config key `{key}`")));
            }
            // Integers given for float fields are widened.
            let value = match (&table[*part], value) {
                (toml::Value::Float(_), toml::Value::Integer(n)) => toml::Value::Float(n as f64),
                (_, v) => v,
            };
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .get_mut(*part)
            .ok_or_else(|| LpdError::invalid(format!("unknown config key `{key}`")))?;
    }
    Err(LpdError::invalid("empty override key"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}
