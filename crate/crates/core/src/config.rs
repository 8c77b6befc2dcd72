//! TOML run configuration with dotted command-line overrides.
//!
//! ```toml
//! [model]
//! dim = 64
//! heads = 4
//! blocks = 4
//! features = 16
//! max_len = 32
//! classes = 4
//!
//! [method]
//! kind = "hpt"
//! bins = 8
//! placement = "parallel_mhsa"
//! shared = true
//!
//! [train]
//! batch_size = 16
//! max_epochs = 12
//! seed = 0
//!
//! [data]
//! dir = "data/toy"
//!
//! [output]
//! dir = "runs/hpt8"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::petl::{MethodSpec, PetlConfig};
use crate::train::{GeneratorSpec, TrainConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "HPT_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const RESOLVED_CONFIG: &str = "config.toml";

/// `train` table; unset keys fall back to method-dependent defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTable {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Seed of the frozen backbone weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataTable {
    /// Directory with `train/val/test.ptds`; when unset, data is generated
    /// in memory from `generator`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub generator: GeneratorSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputTable {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub method: MethodSpec,
    #[serde(default)]
    pub train: TrainTable,
    #[serde(default)]
    pub data: DataTable,
    #[serde(default)]
    pub output: OutputTable,
}

/// Fully resolved configuration: every default filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    pub file: RunConfigFile,
    pub petl: PetlConfig,
    pub train: TrainConfig,
    pub backbone_seed: u64,
}

impl RunConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Applies `table.key = value` overrides. Values are parsed as TOML
    /// literals and fall back to strings; unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| Error::Format(e.to_string()))?;
        for (key, raw) in overrides {
            let path: Vec<&str> = key.split('.').collect();
            if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("override {key:?} must look like table.key")));
            }
            let value = parse_literal(raw);
            let mut table = &mut root;
            for part in &path[..path.len() - 1] {
                let entry = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
            }
            table.insert(path[path.len() - 1].to_string(), value);
        }
        let text = toml::to_string(&root).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_toml(&text)
    }

    /// Validates and fills defaults. The method table is canonicalized so the
    /// resolved file only carries keys the method uses.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        self.model.validate()?;
        let petl = self.method.to_config()?;
        petl.validate(self.model.dim)?;
        let t = &self.train;
        let base = TrainConfig::for_method(&petl.method);
        let train = TrainConfig {
            lr: t.lr.unwrap_or(base.lr),
            weight_decay: t.weight_decay.unwrap_or(base.weight_decay),
            beta1: t.beta1.unwrap_or(base.beta1),
            beta2: t.beta2.unwrap_or(base.beta2),
            adam_eps: t.adam_eps.unwrap_or(base.adam_eps),
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            max_epochs: t.max_epochs.unwrap_or(base.max_epochs),
            patience: t.patience.unwrap_or(base.patience),
            seed: t.seed.unwrap_or(base.seed),
        };
        train.validate()?;
        let backbone_seed = t.backbone_seed.unwrap_or(0);
        if self.data.dir.is_none() {
            self.data.generator.validate()?;
        }
        let mut file = self.clone();
        file.method = MethodSpec::from_config(&petl);
        file.train = TrainTable {
            lr: Some(train.lr),
            weight_decay: Some(train.weight_decay),
            beta1: Some(train.beta1),
            beta2: Some(train.beta2),
            adam_eps: Some(train.adam_eps),
            batch_size: Some(train.batch_size),
            max_epochs: Some(train.max_epochs),
            patience: Some(train.patience),
            seed: Some(train.seed),
            backbone_seed: Some(backbone_seed),
        };
        Ok(ResolvedConfig {
            file,
            petl,
            train,
            backbone_seed,
        })
    }
}

impl ResolvedConfig {
    /// Writes the resolved configuration as `config.toml` under `dir`.
    pub fn write_manifest(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.file.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// `$HPT_OUTPUT_ROOT`, or `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}
