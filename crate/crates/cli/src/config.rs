//! Run configuration: one TOML file covering model, training, generation and data.

use std::fs;
use std::path::{Path, PathBuf};

use dialmem::data::SPECIAL_TOKENS;
use dialmem::generation::GenerationConfig;
use dialmem::training::TrainConfig;
use dialmem::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exit::{Failure, EXIT_CONFIG};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "DIALMEM_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub nli: Option<PathBuf>,
    pub dialogue: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    /// Tokens seen fewer times than this map to `[UNK]`.
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            nli: None,
            dialogue: None,
            validation: None,
            eval: None,
            min_count: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `model.seed` and seeds data sampling.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, Failure> {
        toml::from_str(text).map_err(|e| Failure::new(EXIT_CONFIG, format!("invalid config: {}", e.message().trim())))
    }

    /// Reads `path` and resolves relative data paths against its directory.
    pub fn load(path: &Path) -> Result<RunConfig, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text).map_err(|f| f.context(path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.nli, &mut cfg.data.dialogue, &mut cfg.data.validation, &mut cfg.data.eval]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies a command-line seed and checks every section.
    pub fn finish(mut self, seed: Option<u64>) -> Result<RunConfig, Failure> {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.model.seed = s;
        }
        let invalid = |e: dialmem::Error| Failure::new(EXIT_CONFIG, format!("invalid config: {e}"));
        // vocab_size 0 means "size of the built vocabulary"
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = SPECIAL_TOKENS.len() + 1;
        }
        model.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        if self.generation.beam_size == 0 {
            return Err(Failure::new(EXIT_CONFIG, "invalid config: generation.beam_size must be at least 1"));
        }
        if self.data.min_count == 0 {
            return Err(Failure::new(EXIT_CONFIG, "invalid config: data.min_count must be at least 1"));
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.model.seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
