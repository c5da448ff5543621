//! TOML configuration file. Every section and key is optional; command-line
//! flags override whatever the file sets.
//!
//! ```toml
//! [llm]
//! provider = "http"
//! model = "gpt-3.5-turbo-1106"
//! base_url = "https://api.openai.com/v1"
//!
//! [pricing]
//! prompt_per_1k = "0.001"
//! completion_per_1k = "0.002"
//!
//! [engine]
//! max_iterations = 5
//! n_questions = 5
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbedderConfig;
use crate::engine::{EngineConfig, DEFAULT_K, DEFAULT_MAX_ITERATIONS, DEFAULT_N_QUESTIONS};
use crate::ingest::ChunkConfig;
use crate::llm::{PriceTable, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use crate::stages::PromptSet;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("cannot load prompts from {path}: {message}")]
    Prompts { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSection {
    pub provider: ProviderKind,
    pub model: String,
    pub base_url: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub mock_script: Option<PathBuf>,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Mock,
            model: "gpt-3.5-turbo-1106".into(),
            base_url: "https://api.openai.com/v1".into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            mock_script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineSection {
    pub max_iterations: u32,
    pub n_questions: usize,
    pub k: usize,
    pub parallelism: Option<usize>,
    pub final_refine: bool,
    pub seed: u64,
    pub prompts_dir: Option<PathBuf>,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            n_questions: DEFAULT_N_QUESTIONS,
            k: DEFAULT_K,
            parallelism: None,
            final_refine: false,
            seed: 0,
            prompts_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestSection {
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for IngestSection {
    fn default() -> Self {
        let c = ChunkConfig::default();
        Self {
            chunk_size: c.chunk_size,
            overlap: c.overlap,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub llm: LlmSection,
    pub pricing: PriceTable,
    pub embedder: EmbedderConfig,
    pub engine: EngineSection,
    pub ingest: IngestSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn prompts(&self) -> Result<PromptSet, ConfigError> {
        match &self.engine.prompts_dir {
            None => Ok(PromptSet::builtin()),
            Some(dir) => PromptSet::from_dir(dir).map_err(|message| ConfigError::Prompts {
                path: dir.clone(),
                message,
            }),
        }
    }

    pub fn engine_config(&self) -> Result<EngineConfig, ConfigError> {
        Ok(EngineConfig {
            max_iterations: self.engine.max_iterations,
            n_questions: self.engine.n_questions,
            k: self.engine.k,
            parallelism: self.engine.parallelism,
            final_refine: self.engine.final_refine,
            temperature: self.llm.temperature,
            max_tokens: self.llm.max_tokens,
            prices: self.pricing,
            seed: self.engine.seed,
            prompts: Arc::new(self.prompts()?),
        })
    }
}
