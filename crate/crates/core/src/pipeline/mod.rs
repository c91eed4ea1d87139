//! Batch commands. Every command reads a [`PipelineConfig`], derives all
//! randomness from one seed, writes its artifacts atomically into an output
//! directory and finishes with a `manifest.json` holding the config echo,
//! the seed and the SHA-256 of every artifact.

pub mod commands;
pub mod data;
pub mod experiments;

use crate::config::{ConfigError, PipelineConfig};
use crate::encoding::EncodingError;
use crate::flow_codebook::FlowError;
use crate::metrics::MetricError;
use crate::motion::DecoderError;
use crate::preprocess::PreprocessError;
use crate::synthetic::SynthError;
use crate::tensor_io::{self, Tensor, TensorError};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Tensor { path: String, source: TensorError },
}

impl PipelineError {
    /// Process exit status. I/O and format errors count as validation
    /// errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_VALIDATION,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<FlowError> for PipelineError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::NonFinite(_) => Self::Numerical(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<DecoderError> for PipelineError {
    fn from(e: DecoderError) -> Self {
        match e {
            DecoderError::Divergence { .. } => Self::Numerical(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<EncodingError> for PipelineError {
    fn from(e: EncodingError) -> Self {
        match e {
            EncodingError::Singular { .. } => Self::Numerical(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<MetricError> for PipelineError {
    fn from(e: MetricError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<PreprocessError> for PipelineError {
    fn from(e: PreprocessError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        Self::Validation(e.to_string())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory that records a hash for every file written through it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(root).map_err(|e| PipelineError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `name`, which may contain `/`-separated
    /// subdirectories.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
        }
        tensor_io::atomic_write(&path, bytes).map_err(|e| PipelineError::io(&path, e))?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_tensor(&mut self, name: &str, t: &Tensor) -> Result<(), PipelineError> {
        self.write(name, &tensor_io::encode(t))
    }

    pub fn write_json(&mut self, name: &str, v: &Value) -> Result<(), PipelineError> {
        let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn artifacts(&self) -> &BTreeMap<String, String> {
        &self.artifacts
    }

    /// Writes `manifest.json` and returns its value.
    pub fn finish(
        self,
        command: &str,
        seed: u64,
        config: &PipelineConfig,
        summary: Value,
    ) -> Result<Value, PipelineError> {
        let manifest = json!({
            "command": command,
            "seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config.to_json(),
            "artifacts": self.artifacts,
            "summary": summary,
        });
        let mut s = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        s.push('\n');
        let path = self.root.join("manifest.json");
        tensor_io::atomic_write(&path, s.as_bytes()).map_err(|e| PipelineError::io(&path, e))?;
        Ok(manifest)
    }
}

/// Reads a tensor, attaching the path to any error.
pub fn load_tensor(path: &str) -> Result<Tensor, PipelineError> {
    tensor_io::read_tensor(Path::new(path)).map_err(|source| PipelineError::Tensor {
        path: path.to_string(),
        source,
    })
}
