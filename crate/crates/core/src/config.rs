//! Pipeline configuration: one JSON document with a section per module.
//! Absent keys take the documented defaults; unknown keys are rejected with
//! their JSON path. Input paths have no default and are checked by the
//! subcommand that needs them.

use crate::encoding::{EncodingConfig, NegativeCorrelation};
use crate::flow_codebook::{DEFAULT_FLOW_GRID, DEFAULT_MAX_ITERS, DEFAULT_N_VEC, DEFAULT_TOLERANCE};
use crate::metrics::{Aggregation, DEFAULT_COVERAGE_THRESHOLDS, DEFAULT_NWAY_TRIALS};
use crate::motion::{DEFAULT_LAMBDA2, DEFAULT_LEARNING_RATE};
use crate::preprocess::DEFAULT_SCENE_THRESHOLD;
use crate::synthetic::SyntheticConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("missing required config key `{0}`")]
    Missing(String),
    #[error("invalid value at `{path}`: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Returns the value of an input key or the error naming its path.
pub fn require<'a, T>(value: &'a Option<T>, path: &str) -> Result<&'a T, ConfigError> {
    value.as_ref().ok_or_else(|| ConfigError::Missing(path.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoSection {
    pub n_frames: usize,
    pub fps: f64,
    pub frame_shape: [usize; 2],
    pub stimulus_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    /// Repeated runs of the same stimulus, each a `T x H x W` tensor.
    pub runs: Option<Vec<String>>,
    pub video: Option<VideoSection>,
    /// Optional `m x H x W` frames in [0, 1] (f64) or 0..=255 (u8) for
    /// scene-change filtering.
    pub video_frames: Option<String>,
    pub tr_seconds: f64,
    pub shift_seconds: f64,
    pub window_seconds: f64,
    pub alpha: f64,
    /// Defaults to `window_seconds` (non-overlapping windows).
    pub stride_seconds: Option<f64>,
    pub scene_threshold: f64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            runs: None,
            video: None,
            video_frames: None,
            tr_seconds: 2.0,
            shift_seconds: 6.0,
            window_seconds: 2.0,
            alpha: 1.0,
            stride_seconds: None,
            scene_threshold: DEFAULT_SCENE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookSection {
    /// `N x H x W x 2` flow tensor.
    pub flows: Option<String>,
    pub n_vec: usize,
    pub max_iters: usize,
    pub tolerance: f64,
    /// Flows of another shape are resampled to this `[height, width]`.
    pub grid: [usize; 2],
}

impl Default for CodebookSection {
    fn default() -> Self {
        Self {
            flows: None,
            n_vec: DEFAULT_N_VEC,
            max_iters: DEFAULT_MAX_ITERS,
            tolerance: DEFAULT_TOLERANCE,
            grid: [DEFAULT_FLOW_GRID, DEFAULT_FLOW_GRID],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    /// Dataset directory as written by `synth`.
    pub dataset: Option<String>,
    /// Codebook JSON; fitted on the training split when absent.
    pub codebook: Option<String>,
    pub d_h: usize,
    pub branch_depth: usize,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Leading fraction of samples used for training.
    pub train_fraction: f64,
    /// Also train the image-only variant.
    pub ablation: bool,
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self {
            dataset: None,
            codebook: None,
            d_h: 32,
            branch_depth: 1,
            lambda2: DEFAULT_LAMBDA2,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 30,
            batch_size: 16,
            train_fraction: 0.8,
            ablation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// `N x C` classifier scores and `N` ground-truth labels (i32).
    pub scores: Option<String>,
    pub labels: Option<String>,
    /// `N x H x W` u8 masks.
    pub gt_masks: Option<String>,
    pub pred_masks: Option<String>,
    /// `N x H x W` or `N x F x H x W` f64 frames.
    pub gt_frames: Option<String>,
    pub pred_frames: Option<String>,
    /// `N x H x W x 2` flows and `N x H x W` u8 foreground masks.
    pub gt_flow: Option<String>,
    pub pred_flow: Option<String>,
    pub fg_masks: Option<String>,
    pub codebook: Option<String>,
    pub data_range: f64,
    pub nway: Vec<usize>,
    pub top_k: Vec<usize>,
    pub trials: usize,
    pub coverage_thresholds: Vec<f64>,
    pub aggregation: Aggregation,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            scores: None,
            labels: None,
            gt_masks: None,
            pred_masks: None,
            gt_frames: None,
            pred_frames: None,
            gt_flow: None,
            pred_flow: None,
            fg_masks: None,
            codebook: None,
            data_range: 1.0,
            nway: vec![2, 50],
            top_k: vec![1],
            trials: DEFAULT_NWAY_TRIALS,
            coverage_thresholds: DEFAULT_COVERAGE_THRESHOLDS.to_vec(),
            aggregation: Aggregation::PerSample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingSection {
    /// `T x H x W` fMRI series.
    pub fmri: Option<String>,
    /// `T x D` embeddings.
    pub e_sem: Option<String>,
    pub e_spa: Option<String>,
    /// Optional `H x W` u8 voxel support.
    pub voxel_mask: Option<String>,
    pub n_components: usize,
    pub window: usize,
    pub smoothing_sigma: f64,
    pub lambda_grid: Vec<f64>,
    pub train_fraction: f64,
    pub negative_correlation: NegativeCorrelation,
}

impl Default for EncodingSection {
    fn default() -> Self {
        let d = EncodingConfig::default();
        Self {
            fmri: None,
            e_sem: None,
            e_spa: None,
            voxel_mask: None,
            n_components: d.n_components,
            window: d.window,
            smoothing_sigma: d.smoothing_sigma,
            lambda_grid: d.lambda_grid,
            train_fraction: d.train_fraction,
            negative_correlation: d.negative_correlation,
        }
    }
}

impl EncodingSection {
    pub fn params(&self) -> EncodingConfig {
        EncodingConfig {
            n_components: self.n_components,
            window: self.window,
            smoothing_sigma: self.smoothing_sigma,
            lambda_grid: self.lambda_grid.clone(),
            train_fraction: self.train_fraction,
            negative_correlation: self.negative_correlation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preprocess: PreprocessSection,
    pub codebook: CodebookSection,
    pub decoder: DecoderSection,
    pub metrics: MetricsSection,
    pub encoding: EncodingSection,
    pub synth: SyntheticConfig,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Parse {
                path,
                message: e.into_inner().to_string(),
            }
        })
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                Self::from_json(&text)
            }
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
