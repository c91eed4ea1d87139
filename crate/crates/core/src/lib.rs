//! Decomposed fMRI-to-video decoding toolkit.
//!
//! The crate covers the numerical core of a decode-by-decomposition pipeline:
//! fMRI preprocessing and windowing ([`preprocess`]), flow-codebook
//! quantization ([`flow_codebook`]), a trainable motion decoder ([`motion`]),
//! the evaluation metrics ([`metrics`]), differential neural encoding
//! ([`encoding`]), a synthetic generator with planted ground truth
//! ([`synthetic`]), and the file formats and batch commands that wire them
//! together ([`tensor_io`], [`config`], [`pipeline`]).

pub mod config;
pub mod encoding;
pub mod flow_codebook;
pub mod image;
pub mod metrics;
pub mod motion;
pub mod par;
pub mod pipeline;
pub mod preprocess;
pub mod seeding;
pub mod synthetic;
pub mod tensor_io;
