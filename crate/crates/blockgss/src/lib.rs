//! Block-online guided source separation.
//!
//! Separates overlapping speakers from a multichannel recording, guided by
//! diarization (who speaks when). Audio is processed in fixed-length blocks:
//! each block is dereverberated, a spatial mixture model is refined on the
//! block plus a short context of past frames, and every utterance overlapping
//! the block is extracted with an MVDR beamformer. A conventional offline
//! pipeline over per-utterance windows is included as a reference point.
//!
//! The crate is organized along the processing chain:
//!
//! * [`stft`] converts between waveforms and time-frequency frames
//! * [`dereverb`] applies recursive multichannel linear prediction
//! * [`cacgmm`] estimates per-source time-frequency masks with a guided
//!   mixture of complex angular central Gaussians
//! * [`beamform`] turns masks into MVDR filters and enhanced spectra
//! * [`online`] drives the block-online pipeline end to end
//! * [`offline`] runs the per-utterance batch pipeline
//! * [`diarization`] parses segment annotations into frame activities
//! * [`eval`] generates synthetic scenes and scores separation quality

pub mod beamform;
pub mod cacgmm;
pub mod dereverb;
pub mod diarization;
pub mod eval;
mod linalg;
pub mod offline;
pub mod online;
pub mod stft;

#[cfg(doctest)]
pub mod doctests;

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("channel length mismatch: channel {channel} has {got} samples, expected {expected}")]
    ChannelLengthMismatch {
        channel: usize,
        got: usize,
        expected: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is singular beyond regularization (frequency {freq}, source {source_index})")]
    SingularMatrix { freq: usize, source_index: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("source {0} is the noise class, expected a speaker")]
    NoiseAsTarget(usize),
    #[error("activity matrix narrowed from {had} to {got} sources; sources never disappear")]
    ActivityShrank { had: usize, got: usize },
    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),
}

pub type Result<T> = std::result::Result<T, Error>;
