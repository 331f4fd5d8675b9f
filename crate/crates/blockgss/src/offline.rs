//! Utterance-wise offline separation.
//!
//! The conventional batch pipeline used as a quality reference: for each
//! utterance, take its frames plus symmetric context, run the guided mixture
//! model EM to convergence on that window, then beamform and return only the
//! utterance interval. Operates on session features that are already
//! dereverberated, so online/offline comparisons differ only in the
//! separation algorithm.

use ndarray::{s, Array2, ArrayView2, ArrayView3};
use num_complex::Complex64;
use std::ops::Range;

use crate::beamform;
use crate::cacgmm::{offline_em, CacgmmConfig, NormalizedFeatures};
use crate::diarization::{UtteranceRun, NOISE_SOURCE};
use crate::stft::StftConfig;
use crate::{Error, Result};

/// Offline enhancement parameters.
#[derive(Debug, Clone)]
pub struct OfflineConfig {
    /// Context taken before and after the utterance, in seconds.
    pub context_sec: f64,
    /// Guided EM iterations per utterance window.
    pub em_iterations: usize,
    /// Fixed beamformer reference channel; `None` selects by SNR.
    pub reference_channel: Option<usize>,
    pub cacgmm: CacgmmConfig,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            context_sec: 10.0,
            em_iterations: 20,
            reference_channel: None,
            cacgmm: CacgmmConfig::default(),
        }
    }
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.em_iterations == 0 {
            return Err(Error::InvalidConfig(
                "offline EM needs at least one iteration".into(),
            ));
        }
        if !(self.context_sec >= 0.0 && self.context_sec.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "context must be a nonnegative duration, got {}",
                self.context_sec
            )));
        }
        Ok(())
    }

    /// Context length in frames for the given analysis grid.
    pub fn context_frames(&self, stft: &StftConfig) -> usize {
        (self.context_sec * stft.sample_rate_hz as f64 / stft.hop as f64).round() as usize
    }
}

/// Enhanced spectrum for one utterance, clipped back to its own frames.
#[derive(Debug, Clone)]
pub struct EnhancedUtterance {
    /// `(utterance frames, F)` single-channel spectrum.
    pub spectrum: Array2<Complex64>,
    /// Beamformer reference channel used.
    pub reference: usize,
    pub selection_degenerate: bool,
    /// Session frame range the EM actually consumed (utterance plus clipped
    /// contexts).
    pub window: Range<usize>,
}

/// Runs the full offline pipeline for one utterance of a session.
///
/// `features` is the dereverberated session `(T, F, M)` and `activities` the
/// matching `(T, K)` frame activities. Only frames inside the utterance window
/// (utterance plus up to `context_sec` on each side, clipped to the session)
/// are read.
pub fn enhance_utterance(
    features: ArrayView3<Complex64>,
    activities: ArrayView2<u8>,
    stft: &StftConfig,
    run: &UtteranceRun,
    config: &OfflineConfig,
) -> Result<EnhancedUtterance> {
    config.validate()?;
    let (t_len, _, _) = features.dim();
    if activities.nrows() != t_len {
        return Err(Error::ShapeMismatch(format!(
            "activities cover {} frames, session has {t_len}",
            activities.nrows()
        )));
    }
    if run.source == NOISE_SOURCE {
        return Err(Error::NoiseAsTarget(run.source));
    }
    if run.start >= run.end {
        return Err(Error::EmptyInput("utterance has no frames"));
    }
    if run.end > t_len {
        return Err(Error::ShapeMismatch(format!(
            "utterance ends at frame {}, session has {t_len}",
            run.end
        )));
    }

    let context = config.context_frames(stft);
    let window = run.start.saturating_sub(context)..(run.end + context).min(t_len);
    let window_features = features.slice(s![window.clone(), .., ..]);
    let window_activities = activities.slice(s![window.clone(), ..]);

    let normalized = NormalizedFeatures::from_spectra(window_features);
    let (posteriors, _) = offline_em(
        &normalized,
        window_activities,
        config.em_iterations,
        config.cacgmm,
    )?;

    let emit = (run.start - window.start)..(run.end - window.start);
    let beamformed = beamform::beamform_segment(
        window_features,
        posteriors.gammas.view(),
        run.source,
        emit,
        config.reference_channel,
    )?;
    Ok(EnhancedUtterance {
        spectrum: beamformed.spectrum,
        reference: beamformed.weights.reference,
        selection_degenerate: beamformed.selection_degenerate,
        window,
    })
}
