//! Block-online separation engine.
//!
//! Drives the full streaming pipeline one block at a time: dereverberation,
//! silent-block skipping, active-source extraction, new-source admission,
//! a single guided EM iteration over block plus context, shape updates by
//! accumulation or exponential decay, and per-utterance beamformed emission
//! clipped to the current block. Latency is bounded by the block length and
//! memory by the context length; neither grows with session duration.
//!
//! A single iteration per block is sufficient once the context carries
//! posteriors refined by earlier blocks. While the context queue is still
//! filling, that support is missing, so those first blocks get extra EM
//! passes over the seed posteriors; see `OnlineConfig::warmup_iterations`.

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;

use crate::beamform;
use crate::cacgmm::{
    self, CacgmmConfig, CacgmmState, NormalizedFeatures, PosteriorBlock, Weighting,
};
use crate::dereverb::{WpeConfig, WpeState};
use crate::diarization::NOISE_SOURCE;
use crate::stft::{SpectralBlock, StftConfig};
use crate::{Error, Result};

/// How source shape matrices incorporate each new block estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStrategy {
    /// Convex blend weighted by accumulated posterior mass; equal weight to
    /// all past frames.
    Accumulation,
    /// Exponential forgetting `B ← ηB + B⁺`; adapts to moving sources.
    Decay,
}

/// Streaming engine parameters.
#[derive(Debug, Clone)]
pub struct OnlineConfig {
    /// Block length L in frames; emission latency is bounded by this.
    pub block_len: usize,
    /// Context length C in frames kept from the immediate past.
    pub context_len: usize,
    pub strategy: UpdateStrategy,
    /// Forgetting factor for the decay strategy.
    pub eta: f64,
    /// Sources admitted with less active speech than this are re-admitted at
    /// their next appearance.
    pub min_new_source_sec: f64,
    /// EM iterations per block while the context queue is still filling.
    /// A single iteration relies on refined context posteriors, which do not
    /// exist yet at session start; extra passes there close most of the gap
    /// without adding latency or lookahead. Steady state always uses one.
    pub warmup_iterations: usize,
    /// Fixed beamformer reference channel; `None` selects by SNR per
    /// utterance.
    pub reference_channel: Option<usize>,
    pub wpe: WpeConfig,
    pub cacgmm: CacgmmConfig,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            block_len: 150,
            context_len: 150,
            strategy: UpdateStrategy::Decay,
            eta: 0.9,
            min_new_source_sec: 0.2,
            warmup_iterations: 4,
            reference_channel: None,
            wpe: WpeConfig::default_online(),
            cacgmm: CacgmmConfig::default(),
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_len == 0 {
            return Err(Error::InvalidConfig("block length must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(format!(
                "decay factor must lie in [0, 1), got {}",
                self.eta
            )));
        }
        if !(self.min_new_source_sec >= 0.0 && self.min_new_source_sec.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "minimum new-source duration must be nonnegative, got {}",
                self.min_new_source_sec
            )));
        }
        if self.warmup_iterations == 0 {
            return Err(Error::InvalidConfig(
                "warm-up needs at least one iteration".into(),
            ));
        }
        self.wpe.validate()
    }
}

/// Enhanced audio for the part of one utterance that overlaps one block.
///
/// Utterances spanning several blocks yield one segment per block, all sharing
/// `utterance_start`; `finalized` marks the segment containing the utterance
/// end. An utterance whose speaker goes silent exactly at a block boundary
/// produces no further segments, so consumers should also close any tracked
/// utterance that stops appearing.
#[derive(Debug, Clone)]
pub struct UtteranceSegment {
    pub source: usize,
    pub speaker: String,
    /// Global frame where the utterance began.
    pub utterance_start: usize,
    /// Global first emitted frame (clipped to the block).
    pub start_frame: usize,
    /// Global one-past-last emitted frame.
    pub end_frame: usize,
    /// `(end_frame - start_frame, F)` enhanced spectrum.
    pub spectrum: Array2<Complex64>,
    pub finalized: bool,
    /// Beamformer reference channel used for this segment.
    pub reference: usize,
}

/// Sources with at least one active frame in the given window, noise included.
pub fn active_set(activities: ArrayView2<u8>) -> Vec<usize> {
    let mut set = vec![NOISE_SOURCE];
    for k in 0..activities.ncols() {
        if k != NOISE_SOURCE && activities.column(k).iter().any(|&d| d != 0) {
            set.push(k);
        }
    }
    set.sort_unstable();
    set
}

#[derive(Debug, Clone)]
struct SourceInfo {
    label: String,
    admitted: bool,
    stable: bool,
    duration_sec: f64,
    first_seen_block: Option<usize>,
}

/// Rolling window of the most recent context frames.
struct ContextQueue {
    capacity: usize,
    features: Array3<Complex64>,
    activities: Array2<u8>,
    posteriors: Array3<f64>,
}

impl ContextQueue {
    fn new(capacity: usize, num_freqs: usize, num_channels: usize) -> Self {
        ContextQueue {
            capacity,
            features: Array3::default((0, num_freqs, num_channels)),
            activities: Array2::zeros((0, 1)),
            posteriors: Array3::zeros((0, num_freqs, 1)),
        }
    }

    fn len(&self) -> usize {
        self.features.shape()[0]
    }

    fn pad_sources(&mut self, num_sources: usize) {
        let (t_len, k_len) = self.activities.dim();
        if num_sources <= k_len {
            return;
        }
        let mut activities = Array2::zeros((t_len, num_sources));
        activities
            .slice_mut(s![.., ..k_len])
            .assign(&self.activities);
        self.activities = activities;
        let f_len = self.posteriors.shape()[1];
        let mut posteriors = Array3::zeros((t_len, f_len, num_sources));
        posteriors
            .slice_mut(s![.., .., ..k_len])
            .assign(&self.posteriors);
        self.posteriors = posteriors;
    }

    fn zero_source_posteriors(&mut self, source: usize) {
        if source < self.posteriors.shape()[2] {
            self.posteriors.slice_mut(s![.., .., source]).fill(0.0);
        }
    }

    fn source_mass(&self, source: usize) -> f64 {
        if source < self.posteriors.shape()[2] {
            self.posteriors.slice(s![.., .., source]).sum()
        } else {
            0.0
        }
    }

    /// Replaces the queue with the trailing `capacity` frames of the window.
    fn retain_tail(
        &mut self,
        features: &Array3<Complex64>,
        activities: &Array2<u8>,
        posteriors: &Array3<f64>,
    ) {
        let total = features.shape()[0];
        let keep = total.min(self.capacity);
        let from = total - keep;
        self.features = features.slice(s![from.., .., ..]).to_owned();
        self.activities = activities.slice(s![from.., ..]).to_owned();
        self.posteriors = posteriors.slice(s![from.., .., ..]).to_owned();
    }
}

/// Per-source run tracking across block boundaries.
struct UtteranceTracker {
    open_starts: Vec<Option<usize>>,
}

struct TrackedRun {
    source: usize,
    utterance_start: usize,
    emit_start: usize,
    emit_end: usize,
    finalized: bool,
}

impl UtteranceTracker {
    fn new() -> Self {
        UtteranceTracker {
            open_starts: Vec::new(),
        }
    }

    fn update(&mut self, activities: ArrayView2<u8>, block_start: usize) -> Vec<TrackedRun> {
        let (t_len, k_len) = activities.dim();
        if self.open_starts.len() < k_len {
            self.open_starts.resize(k_len, None);
        }
        let mut runs = Vec::new();
        for k in 0..k_len {
            if k == NOISE_SOURCE {
                continue;
            }
            for t in 0..t_len {
                let active = activities[(t, k)] != 0;
                match (active, self.open_starts[k]) {
                    (true, None) => self.open_starts[k] = Some(block_start + t),
                    (false, Some(start)) => {
                        runs.push(TrackedRun {
                            source: k,
                            utterance_start: start,
                            emit_start: start.max(block_start),
                            emit_end: block_start + t,
                            finalized: true,
                        });
                        self.open_starts[k] = None;
                    }
                    _ => {}
                }
            }
            if let Some(start) = self.open_starts[k] {
                runs.push(TrackedRun {
                    source: k,
                    utterance_start: start,
                    emit_start: start.max(block_start),
                    emit_end: block_start + t_len,
                    finalized: false,
                });
            }
        }
        runs.retain(|run| run.emit_end > run.emit_start);
        runs.sort_by_key(|run| (run.emit_start, run.source));
        runs
    }
}

/// Streaming separation engine; one instance per audio session.
pub struct OnlineGss {
    config: OnlineConfig,
    stft: StftConfig,
    num_channels: usize,
    wpe: WpeState,
    state: CacgmmState,
    registry: Vec<SourceInfo>,
    queue: ContextQueue,
    tracker: UtteranceTracker,
    frames_processed: usize,
    blocks_processed: usize,
    last_block_posteriors: Option<PosteriorBlock>,
}

impl OnlineGss {
    pub fn new(stft: StftConfig, num_channels: usize, config: OnlineConfig) -> Result<Self> {
        config.validate()?;
        if num_channels == 0 {
            return Err(Error::InvalidConfig("need at least one channel".into()));
        }
        if let Some(reference) = config.reference_channel {
            if reference >= num_channels {
                return Err(Error::InvalidConfig(format!(
                    "reference channel {reference} outside {num_channels} channels"
                )));
            }
        }
        let num_freqs = stft.num_freqs();
        let wpe = WpeState::new(config.wpe, num_freqs, num_channels)?;
        let mut state = CacgmmState::new(num_freqs, num_channels, config.cacgmm);
        state.add_source();
        let registry = vec![SourceInfo {
            label: "noise".into(),
            admitted: false,
            stable: true,
            duration_sec: 0.0,
            first_seen_block: None,
        }];
        let queue = ContextQueue::new(config.context_len, num_freqs, num_channels);
        Ok(OnlineGss {
            config,
            stft,
            num_channels,
            wpe,
            state,
            registry,
            queue,
            tracker: UtteranceTracker::new(),
            frames_processed: 0,
            blocks_processed: 0,
            last_block_posteriors: None,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.registry.len()
    }

    /// Noise plus every speaker that has been admitted so far.
    pub fn num_admitted(&self) -> usize {
        1 + self
            .registry
            .iter()
            .skip(1)
            .filter(|info| info.admitted)
            .count()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn frames_processed(&self) -> usize {
        self.frames_processed
    }

    pub fn state(&self) -> &CacgmmState {
        &self.state
    }

    /// Final posteriors over the most recent block, one row per block frame.
    pub fn last_block_posteriors(&self) -> Option<&PosteriorBlock> {
        self.last_block_posteriors.as_ref()
    }

    /// Processes one block of raw spectra with frame-aligned activities.
    ///
    /// `labels` names the speaker columns `1..K`; new columns extend the
    /// source registry. Returns the beamformed segments of every utterance
    /// overlapping this block.
    pub fn process_block(
        &mut self,
        raw: &SpectralBlock,
        activities: ArrayView2<u8>,
        labels: &[String],
    ) -> Result<Vec<UtteranceSegment>> {
        let (t_len, f_len, m) = raw.frames.dim();
        if t_len == 0 {
            return Err(Error::EmptyInput("block has no frames"));
        }
        if t_len > self.config.block_len {
            return Err(Error::InvalidConfig(format!(
                "block of {t_len} frames exceeds configured length {}",
                self.config.block_len
            )));
        }
        if f_len != self.stft.num_freqs() || m != self.num_channels {
            return Err(Error::ShapeMismatch(format!(
                "block ({t_len}, {f_len}, {m}) does not match engine ({}, {})",
                self.stft.num_freqs(),
                self.num_channels
            )));
        }
        if activities.nrows() != t_len {
            return Err(Error::ShapeMismatch(format!(
                "activities cover {} frames, block has {t_len}",
                activities.nrows()
            )));
        }
        let activities = activities.to_owned();
        let k_len = activities.ncols();
        if k_len < self.registry.len() {
            return Err(Error::ActivityShrank {
                had: self.registry.len(),
                got: k_len,
            });
        }
        if labels.len() + 1 != k_len {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} speaker columns",
                labels.len(),
                k_len - 1
            )));
        }
        if activities.column(NOISE_SOURCE).iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(
                "noise column must be active in every frame".into(),
            ));
        }
        for (i, label) in labels.iter().enumerate() {
            let source = i + 1;
            if source < self.registry.len() {
                if self.registry[source].label != *label {
                    return Err(Error::InvalidConfig(format!(
                        "source {source} was '{}', now '{label}'",
                        self.registry[source].label
                    )));
                }
            } else {
                self.registry.push(SourceInfo {
                    label: label.clone(),
                    admitted: false,
                    stable: false,
                    duration_sec: 0.0,
                    first_seen_block: None,
                });
                self.state.add_source();
            }
        }
        self.queue.pad_sources(k_len);

        let dereverbed = self.wpe.process_block(raw)?;
        let block_start = self.frames_processed;
        let all_sources: Vec<usize> = (0..k_len).collect();

        let speaker_in_block = (1..k_len).any(|k| activities.column(k).iter().any(|&d| d != 0));
        if !speaker_in_block {
            let posts = cacgmm::init_posteriors(activities.view(), f_len, &all_sources)?;
            let merged_feats = concatenate(
                Axis(0),
                &[self.queue.features.view(), dereverbed.frames.view()],
            )
            .expect("queue and block dims agree");
            let merged_acts =
                concatenate(Axis(0), &[self.queue.activities.view(), activities.view()]).unwrap();
            let merged_posts = concatenate(
                Axis(0),
                &[self.queue.posteriors.view(), posts.gammas.view()],
            )
            .unwrap();
            self.queue
                .retain_tail(&merged_feats, &merged_acts, &merged_posts);
            self.tracker.update(activities.view(), block_start);
            self.last_block_posteriors = Some(posts);
            self.frames_processed += t_len;
            self.blocks_processed += 1;
            debug_assert!(self.queue.len() <= self.config.context_len);
            return Ok(Vec::new());
        }

        let features_plus = concatenate(
            Axis(0),
            &[self.queue.features.view(), dereverbed.frames.view()],
        )
        .expect("queue and block dims agree");
        let activities_plus =
            concatenate(Axis(0), &[self.queue.activities.view(), activities.view()]).unwrap();
        let t_plus = features_plus.shape()[0];
        let window_start = block_start - self.queue.len();

        let mut active = Vec::new();
        let mut new_sources = Vec::new();
        for k in 0..k_len {
            let window_active = k == NOISE_SOURCE
                || activities_plus.column(k).iter().any(|&d| d != 0);
            if !window_active {
                continue;
            }
            let block_active = k == NOISE_SOURCE
                || activities.column(k).iter().any(|&d| d != 0);
            let info = &self.registry[k];
            let is_new = !info.admitted || !info.stable;
            if is_new {
                if block_active {
                    active.push(k);
                    new_sources.push(k);
                }
            } else if block_active || self.queue.source_mass(k) > 0.0 {
                active.push(k);
            }
        }

        for &k in &new_sources {
            self.queue.zero_source_posteriors(k);
            self.state.reset_source(k);
            let active_frames: usize = activities_plus
                .column(k)
                .iter()
                .map(|&d| usize::from(d != 0))
                .sum();
            let duration = self.stft.frames_to_sec(active_frames);
            let info = &mut self.registry[k];
            info.admitted = true;
            info.duration_sec = duration;
            info.stable = k == NOISE_SOURCE || duration >= self.config.min_new_source_sec;
            if info.first_seen_block.is_none() {
                info.first_seen_block = Some(self.blocks_processed);
            }
        }

        let block_init = cacgmm::init_posteriors(activities.view(), f_len, &active)?;
        let mut seeded = PosteriorBlock {
            gammas: concatenate(
                Axis(0),
                &[self.queue.posteriors.view(), block_init.gammas.view()],
            )
            .unwrap(),
        };
        let normalized = NormalizedFeatures::from_spectra(features_plus.view());

        let queue_filling = self.queue.len() < self.config.context_len;
        if queue_filling && self.config.warmup_iterations > 1 {
            let mut scratch = self.state.clone();
            for pass in 1..self.config.warmup_iterations {
                let alphas = cacgmm::m_step_alpha(&seeded, &active);
                scratch.set_alphas(&alphas, &active);
                for &k in &active {
                    let weighting = if pass == 1 && new_sources.contains(&k) {
                        Weighting::Unweighted
                    } else {
                        Weighting::ByCurrentShape
                    };
                    let estimate =
                        cacgmm::compute_block_shape(&normalized, &seeded, &scratch, k, weighting)?;
                    cacgmm::update_shape_decay(&mut scratch, k, &estimate, 0.0)?;
                }
                seeded = cacgmm::e_step_guided(
                    &normalized,
                    activities_plus.view(),
                    &scratch,
                    &active,
                )?;
            }
        }

        let alphas = cacgmm::m_step_alpha(&seeded, &active);
        self.state.set_alphas(&alphas, &active);

        let block_range = (t_plus - t_len)..t_plus;
        for &k in &active {
            let weighting = if new_sources.contains(&k) {
                Weighting::Unweighted
            } else {
                Weighting::ByCurrentShape
            };
            let estimate =
                cacgmm::compute_block_shape(&normalized, &seeded, &self.state, k, weighting)?;
            match self.config.strategy {
                UpdateStrategy::Accumulation => {
                    let block_mass = seeded.mass(k, block_range.clone());
                    cacgmm::update_shape_accumulation(&mut self.state, k, &block_mass, &estimate)?;
                }
                UpdateStrategy::Decay => {
                    cacgmm::update_shape_decay(&mut self.state, k, &estimate, self.config.eta)?;
                }
            }
        }

        let final_posts =
            cacgmm::e_step_guided(&normalized, activities_plus.view(), &self.state, &active)?;

        let runs = self.tracker.update(activities.view(), block_start);
        let mut segments = Vec::with_capacity(runs.len());
        for run in runs {
            let emit = (run.emit_start - window_start)..(run.emit_end - window_start);
            let beamformed = beamform::beamform_segment(
                features_plus.view(),
                final_posts.gammas.view(),
                run.source,
                emit,
                self.config.reference_channel,
            )?;
            segments.push(UtteranceSegment {
                source: run.source,
                speaker: self.registry[run.source].label.clone(),
                utterance_start: run.utterance_start,
                start_frame: run.emit_start,
                end_frame: run.emit_end,
                spectrum: beamformed.spectrum,
                finalized: run.finalized,
                reference: beamformed.weights.reference,
            });
        }

        let block_posts = PosteriorBlock {
            gammas: final_posts.gammas.slice(s![t_plus - t_len.., .., ..]).to_owned(),
        };
        self.queue
            .retain_tail(&features_plus, &activities_plus, &final_posts.gammas);
        self.last_block_posteriors = Some(block_posts);
        self.frames_processed += t_len;
        self.blocks_processed += 1;
        debug_assert!(self.queue.len() <= self.config.context_len);
        Ok(segments)
    }
}
