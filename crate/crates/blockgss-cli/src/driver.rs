//! Session runners for both separation modes.
//!
//! The online runner feeds audio through a strictly sequential sample source,
//! pushes hop-aligned chunks into the streaming STFT, hands each spectral
//! block to the engine, and assembles per-utterance spectra across block
//! boundaries. An utterance closes when the engine marks it finalized, when
//! it stops appearing in a later block, or at stream end. The offline runner
//! analyzes the whole session at once and enhances each diarized utterance
//! with bidirectional context.

use std::collections::HashMap;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use ndarray::{concatenate, Array2, Axis};
use num_complex::Complex64;

use blockgss::diarization::ActivityMatrix;
use blockgss::dereverb::{WpeConfig, WpeState};
use blockgss::eval::si_sdr;
use blockgss::offline::{enhance_utterance, OfflineConfig};
use blockgss::online::{OnlineConfig, OnlineGss};
use blockgss::stft::{analyze, synthesize, StftConfig, StreamingAnalyzer};

/// Sequential audio access; implementations must only ever reveal samples in
/// order, which is what makes the online runner's zero-lookahead claim
/// checkable.
pub trait SampleSource {
    fn num_channels(&self) -> usize;
    fn total_samples(&self) -> usize;
    /// Next `max_samples` (or fewer at stream end) per channel.
    fn next_chunk(&mut self, max_samples: usize) -> Option<Vec<Vec<f64>>>;
    /// Out-of-order or beyond-cursor requests observed so far.
    fn violations(&self) -> usize {
        0
    }
}

/// In-memory source that serves strictly sequential chunks.
pub struct MemorySource {
    channels: Vec<Vec<f64>>,
    position: usize,
}

impl MemorySource {
    pub fn new(channels: Vec<Vec<f64>>) -> Self {
        MemorySource {
            channels,
            position: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }
}

impl SampleSource for MemorySource {
    fn num_channels(&self) -> usize {
        self.channels.len()
    }

    fn total_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    fn next_chunk(&mut self, max_samples: usize) -> Option<Vec<Vec<f64>>> {
        let len = self.total_samples();
        if self.position >= len || max_samples == 0 {
            return None;
        }
        let end = (self.position + max_samples).min(len);
        let chunk = self
            .channels
            .iter()
            .map(|ch| ch[self.position..end].to_vec())
            .collect();
        self.position = end;
        Some(chunk)
    }
}

/// One fully assembled enhanced utterance.
#[derive(Debug, Clone)]
pub struct EmittedUtterance {
    pub speaker: String,
    pub source: usize,
    pub start_frame: usize,
    /// One past the last enhanced frame.
    pub end_frame: usize,
    /// Sample offset of the first synthesized sample in the session.
    pub start_sample: usize,
    pub samples: Vec<f64>,
    /// Beamformer reference channel of the last contributing block.
    pub reference: usize,
}

impl EmittedUtterance {
    pub fn start_sec(&self, stft: &StftConfig) -> f64 {
        stft.frame_start_sec(self.start_frame)
    }

    pub fn end_sec(&self, stft: &StftConfig) -> f64 {
        stft.frames_to_sec(self.end_frame)
    }
}

/// What a session run produced, with wall-clock timing of the processing
/// loop (audio ingest through synthesis, excluding file output and scoring).
#[derive(Debug)]
pub struct RunOutcome {
    pub utterances: Vec<EmittedUtterance>,
    pub audio_sec: f64,
    /// Time with at least one speaker active; overlapped speech counts once,
    /// so this never exceeds `audio_sec`.
    pub speech_sec: f64,
    pub processing_sec: f64,
    /// `Some` for online runs; the count comes from the sample source.
    pub lookahead_violations: Option<usize>,
}

/// Seconds with at least one non-noise source active, on the frame grid.
fn active_speech_sec(activity: &ActivityMatrix, stft: &StftConfig) -> f64 {
    let frames = (0..activity.num_frames())
        .filter(|&t| (1..activity.num_sources()).any(|k| activity.is_active(t, k)))
        .count();
    stft.frames_to_sec(frames)
}

struct PartialUtterance {
    speaker: String,
    source: usize,
    start_frame: usize,
    end_frame: usize,
    reference: usize,
    spectra: Vec<Array2<Complex64>>,
}

/// Streams the session block by block through the online engine.
pub fn run_online(
    source: &mut dyn SampleSource,
    activity: &ActivityMatrix,
    stft: &StftConfig,
    config: &OnlineConfig,
) -> Result<RunOutcome> {
    let num_channels = source.num_channels();
    let total_samples = source.total_samples();
    let frames_total = stft.num_frames(total_samples);
    ensure!(
        activity.num_frames() == frames_total,
        "activity covers {} frames but the audio has {frames_total}",
        activity.num_frames()
    );
    let labels = activity.labels().to_vec();
    let mut engine = OnlineGss::new(stft.clone(), num_channels, config.clone())?;
    let mut analyzer = StreamingAnalyzer::new(stft.clone(), num_channels);
    let chunk_samples = config.block_len * stft.hop;

    let mut open: HashMap<(usize, usize), PartialUtterance> = HashMap::new();
    let mut done: Vec<EmittedUtterance> = Vec::new();

    let started = Instant::now();
    while let Some(chunk) = source.next_chunk(chunk_samples) {
        let slices: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
        let block = analyzer.push(&slices)?;
        if block.num_frames() == 0 {
            continue;
        }
        let start = block.start_frame;
        let end = start + block.num_frames();
        let segments = engine.process_block(&block, activity.block(start, end), &labels)?;

        let mut present: Vec<(usize, usize)> = Vec::with_capacity(segments.len());
        for segment in segments {
            let key = (segment.source, segment.utterance_start);
            present.push(key);
            let partial = open.entry(key).or_insert_with(|| PartialUtterance {
                speaker: segment.speaker.clone(),
                source: segment.source,
                start_frame: segment.utterance_start,
                end_frame: segment.start_frame,
                reference: segment.reference,
                spectra: Vec::new(),
            });
            debug_assert_eq!(partial.end_frame, segment.start_frame, "block pieces tile the run");
            partial.end_frame = segment.end_frame;
            partial.reference = segment.reference;
            partial.spectra.push(segment.spectrum);
            if segment.finalized {
                let partial = open.remove(&key).expect("just inserted");
                done.push(assemble(partial, stft)?);
            }
        }
        let absent: Vec<(usize, usize)> = open
            .keys()
            .filter(|key| !present.contains(key))
            .copied()
            .collect();
        for key in absent {
            let partial = open.remove(&key).expect("key taken from the map");
            done.push(assemble(partial, stft)?);
        }
    }
    let mut leftovers: Vec<(usize, usize)> = open.keys().copied().collect();
    leftovers.sort_unstable();
    for key in leftovers {
        let partial = open.remove(&key).expect("key taken from the map");
        done.push(assemble(partial, stft)?);
    }
    let processing_sec = started.elapsed().as_secs_f64();

    done.sort_by_key(|utt| (utt.start_frame, utt.source));
    Ok(RunOutcome {
        audio_sec: total_samples as f64 / f64::from(stft.sample_rate_hz),
        speech_sec: active_speech_sec(activity, stft),
        processing_sec,
        lookahead_violations: Some(source.violations()),
        utterances: done,
    })
}

/// Enhances every diarized utterance over the whole pre-analyzed session.
pub fn run_offline(
    channels: &[Vec<f64>],
    activity: &ActivityMatrix,
    stft: &StftConfig,
    config: &OfflineConfig,
    wpe: &WpeConfig,
) -> Result<RunOutcome> {
    ensure!(!channels.is_empty(), "no audio channels");
    let total_samples = channels[0].len();
    let frames_total = stft.num_frames(total_samples);
    ensure!(
        activity.num_frames() == frames_total,
        "activity covers {} frames but the audio has {frames_total}",
        activity.num_frames()
    );

    let started = Instant::now();
    let mut utterances = Vec::new();
    if frames_total > 0 {
        let spectra = analyze(channels, stft)?;
        let mut wpe_state = WpeState::new(wpe.clone(), stft.num_freqs(), channels.len())?;
        let dereverbed = wpe_state.process_block(&spectra)?;
        for run in activity.utterance_runs() {
            let enhanced = enhance_utterance(
                dereverbed.frames.view(),
                activity.view(),
                stft,
                &run,
                config,
            )
            .with_context(|| {
                format!(
                    "utterance of {} at frames {}..{}",
                    activity.label(run.source),
                    run.start,
                    run.end
                )
            })?;
            let samples = synthesize(enhanced.spectrum.view(), stft)?;
            utterances.push(EmittedUtterance {
                speaker: activity.label(run.source).to_string(),
                source: run.source,
                start_frame: run.start,
                end_frame: run.end,
                start_sample: run.start * stft.hop,
                samples,
                reference: enhanced.reference,
            });
        }
    }
    let processing_sec = started.elapsed().as_secs_f64();

    Ok(RunOutcome {
        audio_sec: total_samples as f64 / f64::from(stft.sample_rate_hz),
        speech_sec: active_speech_sec(activity, stft),
        processing_sec,
        lookahead_violations: None,
        utterances,
    })
}

fn assemble(partial: PartialUtterance, stft: &StftConfig) -> Result<EmittedUtterance> {
    let views: Vec<_> = partial.spectra.iter().map(Array2::view).collect();
    let spectrum = concatenate(Axis(0), &views).context("utterance pieces share the frequency axis")?;
    debug_assert_eq!(spectrum.nrows(), partial.end_frame - partial.start_frame);
    let samples = synthesize(spectrum.view(), stft)?;
    Ok(EmittedUtterance {
        speaker: partial.speaker,
        source: partial.source,
        start_frame: partial.start_frame,
        end_frame: partial.end_frame,
        start_sample: partial.start_frame * stft.hop,
        samples,
        reference: partial.reference,
    })
}

/// SI-SDR of an emitted utterance against the matching slice of a full-session
/// reference; `None` when the slice is empty or silent.
pub fn score_utterance(utterance: &EmittedUtterance, reference: &[f64]) -> Option<f64> {
    let start = utterance.start_sample;
    if start >= reference.len() {
        return None;
    }
    let end = (start + utterance.samples.len()).min(reference.len());
    si_sdr(&utterance.samples[..end - start], &reference[start..end]).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use blockgss::diarization::{segments_to_activities, NOISE_SOURCE};
    use blockgss::eval::{generate_scene, SceneSpec};

    fn test_stft() -> StftConfig {
        StftConfig::new(16_000, 256, 64).unwrap()
    }

    fn test_scene() -> (blockgss::eval::Scene, ActivityMatrix, StftConfig) {
        let spec = SceneSpec {
            seed: 5,
            num_channels: 2,
            duration_sec: 10.0,
            snr_db: 20.0,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        let stft = test_stft();
        let frames = stft.num_frames(scene.mixture[0].len());
        let activity = segments_to_activities(&scene.segments, &stft, frames);
        (scene, activity, stft)
    }

    fn online_config() -> OnlineConfig {
        OnlineConfig {
            block_len: 40,
            context_len: 40,
            reference_channel: Some(0),
            ..OnlineConfig::default()
        }
    }

    #[test]
    fn online_emits_one_utterance_per_diarized_run() {
        let (scene, activity, stft) = test_scene();
        let expected = activity
            .utterance_runs()
            .iter()
            .filter(|r| r.source != NOISE_SOURCE)
            .count();
        let mut source = MemorySource::new(scene.mixture.clone());
        let outcome = run_online(&mut source, &activity, &stft, &online_config()).unwrap();
        assert_eq!(outcome.utterances.len(), expected);
        assert_eq!(outcome.lookahead_violations, Some(0));
        assert!(outcome.speech_sec > 0.0 && outcome.speech_sec <= outcome.audio_sec);
    }

    #[test]
    fn online_utterances_cover_their_diarized_spans() {
        let (scene, activity, stft) = test_scene();
        let mut source = MemorySource::new(scene.mixture.clone());
        let outcome = run_online(&mut source, &activity, &stft, &online_config()).unwrap();
        let mut runs: Vec<_> = activity
            .utterance_runs()
            .into_iter()
            .filter(|r| r.source != NOISE_SOURCE)
            .collect();
        runs.sort_by_key(|r| (r.start, r.source));
        for (utt, run) in outcome.utterances.iter().zip(&runs) {
            assert_eq!(utt.start_frame, run.start);
            assert_eq!(utt.end_frame, run.end);
            assert_eq!(utt.speaker, activity.label(run.source));
            assert_eq!(utt.start_sample, run.start * stft.hop);
            let expected_len = (run.end - run.start - 1) * stft.hop + stft.window_len;
            assert_eq!(utt.samples.len(), expected_len);
            assert!(utt.samples.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn offline_matches_run_structure_and_improves_on_mixture() {
        let (scene, activity, stft) = test_scene();
        let config = OfflineConfig {
            em_iterations: 5,
            context_sec: 2.0,
            reference_channel: Some(0),
            ..OfflineConfig::default()
        };
        let outcome =
            run_offline(&scene.mixture, &activity, &stft, &config, &WpeConfig::default_online())
                .unwrap();
        let expected = activity
            .utterance_runs()
            .iter()
            .filter(|r| r.source != NOISE_SOURCE)
            .count();
        assert_eq!(outcome.utterances.len(), expected);
        assert!(outcome.lookahead_violations.is_none());

        let refs: Vec<&Vec<f64>> = scene.references.iter().collect();
        let mut improved = 0usize;
        let mut total = 0usize;
        for utt in &outcome.utterances {
            let idx: usize = utt.speaker.trim_start_matches("spk").parse::<usize>().unwrap() - 1;
            let reference = refs[idx];
            let enhanced = score_utterance(utt, reference);
            let end = (utt.start_sample + utt.samples.len()).min(reference.len());
            let baseline =
                si_sdr(&scene.mixture[0][utt.start_sample..end], &reference[utt.start_sample..end])
                    .ok();
            if let (Some(enhanced), Some(baseline)) = (enhanced, baseline) {
                total += 1;
                if enhanced > baseline {
                    improved += 1;
                }
            }
        }
        assert!(total > 0);
        assert!(
            improved * 2 > total,
            "enhancement beat the mixture on only {improved} of {total} utterances"
        );
    }

    #[test]
    fn silent_session_emits_nothing() {
        let stft = test_stft();
        let channels = vec![vec![0.0; 16_000 * 2]; 2];
        let frames = stft.num_frames(channels[0].len());
        let activity =
            segments_to_activities(&blockgss::diarization::SegmentList::default(), &stft, frames);
        let mut source = MemorySource::new(channels.clone());
        let online = run_online(&mut source, &activity, &stft, &online_config()).unwrap();
        assert!(online.utterances.is_empty());
        assert_eq!(online.speech_sec, 0.0);
        let offline = run_offline(
            &channels,
            &activity,
            &stft,
            &OfflineConfig::default(),
            &WpeConfig::default_online(),
        )
        .unwrap();
        assert!(offline.utterances.is_empty());
    }

    #[test]
    fn online_is_deterministic_across_runs() {
        let (scene, activity, stft) = test_scene();
        let run = |chunk_cfg: OnlineConfig| {
            let mut source = MemorySource::new(scene.mixture.clone());
            run_online(&mut source, &activity, &stft, &chunk_cfg).unwrap()
        };
        let a = run(online_config());
        let b = run(online_config());
        assert_eq!(a.utterances.len(), b.utterances.len());
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(x.samples, y.samples, "same input must give identical output");
        }
    }
}
