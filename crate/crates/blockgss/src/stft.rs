//! Short-time Fourier analysis and synthesis.
//!
//! Analysis slides a Hann window along each channel and keeps the
//! nonnegative half of the spectrum (`window_len / 2 + 1` bins). A trailing
//! partial frame is dropped, so `num_frames` is exact. Synthesis applies the
//! same window again and divides by the precomputed sum of squared windows,
//! which makes the round trip exact in the interior regardless of the hop.

use std::sync::Arc;

use ndarray::{Array3, ArrayView2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::{Error, Result};

/// Analysis/synthesis window shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// Periodic Hann window, `0.5 * (1 - cos(2 pi i / N))`.
    Hann,
}

/// Frame geometry shared by every stage of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub sample_rate_hz: u32,
    pub window_len: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl StftConfig {
    pub fn new(sample_rate_hz: u32, window_len: usize, hop: usize) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if window_len == 0 || window_len % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "window length must be even and positive, got {window_len}"
            )));
        }
        if hop == 0 || hop > window_len {
            return Err(Error::InvalidConfig(format!(
                "hop must be in 1..={window_len}, got {hop}"
            )));
        }
        Ok(Self {
            sample_rate_hz,
            window_len,
            hop,
            window: WindowKind::Hann,
        })
    }

    /// 64 ms window, 16 ms hop at 16 kHz: the geometry used throughout.
    pub fn default_16k() -> Self {
        Self::new(16_000, 1024, 256).expect("constants are valid")
    }

    /// Number of retained frequency bins.
    pub fn num_freqs(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Complete frames available from `len` samples; a partial tail is dropped.
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }

    /// Time of the first sample of frame `t`, in seconds.
    pub fn frame_start_sec(&self, t: usize) -> f64 {
        (t * self.hop) as f64 / self.sample_rate_hz as f64
    }

    /// Seconds covered by `frames` hops.
    pub fn frames_to_sec(&self, frames: usize) -> f64 {
        (frames * self.hop) as f64 / self.sample_rate_hz as f64
    }

    fn make_window(&self) -> Vec<f64> {
        let n = self.window_len;
        match self.window {
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
                .collect(),
        }
    }
}

/// A run of consecutive STFT frames, shaped `(frames, freqs, channels)`.
///
/// `start_frame` is the global index of the first frame, so blocks produced
/// by a streaming analyzer know their position in the session.
#[derive(Debug, Clone)]
pub struct SpectralBlock {
    pub frames: Array3<Complex64>,
    pub start_frame: usize,
}

impl SpectralBlock {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_freqs(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn num_channels(&self) -> usize {
        self.frames.shape()[2]
    }
}

/// Transforms multichannel audio into a [`SpectralBlock`] starting at frame 0.
pub fn analyze(channels: &[Vec<f64>], config: &StftConfig) -> Result<SpectralBlock> {
    if channels.is_empty() || channels[0].is_empty() {
        return Err(Error::EmptyInput("analyze needs at least one nonempty channel"));
    }
    let len = channels[0].len();
    for (i, ch) in channels.iter().enumerate() {
        if ch.len() != len {
            return Err(Error::ChannelLengthMismatch {
                channel: i,
                got: ch.len(),
                expected: len,
            });
        }
    }
    let mut analyzer = StreamingAnalyzer::new(config.clone(), channels.len());
    let refs: Vec<&[f64]> = channels.iter().map(|c| c.as_slice()).collect();
    analyzer.push(&refs)
}

/// Reconstructs one channel of audio from `(frames, freqs)` spectra.
///
/// The output spans `(frames - 1) * hop + window_len` samples. The
/// overlap-add normalization is clamped below a tenth of its peak, so edge
/// samples with thin window support fade toward zero instead of dividing by
/// a vanishing weight; modified spectra would otherwise spike there.
/// Imaginary parts that a real signal cannot produce (DC and Nyquist) are
/// discarded.
pub fn synthesize(frames: ArrayView2<'_, Complex64>, config: &StftConfig) -> Result<Vec<f64>> {
    let (num_frames, num_freqs) = frames.dim();
    if num_freqs != config.num_freqs() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} frequency bins, got {num_freqs}",
            config.num_freqs()
        )));
    }
    if num_frames == 0 {
        return Ok(Vec::new());
    }
    let n = config.window_len;
    let window = config.make_window();
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n);

    let out_len = (num_frames - 1) * config.hop + n;
    let mut out = vec![0.0f64; out_len];
    let mut norm = vec![0.0f64; out_len];
    let mut spectrum = vec![Complex64::default(); n];

    for t in 0..num_frames {
        for f in 0..num_freqs {
            spectrum[f] = frames[(t, f)];
        }
        for f in num_freqs..n {
            spectrum[f] = frames[(t, n - f)].conj();
        }
        ifft.process(&mut spectrum);
        let offset = t * config.hop;
        for i in 0..n {
            let sample = spectrum[i].re / n as f64;
            out[offset + i] += sample * window[i];
            norm[offset + i] += window[i] * window[i];
        }
    }
    let max_norm = norm.iter().fold(0.0f64, |acc, &w| acc.max(w));
    let floor = 0.1 * max_norm;
    for (o, w) in out.iter_mut().zip(&norm) {
        if *w >= floor && floor > 0.0 {
            *o /= *w;
        } else if floor > 0.0 {
            *o /= floor;
        } else {
            *o = 0.0;
        }
    }
    Ok(out)
}

/// Incremental analyzer: feed samples in arbitrary chunks, get frames out.
///
/// Produces exactly the frames `analyze` would, in order, never reading past
/// the samples pushed so far. Used by the online driver so each block's
/// frames are computed from audio received up to that block.
pub struct StreamingAnalyzer {
    config: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    buffers: Vec<Vec<f64>>,
    next_frame: usize,
}

impl StreamingAnalyzer {
    pub fn new(config: StftConfig, num_channels: usize) -> Self {
        let window = config.make_window();
        let fft = FftPlanner::new().plan_fft_forward(config.window_len);
        Self {
            config,
            window,
            fft,
            buffers: vec![Vec::new(); num_channels],
            next_frame: 0,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.buffers.len()
    }

    /// Global index of the next frame this analyzer will emit.
    pub fn next_frame(&self) -> usize {
        self.next_frame
    }

    /// Appends one chunk per channel and returns all newly completed frames.
    pub fn push(&mut self, chunks: &[&[f64]]) -> Result<SpectralBlock> {
        if chunks.len() != self.buffers.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} channels, got {}",
                self.buffers.len(),
                chunks.len()
            )));
        }
        let add = chunks.first().map_or(0, |c| c.len());
        for (i, chunk) in chunks.iter().enumerate() {
            if chunk.len() != add {
                return Err(Error::ChannelLengthMismatch {
                    channel: i,
                    got: chunk.len(),
                    expected: add,
                });
            }
            self.buffers[i].extend_from_slice(chunk);
        }

        let n = self.config.window_len;
        let hop = self.config.hop;
        let num_freqs = self.config.num_freqs();
        let buffered = self.buffers[0].len();
        let ready = if buffered < n { 0 } else { (buffered - n) / hop + 1 };

        let m = self.buffers.len();
        let mut frames = Array3::default((ready, num_freqs, m));
        let mut scratch = vec![Complex64::default(); n];
        for t in 0..ready {
            let offset = t * hop;
            for ch in 0..m {
                let src = &self.buffers[ch][offset..offset + n];
                for i in 0..n {
                    scratch[i] = Complex64::new(src[i] * self.window[i], 0.0);
                }
                self.fft.process(&mut scratch);
                for f in 0..num_freqs {
                    frames[(t, f, ch)] = scratch[f];
                }
            }
        }

        let consumed = ready * hop;
        for buf in &mut self.buffers {
            buf.drain(..consumed);
        }
        let block = SpectralBlock {
            frames,
            start_frame: self.next_frame,
        };
        self.next_frame += ready;
        Ok(block)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn frame_count_boundaries() {
        let cfg = StftConfig::new(16_000, 1024, 256).unwrap();
        assert_eq!(cfg.num_frames(0), 0);
        assert_eq!(cfg.num_frames(1023), 0);
        assert_eq!(cfg.num_frames(1024), 1);
        assert_eq!(cfg.num_frames(1024 + 255), 1);
        assert_eq!(cfg.num_frames(1024 + 256), 2);
        assert_eq!(cfg.num_frames(16_000), 1 + (16_000 - 1024) / 256);
    }

    #[test]
    fn hann_window_is_periodic() {
        let cfg = StftConfig::new(16_000, 8, 2).unwrap();
        let w = cfg.make_window();
        assert!(w[0].abs() < 1e-15);
        assert!((w[4] - 1.0).abs() < 1e-15);
        for i in 1..8 {
            assert!((w[i] - w[8 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn round_trip_reconstructs_interior() {
        let cfg = StftConfig::new(16_000, 256, 64).unwrap();
        let audio = noise(4096, 7);
        let block = analyze(&[audio.clone()], &cfg).unwrap();
        let rebuilt = synthesize(block.frames.index_axis(ndarray::Axis(2), 0), &cfg).unwrap();
        let lo = cfg.window_len;
        let hi = rebuilt.len().min(audio.len()) - cfg.window_len;
        let mut err = 0.0f64;
        let mut ref_energy = 0.0f64;
        for i in lo..hi {
            err += (rebuilt[i] - audio[i]).powi(2);
            ref_energy += audio[i].powi(2);
        }
        assert!((err / ref_energy).sqrt() < 1e-10);
    }

    #[test]
    fn analysis_is_linear() {
        let cfg = StftConfig::new(16_000, 128, 32).unwrap();
        let a = noise(1000, 1);
        let b = noise(1000, 2);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let sa = analyze(&[a], &cfg).unwrap();
        let sb = analyze(&[b], &cfg).unwrap();
        let ss = analyze(&[sum], &cfg).unwrap();
        let diff = &sa.frames + &sb.frames - &ss.frames;
        let worst = diff.iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(worst < 1e-9);
    }

    #[test]
    fn single_frame_synthesis_is_local() {
        let cfg = StftConfig::new(16_000, 64, 16).unwrap();
        let mut frames = ndarray::Array2::<Complex64>::default((4, cfg.num_freqs()));
        for f in 0..cfg.num_freqs() {
            frames[(2, f)] = Complex64::new(1.0, 0.0);
        }
        let audio = synthesize(frames.view(), &cfg).unwrap();
        for (i, s) in audio.iter().enumerate() {
            let inside = (32..32 + 64).contains(&i);
            if !inside {
                assert!(s.abs() < 1e-12, "sample {i} leaked: {s}");
            }
        }
    }

    #[test]
    fn streaming_matches_batch_under_odd_chunking() {
        let cfg = StftConfig::new(16_000, 128, 32).unwrap();
        let a = noise(3000, 3);
        let b = noise(3000, 4);
        let batch = analyze(&[a.clone(), b.clone()], &cfg).unwrap();

        let mut streamer = StreamingAnalyzer::new(cfg.clone(), 2);
        let mut collected: Vec<Array3<Complex64>> = Vec::new();
        let mut pos = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        while pos < a.len() {
            let take = rng.gen_range(1..700).min(a.len() - pos);
            let block = streamer
                .push(&[&a[pos..pos + take], &b[pos..pos + take]])
                .unwrap();
            if block.num_frames() > 0 {
                collected.push(block.frames);
            }
            pos += take;
        }
        let total: usize = collected.iter().map(|f| f.shape()[0]).sum();
        assert_eq!(total, batch.num_frames());
        let mut t0 = 0;
        for part in collected {
            let t = part.shape()[0];
            for dt in 0..t {
                for f in 0..batch.num_freqs() {
                    for ch in 0..2 {
                        let d = (part[(dt, f, ch)] - batch.frames[(t0 + dt, f, ch)]).norm();
                        assert!(d < 1e-12);
                    }
                }
            }
            t0 += t;
        }
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        assert!(StftConfig::new(16_000, 0, 1).is_err());
        assert!(StftConfig::new(16_000, 1023, 256).is_err());
        assert!(StftConfig::new(16_000, 1024, 0).is_err());
        assert!(StftConfig::new(16_000, 1024, 2048).is_err());
        let cfg = StftConfig::default_16k();
        assert!(analyze(&[], &cfg).is_err());
        assert!(analyze(&[vec![0.0; 100], vec![0.0; 99]], &cfg).is_err());
    }

    #[test]
    fn short_input_yields_zero_frames() {
        let cfg = StftConfig::default_16k();
        let block = analyze(&[vec![0.1; 500]], &cfg).unwrap();
        assert_eq!(block.num_frames(), 0);
        assert_eq!(block.num_freqs(), 513);
    }
}
