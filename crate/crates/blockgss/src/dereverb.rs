//! Block-online dereverberation.
//!
//! Weighted prediction error (WPE) with block-recursive statistics: each
//! processed block decays the per-frequency predictor correlation sums by
//! `decay`, adds the block's variance-normalized correlations, solves for a
//! fresh prediction filter, and subtracts the predicted late reverberation
//! from every frame of the block. Predictors are `taps` past frames at lag
//! `delay`; the raw tail of each block carries over so predictions stay
//! seamless across block boundaries.

use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use std::collections::VecDeque;

use crate::linalg::{cholesky_in_place, chol_solve, regularize};
use crate::stft::SpectralBlock;
use crate::{Error, Result};

const POWER_FLOOR: f64 = 1e-10;
const SOLVE_EPS: f64 = 1e-10;

/// Prediction filter geometry and forgetting factor.
#[derive(Debug, Clone, Copy)]
pub struct WpeConfig {
    /// Number of stacked past frames used for prediction; 0 disables WPE.
    pub taps: usize,
    /// Gap in frames between the predicted frame and the newest predictor.
    pub delay: usize,
    /// Per-block exponential forgetting factor in (0, 1].
    pub decay: f64,
    /// Scale of the identity prior on the correlation matrices.
    pub prior_scale: f64,
}

impl WpeConfig {
    pub fn new(taps: usize, delay: usize, decay: f64) -> Result<Self> {
        let config = WpeConfig {
            taps,
            delay,
            decay,
            prior_scale: 1.0,
        };
        config.validate()?;
        Ok(config)
    }

    /// Two taps, two frames of delay, forgetting factor 0.9.
    pub fn default_online() -> Self {
        WpeConfig {
            taps: 2,
            delay: 2,
            decay: 0.9,
            prior_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delay == 0 {
            return Err(Error::InvalidConfig("WPE delay must be at least 1".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "WPE decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        if !(self.prior_scale > 0.0 && self.prior_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "WPE correlation prior must be positive, got {}",
                self.prior_scale
            )));
        }
        Ok(())
    }

    fn stack_len(&self, num_channels: usize) -> usize {
        self.taps * num_channels
    }

    fn warmup_frames(&self) -> usize {
        self.delay + self.taps - 1
    }
}

/// Running WPE state: decayed correlation sums per frequency plus the
/// raw-input tail needed to stack predictors for the next block.
pub struct WpeState {
    config: WpeConfig,
    num_freqs: usize,
    num_channels: usize,
    /// `(F, D, D)` with `D = taps * M`.
    corr: Array3<Complex64>,
    /// `(F, D, M)`.
    cross: Array3<Complex64>,
    /// Most recent `delay + taps - 1` raw frames, oldest first.
    history: VecDeque<Array2<Complex64>>,
    frames_seen: usize,
}

impl WpeState {
    pub fn new(config: WpeConfig, num_freqs: usize, num_channels: usize) -> Result<Self> {
        config.validate()?;
        if num_freqs == 0 || num_channels == 0 {
            return Err(Error::InvalidConfig(
                "WPE needs at least one frequency and one channel".into(),
            ));
        }
        let d = config.stack_len(num_channels);
        let mut corr = Array3::default((num_freqs, d, d));
        for f in 0..num_freqs {
            for i in 0..d {
                corr[(f, i, i)] = Complex64::new(config.prior_scale, 0.0);
            }
        }
        Ok(WpeState {
            config,
            num_freqs,
            num_channels,
            corr,
            cross: Array3::default((num_freqs, d, num_channels)),
            history: VecDeque::new(),
            frames_seen: 0,
        })
    }

    /// True when `taps == 0`, in which case processing is the identity.
    pub fn is_passthrough(&self) -> bool {
        self.config.taps == 0
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Dereverberates one block.
    ///
    /// Correlation sums decay once per block that contributes frames, the
    /// block's statistics are added, and a filter solved from the updated
    /// sums is applied to every frame. Frames arriving before
    /// `delay + taps - 1` raw frames exist pass through unchanged and add no
    /// statistics. Blocks must arrive contiguously.
    pub fn process_block(&mut self, block: &SpectralBlock) -> Result<SpectralBlock> {
        let (t_len, f_len, m) = block.frames.dim();
        if f_len != self.num_freqs || m != self.num_channels {
            return Err(Error::ShapeMismatch(format!(
                "block ({t_len}, {f_len}, {m}) does not match WPE state ({}, {})",
                self.num_freqs, self.num_channels
            )));
        }
        if self.is_passthrough() {
            self.frames_seen += t_len;
            return Ok(SpectralBlock {
                frames: block.frames.clone(),
                start_frame: block.start_frame,
            });
        }

        let mut out = block.frames.clone();
        let first_usable = self
            .config
            .warmup_frames()
            .saturating_sub(self.frames_seen)
            .min(t_len);
        if first_usable < t_len {
            self.accumulate(&block.frames, first_usable);
            let gains = self.solve_filters();
            self.filter(&block.frames, &mut out, first_usable, &gains);
        }

        for t in t_len.saturating_sub(self.config.warmup_frames())..t_len {
            self.push_history(block.frames.slice(s![t, .., ..]).to_owned());
        }
        self.frames_seen += t_len;
        Ok(SpectralBlock {
            frames: out,
            start_frame: block.start_frame,
        })
    }

    /// Decays the correlation sums once, then adds every usable frame of the
    /// block weighted by the inverse of its power estimate. The estimate is
    /// the largest channel-mean power across the frame and its predictor
    /// span, so quiet frames right after loud ones cannot dominate the sums.
    fn accumulate(&mut self, frames: &Array3<Complex64>, first_usable: usize) {
        let (t_len, f_len, m) = frames.dim();
        let d = self.config.stack_len(m);
        let decay = Complex64::new(self.config.decay, 0.0);
        self.corr.mapv_inplace(|v| v * decay);
        self.cross.mapv_inplace(|v| v * decay);

        let mut stacked = vec![Complex64::default(); d];
        for t in first_usable..t_len {
            for f in 0..f_len {
                stack_predictors(&self.history, frames, &self.config, t, f, &mut stacked);
                let power = self.span_power(frames, t, f);
                let weight = 1.0 / power.max(POWER_FLOOR);
                let mut corr = self.corr.slice_mut(s![f, .., ..]);
                for i in 0..d {
                    for j in 0..=i {
                        corr[(i, j)] += stacked[i] * stacked[j].conj() * weight;
                    }
                }
                let mut cross = self.cross.slice_mut(s![f, .., ..]);
                for i in 0..d {
                    for ch in 0..m {
                        cross[(i, ch)] += stacked[i] * frames[(t, f, ch)].conj() * weight;
                    }
                }
            }
        }

        for f in 0..f_len {
            let mut corr = self.corr.slice_mut(s![f, .., ..]);
            for i in 0..d {
                corr[(i, i)] = Complex64::new(corr[(i, i)].re, 0.0);
                for j in 0..i {
                    let lower = corr[(i, j)];
                    corr[(j, i)] = lower.conj();
                }
            }
        }
    }

    /// Solves `corr · G = cross` per frequency. Frequencies whose correlation
    /// matrix fails to factor keep a zero filter, which leaves their frames
    /// unchanged.
    fn solve_filters(&self) -> Array3<Complex64> {
        let d = self.config.stack_len(self.num_channels);
        let m = self.num_channels;
        let mut gains = Array3::default((self.num_freqs, d, m));
        let mut factor = vec![Complex64::default(); d * d];
        let mut rhs = vec![Complex64::default(); d];
        for f in 0..self.num_freqs {
            let corr = self.corr.slice(s![f, .., ..]);
            for i in 0..d {
                for j in 0..d {
                    factor[i * d + j] = corr[(i, j)];
                }
            }
            regularize(&mut factor, d, SOLVE_EPS);
            if cholesky_in_place(&mut factor, d).is_err() {
                continue;
            }
            for ch in 0..m {
                for i in 0..d {
                    rhs[i] = self.cross[(f, i, ch)];
                }
                chol_solve(&factor, d, &mut rhs);
                for i in 0..d {
                    gains[(f, i, ch)] = rhs[i];
                }
            }
        }
        gains
    }

    fn filter(
        &self,
        frames: &Array3<Complex64>,
        out: &mut Array3<Complex64>,
        first_usable: usize,
        gains: &Array3<Complex64>,
    ) {
        let (t_len, f_len, m) = frames.dim();
        let d = self.config.stack_len(m);
        let mut stacked = vec![Complex64::default(); d];
        for t in first_usable..t_len {
            for f in 0..f_len {
                stack_predictors(&self.history, frames, &self.config, t, f, &mut stacked);
                for ch in 0..m {
                    let mut prediction = Complex64::default();
                    for i in 0..d {
                        prediction += gains[(f, i, ch)].conj() * stacked[i];
                    }
                    out[(t, f, ch)] = frames[(t, f, ch)] - prediction;
                }
            }
        }
    }

    /// Largest channel-mean power over local frame `t` and the frames its
    /// predictors are drawn from.
    fn span_power(&self, frames: &Array3<Complex64>, t: usize, f: usize) -> f64 {
        let m = self.num_channels;
        let mut best: f64 = 0.0;
        for back in 0..=self.config.warmup_frames() {
            let src = t as isize - back as isize;
            let mut power = 0.0;
            for ch in 0..m {
                let v = if src >= 0 {
                    frames[(src as usize, f, ch)]
                } else {
                    let idx = self.history.len() as isize + src;
                    if idx < 0 {
                        continue;
                    }
                    self.history[idx as usize][(f, ch)]
                };
                power += v.norm_sqr();
            }
            best = best.max(power / m as f64);
        }
        best
    }

    fn push_history(&mut self, frame: Array2<Complex64>) {
        let keep = self.config.warmup_frames();
        if keep == 0 {
            return;
        }
        self.history.push_back(frame);
        while self.history.len() > keep {
            self.history.pop_front();
        }
    }
}

/// Gathers the `taps` predictor frames for local frame `t`, reaching into the
/// previous block's tail for negative indices, with layout `[tap * M + ch]`.
fn stack_predictors(
    history: &VecDeque<Array2<Complex64>>,
    frames: &Array3<Complex64>,
    config: &WpeConfig,
    t: usize,
    f: usize,
    out: &mut [Complex64],
) {
    let m = frames.shape()[2];
    for tap in 0..config.taps {
        let src = t as isize - (config.delay + tap) as isize;
        for ch in 0..m {
            out[tap * m + ch] = if src >= 0 {
                frames[(src as usize, f, ch)]
            } else {
                let idx = history.len() as isize + src;
                history[idx as usize][(f, ch)]
            };
        }
    }
}
