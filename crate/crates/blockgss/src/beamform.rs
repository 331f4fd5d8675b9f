//! MVDR beamforming from posterior masks.
//!
//! Converts a block of raw (dereverbed, unnormalized) multichannel spectra and
//! a posterior block into a single-channel enhanced spectrum for one target
//! source: mask-weighted spatial covariances, MVDR weights against the chosen
//! reference channel, blind analytic normalization, and the final projection.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use num_complex::Complex64;
use std::ops::Range;

use crate::diarization::NOISE_SOURCE;
use crate::linalg;
use crate::{Error, Result};

/// Diagonal loading applied to the noise covariance before inversion.
pub const NOISE_REGULARIZATION_EPS: f64 = 1e-6;

const TRACE_FLOOR: f64 = 1e-12;

/// Mask-weighted second-order statistics for one target source.
///
/// Both tensors are `(F, M, M)` and Hermitian; `speech + noise` recovers the
/// plain averaged outer product because the masks are complementary.
#[derive(Debug, Clone)]
pub struct SpatialCovariances {
    pub speech: Array3<Complex64>,
    pub noise: Array3<Complex64>,
}

impl SpatialCovariances {
    pub fn num_freqs(&self) -> usize {
        self.speech.shape()[0]
    }

    pub fn num_channels(&self) -> usize {
        self.speech.shape()[1]
    }
}

/// Per-frequency MVDR weight vectors `(F, M)` for one target.
#[derive(Debug, Clone)]
pub struct BeamformerWeights {
    pub weights: Array2<Complex64>,
    /// Channel whose signal the beamformer preserves.
    pub reference: usize,
    /// Frequencies zeroed because the trace term vanished or the noise
    /// covariance could not be factored.
    pub zeroed_freqs: Vec<usize>,
}

/// Outcome of SNR-based reference channel selection.
#[derive(Debug, Clone)]
pub struct ReferenceChoice {
    pub channel: usize,
    /// Per-channel scores; nonfinite entries lost the comparison.
    pub snrs: Vec<f64>,
    /// True when every candidate score was nonfinite and channel 0 was used.
    pub degenerate: bool,
}

/// Accumulates speech and noise covariances over all frames of `raw`.
///
/// `raw` is `(T, F, M)` and `gammas` is `(T, F, K)`; the target's posterior
/// masks the speech sum and its complement masks the noise sum, so the two
/// matrices add up to the unmasked average.
pub fn spatial_covariances(
    raw: ArrayView3<Complex64>,
    gammas: ArrayView3<f64>,
    target: usize,
) -> Result<SpatialCovariances> {
    if target == NOISE_SOURCE {
        return Err(Error::NoiseAsTarget(target));
    }
    let (t_len, f_len, m) = raw.dim();
    if t_len == 0 {
        return Err(Error::EmptyInput("covariance estimation needs frames"));
    }
    if gammas.shape()[0] != t_len || gammas.shape()[1] != f_len {
        return Err(Error::ShapeMismatch(format!(
            "posteriors {:?} do not cover spectra ({t_len}, {f_len}, _)",
            gammas.shape()
        )));
    }
    if target >= gammas.shape()[2] {
        return Err(Error::ShapeMismatch(format!(
            "target {target} outside {} sources",
            gammas.shape()[2]
        )));
    }

    let mut speech = Array3::<Complex64>::default((f_len, m, m));
    let mut noise = Array3::<Complex64>::default((f_len, m, m));
    let scale = 1.0 / t_len as f64;
    for t in 0..t_len {
        for f in 0..f_len {
            let x = raw.slice(s![t, f, ..]);
            let g = gammas[(t, f, target)];
            let mut sp = speech.slice_mut(s![f, .., ..]);
            let mut ns = noise.slice_mut(s![f, .., ..]);
            for i in 0..m {
                let xi = x[i];
                for j in 0..=i {
                    let outer = xi * x[j].conj();
                    sp[(i, j)] += outer * g;
                    ns[(i, j)] += outer * (1.0 - g);
                }
            }
        }
    }
    for f in 0..f_len {
        for mat in [&mut speech, &mut noise] {
            let mut view = mat.slice_mut(s![f, .., ..]);
            for i in 0..m {
                view[(i, i)] = Complex64::new(view[(i, i)].re * scale, 0.0);
                for j in 0..i {
                    let lower = view[(i, j)] * scale;
                    view[(i, j)] = lower;
                    view[(j, i)] = lower.conj();
                }
            }
        }
    }
    Ok(SpatialCovariances { speech, noise })
}

/// Computes MVDR weights `w = R_noise⁻¹ R_speech e_ref / tr(R_noise⁻¹ R_speech)`
/// per frequency, with diagonal loading on the noise covariance.
///
/// Frequencies where the trace falls below `1e-12`, or where the loaded noise
/// covariance fails to factor, get zero weights and are listed in
/// `zeroed_freqs` rather than aborting the utterance.
pub fn mvdr_weights(cov: &SpatialCovariances, reference: usize) -> Result<BeamformerWeights> {
    let f_len = cov.num_freqs();
    let m = cov.num_channels();
    if reference >= m {
        return Err(Error::InvalidConfig(format!(
            "reference channel {reference} outside {m} channels"
        )));
    }
    let mut weights = Array2::<Complex64>::default((f_len, m));
    let mut zeroed = Vec::new();
    let mut noise = vec![Complex64::default(); m * m];
    let mut column = vec![Complex64::default(); m];
    let mut solved_ref = vec![Complex64::default(); m];
    for f in 0..f_len {
        let noise_view = cov.noise.slice(s![f, .., ..]);
        for i in 0..m {
            for j in 0..m {
                noise[i * m + j] = noise_view[(i, j)];
            }
        }
        linalg::regularize(&mut noise, m, NOISE_REGULARIZATION_EPS);
        if linalg::cholesky_in_place(&mut noise, m).is_err() {
            zeroed.push(f);
            continue;
        }
        let speech_view = cov.speech.slice(s![f, .., ..]);
        let mut trace = Complex64::default();
        for j in 0..m {
            for i in 0..m {
                column[i] = speech_view[(i, j)];
            }
            linalg::chol_solve(&noise, m, &mut column);
            trace += column[j];
            if j == reference {
                solved_ref.copy_from_slice(&column);
            }
        }
        if trace.norm() < TRACE_FLOOR {
            zeroed.push(f);
            continue;
        }
        for i in 0..m {
            weights[(f, i)] = solved_ref[i] / trace;
        }
    }
    Ok(BeamformerWeights {
        weights,
        reference,
        zeroed_freqs: zeroed,
    })
}

/// Rescales each weight vector by the blind analytic normalization gain
/// `sqrt(wᴴ R_n R_n w / M) / (wᴴ R_n w)` and returns the per-frequency gains.
///
/// Degenerate frequencies (zero weights, vanishing quadratic form) keep gain 1.
pub fn blind_analytic_normalization(
    weights: &mut BeamformerWeights,
    cov: &SpatialCovariances,
) -> Array1<f64> {
    let f_len = cov.num_freqs();
    let m = cov.num_channels();
    let mut gains = Array1::ones(f_len);
    let mut projected = vec![Complex64::default(); m];
    for f in 0..f_len {
        let noise = cov.noise.slice(s![f, .., ..]);
        let w = weights.weights.slice(s![f, ..]);
        for (i, slot) in projected.iter_mut().enumerate() {
            let mut sum = Complex64::default();
            for j in 0..m {
                sum += noise[(i, j)] * w[j];
            }
            *slot = sum;
        }
        let numerator_sq: f64 = projected.iter().map(|v| v.norm_sqr()).sum();
        let denominator: f64 = projected
            .iter()
            .zip(w.iter())
            .map(|(p, wi)| (wi.conj() * p).re)
            .sum();
        let gain = (numerator_sq / m as f64).sqrt() / denominator;
        if gain.is_finite() && denominator > 0.0 {
            gains[f] = gain;
        }
    }
    for (f, &gain) in gains.iter().enumerate() {
        if gain != 1.0 {
            let mut row = weights.weights.slice_mut(s![f, ..]);
            row.map_inplace(|v| *v *= gain);
        }
    }
    gains
}

/// Picks the reference channel whose candidate beamformer maximizes the
/// broadband ratio `Σ_f wᴴ R_speech w / Σ_f wᴴ R_noise w`.
///
/// Ties break toward the lowest index; if every candidate scores nonfinite the
/// choice falls back to channel 0 and is marked degenerate.
pub fn select_reference(cov: &SpatialCovariances) -> Result<ReferenceChoice> {
    let m = cov.num_channels();
    let mut snrs = Vec::with_capacity(m);
    let mut best: Option<(usize, f64)> = None;
    for candidate in 0..m {
        let weights = mvdr_weights(cov, candidate)?;
        let mut speech_power = 0.0;
        let mut noise_power = 0.0;
        for f in 0..cov.num_freqs() {
            let w = weights.weights.slice(s![f, ..]);
            speech_power += quadratic_form(cov.speech.slice(s![f, .., ..]), w.as_slice().unwrap());
            noise_power += quadratic_form(cov.noise.slice(s![f, .., ..]), w.as_slice().unwrap());
        }
        let snr = speech_power / noise_power;
        snrs.push(snr);
        if snr.is_finite() && best.map_or(true, |(_, top)| snr > top) {
            best = Some((candidate, snr));
        }
    }
    Ok(match best {
        Some((channel, _)) => ReferenceChoice {
            channel,
            snrs,
            degenerate: false,
        },
        None => ReferenceChoice {
            channel: 0,
            snrs,
            degenerate: true,
        },
    })
}

fn quadratic_form(matrix: ndarray::ArrayView2<Complex64>, w: &[Complex64]) -> f64 {
    let m = w.len();
    let mut acc = Complex64::default();
    for i in 0..m {
        for j in 0..m {
            acc += w[i].conj() * matrix[(i, j)] * w[j];
        }
    }
    acc.re
}

/// Projects multichannel spectra `(T, F, M)` through the weights, producing
/// the enhanced single-channel spectrum `(T, F)` with `z = wᴴ x`.
pub fn apply(weights: &BeamformerWeights, raw: ArrayView3<Complex64>) -> Result<Array2<Complex64>> {
    let (t_len, f_len, m) = raw.dim();
    if weights.weights.dim() != (f_len, m) {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?} do not match spectra ({t_len}, {f_len}, {m})",
            weights.weights.dim()
        )));
    }
    let mut out = Array2::<Complex64>::default((t_len, f_len));
    for t in 0..t_len {
        for f in 0..f_len {
            let x = raw.slice(s![t, f, ..]);
            let w = weights.weights.slice(s![f, ..]);
            let mut sum = Complex64::default();
            for ch in 0..m {
                sum += w[ch].conj() * x[ch];
            }
            out[(t, f)] = sum;
        }
    }
    Ok(out)
}

/// Enhanced spectrum for one emission interval plus the weights that made it.
#[derive(Debug, Clone)]
pub struct SegmentBeamform {
    /// `(emit frames, F)` single-channel spectrum.
    pub spectrum: Array2<Complex64>,
    pub weights: BeamformerWeights,
    /// True when reference selection fell back to channel 0.
    pub selection_degenerate: bool,
}

/// Full per-utterance chain: covariances over the whole window, reference
/// selection (unless overridden), MVDR, normalization, and projection of the
/// `emit` frame range only.
pub fn beamform_segment(
    raw: ArrayView3<Complex64>,
    gammas: ArrayView3<f64>,
    target: usize,
    emit: Range<usize>,
    reference_override: Option<usize>,
) -> Result<SegmentBeamform> {
    let t_len = raw.len_of(Axis(0));
    if emit.start >= emit.end || emit.end > t_len {
        return Err(Error::ShapeMismatch(format!(
            "emission frames {emit:?} outside window of {t_len}"
        )));
    }
    let cov = spatial_covariances(raw, gammas, target)?;
    let (reference, selection_degenerate) = match reference_override {
        Some(channel) => (channel, false),
        None => {
            let choice = select_reference(&cov)?;
            (choice.channel, choice.degenerate)
        }
    };
    let mut weights = mvdr_weights(&cov, reference)?;
    blind_analytic_normalization(&mut weights, &cov);
    let spectrum = apply(&weights, raw.slice(s![emit, .., ..]))?;
    Ok(SegmentBeamform {
        spectrum,
        weights,
        selection_degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn naive_inverse(a: &[Complex64], m: usize) -> Vec<Complex64> {
        let mut aug = vec![Complex64::default(); m * 2 * m];
        for i in 0..m {
            for j in 0..m {
                aug[i * 2 * m + j] = a[i * m + j];
            }
            aug[i * 2 * m + m + i] = c(1.0, 0.0);
        }
        for col in 0..m {
            let pivot_row = (col..m)
                .max_by(|&x, &y| {
                    aug[x * 2 * m + col]
                        .norm()
                        .partial_cmp(&aug[y * 2 * m + col].norm())
                        .unwrap()
                })
                .unwrap();
            if pivot_row != col {
                for j in 0..2 * m {
                    aug.swap(col * 2 * m + j, pivot_row * 2 * m + j);
                }
            }
            let pivot = aug[col * 2 * m + col];
            for j in 0..2 * m {
                aug[col * 2 * m + j] /= pivot;
            }
            for i in 0..m {
                if i != col {
                    let factor = aug[i * 2 * m + col];
                    for j in 0..2 * m {
                        let sub = factor * aug[col * 2 * m + j];
                        aug[i * 2 * m + j] -= sub;
                    }
                }
            }
        }
        let mut inv = vec![Complex64::default(); m * m];
        for i in 0..m {
            for j in 0..m {
                inv[i * m + j] = aug[i * 2 * m + m + j];
            }
        }
        inv
    }

    fn random_setup(
        t_len: usize,
        f_len: usize,
        m: usize,
        seed: u64,
    ) -> (Array3<Complex64>, Array3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = Array3::default((t_len, f_len, m));
        for v in raw.iter_mut() {
            *v = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let mut gammas = Array3::zeros((t_len, f_len, 2));
        for t in 0..t_len {
            for f in 0..f_len {
                let g = rng.gen_range(0.0..1.0);
                gammas[(t, f, 1)] = g;
                gammas[(t, f, 0)] = 1.0 - g;
            }
        }
        (raw, gammas)
    }

    #[test]
    fn covariances_are_complementary_and_hermitian() {
        let (raw, gammas) = random_setup(16, 3, 3, 7);
        let cov = spatial_covariances(raw.view(), gammas.view(), 1).unwrap();
        let (t_len, f_len, m) = raw.dim();
        for f in 0..f_len {
            for i in 0..m {
                for j in 0..m {
                    let mut plain = c(0.0, 0.0);
                    for t in 0..t_len {
                        plain += raw[(t, f, i)] * raw[(t, f, j)].conj();
                    }
                    plain /= t_len as f64;
                    let total = cov.speech[(f, i, j)] + cov.noise[(f, i, j)];
                    assert!((total - plain).norm() < 1e-10);
                    let sp_t = cov.speech[(f, j, i)].conj();
                    assert!((cov.speech[(f, i, j)] - sp_t).norm() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn full_mask_routes_everything_to_speech() {
        let (raw, mut gammas) = random_setup(6, 2, 2, 8);
        gammas.slice_mut(s![.., .., 1]).fill(1.0);
        let cov = spatial_covariances(raw.view(), gammas.view(), 1).unwrap();
        for v in cov.noise.iter() {
            assert_eq!(*v, c(0.0, 0.0));
        }
        gammas.slice_mut(s![.., .., 1]).fill(0.0);
        let cov = spatial_covariances(raw.view(), gammas.view(), 1).unwrap();
        for v in cov.speech.iter() {
            assert_eq!(*v, c(0.0, 0.0));
        }
    }

    #[test]
    fn covariances_reject_noise_target_and_bad_shapes() {
        let (raw, gammas) = random_setup(4, 2, 2, 9);
        assert!(matches!(
            spatial_covariances(raw.view(), gammas.view(), NOISE_SOURCE),
            Err(Error::NoiseAsTarget(_))
        ));
        assert!(spatial_covariances(raw.view(), gammas.view(), 5).is_err());
        let short = gammas.slice(s![..2, .., ..]);
        assert!(spatial_covariances(raw.view(), short, 1).is_err());
    }

    #[test]
    fn mvdr_identity_noise_rank_one_speech() {
        let m = 3;
        let mut cov = SpatialCovariances {
            speech: Array3::default((1, m, m)),
            noise: Array3::default((1, m, m)),
        };
        for i in 0..m {
            cov.noise[(0, i, i)] = c(1.0, 0.0);
        }
        cov.speech[(0, 0, 0)] = c(1.0, 0.0);
        let weights = mvdr_weights(&cov, 0).unwrap();
        assert!((weights.weights[(0, 0)] - c(1.0, 0.0)).norm() < 1e-6);
        assert!(weights.weights[(0, 1)].norm() < 1e-9);
        assert!(weights.zeroed_freqs.is_empty());
    }

    #[test]
    fn mvdr_matches_naive_solve_oracle() {
        let (raw, gammas) = random_setup(24, 4, 3, 10);
        let cov = spatial_covariances(raw.view(), gammas.view(), 1).unwrap();
        let m = cov.num_channels();
        let reference = 1;
        let weights = mvdr_weights(&cov, reference).unwrap();
        for f in 0..cov.num_freqs() {
            let mut noise: Vec<Complex64> = cov
                .noise
                .slice(s![f, .., ..])
                .iter()
                .copied()
                .collect();
            let mut trace_r = 0.0;
            for i in 0..m {
                trace_r += noise[i * m + i].re;
            }
            for i in 0..m {
                noise[i * m + i] += c(NOISE_REGULARIZATION_EPS * trace_r / m as f64, 0.0);
            }
            let inv = naive_inverse(&noise, m);
            let speech = cov.speech.slice(s![f, .., ..]);
            let mut product = vec![c(0.0, 0.0); m * m];
            for i in 0..m {
                for j in 0..m {
                    for l in 0..m {
                        product[i * m + j] += inv[i * m + l] * speech[(l, j)];
                    }
                }
            }
            let trace: Complex64 = (0..m).map(|i| product[i * m + i]).sum();
            for i in 0..m {
                let want = product[i * m + reference] / trace;
                let got = weights.weights[(f, i)];
                assert!(
                    (want - got).norm() < 1e-9,
                    "f={f} i={i}: {want} vs {got}"
                );
            }
        }
    }

    #[test]
    fn mvdr_invariant_to_speech_scale() {
        let (raw, gammas) = random_setup(12, 3, 3, 11);
        let cov = spatial_covariances(raw.view(), gammas.view(), 1).unwrap();
        let mut scaled = cov.clone();
        scaled.speech.map_inplace(|v| *v *= 7.5);
        let a = mvdr_weights(&cov, 0).unwrap();
        let b = mvdr_weights(&scaled, 0).unwrap();
        for (x, y) in a.weights.iter().zip(b.weights.iter()) {
            assert!((x - y).norm() <= 1e-10 * x.norm().max(1e-30));
        }
    }

    #[test]
    fn mvdr_zeroes_empty_frequencies() {
        let m = 2;
        let cov = SpatialCovariances {
            speech: Array3::default((2, m, m)),
            noise: Array3::default((2, m, m)),
        };
        let weights = mvdr_weights(&cov, 0).unwrap();
        assert_eq!(weights.zeroed_freqs, vec![0, 1]);
        assert!(weights.weights.iter().all(|v| *v == c(0.0, 0.0)));
        assert!(mvdr_weights(&cov, 9).is_err());
    }

    #[test]
    fn ban_gain_matches_identity_noise_algebra() {
        let m = 4;
        let mut cov = SpatialCovariances {
            speech: Array3::default((1, m, m)),
            noise: Array3::default((1, m, m)),
        };
        for i in 0..m {
            cov.noise[(0, i, i)] = c(1.0, 0.0);
        }
        let mut weights = BeamformerWeights {
            weights: Array2::default((1, m)),
            reference: 0,
            zeroed_freqs: Vec::new(),
        };
        weights.weights[(0, 0)] = c(0.3, 0.4);
        weights.weights[(0, 2)] = c(0.0, -1.2);
        let norm = (0.5f64.powi(2) + 1.2f64.powi(2)).sqrt();
        let before = weights.weights.row(0).to_owned();
        let gains = blind_analytic_normalization(&mut weights, &cov);
        let expected = 1.0 / ((m as f64).sqrt() * norm);
        assert!((gains[0] - expected).abs() < 1e-12);
        for (w, b) in weights.weights.row(0).iter().zip(before.iter()) {
            assert!((w - b * expected).norm() < 1e-12);
        }
    }

    #[test]
    fn ban_leaves_zero_weights_alone() {
        let m = 2;
        let cov = SpatialCovariances {
            speech: Array3::default((1, m, m)),
            noise: Array3::default((1, m, m)),
        };
        let mut weights = BeamformerWeights {
            weights: Array2::default((1, m)),
            reference: 0,
            zeroed_freqs: vec![0],
        };
        let gains = blind_analytic_normalization(&mut weights, &cov);
        assert_eq!(gains[0], 1.0);
        assert!(weights.weights.iter().all(|v| *v == c(0.0, 0.0)));
    }

    #[test]
    fn reference_selection_prefers_high_snr_channel() {
        let m = 3;
        let mut cov = SpatialCovariances {
            speech: Array3::default((2, m, m)),
            noise: Array3::default((2, m, m)),
        };
        for f in 0..2 {
            for i in 0..m {
                cov.noise[(f, i, i)] = c(1.0, 0.0);
                cov.speech[(f, i, i)] = c(if i == 2 { 10.0 } else { 1.0 }, 0.0);
            }
        }
        let choice = select_reference(&cov).unwrap();
        assert_eq!(choice.channel, 2);
        assert!(!choice.degenerate);
        assert!(choice.snrs[2] > choice.snrs[0]);
    }

    #[test]
    fn reference_selection_is_permutation_consistent() {
        let (raw, gammas) = random_setup(20, 3, 3, 12);
        let cov = spatial_covariances(raw.view(), gammas.view(), 1).unwrap();
        let perm = [2usize, 0, 1];
        let mut permuted = cov.clone();
        for f in 0..cov.num_freqs() {
            for i in 0..3 {
                for j in 0..3 {
                    permuted.speech[(f, i, j)] = cov.speech[(f, perm[i], perm[j])];
                    permuted.noise[(f, i, j)] = cov.noise[(f, perm[i], perm[j])];
                }
            }
        }
        let base = select_reference(&cov).unwrap();
        let shuffled = select_reference(&permuted).unwrap();
        assert_eq!(perm[shuffled.channel], base.channel);
    }

    #[test]
    fn degenerate_covariances_fall_back_to_channel_zero() {
        let cov = SpatialCovariances {
            speech: Array3::default((2, 2, 2)),
            noise: Array3::default((2, 2, 2)),
        };
        let choice = select_reference(&cov).unwrap();
        assert_eq!(choice.channel, 0);
        assert!(choice.degenerate);
    }

    #[test]
    fn apply_is_channel_projection() {
        let (raw, _) = random_setup(5, 2, 3, 13);
        let mut weights = BeamformerWeights {
            weights: Array2::default((2, 3)),
            reference: 1,
            zeroed_freqs: Vec::new(),
        };
        weights.weights[(0, 1)] = c(1.0, 0.0);
        weights.weights[(1, 1)] = c(1.0, 0.0);
        let out = apply(&weights, raw.view()).unwrap();
        for t in 0..5 {
            for f in 0..2 {
                assert!((out[(t, f)] - raw[(t, f, 1)]).norm() < 1e-14);
            }
        }
        let bad = raw.slice(s![.., .., ..2]);
        assert!(apply(&weights, bad).is_err());
    }

    #[test]
    fn apply_matches_naive_loop() {
        let (raw, gammas) = random_setup(10, 3, 3, 14);
        let cov = spatial_covariances(raw.view(), gammas.view(), 1).unwrap();
        let weights = mvdr_weights(&cov, 0).unwrap();
        let out = apply(&weights, raw.view()).unwrap();
        for t in 0..10 {
            for f in 0..3 {
                let mut want = c(0.0, 0.0);
                for ch in 0..3 {
                    want += weights.weights[(f, ch)].conj() * raw[(t, f, ch)];
                }
                assert!((out[(t, f)] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn segment_chain_emits_clipped_range() {
        let (raw, gammas) = random_setup(30, 4, 3, 15);
        let out =
            beamform_segment(raw.view(), gammas.view(), 1, 10..20, None).unwrap();
        assert_eq!(out.spectrum.dim(), (10, 4));
        let fixed =
            beamform_segment(raw.view(), gammas.view(), 1, 10..20, Some(2)).unwrap();
        assert_eq!(fixed.weights.reference, 2);
        assert!(beamform_segment(raw.view(), gammas.view(), 1, 20..10, None).is_err());
        assert!(beamform_segment(raw.view(), gammas.view(), 1, 0..31, None).is_err());
    }
}
