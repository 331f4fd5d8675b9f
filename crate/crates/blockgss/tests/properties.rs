//! Randomized invariant suites over the separation chain.
//!
//! Each property draws its instance dimensions through proptest and fills the
//! tensors from a seeded generator, so failures shrink to a small seed and
//! shape instead of an element-by-element counterexample.

use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use blockgss::beamform::{apply, mvdr_weights, spatial_covariances, SpatialCovariances};
use blockgss::cacgmm::{e_step_guided, offline_em, CacgmmConfig, NormalizedFeatures};
use blockgss::dereverb::WpeConfig;
use blockgss::diarization::NOISE_SOURCE;
use blockgss::online::{OnlineConfig, OnlineGss, UpdateStrategy};
use blockgss::stft::{analyze, synthesize, SpectralBlock, StftConfig};

fn spectra(rng: &mut ChaCha8Rng, t: usize, f: usize, m: usize) -> Array3<Complex64> {
    Array3::from_shape_fn((t, f, m), |_| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    })
}

/// Activity matrix with the all-one noise column and at least one active
/// frame per speaker.
fn activities(rng: &mut ChaCha8Rng, t: usize, speakers: usize) -> Array2<u8> {
    let mut acts = Array2::zeros((t, 1 + speakers));
    acts.column_mut(NOISE_SOURCE).fill(1);
    for k in 1..=speakers {
        for t_i in 0..t {
            acts[(t_i, k)] = u8::from(rng.gen_bool(0.6));
        }
        let forced = rng.gen_range(0..t);
        acts[(forced, k)] = 1;
    }
    acts
}

fn fitted_state(
    rng: &mut ChaCha8Rng,
    t: usize,
    f: usize,
    m: usize,
    speakers: usize,
    iterations: usize,
) -> (Array3<Complex64>, Array2<u8>, blockgss::cacgmm::PosteriorBlock, blockgss::cacgmm::CacgmmState)
{
    let raw = spectra(rng, t, f, m);
    let acts = activities(rng, t, speakers);
    let feats = NormalizedFeatures::from_spectra(raw.view());
    let (gammas, state) =
        offline_em(&feats, acts.view(), iterations, CacgmmConfig::default()).unwrap();
    (raw, acts, gammas, state)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn posteriors_are_normalized_and_respect_activities(
        seed in any::<u64>(),
        t in 1usize..10,
        f in 1usize..6,
        m in 1usize..4,
        speakers in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, _, _, state) = fitted_state(&mut rng, t + 2, f, m, speakers, 1);
        let raw = spectra(&mut rng, t, f, m);
        let acts = activities(&mut rng, t, speakers);
        let feats = NormalizedFeatures::from_spectra(raw.view());
        let active: Vec<usize> = (0..=speakers).collect();
        let block = e_step_guided(&feats, acts.view(), &state, &active).unwrap();

        for t_i in 0..t {
            for f_i in 0..f {
                let mut sum = 0.0;
                for k in 0..=speakers {
                    let g = block.gammas[(t_i, f_i, k)];
                    prop_assert!((0.0..=1.0 + 1e-9).contains(&g), "gamma {g} at ({t_i},{f_i},{k})");
                    if acts[(t_i, k)] == 0 {
                        prop_assert_eq!(g, 0.0, "inactive source {} got mass", k);
                    }
                    sum += g;
                }
                prop_assert!((sum - 1.0).abs() < 1e-6, "posteriors sum to {sum} at ({t_i},{f_i})");
            }
        }
    }

    #[test]
    fn shape_matrices_stay_hermitian_and_psd(
        seed in any::<u64>(),
        t in 2usize..12,
        f in 1usize..5,
        m in 1usize..4,
        speakers in 1usize..3,
        iterations in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, _, _, state) = fitted_state(&mut rng, t, f, m, speakers, iterations);
        let shapes = state.shapes();
        for f_i in 0..f {
            for k in 0..=speakers {
                let b = shapes.slice(s![f_i, k, .., ..]);
                let scale = 1.0 + b.iter().map(|v| v.norm()).fold(0.0, f64::max);
                for i in 0..m {
                    for j in 0..m {
                        let drift = (b[(i, j)] - b[(j, i)].conj()).norm();
                        prop_assert!(drift < 1e-8 * scale, "B[{f_i},{k}] not Hermitian: {drift}");
                    }
                }
                for _ in 0..8 {
                    let v: Vec<Complex64> = (0..m)
                        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                        .collect();
                    let mut quad = Complex64::default();
                    for i in 0..m {
                        for j in 0..m {
                            quad += v[i].conj() * b[(i, j)] * v[j];
                        }
                    }
                    prop_assert!(quad.re > -1e-10 * scale, "negative quadratic form {}", quad.re);
                    prop_assert!(quad.im.abs() < 1e-9 * scale);
                }
            }
        }
    }

    #[test]
    fn covariances_complement_to_the_unmasked_average(
        seed in any::<u64>(),
        t in 1usize..12,
        f in 1usize..6,
        m in 1usize..4,
        speakers in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (raw, _, gammas, _) = fitted_state(&mut rng, t, f, m, speakers, 1);
        let target = 1 + rng.gen_range(0..speakers);
        let cov = spatial_covariances(raw.view(), gammas.gammas.view(), target).unwrap();

        for f_i in 0..f {
            for i in 0..m {
                for j in 0..m {
                    let mut avg = Complex64::default();
                    for t_i in 0..t {
                        avg += raw[(t_i, f_i, i)] * raw[(t_i, f_i, j)].conj();
                    }
                    avg /= t as f64;
                    let got = cov.speech[(f_i, i, j)] + cov.noise[(f_i, i, j)];
                    prop_assert!(
                        (got - avg).norm() < 1e-10 * (1.0 + avg.norm()),
                        "complementarity broke at ({f_i},{i},{j}): {got} vs {avg}"
                    );
                }
            }
        }
    }

    #[test]
    fn mvdr_weights_ignore_speech_scale(
        seed in any::<u64>(),
        t in 4usize..12,
        f in 1usize..5,
        m in 2usize..4,
        scale in 1e-2f64..1e2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (raw, _, gammas, _) = fitted_state(&mut rng, t, f, m, 1, 1);
        let cov = spatial_covariances(raw.view(), gammas.gammas.view(), 1).unwrap();
        let scaled = SpatialCovariances {
            speech: cov.speech.mapv(|v| v * scale),
            noise: cov.noise.clone(),
        };
        let base = mvdr_weights(&cov, 0).unwrap();
        let rescaled = mvdr_weights(&scaled, 0).unwrap();

        let mut diff = 0.0f64;
        let mut norm = 0.0f64;
        for (a, b) in base.weights.iter().zip(rescaled.weights.iter()) {
            diff += (a - b).norm_sqr();
            norm += a.norm_sqr();
        }
        prop_assert!(
            diff.sqrt() <= 1e-10 * norm.sqrt().max(1e-30),
            "weights moved by {:.3e} under speech scale {scale}",
            diff.sqrt()
        );
    }

    #[test]
    fn stft_round_trip_reconstructs_the_interior(
        seed in any::<u64>(),
        win_pow in 7usize..10,
        hop_div in 1usize..4,
        extra in 0usize..4000,
    ) {
        let window = 1usize << win_pow;
        let hop = window >> hop_div;
        let len = window * 3 + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let audio: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = StftConfig::new(16_000, window, hop).unwrap();
        let block = analyze(&[audio.clone()], &cfg).unwrap();
        let rebuilt = synthesize(block.frames.index_axis(ndarray::Axis(2), 0), &cfg).unwrap();

        let lo = window / 2;
        let hi = rebuilt.len().min(audio.len()) - window / 2;
        let mut err = 0.0f64;
        let mut reference = 0.0f64;
        for i in lo..hi {
            err += (rebuilt[i] - audio[i]).powi(2);
            reference += audio[i].powi(2);
        }
        prop_assert!(
            (err / reference).sqrt() < 1e-6,
            "interior relative error {:.3e}",
            (err / reference).sqrt()
        );
    }

    #[test]
    fn context_queue_never_exceeds_its_configured_length(
        seed in any::<u64>(),
        block_len in 2usize..10,
        context_len in 0usize..16,
        blocks in 1usize..6,
        speakers in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stft = StftConfig::new(16_000, 16, 4).unwrap();
        let config = OnlineConfig {
            block_len,
            context_len,
            strategy: UpdateStrategy::Decay,
            eta: 0.9,
            min_new_source_sec: 0.0,
            warmup_iterations: 1,
            reference_channel: Some(0),
            wpe: WpeConfig::new(1, 1, 0.9).unwrap(),
            cacgmm: CacgmmConfig::default(),
        };
        let m = 2;
        let mut engine = OnlineGss::new(stft.clone(), m, config).unwrap();
        let labels: Vec<String> = (1..=speakers).map(|k| format!("spk{k}")).collect();

        let mut offset = 0;
        for b in 0..blocks {
            let t = if b + 1 == blocks { rng.gen_range(1..=block_len) } else { block_len };
            let raw = SpectralBlock {
                frames: spectra(&mut rng, t, stft.num_freqs(), m),
                start_frame: offset,
            };
            let acts = activities(&mut rng, t, speakers);
            engine.process_block(&raw, acts.view(), &labels).unwrap();
            prop_assert!(
                engine.queue_len() <= context_len,
                "queue grew to {} with C = {context_len}",
                engine.queue_len()
            );
            offset += t;
        }
    }

    #[test]
    fn posteriors_ignore_per_bin_complex_scaling(
        seed in any::<u64>(),
        t in 1usize..8,
        f in 1usize..5,
        m in 1usize..4,
        speakers in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (raw, acts, _, state) = fitted_state(&mut rng, t, f, m, speakers, 1);
        let mut scaled = raw.clone();
        for t_i in 0..t {
            for f_i in 0..f {
                let mag = rng.gen_range(0.05..20.0);
                let phase = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let s = Complex64::from_polar(mag, phase);
                for ch in 0..m {
                    scaled[(t_i, f_i, ch)] *= s;
                }
            }
        }
        let active: Vec<usize> = (0..=speakers).collect();
        let base = e_step_guided(
            &NormalizedFeatures::from_spectra(raw.view()),
            acts.view(),
            &state,
            &active,
        )
        .unwrap();
        let moved = e_step_guided(
            &NormalizedFeatures::from_spectra(scaled.view()),
            acts.view(),
            &state,
            &active,
        )
        .unwrap();
        for (a, b) in base.gammas.iter().zip(moved.gammas.iter()) {
            prop_assert!((a - b).abs() < 1e-9, "posterior moved from {a} to {b}");
        }
    }

    #[test]
    fn beamformer_application_matches_the_naive_product(
        seed in any::<u64>(),
        t in 1usize..8,
        f in 1usize..6,
        m in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = spectra(&mut rng, t, f, m);
        let (_, _, gammas, _) = {
            let mut seed_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            fitted_state(&mut seed_rng, t, f, m, 1, 1)
        };
        let cov = spatial_covariances(raw.view(), gammas.gammas.view(), 1).unwrap();
        let weights = mvdr_weights(&cov, 0).unwrap();
        let out = apply(&weights, raw.view()).unwrap();
        for t_i in 0..t {
            for f_i in 0..f {
                let mut expected = Complex64::default();
                for ch in 0..m {
                    expected += weights.weights[(f_i, ch)].conj() * raw[(t_i, f_i, ch)];
                }
                prop_assert!((out[(t_i, f_i)] - expected).norm() < 1e-12);
            }
        }
    }
}
