//! Guided mixture of complex angular central Gaussians.
//!
//! Each time-frequency observation is the multichannel STFT vector scaled to
//! unit norm, so only its direction carries information. Source `k` models
//! directions at frequency `f` with a density proportional to
//! `det(B)^-1 (x^H B^-1 x)^-M`; mixture weights `alpha` are per frequency.
//! Diarization enters as a hard gate: a source inactive at frame `t` gets
//! zero posterior there, and the remaining posteriors renormalize.
//!
//! The module exposes the individual EM steps (the online and offline
//! pipelines compose them in different orders) plus [`offline_em`], a fused
//! batch solver that produces the same numbers as composing the steps by
//! hand while factorizing every shape matrix only once per iteration.
//!
//! Shape matrices are kept invertible by `eps * trace / M` diagonal loading
//! before every factorization and optionally rescaled to trace `M` after
//! every update; the density is scale invariant in `B`, so rescaling only
//! protects the dynamic range of determinants over long sessions.
//! Determinants and quadratic forms are evaluated in the log domain through
//! Cholesky factors.

use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use num_complex::Complex64;

use crate::diarization::NOISE_SOURCE;
use crate::linalg;
use crate::{Error, Result};

/// Numeric policy for the mixture model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacgmmConfig {
    /// Diagonal loading factor applied before every factorization.
    pub regularization_eps: f64,
    /// Rescale shape matrices to trace `M` after every update.
    pub normalize_shapes: bool,
}

impl Default for CacgmmConfig {
    fn default() -> Self {
        Self {
            regularization_eps: 1e-6,
            normalize_shapes: true,
        }
    }
}

/// Unit-norm observation directions, shaped `(frames, freqs, channels)`.
#[derive(Debug, Clone)]
pub struct NormalizedFeatures {
    pub unit_vectors: Array3<Complex64>,
}

impl NormalizedFeatures {
    /// Scales every time-frequency vector to unit norm. A zero vector has no
    /// direction and is replaced by the first basis vector.
    pub fn from_spectra(spectra: ArrayView3<'_, Complex64>) -> Self {
        let (t_len, f_len, m) = spectra.dim();
        let mut unit = spectra.to_owned();
        for t in 0..t_len {
            for f in 0..f_len {
                let mut norm_sqr = 0.0;
                for ch in 0..m {
                    norm_sqr += unit[(t, f, ch)].norm_sqr();
                }
                if norm_sqr > 0.0 {
                    let inv = 1.0 / norm_sqr.sqrt();
                    for ch in 0..m {
                        unit[(t, f, ch)] *= inv;
                    }
                } else {
                    unit[(t, f, 0)] = Complex64::new(1.0, 0.0);
                    for ch in 1..m {
                        unit[(t, f, ch)] = Complex64::default();
                    }
                }
            }
        }
        Self { unit_vectors: unit }
    }

    pub fn num_frames(&self) -> usize {
        self.unit_vectors.shape()[0]
    }

    pub fn num_freqs(&self) -> usize {
        self.unit_vectors.shape()[1]
    }

    pub fn num_channels(&self) -> usize {
        self.unit_vectors.shape()[2]
    }

    /// Frequency-major copy `(freqs, frames, channels)` for kernels that
    /// sweep frames within a frequency.
    fn freq_major(&self) -> Array3<Complex64> {
        let mut out = Array3::default((
            self.num_freqs(),
            self.num_frames(),
            self.num_channels(),
        ));
        out.assign(&self.unit_vectors.view().permuted_axes([1, 0, 2]));
        out
    }
}

/// Per-source posteriors, shaped `(frames, freqs, sources)`.
///
/// At every `(t, f)` the entries over sources active at `t` sum to one;
/// inactive sources hold zero.
#[derive(Debug, Clone)]
pub struct PosteriorBlock {
    pub gammas: Array3<f64>,
}

impl PosteriorBlock {
    pub fn num_frames(&self) -> usize {
        self.gammas.shape()[0]
    }

    pub fn num_freqs(&self) -> usize {
        self.gammas.shape()[1]
    }

    pub fn num_sources(&self) -> usize {
        self.gammas.shape()[2]
    }

    /// Posterior mass per frequency for one source over a frame range.
    pub fn mass(&self, source: usize, frames: std::ops::Range<usize>) -> Array1<f64> {
        self.gammas.slice(s![frames, .., source]).sum_axis(Axis(0))
    }
}

/// Mixture parameters for all sources registered so far.
///
/// `alphas` are per-frequency mixture weights, `shapes` the Hermitian shape
/// matrices, `mass_accum` the running posterior mass used by the
/// accumulation update. New sources start with all three at zero.
#[derive(Debug, Clone)]
pub struct CacgmmState {
    num_freqs: usize,
    num_channels: usize,
    alphas: Array2<f64>,
    shapes: Array4<Complex64>,
    mass_accum: Array2<f64>,
    config: CacgmmConfig,
}

impl CacgmmState {
    pub fn new(num_freqs: usize, num_channels: usize, config: CacgmmConfig) -> Self {
        Self {
            num_freqs,
            num_channels,
            alphas: Array2::zeros((num_freqs, 0)),
            shapes: Array4::default((num_freqs, 0, num_channels, num_channels)),
            mass_accum: Array2::zeros((num_freqs, 0)),
            config,
        }
    }

    pub fn num_freqs(&self) -> usize {
        self.num_freqs
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn num_sources(&self) -> usize {
        self.alphas.ncols()
    }

    pub fn config(&self) -> &CacgmmConfig {
        &self.config
    }

    pub fn alphas(&self) -> &Array2<f64> {
        &self.alphas
    }

    pub fn shapes(&self) -> &Array4<Complex64> {
        &self.shapes
    }

    pub fn mass_accum(&self) -> &Array2<f64> {
        &self.mass_accum
    }

    /// Registers one more source with zeroed parameters, returns its index.
    pub fn add_source(&mut self) -> usize {
        let (f_len, k_len) = self.alphas.dim();
        let m = self.num_channels;
        let mut alphas = Array2::zeros((f_len, k_len + 1));
        alphas.slice_mut(s![.., ..k_len]).assign(&self.alphas);
        let mut shapes = Array4::default((f_len, k_len + 1, m, m));
        shapes
            .slice_mut(s![.., ..k_len, .., ..])
            .assign(&self.shapes);
        let mut mass = Array2::zeros((f_len, k_len + 1));
        mass.slice_mut(s![.., ..k_len]).assign(&self.mass_accum);
        self.alphas = alphas;
        self.shapes = shapes;
        self.mass_accum = mass;
        k_len
    }

    /// Zeroes a source's weight, shape and accumulated mass, as done when a
    /// source is admitted (or re-admitted after too little evidence).
    pub fn reset_source(&mut self, source: usize) {
        self.alphas.column_mut(source).fill(0.0);
        self.shapes
            .slice_mut(s![.., source, .., ..])
            .fill(Complex64::default());
        self.mass_accum.column_mut(source).fill(0.0);
    }

    /// Overwrites the mixture weights of the listed sources.
    pub fn set_alphas(&mut self, alphas: &Array2<f64>, active_set: &[usize]) {
        for &k in active_set {
            self.alphas
                .column_mut(k)
                .assign(&alphas.index_axis(Axis(1), k));
        }
    }

    /// Overwrites shape matrices from an M-step result.
    pub fn assign_shapes(&mut self, update: &ShapeUpdate, active_set: &[usize]) {
        for &k in active_set {
            self.shapes
                .slice_mut(s![.., k, .., ..])
                .assign(&update.matrices.slice(s![.., k, .., ..]));
        }
    }

    fn rescale_trace(matrix: &mut [Complex64], m: usize) {
        let mut trace = 0.0;
        for i in 0..m {
            trace += matrix[i * m + i].re;
        }
        if trace > 0.0 {
            let scale = m as f64 / trace;
            for v in matrix.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Which denominator the shape estimate uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Rank-one terms divided by `x^H B^-1 x` under the current shape.
    ByCurrentShape,
    /// Plain posterior-weighted average, used when no usable shape exists.
    Unweighted,
}

/// Result of a batch shape M-step over all sources.
#[derive(Debug, Clone)]
pub struct ShapeUpdate {
    /// `(freqs, sources, channels, channels)`; entries for skipped pairs
    /// repeat the previous shape.
    pub matrices: Array4<Complex64>,
    /// `(freq, source)` pairs left unchanged for lack of posterior mass.
    pub skipped: Vec<(usize, usize)>,
}

/// Shape statistics for a single source over one window.
#[derive(Debug, Clone)]
pub struct ShapeEstimate {
    /// `(freqs, channels, channels)`; zero wherever `mass` is zero.
    pub matrices: Array3<Complex64>,
    /// Posterior mass per frequency behind each matrix.
    pub mass: Array1<f64>,
}

/// Activity-only posteriors: uniform over the sources active at each frame,
/// identical across frequency. This seeds EM before any parameters exist.
pub fn init_posteriors(
    activities: ArrayView2<'_, u8>,
    num_freqs: usize,
    active_set: &[usize],
) -> Result<PosteriorBlock> {
    let (t_len, k_len) = activities.dim();
    check_active_set(active_set, k_len)?;
    let mut gammas = Array3::zeros((t_len, num_freqs, k_len));
    for t in 0..t_len {
        let row = activities.row(t);
        let total: f64 = active_set.iter().map(|&k| f64::from(row[k])).sum();
        if total == 0.0 {
            return Err(Error::ShapeMismatch(format!(
                "no active source at frame {t}; the noise column must be all ones"
            )));
        }
        for &k in active_set {
            if row[k] != 0 {
                gammas.slice_mut(s![t, .., k]).fill(1.0 / total);
            }
        }
    }
    Ok(PosteriorBlock { gammas })
}

/// Posterior update: for each `(t, f)`, source `k` active at `t` scores
/// `log alpha - log det(B) - M log(x^H B^-1 x)` and the scores softmax into
/// posteriors. Inactive or unlisted sources get exactly zero. When every
/// score degenerates the posteriors fall back to activity-uniform.
pub fn e_step_guided(
    features: &NormalizedFeatures,
    activities: ArrayView2<'_, u8>,
    state: &CacgmmState,
    active_set: &[usize],
) -> Result<PosteriorBlock> {
    let (t_len, f_len, m) = features.unit_vectors.dim();
    check_dims(features, activities, state)?;
    check_active_set(active_set, state.num_sources())?;
    let n_active = active_set.len();
    let factors = prepare_factors(state, active_set)?;
    let feats = features.freq_major();
    let active_at = active_positions(activities, active_set);

    let mut gammas_fm = Array3::zeros((f_len, t_len, n_active));
    gammas_fm
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip_eq(feats.axis_iter(Axis(0)).into_par_iter())
        .zip_eq(factors.axis_iter(Axis(0)).into_par_iter())
        .for_each(|((mut gamma_tk, feat_tm), factor_row)| {
            let factor_row = factor_row.to_slice().expect("factor rows are contiguous");
            let mut scores = vec![0.0f64; n_active];
            let mut scratch = vec![Complex64::default(); m];
            for t in 0..t_len {
                let x = feat_tm.row(t);
                let x = x.to_slice().expect("freq-major rows are contiguous");
                let row = gamma_tk.row_mut(t);
                let row = row.into_slice().expect("contiguous");
                posterior_row(x, &active_at[t], factor_row, m, &mut scores, &mut scratch, row);
            }
        });

    Ok(scatter_gammas(
        &gammas_fm,
        t_len,
        f_len,
        state.num_sources(),
        active_set,
    ))
}

/// Mixture weight update: the mean posterior over frames, per frequency.
/// Sources outside `active_set` get zero columns.
pub fn m_step_alpha(gammas: &PosteriorBlock, active_set: &[usize]) -> Array2<f64> {
    let (t_len, f_len, k_len) = gammas.gammas.dim();
    let mut alphas = Array2::zeros((f_len, k_len));
    if t_len == 0 {
        return alphas;
    }
    let scale = 1.0 / t_len as f64;
    for &k in active_set {
        let col = gammas.gammas.slice(s![.., .., k]);
        let mut out = alphas.column_mut(k);
        for t in 0..t_len {
            for f in 0..f_len {
                out[f] += col[(t, f)];
            }
        }
        out.mapv_inplace(|v| v * scale);
    }
    alphas
}

/// Shape M-step over every active source. Pairs with zero posterior mass
/// keep their previous matrix and are reported in `skipped`.
pub fn m_step_shape(
    features: &NormalizedFeatures,
    gammas: &PosteriorBlock,
    state: &CacgmmState,
    active_set: &[usize],
    weighting: Weighting,
) -> Result<ShapeUpdate> {
    check_dims_posteriors(features, gammas, state)?;
    check_active_set(active_set, state.num_sources())?;
    let mut matrices = state.shapes.clone();
    let mut skipped = Vec::new();
    for &k in active_set {
        let estimate = compute_block_shape(features, gammas, state, k, weighting)?;
        for f in 0..state.num_freqs {
            if estimate.mass[f] > 0.0 {
                matrices
                    .slice_mut(s![f, k, .., ..])
                    .assign(&estimate.matrices.slice(s![f, .., ..]));
            } else {
                skipped.push((f, k));
            }
        }
    }
    Ok(ShapeUpdate { matrices, skipped })
}

/// Windowed shape statistic for one source: the posterior-weighted mean of
/// rank-one direction terms, times the channel count. With
/// [`Weighting::ByCurrentShape`] each term is divided by the quadratic form
/// under the source's current shape matrix. The result is normalized to
/// trace `M` when the state asks for normalized shapes.
pub fn compute_block_shape(
    features: &NormalizedFeatures,
    gammas: &PosteriorBlock,
    state: &CacgmmState,
    source: usize,
    weighting: Weighting,
) -> Result<ShapeEstimate> {
    check_dims_posteriors(features, gammas, state)?;
    if source >= state.num_sources() {
        return Err(Error::ShapeMismatch(format!(
            "source {source} not registered (have {})",
            state.num_sources()
        )));
    }
    let (t_len, f_len, m) = features.unit_vectors.dim();
    let feats = features.freq_major();
    let mut gmat = Array2::zeros((f_len, t_len));
    gmat.assign(&gammas.gammas.slice(s![.., .., source]).t());
    let eps = state.config.regularization_eps;
    let normalize = state.config.normalize_shapes;

    let mut matrices = Array3::default((f_len, m, m));
    let mut mass = Array1::zeros(f_len);
    let mut failed = Array1::<u8>::zeros(f_len);
    matrices
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip_eq(mass.axis_iter_mut(Axis(0)).into_par_iter())
        .zip_eq(failed.axis_iter_mut(Axis(0)).into_par_iter())
        .zip_eq(feats.axis_iter(Axis(0)).into_par_iter())
        .zip_eq(gmat.axis_iter(Axis(0)).into_par_iter())
        .zip_eq(state.shapes.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(((((mut out, mut mass_f), mut failed_f), feat_tm), gamma_t), shapes_k)| {
            let mut chol = Vec::new();
            if weighting == Weighting::ByCurrentShape {
                let mut b: Vec<Complex64> = shapes_k
                    .index_axis(Axis(0), source)
                    .iter()
                    .copied()
                    .collect();
                linalg::regularize(&mut b, m, eps);
                if linalg::cholesky_in_place(&mut b, m).is_err() {
                    failed_f[()] = 1;
                    return;
                }
                chol = b;
            }
            let mut acc = vec![Complex64::default(); m * m];
            let mut total = 0.0;
            let mut scratch = vec![Complex64::default(); m];
            for t in 0..t_len {
                let g = gamma_t[t];
                if g == 0.0 {
                    continue;
                }
                let x = feat_tm.row(t);
                let x = x.to_slice().expect("contiguous");
                let w = match weighting {
                    Weighting::Unweighted => g,
                    Weighting::ByCurrentShape => {
                        g / linalg::quad_form_inv(&chol, m, x, &mut scratch)
                    }
                };
                accumulate_outer(&mut acc, x, m, w);
                total += g;
            }
            mass_f[()] = total;
            if total > 0.0 {
                mirror_lower(&mut acc, m);
                let scale = m as f64 / total;
                let dst = out.as_slice_mut().expect("contiguous");
                for (d, a) in dst.iter_mut().zip(&acc) {
                    *d = *a * scale;
                }
                if normalize {
                    CacgmmState::rescale_trace(dst, m);
                }
            }
        });

    if let Some(f) = failed.iter().position(|&v| v != 0) {
        return Err(Error::SingularMatrix { freq: f, source_index: source });
    }
    Ok(ShapeEstimate { matrices, mass })
}

/// Blends a window statistic into the long-term shape by posterior mass:
/// `B <- G/(G+g) B + g/(G+g) B_plus` with `G` the accumulated mass and `g`
/// the mass the block itself contributed, then `G <- G + g`. Frequencies
/// with no mass keep their matrix.
pub fn update_shape_accumulation(
    state: &mut CacgmmState,
    source: usize,
    block_mass: &Array1<f64>,
    estimate: &ShapeEstimate,
) -> Result<()> {
    check_estimate(state, source, estimate)?;
    if block_mass.len() != state.num_freqs {
        return Err(Error::ShapeMismatch(format!(
            "block mass has {} entries, expected {}",
            block_mass.len(),
            state.num_freqs
        )));
    }
    let m = state.num_channels;
    let normalize = state.config.normalize_shapes;
    for f in 0..state.num_freqs {
        let g = block_mass[f];
        let total = state.mass_accum[(f, source)] + g;
        if g > 0.0 && total > 0.0 && estimate.mass[f] > 0.0 {
            let keep = state.mass_accum[(f, source)] / total;
            let blend = g / total;
            let mut dst = state.shapes.slice_mut(s![f, source, .., ..]);
            let src = estimate.matrices.slice(s![f, .., ..]);
            Zip::from(&mut dst).and(&src).for_each(|d, &s| {
                *d = *d * keep + s * blend;
            });
            if normalize {
                let slice = dst.into_slice().expect("shape row is contiguous");
                CacgmmState::rescale_trace(slice, m);
            }
        }
        state.mass_accum[(f, source)] += g;
    }
    Ok(())
}

/// Exponential forgetting: `B <- eta * B + B_plus` per frequency.
/// Frequencies where the estimate saw no mass keep their matrix.
pub fn update_shape_decay(
    state: &mut CacgmmState,
    source: usize,
    estimate: &ShapeEstimate,
    eta: f64,
) -> Result<()> {
    check_estimate(state, source, estimate)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidConfig(format!(
            "decay factor must be in [0, 1], got {eta}"
        )));
    }
    let m = state.num_channels;
    let normalize = state.config.normalize_shapes;
    for f in 0..state.num_freqs {
        if estimate.mass[f] > 0.0 {
            let mut dst = state.shapes.slice_mut(s![f, source, .., ..]);
            let src = estimate.matrices.slice(s![f, .., ..]);
            Zip::from(&mut dst).and(&src).for_each(|d, &s| {
                *d = *d * eta + s;
            });
            if normalize {
                let slice = dst.into_slice().expect("shape row is contiguous");
                CacgmmState::rescale_trace(slice, m);
            }
        }
    }
    Ok(())
}

/// Batch EM over one window. Iteration one seeds posteriors from activities
/// and estimates shapes without quadratic-form weighting; every later
/// iteration is a guided E-step followed by weight and shape M-steps. A
/// final E-step aligns the returned posteriors with the returned state.
///
/// Composing [`init_posteriors`], [`m_step_alpha`], [`m_step_shape`] and
/// [`e_step_guided`] in that order yields the same numbers.
pub fn offline_em(
    features: &NormalizedFeatures,
    activities: ArrayView2<'_, u8>,
    iterations: usize,
    config: CacgmmConfig,
) -> Result<(PosteriorBlock, CacgmmState)> {
    let (t_len, f_len, m) = features.unit_vectors.dim();
    if iterations == 0 {
        return Err(Error::InvalidConfig("EM needs at least one iteration".into()));
    }
    if t_len == 0 {
        return Err(Error::EmptyInput("EM needs at least one frame"));
    }
    if activities.nrows() != t_len {
        return Err(Error::ShapeMismatch(format!(
            "{} activity rows for {} frames",
            activities.nrows(),
            t_len
        )));
    }
    let k_len = activities.ncols();
    let mut state = CacgmmState::new(f_len, m, config);
    for _ in 0..k_len {
        state.add_source();
    }
    let active_set: Vec<usize> = (0..k_len)
        .filter(|&k| k == NOISE_SOURCE || activities.column(k).iter().any(|&v| v != 0))
        .collect();
    check_active_set(&active_set, k_len)?;
    let n_active = active_set.len();

    let feats = features.freq_major();
    let active_at = active_positions(activities, &active_set);
    for (t, active) in active_at.iter().enumerate() {
        if active.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "no active source at frame {t}; the noise column must be all ones"
            )));
        }
    }
    let eps = config.regularization_eps;
    let normalize = config.normalize_shapes;

    // The activity-seeded posteriors are frequency independent: one row per
    // frame, uniform over the sources active there.
    let mut uniform = Array2::zeros((t_len, n_active));
    for (t, active) in active_at.iter().enumerate() {
        for &a in active {
            uniform[(t, a)] = 1.0 / active.len() as f64;
        }
    }

    let mut alphas = Array2::<f64>::zeros((f_len, n_active));
    let mut shapes = Array2::<Complex64>::default((f_len, n_active * m * m));
    let mut gammas_fm = Array3::<f64>::zeros((f_len, t_len, n_active));
    let mut failed = Array1::<u8>::zeros(f_len);

    alphas
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip_eq(shapes.axis_iter_mut(Axis(0)).into_par_iter())
        .zip_eq(gammas_fm.axis_iter_mut(Axis(0)).into_par_iter())
        .zip_eq(feats.axis_iter(Axis(0)).into_par_iter())
        .zip_eq(failed.axis_iter_mut(Axis(0)).into_par_iter())
        .for_each(|((((mut alpha_a, mut shapes_flat), mut gamma_tk), feat_tm), mut failed_f)| {
            let shapes_flat = shapes_flat.as_slice_mut().expect("contiguous");
            let alpha_a = alpha_a.as_slice_mut().expect("contiguous");
            let mut factors = vec![FreqFactor::default(); n_active];
            let mut scores = vec![0.0f64; n_active];
            let mut quads = vec![0.0f64; n_active];
            let mut scratch = vec![Complex64::default(); m];
            let mut numer = vec![Complex64::default(); n_active * m * m];
            let mut denom = vec![0.0f64; n_active];

            for iter in 0..iterations {
                numer.iter_mut().for_each(|v| *v = Complex64::default());
                denom.iter_mut().for_each(|v| *v = 0.0);
                if iter > 0
                    && factorize_all(shapes_flat, alpha_a, m, eps, &mut factors).is_err()
                {
                    failed_f[()] = 1;
                    return;
                }
                for t in 0..t_len {
                    let x = feat_tm.row(t);
                    let x = x.to_slice().expect("contiguous");
                    let active = &active_at[t];
                    if iter == 0 {
                        for &a in active {
                            let g = uniform[(t, a)];
                            accumulate_outer(&mut numer[a * m * m..(a + 1) * m * m], x, m, g);
                            denom[a] += g;
                        }
                    } else {
                        let row = gamma_tk.row_mut(t);
                        let row = row.into_slice().expect("contiguous");
                        posterior_row_with_quads(
                            x,
                            active,
                            &factors,
                            m,
                            &mut scores,
                            &mut quads,
                            &mut scratch,
                            row,
                        );
                        for &a in active {
                            let g = row[a];
                            if g > 0.0 {
                                accumulate_outer(
                                    &mut numer[a * m * m..(a + 1) * m * m],
                                    x,
                                    m,
                                    g / quads[a],
                                );
                                denom[a] += g;
                            }
                        }
                    }
                }
                let t_scale = 1.0 / t_len as f64;
                for a in 0..n_active {
                    alpha_a[a] = denom[a] * t_scale;
                    if denom[a] > 0.0 {
                        let block = &mut numer[a * m * m..(a + 1) * m * m];
                        mirror_lower(block, m);
                        let scale = m as f64 / denom[a];
                        let dst = &mut shapes_flat[a * m * m..(a + 1) * m * m];
                        for (d, s) in dst.iter_mut().zip(block.iter()) {
                            *d = *s * scale;
                        }
                        if normalize {
                            CacgmmState::rescale_trace(dst, m);
                        }
                    }
                }
            }

            if factorize_all(shapes_flat, alpha_a, m, eps, &mut factors).is_err() {
                failed_f[()] = 1;
                return;
            }
            for t in 0..t_len {
                let x = feat_tm.row(t);
                let x = x.to_slice().expect("contiguous");
                let row = gamma_tk.row_mut(t);
                let row = row.into_slice().expect("contiguous");
                posterior_row(x, &active_at[t], &factors, m, &mut scores, &mut scratch, row);
            }
        });

    if let Some(f) = failed.iter().position(|&v| v != 0) {
        return Err(Error::SingularMatrix {
            freq: f,
            source_index: usize::MAX,
        });
    }

    for (pos, &k) in active_set.iter().enumerate() {
        state
            .alphas
            .column_mut(k)
            .assign(&alphas.index_axis(Axis(1), pos));
        for f in 0..f_len {
            let row = shapes.row(f);
            let row = row.to_slice().expect("contiguous");
            let src = &row[pos * m * m..(pos + 1) * m * m];
            for (i, d) in state
                .shapes
                .slice_mut(s![f, k, .., ..])
                .iter_mut()
                .enumerate()
            {
                *d = src[i];
            }
        }
    }
    let gammas = scatter_gammas(&gammas_fm, t_len, f_len, k_len, &active_set);
    Ok((gammas, state))
}

/// Mean per-frame log-likelihood of the activity-gated mixture. With
/// all-ones activities this is the plain mixture log-likelihood.
pub fn log_likelihood(
    features: &NormalizedFeatures,
    activities: ArrayView2<'_, u8>,
    state: &CacgmmState,
    active_set: &[usize],
) -> Result<f64> {
    let (t_len, _f_len, m) = features.unit_vectors.dim();
    check_dims(features, activities, state)?;
    check_active_set(active_set, state.num_sources())?;
    let n_active = active_set.len();
    let factors = prepare_factors(state, active_set)?;
    let feats = features.freq_major();
    let active_at = active_positions(activities, active_set);

    let mut per_freq = Array1::zeros(feats.shape()[0]);
    per_freq
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip_eq(feats.axis_iter(Axis(0)).into_par_iter())
        .zip_eq(factors.axis_iter(Axis(0)).into_par_iter())
        .for_each(|((mut acc, feat_tm), factor_row)| {
            let factor_row = factor_row.to_slice().expect("contiguous");
            let mut scores = vec![0.0f64; n_active];
            let mut scratch = vec![Complex64::default(); m];
            let mut total = 0.0;
            for t in 0..t_len {
                let x = feat_tm.row(t);
                let x = x.to_slice().expect("contiguous");
                let mut best = f64::NEG_INFINITY;
                for &a in &active_at[t] {
                    let fac = &factor_row[a];
                    let q = linalg::quad_form_inv(&fac.chol, m, x, &mut scratch);
                    let s = fac.log_alpha - fac.logdet - m as f64 * q.ln();
                    scores[a] = s;
                    if s > best {
                        best = s;
                    }
                }
                if best == f64::NEG_INFINITY {
                    total = f64::NEG_INFINITY;
                    break;
                }
                let mut sum = 0.0;
                for &a in &active_at[t] {
                    sum += (scores[a] - best).exp();
                }
                total += best + sum.ln();
            }
            acc[()] = total;
        });
    Ok(per_freq.sum() / t_len as f64)
}

#[derive(Debug, Clone, Default)]
struct FreqFactor {
    chol: Vec<Complex64>,
    logdet: f64,
    log_alpha: f64,
}

/// Cholesky factors of the regularized shapes, `(freqs, n_active)` in
/// active-set position order.
fn prepare_factors(state: &CacgmmState, active_set: &[usize]) -> Result<Array2<FreqFactor>> {
    let m = state.num_channels;
    let eps = state.config.regularization_eps;
    let mut factors =
        Array2::from_elem((state.num_freqs, active_set.len()), FreqFactor::default());
    for f in 0..state.num_freqs {
        for (pos, &k) in active_set.iter().enumerate() {
            let mut b: Vec<Complex64> = state
                .shapes
                .slice(s![f, k, .., ..])
                .iter()
                .copied()
                .collect();
            linalg::regularize(&mut b, m, eps);
            linalg::cholesky_in_place(&mut b, m)
                .map_err(|_| Error::SingularMatrix { freq: f, source_index: k })?;
            factors[(f, pos)] = FreqFactor {
                logdet: linalg::chol_logdet(&b, m),
                chol: b,
                log_alpha: ln_or_neg_inf(state.alphas[(f, k)]),
            };
        }
    }
    Ok(factors)
}

/// Factorizes the flat-packed per-frequency shapes used by the fused kernel.
fn factorize_all(
    shapes_flat: &[Complex64],
    alphas: &[f64],
    m: usize,
    eps: f64,
    factors: &mut [FreqFactor],
) -> std::result::Result<(), ()> {
    for (a, factor) in factors.iter_mut().enumerate() {
        let mut b: Vec<Complex64> = shapes_flat[a * m * m..(a + 1) * m * m].to_vec();
        linalg::regularize(&mut b, m, eps);
        linalg::cholesky_in_place(&mut b, m)?;
        *factor = FreqFactor {
            logdet: linalg::chol_logdet(&b, m),
            chol: b,
            log_alpha: ln_or_neg_inf(alphas[a]),
        };
    }
    Ok(())
}

fn ln_or_neg_inf(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Softmax of per-source log scores into `row` (position indexed). Falls
/// back to activity-uniform when every score degenerates.
fn posterior_row(
    x: &[Complex64],
    active: &[usize],
    factors: &[FreqFactor],
    m: usize,
    scores: &mut [f64],
    scratch: &mut [Complex64],
    row: &mut [f64],
) {
    row.iter_mut().for_each(|v| *v = 0.0);
    let mut best = f64::NEG_INFINITY;
    for &a in active {
        let fac = &factors[a];
        let q = linalg::quad_form_inv(&fac.chol, m, x, scratch);
        let s = fac.log_alpha - fac.logdet - m as f64 * q.ln();
        scores[a] = s;
        if s > best {
            best = s;
        }
    }
    if !best.is_finite() {
        let share = 1.0 / active.len() as f64;
        for &a in active {
            row[a] = share;
        }
        return;
    }
    let mut sum = 0.0;
    for &a in active {
        let e = (scores[a] - best).exp();
        scores[a] = e;
        sum += e;
    }
    for &a in active {
        row[a] = scores[a] / sum;
    }
}

/// Like [`posterior_row`] but also reports each active source's quadratic
/// form in `quads`, for reuse by the shape M-step of the same iteration.
fn posterior_row_with_quads(
    x: &[Complex64],
    active: &[usize],
    factors: &[FreqFactor],
    m: usize,
    scores: &mut [f64],
    quads: &mut [f64],
    scratch: &mut [Complex64],
    row: &mut [f64],
) {
    row.iter_mut().for_each(|v| *v = 0.0);
    let mut best = f64::NEG_INFINITY;
    for &a in active {
        let fac = &factors[a];
        let q = linalg::quad_form_inv(&fac.chol, m, x, scratch);
        quads[a] = q;
        let s = fac.log_alpha - fac.logdet - m as f64 * q.ln();
        scores[a] = s;
        if s > best {
            best = s;
        }
    }
    if !best.is_finite() {
        let share = 1.0 / active.len() as f64;
        for &a in active {
            row[a] = share;
        }
        return;
    }
    let mut sum = 0.0;
    for &a in active {
        let e = (scores[a] - best).exp();
        scores[a] = e;
        sum += e;
    }
    for &a in active {
        row[a] = scores[a] / sum;
    }
}

/// `acc[lower triangle] += w * x x^H`, leaving the upper triangle stale.
fn accumulate_outer(acc: &mut [Complex64], x: &[Complex64], m: usize, w: f64) {
    for i in 0..m {
        let xi = x[i] * w;
        for j in 0..=i {
            acc[i * m + j] += xi * x[j].conj();
        }
    }
}

/// Copies the lower triangle onto the upper, conjugate transposed.
fn mirror_lower(acc: &mut [Complex64], m: usize) {
    for i in 0..m {
        acc[i * m + i] = Complex64::new(acc[i * m + i].re, 0.0);
        for j in 0..i {
            acc[j * m + i] = acc[i * m + j].conj();
        }
    }
}

/// Per-frame lists of active-set positions whose source is active there.
fn active_positions(activities: ArrayView2<'_, u8>, active_set: &[usize]) -> Vec<Vec<usize>> {
    (0..activities.nrows())
        .map(|t| {
            let row = activities.row(t);
            active_set
                .iter()
                .enumerate()
                .filter(|&(_, &k)| row[k] != 0)
                .map(|(pos, _)| pos)
                .collect()
        })
        .collect()
}

/// Expands `(freqs, frames, n_active)` kernel output into a
/// `(frames, freqs, sources)` posterior block.
fn scatter_gammas(
    gammas_fm: &Array3<f64>,
    t_len: usize,
    f_len: usize,
    k_len: usize,
    active_set: &[usize],
) -> PosteriorBlock {
    let mut gammas = Array3::zeros((t_len, f_len, k_len));
    for (pos, &k) in active_set.iter().enumerate() {
        for t in 0..t_len {
            for f in 0..f_len {
                gammas[(t, f, k)] = gammas_fm[(f, t, pos)];
            }
        }
    }
    PosteriorBlock { gammas }
}

fn check_active_set(active_set: &[usize], k_len: usize) -> Result<()> {
    if !active_set.contains(&NOISE_SOURCE) {
        return Err(Error::InvalidConfig(
            "active set must contain the noise source".into(),
        ));
    }
    if let Some(&k) = active_set.iter().find(|&&k| k >= k_len) {
        return Err(Error::ShapeMismatch(format!(
            "active source {k} out of range for {k_len} sources"
        )));
    }
    Ok(())
}

fn check_dims(
    features: &NormalizedFeatures,
    activities: ArrayView2<'_, u8>,
    state: &CacgmmState,
) -> Result<()> {
    let (t_len, f_len, m) = features.unit_vectors.dim();
    if f_len != state.num_freqs || m != state.num_channels {
        return Err(Error::ShapeMismatch(format!(
            "features are {f_len} freqs x {m} channels, state wants {} x {}",
            state.num_freqs, state.num_channels
        )));
    }
    if activities.nrows() != t_len || activities.ncols() != state.num_sources() {
        return Err(Error::ShapeMismatch(format!(
            "activities are {}x{}, expected {t_len}x{}",
            activities.nrows(),
            activities.ncols(),
            state.num_sources()
        )));
    }
    Ok(())
}

fn check_dims_posteriors(
    features: &NormalizedFeatures,
    gammas: &PosteriorBlock,
    state: &CacgmmState,
) -> Result<()> {
    let (t_len, f_len, m) = features.unit_vectors.dim();
    if f_len != state.num_freqs || m != state.num_channels {
        return Err(Error::ShapeMismatch(format!(
            "features are {f_len} freqs x {m} channels, state wants {} x {}",
            state.num_freqs, state.num_channels
        )));
    }
    let (gt, gf, gk) = gammas.gammas.dim();
    if gt != t_len || gf != f_len || gk != state.num_sources() {
        return Err(Error::ShapeMismatch(format!(
            "posteriors are {gt}x{gf}x{gk}, expected {t_len}x{f_len}x{}",
            state.num_sources()
        )));
    }
    Ok(())
}

fn check_estimate(state: &CacgmmState, source: usize, estimate: &ShapeEstimate) -> Result<()> {
    if source >= state.num_sources() {
        return Err(Error::ShapeMismatch(format!(
            "source {source} not registered (have {})",
            state.num_sources()
        )));
    }
    let (f_len, m, m2) = estimate.matrices.dim();
    if f_len != state.num_freqs || m != state.num_channels || m2 != state.num_channels {
        return Err(Error::ShapeMismatch(
            "shape estimate does not match state dimensions".into(),
        ));
    }
    if estimate.mass.len() != state.num_freqs {
        return Err(Error::ShapeMismatch(
            "shape estimate mass does not match state dimensions".into(),
        ));
    }
    Ok(())
}
