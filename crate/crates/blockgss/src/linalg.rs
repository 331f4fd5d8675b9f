//! Small dense Hermitian helpers used by the mixture model and beamformer.
//!
//! Matrices are square, row-major `&[Complex64]` slices of side `m`. Sizes
//! are the channel count (or channel count times filter taps), so everything
//! here is written for m in the single digits and stays allocation-free.

use num_complex::Complex64;

/// Adds `eps * trace(a) / m` to the diagonal, or `eps` alone when the trace
/// vanishes, so a PSD matrix becomes safely positive definite.
pub(crate) fn regularize(a: &mut [Complex64], m: usize, eps: f64) {
    let mut trace = 0.0;
    for i in 0..m {
        trace += a[i * m + i].re;
    }
    let shift = if trace > 0.0 { eps * trace / m as f64 } else { eps };
    for i in 0..m {
        a[i * m + i] += Complex64::new(shift, 0.0);
    }
}

/// In-place lower Cholesky factor of a Hermitian positive definite matrix.
///
/// On success the lower triangle (diagonal included) holds `L` with
/// `L L^H = A`; the upper triangle is left untouched. Fails when a pivot is
/// not strictly positive and finite.
pub(crate) fn cholesky_in_place(a: &mut [Complex64], m: usize) -> Result<(), ()> {
    for j in 0..m {
        let mut pivot = a[j * m + j].re;
        for k in 0..j {
            pivot -= a[j * m + k].norm_sqr();
        }
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(());
        }
        let root = pivot.sqrt();
        a[j * m + j] = Complex64::new(root, 0.0);
        for i in (j + 1)..m {
            let mut sum = a[i * m + j];
            for k in 0..j {
                sum -= a[i * m + k] * a[j * m + k].conj();
            }
            a[i * m + j] = sum / root;
        }
    }
    Ok(())
}

/// `log det A` from a Cholesky factor: twice the log-sum of the diagonal.
pub(crate) fn chol_logdet(l: &[Complex64], m: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..m {
        acc += l[i * m + i].re.ln();
    }
    2.0 * acc
}

/// Solves `L y = b` in place (forward substitution).
pub(crate) fn solve_lower(l: &[Complex64], m: usize, b: &mut [Complex64]) {
    for i in 0..m {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * m + k] * b[k];
        }
        b[i] = sum / l[i * m + i].re;
    }
}

/// Solves `L^H x = b` in place (backward substitution).
pub(crate) fn solve_lower_adjoint(l: &[Complex64], m: usize, b: &mut [Complex64]) {
    for i in (0..m).rev() {
        let mut sum = b[i];
        for k in (i + 1)..m {
            sum -= l[k * m + i].conj() * b[k];
        }
        b[i] = sum / l[i * m + i].re;
    }
}

/// Solves `A x = b` in place given the Cholesky factor of `A`.
pub(crate) fn chol_solve(l: &[Complex64], m: usize, b: &mut [Complex64]) {
    solve_lower(l, m, b);
    solve_lower_adjoint(l, m, b);
}

/// Quadratic form `x^H A^{-1} x` given the Cholesky factor of `A`.
///
/// Computed as the squared norm of the forward-substitution solve, so it is
/// real and nonnegative by construction. `scratch` must hold `m` entries.
pub(crate) fn quad_form_inv(
    l: &[Complex64],
    m: usize,
    x: &[Complex64],
    scratch: &mut [Complex64],
) -> f64 {
    scratch[..m].copy_from_slice(&x[..m]);
    solve_lower(l, m, &mut scratch[..m]);
    let mut acc = 0.0;
    for v in &scratch[..m] {
        acc += v.norm_sqr();
    }
    acc
}
