//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{DMatrix, DVector};

/// Convergence tolerance for the power iteration in [`spectral_norm`].
pub const POWER_ITERATION_TOL: f64 = 1e-10;

const POWER_ITERATION_MAX: usize = 20_000;

/// Spectral norm (largest singular value) via power iteration on the Gram
/// matrix, with a deterministic start vector.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    // Iterate on the smaller Gram matrix.
    let gram = if a.ncols() <= a.nrows() {
        a.transpose() * a
    } else {
        a * a.transpose()
    };
    let dim = gram.nrows();
    // Deterministic, not axis-aligned, so it is never orthogonal to the
    // dominant eigenvector of a PSD matrix with nonnegative entries.
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + (i as f64) / (dim as f64 + 1.0));
    v /= v.norm();
    let mut lambda = 0.0_f64;
    for _ in 0..POWER_ITERATION_MAX {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = w / norm;
        let next_lambda = (next.transpose() * &gram * &next)[(0, 0)];
        let scale = next_lambda.abs().max(1.0);
        let done = (next_lambda - lambda).abs() <= POWER_ITERATION_TOL * scale;
        v = next;
        lambda = next_lambda;
        if done {
            break;
        }
    }
    lambda.max(0.0).sqrt()
}

/// Entrywise clamp of `v` into the box `[lo, hi]`.
///
/// Panics if the lengths differ or any `lo[i] > hi[i]`.
pub fn clip(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    assert_eq!(v.len(), lo.len(), "clip: value/lower length mismatch");
    assert_eq!(v.len(), hi.len(), "clip: value/upper length mismatch");
    DVector::from_fn(v.len(), |i, _| {
        debug_assert!(lo[i] <= hi[i], "clip: empty box at coordinate {i}");
        v[i].clamp(lo[i], hi[i])
    })
}

/// True when every entry of `v` is finite.
pub fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spectral_norm_matches_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let rows = rng.gen_range(1..8);
            let cols = rng.gen_range(1..8);
            let a = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0));
            let expected = a.clone().svd(false, false).singular_values[0];
            assert_relative_eq!(spectral_norm(&a), expected, max_relative = 1e-8);
        }
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -3.0, 2.0]));
        assert_relative_eq!(spectral_norm(&a), 3.0, max_relative = 1e-10);
    }

    #[test]
    fn spectral_norm_zero_matrix() {
        let a = DMatrix::zeros(3, 5);
        assert_eq!(spectral_norm(&a), 0.0);
    }

    #[test]
    fn spectral_norm_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
        assert_eq!(spectral_norm(&a).to_bits(), spectral_norm(&a).to_bits());
    }

    #[test]
    fn clip_clamps_into_box() {
        let v = DVector::from_vec(vec![-1.0, 0.5, 3.0]);
        let lo = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let hi = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        assert_eq!(clip(&v, &lo, &hi), DVector::from_vec(vec![0.0, 0.5, 1.0]));
    }
}
