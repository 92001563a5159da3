//! Small dense linear-algebra helpers: induced norms and a Cholesky solve.
//!
//! Everything here operates on plain `ndarray` types; the matrices involved
//! are at most a few hundred rows, so no external LAPACK backend is pulled in.

use ndarray::{Array1, Array2, ArrayView2};

/// Spectral-norm estimate together with the power-iteration residual, so
/// near-zero certificate margins stay interpretable.
#[derive(Debug, Clone, Copy)]
pub struct SpectralNorm {
    pub value: f64,
    /// Relative change of the estimate in the final iteration.
    pub residual: f64,
    pub iterations: usize,
}

/// Largest singular value of `a` by power iteration on `aᵀa`.
///
/// Stops after `max_iters` iterations or when the relative change drops
/// below `tol`. The start vector is deterministic, so repeated calls agree
/// bit for bit.
pub fn spectral_norm_full(a: ArrayView2<'_, f64>, max_iters: usize, tol: f64) -> SpectralNorm {
    let (rows, cols) = a.dim();
    if rows == 0 || cols == 0 {
        return SpectralNorm { value: 0.0, residual: 0.0, iterations: 0 };
    }
    // Deterministic, non-degenerate start: a graded ramp keeps the start
    // vector from being orthogonal to the top singular direction for the
    // structured matrices we feed in.
    let mut v = Array1::from_iter((0..cols).map(|i| 1.0 + 1e-3 * i as f64));
    let norm = l2(&v);
    v.mapv_inplace(|x| x / norm);

    let mut sigma = 0.0_f64;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..max_iters {
        iterations = it + 1;
        let av = a.dot(&v);
        let sigma_new = l2(&av);
        if sigma_new == 0.0 {
            return SpectralNorm { value: 0.0, residual: 0.0, iterations };
        }
        let mut w = a.t().dot(&av);
        let wn = l2(&w);
        w.mapv_inplace(|x| x / wn);
        residual = if sigma > 0.0 { ((sigma_new - sigma) / sigma_new).abs() } else { 1.0 };
        sigma = sigma_new;
        v = w;
        if residual < tol {
            break;
        }
    }
    SpectralNorm { value: sigma, residual, iterations }
}

/// Spectral norm with the default iteration budget (200 iterations or
/// relative change below 1e-10).
pub fn spectral_norm(a: ArrayView2<'_, f64>) -> SpectralNorm {
    spectral_norm_full(a, 200, 1e-10)
}

/// Top singular pair `(σ, u, v)` with `σ = uᵀ a v`, used for margin
/// subgradients: ∂‖a‖₂/∂a = u vᵀ.
pub fn top_singular_triplet(a: ArrayView2<'_, f64>) -> (f64, Array1<f64>, Array1<f64>) {
    let (rows, cols) = a.dim();
    let mut v = Array1::from_iter((0..cols).map(|i| 1.0 + 1e-3 * i as f64));
    let norm = l2(&v);
    v.mapv_inplace(|x| x / norm);
    let mut sigma = 0.0_f64;
    for _ in 0..500 {
        let av = a.dot(&v);
        let s = l2(&av);
        if s == 0.0 {
            return (0.0, Array1::zeros(rows), Array1::zeros(cols));
        }
        let mut w = a.t().dot(&av);
        let wn = l2(&w);
        w.mapv_inplace(|x| x / wn);
        let res = if sigma > 0.0 { ((s - sigma) / s).abs() } else { 1.0 };
        sigma = s;
        v = w;
        if res < 1e-12 {
            break;
        }
    }
    let mut u = a.dot(&v);
    let un = l2(&u);
    if un > 0.0 {
        u.mapv_inplace(|x| x / un);
    }
    (sigma, u, v)
}

/// Induced ∞-norm (max absolute row sum).
pub fn inf_norm(a: ArrayView2<'_, f64>) -> f64 {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// ∞-norm of the horizontally stacked block `[w | u | b]`.
///
/// The stability conditions bound gate activations through this quantity;
/// it is the max absolute row sum across all three pieces.
pub fn inf_norm_stacked(w: ArrayView2<'_, f64>, u: ArrayView2<'_, f64>, b: &Array1<f64>) -> f64 {
    let rows = w.nrows();
    debug_assert_eq!(rows, u.nrows());
    debug_assert_eq!(rows, b.len());
    (0..rows)
        .map(|i| {
            w.row(i).iter().map(|x| x.abs()).sum::<f64>()
                + u.row(i).iter().map(|x| x.abs()).sum::<f64>()
                + b[i].abs()
        })
        .fold(0.0, f64::max)
}

/// Row index attaining the stacked ∞-norm (first on ties), for subgradients.
pub fn inf_norm_stacked_argmax(
    w: ArrayView2<'_, f64>,
    u: ArrayView2<'_, f64>,
    b: &Array1<f64>,
) -> (f64, usize) {
    let rows = w.nrows();
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for i in 0..rows {
        let s = w.row(i).iter().map(|x| x.abs()).sum::<f64>()
            + u.row(i).iter().map(|x| x.abs()).sum::<f64>()
            + b[i].abs();
        if s > best {
            best = s;
            arg = i;
        }
    }
    (best, arg)
}

/// Euclidean norm of a vector.
pub fn l2(v: &Array1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Error from the SPD solver.
#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("matrix is not positive definite (pivot {pivot} at row {row}); for a least-squares system this indicates rank deficiency — use a ridge parameter λ > 0")]
    NotPositiveDefinite { row: usize, pivot: f64 },
}

/// Solves `a · x = b` for symmetric positive-definite `a` (multiple
/// right-hand sides, columns of `b`) via Cholesky factorization.
pub fn solve_spd(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>, SolveError> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "solve_spd needs a square matrix");
    assert_eq!(n, b.nrows(), "right-hand side row count mismatch");
    // Lower-triangular factor, a = l·lᵀ.
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(SolveError::NotPositiveDefinite { row: j, pivot: d });
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    let nrhs = b.ncols();
    let mut x = b.clone();
    // Forward substitution l·y = b, then back substitution lᵀ·x = y.
    for c in 0..nrhs {
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn spectral_norm_diagonal() {
        let a = array![[3.0, 0.0], [0.0, 1.0]];
        let s = spectral_norm(a.view());
        assert!((s.value - 3.0).abs() < 1e-10, "{}", s.value);
    }

    #[test]
    fn spectral_norm_zero_matrix() {
        let a = Array2::<f64>::zeros((4, 4));
        assert_eq!(spectral_norm(a.view()).value, 0.0);
    }

    #[test]
    fn spectral_norm_matches_frobenius_on_rank_one() {
        // For a rank-one matrix u·vᵀ the spectral norm is ‖u‖‖v‖.
        let u = array![1.0, -2.0, 0.5];
        let v = array![0.3, 0.7];
        let mut a = Array2::<f64>::zeros((3, 2));
        for i in 0..3 {
            for j in 0..2 {
                a[[i, j]] = u[i] * v[j];
            }
        }
        let expect = l2(&u) * l2(&v);
        let s = spectral_norm(a.view());
        assert!((s.value - expect).abs() < 1e-10);
    }

    #[test]
    fn singular_triplet_gradient_identity() {
        let a = array![[2.0, 0.1], [0.0, 0.5]];
        let (sigma, u, v) = top_singular_triplet(a.view());
        // σ = uᵀ a v must hold at convergence.
        let uav = u.dot(&a.dot(&v));
        assert!((sigma - uav).abs() < 1e-9);
    }

    #[test]
    fn inf_norms() {
        let a = array![[1.0, -2.0], [0.5, 0.25]];
        assert_eq!(inf_norm(a.view()), 3.0);
        let w = array![[1.0], [0.0]];
        let u = array![[-1.0, 1.0], [2.0, 0.0]];
        let b = array![0.5, -3.0];
        assert_eq!(inf_norm_stacked(w.view(), u.view(), &b), 5.0);
        let (val, arg) = inf_norm_stacked_argmax(w.view(), u.view(), &b);
        assert_eq!((val, arg), (5.0, 1));
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![[1.0], [2.0]];
        let x = solve_spd(&a, &b).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cholesky_rejects_singular() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        let b = array![[1.0], [1.0]];
        assert!(solve_spd(&a, &b).is_err());
    }
}
