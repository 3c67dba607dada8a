//! Small dense linear-algebra helpers shared by the channel, sbl and gpr
//! modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Relative starting jitter; doubled up to [`JITTER_DOUBLINGS`] times.
pub const JITTER_START: f64 = 1e-10;
pub const JITTER_DOUBLINGS: usize = 8;

/// Cholesky factor of `m`, retrying with a diagonal jitter of
/// `JITTER_START * scale`, doubling up to eight times. Returns the factor and
/// the jitter that was finally added (0 when none was needed).
pub fn cholesky_jittered(m: &DMatrix<f64>, scale: f64) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some((c, 0.0));
    }
    let scale = if scale > 0.0 && scale.is_finite() {
        scale
    } else {
        mean_diag(m).abs().max(f64::MIN_POSITIVE)
    };
    let mut jitter = JITTER_START * scale;
    for _ in 0..=JITTER_DOUBLINGS {
        let mut shifted = m.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Some((c, jitter));
        }
        jitter *= 2.0;
    }
    None
}

pub fn mean_diag(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().min(m.ncols());
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|i| m[(i, i)]).sum::<f64>() / n as f64
}

pub fn log_det_chol(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// In-place `(A + Aᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (columns of the returned matrix follow the same order).
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
