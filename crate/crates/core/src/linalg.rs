//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Matrices up to this size use a full SVD for the spectral norm.
pub const SVD_LIMIT: usize = 64;

/// Spectral norm (largest singular value).
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows() <= SVD_LIMIT && m.ncols() <= SVD_LIMIT {
        m.singular_values().max()
    } else {
        power_norm(m)
    }
}

fn power_norm(m: &DMatrix<f64>) -> f64 {
    let n = m.ncols();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_75).fract());
    v /= v.norm();
    let mut sigma = 0.0;
    for _ in 0..10_000 {
        let w = m.transpose() * (m * &v);
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let next = nw.sqrt();
        v = w / nw;
        if (next - sigma).abs() <= 1e-14 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

/// `out += m * x` for a column-major matrix and plain slices.
#[inline]
pub fn gemv_acc(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (r, c) = m.shape();
    debug_assert_eq!(c, x.len());
    debug_assert_eq!(r, out.len());
    let data = m.as_slice();
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = &data[j * r..(j + 1) * r];
        for (o, a) in out.iter_mut().zip(col) {
            *o += a * xj;
        }
    }
}

/// `out += m^T * x`.
#[inline]
pub fn gemv_t_acc(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (r, c) = m.shape();
    debug_assert_eq!(r, x.len());
    debug_assert_eq!(c, out.len());
    let data = m.as_slice();
    for (j, o) in out.iter_mut().enumerate() {
        let col = &data[j * r..(j + 1) * r];
        *o += col.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().min()
}

/// Symmetric square root with negative eigenvalues clamped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(m, |l| l.max(0.0).sqrt())
}

/// Inverse symmetric square root; eigenvalues below `floor` are clamped.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    sym_apply(m, |l| 1.0 / l.max(floor).sqrt())
}

fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let s = (m + m.transpose()) * 0.5;
    let eig = s.symmetric_eigen();
    let mut d = eig.eigenvalues.clone();
    d.iter_mut().for_each(|l| *l = f(*l));
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Moore-Penrose pseudo-inverse with a relative singular-value cutoff.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-12 * (m.nrows().max(m.ncols()) as f64);
    svd.pseudo_inverse(eps.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()))
}

/// Stacks matrices vertically; all must share the column count.
pub fn vstack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = parts.first().map_or(0, |p| p.ncols());
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r0 = 0;
    for p in parts {
        out.view_mut((r0, 0), (p.nrows(), cols)).copy_from(p);
        r0 += p.nrows();
    }
    out
}

/// Stacks matrices horizontally; all must share the row count.
pub fn hstack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = parts.first().map_or(0, |p| p.nrows());
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c0 = 0;
    for p in parts {
        out.view_mut((0, c0), (rows, p.ncols())).copy_from(p);
        c0 += p.ncols();
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a)
}
