//! Small dense linear algebra on frames of dimension at most a handful.

use nalgebra::{DMatrix, DVector};

/// Orthonormal basis of the column span of `m` by modified Gram–Schmidt.
/// Columns that become numerically dependent are dropped.
pub fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let mut v = m.column(j).into_owned();
        let scale = v.norm();
        if scale == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &cols {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-12 * scale {
            cols.push(v / n);
        }
    }
    if cols.is_empty() {
        DMatrix::zeros(m.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Thin QR by Gram–Schmidt that keeps the diagonal of `R` (signed).
/// Returns `(Q, diag R)`; assumes full column rank.
pub fn qr_diag(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let k = m.ncols();
    let mut q = m.clone();
    let mut diag = vec![0.0; k];
    for j in 0..k {
        let mut v = q.column(j).into_owned();
        for i in 0..j {
            let qi = q.column(i).into_owned();
            let c = qi.dot(&v);
            v.axpy(-c, &qi, 1.0);
        }
        // second pass for stability
        for i in 0..j {
            let qi = q.column(i).into_owned();
            let c = qi.dot(&v);
            v.axpy(-c, &qi, 1.0);
        }
        let n = v.norm();
        diag[j] = n;
        if n > 0.0 {
            v /= n;
        }
        q.set_column(j, &v);
    }
    (q, diag)
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (vec![], DMatrix::zeros(0, 0));
    }
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    (values, vectors)
}

/// Singular values of `m`, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.ncols() == 0 || m.nrows() == 0 {
        return vec![];
    }
    // For the tall-thin matrices used here the Gram matrix is tiny.
    let g = if m.nrows() >= m.ncols() { m.transpose() * m } else { m * m.transpose() };
    let (vals, _) = sym_eigen_sorted(&g);
    let mut s: Vec<f64> = vals.iter().rev().map(|v| v.max(0.0).sqrt()).collect();
    // Gram squaring loses the small end; refine a 1x1 case exactly.
    if m.ncols() == 1 {
        s = vec![m.column(0).norm()];
    }
    s
}

pub fn max_singular(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 1 {
        return m.column(0).norm();
    }
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Smallest singular value of a tall matrix (rows ≥ cols), computed without
/// squaring through an orthogonal reduction to the square factor `R`.
pub fn min_singular(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 0 {
        return f64::INFINITY;
    }
    if m.ncols() == 1 {
        return m.column(0).norm();
    }
    let r = m.clone().qr().r();
    let k = r.ncols().min(r.nrows());
    let sq = r.view((0, 0), (k, k)).into_owned();
    match sq.clone().try_inverse() {
        Some(inv) => 1.0 / max_singular(&inv),
        None => 0.0,
    }
}

/// `sqrt(det(MᵀM))`, the volume expansion of `M` on its column space.
pub fn gram_volume(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 0 {
        return 1.0;
    }
    if m.ncols() == 1 {
        return m.column(0).norm();
    }
    if m.is_square() {
        return m.determinant().abs();
    }
    let r = m.clone().qr().r();
    (0..r.ncols()).map(|i| r[(i, i)].abs()).product()
}

/// Sine of the largest principal angle between the spans of two orthonormal
/// bases of equal dimension.
pub fn subspace_sin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 && b.ncols() == 0 {
        return 0.0;
    }
    if a.ncols() != b.ncols() {
        return 1.0;
    }
    let residual = a - b * (b.transpose() * a);
    max_singular(&residual).min(1.0)
}

/// Orthonormal basis of the orthogonal complement of the span of the
/// orthonormal columns `b` in `R^d`.
pub fn complement(b: &DMatrix<f64>) -> DMatrix<f64> {
    let d = b.nrows();
    let k = b.ncols();
    if k == 0 {
        return DMatrix::identity(d, d);
    }
    let proj = DMatrix::identity(d, d) - b * b.transpose();
    let (vals, vecs) = sym_eigen_sorted(&proj);
    let take: Vec<DVector<f64>> = vals
        .iter()
        .enumerate()
        .rev()
        .take(d - k)
        .map(|(i, _)| vecs.column(i).into_owned())
        .collect();
    if take.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        orthonormalize(&DMatrix::from_columns(&take))
    }
}

/// Orthonormal basis of `span(f) ∩ span(b)` of the requested dimension, for
/// orthonormal `f` and `b` whose spans intersect transversally.
pub fn intersect(f: &DMatrix<f64>, b: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let d = f.nrows();
    if dim == 0 {
        return DMatrix::zeros(d, 0);
    }
    if b.ncols() == d {
        return f.clone();
    }
    if f.ncols() == d {
        return b.clone();
    }
    let b_perp = complement(b);
    let m = b_perp.transpose() * f;
    let (_, vecs) = sym_eigen_sorted(&(m.transpose() * &m));
    let coeffs = vecs.columns(0, dim).into_owned();
    orthonormalize(&(f * coeffs))
}
