//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{GmedError, Result};

/// Eigen-decomposition of a symmetric matrix with eigenvalues in ascending
/// order; column `j` of the returned matrix pairs with value `j`.
pub fn sym_eigen_ascending(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&j| eig.eigenvalues[j]));
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `H^{-1/2}` through the eigen-decomposition of `H`.
pub fn inverse_sqrt_spd(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eigen_ascending(h);
    if values.iter().any(|&v| v <= 0.0) {
        return Err(GmedError::NotPositiveDefinite("H^{-1/2}"));
    }
    let scale = DVector::from_iterator(values.len(), values.iter().map(|v| v.sqrt().recip()));
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |r, c| {
        vectors[(r, c)] * scale[c]
    });
    Ok(symmetrize(&(&scaled * vectors.transpose())))
}

/// Flips `v` so that its entry of largest magnitude is positive.
/// Ties go to the lowest index.
pub fn apply_sign_convention(v: &mut DVector<f64>) {
    let mut best = 0;
    for j in 1..v.len() {
        if v[j].abs() > v[best].abs() {
            best = j;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Quadratic form `x' M x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for c in 0..n {
        let mut col = 0.0;
        for r in 0..n {
            col += m[(r, c)] * x[r];
        }
        acc += col * x[c];
    }
    acc
}

/// Solves `A x = b` for symmetric positive definite `A`, failing when the
/// Cholesky factorization does not exist.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    Cholesky::new(a.clone()).map(|c| c.solve(b))
}

/// Orthonormal basis (as columns) of the orthogonal complement of the
/// column span of `basis`. Returns the identity when `basis` has no columns.
pub fn orthogonal_complement(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let p = basis.nrows();
    if basis.ncols() == 0 {
        return DMatrix::identity(p, p);
    }
    let projector = span_projector(basis);
    let residual = DMatrix::identity(p, p) - projector;
    let (values, vectors) = sym_eigen_ascending(&residual);
    let keep: Vec<usize> = (0..p).filter(|&j| values[j] > 0.5).collect();
    let mut out = DMatrix::zeros(p, keep.len());
    for (c, &j) in keep.iter().enumerate() {
        let mut v = vectors.column(j).into_owned();
        apply_sign_convention(&mut v);
        out.set_column(c, &v);
    }
    out
}

/// Orthogonal projector `B (B'B)^{-1} B'` onto the column span of `B`.
pub fn span_projector(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = basis.transpose() * basis;
    let inv = gram
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| gram.pseudo_inverse(1e-12).ok())
        .expect("pseudo-inverse of a Gram matrix");
    symmetrize(&(basis * inv * basis.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_sqrt_squares_to_inverse() {
        let h = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let r = inverse_sqrt_spd(&h).unwrap();
        let prod = &r * &h * &r;
        assert!((prod - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn inverse_sqrt_rejects_indefinite() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(inverse_sqrt_spd(&h).is_err());
    }

    #[test]
    fn sign_convention_ties_use_lowest_index() {
        let mut v = DVector::from_vec(vec![-0.5, 0.5, 0.1]);
        apply_sign_convention(&mut v);
        assert_eq!(v[0], 0.5);
        let mut w = DVector::from_vec(vec![0.1, -0.9, 0.3]);
        apply_sign_convention(&mut w);
        assert_eq!(w[1], 0.9);
    }

    #[test]
    fn complement_is_orthogonal() {
        let b = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0]);
        let q = orthogonal_complement(&b);
        assert_eq!(q.ncols(), 2);
        assert!((q.transpose() * &b).amax() < 1e-12);
        assert!((q.transpose() * &q - DMatrix::identity(2, 2)).amax() < 1e-12);
    }
}
