//! Eigenvector spatial basis and the augmented design `[X, Φ]`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use crate::error::{invalid, Error, Result};
use crate::linalg::symmetric_eigen;
use crate::scalar::Real;
use crate::spatial_sim::MaternParams;

/// Leading eigenvectors `Φ` (n × m, orthonormal columns) and eigenvalues of a
/// covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet<T> {
    pub phi: Array2<T>,
    /// Non-increasing, length m.
    pub eigenvalues: Array1<T>,
    /// Covariance parameters the basis was built from, when known.
    pub source_params: Option<MaternParams<T>>,
}

impl<T: Real> BasisSet<T> {
    pub fn m(&self) -> usize {
        self.phi.ncols()
    }

    /// Keeps only the leading `m` columns.
    pub fn truncate(&self, m: usize) -> Result<Self> {
        if m > self.m() {
            return invalid(format!("cannot truncate a {}-column basis to {m}", self.m()));
        }
        Ok(Self {
            phi: self.phi.slice(s![.., ..m]).to_owned(),
            eigenvalues: self.eigenvalues.slice(s![..m]).to_owned(),
            source_params: self.source_params,
        })
    }

    /// Writes `Φ` and the eigenvalues (as a 1 × m matrix) in the binary matrix format.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let ev = self.eigenvalues.clone().insert_axis(Axis(0));
        crate::io::save_matrices(path, &[&self.phi, &ev])
    }

    /// Rows of `Φ` at the given location indices.
    pub fn rows(&self, indices: &[usize]) -> Result<Array2<T>> {
        basis_at_test(self, indices)
    }
}

/// The `m` leading eigenvectors of a symmetric `cov`, in descending eigenvalue
/// order, each signed so its first non-negligible entry is positive.
pub fn eigen_basis<T: Real>(cov: ArrayView2<T>, m: usize) -> Result<BasisSet<T>> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "eigen_basis square covariance",
            expected: n,
            found: cov.ncols(),
        });
    }
    if m == 0 || m > n {
        return invalid(format!("basis dimension must satisfy 1 <= m <= {n}, got {m}"));
    }
    let eig = symmetric_eigen(cov)?;
    Ok(BasisSet {
        phi: eig.vectors.slice(s![.., ..m]).to_owned(),
        eigenvalues: eig.values.slice(s![..m]).to_owned(),
        source_params: None,
    })
}

/// Horizontal concatenation `[X, Φ]`.
pub fn augment_design<T: Real>(x: ArrayView2<T>, phi: ArrayView2<T>) -> Result<Array2<T>> {
    if x.nrows() != phi.nrows() {
        return Err(Error::DimensionMismatch {
            context: "augment_design rows",
            expected: x.nrows(),
            found: phi.nrows(),
        });
    }
    Ok(concatenate(Axis(1), &[x, phi]).expect("row counts checked"))
}

/// Rows of a full-location basis at `indices` (typically the test split).
pub fn basis_at_test<T: Real>(basis: &BasisSet<T>, indices: &[usize]) -> Result<Array2<T>> {
    let n = basis.phi.nrows();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    Ok(basis.phi.select(Axis(0), indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial_sim::{build_cov_matrix, Smoothness};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};

    fn gram_error(phi: &Array2<f64>) -> f64 {
        let g = phi.t().dot(phi);
        g.indexed_iter()
            .map(|((i, j), &v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_covariance() {
        let b = eigen_basis(Array2::<f64>::eye(6).view(), 6).unwrap();
        assert!(b.eigenvalues.iter().all(|&v| (v - 1.0).abs() < 1e-14));
        assert!(gram_error(&b.phi) < 1e-12);
    }

    #[test]
    fn diagonal_covariance() {
        let cov: Array2<f64> = array![[3.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
        let b = eigen_basis(cov.view(), 2).unwrap();
        assert_eq!(b.eigenvalues.len(), 2);
        assert!((b.eigenvalues[0] - 3.0).abs() < 1e-14 && (b.eigenvalues[1] - 2.0).abs() < 1e-14);
        let expected: Array2<f64> = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        for (a, e) in b.phi.iter().zip(expected.iter()) {
            assert!((a.abs() - e).abs() < 1e-14);
        }
    }

    #[test]
    fn matern_basis_orthonormal_and_truncation_monotone() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let loc = Array2::from_shape_fn((300, 2), |_| rng.random::<f64>());
        let p = MaternParams::from_effective_range(1.0, 0.3, Smoothness::Half).unwrap();
        let cov = build_cov_matrix(loc.view(), &p).unwrap();
        let full = eigen_basis(cov.view(), 60).unwrap();
        assert!(gram_error(&full.truncate(25).unwrap().phi) < 1e-8);
        let mut last = f64::INFINITY;
        for m in [1, 5, 10, 25, 60] {
            let b = full.truncate(m).unwrap();
            let recon = b.phi.dot(&Array2::from_diag(&b.eigenvalues)).dot(&b.phi.t());
            let err = (&cov - &recon).mapv(|v| v * v).sum().sqrt();
            assert!(err <= last + 1e-12, "m={m}: {err} > {last}");
            last = err;
        }
        assert!(full.eigenvalues.iter().all(|&v| v >= -1e-8));
    }

    #[test]
    fn first_nonzero_entry_is_positive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let loc = Array2::from_shape_fn((40, 2), |_| rng.random::<f64>());
        let p = MaternParams::from_effective_range(1.0, 0.6, Smoothness::ThreeHalves).unwrap();
        let cov = build_cov_matrix(loc.view(), &p).unwrap();
        let b = eigen_basis(cov.view(), 10).unwrap();
        for col in b.phi.columns() {
            let first = col.iter().find(|v| v.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
        assert_eq!(b, eigen_basis(cov.view(), 10).unwrap());
    }

    #[test]
    fn augment_shapes() {
        let x = Array2::<f64>::ones((2000, 2));
        let phi = Array2::<f64>::zeros((2000, 25));
        let xt = augment_design(x.view(), phi.view()).unwrap();
        assert_eq!(xt.dim(), (2000, 27));
        assert_eq!(xt.slice(s![.., ..2]), x);

        let empty_x = Array2::<f64>::zeros((5, 0));
        let phi = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64);
        assert_eq!(augment_design(empty_x.view(), phi.view()).unwrap(), phi);
        let empty_phi = Array2::<f64>::zeros((5, 0));
        assert_eq!(augment_design(phi.view(), empty_phi.view()).unwrap(), phi);
        assert!(augment_design(phi.view(), Array2::<f64>::zeros((4, 1)).view()).is_err());
    }

    #[test]
    fn test_rows_reassemble() {
        let phi = Array2::from_shape_fn((7, 3), |(i, j)| (i * 3 + j) as f64);
        let b = BasisSet { phi: phi.clone(), eigenvalues: array![3.0, 2.0, 1.0], source_params: None };
        assert_eq!(basis_at_test(&b, &[]).unwrap().dim(), (0, 3));
        let all: Vec<usize> = (0..7).collect();
        assert_eq!(basis_at_test(&b, &all).unwrap(), phi);
        let train = basis_at_test(&b, &[0, 2, 3, 6]).unwrap();
        let test = basis_at_test(&b, &[1, 4, 5]).unwrap();
        let mut rebuilt = Array2::zeros((7, 3));
        for (r, &i) in [0, 2, 3, 6].iter().enumerate() {
            rebuilt.row_mut(i).assign(&train.row(r));
        }
        for (r, &i) in [1, 4, 5].iter().enumerate() {
            rebuilt.row_mut(i).assign(&test.row(r));
        }
        assert_eq!(rebuilt, phi);
        assert!(matches!(basis_at_test(&b, &[7]), Err(Error::IndexOutOfRange { .. })));
    }
}
