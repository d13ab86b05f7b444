//! Dense linear algebra over [`Real`]: Cholesky with jitter escalation,
//! triangular solves and a symmetric eigensolver (Householder
//! tridiagonalisation followed by implicit QL).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Lower Cholesky factor of a symmetric positive-definite matrix, or `None`
/// when a non-positive pivot is met. Only the lower triangle of `a` is read.
pub fn cholesky<T: Real>(a: ArrayView2<T>) -> Option<Array2<T>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            let dot = ri.iter().zip(rj).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            let v = a[(i, j)] - dot;
            if i == j {
                if !(v > T::zero()) || !v.is_finite() {
                    return None;
                }
                l[i * n + i] = v.sqrt();
            } else {
                l[i * n + j] = v / l[j * n + j];
            }
        }
    }
    Some(Array2::from_shape_vec((n, n), l).expect("shape matches buffer"))
}

/// Cholesky of `a + δ·scale·I`, escalating δ from `1e-10` by ×10 up to `1e-4`.
/// Returns the factor and the jitter actually added (`0` if none was needed).
pub fn cholesky_with_jitter<T: Real>(a: ArrayView2<T>, scale: T) -> Result<(Array2<T>, T)> {
    if let Some(l) = cholesky(a) {
        return Ok((l, T::zero()));
    }
    let mut delta = 1e-10_f64;
    let mut work = a.to_owned();
    while delta <= 1e-4 * (1.0 + 1e-9) {
        let jitter = T::lit(delta) * scale;
        for i in 0..work.nrows() {
            work[(i, i)] = a[(i, i)] + jitter;
        }
        if let Some(l) = cholesky(work.view()) {
            return Ok((l, jitter));
        }
        delta *= 10.0;
    }
    Err(Error::CholeskyFailed {
        max_jitter: 1e-4 * scale.to_f64_lossy(),
    })
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower<T: Real>(l: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s = s - l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transposed<T: Real>(l: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s = s - l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Inverse of an SPD matrix from its lower Cholesky factor.
pub fn spd_inverse_from_cholesky<T: Real>(l: ArrayView2<T>) -> Array2<T> {
    let n = l.nrows();
    let mut inv = Array2::zeros((n, n));
    let mut e = Array1::zeros(n);
    for j in 0..n {
        e.fill(T::zero());
        e[j] = T::one();
        let y = solve_lower(l, e.view());
        let x = solve_lower_transposed(l, y.view());
        inv.column_mut(j).assign(&x);
    }
    inv
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    /// Eigenvalues in non-increasing order.
    pub values: Array1<T>,
    /// Column `j` is the unit eigenvector for `values[j]`; the first entry of
    /// each column that is not numerically zero is positive.
    pub vectors: Array2<T>,
}

/// Full symmetric eigendecomposition. Reads the lower triangle of `a`.
pub fn symmetric_eigen<T: Real>(a: ArrayView2<T>) -> Result<SymmetricEigen<T>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::DimensionMismatch {
            context: "symmetric_eigen",
            expected: n,
            found: a.ncols(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("symmetric_eigen"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("symmetric_eigen input".into()));
    }
    // `u` holds the transpose of the accumulating transformation, so that the
    // hot loops below walk contiguous rows. Start from the symmetrised lower
    // triangle.
    let mut u = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            u[i * n + j] = a[(i, j)];
            u[j * n + i] = a[(i, j)];
        }
    }
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    tridiagonalize(n, &mut u, &mut d, &mut e);
    ql_implicit(n, &mut u, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| d[y].partial_cmp(&d[x]).expect("finite eigenvalues"));
    let values = Array1::from_iter(order.iter().map(|&i| d[i]));
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        let row = &u[src * n..(src + 1) * n];
        let max_abs = row.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let tiny = max_abs * T::epsilon() * T::lit(16.0);
        let sign = row
            .iter()
            .find(|v| v.abs() > tiny)
            .map(|&v| if v < T::zero() { -T::one() } else { T::one() })
            .unwrap_or_else(T::one);
        for (r, &v) in row.iter().enumerate() {
            vectors[(r, col)] = v * sign;
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

// Householder reduction to tridiagonal form. Operates on `u = Vᵀ` of the
// classic formulation; on return row `j` of `u` is column `j` of the
// orthogonal transform, `d` the diagonal and `e[1..]` the sub-diagonal.
fn tridiagonalize<T: Real>(n: usize, u: &mut [T], d: &mut [T], e: &mut [T]) {
    let idx = |r: usize, c: usize| r * n + c;
    // V[r][c] == u[c][r]
    for j in 0..n {
        d[j] = u[idx(j, n - 1)];
    }
    for i in (1..n).rev() {
        let mut scale = T::zero();
        let mut h = T::zero();
        for v in &d[..i] {
            scale = scale + v.abs();
        }
        if scale == T::zero() {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = u[idx(j, i - 1)];
                u[idx(j, i)] = T::zero();
                u[idx(i, j)] = T::zero();
            }
        } else {
            for v in &mut d[..i] {
                *v = *v / scale;
                h = h + *v * *v;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > T::zero() {
                g = -g;
            }
            e[i] = scale * g;
            h = h - f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = T::zero();
            }
            for j in 0..i {
                f = d[j];
                u[idx(i, j)] = f;
                g = e[j] + u[idx(j, j)] * f;
                let row = &u[idx(j, j + 1)..idx(j, i)];
                for (off, &vkj) in row.iter().enumerate() {
                    let k = j + 1 + off;
                    g = g + vkj * d[k];
                    e[k] = e[k] + vkj * f;
                }
                e[j] = g;
            }
            f = T::zero();
            for j in 0..i {
                e[j] = e[j] / h;
                f = f + e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] = e[j] - hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                let row = &mut u[idx(j, j)..idx(j, i)];
                for (off, v) in row.iter_mut().enumerate() {
                    let k = j + off;
                    *v = *v - (f * e[k] + g * d[k]);
                }
                d[j] = u[idx(j, i - 1)];
                u[idx(j, i)] = T::zero();
            }
        }
        d[i] = h;
    }

    // Accumulate transformations.
    for i in 0..n - 1 {
        u[idx(i, n - 1)] = u[idx(i, i)];
        u[idx(i, i)] = T::one();
        let h = d[i + 1];
        if h != T::zero() {
            for k in 0..=i {
                d[k] = u[idx(i + 1, k)] / h;
            }
            for j in 0..=i {
                let g = (0..=i).fold(T::zero(), |acc, k| acc + u[idx(i + 1, k)] * u[idx(j, k)]);
                for k in 0..=i {
                    u[idx(j, k)] = u[idx(j, k)] - g * d[k];
                }
            }
        }
        for k in 0..=i {
            u[idx(i + 1, k)] = T::zero();
        }
    }
    for j in 0..n {
        d[j] = u[idx(j, n - 1)];
        u[idx(j, n - 1)] = T::zero();
    }
    u[idx(n - 1, n - 1)] = T::one();
    e[0] = T::zero();
}

// Implicit QL iterations on the tridiagonal (d, e), applying the rotations to
// the rows of `u`.
fn ql_implicit<T: Real>(n: usize, u: &mut [T], d: &mut [T], e: &mut [T]) -> Result<()> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = T::zero();
    let eps = T::epsilon();
    let max_iter = 60 * n.max(1);
    let mut total_iter = 0usize;
    let mut f = T::zero();
    let mut tst1 = T::zero();
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            loop {
                total_iter += 1;
                if total_iter > max_iter {
                    return Err(Error::NoConvergence {
                        what: "symmetric eigensolver",
                        iterations: max_iter,
                    });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (T::lit(2.0) * e[l]);
                let mut r = p.hypot(T::one());
                if p < T::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di = *di - h;
                }
                f = f + h;

                p = d[m];
                let mut c = T::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = T::zero();
                let mut s2 = T::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = u.split_at_mut((i + 1) * n);
                    let row_i = &mut lo[i * n..];
                    let row_i1 = &mut hi[..n];
                    for (a, b) in row_i.iter_mut().zip(row_i1.iter_mut()) {
                        let hk = *b;
                        *b = s * *a + c * hk;
                        *a = c * *a - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] = d[l] + f;
        e[l] = T::zero();
    }
    Ok(())
}

/// Mean and (population) variance of each column.
pub fn column_moments<T: Real>(x: ArrayView2<T>) -> (Array1<T>, Array1<T>) {
    let n = T::from_usize_lossy(x.nrows().max(1));
    let mean = x.sum_axis(ndarray::Axis(0)) / n;
    let mut var = Array1::zeros(x.ncols());
    for row in x.rows() {
        for (j, &v) in row.iter().enumerate() {
            let d = v - mean[j];
            var[j] = var[j] + d * d;
        }
    }
    (mean, var / n)
}
