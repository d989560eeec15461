//! Dense linear-algebra kernels shared by every other module.
//!
//! All computation happens in `f64`. [`Matrix`] is an immutable, finite-valued
//! wrapper around a `nalgebra` dense matrix; the decomposition routines here
//! are deterministic so that downstream similarity scores are reproducible.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Tolerance used when validating that a basis has orthonormal columns.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Dense real matrix with finite entries.
///
/// Dereferences to [`DMatrix<f64>`] for read-only access; there is no mutable
/// access once constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix(DMatrix<f64>);

impl Matrix {
    /// Wraps a dense matrix, rejecting NaN or infinite entries.
    pub fn new(inner: DMatrix<f64>) -> Result<Self> {
        if inner.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{}x{} matrix",
                inner.nrows(),
                inner.ncols()
            )));
        }
        Ok(Matrix(inner))
    }

    /// Internal constructor for results of arithmetic on finite inputs.
    pub(crate) fn from_trusted(inner: DMatrix<f64>) -> Self {
        debug_assert!(inner.iter().all(|x| x.is_finite()));
        Matrix(inner)
    }

    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Matrix::new(DMatrix::from_row_slice(rows, cols, data))
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let flat: Vec<f64> = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Matrix::from_row_major(r, c, &flat)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Matrix(DMatrix::identity(n, n))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.0.nrows(), self.0.ncols())
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let (r, c) = self.shape();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    /// Frobenius inner product `<self, other>`.
    pub fn frobenius_dot(&self, other: &Matrix) -> Result<f64> {
        ensure_same_shape(self, other, "frobenius inner product")?;
        Ok(self.0.dot(&other.0))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix(self.0.transpose())
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.ncols() != rhs.nrows() {
            return Err(Error::shape(format!(
                "cannot multiply {:?} by {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        Ok(Matrix(&self.0 * &rhs.0))
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        ensure_same_shape(self, rhs, "addition")?;
        Ok(Matrix(&self.0 + &rhs.0))
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        ensure_same_shape(self, rhs, "subtraction")?;
        Ok(Matrix(&self.0 - &rhs.0))
    }

    pub fn scale(&self, factor: f64) -> Result<Matrix> {
        Matrix::new(&self.0 * factor)
    }

    /// Largest absolute deviation of `selfᵀ self` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.0.transpose() * &self.0;
        let k = gram.nrows();
        (&gram - DMatrix::<f64>::identity(k, k)).amax()
    }
}

impl Deref for Matrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl From<Matrix> for DMatrix<f64> {
    fn from(m: Matrix) -> Self {
        m.0
    }
}

pub(crate) fn ensure_same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(crate) fn ensure_orthonormal(m: &Matrix, tol: f64, what: &str) -> Result<()> {
    let err = m.orthonormality_error();
    if err > tol {
        return Err(Error::invalid(format!(
            "{what} does not have orthonormal columns (max deviation {err:.3e})"
        )));
    }
    Ok(())
}

/// Rank-r singular triplet `U diag(sigma) Vᵀ`.
///
/// Columns of `u` and `v` are orthonormal and `sigma` is non-negative and
/// non-increasing. Triplets produced by [`truncated_svd`] additionally carry
/// the sign convention: the largest-magnitude entry of every `u` column is
/// positive (lowest row wins ties), with the matching `v` column flipped
/// jointly.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdTriplet {
    u: Matrix,
    sigma: Vec<f64>,
    v: Matrix,
}

impl SvdTriplet {
    /// Assembles a triplet from parts, validating every invariant except the
    /// sign convention.
    pub fn from_parts(u: Matrix, sigma: Vec<f64>, v: Matrix) -> Result<Self> {
        let r = sigma.len();
        if u.ncols() != r || v.ncols() != r {
            return Err(Error::shape(format!(
                "triplet widths disagree: U has {} columns, V has {}, sigma has {r}",
                u.ncols(),
                v.ncols()
            )));
        }
        if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid("singular values must be finite and non-negative"));
        }
        if sigma.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("singular values must be non-increasing"));
        }
        ensure_orthonormal(&u, ORTHONORMAL_TOL, "U")?;
        ensure_orthonormal(&v, ORTHONORMAL_TOL, "V")?;
        Ok(SvdTriplet { u, sigma, v })
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Same bases, different spectrum. Used by smoothing, which never touches
    /// the singular vectors.
    pub(crate) fn with_sigma(&self, sigma: Vec<f64>) -> SvdTriplet {
        debug_assert_eq!(sigma.len(), self.sigma.len());
        SvdTriplet {
            u: self.u.clone(),
            sigma,
            v: self.v.clone(),
        }
    }

    /// `U diag(coeffs) Vᵀ` for an arbitrary (possibly signed) coefficient
    /// vector of matching length.
    pub fn reconstruct_with(&self, coeffs: &[f64]) -> Result<Matrix> {
        if coeffs.len() != self.rank() {
            return Err(Error::shape(format!(
                "{} coefficients for a rank-{} triplet",
                coeffs.len(),
                self.rank()
            )));
        }
        let mut scaled = self.u.as_dmatrix().clone();
        for (j, c) in coeffs.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*c);
        }
        Matrix::new(scaled * self.v.transpose().as_dmatrix())
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut scaled = self.u.as_dmatrix().clone();
        for (j, s) in self.sigma.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        Matrix::from_trusted(scaled * self.v.as_dmatrix().transpose())
    }
}

/// Flips column pairs so that each `u` column's largest-magnitude entry is
/// positive. Ties go to the lowest row index.
fn apply_sign_convention(u: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    for j in 0..u.ncols() {
        let col = u.column(j);
        let max_abs = col.amax();
        // magnitudes within a few ulps of the maximum count as tied
        let tol = max_abs * 1e-12;
        let best = col.iter().position(|x| x.abs() >= max_abs - tol).unwrap_or(0);
        if u[(best, j)] < 0.0 {
            u.column_mut(j).neg_mut();
            v.column_mut(j).neg_mut();
        }
    }
}

/// Thin SVD `(U, σ, V)` with `min(m, n)` columns. Computed with `faer`: the
/// `nalgebra` routine returns wrong factors for some exactly rank-deficient
/// inputs, which task vectors often are.
fn thin_svd(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let (rows, cols) = x.shape();
    let f = faer::Mat::<f64>::from_fn(rows, cols, |i, j| x[(i, j)]);
    let svd = f
        .thin_svd()
        .map_err(|e| Error::numerical(format!("SVD did not converge: {e:?}")))?;
    let k = rows.min(cols);
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let u = DMatrix::from_fn(rows, k, |i, j| u[(i, j)]);
    let v = DMatrix::from_fn(cols, k, |i, j| v[(i, j)]);
    let sigma = (0..k).map(|i| s[i]).collect();
    Ok((u, sigma, v))
}

/// Best rank-`r` approximation of `m` in the Frobenius norm, as a triplet with
/// the deterministic sign convention applied.
pub fn truncated_svd(m: &Matrix, r: usize) -> Result<SvdTriplet> {
    let (rows, cols) = m.shape();
    let max_rank = rows.min(cols);
    if r == 0 || r > max_rank {
        return Err(Error::invalid(format!(
            "rank {r} out of range 1..={max_rank} for a {rows}x{cols} matrix"
        )));
    }
    let (u_full, values, v_full) = thin_svd(m.as_dmatrix())?;

    // the backend sorts, but keep the order explicit and stable here
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let keep = &order[..r];

    let mut u = DMatrix::zeros(rows, r);
    let mut v = DMatrix::zeros(cols, r);
    let mut sigma = Vec::with_capacity(r);
    for (dst, &src) in keep.iter().enumerate() {
        u.set_column(dst, &u_full.column(src));
        v.set_column(dst, &v_full.column(src));
        sigma.push(values[src].max(0.0));
    }
    apply_sign_convention(&mut u, &mut v);
    Ok(SvdTriplet {
        u: Matrix::from_trusted(u),
        sigma,
        v: Matrix::from_trusted(v),
    })
}

/// Full thin spectrum of `m`, non-increasing.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    let x = m.as_dmatrix();
    let f = faer::Mat::<f64>::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)]);
    let mut s = f
        .singular_values()
        .map_err(|e| Error::numerical(format!("SVD did not converge: {e:?}")))?;
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Polar orthonormal factor of a tall matrix: with thin SVD `M = P S Qᵀ`,
/// returns `P Qᵀ`, the orthonormal matrix closest to `M`.
///
/// Rank-deficient input still yields `P Qᵀ` from the deterministic SVD; the
/// factor is not unique in that case.
pub fn whiten(m: &Matrix) -> Result<Matrix> {
    let (d, k) = m.shape();
    if d < k {
        return Err(Error::shape(format!(
            "whitening needs at least as many rows as columns, got {d}x{k}"
        )));
    }
    if k == 0 {
        return Ok(m.clone());
    }
    let svd = truncated_svd(m, k)?;
    Ok(Matrix::from_trusted(
        svd.u.as_dmatrix() * svd.v.as_dmatrix().transpose(),
    ))
}

/// `exp(A − Aᵀ)`: the rotation generated by the skew-symmetric part of `a`.
pub fn matrix_exp_skew(a: &Matrix) -> Result<Matrix> {
    if a.nrows() != a.ncols() {
        return Err(Error::shape(format!(
            "matrix exponential needs a square input, got {:?}",
            a.shape()
        )));
    }
    let skew = a.as_dmatrix() - a.as_dmatrix().transpose();
    Matrix::new(skew.exp())
}

/// Deterministic RNG for a given integer seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matrix of independent standard normal draws.
pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Subtracts from `x` its projection onto the columns of `basis` (assumed
/// orthonormal). Two passes of classical Gram–Schmidt.
fn project_out(x: &mut DVector<f64>, basis: &DMatrix<f64>) {
    if basis.ncols() == 0 {
        return;
    }
    for _ in 0..2 {
        let coeffs = basis.tr_mul(x);
        *x -= basis * coeffs;
    }
}

/// Draws `count` random orthonormal columns orthogonal to `existing`.
fn sample_orthonormal_columns<R: Rng + ?Sized>(
    existing: &DMatrix<f64>,
    count: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = existing.nrows();
    if existing.ncols() + count > d {
        return Err(Error::invalid(format!(
            "cannot fit {} + {count} orthonormal columns in dimension {d}",
            existing.ncols()
        )));
    }
    let mut basis = existing.clone();
    let mut out = DMatrix::zeros(d, count);
    let mut filled = 0;
    let mut attempts = 0;
    while filled < count {
        attempts += 1;
        if attempts > 64 * (count + 1) {
            return Err(Error::numerical("failed to sample an orthogonal direction"));
        }
        let mut x = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        project_out(&mut x, &basis);
        let norm = x.norm();
        if norm < 1e-8 {
            continue;
        }
        x /= norm;
        out.set_column(filled, &x);
        let last = basis.ncols();
        basis = basis.insert_column(last, 0.0);
        basis.set_column(last, &x);
        filled += 1;
    }
    Ok(out)
}

/// Random `d×k` matrix with orthonormal columns.
pub fn random_orthonormal<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> Result<Matrix> {
    let empty = DMatrix::zeros(d, 0);
    sample_orthonormal_columns(&empty, k, rng).map(Matrix::from_trusted)
}

/// `count` random orthonormal columns, each orthogonal to every column of `u`.
/// Deterministic in `seed`.
pub fn orthogonal_complement_sample(u: &Matrix, count: usize, seed: u64) -> Result<Matrix> {
    let (d, r) = u.shape();
    if r + count > d {
        return Err(Error::invalid(format!(
            "ambient dimension {d} too small for {r} + {count} orthonormal columns"
        )));
    }
    ensure_orthonormal(u, 1e-6, "complement base")?;
    let mut rng = seeded_rng(seed);
    sample_orthonormal_columns(u.as_dmatrix(), count, &mut rng).map(Matrix::from_trusted)
}

/// Sine of the largest principal angle between the column spaces of `a` and
/// `b`, both given with orthonormal columns of equal count.
pub fn max_principal_angle_sin(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "principal angles need equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let b_mat = b.as_dmatrix();
    let residual = a.as_dmatrix() - b_mat * b_mat.tr_mul(a.as_dmatrix());
    if residual.ncols() == 0 {
        return Ok(0.0);
    }
    let s = singular_values(&Matrix::from_trusted(residual))?;
    Ok(s.first().copied().unwrap_or(0.0).min(1.0))
}

/// Orthonormal basis of the leading `k`-dimensional left and right singular
/// subspaces of `m`.
pub fn leading_subspaces(m: &Matrix, k: usize) -> Result<(Matrix, Matrix)> {
    let t = truncated_svd(m, k)?;
    Ok((t.u, t.v))
}
