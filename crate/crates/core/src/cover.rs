//! Shared cover space: a single orthonormal basis pair spanning every task's
//! singular directions, plus the structural mask applied to merged
//! coordinates before mapping back to parameter space.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{whiten, Matrix, ORTHONORMAL_TOL};
use crate::similarity::{concat_u, concat_v};
use crate::task_vector::KnowledgeDecomposition;

/// Orthonormal pair `(Ũ, Ṽ)` of common width `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverBasis {
    u: Matrix,
    v: Matrix,
}

impl CoverBasis {
    pub fn new(u: Matrix, v: Matrix) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return Err(Error::shape(format!(
                "cover basis widths differ: {} vs {}",
                u.ncols(),
                v.ncols()
            )));
        }
        let k = u.ncols();
        if k > u.nrows().min(v.nrows()) {
            return Err(Error::invalid(format!(
                "cover width {k} exceeds ambient shape {}x{}",
                u.nrows(),
                v.nrows()
            )));
        }
        for (m, name) in [(&u, "Ũ"), (&v, "Ṽ")] {
            let err = m.orthonormality_error();
            if err > ORTHONORMAL_TOL {
                return Err(Error::invalid(format!(
                    "{name} is not orthonormal (max deviation {err:.3e})"
                )));
            }
        }
        Ok(CoverBasis { u, v })
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn k(&self) -> usize {
        self.u.ncols()
    }

    /// Ambient shape `(m, n)` of the matrices this basis covers.
    pub fn ambient_shape(&self) -> (usize, usize) {
        (self.u.nrows(), self.v.nrows())
    }
}

/// Whitens the column-concatenated task bases. Column order follows task
/// order, so at block size `r` each mask block belongs to one task.
pub fn build_cover_basis(decomps: &[KnowledgeDecomposition]) -> Result<CoverBasis> {
    let Some(first) = decomps.first() else {
        return Err(Error::invalid("cover basis needs at least one task"));
    };
    let (m, n) = first.source_shape();
    if decomps.iter().any(|d| d.source_shape() != (m, n)) {
        return Err(Error::shape("task decompositions disagree on ambient shape"));
    }
    let k: usize = decomps.iter().map(|d| d.rank()).sum();
    if k > m.min(n) {
        return Err(Error::invalid(format!(
            "total rank {k} exceeds min({m}, {n}); reduce the per-task rank"
        )));
    }
    let u = whiten(&Matrix::new(concat_u(decomps))?)?;
    let v = whiten(&Matrix::new(concat_v(decomps))?)?;
    CoverBasis::new(u, v)
}

/// Coordinates `Ũᵀ Δ Ṽ` of `delta` in the cover space (k×k).
pub fn project(delta: &Matrix, basis: &CoverBasis) -> Result<Matrix> {
    if delta.shape() != basis.ambient_shape() {
        return Err(Error::shape(format!(
            "matrix {:?} vs cover basis ambient {:?}",
            delta.shape(),
            basis.ambient_shape()
        )));
    }
    let coords = basis.u.as_dmatrix().tr_mul(delta.as_dmatrix()) * basis.v.as_dmatrix();
    Ok(Matrix::from_trusted(coords))
}

/// Block-diagonal 0/1 pattern with `block × block` all-ones blocks; the last
/// block is truncated when `block` does not divide `size`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralMask {
    size: usize,
    block: usize,
}

impl StructuralMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn contains(&self, p: usize, q: usize) -> bool {
        p / self.block == q / self.block
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_trusted(DMatrix::from_fn(self.size, self.size, |p, q| {
            if self.contains(p, q) {
                1.0
            } else {
                0.0
            }
        }))
    }
}

pub fn make_mask(k: usize, block: usize) -> Result<StructuralMask> {
    if block == 0 || block > k {
        return Err(Error::invalid(format!(
            "mask block {block} out of range 1..={k}"
        )));
    }
    Ok(StructuralMask { size: k, block })
}

/// Block sizes `{8r, 4r, 2r, r, r/2, r/4, r/8}`, floored, at least 1 and at
/// most `k`, deduplicated in descending order.
pub fn mask_block_sweep(r: usize, k: usize) -> Vec<usize> {
    let candidates = [8 * r, 4 * r, 2 * r, r, r / 2, r / 4, r / 8];
    let mut out: Vec<usize> = Vec::new();
    for b in candidates {
        let b = b.clamp(1, k.max(1));
        if !out.contains(&b) {
            out.push(b);
        }
    }
    out
}

/// `Ũ (M̃ ⊙ mask) Ṽᵀ`.
pub fn back_project(merged: &Matrix, mask: &StructuralMask, basis: &CoverBasis) -> Result<Matrix> {
    let k = basis.k();
    if merged.shape() != (k, k) || mask.size != k {
        return Err(Error::shape(format!(
            "merged coordinates {:?}, mask size {}, cover width {k}",
            merged.shape(),
            mask.size
        )));
    }
    let masked = DMatrix::from_fn(k, k, |p, q| {
        if mask.contains(p, q) {
            merged[(p, q)]
        } else {
            0.0
        }
    });
    let out = basis.u.as_dmatrix() * masked * basis.v.as_dmatrix().transpose();
    Ok(Matrix::from_trusted(out))
}

/// Mean absolute value of each `block × block` tile of a cover-space
/// coordinate matrix, row-major over tiles.
pub fn block_mean_abs(coords: &Matrix, block: usize) -> Result<Matrix> {
    let (rows, cols) = coords.shape();
    if block == 0 {
        return Err(Error::invalid("block size must be positive"));
    }
    let br = rows.div_ceil(block);
    let bc = cols.div_ceil(block);
    let mut out = DMatrix::zeros(br, bc);
    for bi in 0..br {
        for bj in 0..bc {
            let r0 = bi * block;
            let c0 = bj * block;
            let h = block.min(rows - r0);
            let w = block.min(cols - c0);
            let tile = coords.view((r0, c0), (h, w));
            out[(bi, bj)] = tile.iter().map(|x| x.abs()).sum::<f64>() / (h * w) as f64;
        }
    }
    Ok(Matrix::from_trusted(out))
}
