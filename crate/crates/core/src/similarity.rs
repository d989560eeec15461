//! Similarity and alignment measures between task vectors.
//!
//! CosSim compares whole matrices and is dominated by high-energy components.
//! DirSim averages the pairwise directional agreement `R` between two sets of
//! knowledge components with uniform weights, so weak components count as
//! much as dominant ones.

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::linalg::{ensure_orthonormal, ensure_same_shape, Matrix};
use crate::task_vector::{decompose, KnowledgeDecomposition, TaskVector};

/// Frobenius cosine similarity.
pub fn cos_sim(a: &Matrix, b: &Matrix) -> Result<f64> {
    ensure_same_shape(a, b, "cosine similarity")?;
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numerical("cosine similarity of a zero matrix"));
    }
    Ok((a.frobenius_dot(b)? / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of two plain vectors.
pub fn vector_cos_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("vector lengths {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numerical("cosine similarity of a zero vector"));
    }
    Ok(dot / (na * nb))
}

/// Pairwise directional agreement `R[i][j] = (u_sⁱ·u_tʲ)(v_tʲ·v_sⁱ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RMatrix {
    pub values: Matrix,
}

fn ensure_same_ambient(s: &KnowledgeDecomposition, t: &KnowledgeDecomposition) -> Result<()> {
    if s.source_shape() != t.source_shape() {
        return Err(Error::shape(format!(
            "decompositions of {:?} and {:?} matrices",
            s.source_shape(),
            t.source_shape()
        )));
    }
    Ok(())
}

pub fn r_matrix(s: &KnowledgeDecomposition, t: &KnowledgeDecomposition) -> Result<RMatrix> {
    ensure_same_ambient(s, t)?;
    let uu = s.u().as_dmatrix().tr_mul(t.u().as_dmatrix());
    let vv = s.v().as_dmatrix().tr_mul(t.v().as_dmatrix());
    Ok(RMatrix {
        values: Matrix::from_trusted(uu.component_mul(&vv)),
    })
}

/// CosSim recovered from the spectra and the R-matrix:
/// `σ_sᵀ R σ_t / (‖σ_s‖ ‖σ_t‖)`.
pub fn cos_sim_from_r(s: &KnowledgeDecomposition, t: &KnowledgeDecomposition) -> Result<f64> {
    let r = r_matrix(s, t)?;
    let ss = nalgebra::DVector::from_column_slice(s.sigma());
    let st = nalgebra::DVector::from_column_slice(t.sigma());
    let (ns, nt) = (ss.norm(), st.norm());
    if ns == 0.0 || nt == 0.0 {
        return Err(Error::numerical("cosine similarity of a zero spectrum"));
    }
    Ok(ss.dot(&(r.values.as_dmatrix() * &st)) / (ns * nt))
}

fn rank_norm(s: &KnowledgeDecomposition, t: &KnowledgeDecomposition) -> Result<f64> {
    if s.rank() == 0 || t.rank() == 0 {
        return Err(Error::invalid("DirSim of an empty decomposition"));
    }
    Ok(((s.rank() * t.rank()) as f64).sqrt())
}

/// DirSim: the R-matrix entries summed and scaled by `1/√(r_s r_t)`.
pub fn dir_sim(s: &KnowledgeDecomposition, t: &KnowledgeDecomposition) -> Result<f64> {
    let r = r_matrix(s, t)?;
    Ok(r.values.sum() / rank_norm(s, t)?)
}

/// DirSim via `tr(U_sᵀ U_t V_tᵀ V_s) / √(r_s r_t)`; agrees with [`dir_sim`].
pub fn dir_sim_trace(s: &KnowledgeDecomposition, t: &KnowledgeDecomposition) -> Result<f64> {
    ensure_same_ambient(s, t)?;
    let uu = s.u().as_dmatrix().tr_mul(t.u().as_dmatrix());
    let vv = t.v().as_dmatrix().tr_mul(s.v().as_dmatrix());
    Ok((uu * vv).trace() / rank_norm(s, t)?)
}

/// Sign-robust DirSim.
///
/// Joint `(u, v) → (−u, −v)` flips leave `R` unchanged, so the only remaining
/// ambiguity is a component's overall sign. Walking the diagonal in order,
/// each target component whose diagonal entry is negative is negated
/// (flipping column `j` of `R`), then the entries are summed as in
/// [`dir_sim`].
pub fn dir_sim_sign_robust(s: &KnowledgeDecomposition, t: &KnowledgeDecomposition) -> Result<f64> {
    let r = r_matrix(s, t)?;
    let mut values = r.values.into_inner();
    let diag = values.nrows().min(values.ncols());
    for j in 0..diag {
        if values[(j, j)] < 0.0 {
            values.column_mut(j).neg_mut();
        }
    }
    Ok(values.sum() / rank_norm(s, t)?)
}

/// DirSim between a task and the part of `merged` living in the task's left
/// singular subspace, `U Uᵀ merged`, re-decomposed at rank `r`.
///
/// Returns an error when that projection vanishes: the task direction is
/// absent from the merged matrix.
pub fn projected_dir_sim(task: &KnowledgeDecomposition, merged: &Matrix, r: usize) -> Result<f64> {
    if merged.shape() != task.source_shape() {
        return Err(Error::shape(format!(
            "merged matrix {:?} vs task shape {:?}",
            merged.shape(),
            task.source_shape()
        )));
    }
    let u = task.u().as_dmatrix();
    let projected = u * u.tr_mul(merged.as_dmatrix());
    let scale = merged.frobenius_norm();
    let pn = projected.norm();
    if scale == 0.0 || pn <= 1e-10 * scale {
        return Err(Error::numerical(
            "merged matrix has no component in the task subspace",
        ));
    }
    let kd = decompose(&TaskVector::new("projected", Matrix::from_trusted(projected)), r)?;
    dir_sim(task, &kd)
}

fn concat_columns<'a>(mats: impl Iterator<Item = &'a Matrix>, rows: usize) -> DMatrix<f64> {
    let blocks: Vec<&DMatrix<f64>> = mats.map(|m| m.as_dmatrix()).collect();
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, total);
    let mut at = 0;
    for b in blocks {
        out.columns_mut(at, b.ncols()).copy_from(b);
        at += b.ncols();
    }
    out
}

/// Column-wise concatenation `[U₁, …, U_T]` of the left bases.
pub fn concat_u(decomps: &[KnowledgeDecomposition]) -> DMatrix<f64> {
    let rows = decomps.first().map_or(0, |d| d.source_shape().0);
    concat_columns(decomps.iter().map(|d| d.u()), rows)
}

/// Column-wise concatenation `[V₁, …, V_T]` of the right bases.
pub fn concat_v(decomps: &[KnowledgeDecomposition]) -> DMatrix<f64> {
    let rows = decomps.first().map_or(0, |d| d.source_shape().1);
    concat_columns(decomps.iter().map(|d| d.v()), rows)
}

/// Alignment score `‖(Ũᵀ U) ⊙ (Ṽᵀ V)‖²_F` of a cover basis against the
/// concatenated task bases.
pub fn alignment_score(
    u_tilde: &Matrix,
    v_tilde: &Matrix,
    decomps: &[KnowledgeDecomposition],
) -> Result<f64> {
    ensure_orthonormal(u_tilde, 1e-6, "Ũ")?;
    ensure_orthonormal(v_tilde, 1e-6, "Ṽ")?;
    let Some(first) = decomps.first() else {
        return Err(Error::invalid("alignment score needs at least one task"));
    };
    let shape = first.source_shape();
    if decomps.iter().any(|d| d.source_shape() != shape) {
        return Err(Error::shape("task decompositions disagree on ambient shape"));
    }
    if u_tilde.nrows() != shape.0 || v_tilde.nrows() != shape.1 {
        return Err(Error::shape(format!(
            "cover basis {}x· / {}x· vs task shape {shape:?}",
            u_tilde.nrows(),
            v_tilde.nrows()
        )));
    }
    if u_tilde.ncols() != v_tilde.ncols() {
        return Err(Error::shape("Ũ and Ṽ widths differ"));
    }
    Ok(alignment_score_unchecked(
        u_tilde.as_dmatrix(),
        v_tilde.as_dmatrix(),
        &concat_u(decomps),
        &concat_v(decomps),
    ))
}

/// Closed-form alignment score on pre-concatenated bases, without checks.
pub(crate) fn alignment_score_unchecked(
    u_tilde: &DMatrix<f64>,
    v_tilde: &DMatrix<f64>,
    u_all: &DMatrix<f64>,
    v_all: &DMatrix<f64>,
) -> f64 {
    let a = u_tilde.tr_mul(u_all);
    let b = v_tilde.tr_mul(v_all);
    a.component_mul(&b).norm_squared()
}

/// Optimal dyad coefficients `diag(Ũᵀ Δ Ṽ)` of `delta` in the basis pair.
pub fn projection_coefficients(u_tilde: &Matrix, v_tilde: &Matrix, delta: &Matrix) -> Result<Vec<f64>> {
    if u_tilde.nrows() != delta.nrows() || v_tilde.nrows() != delta.ncols() {
        return Err(Error::shape(format!(
            "basis rows {}/{} vs matrix {:?}",
            u_tilde.nrows(),
            v_tilde.nrows(),
            delta.shape()
        )));
    }
    if u_tilde.ncols() != v_tilde.ncols() {
        return Err(Error::shape("Ũ and Ṽ widths differ"));
    }
    let core = u_tilde.as_dmatrix().tr_mul(delta.as_dmatrix()) * v_tilde.as_dmatrix();
    Ok((0..core.nrows()).map(|j| core[(j, j)]).collect())
}

/// `‖Δ − Ũ diag(c) Ṽᵀ‖²_F` for a given coefficient vector.
pub fn dyadic_residual(u_tilde: &Matrix, v_tilde: &Matrix, coeffs: &[f64], delta: &Matrix) -> Result<f64> {
    if coeffs.len() != u_tilde.ncols() || coeffs.len() != v_tilde.ncols() {
        return Err(Error::shape("coefficient count vs basis width"));
    }
    let mut scaled = u_tilde.as_dmatrix().clone();
    for (j, c) in coeffs.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*c);
    }
    let approx = scaled * v_tilde.as_dmatrix().transpose();
    if approx.shape() != delta.shape() {
        return Err(Error::shape("basis pair does not match matrix shape"));
    }
    Ok((delta.as_dmatrix() - approx).norm_squared())
}

/// One row of an externally measured accuracy table.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct AccuracyRow {
    pub task: String,
    pub merged: f64,
    pub finetuned: f64,
    pub zeroshot: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskAccuracy {
    pub task: String,
    pub normalized: f64,
    pub nai: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub avg_normalized: f64,
    pub per_task: Vec<TaskAccuracy>,
}

impl AccuracyTable {
    /// Parses `task,merged,finetuned,zeroshot` CSV with a header row.
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<AccuracyRow>, _>>()?;
        Ok(AccuracyTable { rows })
    }
}

/// Normalized accuracy (`merged / finetuned`) averaged over tasks, plus the
/// per-task normalized accuracy improvement
/// `(merged − zeroshot) / (finetuned − zeroshot)`.
pub fn accuracy_report(table: &AccuracyTable) -> Result<AccuracyReport> {
    if table.rows.is_empty() {
        return Err(Error::invalid("accuracy table has no rows"));
    }
    let mut per_task = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        if row.finetuned == 0.0 {
            return Err(Error::invalid(format!(
                "task `{}`: fine-tuned accuracy is zero",
                row.task
            )));
        }
        let gap = row.finetuned - row.zeroshot;
        if gap <= 0.0 {
            return Err(Error::invalid(format!(
                "task `{}`: fine-tuned accuracy must exceed zero-shot accuracy",
                row.task
            )));
        }
        per_task.push(TaskAccuracy {
            task: row.task.clone(),
            normalized: row.merged / row.finetuned,
            nai: (row.merged - row.zeroshot) / gap,
        });
    }
    let avg_normalized = per_task.iter().map(|t| t.normalized).sum::<f64>() / per_task.len() as f64;
    Ok(AccuracyReport {
        avg_normalized,
        per_task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, random_orthonormal, seeded_rng, SvdTriplet};
    use approx::assert_abs_diff_eq;

    fn dyad(u: &[f64], v: &[f64]) -> Matrix {
        let u = nalgebra::DVector::from_column_slice(u);
        let v = nalgebra::DVector::from_column_slice(v);
        Matrix::new(u * v.transpose()).unwrap()
    }

    fn kd_of(m: &Matrix, r: usize) -> KnowledgeDecomposition {
        decompose(&TaskVector::new("t", m.clone()), r).unwrap()
    }

    const U2: [f64; 2] = [0.1104, 0.9939];

    #[test]
    fn cos_sim_basics() {
        let mut rng = seeded_rng(1);
        let a = Matrix::new(gaussian_matrix(3, 4, &mut rng)).unwrap();
        assert_abs_diff_eq!(cos_sim(&a, &a).unwrap(), 1.0, epsilon = 1e-15);
        let neg = a.scale(-1.0).unwrap();
        assert_abs_diff_eq!(cos_sim(&a, &neg).unwrap(), -1.0, epsilon = 1e-15);
        assert!(cos_sim(&a, &Matrix::zeros(3, 4)).is_err());
        assert!(cos_sim(&a, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn two_dyad_cos_sim() {
        let a = dyad(&[1.0, 0.0], &[1.0, 0.0]);
        let b = dyad(&U2, &U2);
        // direct Frobenius evaluation: <a, b> = (u1·u2)(v1·v2)
        let oracle = a.as_dmatrix().dot(b.as_dmatrix())
            / (a.as_dmatrix().norm() * b.as_dmatrix().norm());
        let got = cos_sim(&a, &b).unwrap();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-14);
        assert_abs_diff_eq!(got, 0.1104 * 0.1104, epsilon = 1e-4);
    }

    #[test]
    fn r_matrix_self_is_identity() {
        let mut rng = seeded_rng(2);
        let kd = kd_of(&Matrix::new(gaussian_matrix(6, 5, &mut rng)).unwrap(), 3);
        let r = r_matrix(&kd, &kd).unwrap();
        assert_abs_diff_eq!(r.values.as_dmatrix(), &DMatrix::identity(3, 3), epsilon = 1e-10);
        assert_abs_diff_eq!(dir_sim(&kd, &kd).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn disjoint_dyads_give_zero() {
        let a = kd_of(&dyad(&[1.0, 0.0, 0.0], &[1.0, 0.0]), 1);
        let b = kd_of(&dyad(&[0.0, 1.0, 0.0], &[0.0, 1.0]), 1);
        assert_eq!(r_matrix(&a, &b).unwrap().values[(0, 0)], 0.0);
        assert_eq!(dir_sim(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn rank_two_cos_sim_equivalence() {
        let mut rng = seeded_rng(3);
        let a = Matrix::new(gaussian_matrix(5, 2, &mut rng) * gaussian_matrix(2, 4, &mut rng)).unwrap();
        let b = Matrix::new(gaussian_matrix(5, 2, &mut rng) * gaussian_matrix(2, 4, &mut rng)).unwrap();
        let via_r = cos_sim_from_r(&kd_of(&a, 2), &kd_of(&b, 2)).unwrap();
        assert_abs_diff_eq!(via_r, cos_sim(&a, &b).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn two_dyad_dir_sim() {
        let a = kd_of(&dyad(&[1.0, 0.0], &[1.0, 0.0]), 1);
        let b = kd_of(&dyad(&U2, &U2), 1);
        let n = (U2[0] * U2[0] + U2[1] * U2[1]).sqrt();
        let oracle = (U2[0] / n) * (U2[0] / n);
        assert_abs_diff_eq!(dir_sim(&a, &b).unwrap(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(dir_sim(&a, &b).unwrap(), 0.01219, epsilon = 1e-4);
    }

    #[test]
    fn dir_sim_routes_and_symmetry() {
        let mut rng = seeded_rng(4);
        for _ in 0..10 {
            let a = kd_of(&Matrix::new(gaussian_matrix(7, 6, &mut rng)).unwrap(), 3);
            let b = kd_of(&Matrix::new(gaussian_matrix(7, 6, &mut rng)).unwrap(), 2);
            let d1 = dir_sim(&a, &b).unwrap();
            assert_abs_diff_eq!(d1, dir_sim_trace(&a, &b).unwrap(), epsilon = 1e-10);
            assert_abs_diff_eq!(d1, dir_sim(&b, &a).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn sign_robust_repairs_negated_component() {
        let a = kd_of(&dyad(&[1.0, 0.0], &[1.0, 0.0]), 1);
        // same direction, opposite sign: u flipped but v kept
        let u = Matrix::from_rows(&[&[-1.0], &[0.0]]).unwrap();
        let v = Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap();
        let b = KnowledgeDecomposition::from_triplet(SvdTriplet::from_parts(u, vec![1.0], v).unwrap())
            .unwrap();
        assert_eq!(dir_sim(&a, &b).unwrap(), -1.0);
        assert_eq!(dir_sim_sign_robust(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn projected_dir_sim_on_own_reconstruction() {
        let mut rng = seeded_rng(5);
        let kd = kd_of(&Matrix::new(gaussian_matrix(8, 6, &mut rng)).unwrap(), 3);
        let merged = kd.svd().reconstruct();
        assert_abs_diff_eq!(projected_dir_sim(&kd, &merged, 3).unwrap(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn projected_dir_sim_rejects_absent_direction() {
        let kd = kd_of(&dyad(&[1.0, 0.0, 0.0], &[1.0, 0.0]), 1);
        let merged = dyad(&[0.0, 1.0, 0.0], &[0.3, 0.7]);
        let err = projected_dir_sim(&kd, &merged, 1).unwrap_err();
        assert!(err.is_numerical());
        assert!(projected_dir_sim(&kd, &Matrix::zeros(3, 2), 1).is_err());
        assert!(projected_dir_sim(&kd, &Matrix::zeros(2, 2), 1).is_err());
    }

    #[test]
    fn alignment_score_single_task_equals_rank() {
        let mut rng = seeded_rng(6);
        let kd = kd_of(&Matrix::new(gaussian_matrix(9, 7, &mut rng)).unwrap(), 4);
        let s = alignment_score(kd.u(), kd.v(), std::slice::from_ref(&kd)).unwrap();
        assert_abs_diff_eq!(s, 4.0, epsilon = 1e-10);
    }

    #[test]
    fn alignment_score_orthogonal_basis_is_zero() {
        let kd = kd_of(&dyad(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]), 1);
        let e2 = Matrix::from_rows(&[&[0.0], &[1.0], &[0.0]]).unwrap();
        assert_eq!(alignment_score(&e2, &e2, &[kd]).unwrap(), 0.0);
    }

    #[test]
    fn alignment_score_rejects_non_orthonormal() {
        let mut rng = seeded_rng(7);
        let kd = kd_of(&Matrix::new(gaussian_matrix(4, 4, &mut rng)).unwrap(), 2);
        let bad = Matrix::new(gaussian_matrix(4, 2, &mut rng)).unwrap();
        let good = random_orthonormal(4, 2, &mut rng).unwrap();
        assert!(alignment_score(&bad, &good, std::slice::from_ref(&kd)).is_err());
        assert!(alignment_score(&good, &good, &[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let table = AccuracyTable {
            rows: vec![AccuracyRow {
                task: "a".into(),
                merged: 0.8,
                finetuned: 0.9,
                zeroshot: 0.5,
            }],
        };
        let rep = accuracy_report(&table).unwrap();
        assert_abs_diff_eq!(rep.avg_normalized, 8.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rep.per_task[0].nai, 0.75, epsilon = 1e-12);

        let ideal = AccuracyTable {
            rows: vec![
                AccuracyRow { task: "a".into(), merged: 0.9, finetuned: 0.9, zeroshot: 0.4 },
                AccuracyRow { task: "b".into(), merged: 0.7, finetuned: 0.7, zeroshot: 0.2 },
            ],
        };
        let rep = accuracy_report(&ideal).unwrap();
        assert_eq!(rep.avg_normalized, 1.0);
        assert!(rep.per_task.iter().all(|t| t.nai == 1.0));

        let zs = AccuracyTable {
            rows: vec![AccuracyRow { task: "a".into(), merged: 0.4, finetuned: 0.9, zeroshot: 0.4 }],
        };
        assert_eq!(accuracy_report(&zs).unwrap().per_task[0].nai, 0.0);
    }

    #[test]
    fn accuracy_errors() {
        let bad_gap = AccuracyTable {
            rows: vec![AccuracyRow { task: "a".into(), merged: 0.4, finetuned: 0.4, zeroshot: 0.5 }],
        };
        assert!(accuracy_report(&bad_gap).is_err());
        let zero_ft = AccuracyTable {
            rows: vec![AccuracyRow { task: "a".into(), merged: 0.4, finetuned: 0.0, zeroshot: -0.1 }],
        };
        assert!(accuracy_report(&zero_ft).is_err());
        assert!(accuracy_report(&AccuracyTable::default()).is_err());
    }

    #[test]
    fn accuracy_csv_parsing() {
        let csv = "task,merged,finetuned,zeroshot\nsvhn, 0.8, 0.9, 0.5\ncars,0.6,0.8,0.6\n";
        let table = AccuracyTable::from_csv(csv.as_bytes()).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].task, "svhn");
        assert!(AccuracyTable::from_csv("task,merged\nx,notanumber\n".as_bytes()).is_err());
    }
}
