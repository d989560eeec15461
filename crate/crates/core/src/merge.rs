//! Element-wise mergers (task arithmetic, TIES), the directional-consistent
//! merge pipeline, and assembly of the merged checkpoint.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::DMatrix;

use crate::container::{Tensor, TensorContainer};
use crate::cover::{back_project, build_cover_basis, make_mask, project, CoverBasis};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::task_vector::{
    auto_rank, decompose, reconstruct, smooth_energy, KnowledgeDecomposition, Mode,
    SmoothingStrategy, TaskVector,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankPolicy {
    Auto,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskBlock {
    /// One block per task: `b = r`.
    Auto,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Merger {
    TaskArithmetic,
    Ties { keep_fraction: f64 },
}

/// Fraction of entries TIES keeps per task by default.
pub const DEFAULT_TIES_KEEP: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeConfig {
    pub mode: Mode,
    pub rank: RankPolicy,
    pub smoothing: SmoothingStrategy,
    pub merger: Merger,
    pub mask_block: MaskBlock,
    pub alpha: f64,
}

impl MergeConfig {
    /// Defaults for a checkpoint style: averaging for LoRA, plain truncation
    /// for full fine-tunes; TIES keeping 10%; automatic rank and block.
    pub fn for_mode(mode: Mode) -> Self {
        MergeConfig {
            mode,
            rank: RankPolicy::Auto,
            smoothing: mode.default_smoothing(),
            merger: Merger::Ties {
                keep_fraction: DEFAULT_TIES_KEEP,
            },
            mask_block: MaskBlock::Auto,
            alpha: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.smoothing.validate()?;
        if let Merger::Ties { keep_fraction } = self.merger {
            check_keep_fraction(keep_fraction)?;
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if let RankPolicy::Fixed(0) = self.rank {
            return Err(Error::invalid("rank must be at least 1"));
        }
        if let MaskBlock::Fixed(0) = self.mask_block {
            return Err(Error::invalid("mask block must be at least 1"));
        }
        Ok(())
    }
}

fn check_keep_fraction(keep: f64) -> Result<()> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::invalid(format!("TIES keep fraction must lie in (0, 1], got {keep}")));
    }
    Ok(())
}

fn check_same_shapes(mats: &[&Matrix]) -> Result<(usize, usize)> {
    let Some(first) = mats.first() else {
        return Err(Error::invalid("nothing to merge"));
    };
    let shape = first.shape();
    if let Some(bad) = mats.iter().find(|m| m.shape() != shape) {
        return Err(Error::shape(format!("{:?} vs {shape:?}", bad.shape())));
    }
    Ok(shape)
}

/// Task arithmetic: element-wise sum. The scaling coefficient is applied at
/// assembly time.
pub fn merge_ta(mats: &[Matrix]) -> Result<Matrix> {
    let refs: Vec<&Matrix> = mats.iter().collect();
    let (r, c) = check_same_shapes(&refs)?;
    let mut acc = DMatrix::zeros(r, c);
    for m in mats {
        acc += m.as_dmatrix();
    }
    Matrix::new(acc)
}

/// Number of survivors `⌈keep · total⌉`, robust to the product landing a few
/// ulps above an integer.
pub fn ties_keep_count(keep_fraction: f64, total: usize) -> usize {
    let x = keep_fraction * total as f64;
    let nearest = x.round();
    let count = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (count as usize).min(total)
}

/// Zeroes all but the `⌈keep · len⌉` largest-magnitude entries of a
/// row-major buffer; magnitude ties keep the earlier index.
pub fn ties_trim(values: &[f64], keep_fraction: f64) -> Result<Vec<f64>> {
    check_keep_fraction(keep_fraction)?;
    let keep = ties_keep_count(keep_fraction, values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    // stable: equal magnitudes stay in index order
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()));
    let mut out = vec![0.0; values.len()];
    for &i in &order[..keep] {
        out[i] = values[i];
    }
    Ok(out)
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// TIES merging: trim each task by magnitude, elect a sign per coordinate from
/// the sum of trimmed values, and average the surviving entries that agree
/// with it. Coordinates whose elected sign is zero come out as zero.
pub fn merge_ties(mats: &[Matrix], keep_fraction: f64) -> Result<Matrix> {
    check_keep_fraction(keep_fraction)?;
    let refs: Vec<&Matrix> = mats.iter().collect();
    let (rows, cols) = check_same_shapes(&refs)?;
    let trimmed: Vec<Vec<f64>> = mats
        .iter()
        .map(|m| ties_trim(&m.to_row_major(), keep_fraction))
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; rows * cols];
    for (idx, slot) in out.iter_mut().enumerate() {
        let total: f64 = trimmed.iter().map(|t| t[idx]).sum();
        let elected = sign(total);
        if elected == 0 {
            continue;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in &trimmed {
            let x = t[idx];
            if x != 0.0 && sign(x) == elected {
                sum += x;
                count += 1;
            }
        }
        if count > 0 {
            *slot = sum / count as f64;
        }
    }
    Matrix::from_row_major(rows, cols, &out)
}

pub fn apply_merger(mats: &[Matrix], merger: Merger) -> Result<Matrix> {
    match merger {
        Merger::TaskArithmetic => merge_ta(mats),
        Merger::Ties { keep_fraction } => merge_ties(mats, keep_fraction),
    }
}

/// Result of one directional-consistent merge.
#[derive(Clone, Debug)]
pub struct MergeOutcome {
    /// Merged task vector, before the `alpha` scaling.
    pub merged: Matrix,
    /// Per-task rank actually used.
    pub rank: usize,
    /// Rank that was requested, when it had to be clipped to fit the cover
    /// space.
    pub clipped_from: Option<usize>,
    pub mask_block: usize,
    pub basis: CoverBasis,
    /// Smoothed decompositions of the inputs, in task order.
    pub decompositions: Vec<KnowledgeDecomposition>,
}

/// Resolves the per-task rank and clips it so that `T · r ≤ min(m, n)`.
pub fn resolve_rank(
    policy: RankPolicy,
    mode: Mode,
    shape: (usize, usize),
    tasks: &[TaskVector],
) -> Result<(usize, Option<usize>)> {
    let min_dim = shape.0.min(shape.1);
    let requested = match policy {
        RankPolicy::Fixed(r) => r,
        RankPolicy::Auto => auto_rank(mode, shape, tasks)?,
    };
    if requested == 0 || requested > min_dim {
        return Err(Error::invalid(format!(
            "rank {requested} out of range 1..={min_dim}"
        )));
    }
    let t = tasks.len();
    if t > min_dim {
        return Err(Error::invalid(format!(
            "{t} tasks cannot share a cover space of dimension {min_dim}"
        )));
    }
    if t * requested <= min_dim {
        return Ok((requested, None));
    }
    let clipped = (min_dim / t).max(1);
    Ok((clipped, Some(requested)))
}

/// The full merge: decompose, smooth, whiten the concatenated bases into a
/// cover space, merge the projected coordinates, mask, and map back.
pub fn dc_merge(tasks: &[TaskVector], cfg: &MergeConfig) -> Result<MergeOutcome> {
    cfg.validate()?;
    let deltas: Vec<&Matrix> = tasks.iter().map(|t| &t.delta).collect();
    let shape = check_same_shapes(&deltas)?;
    let (rank, clipped_from) = resolve_rank(cfg.rank, cfg.mode, shape, tasks)?;
    if let Some(requested) = clipped_from {
        warn!(
            "rank {requested} x {} tasks exceeds min{shape:?}; clipped to {rank}",
            tasks.len()
        );
    }

    let decompositions: Vec<KnowledgeDecomposition> = tasks
        .iter()
        .map(|t| decompose(t, rank).and_then(|kd| smooth_energy(&kd, cfg.smoothing)))
        .collect::<Result<_>>()?;
    let basis = build_cover_basis(&decompositions)?;
    let coords: Vec<Matrix> = decompositions
        .iter()
        .map(|kd| project(&reconstruct(kd), &basis))
        .collect::<Result<_>>()?;
    let merged_coords = apply_merger(&coords, cfg.merger)?;

    let k = basis.k();
    let block = match cfg.mask_block {
        MaskBlock::Auto => rank,
        MaskBlock::Fixed(b) => b,
    };
    let mask = make_mask(k, block)?;
    let merged = back_project(&merged_coords, &mask, &basis)?;
    Ok(MergeOutcome {
        merged,
        rank,
        clipped_from,
        mask_block: block,
        basis,
        decompositions,
    })
}

/// Writes `base + alpha · delta` for every merged matrix and
/// `base + alpha · mean(per-task deltas)` for every averaged tensor; all other
/// tensors are copied verbatim. Output tensors keep the base dtype.
pub fn assemble_model(
    base: &TensorContainer,
    merged_deltas: &BTreeMap<String, Matrix>,
    non_matrix_deltas: &BTreeMap<String, Vec<Vec<f64>>>,
    alpha: f64,
) -> Result<TensorContainer> {
    if !alpha.is_finite() {
        return Err(Error::invalid("alpha must be finite"));
    }
    let mut out = base.clone();
    for (name, delta) in merged_deltas {
        let tensor = base
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        if tensor.shape() != [delta.nrows(), delta.ncols()] {
            return Err(Error::shape(format!(
                "`{name}`: base {:?} vs merged delta {:?}",
                tensor.shape(),
                delta.shape()
            )));
        }
        let updated = add_scaled(&tensor.to_f64_vec(), &delta.to_row_major(), alpha);
        out.insert(
            name.clone(),
            Tensor::from_f64_values(tensor.dtype(), tensor.shape().to_vec(), updated)?,
        );
    }
    for (name, per_task) in non_matrix_deltas {
        let tensor = base
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        if per_task.is_empty() {
            continue;
        }
        let n = tensor.numel();
        if per_task.iter().any(|d| d.len() != n) {
            return Err(Error::shape(format!("`{name}`: delta length differs from base ({n})")));
        }
        let mut mean = vec![0.0; n];
        for d in per_task {
            for (m, x) in mean.iter_mut().zip(d) {
                *m += x;
            }
        }
        let t = per_task.len() as f64;
        mean.iter_mut().for_each(|m| *m /= t);
        let updated = add_scaled(&tensor.to_f64_vec(), &mean, alpha);
        out.insert(
            name.clone(),
            Tensor::from_f64_values(tensor.dtype(), tensor.shape().to_vec(), updated)?,
        );
    }
    Ok(out)
}

/// `base + alpha · delta`, leaving entries untouched (including `-0.0`) where
/// the increment is zero.
fn add_scaled(base: &[f64], delta: &[f64], alpha: f64) -> Vec<f64> {
    base.iter()
        .zip(delta)
        .map(|(b, d)| {
            let inc = alpha * d;
            if inc == 0.0 {
                *b
            } else {
                b + inc
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::TensorData;
    use crate::linalg::{gaussian_matrix, seeded_rng, truncated_svd};
    use approx::assert_abs_diff_eq;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Matrix {
        Matrix::new(gaussian_matrix(r, c, &mut seeded_rng(seed))).unwrap()
    }

    #[test]
    fn ta_basics() {
        let m = rand_mat(3, 4, 1);
        assert_eq!(merge_ta(std::slice::from_ref(&m)).unwrap(), m);
        let neg = m.scale(-1.0).unwrap();
        assert!(merge_ta(&[m.clone(), neg]).unwrap().iter().all(|x| *x == 0.0));
        assert!(merge_ta(&[]).is_err());
        assert!(merge_ta(&[m, rand_mat(4, 3, 2)]).is_err());
    }

    #[test]
    fn ta_matches_scalar_loop() {
        let mats = [rand_mat(3, 5, 3), rand_mat(3, 5, 4), rand_mat(3, 5, 5)];
        let got = merge_ta(&mats).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut s = 0.0;
                for m in &mats {
                    s += m[(i, j)];
                }
                assert_eq!(got[(i, j)], s);
            }
        }
    }

    #[test]
    fn ties_single_task_full_keep() {
        let m = rand_mat(4, 3, 6);
        assert_eq!(merge_ties(std::slice::from_ref(&m), 1.0).unwrap(), m);
    }

    #[test]
    fn ties_hand_examples() {
        let a = Matrix::from_rows(&[&[2.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0, -1.0]]).unwrap();
        let out = merge_ties(&[a, b], 1.0).unwrap();
        assert_eq!(out[(0, 0)], 1.5);
        assert_eq!(out[(0, 1)], 0.0);
    }

    #[test]
    fn ties_trim_counts() {
        assert_eq!(ties_trim(&[4.0, 3.0, 2.0, 1.0], 0.5).unwrap(), vec![4.0, 3.0, 0.0, 0.0]);
        // magnitude tie: earlier index survives
        assert_eq!(ties_trim(&[1.0, -1.0, 1.0], 0.34).unwrap(), vec![1.0, -1.0, 0.0]);
        assert_eq!(ties_keep_count(0.7, 10), 7);
        assert_eq!(ties_keep_count(0.1, 30), 3);
        assert_eq!(ties_keep_count(0.1, 25), 3);
        assert_eq!(ties_keep_count(1.0, 9), 9);
        assert!(ties_trim(&[1.0], 0.0).is_err());
        assert!(ties_trim(&[1.0], 1.5).is_err());
    }

    #[test]
    fn ties_minority_sign_is_dropped() {
        let a = Matrix::from_rows(&[&[3.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0]]).unwrap();
        let c = Matrix::from_rows(&[&[-2.0]]).unwrap();
        assert_eq!(merge_ties(&[a, b, c], 1.0).unwrap()[(0, 0)], 2.0);
    }

    #[test]
    fn rank_resolution_and_clipping() {
        let tasks: Vec<TaskVector> = (0..3)
            .map(|i| TaskVector::new(format!("t{i}"), Matrix::zeros(10, 8)))
            .collect();
        assert_eq!(resolve_rank(RankPolicy::Auto, Mode::Fft, (10, 8), &tasks).unwrap(), (2, None));
        assert_eq!(
            resolve_rank(RankPolicy::Fixed(4), Mode::Fft, (10, 8), &tasks).unwrap(),
            (2, Some(4))
        );
        assert!(resolve_rank(RankPolicy::Fixed(9), Mode::Fft, (10, 8), &tasks).is_err());
    }

    #[test]
    fn single_task_is_rank_r_round_trip() {
        let m = rand_mat(9, 7, 7);
        let mut cfg = MergeConfig::for_mode(Mode::Fft);
        cfg.rank = RankPolicy::Fixed(3);
        cfg.merger = Merger::TaskArithmetic;
        let out = dc_merge(&[TaskVector::new("a", m.clone())], &cfg).unwrap();
        let approx = truncated_svd(&m, 3).unwrap().reconstruct();
        assert_abs_diff_eq!(out.merged.as_dmatrix(), approx.as_dmatrix(), epsilon = 1e-8);
        assert_eq!(out.mask_block, 3);
    }

    #[test]
    fn dc_merge_surfaces_clipping() {
        let tasks: Vec<TaskVector> = (0..3)
            .map(|i| TaskVector::new(format!("t{i}"), rand_mat(6, 6, 10 + i)))
            .collect();
        let mut cfg = MergeConfig::for_mode(Mode::Fft);
        cfg.rank = RankPolicy::Fixed(4);
        let out = dc_merge(&tasks, &cfg).unwrap();
        assert_eq!(out.rank, 2);
        assert_eq!(out.clipped_from, Some(4));
        assert_eq!(out.basis.k(), 6);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MergeConfig::for_mode(Mode::Lora);
        assert_eq!(cfg.smoothing, SmoothingStrategy::Averaging);
        cfg.alpha = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = MergeConfig::for_mode(Mode::Fft);
        cfg.merger = Merger::Ties { keep_fraction: 0.0 };
        assert!(cfg.validate().is_err());
        let mut cfg = MergeConfig::for_mode(Mode::Fft);
        cfg.mask_block = MaskBlock::Fixed(0);
        assert!(cfg.validate().is_err());
    }

    fn base_container() -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert("w", Tensor::f32(vec![2, 2], vec![1.0, -0.0, 2.0, 3.0]).unwrap());
        c.insert("b", Tensor::f64(vec![2], vec![0.5, 0.5]).unwrap());
        c.insert("other", Tensor::f32(vec![3], vec![7.0, 8.0, 9.0]).unwrap());
        c
    }

    #[test]
    fn assemble_with_zero_alpha_is_identity() {
        let base = base_container();
        let mut deltas = BTreeMap::new();
        deltas.insert("w".to_string(), Matrix::from_rows(&[&[1.0, -2.0], &[3.0, 4.0]]).unwrap());
        let mut vecs = BTreeMap::new();
        vecs.insert("b".to_string(), vec![vec![2.0, 0.0]]);
        let out = assemble_model(&base, &deltas, &vecs, 0.0).unwrap();
        assert_eq!(out.to_bytes().unwrap(), base.to_bytes().unwrap());
    }

    #[test]
    fn assemble_adds_delta_and_bias_mean() {
        let base = base_container();
        let e = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let mut deltas = BTreeMap::new();
        deltas.insert("w".to_string(), e);
        let mut vecs = BTreeMap::new();
        vecs.insert("b".to_string(), vec![vec![2.0, 0.0], vec![0.0, 2.0]]);
        let out = assemble_model(&base, &deltas, &vecs, 1.0).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &TensorData::F32(vec![2.0, 2.0, 5.0, 7.0]));
        assert_eq!(out.get("b").unwrap().data(), &TensorData::F64(vec![1.5, 1.5]));
        assert_eq!(out.get("other"), base.get("other"));
    }

    #[test]
    fn assemble_rejects_missing_or_mismatched() {
        let base = base_container();
        let mut deltas = BTreeMap::new();
        deltas.insert("nope".to_string(), Matrix::zeros(2, 2));
        assert!(matches!(
            assemble_model(&base, &deltas, &BTreeMap::new(), 1.0),
            Err(Error::MissingTensor(_))
        ));
        let mut deltas = BTreeMap::new();
        deltas.insert("w".to_string(), Matrix::zeros(3, 2));
        assert!(assemble_model(&base, &deltas, &BTreeMap::new(), 1.0).is_err());
    }
}
