//! Pulling task vectors out of checkpoint containers.
//!
//! Full fine-tunes: every tensor present in both files yields `task − base`.
//! LoRA: each `<p>.lora_B` (m×r) / `<p>.lora_A` (r×n) pair yields `B·A` under
//! the name `<p>.weight`. In both modes tensors that are not genuine matrices
//! go to a separate list for averaging.

use std::collections::BTreeMap;

use log::warn;

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::task_vector::{Mode, TaskVector};

const LORA_A: &str = ".lora_A";
const LORA_B: &str = ".lora_B";

#[derive(Clone, Debug, Default)]
pub struct ExtractedTask {
    /// Matrix task vectors keyed by the base tensor they apply to.
    pub matrices: BTreeMap<String, TaskVector>,
    /// Flattened deltas of non-matrix tensors.
    pub vectors: BTreeMap<String, Vec<f64>>,
}

pub fn extract_task_vectors(base: &TensorContainer, task: &TensorContainer, mode: Mode) -> Result<ExtractedTask> {
    match mode {
        Mode::Fft => extract_fft(base, task),
        Mode::Lora => extract_lora(base, task),
    }
}

fn extract_fft(base: &TensorContainer, task: &TensorContainer) -> Result<ExtractedTask> {
    let mut out = ExtractedTask::default();
    for (name, t) in &task.tensors {
        let Some(b) = base.get(name) else {
            continue;
        };
        if b.shape() != t.shape() {
            return Err(Error::shape(format!(
                "`{name}`: base {:?} vs task {:?}",
                b.shape(),
                t.shape()
            )));
        }
        if t.is_matrix() {
            let tv = TaskVector::from_fft_delta(name.clone(), &t.to_matrix()?, &b.to_matrix()?)?;
            out.matrices.insert(name.clone(), tv);
        } else {
            out.vectors.insert(name.clone(), vector_delta(&t.to_f64_vec(), &b.to_f64_vec()));
        }
    }
    Ok(out)
}

fn vector_delta(task: &[f64], base: &[f64]) -> Vec<f64> {
    task.iter().zip(base).map(|(t, b)| t - b).collect()
}

fn extract_lora(base: &TensorContainer, task: &TensorContainer) -> Result<ExtractedTask> {
    let mut out = ExtractedTask::default();
    for (name, t) in &task.tensors {
        if let Some(prefix) = name.strip_suffix(LORA_B) {
            let a_name = format!("{prefix}{LORA_A}");
            let a = task
                .get(&a_name)
                .ok_or_else(|| Error::invalid(format!("LoRA factor `{name}` has no matching `{a_name}`")))?;
            let (b_mat, a_mat) = (t.to_matrix()?, a.to_matrix()?);
            if b_mat.ncols() != a_mat.nrows() {
                return Err(Error::shape(format!(
                    "`{prefix}`: lora_B is {:?} but lora_A is {:?}",
                    b_mat.shape(),
                    a_mat.shape()
                )));
            }
            let target = format!("{prefix}.weight");
            let tv = TaskVector::from_lora_factors(target.clone(), &b_mat, &a_mat)?;
            out.matrices.insert(target, tv);
        } else if let Some(prefix) = name.strip_suffix(LORA_A) {
            let b_name = format!("{prefix}{LORA_B}");
            if task.get(&b_name).is_none() {
                return Err(Error::invalid(format!(
                    "LoRA factor `{name}` has no matching `{b_name}`"
                )));
            }
        } else if let Some(b) = base.get(name) {
            if b.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "`{name}`: base {:?} vs task {:?}",
                    b.shape(),
                    t.shape()
                )));
            }
            if t.is_matrix() {
                warn!("`{name}` is a full matrix in a LoRA checkpoint; ignored");
            } else {
                out.vectors.insert(name.clone(), vector_delta(&t.to_f64_vec(), &b.to_f64_vec()));
            }
        }
    }
    if out.matrices.is_empty() {
        return Err(Error::invalid("checkpoint holds no `lora_A`/`lora_B` pairs"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::Tensor;
    use crate::linalg::{gaussian_matrix, seeded_rng, Matrix};
    use crate::container::Dtype;

    fn container(entries: &[(&str, Tensor)]) -> TensorContainer {
        let mut c = TensorContainer::new();
        for (n, t) in entries {
            c.insert(*n, t.clone());
        }
        c
    }

    #[test]
    fn fft_identical_checkpoints_give_zero_deltas() {
        let w = Tensor::f32(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bias = Tensor::f32(vec![3], vec![0.5, 0.5, 0.5]).unwrap();
        let c = container(&[("w", w), ("b", bias)]);
        let ex = extract_task_vectors(&c, &c, Mode::Fft).unwrap();
        assert_eq!(ex.matrices["w"].delta.frobenius_norm(), 0.0);
        assert_eq!(ex.vectors["b"], vec![0.0; 3]);
    }

    #[test]
    fn fft_shape_mismatch() {
        let base = container(&[("w", Tensor::f64(vec![2, 2], vec![0.0; 4]).unwrap())]);
        let task = container(&[("w", Tensor::f64(vec![2, 3], vec![0.0; 6]).unwrap())]);
        assert!(extract_task_vectors(&base, &task, Mode::Fft).is_err());
    }

    #[test]
    fn lora_zero_b_gives_zero_delta() {
        let base = container(&[("l.weight", Tensor::f64(vec![3, 4], vec![1.0; 12]).unwrap())]);
        let task = container(&[
            ("l.lora_B", Tensor::f64(vec![3, 2], vec![0.0; 6]).unwrap()),
            ("l.lora_A", Tensor::f64(vec![2, 4], vec![1.0; 8]).unwrap()),
        ]);
        let ex = extract_task_vectors(&base, &task, Mode::Lora).unwrap();
        let tv = &ex.matrices["l.weight"];
        assert_eq!(tv.delta.frobenius_norm(), 0.0);
        assert_eq!(tv.lora_rank, Some(2));
    }

    #[test]
    fn lora_three_layers_match_products() {
        let mut rng = seeded_rng(9);
        let mut base = TensorContainer::new();
        let mut task = TensorContainer::new();
        let mut expected = Vec::new();
        for (i, (m, n, r)) in [(4, 5, 2), (6, 3, 1), (5, 5, 3)].into_iter().enumerate() {
            let p = format!("layer{i}");
            base.insert(format!("{p}.weight"), Tensor::from_matrix(Dtype::F64, &Matrix::zeros(m, n)));
            let b = Matrix::new(gaussian_matrix(m, r, &mut rng)).unwrap();
            let a = Matrix::new(gaussian_matrix(r, n, &mut rng)).unwrap();
            task.insert(format!("{p}.lora_B"), Tensor::from_matrix(Dtype::F64, &b));
            task.insert(format!("{p}.lora_A"), Tensor::from_matrix(Dtype::F64, &a));
            // scalar triple loop as the oracle
            let mut prod = vec![0.0; m * n];
            for row in 0..m {
                for col in 0..n {
                    for k in 0..r {
                        prod[row * n + col] += b[(row, k)] * a[(k, col)];
                    }
                }
            }
            expected.push((format!("{p}.weight"), prod));
        }
        let ex = extract_task_vectors(&base, &task, Mode::Lora).unwrap();
        assert_eq!(ex.matrices.len(), 3);
        for (name, prod) in expected {
            let got = ex.matrices[&name].delta.to_row_major();
            for (g, e) in got.iter().zip(&prod) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lora_orphans_and_rank_mismatch() {
        let base = TensorContainer::new();
        let orphan_a = container(&[("l.lora_A", Tensor::f64(vec![2, 4], vec![0.0; 8]).unwrap())]);
        assert!(extract_task_vectors(&base, &orphan_a, Mode::Lora).is_err());
        let orphan_b = container(&[("l.lora_B", Tensor::f64(vec![4, 2], vec![0.0; 8]).unwrap())]);
        assert!(extract_task_vectors(&base, &orphan_b, Mode::Lora).is_err());
        let mismatch = container(&[
            ("l.lora_B", Tensor::f64(vec![4, 2], vec![0.0; 8]).unwrap()),
            ("l.lora_A", Tensor::f64(vec![3, 4], vec![0.0; 12]).unwrap()),
        ]);
        assert!(extract_task_vectors(&base, &mismatch, Mode::Lora).is_err());
    }

    #[test]
    fn lora_bias_goes_to_vectors() {
        let base = container(&[("l.bias", Tensor::f32(vec![2], vec![1.0, 1.0]).unwrap())]);
        let bias_only = container(&[("l.bias", Tensor::f32(vec![2], vec![3.0, 1.0]).unwrap())]);
        assert!(extract_task_vectors(&base, &bias_only, Mode::Lora).is_err());
        let task = container(&[
            ("l.bias", Tensor::f32(vec![2], vec![3.0, 1.0]).unwrap()),
            ("l.lora_B", Tensor::f32(vec![2, 1], vec![1.0, 0.0]).unwrap()),
            ("l.lora_A", Tensor::f32(vec![1, 2], vec![0.0, 1.0]).unwrap()),
        ]);
        let ex = extract_task_vectors(&base, &task, Mode::Lora).unwrap();
        assert_eq!(ex.vectors["l.bias"], vec![2.0, 0.0]);
    }
}
