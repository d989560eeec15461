//! Controlled perturbations with an exactly prescribed similarity to the
//! original: energy perturbations hit a target spectrum cosine, direction
//! perturbations hit a target DirSim.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{orthogonal_complement_sample, seeded_rng, Matrix, SvdTriplet};
use crate::task_vector::{averaged_spectrum, KnowledgeDecomposition};

/// What to do when the reference spectrum is parallel to the original.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParallelFallback {
    Error,
    /// Draw a random orthogonal direction from this seed instead.
    Random(u64),
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("perturbation level must lie in [0, 1], got {p}")));
    }
    Ok(())
}

/// Unit vector orthogonal to `s`, from Gram–Schmidt against `reference`.
fn orthogonal_direction(s: &DVector<f64>, reference: &DVector<f64>) -> Option<DVector<f64>> {
    let mut resid = reference - s * s.dot(reference);
    // second pass for accuracy
    resid -= s * s.dot(&resid);
    let rn = resid.norm();
    let scale = reference.norm().max(f64::MIN_POSITIVE);
    // angle between reference and s below ~1e-8 counts as parallel
    if rn <= 1e-8 * scale {
        return None;
    }
    Some(resid / rn)
}

/// `‖σ‖ · (p·s + √(1−p²)·s⊥)` with `s = σ/‖σ‖` and `s⊥` the normalized
/// component of `sigma_ref` orthogonal to `s`.
///
/// The result has cosine exactly `p` with `sigma` and the same Euclidean norm.
/// Entries may be negative for small `p`; they are coefficients, not a
/// singular spectrum. `sigma_ref` defaults to the averaged spectrum.
pub fn energy_perturb(
    sigma: &[f64],
    sigma_ref: Option<&[f64]>,
    p: f64,
    fallback: ParallelFallback,
) -> Result<Vec<f64>> {
    check_p(p)?;
    let sv = DVector::from_column_slice(sigma);
    let norm = sv.norm();
    if norm == 0.0 {
        return Err(Error::invalid("cannot perturb an all-zero spectrum"));
    }
    let default_ref;
    let reference = match sigma_ref {
        Some(r) => r,
        None => {
            default_ref = averaged_spectrum(sigma);
            &default_ref
        }
    };
    if reference.len() != sigma.len() {
        return Err(Error::shape(format!(
            "reference spectrum has {} entries, expected {}",
            reference.len(),
            sigma.len()
        )));
    }
    let s = &sv / norm;
    let rv = DVector::from_column_slice(reference);
    let s_perp = match orthogonal_direction(&s, &rv) {
        Some(d) => d,
        None => match fallback {
            ParallelFallback::Error => {
                return Err(Error::numerical(
                    "reference spectrum is parallel to the original; no orthogonal direction",
                ))
            }
            ParallelFallback::Random(seed) => random_orthogonal_direction(&s, seed)?,
        },
    };
    let q = (1.0 - p * p).max(0.0).sqrt();
    let s_hat = &s * p + s_perp * q;
    Ok((s_hat * norm).iter().copied().collect())
}

fn random_orthogonal_direction(s: &DVector<f64>, seed: u64) -> Result<DVector<f64>> {
    if s.len() < 2 {
        return Err(Error::numerical("a one-entry spectrum has no orthogonal direction"));
    }
    let mut rng = seeded_rng(seed);
    for _ in 0..64 {
        let x = DVector::from_fn(s.len(), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        if let Some(d) = orthogonal_direction(s, &x) {
            return Ok(d);
        }
    }
    Err(Error::numerical("failed to sample an orthogonal spectrum direction"))
}

/// Sub-seed for the right-hand basis, decorrelated from the left one.
fn right_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Mixes each basis with random orthonormal columns from its orthogonal
/// complement: `U' = √p·U + √(1−p)·Û⊥` (likewise for `V`), spectrum kept.
/// The result has DirSim exactly `p` with the input.
pub fn direction_perturb(kd: &KnowledgeDecomposition, p: f64, seed: u64) -> Result<KnowledgeDecomposition> {
    check_p(p)?;
    let r = kd.rank();
    let (m, n) = kd.source_shape();
    if m < 2 * r || n < 2 * r {
        return Err(Error::invalid(format!(
            "direction perturbation of rank {r} needs both dimensions ≥ {}, got {m}x{n}",
            2 * r
        )));
    }
    let u_perp = orthogonal_complement_sample(kd.u(), r, seed)?;
    let v_perp = orthogonal_complement_sample(kd.v(), r, right_seed(seed))?;
    let (a, b) = (p.sqrt(), (1.0 - p).sqrt());
    let u = Matrix::new(kd.u().as_dmatrix() * a + u_perp.as_dmatrix() * b)?;
    let v = Matrix::new(kd.v().as_dmatrix() * a + v_perp.as_dmatrix() * b)?;
    KnowledgeDecomposition::from_triplet(SvdTriplet::from_parts(u, kd.sigma().to_vec(), v)?)
}
