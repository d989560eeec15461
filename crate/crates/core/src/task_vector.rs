//! Task vectors, their knowledge decomposition, and energy smoothing.
//!
//! A task vector is the weight delta a fine-tune (or LoRA adapter) applies to
//! a base matrix. Its truncated SVD splits it into rank-one knowledge
//! components `uⱼvⱼᵀ` whose singular values form the energy distribution;
//! smoothing flattens that distribution while leaving every direction intact.

use crate::error::{Error, Result};
use crate::linalg::{truncated_svd, Matrix, SvdTriplet};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub name: String,
    pub delta: Matrix,
    /// Inner dimension of the LoRA factors this delta came from, if any.
    pub lora_rank: Option<usize>,
}

impl TaskVector {
    pub fn new(name: impl Into<String>, delta: Matrix) -> Self {
        TaskVector {
            name: name.into(),
            delta,
            lora_rank: None,
        }
    }

    /// `W_ft − W_0`.
    pub fn from_fft_delta(name: impl Into<String>, finetuned: &Matrix, base: &Matrix) -> Result<Self> {
        let delta = finetuned.sub(base)?;
        Ok(TaskVector::new(name, delta))
    }

    /// `B·A` for LoRA factors `B` (m×r) and `A` (r×n).
    pub fn from_lora_factors(name: impl Into<String>, b: &Matrix, a: &Matrix) -> Result<Self> {
        if b.ncols() != a.nrows() {
            return Err(Error::shape(format!(
                "LoRA factors disagree on rank: B is {:?}, A is {:?}",
                b.shape(),
                a.shape()
            )));
        }
        let delta = b.matmul(a)?;
        Ok(TaskVector {
            name: name.into(),
            delta,
            lora_rank: Some(b.ncols()),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.delta.shape()
    }
}

/// Rank-r knowledge decomposition of a task vector.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeDecomposition {
    svd: SvdTriplet,
    source_shape: (usize, usize),
}

impl KnowledgeDecomposition {
    pub fn from_triplet(svd: SvdTriplet) -> Result<Self> {
        let source_shape = (svd.u().nrows(), svd.v().nrows());
        if svd.rank() > source_shape.0.min(source_shape.1) {
            return Err(Error::invalid(format!(
                "rank {} exceeds ambient shape {source_shape:?}",
                svd.rank()
            )));
        }
        Ok(KnowledgeDecomposition { svd, source_shape })
    }

    pub fn svd(&self) -> &SvdTriplet {
        &self.svd
    }

    pub fn u(&self) -> &Matrix {
        self.svd.u()
    }

    pub fn v(&self) -> &Matrix {
        self.svd.v()
    }

    pub fn sigma(&self) -> &[f64] {
        self.svd.sigma()
    }

    pub fn rank(&self) -> usize {
        self.svd.rank()
    }

    pub fn source_shape(&self) -> (usize, usize) {
        self.source_shape
    }
}

/// How to redistribute energy across the retained components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SmoothingStrategy {
    /// Keep the truncated spectrum as is.
    TruncateOnly,
    /// Replace every singular value by the mean.
    Averaging,
    /// Linearly decreasing spectrum whose max/min ratio is clamped to `rho`.
    Linear { rho: f64 },
    /// `tau · sigma + (1 − tau) · mean`.
    Interpolate { tau: f64 },
}

impl SmoothingStrategy {
    pub fn linear(rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho > 1.0) {
            return Err(Error::invalid(format!("linear smoothing needs rho > 1, got {rho}")));
        }
        Ok(SmoothingStrategy::Linear { rho })
    }

    pub fn interpolate(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::invalid(format!("interpolation needs tau in [0, 1], got {tau}")));
        }
        Ok(SmoothingStrategy::Interpolate { tau })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SmoothingStrategy::Linear { rho } => SmoothingStrategy::linear(rho).map(|_| ()),
            SmoothingStrategy::Interpolate { tau } => {
                SmoothingStrategy::interpolate(tau).map(|_| ())
            }
            _ => Ok(()),
        }
    }
}

/// Truncated SVD of the task vector at rank `r`.
pub fn decompose(tv: &TaskVector, r: usize) -> Result<KnowledgeDecomposition> {
    let svd = truncated_svd(&tv.delta, r)?;
    Ok(KnowledgeDecomposition {
        svd,
        source_shape: tv.shape(),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Averaged spectrum: every entry is the mean of `sigma`.
pub fn averaged_spectrum(sigma: &[f64]) -> Vec<f64> {
    // a flat spectrum is its own mean; summing would only add rounding
    if sigma.windows(2).all(|w| w[0] == w[1]) {
        return sigma.to_vec();
    }
    let m = mean(sigma);
    vec![m; sigma.len()]
}

/// Linearly decreasing spectrum with the same total as `sigma` and a
/// max/min ratio of `min(sigma_max / sigma_min, rho)`.
pub fn linear_spectrum(sigma: &[f64], rho: f64) -> Vec<f64> {
    let r = sigma.len();
    let total: f64 = sigma.iter().sum();
    if r == 0 || total == 0.0 {
        return sigma.to_vec();
    }
    let max = sigma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = sigma.iter().copied().fold(f64::INFINITY, f64::min);
    // zero floor: the ratio is unbounded and clamps to rho
    let ratio = if min > 0.0 { (max / min).min(rho) } else { rho };
    let raw: Vec<f64> = if r == 1 {
        vec![1.0]
    } else {
        (0..r)
            .map(|j| ratio + j as f64 * (1.0 - ratio) / (r - 1) as f64)
            .collect()
    };
    let norm: f64 = raw.iter().sum();
    raw.iter().map(|w| total * w / norm).collect()
}

/// Replaces the spectrum per `strategy`; singular vectors are untouched.
pub fn smooth_energy(
    kd: &KnowledgeDecomposition,
    strategy: SmoothingStrategy,
) -> Result<KnowledgeDecomposition> {
    strategy.validate()?;
    let sigma = kd.sigma();
    let smoothed = match strategy {
        SmoothingStrategy::TruncateOnly => return Ok(kd.clone()),
        SmoothingStrategy::Averaging => averaged_spectrum(sigma),
        SmoothingStrategy::Linear { rho } => linear_spectrum(sigma, rho),
        SmoothingStrategy::Interpolate { tau } => {
            let m = mean(sigma);
            sigma.iter().map(|s| tau * s + (1.0 - tau) * m).collect()
        }
    };
    Ok(KnowledgeDecomposition {
        svd: kd.svd.with_sigma(smoothed),
        source_shape: kd.source_shape,
    })
}

/// `U diag(sigma) Vᵀ`.
pub fn reconstruct(kd: &KnowledgeDecomposition) -> Matrix {
    kd.svd.reconstruct()
}

/// Which checkpoint style the task vectors were extracted from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Lora,
    Fft,
}

impl Mode {
    pub fn default_smoothing(self) -> SmoothingStrategy {
        match self {
            Mode::Lora => SmoothingStrategy::Averaging,
            Mode::Fft => SmoothingStrategy::TruncateOnly,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Mode::Lora),
            "fft" => Ok(Mode::Fft),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

/// Default per-task rank: the LoRA rank in LoRA mode, `⌊min(m, n) / T⌋` for
/// full fine-tunes. Always at least 1.
pub fn auto_rank(mode: Mode, shape: (usize, usize), tasks: &[TaskVector]) -> Result<usize> {
    let min_dim = shape.0.min(shape.1);
    match mode {
        Mode::Fft => {
            let t = tasks.len().max(1);
            Ok((min_dim / t).max(1))
        }
        Mode::Lora => {
            let ranks: Vec<usize> = tasks.iter().filter_map(|t| t.lora_rank).collect();
            if ranks.len() != tasks.len() || ranks.is_empty() {
                return Err(Error::invalid(
                    "automatic LoRA rank needs every task vector to come from LoRA factors",
                ));
            }
            if ranks.iter().any(|r| *r != ranks[0]) {
                return Err(Error::invalid(format!(
                    "LoRA ranks differ across tasks ({ranks:?}); pass an explicit rank"
                )));
            }
            Ok(ranks[0].min(min_dim).max(1))
        }
    }
}
