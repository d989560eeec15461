//! Iterative cover-basis search by gradient ascent on the alignment score,
//! with the bases parameterized as `exp(A − Aᵀ)·Ũ₀` and `exp(B − Bᵀ)·Ṽ₀`.

use std::time::Instant;

use log::debug;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::cover::CoverBasis;
use crate::error::{Error, Result};
use crate::linalg::{leading_subspaces, Matrix};
use crate::similarity::{alignment_score_unchecked, concat_u, concat_v};
use crate::task_vector::{reconstruct, KnowledgeDecomposition};

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_MAX_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradientMode {
    /// Central differences with the given step, one probe pair per entry.
    FiniteDifference { step: f64 },
    /// Closed-form gradient through the Fréchet derivative of `exp`.
    Analytic,
}

impl Default for GradientMode {
    fn default() -> Self {
        GradientMode::FiniteDifference { step: DEFAULT_FD_STEP }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub gradient_mode: GradientMode,
    pub log_every: usize,
    /// Largest ambient dimension accepted; dense exponentials beyond this get slow.
    pub max_dim: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-2,
            max_iters: 500,
            gradient_mode: GradientMode::default(),
            log_every: 1,
            max_dim: DEFAULT_MAX_DIM,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("iteration count must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log interval must be at least 1"));
        }
        if let GradientMode::FiniteDifference { step } = self.gradient_mode {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    /// Number of updates applied before this score was measured.
    pub iter: usize,
    pub score: f64,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizationTrace {
    pub entries: Vec<TraceEntry>,
}

impl OptimizationTrace {
    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn final_score(&self) -> Option<f64> {
        self.entries.last().map(|e| e.score)
    }
}

/// Cover basis from the top-`k` singular pairs of the plain sum of the
/// (reconstructed) task vectors.
pub fn ta_initialization(decomps: &[KnowledgeDecomposition], k: usize) -> Result<CoverBasis> {
    let Some(first) = decomps.first() else {
        return Err(Error::invalid("initialization needs at least one task"));
    };
    let (m, n) = first.source_shape();
    let mut sum = DMatrix::zeros(m, n);
    for kd in decomps {
        if kd.source_shape() != (m, n) {
            return Err(Error::shape("task decompositions disagree on ambient shape"));
        }
        sum += reconstruct(kd).as_dmatrix();
    }
    let (u, v) = leading_subspaces(&Matrix::new(sum)?, k)?;
    CoverBasis::new(u, v)
}

/// The objective as a function of one side's skew generator, the other side
/// held fixed.
struct Side<'a> {
    base: &'a DMatrix<f64>,
    all: &'a DMatrix<f64>,
}

impl Side<'_> {
    fn rotate(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        (a - a.transpose()).exp() * self.base
    }
}

fn score_with(
    u_side: &Side,
    v_side: &Side,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> f64 {
    alignment_score_unchecked(u, v, u_side.all, v_side.all)
}

/// Central-difference gradient with respect to the generator of one side.
/// Only entries above the diagonal are probed; the gradient of `A ↦ f(A − Aᵀ)`
/// is antisymmetric, so the rest follows by mirroring.
fn fd_gradient(gen: &DMatrix<f64>, step: f64, objective: &(dyn Fn(&DMatrix<f64>) -> f64 + Sync)) -> DMatrix<f64> {
    let d = gen.nrows();
    let pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|i| ((i + 1)..d).map(move |j| (i, j)))
        .collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut plus = gen.clone();
            plus[(i, j)] += step;
            let mut minus = gen.clone();
            minus[(i, j)] -= step;
            (objective(&plus) - objective(&minus)) / (2.0 * step)
        })
        .collect();
    let mut grad = DMatrix::zeros(d, d);
    for (&(i, j), g) in pairs.iter().zip(values) {
        grad[(i, j)] = g;
        grad[(j, i)] = -g;
    }
    grad
}

/// Fréchet derivative `L(X, E)` of the matrix exponential, read off the
/// upper-right block of `exp([[X, E], [0, X]])`.
fn expm_frechet(x: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
    let d = x.nrows();
    let mut big = DMatrix::zeros(2 * d, 2 * d);
    big.view_mut((0, 0), (d, d)).copy_from(x);
    big.view_mut((0, d), (d, d)).copy_from(e);
    big.view_mut((d, d), (d, d)).copy_from(x);
    big.exp().view((0, d), (d, d)).into_owned()
}

/// Analytic gradients of the alignment score with respect to both generators.
fn analytic_gradients(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u_side: &Side,
    v_side: &Side,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let u = u_side.rotate(a);
    let v = v_side.rotate(b);
    let p = u.tr_mul(u_side.all);
    let q = v.tr_mul(v_side.all);
    let h = p.component_mul(&q);
    // df/dŨ = 2·U_all·(H ⊙ Q)ᵀ, and symmetrically for Ṽ
    let g_u = u_side.all * h.component_mul(&q).transpose() * 2.0;
    let g_v = v_side.all * h.component_mul(&p).transpose() * 2.0;
    let grad = |gen: &DMatrix<f64>, g: DMatrix<f64>, base: &DMatrix<f64>| {
        let s = gen - gen.transpose();
        let gs = expm_frechet(&s.transpose(), &(g * base.transpose()));
        &gs - gs.transpose()
    };
    (grad(a, g_u, u_side.base), grad(b, g_v, v_side.base))
}

/// Gradient ascent from `init`. Each step rebuilds the bases from the
/// accumulated generators. Returns the basis after `max_iters` updates and the
/// scores logged at iteration 0, every `log_every` updates, and the end.
pub fn optimize_cover_basis(
    decomps: &[KnowledgeDecomposition],
    init: &CoverBasis,
    cfg: &OptimizerConfig,
) -> Result<(CoverBasis, OptimizationTrace)> {
    cfg.validate()?;
    let Some(first) = decomps.first() else {
        return Err(Error::invalid("optimization needs at least one task"));
    };
    let (m, n) = first.source_shape();
    if decomps.iter().any(|d| d.source_shape() != (m, n)) {
        return Err(Error::shape("task decompositions disagree on ambient shape"));
    }
    if init.ambient_shape() != (m, n) {
        return Err(Error::shape(format!(
            "initial basis covers {:?}, tasks are {m}x{n}",
            init.ambient_shape()
        )));
    }
    if m.max(n) > cfg.max_dim {
        return Err(Error::invalid(format!(
            "ambient dimension {} exceeds the limit {}",
            m.max(n),
            cfg.max_dim
        )));
    }

    let u_all = concat_u(decomps);
    let v_all = concat_v(decomps);
    let u_side = Side { base: init.u().as_dmatrix(), all: &u_all };
    let v_side = Side { base: init.v().as_dmatrix(), all: &v_all };

    let mut a = DMatrix::zeros(m, m);
    let mut b = DMatrix::zeros(n, n);
    let start = Instant::now();
    let mut trace = OptimizationTrace::default();
    let mut u = u_side.rotate(&a);
    let mut v = v_side.rotate(&b);

    for iter in 0..=cfg.max_iters {
        let score = score_with(&u_side, &v_side, &u, &v);
        if !score.is_finite() {
            return Err(Error::numerical(format!("alignment score diverged at iteration {iter}")));
        }
        if iter % cfg.log_every == 0 || iter == cfg.max_iters {
            debug!("iter {iter}: alignment score {score:.12}");
            trace.entries.push(TraceEntry {
                iter,
                score,
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
        }
        if iter == cfg.max_iters {
            break;
        }
        let (ga, gb) = match cfg.gradient_mode {
            GradientMode::FiniteDifference { step } => {
                let fa = |x: &DMatrix<f64>| score_with(&u_side, &v_side, &u_side.rotate(x), &v);
                let fb = |x: &DMatrix<f64>| score_with(&u_side, &v_side, &u, &v_side.rotate(x));
                (fd_gradient(&a, step, &fa), fd_gradient(&b, step, &fb))
            }
            GradientMode::Analytic => analytic_gradients(&a, &b, &u_side, &v_side),
        };
        a += ga * cfg.learning_rate;
        b += gb * cfg.learning_rate;
        u = u_side.rotate(&a);
        v = v_side.rotate(&b);
    }

    let basis = CoverBasis::new(Matrix::new(u)?, Matrix::new(v)?)
        .map_err(|e| Error::numerical(format!("optimized basis lost orthonormality: {e}")))?;
    Ok((basis, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cover::build_cover_basis;
    use crate::linalg::{gaussian_matrix, random_orthonormal, seeded_rng};
    use crate::similarity::alignment_score;
    use crate::task_vector::{decompose, TaskVector};

    fn tasks(d: usize, t: usize, r: usize, seed: u64) -> Vec<KnowledgeDecomposition> {
        let mut rng = seeded_rng(seed);
        (0..t)
            .map(|i| {
                let m = Matrix::new(gaussian_matrix(d, d, &mut rng)).unwrap();
                decompose(&TaskVector::new(format!("t{i}"), m), r).unwrap()
            })
            .collect()
    }

    #[test]
    fn empty_task_list_is_rejected() {
        let mut rng = seeded_rng(0);
        let u = random_orthonormal(6, 2, &mut rng).unwrap();
        let v = random_orthonormal(6, 2, &mut rng).unwrap();
        let init = CoverBasis::new(u, v).unwrap();
        assert!(optimize_cover_basis(&[], &init, &OptimizerConfig::default()).is_err());
        assert!(ta_initialization(&[], 2).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = [
            OptimizerConfig { learning_rate: 0.0, ..Default::default() },
            OptimizerConfig { max_iters: 0, ..Default::default() },
            OptimizerConfig { log_every: 0, ..Default::default() },
            OptimizerConfig {
                gradient_mode: GradientMode::FiniteDifference { step: 0.0 },
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn dimension_limit() {
        let decomps = tasks(10, 2, 2, 1);
        let init = build_cover_basis(&decomps).unwrap();
        let cfg = OptimizerConfig { max_dim: 8, max_iters: 1, ..Default::default() };
        assert!(optimize_cover_basis(&decomps, &init, &cfg).is_err());
        let cfg = OptimizerConfig { max_dim: 10, max_iters: 1, ..Default::default() };
        assert!(optimize_cover_basis(&decomps, &init, &cfg).is_ok());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let decomps = tasks(8, 3, 2, 10 + seed);
            let init = ta_initialization(&decomps, 6).unwrap();
            let u_all = concat_u(&decomps);
            let v_all = concat_v(&decomps);
            let u_side = Side { base: init.u().as_dmatrix(), all: &u_all };
            let v_side = Side { base: init.v().as_dmatrix(), all: &v_all };
            // a generic, non-zero point
            let mut rng = seeded_rng(100 + seed);
            let a = gaussian_matrix(8, 8, &mut rng) * 0.1;
            let b = gaussian_matrix(8, 8, &mut rng) * 0.1;
            let (ga, gb) = analytic_gradients(&a, &b, &u_side, &v_side);
            let v = v_side.rotate(&b);
            let u = u_side.rotate(&a);
            let fa = |x: &DMatrix<f64>| score_with(&u_side, &v_side, &u_side.rotate(x), &v);
            let fb = |x: &DMatrix<f64>| score_with(&u_side, &v_side, &u, &v_side.rotate(x));
            // full per-entry central differences, no antisymmetry shortcut
            for (g, f, x) in [(&ga, &fa as &dyn Fn(&DMatrix<f64>) -> f64, &a), (&gb, &fb, &b)] {
                let mut fd = DMatrix::zeros(8, 8);
                for i in 0..8 {
                    for j in 0..8 {
                        let h = 1e-6;
                        let mut p = x.clone();
                        p[(i, j)] += h;
                        let mut q = x.clone();
                        q[(i, j)] -= h;
                        fd[(i, j)] = (f(&p) - f(&q)) / (2.0 * h);
                    }
                }
                let rel = (g - &fd).norm() / fd.norm();
                assert!(rel < 1e-5, "relative gradient error {rel:.3e}");
            }
        }
    }

    #[test]
    fn whitening_start_is_near_stationary() {
        let decomps = tasks(8, 3, 2, 3);
        let init = build_cover_basis(&decomps).unwrap();
        let before = alignment_score(init.u(), init.v(), &decomps).unwrap();
        let cfg = OptimizerConfig { max_iters: 1, ..Default::default() };
        let (basis, trace) = optimize_cover_basis(&decomps, &init, &cfg).unwrap();
        let after = alignment_score(basis.u(), basis.v(), &decomps).unwrap();
        assert!(after - before >= -1e-6);
        assert_eq!(trace.entries.len(), 2);
        assert_eq!(trace.entries[0].score, before);
    }

    #[test]
    fn bases_stay_orthonormal_and_scores_rise() {
        let decomps = tasks(8, 2, 2, 4);
        let init = ta_initialization(&decomps, 4).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 1e-3,
            max_iters: 30,
            gradient_mode: GradientMode::Analytic,
            log_every: 5,
            ..Default::default()
        };
        let (basis, trace) = optimize_cover_basis(&decomps, &init, &cfg).unwrap();
        assert!(basis.u().orthonormality_error() < 1e-7);
        assert!(basis.v().orthonormality_error() < 1e-7);
        let iters: Vec<usize> = trace.entries.iter().map(|e| e.iter).collect();
        assert_eq!(iters, vec![0, 5, 10, 15, 20, 25, 30]);
        for w in trace.scores().windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
    }
}
