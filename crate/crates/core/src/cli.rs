//! Command-line front end: argument definitions and the subcommand drivers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;

use crate::container::{read_container, write_container, Tensor, TensorContainer};
use crate::cover::{block_mean_abs, build_cover_basis, project};
use crate::error::{Error, Result};
use crate::extract::{extract_task_vectors, ExtractedTask};
use crate::linalg::{singular_values, Matrix};
use crate::merge::{
    assemble_model, dc_merge, resolve_rank, MaskBlock, MergeConfig, Merger, RankPolicy,
};
use crate::optimizer::{
    optimize_cover_basis, ta_initialization, GradientMode, OptimizerConfig, DEFAULT_FD_STEP,
    DEFAULT_MAX_DIM,
};
use crate::perturb::{direction_perturb, energy_perturb, ParallelFallback};
use crate::similarity::{
    accuracy_report, alignment_score, cos_sim, dir_sim, projected_dir_sim, vector_cos_sim,
    AccuracyTable,
};
use crate::task_vector::{decompose, KnowledgeDecomposition, Mode, SmoothingStrategy, TaskVector};

pub const THREADS_ENV: &str = "DCMERGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dcmerge", version, about = "Directional-consistent model merging")]
pub struct Cli {
    /// Worker threads for per-tensor work (default: DCMERGE_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge several task checkpoints into one model.
    Merge(MergeArgs),
    /// Similarity diagnostics of a merged model against its tasks.
    Report(ReportArgs),
    /// List tensors and their singular value energy profile.
    Inspect(InspectArgs),
    /// Write a checkpoint whose task vectors are perturbed by a set amount.
    Perturb(PerturbArgs),
    /// Run gradient ascent on the cover basis of one tensor.
    OptimizeBasis(OptimizeArgs),
    /// Normalized accuracy and NAI from a measured accuracy table.
    AccuracyReport(AccuracyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Lora,
    Fft,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Lora => Mode::Lora,
            ModeArg::Fft => Mode::Fft,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SmoothingArg {
    None,
    Avg,
    Linear,
    Interp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MergerArg {
    Ta,
    Ties,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PerturbKind {
    Energy,
    Direction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GradientArg {
    Fd,
    Analytic,
}

fn parse_auto_count(s: &str) -> std::result::Result<Option<usize>, String> {
    if s == "auto" {
        return Ok(None);
    }
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(Some(n)),
        Err(_) => Err(format!("expected `auto` or a positive integer, got `{s}`")),
    }
}

fn parse_rank(s: &str) -> std::result::Result<RankPolicy, String> {
    Ok(parse_auto_count(s)?.map_or(RankPolicy::Auto, RankPolicy::Fixed))
}

fn parse_block(s: &str) -> std::result::Result<MaskBlock, String> {
    Ok(parse_auto_count(s)?.map_or(MaskBlock::Auto, MaskBlock::Fixed))
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub task: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long, default_value = "auto", value_parser = parse_rank)]
    pub rank: RankPolicy,
    /// Defaults to `avg` for LoRA and `none` for full fine-tunes.
    #[arg(long, value_enum)]
    pub smoothing: Option<SmoothingArg>,
    #[arg(long, default_value_t = 5.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, value_enum, default_value = "ties")]
    pub merger: MergerArg,
    #[arg(long, default_value_t = crate::merge::DEFAULT_TIES_KEEP)]
    pub ties_keep: f64,
    #[arg(long, default_value = "auto", value_parser = parse_block)]
    pub mask_block: MaskBlock,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Accepted for interface symmetry; merging involves no randomness.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub merged: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub task: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "fft")]
    pub mode: ModeArg,
    #[arg(long, default_value = "auto", value_parser = parse_rank)]
    pub rank: RankPolicy,
    /// Also write the mean |·| of each r×r block of the merged cover coordinates.
    #[arg(long)]
    pub block_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub file: PathBuf,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, value_enum)]
    pub kind: PerturbKind,
    #[arg(long)]
    pub p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "fft")]
    pub mode: ModeArg,
    /// Defaults to the LoRA rank, or half the smaller dimension for full fine-tunes.
    #[arg(long, default_value = "auto", value_parser = parse_rank)]
    pub rank: RankPolicy,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub task: Vec<PathBuf>,
    #[arg(long)]
    pub tensor: String,
    #[arg(long, default_value_t = 1e-2)]
    pub eta: f64,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "fft")]
    pub mode: ModeArg,
    #[arg(long, default_value = "auto", value_parser = parse_rank)]
    pub rank: RankPolicy,
    #[arg(long, value_enum, default_value = "fd")]
    pub gradient: GradientArg,
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    pub fd_step: f64,
    #[arg(long, default_value_t = 1)]
    pub log_every: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_DIM)]
    pub max_dim: usize,
}

#[derive(Debug, Args)]
pub struct AccuracyArgs {
    #[arg(long)]
    pub table: PathBuf,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Worker count from the flag, then the environment, else rayon's default.
pub fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        if n == 0 {
            return Err(Error::invalid("--threads must be at least 1"));
        }
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::invalid(format!("{THREADS_ENV} must be a positive integer, got `{s}`"))),
        },
        Err(_) => Ok(None),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = resolve_threads(cli.threads)? {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Merge(a) => run_merge(&a),
        Command::Report(a) => run_report(&a),
        Command::Inspect(a) => run_inspect(&a, &mut stdout),
        Command::Perturb(a) => run_perturb(&a, &mut stdout),
        Command::OptimizeBasis(a) => run_optimize(&a, &mut stdout),
        Command::AccuracyReport(a) => run_accuracy(&a, &mut stdout),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    io_err(Path::new("<stdout>"), e)
}

fn create_file(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| io_err(path, e))
}

fn load_tasks(base: &TensorContainer, paths: &[PathBuf], mode: Mode) -> Result<Vec<ExtractedTask>> {
    paths
        .iter()
        .map(|p| extract_task_vectors(base, &read_container(p)?, mode))
        .collect()
}

/// Matrix task vectors grouped by tensor name, in task order.
fn group_matrices(tasks: &[ExtractedTask]) -> BTreeMap<String, Vec<TaskVector>> {
    let mut groups: BTreeMap<String, Vec<TaskVector>> = BTreeMap::new();
    for t in tasks {
        for (name, tv) in &t.matrices {
            groups.entry(name.clone()).or_default().push(tv.clone());
        }
    }
    groups
}

fn smoothing_from(args: &MergeArgs, mode: Mode) -> Result<SmoothingStrategy> {
    Ok(match args.smoothing {
        None => mode.default_smoothing(),
        Some(SmoothingArg::None) => SmoothingStrategy::TruncateOnly,
        Some(SmoothingArg::Avg) => SmoothingStrategy::Averaging,
        Some(SmoothingArg::Linear) => SmoothingStrategy::linear(args.rho)?,
        Some(SmoothingArg::Interp) => SmoothingStrategy::interpolate(args.tau)?,
    })
}

fn run_merge(args: &MergeArgs) -> Result<()> {
    let mode: Mode = args.mode.into();
    let cfg = MergeConfig {
        mode,
        rank: args.rank,
        smoothing: smoothing_from(args, mode)?,
        merger: match args.merger {
            MergerArg::Ta => Merger::TaskArithmetic,
            MergerArg::Ties => Merger::Ties {
                keep_fraction: args.ties_keep,
            },
        },
        mask_block: args.mask_block,
        alpha: args.alpha,
    };
    cfg.validate()?;
    let base = read_container(&args.base)?;
    let tasks = load_tasks(&base, &args.task, mode)?;

    let groups: Vec<(String, Vec<TaskVector>)> = group_matrices(&tasks).into_iter().collect();
    for (name, tvs) in &groups {
        if tvs.len() < tasks.len() {
            warn!("`{name}` appears in {} of {} tasks; merging those only", tvs.len(), tasks.len());
        }
    }
    let merged: Vec<(String, Matrix)> = groups
        .par_iter()
        .map(|(name, tvs)| {
            let out = dc_merge(tvs, &cfg).map_err(|e| annotate(name, e))?;
            Ok((name.clone(), out.merged))
        })
        .collect::<Result<_>>()?;
    let merged: BTreeMap<String, Matrix> = merged.into_iter().collect();

    let mut vectors: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for t in &tasks {
        for (name, d) in &t.vectors {
            vectors.entry(name.clone()).or_default().push(d.clone());
        }
    }
    vectors.retain(|name, ds| {
        let keep = ds.len() == tasks.len();
        if !keep {
            warn!("`{name}` missing from some task checkpoints; left at base value");
        }
        keep
    });

    let out = assemble_model(&base, &merged, &vectors, cfg.alpha)?;
    write_container(&out, &args.out)?;
    info!(
        "merged {} matrices and averaged {} other tensors into {}",
        merged.len(),
        vectors.len(),
        args.out.display()
    );
    Ok(())
}

/// Prefixes an error message with the tensor it came from, keeping its class.
fn annotate(name: &str, e: Error) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("`{name}`: {m}")),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("`{name}`: {m}")),
        Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("`{name}`: {m}")),
        other => other,
    }
}

fn task_label(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run_report(args: &ReportArgs) -> Result<()> {
    let mode: Mode = args.mode.into();
    let base = read_container(&args.base)?;
    let merged_ckpt = read_container(&args.merged)?;
    let merged = extract_task_vectors(&base, &merged_ckpt, Mode::Fft)?;
    let tasks = load_tasks(&base, &args.task, mode)?;
    let labels: Vec<String> = args.task.iter().map(|p| task_label(p)).collect();

    let mut wtr = csv::Writer::from_writer(create_file(&args.out)?);
    wtr.write_record([
        "tensor",
        "task",
        "rank",
        "projected_dir_sim",
        "cos_sim",
        "dir_sim",
        "alignment_score",
    ])?;
    let mut blocks = match &args.block_out {
        Some(p) => {
            let mut w = csv::Writer::from_writer(create_file(p)?);
            w.write_record(["tensor", "block_row", "block_col", "mean_abs"])?;
            Some(w)
        }
        None => None,
    };

    for (name, tvs) in group_matrices(&tasks) {
        let Some(merged_tv) = merged.matrices.get(&name) else {
            warn!("`{name}` missing from the merged checkpoint; skipped");
            continue;
        };
        let rows = report_tensor(&name, &tvs, &merged_tv.delta, args.rank, mode)
            .map_err(|e| annotate(&name, e))?;
        for (i, row) in rows.per_task.iter().enumerate() {
            let label = labels.get(i).cloned().unwrap_or_else(|| format!("task{i}"));
            wtr.write_record([
                name.clone(),
                label,
                rows.rank.to_string(),
                row[0].to_string(),
                row[1].to_string(),
                row[2].to_string(),
                row[3].to_string(),
            ])?;
        }
        let mean = |c: usize| rows.per_task.iter().map(|r| r[c]).sum::<f64>() / rows.per_task.len() as f64;
        wtr.write_record([
            name.clone(),
            "all".to_string(),
            rows.rank.to_string(),
            mean(0).to_string(),
            mean(1).to_string(),
            mean(2).to_string(),
            rows.total_alignment.to_string(),
        ])?;
        if let Some(w) = blocks.as_mut() {
            for ((bi, bj), v) in rows.block_means {
                w.write_record([name.clone(), bi.to_string(), bj.to_string(), v.to_string()])?;
            }
        }
    }
    wtr.flush().map_err(|e| io_err(&args.out, e))?;
    if let (Some(w), Some(p)) = (blocks.as_mut(), &args.block_out) {
        w.flush().map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

struct TensorReport {
    rank: usize,
    /// projected DirSim, CosSim, DirSim against the merged delta's own
    /// decomposition, alignment score of this task with the cover basis
    per_task: Vec<[f64; 4]>,
    total_alignment: f64,
    block_means: Vec<((usize, usize), f64)>,
}

fn report_tensor(
    name: &str,
    tvs: &[TaskVector],
    merged: &Matrix,
    rank: RankPolicy,
    mode: Mode,
) -> Result<TensorReport> {
    let shape = merged.shape();
    let (r, _) = resolve_rank(rank, mode, shape, tvs)?;
    let decomps: Vec<KnowledgeDecomposition> = tvs.iter().map(|t| decompose(t, r)).collect::<Result<_>>()?;
    let basis = build_cover_basis(&decomps)?;
    let merged_kd = decompose(&TaskVector::new(name, merged.clone()), r)?;
    let mut per_task = Vec::with_capacity(tvs.len());
    for (tv, kd) in tvs.iter().zip(&decomps) {
        let pds = match projected_dir_sim(kd, merged, r) {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                warn!("`{name}`: {e}");
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        let cs = cos_sim(&tv.delta, merged).unwrap_or(f64::NAN);
        let ds = dir_sim(kd, &merged_kd)?;
        let score = alignment_score(basis.u(), basis.v(), std::slice::from_ref(kd))?;
        per_task.push([pds, cs, ds, score]);
    }
    let total_alignment = alignment_score(basis.u(), basis.v(), &decomps)?;
    let coords = block_mean_abs(&project(merged, &basis)?, r)?;
    let mut block_means = Vec::new();
    for i in 0..coords.nrows() {
        for j in 0..coords.ncols() {
            block_means.push(((i, j), coords[(i, j)]));
        }
    }
    Ok(TensorReport {
        rank: r,
        per_task,
        total_alignment,
        block_means,
    })
}

/// Ranks at which the energy fraction is listed: powers of two, then the full rank.
fn energy_ranks(full: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut r = 1;
    while r < full {
        out.push(r);
        r *= 2;
    }
    if full > 0 {
        out.push(full);
    }
    out
}

fn run_inspect(args: &InspectArgs, out: &mut impl Write) -> Result<()> {
    let c = read_container(&args.file)?;
    let mut lines = Vec::new();
    for (k, v) in &c.metadata {
        lines.push(format!("# {k} = {v}"));
    }
    for (name, t) in &c.tensors {
        lines.push(format!("{name}\t{:?}\t{:?}", t.dtype(), t.shape()));
        if !t.is_matrix() {
            continue;
        }
        let sigma = singular_values(&t.to_matrix()?)?;
        let total: f64 = sigma.iter().sum();
        if total == 0.0 {
            lines.push("  all singular values are zero".to_string());
            continue;
        }
        let mut acc = 0.0;
        let mut prefix = Vec::with_capacity(sigma.len());
        for s in &sigma {
            acc += s;
            prefix.push(acc);
        }
        lines.push(format!("  sigma_max {:.6e}  sigma_min {:.6e}", sigma[0], sigma[sigma.len() - 1]));
        let fractions: Vec<String> = energy_ranks(sigma.len())
            .into_iter()
            .map(|r| format!("r={r}:{:.4}", prefix[r - 1] / total))
            .collect();
        lines.push(format!("  top-r energy  {}", fractions.join("  ")));
    }
    for l in lines {
        writeln!(out, "{l}").map_err(stdout_err)?;
    }
    Ok(())
}

/// Independent per-tensor seed derived from the user seed and tensor index.
fn derive_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn run_perturb(args: &PerturbArgs, out: &mut impl Write) -> Result<()> {
    if !(0.0..=1.0).contains(&args.p) {
        return Err(Error::invalid(format!("--p must lie in [0, 1], got {}", args.p)));
    }
    let mode: Mode = args.mode.into();
    let base = read_container(&args.base)?;
    let task = extract_task_vectors(&base, &read_container(&args.task)?, mode)?;

    let mut result = base.clone();
    let mut lines = vec!["tensor,rank,similarity".to_string()];
    for (index, (name, tv)) in task.matrices.iter().enumerate() {
        let b = base.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        let shape = tv.shape();
        let r = match args.rank {
            RankPolicy::Fixed(r) => r,
            RankPolicy::Auto => match (mode, tv.lora_rank) {
                (Mode::Lora, Some(r)) => r,
                _ => (shape.0.min(shape.1) / 2).max(1),
            },
        };
        let kd = decompose(tv, r).map_err(|e| annotate(name, e))?;
        let seed = derive_seed(args.seed, index);
        let (delta, achieved) = match args.kind {
            PerturbKind::Energy => {
                let s = energy_perturb(kd.sigma(), None, args.p, ParallelFallback::Random(seed))
                    .map_err(|e| annotate(name, e))?;
                let achieved = vector_cos_sim(kd.sigma(), &s)?;
                (kd.svd().reconstruct_with(&s)?, achieved)
            }
            PerturbKind::Direction => {
                let pk = direction_perturb(&kd, args.p, seed).map_err(|e| annotate(name, e))?;
                let achieved = dir_sim(&kd, &pk)?;
                (pk.svd().reconstruct(), achieved)
            }
        };
        let weights = b.to_matrix()?.add(&delta)?;
        result.insert(name.clone(), Tensor::from_matrix(b.dtype(), &weights));
        lines.push(format!("{name},{},{achieved}", kd.rank()));
    }
    for (name, d) in &task.vectors {
        let b = base.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        let vals: Vec<f64> = b.to_f64_vec().iter().zip(d).map(|(x, y)| x + y).collect();
        result.insert(name.clone(), Tensor::from_f64_values(b.dtype(), b.shape().to_vec(), vals)?);
    }
    write_container(&result, &args.out)?;
    for l in lines {
        writeln!(out, "{l}").map_err(stdout_err)?;
    }
    Ok(())
}

fn run_optimize(args: &OptimizeArgs, out: &mut impl Write) -> Result<()> {
    let mode: Mode = args.mode.into();
    let cfg = OptimizerConfig {
        learning_rate: args.eta,
        max_iters: args.iters,
        gradient_mode: match args.gradient {
            GradientArg::Fd => GradientMode::FiniteDifference { step: args.fd_step },
            GradientArg::Analytic => GradientMode::Analytic,
        },
        log_every: args.log_every,
        max_dim: args.max_dim,
    };
    cfg.validate()?;
    let base = read_container(&args.base)?;
    let tasks = load_tasks(&base, &args.task, mode)?;
    let tvs: Vec<TaskVector> = tasks
        .iter()
        .map(|t| {
            t.matrices
                .get(&args.tensor)
                .cloned()
                .ok_or_else(|| Error::MissingTensor(args.tensor.clone()))
        })
        .collect::<Result<_>>()?;
    let (m, n) = tvs[0].shape();
    if m.max(n) > cfg.max_dim {
        return Err(Error::invalid(format!(
            "`{}` is {m}x{n}, above the dimension limit {}",
            args.tensor, cfg.max_dim
        )));
    }
    let (r, _) = resolve_rank(args.rank, mode, (m, n), &tvs)?;
    let decomps: Vec<KnowledgeDecomposition> = tvs.iter().map(|t| decompose(t, r)).collect::<Result<_>>()?;
    let whitened = build_cover_basis(&decomps)?;
    let reference = alignment_score(whitened.u(), whitened.v(), &decomps)?;
    let init = ta_initialization(&decomps, r * decomps.len())?;
    let (basis, trace) = optimize_cover_basis(&decomps, &init, &cfg)?;
    let last = alignment_score(basis.u(), basis.v(), &decomps)?;

    let mut wtr = csv::Writer::from_writer(create_file(&args.out)?);
    wtr.write_record(["iter", "score"])?;
    for e in &trace.entries {
        wtr.write_record([e.iter.to_string(), e.score.to_string()])?;
    }
    wtr.flush().map_err(|e| io_err(&args.out, e))?;
    writeln!(out, "whitening_score,{reference}").map_err(stdout_err)?;
    writeln!(out, "final_score,{last}").map_err(stdout_err)?;
    writeln!(out, "ratio,{}", last / reference).map_err(stdout_err)?;
    Ok(())
}

fn run_accuracy(args: &AccuracyArgs, stdout: &mut impl Write) -> Result<()> {
    let file = File::open(&args.table).map_err(|e| io_err(&args.table, e))?;
    let report = accuracy_report(&AccuracyTable::from_csv(file)?)?;
    let sink: Box<dyn Write + '_> = match &args.out {
        Some(p) => Box::new(create_file(p)?),
        None => Box::new(stdout),
    };
    let mut wtr = csv::Writer::from_writer(sink);
    wtr.write_record(["task", "normalized_accuracy", "nai"])?;
    for t in &report.per_task {
        wtr.write_record([t.task.clone(), t.normalized.to_string(), t.nai.to_string()])?;
    }
    let mean_nai = report.per_task.iter().map(|t| t.nai).sum::<f64>() / report.per_task.len() as f64;
    wtr.write_record(["average".to_string(), report.avg_normalized.to_string(), mean_nai.to_string()])?;
    wtr.flush().map_err(stdout_err)?;
    Ok(())
}
