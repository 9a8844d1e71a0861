//! Stage-by-stage construction of a tensor train from a distributed tensor.
//!
//! Each stage reshapes the working matrix so the current mode joins the row
//! index, picks a rank (fixed or spectrum-driven), factorizes with the
//! selected [`StageSolver`], folds the left factor into a core, and carries
//! the right factor into the next stage. All collectives are issued in the
//! same order on every rank; errors raised from replicated state fail the
//! whole group consistently.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use crate::comm::{Communicator, MatrixGrid, ProcessGrid, TimingReport};
use crate::dist::{
    dist_frob_norm_sq, dist_reshape, dist_residual_sq, dist_wtx, dist_xht, gather_h_full,
    gather_w_full, h_block_of, w_block_of, DistTensor, ReshapeSrc,
};
use crate::error::{NttError, Result};
use crate::nmf::{run_nmf, NmfAlgorithm, NmfConfig, NmfProblem};
use crate::rng::{stream_key, CounterRng};
use crate::spectra::{
    choose_rank, dist_gram_small, dist_singular_values, jacobi_eigh, sigma_tail,
    sigmas_from_eigenvalues, GramSide, DEFAULT_GRAM_CAP,
};
use crate::store::{StoreReader, TensorStore};
use crate::tensor::{flat_to_multi, Matrix, TensorTrain};

/// Seed-mixing tag separating per-stage factor streams.
pub const TAG_STAGE: u64 = 0x53;

/// Seed-mixing tag for the error-probe index stream.
pub const TAG_PROBE: u64 = 0x50;

/// Probe count used when the element count rules out full reconstruction.
pub const PROBE_COUNT_DEFAULT: usize = 10_000;

/// Largest element count evaluated by full reconstruction when no probe
/// count is requested.
pub const FULL_EVAL_LIMIT: usize = 100_000_000;

/// One stage factorization X ~= W * H in block-distributed layout.
///
/// `w` and `h` are this rank's blocks of the factor layouts. `sigma_tail` is
/// the exact residual norm when the solver knows it (the spectral path); the
/// driver fills it from the rank-selection spectrum otherwise.
pub struct StageFactors {
    pub w: Matrix,
    pub h: Matrix,
    pub iters: usize,
    pub restarts: u64,
    pub sigma_tail: Option<f64>,
}

/// Per-stage knobs handed to a solver.
pub struct StageContext<'a> {
    pub nmf: &'a NmfConfig,
    /// 1-based stage index, mixed into the factor seeds.
    pub stage: usize,
    pub gram_cap: usize,
}

impl StageContext<'_> {
    /// Stage-local seed: distinct stages draw from distinct streams even
    /// though every draw is keyed by global element position.
    pub fn stage_seed(&self) -> u64 {
        stream_key(self.nmf.seed, &[TAG_STAGE, self.stage as u64])
    }
}

/// A rank-r factorization strategy for one reshaped stage matrix.
///
/// Implementations are stateless and shared across the worker threads; every
/// rank of `grid` calls `solve` collectively with replicated `m`, `n`, `r`.
pub trait StageSolver: Send + Sync {
    /// Registry key, e.g. "ntt-bcd".
    fn name(&self) -> &'static str;

    /// Whether the stage input must be elementwise nonnegative.
    fn requires_nonneg(&self) -> bool;

    fn solve(
        &self,
        x: &Matrix,
        grid: &MatrixGrid,
        m: usize,
        n: usize,
        r: usize,
        ctx: &StageContext,
    ) -> Result<StageFactors>;
}

struct BcdSolver;

struct MuSolver;

struct SvdSolver;

fn solve_nmf_stage(
    algorithm: NmfAlgorithm,
    x: &Matrix,
    grid: &MatrixGrid,
    m: usize,
    n: usize,
    r: usize,
    ctx: &StageContext,
) -> Result<StageFactors> {
    let mut cfg = ctx.nmf.clone();
    cfg.rank = r;
    cfg.algorithm = algorithm;
    cfg.seed = ctx.stage_seed();
    let problem = NmfProblem { x, grid, m, n };
    let run = run_nmf(&problem, &cfg)?;
    Ok(StageFactors {
        w: run.w,
        h: run.h,
        iters: run.iters,
        restarts: run.restarts,
        sigma_tail: None,
    })
}

impl StageSolver for BcdSolver {
    fn name(&self) -> &'static str {
        "ntt-bcd"
    }

    fn requires_nonneg(&self) -> bool {
        true
    }

    fn solve(
        &self,
        x: &Matrix,
        grid: &MatrixGrid,
        m: usize,
        n: usize,
        r: usize,
        ctx: &StageContext,
    ) -> Result<StageFactors> {
        solve_nmf_stage(NmfAlgorithm::Bcd, x, grid, m, n, r, ctx)
    }
}

impl StageSolver for MuSolver {
    fn name(&self) -> &'static str {
        "ntt-mu"
    }

    fn requires_nonneg(&self) -> bool {
        true
    }

    fn solve(
        &self,
        x: &Matrix,
        grid: &MatrixGrid,
        m: usize,
        n: usize,
        r: usize,
        ctx: &StageContext,
    ) -> Result<StageFactors> {
        solve_nmf_stage(NmfAlgorithm::Mu, x, grid, m, n, r, ctx)
    }
}

impl StageSolver for SvdSolver {
    fn name(&self) -> &'static str {
        "svd-tt"
    }

    fn requires_nonneg(&self) -> bool {
        false
    }

    fn solve(
        &self,
        x: &Matrix,
        grid: &MatrixGrid,
        m: usize,
        n: usize,
        r: usize,
        ctx: &StageContext,
    ) -> Result<StageFactors> {
        svd_tt_stage(x, grid, m, n, r, ctx.gram_cap)
    }
}

/// Truncated spectral factorization of a stage matrix via the Gram matrix of
/// its smaller side.
///
/// With the column Gram X^T*X the top eigenvectors V_r give H = V_r^T and
/// W = X*V_r; with the row Gram X*X^T they give W = U_r and H = U_r^T*X.
/// Either way W*H is the rank-r projection of X, so the residual norm equals
/// the trailing singular-value tail exactly.
pub fn svd_tt_stage(
    x: &Matrix,
    grid: &MatrixGrid,
    m: usize,
    n: usize,
    r: usize,
    gram_cap: usize,
) -> Result<StageFactors> {
    if r < 1 || r > m.min(n) {
        return Err(NttError::Rank(format!(
            "stage rank {r} outside [1, {}] for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    let (gram, side) = dist_gram_small(x, grid, m, n, gram_cap)?;
    let (eigvals, eigvecs) = jacobi_eigh(&gram)?;
    let sigma = sigmas_from_eigenvalues(&eigvals);
    let tail = sigma_tail(&sigma, r);
    let (w, h) = match side {
        GramSide::Cols => {
            let h_full = Matrix::from_fn(r, n, |i, j| eigvecs.at(j, i));
            let h = h_block_of(&h_full, grid)?;
            let w = dist_xht(x, &h, grid, m, n)?;
            (w, h)
        }
        GramSide::Rows => {
            let u_r = Matrix::from_fn(m, r, |i, j| eigvecs.at(i, j));
            let w = w_block_of(&u_r, grid)?;
            let h = dist_wtx(&w, x, grid, m, n)?;
            (w, h)
        }
    };
    Ok(StageFactors {
        w,
        h,
        iters: 0,
        restarts: 0,
        sigma_tail: Some(tail),
    })
}

/// Named stage solvers, selected at runtime.
pub struct MethodRegistry {
    solvers: BTreeMap<&'static str, Box<dyn StageSolver>>,
}

impl MethodRegistry {
    /// The built-in methods: ntt-bcd, ntt-mu, svd-tt.
    pub fn standard() -> Self {
        let mut reg = MethodRegistry {
            solvers: BTreeMap::new(),
        };
        reg.register(Box::new(BcdSolver));
        reg.register(Box::new(MuSolver));
        reg.register(Box::new(SvdSolver));
        reg
    }

    pub fn register(&mut self, solver: Box<dyn StageSolver>) {
        let key = solver.name();
        self.solvers.insert(key, solver);
    }

    pub fn get(&self, name: &str) -> Result<&dyn StageSolver> {
        self.solvers
            .get(name)
            .map(|s| s.as_ref())
            .ok_or_else(|| {
                NttError::Config(format!(
                    "unknown method '{name}'; available: {}",
                    self.names().join(", ")
                ))
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.solvers.keys().copied().collect()
    }
}

/// Decomposition parameters shared by all stages.
#[derive(Debug, Clone)]
pub struct TtConfig {
    /// Stagewise relative residual thresholds: one value is broadcast to all
    /// stages, otherwise exactly d-1 values. Ignored when `fixed_ranks` is
    /// set.
    pub eps: Vec<f64>,
    /// Explicit interior ranks r_1..r_{d-1}; bypasses the spectrum.
    pub fixed_ranks: Option<Vec<usize>>,
    /// Solver knobs; `rank` and `algorithm` are set per stage.
    pub nmf: NmfConfig,
    /// Preferred row-group size for stage grids, from the input grid's first
    /// dimension.
    pub p1: usize,
    /// Largest Gram side the spectral routines accept.
    pub gram_cap: usize,
    /// Scratch directory for reshape stores; fresh per run.
    pub workdir: PathBuf,
}

impl TtConfig {
    pub fn new(workdir: PathBuf, seed: u64) -> Self {
        TtConfig {
            eps: vec![0.1],
            fixed_ranks: None,
            nmf: NmfConfig::new(1, seed),
            p1: 1,
            gram_cap: DEFAULT_GRAM_CAP,
            workdir,
        }
    }
}

/// The matrix a stage factorizes, by origin.
pub enum NttInput<'a> {
    /// Block-distributed tensor living in memory on a dim-per-dim grid.
    Tensor(&'a DistTensor, &'a ProcessGrid),
    /// Tensor on disk; every rank reads its stage-1 block directly.
    Store(&'a TensorStore),
}

impl NttInput<'_> {
    fn shape(&self) -> Vec<usize> {
        match self {
            NttInput::Tensor(t, _) => t.shape().to_vec(),
            NttInput::Store(s) => s.shape().to_vec(),
        }
    }
}

/// What one stage did, measured on this rank.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    /// 1-based stage index.
    pub stage: usize,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    /// Threshold used for rank selection; None under fixed ranks.
    pub eps: Option<f64>,
    /// ||X_l - W*H||_F^2 of this stage's matrix.
    pub residual_sq: f64,
    /// ||X_l||_F^2 of this stage's matrix.
    pub input_norm_sq: f64,
    /// Exact spectral residual at the chosen rank, when a spectrum was
    /// computed.
    pub sigma_tail: Option<f64>,
    pub iters: usize,
    pub restarts: u64,
    pub timing: TimingReport,
    /// Wall seconds inside the solver.
    pub solver_s: f64,
    /// Wall seconds for the whole stage including reshape and rank
    /// selection.
    pub wall_s: f64,
}

impl StageOutcome {
    /// Stage-relative residual ||X_l - W*H|| / ||X_l||.
    pub fn rel_residual(&self) -> f64 {
        if self.input_norm_sq > 0.0 {
            (self.residual_sq / self.input_norm_sq).sqrt()
        } else {
            0.0
        }
    }
}

/// The full decomposition record returned next to the train.
#[derive(Debug, Clone)]
pub struct TtReport {
    pub method: String,
    pub shape: Vec<usize>,
    /// Boundary ranks r_0..r_d with r_0 = r_d = 1.
    pub ranks: Vec<usize>,
    pub stages: Vec<StageOutcome>,
    pub total_s: f64,
}

impl TtReport {
    pub fn compression(&self) -> Result<f64> {
        crate::metrics::compression_ratio(&self.shape, &self.ranks)
    }
}

/// Picks the stage grid: row groups take the largest divisor shared by the
/// preferred size and the rank count, capped by the row count; the factor
/// layouts additionally need p to divide both matrix sides.
fn stage_grid(
    world: Box<dyn Communicator>,
    p1_pref: usize,
    rows: usize,
    cols: usize,
    stage: usize,
) -> Result<MatrixGrid> {
    let p = world.size();
    if rows % p != 0 || cols % p != 0 {
        return Err(NttError::Dimension(format!(
            "stage {stage}: {p} ranks cannot block a {rows}x{cols} matrix; \
             the rank count must divide both sides of every stage matrix"
        )));
    }
    let mut g = 1;
    for cand in 1..=p1_pref.min(rows) {
        if p1_pref % cand == 0 && p % cand == 0 {
            g = cand;
        }
    }
    MatrixGrid::new(world, g, p / g)
}

/// Builds a tensor train of the input, stage by stage.
///
/// Every rank of `world` calls this collectively with replicated `cfg`; the
/// returned train is replicated. Stage l reshapes the carried factor to
/// (r_{l-1} * n_l) x (n_{l+1} * ... * n_d), factorizes at the fixed or
/// spectrum-chosen rank, and reinterprets the left factor as core l. The
/// final carried factor is the last core.
pub fn dist_ntt(
    input: NttInput,
    solver: &dyn StageSolver,
    cfg: &TtConfig,
    world: Box<dyn Communicator>,
) -> Result<(TensorTrain, TtReport)> {
    let shape = input.shape();
    let d = shape.len();
    if d < 2 {
        return Err(NttError::Dimension(format!(
            "train construction needs at least 2 modes, got shape {shape:?}"
        )));
    }
    if cfg.p1 == 0 {
        return Err(NttError::Config("preferred row-group size is zero".into()));
    }
    let eps_schedule = match &cfg.fixed_ranks {
        Some(fr) => {
            if fr.len() != d - 1 {
                return Err(NttError::Config(format!(
                    "{} fixed ranks supplied for {} stages",
                    fr.len(),
                    d - 1
                )));
            }
            None
        }
        None => {
            let es = match cfg.eps.len() {
                1 => vec![cfg.eps[0]; d - 1],
                k if k == d - 1 => cfg.eps.clone(),
                k => {
                    return Err(NttError::Config(format!(
                        "{k} thresholds supplied for {} stages; give one or {}",
                        d - 1,
                        d - 1
                    )))
                }
            };
            if let Some(bad) = es.iter().find(|&&e| !(e > 0.0 && e.is_finite())) {
                return Err(NttError::Config(format!(
                    "stage threshold must be a positive finite number, got {bad}"
                )));
            }
            Some(es)
        }
    };

    let total_start = Instant::now();
    let mut ranks = vec![1usize; d + 1];
    let mut cores = Vec::with_capacity(d);
    let mut stages = Vec::with_capacity(d - 1);
    // The carried right factor: this rank's H block, the grid it lives on,
    // and the column count of the stage that produced it.
    let mut carried: Option<(Matrix, MatrixGrid, usize)> = None;

    for l in 1..d {
        let rows = ranks[l - 1] * shape[l - 1];
        let cols: usize = shape[l..].iter().product();
        let stage_start = Instant::now();
        world.reset_timers();
        let grid = stage_grid(world.clone_comm(), cfg.p1, rows, cols, l)?;
        let scratch = cfg.workdir.join(format!("stage_{l}"));
        let x = match (&carried, &input) {
            (Some((h, pgrid, pcols)), _) => dist_reshape(
                ReshapeSrc::HFactor {
                    block: h,
                    rows: ranks[l - 1],
                    cols: *pcols,
                    grid: pgrid,
                },
                rows,
                cols,
                &grid,
                &scratch,
            ),
            (None, NttInput::Tensor(t, tg)) => {
                dist_reshape(ReshapeSrc::Tensor(t, tg), rows, cols, &grid, &scratch)
            }
            (None, NttInput::Store(s)) => {
                dist_reshape(ReshapeSrc::Store(s), rows, cols, &grid, &scratch)
            }
        }
        .map_err(|e| e.with_context(&format!("stage {l} reshape")))?;

        let (r, eps_used, mut tail) = match (&cfg.fixed_ranks, &eps_schedule) {
            (Some(fr), _) => {
                let r = fr[l - 1];
                if r < 1 || r > rows.min(cols) {
                    return Err(NttError::Rank(format!(
                        "stage {l}: fixed rank {r} outside [1, {}] for a {rows}x{cols} matrix",
                        rows.min(cols)
                    )));
                }
                (r, None, None)
            }
            (None, Some(es)) => {
                let eps = es[l - 1];
                let spectrum = dist_singular_values(&x, &grid, rows, cols, cfg.gram_cap)
                    .map_err(|e| e.with_context(&format!("stage {l} spectrum")))?;
                let r = choose_rank(&spectrum, eps)
                    .map_err(|e| e.with_context(&format!("stage {l} rank selection")))?;
                let tail = sigma_tail(&spectrum.singular_values, r);
                (r, Some(eps), Some(tail))
            }
            (None, None) => unreachable!("one of fixed_ranks and eps_schedule is always set"),
        };

        let ctx = StageContext {
            nmf: &cfg.nmf,
            stage: l,
            gram_cap: cfg.gram_cap,
        };
        let solver_start = Instant::now();
        let factors = solver
            .solve(&x, &grid, rows, cols, r, &ctx)
            .map_err(|e| e.with_context(&format!("stage {l} {}", solver.name())))?;
        let solver_s = solver_start.elapsed().as_secs_f64();
        if factors.sigma_tail.is_some() {
            tail = factors.sigma_tail;
        }

        let residual_sq = dist_residual_sq(&x, &factors.w, &factors.h, &grid, rows, cols)?;
        let input_norm_sq = dist_frob_norm_sq(&x, grid.world())?;
        let w_full = gather_w_full(&factors.w, &grid, rows)?;
        cores.push(w_full.into_tensor(vec![ranks[l - 1], shape[l - 1], r])?);
        ranks[l] = r;
        stages.push(StageOutcome {
            stage: l,
            rows,
            cols,
            rank: r,
            eps: eps_used,
            residual_sq,
            input_norm_sq,
            sigma_tail: tail,
            iters: factors.iters,
            restarts: factors.restarts,
            timing: world.timing_report(),
            solver_s,
            wall_s: stage_start.elapsed().as_secs_f64(),
        });
        carried = Some((factors.h, grid, cols));
    }

    let (h, grid, cols) = carried.expect("d >= 2 leaves a carried factor");
    let h_full = gather_h_full(&h, &grid, cols)?;
    cores.push(h_full.into_tensor(vec![ranks[d - 1], shape[d - 1], 1])?);
    let train = TensorTrain::new(cores)?;
    let report = TtReport {
        method: solver.name().to_string(),
        shape,
        ranks,
        stages,
        total_s: total_start.elapsed().as_secs_f64(),
    };
    Ok((train, report))
}

/// The probe index stream seed for a run seed.
pub fn probe_seed_for(seed: u64) -> u64 {
    stream_key(seed, &[TAG_PROBE])
}

/// Relative error of the train against the stored reference, reduced over
/// all ranks. Returns the error and whether probing was used.
///
/// Small references are reconstructed in full and compared in flat-range
/// slices split across ranks. Above [`FULL_EVAL_LIMIT`] elements, or when a
/// probe count is given, the error is estimated at seeded random positions
/// instead; the same seed draws the same positions at any rank count.
pub fn evaluate_error_store(
    train: &TensorTrain,
    store: &TensorStore,
    world: &dyn Communicator,
    probes: Option<usize>,
    probe_seed: u64,
) -> Result<(f64, bool)> {
    if train.shape() != store.shape() {
        return Err(NttError::Dimension(format!(
            "train shape {:?} does not match stored shape {:?}",
            train.shape(),
            store.shape()
        )));
    }
    let numel = store.numel();
    let p = world.size();
    let rank = world.rank();
    let use_probes = probes.is_some() || numel > FULL_EVAL_LIMIT;
    let mut reader = StoreReader::new(store);
    let (diff_sq, ref_sq) = if use_probes {
        let count = probes.unwrap_or(PROBE_COUNT_DEFAULT).max(1);
        let rng = CounterRng::new(probe_seed, &[]);
        let shape = store.shape().to_vec();
        let mut index = vec![0usize; shape.len()];
        let mut one = [0.0];
        let mut diff_sq = 0.0;
        let mut ref_sq = 0.0;
        let mut i = rank;
        while i < count {
            let flat = (rng.bits(i as u64) % numel as u64) as usize;
            flat_to_multi(flat, &shape, &mut index);
            let approx = train.tt_element(&index)?;
            reader.copy_flat_range(flat, &mut one)?;
            diff_sq += (one[0] - approx) * (one[0] - approx);
            ref_sq += one[0] * one[0];
            i += p;
        }
        (diff_sq, ref_sq)
    } else {
        let recon = train.reconstruct()?;
        let base = numel / p;
        let rem = numel % p;
        let start = rank * base + rank.min(rem);
        let len = base + usize::from(rank < rem);
        let mut buf = vec![0.0; len];
        if len > 0 {
            reader.copy_flat_range(start, &mut buf)?;
        }
        let approx = &recon.as_slice()[start..start + len];
        let mut diff_sq = 0.0;
        let mut ref_sq = 0.0;
        for (a, b) in buf.iter().zip(approx) {
            diff_sq += (a - b) * (a - b);
            ref_sq += a * a;
        }
        (diff_sq, ref_sq)
    };
    let sums = world.all_reduce_sum(&[diff_sq, ref_sq])?;
    if sums[1] <= 0.0 {
        return Err(NttError::DegenerateInput(
            "reference tensor has zero norm".into(),
        ));
    }
    Ok(((sums[0] / sums[1]).sqrt(), use_probes))
}

/// One threshold's result within a sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub eps: f64,
    /// Boundary ranks of the run; empty when the run failed.
    pub ranks: Vec<usize>,
    pub compression: f64,
    pub rel_error: f64,
    pub wall_s: f64,
    pub report: Option<TtReport>,
    /// Failure message; the sweep continues past failed thresholds.
    pub error: Option<String>,
}

/// Decomposes the stored tensor once per threshold and reports rank,
/// compression, and error for each. A failed threshold is recorded and the
/// sweep moves on.
pub fn sweep(
    store: &TensorStore,
    solver: &dyn StageSolver,
    base: &TtConfig,
    eps_list: &[f64],
    probes: Option<usize>,
    world: Box<dyn Communicator>,
) -> Result<Vec<SweepRow>> {
    if eps_list.is_empty() {
        return Err(NttError::Config("sweep needs at least one threshold".into()));
    }
    let mut rows = Vec::with_capacity(eps_list.len());
    for (k, &eps) in eps_list.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.eps = vec![eps];
        cfg.fixed_ranks = None;
        cfg.workdir = base.workdir.join(format!("e{k}"));
        let run_start = Instant::now();
        let outcome = dist_ntt(NttInput::Store(store), solver, &cfg, world.clone_comm());
        match outcome {
            Ok((train, report)) => {
                let (rel_error, _) = evaluate_error_store(
                    &train,
                    store,
                    world.as_ref(),
                    probes,
                    probe_seed_for(cfg.nmf.seed),
                )?;
                rows.push(SweepRow {
                    eps,
                    ranks: report.ranks.clone(),
                    compression: report.compression()?,
                    rel_error,
                    wall_s: run_start.elapsed().as_secs_f64(),
                    report: Some(report),
                    error: None,
                });
            }
            Err(e) => rows.push(SweepRow {
                eps,
                ranks: Vec::new(),
                compression: f64::NAN,
                rel_error: f64::NAN,
                wall_s: run_start.elapsed().as_secs_f64(),
                report: None,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::threads::run_spmd;
    use crate::datagen::{generate, GenSpec};
    use crate::dist::x_block_of;
    use crate::store::write_dense;
    use crate::tensor::DenseTensor;
    use tempfile::TempDir;

    fn low_rank_matrix(m: usize, n: usize, r: usize, seed: u64) -> Matrix {
        let rng = CounterRng::new(seed, &[11]);
        let a = Matrix::from_fn(m, r, |i, j| rng.uniform((i * r + j) as u64));
        let rng = CounterRng::new(seed, &[12]);
        let b = Matrix::from_fn(r, n, |i, j| rng.uniform(1_000_000 + (i * n + j) as u64));
        a.matmul(&b).unwrap()
    }

    fn store_tensor(dir: &std::path::Path, t: &DenseTensor) -> TensorStore {
        write_dense(dir, t, t.shape()).unwrap()
    }

    #[test]
    fn registry_knows_the_standard_methods() {
        let reg = MethodRegistry::standard();
        assert_eq!(reg.names(), vec!["ntt-bcd", "ntt-mu", "svd-tt"]);
        assert!(reg.get("svd-tt").is_ok());
        assert!(!reg.get("svd-tt").unwrap().requires_nonneg());
        assert!(reg.get("ntt-bcd").unwrap().requires_nonneg());
        let err = match reg.get("qr-tt") {
            Err(e) => e.to_string(),
            Ok(_) => panic!("unknown method lookup should fail"),
        };
        assert!(err.contains("ntt-bcd") && err.contains("ntt-mu"));
    }

    #[test]
    fn svd_stage_reproduces_an_exact_rank_matrix() {
        let x = low_rank_matrix(12, 20, 3, 5);
        let frob = x.frob_norm_sq().sqrt();
        let outs = run_spmd(2, |world| -> Result<f64> {
            let grid = MatrixGrid::new(world, 2, 1)?;
            let block = x_block_of(&x, &grid)?;
            let f = svd_tt_stage(&block, &grid, 12, 20, 3, DEFAULT_GRAM_CAP)?;
            dist_residual_sq(&block, &f.w, &f.h, &grid, 12, 20)
        });
        for out in outs {
            let residual = out.unwrap().sqrt();
            assert!(residual <= 1e-10 * frob, "residual {residual}");
        }
    }

    #[test]
    fn svd_stage_residual_equals_sigma_tail_on_both_routes() {
        // 24x8 forms the column Gram, 8x24 the row Gram.
        for (m, n) in [(24usize, 8usize), (8usize, 24usize)] {
            let rng = CounterRng::new(77, &[m as u64]);
            let x = Matrix::from_fn(m, n, |i, j| rng.uniform((i * n + j) as u64));
            let x_ref = &x;
            let outs = run_spmd(2, move |world| -> Result<(f64, f64)> {
                let grid = MatrixGrid::new(world, 2, 1)?;
                let block = x_block_of(x_ref, &grid)?;
                let f = svd_tt_stage(&block, &grid, m, n, 3, DEFAULT_GRAM_CAP)?;
                let res = dist_residual_sq(&block, &f.w, &f.h, &grid, m, n)?;
                Ok((res.sqrt(), f.sigma_tail.unwrap()))
            });
            for out in outs {
                let (residual, tail) = out.unwrap();
                assert!(
                    (residual - tail).abs() <= 1e-8 * (1.0 + tail),
                    "{m}x{n}: residual {residual} vs tail {tail}"
                );
            }
        }
    }

    #[test]
    fn spectral_train_recovers_exact_ranks() {
        let shape = vec![8usize, 8, 8];
        let true_ranks = vec![1usize, 2, 3, 1];
        let dense = {
            let outs = run_spmd(1, |world| {
                let grid = ProcessGrid::new(world, vec![1, 1, 1]).unwrap();
                let spec = GenSpec::noiseless(shape.clone(), true_ranks.clone(), 33);
                generate(&spec, &grid).unwrap().block().clone()
            });
            outs.into_iter().next().unwrap()
        };
        let dir = TempDir::new().unwrap();
        let store = store_tensor(&dir.path().join("x"), &dense);
        let scratch = dir.path().to_path_buf();
        let store_ref = &store;
        let outs = run_spmd(4, move |world| -> Result<(TensorTrain, TtReport, f64)> {
            let mut cfg = TtConfig::new(scratch.join("w"), 33);
            cfg.fixed_ranks = Some(vec![2, 3]);
            cfg.p1 = 2;
            let reg = MethodRegistry::standard();
            let solver = reg.get("svd-tt")?;
            let (train, report) =
                dist_ntt(NttInput::Store(store_ref), solver, &cfg, world.clone_comm())?;
            let (err, probed) = evaluate_error_store(
                &train,
                store_ref,
                world.as_ref(),
                None,
                probe_seed_for(33),
            )?;
            assert!(!probed);
            Ok((train, report, err))
        });
        for out in outs {
            let (train, report, err) = out.unwrap();
            assert_eq!(train.ranks(), &[1, 2, 3, 1]);
            assert_eq!(report.ranks, vec![1, 2, 3, 1]);
            assert!(err <= 1e-10, "relative error {err}");
            assert_eq!(report.stages.len(), 2);
            for s in &report.stages {
                // The eigensolver floors zero singular values near
                // 1e-8 * sigma_1, so compare tails at the stage norm scale.
                let tail = s.sigma_tail.unwrap();
                let diff = (s.residual_sq.sqrt() - tail).abs();
                assert!(diff <= 1e-7 * s.input_norm_sq.sqrt(), "diff {diff}");
            }
        }
    }

    #[test]
    fn workdirs_may_be_shared_across_ranks() {
        // All ranks pass the same scratch root; rank 0 creates each stage
        // store and the rest open it.
        let shape = vec![4usize, 4, 4];
        let dense = DenseTensor::new(
            shape.clone(),
            (0..64).map(|i| 1.0 + (i % 7) as f64).collect(),
        )
        .unwrap();
        let dir = TempDir::new().unwrap();
        let store = store_tensor(&dir.path().join("x"), &dense);
        let scratch = dir.path().join("shared");
        let (store_ref, scratch_ref) = (&store, &scratch);
        let outs = run_spmd(2, move |world| -> Result<Vec<usize>> {
            let mut cfg = TtConfig::new(scratch_ref.clone(), 1);
            cfg.eps = vec![0.5];
            cfg.p1 = 2;
            let reg = MethodRegistry::standard();
            let (train, _) = dist_ntt(
                NttInput::Store(store_ref),
                reg.get("svd-tt")?,
                &cfg,
                world,
            )?;
            Ok(train.ranks().to_vec())
        });
        for out in outs {
            out.unwrap();
        }
    }

    #[test]
    fn nonnegative_train_approximates_a_product_tensor() {
        let shape = vec![6usize, 6, 6];
        let true_ranks = vec![1usize, 2, 2, 1];
        let dense = {
            let outs = run_spmd(1, |world| {
                let grid = ProcessGrid::new(world, vec![1, 1, 1]).unwrap();
                let spec = GenSpec::noiseless(shape.clone(), true_ranks.clone(), 91);
                generate(&spec, &grid).unwrap().block().clone()
            });
            outs.into_iter().next().unwrap()
        };
        let dir = TempDir::new().unwrap();
        let store = store_tensor(&dir.path().join("x"), &dense);
        let scratch = dir.path().to_path_buf();
        let store_ref = &store;
        let outs = run_spmd(2, move |world| -> Result<(Vec<usize>, f64, f64)> {
            let mut cfg = TtConfig::new(scratch.join("w"), 91);
            cfg.fixed_ranks = Some(vec![2, 2]);
            cfg.nmf.max_iters = 150;
            cfg.p1 = 2;
            let reg = MethodRegistry::standard();
            let (train, _) = dist_ntt(
                NttInput::Store(store_ref),
                reg.get("ntt-bcd")?,
                &cfg,
                world.clone_comm(),
            )?;
            let (err, _) = evaluate_error_store(
                &train,
                store_ref,
                world.as_ref(),
                None,
                probe_seed_for(91),
            )?;
            Ok((train.ranks().to_vec(), err, train.min_entry()))
        });
        for out in outs {
            let (ranks, err, min_entry) = out.unwrap();
            assert_eq!(ranks, vec![1, 2, 2, 1]);
            assert!(err <= 0.1, "relative error {err}");
            assert!(min_entry >= 0.0, "negative core entry {min_entry}");
        }
    }

    #[test]
    fn two_mode_input_degenerates_to_a_single_factorization() {
        let x = low_rank_matrix(9, 7, 2, 3);
        let dense = DenseTensor::new(vec![9, 7], x.as_slice().to_vec()).unwrap();
        let dir = TempDir::new().unwrap();
        let store = store_tensor(&dir.path().join("x"), &dense);
        let scratch = dir.path().to_path_buf();
        let store_ref = &store;
        let outs = run_spmd(1, move |world| -> Result<(TensorTrain, f64)> {
            let mut cfg = TtConfig::new(scratch.join("w"), 3);
            cfg.fixed_ranks = Some(vec![2]);
            let reg = MethodRegistry::standard();
            let (train, _) = dist_ntt(
                NttInput::Store(store_ref),
                reg.get("svd-tt")?,
                &cfg,
                world.clone_comm(),
            )?;
            let (err, _) = evaluate_error_store(
                &train,
                store_ref,
                world.as_ref(),
                None,
                probe_seed_for(3),
            )?;
            Ok((train, err))
        });
        let (train, err) = outs.into_iter().next().unwrap().unwrap();
        assert_eq!(train.ranks(), &[1, 2, 1]);
        assert_eq!(train.cores()[0].shape(), &[1, 9, 2]);
        assert_eq!(train.cores()[1].shape(), &[2, 7, 1]);
        assert!(err <= 1e-10, "relative error {err}");
    }

    #[test]
    fn config_validation_rejects_bad_schedules() {
        let dense = DenseTensor::new(vec![4, 4, 4], vec![1.0; 64]).unwrap();
        let dir = TempDir::new().unwrap();
        let store = store_tensor(&dir.path().join("x"), &dense);
        let scratch = dir.path().to_path_buf();
        let store_ref = &store;
        let outs = run_spmd(1, move |world| {
            let reg = MethodRegistry::standard();
            let solver = reg.get("svd-tt").unwrap();
            let base = TtConfig::new(scratch.join("w"), 0);

            let mut two_eps = base.clone();
            two_eps.eps = vec![0.1, 0.2, 0.3, 0.4];
            let r1 = dist_ntt(NttInput::Store(store_ref), solver, &two_eps, world.clone_comm());

            let mut bad_ranks = base.clone();
            bad_ranks.fixed_ranks = Some(vec![2]);
            let r2 = dist_ntt(NttInput::Store(store_ref), solver, &bad_ranks, world.clone_comm());

            let mut zero_eps = base.clone();
            zero_eps.eps = vec![0.0];
            let r3 = dist_ntt(NttInput::Store(store_ref), solver, &zero_eps, world.clone_comm());

            let mut huge_rank = base.clone();
            huge_rank.fixed_ranks = Some(vec![2, 100]);
            let r4 = dist_ntt(NttInput::Store(store_ref), solver, &huge_rank, world);
            (r1.is_err(), r2.is_err(), r3.is_err(), r4.is_err())
        });
        let (r1, r2, r3, r4) = outs.into_iter().next().unwrap();
        assert!(r1 && r2 && r3 && r4);
    }

    #[test]
    fn indivisible_stage_matrices_are_rejected() {
        let dense = DenseTensor::new(vec![5, 5, 5], vec![1.0; 125]).unwrap();
        let dir = TempDir::new().unwrap();
        let store = store_tensor(&dir.path().join("x"), &dense);
        let scratch = dir.path().to_path_buf();
        let store_ref = &store;
        let outs = run_spmd(2, move |world| {
            let reg = MethodRegistry::standard();
            let mut cfg = TtConfig::new(scratch.join("w"), 0);
            cfg.fixed_ranks = Some(vec![2, 2]);
            dist_ntt(NttInput::Store(store_ref), reg.get("svd-tt").unwrap(), &cfg, world)
        });
        for out in outs {
            match out {
                Err(NttError::Dimension(msg)) => assert!(msg.contains("stage 1")),
                other => panic!("expected a dimension error, got {other:?}"),
            }
        }
    }

    #[test]
    fn probe_error_tracks_full_error() {
        let shape = vec![8usize, 8, 8];
        let spec = GenSpec {
            shape: shape.clone(),
            ranks: vec![1, 2, 2, 1],
            seed: 55,
            noise_variance: Some(0.01),
            clip: true,
        };
        let dense = {
            let outs = run_spmd(1, move |world| {
                let grid = ProcessGrid::new(world, vec![1, 1, 1]).unwrap();
                generate(&spec, &grid).unwrap().block().clone()
            });
            outs.into_iter().next().unwrap()
        };
        let dir = TempDir::new().unwrap();
        let store = store_tensor(&dir.path().join("x"), &dense);
        let scratch = dir.path().to_path_buf();
        let store_ref = &store;
        let outs = run_spmd(2, move |world| -> Result<(f64, bool, f64, bool)> {
            let mut cfg = TtConfig::new(scratch.join("w"), 55);
            cfg.fixed_ranks = Some(vec![2, 2]);
            cfg.p1 = 2;
            let reg = MethodRegistry::standard();
            let (train, _) = dist_ntt(
                NttInput::Store(store_ref),
                reg.get("svd-tt")?,
                &cfg,
                world.clone_comm(),
            )?;
            let (full, full_probed) = evaluate_error_store(
                &train,
                store_ref,
                world.as_ref(),
                None,
                probe_seed_for(55),
            )?;
            let (probed, probed_flag) = evaluate_error_store(
                &train,
                store_ref,
                world.as_ref(),
                Some(4000),
                probe_seed_for(55),
            )?;
            Ok((full, full_probed, probed, probed_flag))
        });
        for out in outs {
            let (full, full_probed, probed, probed_flag) = out.unwrap();
            assert!(!full_probed);
            assert!(probed_flag);
            assert!(full > 0.0);
            assert!(
                (probed - full).abs() <= 0.25 * full,
                "probe estimate {probed} vs full {full}"
            );
        }
    }

    #[test]
    fn sweep_tightening_thresholds_grows_ranks() {
        let shape = vec![8usize, 8, 8];
        let dense = {
            let outs = run_spmd(1, |world| {
                let grid = ProcessGrid::new(world, vec![1, 1, 1]).unwrap();
                let spec = GenSpec::noiseless(shape.clone(), vec![1, 2, 2, 1], 19);
                generate(&spec, &grid).unwrap().block().clone()
            });
            outs.into_iter().next().unwrap()
        };
        let dir = TempDir::new().unwrap();
        let store = store_tensor(&dir.path().join("x"), &dense);
        let scratch = dir.path().to_path_buf();
        let store_ref = &store;
        let outs = run_spmd(2, move |world| -> Result<Vec<SweepRow>> {
            let mut cfg = TtConfig::new(scratch.join("w"), 19);
            cfg.p1 = 2;
            let reg = MethodRegistry::standard();
            sweep(
                store_ref,
                reg.get("svd-tt")?,
                &cfg,
                &[0.9, 1e-6],
                None,
                world,
            )
        });
        for out in outs {
            let rows = out.unwrap();
            assert_eq!(rows.len(), 2);
            assert!(rows.iter().all(|r| r.error.is_none()));
            assert_eq!(rows[0].ranks, vec![1, 1, 1, 1]);
            assert_eq!(rows[1].ranks, vec![1, 2, 2, 1]);
            assert!(rows[1].rel_error <= rows[0].rel_error);
            assert!(rows[1].compression <= rows[0].compression);
            assert!(rows[1].report.as_ref().unwrap().stages[0].eps == Some(1e-6));
        }
    }
}
