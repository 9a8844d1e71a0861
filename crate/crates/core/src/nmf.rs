//! Distributed nonnegative matrix factorization.
//!
//! Two update schemes share the same distributed kernels and state:
//!
//! * block coordinate descent with Nesterov-style extrapolation, a
//!   Lipschitz step from the spectral norm of the small Gram matrix, and a
//!   correction branch that re-randomizes the factors when the objective
//!   fails to decrease;
//! * multiplicative updates, kept as a momentum-free alternative.
//!
//! X is block-distributed, W and H live in the factor layouts described in
//! the dist module, and every rank holds bit-identical copies of the small
//! replicated quantities (Grams, norms, objective), so control flow never
//! diverges across ranks.

use crate::comm::{timed, Category, Communicator, MatrixGrid};
use crate::dist::{
    dist_dot, dist_frob_norm_sq, dist_gram_cols, dist_gram_rows, dist_min, dist_xht, dist_wtx,
};
use crate::error::{NttError, Result};
use crate::rng::CounterRng;
use crate::spectra::spectral_norm_sym;
use crate::tensor::Matrix;

const TAG_FACTOR_W: u64 = 0x57;
const TAG_FACTOR_H: u64 = 0x48;

/// Floor added to multiplicative-update denominators.
const MU_DENOM_FLOOR: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmfAlgorithm {
    Bcd,
    Mu,
}

#[derive(Debug, Clone)]
pub struct NmfConfig {
    pub rank: usize,
    pub max_iters: usize,
    /// Extrapolation safeguard in (0, 1).
    pub delta: f64,
    pub seed: u64,
    pub algorithm: NmfAlgorithm,
    /// Relative objective-change threshold for early exit; None runs all
    /// iterations.
    pub tol: Option<f64>,
    /// Divide the H step by sqrt of the Gram norm instead of the norm
    /// itself (the asymmetric variant; off by default).
    pub h_step_sqrt_norm: bool,
}

impl NmfConfig {
    pub fn new(rank: usize, seed: u64) -> Self {
        NmfConfig {
            rank,
            max_iters: 100,
            delta: 0.9999,
            seed,
            algorithm: NmfAlgorithm::Bcd,
            tol: None,
            h_step_sqrt_norm: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(NttError::Config("factor rank must be at least 1".into()));
        }
        if self.max_iters < 1 {
            return Err(NttError::Config("max_iters must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(NttError::Config(format!(
                "extrapolation delta must lie in (0,1), got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// The factorization problem a state operates on: this rank's X block plus
/// the global geometry.
pub struct NmfProblem<'a> {
    pub x: &'a Matrix,
    pub grid: &'a MatrixGrid,
    pub m: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Extrapolated,
    Corrected,
}

pub struct NmfState {
    /// Current iterates, elementwise nonnegative.
    pub w: Matrix,
    pub h: Matrix,
    /// Extrapolated points consumed by the next step.
    w_m: Matrix,
    h_m: Matrix,
    /// Accepted iterates from the previous iteration.
    w_prev: Matrix,
    h_prev: Matrix,
    /// Gram of the current h, fresh at loop boundaries.
    hht: Matrix,
    /// Spectral norm of hht.
    hht_norm: f64,
    /// Gram norm that scaled this iteration's W step (previous h).
    l_w_used: Option<f64>,
    /// Spectral norm of W^T*W from this and the previous completed step.
    wtw_norm: Option<f64>,
    wtw_norm_prev: Option<f64>,
    /// Last accepted objective; 0.5*||X||^2 before any acceptance.
    obj: f64,
    /// Objective of the pending (not yet accepted) step.
    obj_candidate: f64,
    t: f64,
    x_norm_sq: f64,
    restarts: u64,
}

impl NmfState {
    /// Draws uniform factors, normalizes them against the global norm of X,
    /// and fills the caches. Factor entries are keyed by global position,
    /// so any process count produces the same global factors.
    pub fn init(p: &NmfProblem, cfg: &NmfConfig) -> Result<NmfState> {
        cfg.validate()?;
        let world = p.grid.world();
        let x_min = dist_min(p.x.min_entry(), world)?;
        if x_min < 0.0 {
            return Err(NttError::Nonnegativity(format!(
                "input matrix has negative entries (min {x_min:.3e})"
            )));
        }
        let x_norm_sq = dist_frob_norm_sq(p.x, world)?;
        if x_norm_sq <= 0.0 {
            return Err(NttError::DegenerateInput(
                "cannot factorize an all-zero matrix".into(),
            ));
        }
        let mut state = NmfState {
            w: Matrix::zeros(0, 0),
            h: Matrix::zeros(0, 0),
            w_m: Matrix::zeros(0, 0),
            h_m: Matrix::zeros(0, 0),
            w_prev: Matrix::zeros(0, 0),
            h_prev: Matrix::zeros(0, 0),
            hht: Matrix::zeros(0, 0),
            hht_norm: 0.0,
            l_w_used: None,
            wtw_norm: None,
            wtw_norm_prev: None,
            obj: 0.5 * x_norm_sq,
            obj_candidate: 0.5 * x_norm_sq,
            t: 1.0,
            x_norm_sq,
            restarts: 0,
        };
        state.draw_factors(p, cfg)?;
        Ok(state)
    }

    fn draw_factors(&mut self, p: &NmfProblem, cfg: &NmfConfig) -> Result<()> {
        let world = p.grid.world();
        let r = cfg.rank;
        let (wb, wo) = (p.grid.w_rows_local(p.m)?, p.grid.w_row_offset(p.m)?);
        let (hb, ho) = (p.grid.h_cols_local(p.n)?, p.grid.h_col_offset(p.n)?);
        let restart = self.restarts;
        let (mut w, mut h) = timed(world, Category::Init, || {
            let wrng = CounterRng::new(cfg.seed, &[TAG_FACTOR_W, restart]);
            let hrng = CounterRng::new(cfg.seed, &[TAG_FACTOR_H, restart]);
            let w = Matrix::from_fn(wb, r, |i, j| wrng.uniform(((wo + i) * r + j) as u64));
            let h = Matrix::from_fn(r, hb, |i, j| hrng.uniform((i * p.n + ho + j) as u64));
            (w, h)
        });
        let w_norm_sq = dist_frob_norm_sq(&w, world)?;
        let h_norm_sq = dist_frob_norm_sq(&h, world)?;
        if w_norm_sq <= 0.0 || h_norm_sq <= 0.0 {
            return Err(NttError::DegenerateInput(
                "drawn factor has zero norm".into(),
            ));
        }
        // Scale so ||W||_F^2 = ||H||_F^2 = ||X||_F, putting the initial
        // product on the scale of X.
        let target = self.x_norm_sq.sqrt();
        let ws = (target / w_norm_sq).sqrt();
        let hs = (target / h_norm_sq).sqrt();
        timed(world, Category::Init, || {
            for v in w.as_mut_slice() {
                *v *= ws;
            }
            for v in h.as_mut_slice() {
                *v *= hs;
            }
        });
        self.w = w.clone();
        self.h = h.clone();
        self.w_m = w.clone();
        self.h_m = h.clone();
        self.w_prev = w;
        self.h_prev = h;
        self.hht = dist_gram_rows(&self.h, world)?;
        self.hht_norm = timed(world, Category::Norm, || spectral_norm_sym(&self.hht))?;
        self.l_w_used = None;
        self.wtw_norm = None;
        self.wtw_norm_prev = None;
        Ok(())
    }

    pub fn objective(&self) -> f64 {
        self.obj
    }

    pub fn candidate_objective(&self) -> f64 {
        self.obj_candidate
    }

    pub fn t_value(&self) -> f64 {
        self.t
    }

    pub fn restarts(&self) -> u64 {
        self.restarts
    }

    pub fn x_norm_sq(&self) -> f64 {
        self.x_norm_sq
    }

    #[cfg(test)]
    pub(crate) fn force_objective(&mut self, v: f64) {
        self.obj = v;
    }

    /// One projected-gradient pass over W then H, leaving the resulting
    /// objective in the candidate slot for the accept/correct decision.
    pub fn bcd_step(&mut self, p: &NmfProblem, cfg: &NmfConfig) -> Result<()> {
        let world = p.grid.world();
        let r = cfg.rank;

        // W block: gradient at the extrapolated point, Lipschitz step,
        // projection onto the nonnegative orthant.
        let xht = dist_xht(p.x, &self.h, p.grid, p.m, p.n)?;
        let l_w = self.hht_norm;
        if l_w > 0.0 {
            let wh_gram = timed(world, Category::Mm, || self.w_m.matmul(&self.hht))?;
            let mut w_new = self.w_m.clone();
            timed(world, Category::Mad, || {
                let g = wh_gram.as_slice();
                let x = xht.as_slice();
                for (k, v) in w_new.as_mut_slice().iter_mut().enumerate() {
                    *v = (*v - (g[k] - x[k]) / l_w).max(0.0);
                }
            });
            self.w = w_new;
        } else {
            log::warn!("H Gram has zero spectral norm; skipping the W update");
        }

        // Columnwise L1 normalization of W with the scale folded into every
        // H-side object, so W*H and the momentum differences are preserved.
        let local_sums = timed(world, Category::Norm, || self.w.col_abs_sums());
        let col_sums = world.all_reduce_sum(&local_sums)?;
        let mut w_scale = vec![1.0; r];
        let mut h_scale = vec![1.0; r];
        for k in 0..r {
            if col_sums[k] > 0.0 {
                w_scale[k] = 1.0 / col_sums[k];
                h_scale[k] = col_sums[k];
            }
        }
        timed(world, Category::Mad, || {
            self.w.scale_cols(&w_scale);
            self.w_prev.scale_cols(&w_scale);
            self.h.scale_rows(&h_scale);
            self.h_m.scale_rows(&h_scale);
            self.h_prev.scale_rows(&h_scale);
        });

        // H block against the updated W.
        let wtw = dist_gram_cols(&self.w, world)?;
        let wtx = dist_wtx(&self.w, p.x, p.grid, p.m, p.n)?;
        let l_h_norm = timed(world, Category::Norm, || spectral_norm_sym(&wtw))?;
        let divisor = if cfg.h_step_sqrt_norm {
            l_h_norm.sqrt()
        } else {
            l_h_norm
        };
        if divisor > 0.0 {
            let gh_gram = timed(world, Category::Mm, || wtw.matmul(&self.h_m))?;
            let mut h_new = self.h_m.clone();
            timed(world, Category::Mad, || {
                let g = gh_gram.as_slice();
                let x = wtx.as_slice();
                for (k, v) in h_new.as_mut_slice().iter_mut().enumerate() {
                    *v = (*v - (g[k] - x[k]) / divisor).max(0.0);
                }
            });
            self.h = h_new;
        } else {
            log::warn!("W Gram has zero spectral norm; skipping the H update");
        }

        // Refresh caches for the objective and the next iteration.
        self.hht = dist_gram_rows(&self.h, world)?;
        self.l_w_used = Some(l_w);
        self.wtw_norm_prev = self.wtw_norm;
        self.wtw_norm = Some(l_h_norm);
        let new_hht_norm = timed(world, Category::Norm, || spectral_norm_sym(&self.hht))?;
        self.obj_candidate = self.objective_from_caches(&wtx, &wtw, world)?;
        self.hht_norm = new_hht_norm;
        Ok(())
    }

    /// 0.5*||X - W*H||^2 via the Gram identity
    /// 0.5*(||X||^2 - 2<W^T X, H> + <W^T W, H H^T>), using only cached small
    /// matrices and one scalar reduce.
    fn objective_from_caches(
        &self,
        wtx: &Matrix,
        wtw: &Matrix,
        world: &dyn Communicator,
    ) -> Result<f64> {
        let cross = dist_dot(wtx, &self.h, world)?;
        let gram_term = timed(world, Category::Norm, || {
            wtw.as_slice()
                .iter()
                .zip(self.hht.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        });
        Ok(0.5 * (self.x_norm_sq - 2.0 * cross + gram_term))
    }

    /// Accepts the pending step with momentum, or re-randomizes the factors
    /// when the objective failed to decrease. The stored objective and the
    /// momentum clock advance only on acceptance.
    pub fn correct_or_extrapolate(&mut self, p: &NmfProblem, cfg: &NmfConfig) -> Result<Branch> {
        let world = p.grid.world();
        if self.obj_candidate >= self.obj {
            self.restarts += 1;
            self.draw_factors(p, cfg)?;
            return Ok(Branch::Corrected);
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * self.t * self.t).sqrt());
        let w_coef = (self.t - 1.0) / t_next;
        let ratio_w = match self.l_w_used {
            Some(prev) if self.hht_norm > 0.0 => cfg.delta * (prev / self.hht_norm).sqrt(),
            _ => cfg.delta,
        };
        let ratio_h = match (self.wtw_norm_prev, self.wtw_norm) {
            (Some(prev), Some(cur)) if cur > 0.0 => cfg.delta * (prev / cur).sqrt(),
            _ => cfg.delta,
        };
        let omega_w = w_coef.min(ratio_w);
        let omega_h = w_coef.min(ratio_h);
        timed(world, Category::Mad, || {
            self.w_m = extrapolate(&self.w, &self.w_prev, omega_w);
            self.h_m = extrapolate(&self.h, &self.h_prev, omega_h);
        });
        self.w_prev = self.w.clone();
        self.h_prev = self.h.clone();
        self.t = t_next;
        self.obj = self.obj_candidate;
        Ok(Branch::Extrapolated)
    }

    /// One multiplicative update of W then H; no momentum, objective updated
    /// unconditionally.
    pub fn mu_step(&mut self, p: &NmfProblem, _cfg: &NmfConfig) -> Result<()> {
        let world = p.grid.world();
        let xht = dist_xht(p.x, &self.h, p.grid, p.m, p.n)?;
        let denom_w = timed(world, Category::Mm, || self.w.matmul(&self.hht))?;
        timed(world, Category::Mad, || {
            let num = xht.as_slice();
            let den = denom_w.as_slice();
            for (k, v) in self.w.as_mut_slice().iter_mut().enumerate() {
                *v *= num[k] / (den[k] + MU_DENOM_FLOOR);
            }
        });
        let wtw = dist_gram_cols(&self.w, world)?;
        let wtx = dist_wtx(&self.w, p.x, p.grid, p.m, p.n)?;
        let denom_h = timed(world, Category::Mm, || wtw.matmul(&self.h))?;
        timed(world, Category::Mad, || {
            let num = wtx.as_slice();
            let den = denom_h.as_slice();
            for (k, v) in self.h.as_mut_slice().iter_mut().enumerate() {
                *v *= num[k] / (den[k] + MU_DENOM_FLOOR);
            }
        });
        self.hht = dist_gram_rows(&self.h, world)?;
        self.hht_norm = timed(world, Category::Norm, || spectral_norm_sym(&self.hht))?;
        self.obj_candidate = self.objective_from_caches(&wtx, &wtw, world)?;
        self.obj = self.obj_candidate;
        Ok(())
    }
}

fn extrapolate(cur: &Matrix, prev: &Matrix, omega: f64) -> Matrix {
    let mut out = cur.clone();
    for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
        *v += omega * (cur.as_slice()[k] - prev.as_slice()[k]);
    }
    out
}

/// Final factors plus the accepted-objective trace.
pub struct NmfRun {
    pub w: Matrix,
    pub h: Matrix,
    pub obj_history: Vec<f64>,
    pub restarts: u64,
    pub iters: usize,
}

/// Runs the configured scheme to completion and returns the best accepted
/// iterate. A correction late in the run re-randomizes the working factors;
/// the snapshot guarantees those random draws are never what the caller
/// receives.
pub fn run_nmf(p: &NmfProblem, cfg: &NmfConfig) -> Result<NmfRun> {
    let mut state = NmfState::init(p, cfg)?;
    let mut history = Vec::with_capacity(cfg.max_iters);
    let mut best = (state.w.clone(), state.h.clone());
    let mut iters = 0;
    for _ in 0..cfg.max_iters {
        iters += 1;
        match cfg.algorithm {
            NmfAlgorithm::Bcd => {
                state.bcd_step(p, cfg)?;
                let branch = state.correct_or_extrapolate(p, cfg)?;
                history.push(state.objective());
                if branch == Branch::Extrapolated {
                    best = (state.w.clone(), state.h.clone());
                }
            }
            NmfAlgorithm::Mu => {
                state.mu_step(p, cfg)?;
                history.push(state.objective());
                best = (state.w.clone(), state.h.clone());
            }
        }
        if let Some(tol) = cfg.tol {
            if history.len() >= 2 {
                let prev = history[history.len() - 2];
                let cur = history[history.len() - 1];
                if (prev - cur).abs() <= tol * prev.abs().max(f64::MIN_POSITIVE) {
                    break;
                }
            }
        }
    }
    Ok(NmfRun {
        w: best.0,
        h: best.1,
        obj_history: history,
        restarts: state.restarts(),
        iters,
    })
}
