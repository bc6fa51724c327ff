//! Two-stage closed-loop estimator and the FDD benchmarks.
//!
//! Stage 1 fits `Q ≈ R ×₁ H_u ×₂ H_d ×₃ S ×₄ Gᵀ` by trilinear alternating
//! least squares. The selection core `R` pairs uplink element `n_u` with
//! downlink element `n_d` in component `r = n_u + n_d·N`, so the model is an
//! N²-component CPD with factors `[H_u … H_u]`, `H_d ⊗ 1ᵀ_N`, `S` and `Gᵀ`.
//! The design matrices below are built from that form; `[R]_(n)` is never
//! materialized. Stage 2 splits `G = G_dᵀ ⋄ G_uᵀ` column by column with
//! rank-one approximations.

mod align;
mod fdd;

pub use align::{
    align_row_groups, align_rows_and_columns, align_scaling, align_tied_pair, cascade, cascade_dl, cascade_ul, nmse,
    unscale_columns, Alignment,
};
pub use fdd::{
    fdd_ls, fdd_ls_dl, fdd_ls_ul, fdd_lskrf, feedback_channel, simulate_fdd_dl, simulate_fdd_ul, FeedbackMode,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::random::complex_gaussian;
use crate::system::CoreStructure;
use crate::tensor::{
    frobenius_sqr, pseudo_inverse_with_rank, rank_one_approx, solve_wide, CMatrix, ComplexTensor, C64,
};

/// Which factor a design matrix solves for; the tensor mode is the
/// zero-based position in `(M, M, K, L)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DesignMode {
    /// Mode 0, factor `H_u`: `N × MKL`.
    UplinkBs,
    /// Mode 1, factor `H_d`: `N × MKL`.
    DownlinkBs,
    /// Mode 2, factor `S`: `N² × M²L`.
    Schedule,
    /// Mode 3, factor `Gᵀ`: `N² × M²K`.
    Coupling,
}

impl DesignMode {
    pub fn tensor_mode(self) -> usize {
        match self {
            DesignMode::UplinkBs => 0,
            DesignMode::DownlinkBs => 1,
            DesignMode::Schedule => 2,
            DesignMode::Coupling => 3,
        }
    }
}

/// Dimensions shared by the factors, checked once.
#[derive(Clone, Copy, Debug)]
struct Dims {
    m: usize,
    n: usize,
    k: usize,
    l: usize,
}

fn ris_size_from_schedule(s: &CMatrix) -> Result<usize> {
    let n2 = s.ncols();
    let n = (n2 as f64).sqrt().round() as usize;
    if n * n != n2 || n == 0 {
        return Err(Error::Shape(format!(
            "combined schedule must have N² columns, got {n2}"
        )));
    }
    Ok(n)
}

fn dims(h_u: &CMatrix, h_d: &CMatrix, g: &CMatrix, s: &CMatrix) -> Result<Dims> {
    let n = ris_size_from_schedule(s)?;
    let m = h_u.nrows();
    if h_u.shape() != (m, n) || h_d.shape() != (m, n) || g.nrows() != n * n {
        return Err(Error::Shape(format!(
            "factor shapes H_u {:?}, H_d {:?}, G {:?} do not match N = {n}",
            h_u.shape(),
            h_d.shape(),
            g.shape()
        )));
    }
    Ok(Dims {
        m,
        n,
        k: s.nrows(),
        l: g.ncols(),
    })
}

/// Right-hand design matrix `D` of the LS subproblem `[Q]_(n) ≈ F·D` for the
/// factor selected by `mode`. The factor being solved for is ignored.
pub fn build_design_matrix(
    mode: DesignMode,
    h_u: &CMatrix,
    h_d: &CMatrix,
    g: &CMatrix,
    s: &CMatrix,
) -> Result<CMatrix> {
    let Dims { m, n, k, l } = dims(h_u, h_d, g, s)?;
    let core = CoreStructure::new(n);
    let out = match mode {
        DesignMode::UplinkBs | DesignMode::DownlinkBs => {
            // D(n_a, m + k·M + l·MK) = Σ_{n_b} H_b(m, n_b)·S(k, r)·G(r, l)
            let (other, uplink) = match mode {
                DesignMode::UplinkBs => (h_d, true),
                _ => (h_u, false),
            };
            let mut d = CMatrix::zeros(n, m * k * l);
            for li in 0..l {
                for ki in 0..k {
                    let col0 = ki * m + li * m * k;
                    for na in 0..n {
                        for nb in 0..n {
                            let r = if uplink {
                                core.component(na, nb)
                            } else {
                                core.component(nb, na)
                            };
                            let sg = s[(ki, r)] * g[(r, li)];
                            for mi in 0..m {
                                d[(na, col0 + mi)] += other[(mi, nb)] * sg;
                            }
                        }
                    }
                }
            }
            d
        }
        DesignMode::Schedule | DesignMode::Coupling => {
            // D(r, m1 + m2·M + j·M²) = H_u(m1, n_u)·H_d(m2, n_d)·W(j, r),
            // W = G (columns over l) or S (rows over k).
            let last = if mode == DesignMode::Schedule { l } else { k };
            let mut d = CMatrix::zeros(n * n, m * m * last);
            for j in 0..last {
                for r in 0..n * n {
                    let (nu, nd) = core.pair(r);
                    let w = if mode == DesignMode::Schedule {
                        g[(r, j)]
                    } else {
                        s[(j, r)]
                    };
                    for m2 in 0..m {
                        let hw = h_d[(m2, nd)] * w;
                        let col0 = m2 * m + j * m * m;
                        for m1 in 0..m {
                            d[(r, col0 + m1)] = h_u[(m1, nu)] * hw;
                        }
                    }
                }
            }
            d
        }
    };
    Ok(out)
}

/// `Sᵀ·S*`, the schedule's share of [`coupling_gram`]; fixed for a whole fit.
pub fn schedule_gram(s: &CMatrix) -> CMatrix {
    s.transpose() * s.conjugate()
}

/// Gram matrix `D·Dᴴ` of the coupling design, assembled from the small Gram
/// matrices of its three factors instead of from `D` itself. `b` is
/// [`schedule_gram`] of the combined schedule.
pub fn coupling_gram(h_u: &CMatrix, h_d: &CMatrix, b: &CMatrix) -> CMatrix {
    let n = h_u.ncols();
    let core = CoreStructure::new(n);
    let a_u = h_u.transpose() * h_u.conjugate();
    let a_d = h_d.transpose() * h_d.conjugate();
    CMatrix::from_fn(n * n, n * n, |r, c| {
        let ((nu, nd), (nu2, nd2)) = (core.pair(r), core.pair(c));
        a_u[(nu, nu2)] * a_d[(nd, nd2)] * b[(r, c)]
    })
}

/// Noiseless model `R ×₁ H_u ×₂ H_d ×₃ S ×₄ Gᵀ`, shape `(M, M, K, L)`.
pub fn reconstruct(h_u: &CMatrix, h_d: &CMatrix, g: &CMatrix, s: &CMatrix) -> Result<ComplexTensor> {
    let Dims { m, k, l, .. } = dims(h_u, h_d, g, s)?;
    let d = build_design_matrix(DesignMode::Coupling, h_u, h_d, g, s)?;
    ComplexTensor::fold(&(g.transpose() * d), 3, &[m, m, k, l])
}

/// Stopping rule and iteration cap for [`tals_fit`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TalsOptions {
    /// Convergence is declared when `|ε_i − ε_{i−1}| ≤ tol` (or `ε_i ≤ tol`).
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for TalsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 1000,
        }
    }
}

/// Final factors and convergence trace of a TALS run.
#[derive(Clone, Debug)]
pub struct TalsState {
    pub h_u: CMatrix,
    pub h_d: CMatrix,
    /// N²×L estimate of `G_dᵀ ⋄ G_uᵀ`.
    pub g: CMatrix,
    pub iterations: usize,
    /// `ε_i = ‖Q − Q̂_i‖²_F` after each iteration.
    pub residuals: Vec<f64>,
    pub converged: bool,
    /// Effective ranks of the `H_u`, `H_d` and `G` design matrices at the last iteration.
    pub design_ranks: [usize; 3],
    /// Set when any design matrix lost row rank during the run.
    pub rank_deficient: bool,
}

impl TalsState {
    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::NAN)
    }
}

/// Stage 1: alternating LS updates of `H_u`, `H_d` and `G` starting from
/// random CN(0,1) `G` and `H_d` (drawn in that order).
pub fn tals_fit<R: Rng + ?Sized>(q: &ComplexTensor, s: &CMatrix, opts: &TalsOptions, rng: &mut R) -> Result<TalsState> {
    let n = ris_size_from_schedule(s)?;
    if q.order() != 4 {
        return Err(Error::Shape(format!("observation must be order 4, got {}", q.order())));
    }
    let (m, l) = (q.shape()[0], q.shape()[3]);
    let g0 = complex_gaussian(n * n, l, 1.0, rng);
    let h_d0 = complex_gaussian(m, n, 1.0, rng);
    tals_fit_from(q, s, h_d0, g0, opts)
}

/// [`tals_fit`] from explicit initial `H_d` and `G`.
pub fn tals_fit_from(
    q: &ComplexTensor,
    s: &CMatrix,
    h_d0: CMatrix,
    g0: CMatrix,
    opts: &TalsOptions,
) -> Result<TalsState> {
    let n = ris_size_from_schedule(s)?;
    let shape = q.shape();
    if shape.len() != 4 || shape[0] != shape[1] || shape[2] != s.nrows() {
        return Err(Error::Shape(format!(
            "observation shape {shape:?} does not match schedule {:?}",
            s.shape()
        )));
    }
    let m = shape[0];
    let q1 = q.unfold(0)?;
    let q2 = q.unfold(1)?;
    let q4 = q.unfold(3)?;
    let s_gram = schedule_gram(s);

    let mut h_u = CMatrix::zeros(m, n);
    let mut h_d = h_d0;
    let mut g = g0;
    dims(&h_u, &h_d, &g, s)?;

    let mut residuals = Vec::new();
    let mut converged = false;
    let mut rank_deficient = false;
    let mut design_ranks = [0; 3];

    for _ in 0..opts.max_iters {
        let d1 = build_design_matrix(DesignMode::UplinkBs, &h_u, &h_d, &g, s)?;
        let p1 = pseudo_inverse_with_rank(&d1);
        h_u = &q1 * p1.matrix;

        let d2 = build_design_matrix(DesignMode::DownlinkBs, &h_u, &h_d, &g, s)?;
        let p2 = pseudo_inverse_with_rank(&d2);
        h_d = &q2 * p2.matrix;

        let d4 = build_design_matrix(DesignMode::Coupling, &h_u, &h_d, &g, s)?;
        let gram = coupling_gram(&h_u, &h_d, &s_gram);
        let (g_t, rank4) = solve_wide(&q4, &d4, &gram);
        let eps = frobenius_sqr(&(&q4 - &g_t * &d4));
        g = g_t.transpose();

        design_ranks = [p1.rank, p2.rank, rank4];
        rank_deficient |= p1.rank < d1.nrows() || p2.rank < d2.nrows() || rank4 < d4.nrows();

        let prev = residuals.last().copied();
        residuals.push(eps);
        if !eps.is_finite() {
            break;
        }
        if eps <= opts.tol || prev.is_some_and(|p: f64| (eps - p).abs() <= opts.tol) {
            converged = true;
            break;
        }
    }

    Ok(TalsState {
        h_u,
        h_d,
        g,
        iterations: residuals.len(),
        residuals,
        converged,
        design_ranks,
        rank_deficient,
    })
}

/// Factors of a column-wise Kronecker product `Θ ≈ A ⋄ B`.
#[derive(Clone, Debug)]
pub struct KhatriRaoFactors {
    pub a: CMatrix,
    pub b: CMatrix,
    /// Columns of `Θ` that were identically zero (their factors are zero).
    pub degenerate: Vec<usize>,
}

/// Split each column `θ_r ≈ a_r ⊗ b_r` by a rank-one approximation of
/// `unvec(θ_r) ≈ b_r a_rᵀ` (shape `rows_b × rows_a`).
pub fn khatri_rao_factorize(theta: &CMatrix, rows_a: usize, rows_b: usize) -> Result<KhatriRaoFactors> {
    if theta.nrows() != rows_a * rows_b {
        return Err(Error::Shape(format!(
            "{} rows cannot split into {rows_a}·{rows_b}",
            theta.nrows()
        )));
    }
    let cols = theta.ncols();
    let mut a = CMatrix::zeros(rows_a, cols);
    let mut b = CMatrix::zeros(rows_b, cols);
    let mut degenerate = Vec::new();
    for r in 0..cols {
        let block = CMatrix::from_column_slice(rows_b, rows_a, theta.column(r).as_slice());
        match rank_one_approx(&block) {
            Ok((u, v)) => {
                b.set_column(r, &u);
                a.set_column(r, &v);
            }
            Err(Error::Degenerate(_)) => degenerate.push(r),
            Err(e) => return Err(e),
        }
    }
    Ok(KhatriRaoFactors { a, b, degenerate })
}

/// Stage 2 output: row-wise UT channels recovered from `G`.
#[derive(Clone, Debug)]
pub struct KrfSplit {
    /// L×N
    pub g_d: CMatrix,
    /// L×N
    pub g_u: CMatrix,
    pub degenerate: Vec<usize>,
}

/// Split `Ĝ ≈ Ĝ_dᵀ ⋄ Ĝ_uᵀ` (N²×L) into `Ĝ_d` and `Ĝ_u` (L×N each).
pub fn krf_split(g: &CMatrix) -> Result<KrfSplit> {
    let n = (g.nrows() as f64).sqrt().round() as usize;
    if n * n != g.nrows() {
        return Err(Error::Shape(format!("G must have N² rows, got {}", g.nrows())));
    }
    let f = khatri_rao_factorize(g, n, n)?;
    Ok(KrfSplit {
        g_d: f.a.transpose(),
        g_u: f.b.transpose(),
        degenerate: f.degenerate,
    })
}

/// Raw (unaligned) estimates returned by the two-stage estimator.
#[derive(Clone, Debug)]
pub struct EstimationResult {
    pub h_d: CMatrix,
    pub h_u: CMatrix,
    pub g_d: CMatrix,
    pub g_u: CMatrix,
    pub g: CMatrix,
    pub iterations: usize,
    pub converged: bool,
    pub residuals: Vec<f64>,
    pub rank_deficient: bool,
    pub krf_degenerate: Vec<usize>,
}

/// TALS followed by KRF.
pub fn estimate_channels<R: Rng + ?Sized>(
    q: &ComplexTensor,
    s: &CMatrix,
    opts: &TalsOptions,
    rng: &mut R,
) -> Result<EstimationResult> {
    let state = tals_fit(q, s, opts, rng)?;
    let split = krf_split(&state.g)?;
    Ok(EstimationResult {
        h_d: state.h_d,
        h_u: state.h_u,
        g_d: split.g_d,
        g_u: split.g_u,
        g: state.g,
        iterations: state.iterations,
        converged: state.converged,
        residuals: state.residuals,
        rank_deficient: state.rank_deficient,
        krf_degenerate: split.degenerate,
    })
}

/// Post-alignment NMSE of every channel and both cascades.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelNmse {
    pub h_d: f64,
    pub g_d: f64,
    pub h_u: f64,
    pub g_u: f64,
    pub cascade_dl: f64,
    pub cascade_ul: f64,
}

impl EstimationResult {
    /// NMSE against ground truth after removing the model's scaling
    /// ambiguities: per-column scalings of `H_d`/`H_u`, the reciprocal
    /// column scalings they induce on `G_d`/`G_u`, one scalar per UT antenna
    /// (row) of `G_d`/`G_u` left by the Khatri-Rao split, and the resulting
    /// per-UT-antenna scalings of the cascades.
    pub fn nmse_against(&self, truth: &crate::system::ChannelSet) -> Result<ChannelNmse> {
        let (m, l) = (truth.h_d.nrows(), truth.g_d.nrows());
        let (h_d, g_d) = align_tied_pair(&self.h_d, &truth.h_d, &self.g_d, &truth.g_d, true)?;
        let (h_u, g_u) = align_tied_pair(&self.h_u, &truth.h_u, &self.g_u, &truth.g_u, true)?;

        // Cascade rows: DL index l + m·L, UL index m + l·M; the residual
        // ambiguity is one scalar per UT antenna l.
        let dl_groups: Vec<usize> = (0..m * l).map(|i| i % l).collect();
        let ul_groups: Vec<usize> = (0..m * l).map(|i| i / m).collect();
        let dl_true = cascade_dl(&truth.h_d, &truth.g_d)?;
        let ul_true = cascade_ul(&truth.h_u, &truth.g_u)?;
        let dl_est = align_row_groups(&cascade_dl(&self.h_d, &self.g_d)?, &dl_true, &dl_groups)?.matrix;
        let ul_est = align_row_groups(&cascade_ul(&self.h_u, &self.g_u)?, &ul_true, &ul_groups)?.matrix;

        Ok(ChannelNmse {
            h_d: nmse(&truth.h_d, &h_d)?,
            g_d: nmse(&truth.g_d, &g_d)?,
            h_u: nmse(&truth.h_u, &h_u)?,
            g_u: nmse(&truth.g_u, &g_u)?,
            cascade_dl: nmse(&dl_true, &dl_est)?,
            cascade_ul: nmse(&ul_true, &ul_est)?,
        })
    }
}

/// `(Λ_d ⊗ Λ_u)⁻¹·G` for diagonal scalings given by their diagonals.
pub fn compensate_coupling(g: &CMatrix, lambda_u: &[C64], lambda_d: &[C64]) -> Result<CMatrix> {
    let n = lambda_u.len();
    if lambda_d.len() != n || g.nrows() != n * n {
        return Err(Error::Shape("scaling lengths do not match G".into()));
    }
    let core = CoreStructure::new(n);
    let mut out = g.clone();
    for r in 0..n * n {
        let (nu, nd) = core.pair(r);
        let inv = C64::new(1.0, 0.0) / (lambda_d[nd] * lambda_u[nu]);
        let mut row = out.row_mut(r);
        row *= inv;
    }
    Ok(out)
}
