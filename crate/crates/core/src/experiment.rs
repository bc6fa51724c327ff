//! Seeded NMSE-versus-SNR campaigns for the closed-loop estimator and the
//! FDD benchmarks, plus their CSV, plot-data and manifest outputs.
//!
//! Every `(snr index, run index)` pair gets its own seed
//! `derive_seed(master_seed, [snr_idx, run_idx])`; channels, noise and the
//! TALS initialization come from separate sub-streams of that seed, and all
//! methods in a run see the same channel realization. Runs execute on a rayon
//! pool and are reduced in index order, so results do not depend on the
//! worker count.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    align_tied_pair, estimate_channels, fdd_ls_dl, fdd_ls_ul, fdd_lskrf, feedback_channel, nmse, simulate_fdd_dl,
    simulate_fdd_ul, FeedbackMode, TalsOptions,
};
use crate::random::{derive_seed, rng_from_seed};
use crate::sim::simulate_closed_loop;
use crate::system::{gen_ut_pilot, ChannelSet, ProtocolMatrices, Snr, SystemConfig};
use crate::tensor::{khatri_rao_cols, CMatrix};

/// Sub-stream ids below a run seed.
mod stream {
    pub const CHANNELS: u64 = 0;
    pub const CLOSED_LOOP_NOISE: u64 = 1;
    pub const TALS_INIT: u64 = 2;
    pub const FDD_DL_NOISE: u64 = 3;
    pub const FDD_UL_NOISE: u64 = 4;
    pub const FEEDBACK: u64 = 5;
}

pub const RESULTS_CSV: &str = "results.csv";
pub const RUNS_CSV: &str = "runs.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const CSV_HEADER: [&str; 8] = [
    "method",
    "feedback",
    "label",
    "snr_db",
    "nmse_mean",
    "runs",
    "iters_mean",
    "nonconv",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    FddLs,
    FddLskrf,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Proposed, Method::FddLs, Method::FddLskrf];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::FddLs => "fdd_ls",
            Method::FddLskrf => "fdd_lskrf",
        }
    }

    /// Labels this method reports. Plain LS only estimates cascades.
    pub fn labels(self) -> &'static [Label] {
        match self {
            Method::FddLs => &[Label::CascadeDl, Label::CascadeUl],
            _ => &Label::ALL,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| format!("unknown method {s:?} (expected proposed, fdd_ls or fdd_lskrf)"))
    }
}

/// What an NMSE value refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    HD,
    GD,
    HU,
    GU,
    CascadeDl,
    CascadeUl,
}

impl Label {
    pub const ALL: [Label; 6] = [
        Label::HD,
        Label::GD,
        Label::HU,
        Label::GU,
        Label::CascadeDl,
        Label::CascadeUl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::HD => "H_d",
            Label::GD => "G_d",
            Label::HU => "H_u",
            Label::GU => "G_u",
            Label::CascadeDl => "cascade_dl",
            Label::CascadeUl => "cascade_ul",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown label {s:?}"))
    }
}

/// A method together with its feedback mode (`None` for the closed loop,
/// which needs no feedback link).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Variant {
    pub method: Method,
    pub feedback: Option<FeedbackMode>,
}

impl Variant {
    pub fn feedback_str(&self) -> &'static str {
        self.feedback.map_or("none", FeedbackMode::as_str)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.feedback {
            None => write!(f, "{}", self.method),
            Some(fb) => write!(f, "{}/{}", self.method, fb.as_str()),
        }
    }
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_feedback() -> Vec<FeedbackMode> {
    vec![FeedbackMode::NoiseFree, FeedbackMode::Awgn]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_true() -> bool {
    true
}

/// One campaign, read from a single JSON document. `snr_db_grid`,
/// `mc_runs` and `master_seed` override the values inside `system`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub system: SystemConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db_grid: Option<Vec<Snr>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_runs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Feedback modes for the benchmark methods.
    #[serde(default = "default_feedback")]
    pub feedback: Vec<FeedbackMode>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Also write one line per (run, method) to `runs.csv`.
    #[serde(default = "default_true")]
    pub dump_runs: bool,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
}

impl ExperimentSpec {
    pub fn new(system: SystemConfig) -> Self {
        Self {
            system,
            snr_db_grid: None,
            mc_runs: None,
            master_seed: None,
            methods: default_methods(),
            feedback: default_feedback(),
            out_dir: default_out_dir(),
            dump_runs: true,
            workers: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn snr_grid(&self) -> &[Snr] {
        self.snr_db_grid.as_deref().unwrap_or(&self.system.snr_db_grid)
    }

    pub fn runs(&self) -> usize {
        self.mc_runs.unwrap_or(self.system.mc_runs)
    }

    pub fn seed(&self) -> u64 {
        self.master_seed.unwrap_or(self.system.master_seed)
    }

    /// The system configuration with every override applied.
    pub fn resolved_system(&self) -> SystemConfig {
        SystemConfig {
            snr_db_grid: self.snr_grid().to_vec(),
            mc_runs: self.runs(),
            master_seed: self.seed(),
            ..self.system.clone()
        }
    }

    /// Requested method/feedback combinations in legend order: methods as
    /// in [`Method::ALL`], then noise-free before AWGN feedback.
    pub fn variants(&self) -> Vec<Variant> {
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        let mut feedback = self.feedback.clone();
        feedback.sort();
        feedback.dedup();
        let mut out = Vec::new();
        for method in methods {
            if method == Method::Proposed {
                out.push(Variant { method, feedback: None });
            } else {
                out.extend(feedback.iter().map(|&fb| Variant {
                    method,
                    feedback: Some(fb),
                }));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_system().validate()?;
        if self.methods.is_empty() {
            return Err(Error::Experiment("no methods requested".into()));
        }
        if self.snr_grid().is_empty() {
            return Err(Error::Experiment("empty SNR grid".into()));
        }
        if let Some(bad) = self
            .snr_grid()
            .iter()
            .find(|s| s.0.is_nan() || s.0 == f64::NEG_INFINITY)
        {
            return Err(Error::Experiment(format!("invalid SNR point {bad}")));
        }
        let benchmarks = self.methods.iter().any(|&m| m != Method::Proposed);
        if benchmarks && self.feedback.is_empty() {
            return Err(Error::Experiment(
                "benchmark methods need at least one feedback mode".into(),
            ));
        }
        if benchmarks && self.system.pilot_len < self.system.ut_antennas {
            return Err(Error::Experiment(format!(
                "the FDD uplink pilot needs T ≥ L (T = {}, L = {})",
                self.system.pilot_len, self.system.ut_antennas
            )));
        }
        Ok(())
    }
}

/// Outcome of one method on one run.
#[derive(Clone, Debug, PartialEq)]
pub enum MethodOutcome {
    Ok {
        /// Indexed like [`Label::ALL`]; `None` where the method has no estimate.
        nmse: [Option<f64>; 6],
        /// TALS iterations (closed loop only).
        iterations: Option<usize>,
        converged: bool,
    },
    Failed(String),
}

/// Everything recorded about one `(snr, run)` realization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub snr_idx: usize,
    pub run_idx: usize,
    pub seed: u64,
    /// Checksum of the channel draw shared by all methods of this run.
    pub channel_checksum: u64,
    /// One entry per variant, in [`ExperimentSpec::variants`] order.
    pub outcomes: Vec<MethodOutcome>,
}

/// One aggregate line of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub feedback: Option<FeedbackMode>,
    pub label: Label,
    pub snr: Snr,
    /// Arithmetic mean of the linear NMSE over successful runs.
    pub nmse_mean: f64,
    /// Successful runs (requested runs minus failures).
    pub runs: usize,
    pub iters_mean: f64,
    /// Runs that hit the TALS iteration cap.
    pub nonconv: usize,
}

impl ResultRow {
    pub fn variant(&self) -> Variant {
        Variant {
            method: self.method,
            feedback: self.feedback,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn find(&self, variant: Variant, label: Label, snr: Snr) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.variant() == variant && r.label == label && r.snr == snr)
    }

    /// Mean NMSE over the grid for one series, in row order.
    pub fn series(&self, variant: Variant, label: Label) -> Vec<(Snr, f64)> {
        self.rows
            .iter()
            .filter(|r| r.variant() == variant && r.label == label)
            .map(|r| (r.snr, r.nmse_mean))
            .collect()
    }
}

/// Per-variant failure tally.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FailureSummary {
    pub variant: String,
    pub failed_runs: usize,
    /// The first few distinct error messages.
    pub messages: Vec<String>,
}

/// A finished campaign.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub spec: ExperimentSpec,
    pub variants: Vec<Variant>,
    pub table: ResultTable,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<FailureSummary>,
    pub wall_time_s: f64,
    pub workers: usize,
}

/// Shared read-only state of a campaign.
struct Context {
    cfg: SystemConfig,
    proto: ProtocolMatrices,
    x_ut: Option<CMatrix>,
    variants: Vec<Variant>,
    opts: TalsOptions,
    master_seed: u64,
}

/// Run the campaign described by `spec`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let started = Instant::now();
    let cfg = spec.resolved_system();
    let variants = spec.variants();
    let needs_fdd = variants.iter().any(|v| v.method != Method::Proposed);
    let ctx = Context {
        proto: ProtocolMatrices::generate(&cfg)?,
        x_ut: if needs_fdd { Some(gen_ut_pilot(&cfg)?) } else { None },
        variants: variants.clone(),
        opts: TalsOptions {
            tol: cfg.tals_tol,
            max_iters: cfg.tals_max_iters,
        },
        master_seed: cfg.master_seed,
        cfg,
    };

    let grid = spec.snr_grid().to_vec();
    let n_runs = spec.runs();
    let tasks: Vec<(usize, usize)> = (0..grid.len()).flat_map(|s| (0..n_runs).map(move |r| (s, r))).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::Experiment(format!("cannot start worker pool: {e}")))?;
    let workers = pool.current_num_threads();
    log::info!(
        "{} SNR points × {} runs, {} variants, {} workers",
        grid.len(),
        n_runs,
        variants.len(),
        workers
    );
    let runs: Vec<RunRecord> = pool.install(|| tasks.par_iter().map(|&(s, r)| run_once(&ctx, grid[s], s, r)).collect());

    let table = aggregate(&variants, &grid, &runs);
    let failures = summarize_failures(&variants, &runs);
    for f in &failures {
        log::warn!(
            "{}: {} failed runs ({})",
            f.variant,
            f.failed_runs,
            f.messages.join("; ")
        );
    }
    Ok(ExperimentOutput {
        spec: spec.clone(),
        variants,
        table,
        runs,
        failures,
        wall_time_s: started.elapsed().as_secs_f64(),
        workers,
    })
}

fn run_once(ctx: &Context, snr: Snr, snr_idx: usize, run_idx: usize) -> RunRecord {
    let seed = derive_seed(ctx.master_seed, &[snr_idx as u64, run_idx as u64]);
    let sub = |id: u64| rng_from_seed(derive_seed(seed, &[id]));
    let ch = ChannelSet::generate(&ctx.cfg, &mut sub(stream::CHANNELS));

    // Both benchmarks share the same FDD pilot observations.
    let fdd = ctx.x_ut.as_ref().map(|x_ut| -> Result<(CMatrix, CMatrix)> {
        let y_dl = simulate_fdd_dl(&ch, &ctx.proto, snr, &mut sub(stream::FDD_DL_NOISE))?;
        let y_ul = simulate_fdd_ul(&ch, x_ut, &ctx.proto.s_u, snr, &mut sub(stream::FDD_UL_NOISE))?;
        Ok((fdd_ls_dl(&y_dl, &ctx.proto.s_d)?, fdd_ls_ul(&y_ul, &ctx.proto.s_u)?))
    });

    let outcomes = ctx
        .variants
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            let result = match (v.method, &fdd) {
                (Method::Proposed, _) => run_proposed(ctx, &ch, snr, &sub),
                (_, Some(Ok(ls))) => {
                    let mut rng = rng_from_seed(derive_seed(seed, &[stream::FEEDBACK, vi as u64]));
                    run_benchmark(ctx, v, &ch, ls, snr, &mut rng)
                }
                (_, Some(Err(e))) => Err(Error::Experiment(format!("FDD training failed: {e}"))),
                (_, None) => Err(Error::Experiment("FDD pilot missing".into())),
            };
            match result {
                Ok(o) => o,
                Err(e) => MethodOutcome::Failed(e.to_string()),
            }
        })
        .collect();

    RunRecord {
        snr_idx,
        run_idx,
        seed,
        channel_checksum: ch.checksum(),
        outcomes,
    }
}

fn finite_or_fail(nmse: [Option<f64>; 6], iterations: Option<usize>, converged: bool) -> Result<MethodOutcome> {
    if nmse.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite NMSE".into()));
    }
    Ok(MethodOutcome::Ok {
        nmse,
        iterations,
        converged,
    })
}

fn run_proposed(
    ctx: &Context,
    ch: &ChannelSet,
    snr: Snr,
    sub: &dyn Fn(u64) -> crate::random::SimRng,
) -> Result<MethodOutcome> {
    let obs = simulate_closed_loop(ch, &ctx.proto, snr, &mut sub(stream::CLOSED_LOOP_NOISE), false)?;
    let est = estimate_channels(&obs.q, &ctx.proto.s, &ctx.opts, &mut sub(stream::TALS_INIT))?;
    let e = est.nmse_against(ch)?;
    finite_or_fail(
        [
            Some(e.h_d),
            Some(e.g_d),
            Some(e.h_u),
            Some(e.g_u),
            Some(e.cascade_dl),
            Some(e.cascade_ul),
        ],
        Some(est.iterations),
        est.converged,
    )
}

/// FDD benchmark for one variant, given the LS cascade estimates at the two
/// receivers. LS forwards its estimate as is; LS-KRF first replaces it by
/// the Khatri-Rao-structured (denoised) cascade. The receiving end of the
/// feedback link reads individual channels off the received cascade.
fn run_benchmark<R: Rng + ?Sized>(
    ctx: &Context,
    v: &Variant,
    ch: &ChannelSet,
    (ls_dl, ls_ul): &(CMatrix, CMatrix),
    snr: Snr,
    rng: &mut R,
) -> Result<MethodOutcome> {
    let (m, l) = (ctx.cfg.bs_antennas, ctx.cfg.ut_antennas);
    let fb = v
        .feedback
        .ok_or_else(|| Error::Experiment(format!("{} needs a feedback mode", v.method)))?;
    let truth_dl = crate::estimators::cascade_dl(&ch.h_d, &ch.g_d)?;
    let truth_ul = crate::estimators::cascade_ul(&ch.h_u, &ch.g_u)?;
    let mut out = [None; 6];
    match v.method {
        Method::FddLs => {
            let rx_dl = feedback_channel(ls_dl, fb, snr, rng);
            let rx_ul = feedback_channel(ls_ul, fb, snr, rng);
            out[Label::CascadeDl.index()] = Some(nmse(&truth_dl, &rx_dl)?);
            out[Label::CascadeUl.index()] = Some(nmse(&truth_ul, &rx_ul)?);
        }
        Method::FddLskrf => {
            let dl = fdd_lskrf(ls_dl, m, l)?;
            let ul = fdd_lskrf(ls_ul, l, m)?;
            let rx_dl = feedback_channel(&khatri_rao_cols(&dl.a, &dl.b)?, fb, snr, rng);
            let rx_ul = feedback_channel(&khatri_rao_cols(&ul.a, &ul.b)?, fb, snr, rng);
            out[Label::CascadeDl.index()] = Some(nmse(&truth_dl, &rx_dl)?);
            out[Label::CascadeUl.index()] = Some(nmse(&truth_ul, &rx_ul)?);
            // DL cascade is H_d ⋄ G_d, UL cascade is G_u ⋄ H_u.
            let dl = fdd_lskrf(&rx_dl, m, l)?;
            let ul = fdd_lskrf(&rx_ul, l, m)?;
            // Each column split leaves only a reciprocal (H, G) column scaling.
            let (h_d, g_d) = align_tied_pair(&dl.a, &ch.h_d, &dl.b, &ch.g_d, false)?;
            let (h_u, g_u) = align_tied_pair(&ul.b, &ch.h_u, &ul.a, &ch.g_u, false)?;
            out[Label::HD.index()] = Some(nmse(&ch.h_d, &h_d)?);
            out[Label::GD.index()] = Some(nmse(&ch.g_d, &g_d)?);
            out[Label::HU.index()] = Some(nmse(&ch.h_u, &h_u)?);
            out[Label::GU.index()] = Some(nmse(&ch.g_u, &g_u)?);
        }
        Method::Proposed => unreachable!("closed loop handled separately"),
    }
    finite_or_fail(out, None, true)
}

/// Means over successful runs, summed in run-index order.
fn aggregate(variants: &[Variant], grid: &[Snr], runs: &[RunRecord]) -> ResultTable {
    let mut rows = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        for &label in v.method.labels() {
            for (si, &snr) in grid.iter().enumerate() {
                let (mut sum, mut count, mut iters, mut nonconv) = (0.0, 0usize, 0usize, 0usize);
                for rec in runs.iter().filter(|r| r.snr_idx == si) {
                    if let MethodOutcome::Ok {
                        nmse,
                        iterations,
                        converged,
                    } = &rec.outcomes[vi]
                    {
                        if let Some(value) = nmse[label.index()] {
                            sum += value;
                            count += 1;
                            iters += iterations.unwrap_or(0);
                            nonconv += usize::from(!converged);
                        }
                    }
                }
                let mean = |x: f64| if count == 0 { f64::NAN } else { x / count as f64 };
                rows.push(ResultRow {
                    method: v.method,
                    feedback: v.feedback,
                    label,
                    snr,
                    nmse_mean: mean(sum),
                    runs: count,
                    iters_mean: mean(iters as f64),
                    nonconv,
                });
            }
        }
    }
    ResultTable { rows }
}

const MAX_FAILURE_MESSAGES: usize = 5;

fn summarize_failures(variants: &[Variant], runs: &[RunRecord]) -> Vec<FailureSummary> {
    let mut out = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        let mut failed = 0;
        let mut messages: Vec<String> = Vec::new();
        for rec in runs {
            if let MethodOutcome::Failed(msg) = &rec.outcomes[vi] {
                failed += 1;
                if messages.len() < MAX_FAILURE_MESSAGES && !messages.contains(msg) {
                    messages.push(msg.clone());
                }
            }
        }
        if failed > 0 {
            out.push(FailureSummary {
                variant: v.to_string(),
                failed_runs: failed,
                messages,
            });
        }
    }
    out
}

/// Full-precision scientific notation (shortest round-trip digits).
fn sci(x: f64) -> String {
    if x.is_infinite() && x > 0.0 {
        "inf".into()
    } else {
        format!("{x:e}")
    }
}

fn io(e: csv::Error) -> Error {
    Error::Io(e.into())
}

/// Write the aggregate table as CSV (header always present, LF endings).
pub fn emit_csv(table: &ResultTable, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(io)?;
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in &table.rows {
        w.write_record([
            r.method.as_str().to_string(),
            r.variant().feedback_str().to_string(),
            r.label.as_str().to_string(),
            sci(r.snr.0),
            sci(r.nmse_mean),
            r.runs.to_string(),
            sci(r.iters_mean),
            r.nonconv.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a table written by [`emit_csv`].
pub fn read_csv(path: &Path) -> Result<ResultTable> {
    let mut rd = csv::Reader::from_path(path).map_err(io)?;
    let bad = |what: &str, v: &str| Error::Experiment(format!("bad {what} {v:?} in {}", path.display()));
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(io)?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let feedback = match field(1) {
            "none" => None,
            s => Some(s.parse().map_err(|_| bad("feedback", s))?),
        };
        let float = |i: usize, what: &str| -> Result<f64> {
            match field(i) {
                "inf" => Ok(f64::INFINITY),
                s => s.parse().map_err(|_| bad(what, s)),
            }
        };
        rows.push(ResultRow {
            method: field(0).parse().map_err(|_| bad("method", field(0)))?,
            feedback,
            label: field(2).parse().map_err(|_| bad("label", field(2)))?,
            snr: Snr(float(3, "snr_db")?),
            nmse_mean: float(4, "nmse_mean")?,
            runs: field(5).parse().map_err(|_| bad("runs", field(5)))?,
            iters_mean: float(6, "iters_mean")?,
            nonconv: field(7).parse().map_err(|_| bad("nonconv", field(7)))?,
        });
    }
    Ok(ResultTable { rows })
}

/// Per-run records: one line per (SNR, run, variant) with the shared
/// channel checksum, so paired comparisons can be audited.
pub fn emit_runs_csv(output: &ExperimentOutput, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(io)?;
    let mut header = vec![
        "snr_db",
        "run",
        "seed",
        "channel_checksum",
        "method",
        "feedback",
        "status",
        "iterations",
        "converged",
    ];
    header.extend(Label::ALL.iter().map(|l| l.as_str()));
    w.write_record(&header).map_err(io)?;
    let grid = output.spec.snr_grid();
    for rec in &output.runs {
        for (v, outcome) in output.variants.iter().zip(&rec.outcomes) {
            let mut line = vec![
                sci(grid[rec.snr_idx].0),
                rec.run_idx.to_string(),
                rec.seed.to_string(),
                format!("{:016x}", rec.channel_checksum),
                v.method.as_str().to_string(),
                v.feedback_str().to_string(),
            ];
            match outcome {
                MethodOutcome::Ok {
                    nmse,
                    iterations,
                    converged,
                } => {
                    line.push("ok".into());
                    line.push(iterations.map_or(String::new(), |i| i.to_string()));
                    line.push(converged.to_string());
                    line.extend(nmse.iter().map(|v| v.map_or(String::new(), sci)));
                }
                MethodOutcome::Failed(msg) => {
                    line.push(format!("failed: {msg}"));
                    line.extend(std::iter::repeat_n(String::new(), 2 + Label::ALL.len()));
                }
            }
            w.write_record(&line).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One plot-data file.
#[derive(Clone, Copy, Debug)]
pub struct Figure {
    pub file: &'static str,
    pub title: &'static str,
    pub labels: &'static [Label],
}

/// Figures in output order. Within a file the series follow the legend
/// order: variants as in [`ExperimentSpec::variants`] (proposed, LS,
/// LS-KRF; noise-free before AWGN feedback), then the labels listed here.
pub const FIGURES: [Figure; 3] = [
    Figure {
        file: "fig2_cascades.dat",
        title: "NMSE of the cascaded channels",
        labels: &[Label::CascadeDl, Label::CascadeUl],
    },
    Figure {
        file: "fig3_downlink.dat",
        title: "NMSE of the downlink channels",
        labels: &[Label::HD, Label::GD],
    },
    Figure {
        file: "fig4_uplink.dat",
        title: "NMSE of the uplink channels",
        labels: &[Label::HU, Label::GU],
    },
];

/// What [`emit_plotdata`] wrote and skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotReport {
    pub written: Vec<PathBuf>,
    /// `(file, reason)` for every figure without data.
    pub skipped: Vec<(String, String)>,
}

/// `10·log10(x)`.
pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Write whitespace-separated NMSE-in-dB files into `dir`: one row per SNR
/// point, first column the SNR, then one column per series; a `#` header
/// names the columns. Figures with no matching series are skipped and
/// reported.
pub fn emit_plotdata(table: &ResultTable, dir: &Path) -> Result<PlotReport> {
    let mut variants: Vec<Variant> = Vec::new();
    let mut grid: Vec<Snr> = Vec::new();
    for r in &table.rows {
        if !variants.contains(&r.variant()) {
            variants.push(r.variant());
        }
        if !grid.contains(&r.snr) {
            grid.push(r.snr);
        }
    }
    variants.sort();

    let mut report = PlotReport::default();
    for fig in FIGURES {
        let series: Vec<(Variant, Label)> = variants
            .iter()
            .flat_map(|&v| fig.labels.iter().map(move |&l| (v, l)))
            .filter(|&(v, l)| table.rows.iter().any(|r| r.variant() == v && r.label == l))
            .collect();
        if series.is_empty() {
            let names: Vec<&str> = fig.labels.iter().map(|l| l.as_str()).collect();
            let reason = format!("no rows with labels {}", names.join(", "));
            log::warn!("skipping {}: {reason}", fig.file);
            report.skipped.push((fig.file.to_string(), reason));
            continue;
        }
        let mut text = format!("# {} (dB) versus SNR (dB)\n# snr_db", fig.title);
        for (v, l) in &series {
            text.push_str(&format!(" {}:{}:{}", v.method, v.feedback_str(), l));
        }
        text.push('\n');
        for &snr in &grid {
            text.push_str(&snr.to_string());
            for &(v, l) in &series {
                let value = table.find(v, l, snr).map_or(f64::NAN, |r| to_db(r.nmse_mean));
                text.push_str(&format!(" {value:.6}"));
            }
            text.push('\n');
        }
        let path = dir.join(fig.file);
        fs::write(&path, text)?;
        report.written.push(path);
    }
    Ok(report)
}

/// Run manifest: config echo, seeds, versions, timing and failures.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub spec: ExperimentSpec,
    pub resolved_system: SystemConfig,
    pub master_seed: u64,
    pub seed_derivation: &'static str,
    pub variants: Vec<String>,
    pub workers: usize,
    pub wall_time_s: f64,
    pub finished_unix_s: u64,
    pub failures: Vec<FailureSummary>,
    pub nmse_aggregation: &'static str,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(output: &ExperimentOutput, outputs: Vec<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            spec: output.spec.clone(),
            resolved_system: output.spec.resolved_system(),
            master_seed: output.spec.seed(),
            seed_derivation: "run seed = splitmix64 chain of (master_seed, snr index, run index); \
                              sub-streams 0 channels, 1 closed-loop noise, 2 TALS init, \
                              3 FDD DL noise, 4 FDD UL noise, (5, variant index) feedback noise; \
                              ChaCha8 generators",
            variants: output.variants.iter().map(|v| v.to_string()).collect(),
            workers: output.workers,
            wall_time_s: output.wall_time_s,
            finished_unix_s: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            failures: output.failures.clone(),
            nmse_aggregation: "arithmetic mean of linear NMSE over successful runs; dB only in plot data",
            outputs,
        }
    }
}

/// Write CSV, per-run CSV (if requested), plot data and the manifest into
/// the spec's output directory. Returns the written paths.
pub fn write_outputs(output: &ExperimentOutput) -> Result<Vec<PathBuf>> {
    let dir = &output.spec.out_dir;
    fs::create_dir_all(dir)?;
    let mut written = vec![dir.join(RESULTS_CSV)];
    emit_csv(&output.table, &written[0])?;
    if output.spec.dump_runs {
        let path = dir.join(RUNS_CSV);
        emit_runs_csv(output, &path)?;
        written.push(path);
    }
    let plots = emit_plotdata(&output.table, dir)?;
    written.extend(plots.written);
    let manifest_path = dir.join(MANIFEST_JSON);
    let names = written
        .iter()
        .chain(std::iter::once(&manifest_path))
        .map(|p| {
            p.file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
        })
        .collect();
    let mut f = fs::File::create(&manifest_path)?;
    serde_json::to_writer_pretty(&mut f, &Manifest::new(output, names))?;
    f.write_all(b"\n")?;
    written.push(manifest_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_spec(runs: usize, grid: Vec<Snr>) -> ExperimentSpec {
        let mut spec = ExperimentSpec::new(SystemConfig::desk_scale());
        spec.mc_runs = Some(runs);
        spec.snr_db_grid = Some(grid);
        spec.master_seed = Some(7);
        spec
    }

    fn row(method: Method, feedback: Option<FeedbackMode>, label: Label, snr: f64, nmse: f64) -> ResultRow {
        ResultRow {
            method,
            feedback,
            label,
            snr: Snr(snr),
            nmse_mean: nmse,
            runs: 3,
            iters_mean: 12.5,
            nonconv: 0,
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let mut spec = desk_spec(2, vec![Snr(10.0), Snr(20.0)]);
        let a = run_experiment(&spec).unwrap();
        spec.workers = 1;
        let b = run_experiment(&spec).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.runs, b.runs);
        for r in &a.table.rows {
            assert!(r.nmse_mean >= 0.0);
            assert_eq!(r.runs, 2);
        }
    }

    #[test]
    fn noiseless_point_recovers_channels() {
        let mut spec = desk_spec(3, vec![Snr::NOISELESS]);
        spec.methods = vec![Method::Proposed];
        let out = run_experiment(&spec).unwrap();
        let v = Variant {
            method: Method::Proposed,
            feedback: None,
        };
        for label in [Label::HD, Label::GD, Label::HU, Label::GU] {
            let r = out.table.find(v, label, Snr::NOISELESS).unwrap();
            assert!(r.nmse_mean <= 1e-6, "{label}: {}", r.nmse_mean);
        }
    }

    #[test]
    fn methods_share_channel_draws() {
        let spec = desk_spec(2, vec![Snr(10.0)]);
        let a = run_experiment(&spec).unwrap();
        let mut only = spec.clone();
        only.methods = vec![Method::FddLs];
        let b = run_experiment(&only).unwrap();
        let sums: Vec<u64> = a.runs.iter().map(|r| r.channel_checksum).collect();
        assert_eq!(sums, b.runs.iter().map(|r| r.channel_checksum).collect::<Vec<_>>());
        assert_ne!(sums[0], sums[1]);
    }

    #[test]
    fn variants_follow_legend_order() {
        let mut spec = ExperimentSpec::new(SystemConfig::desk_scale());
        spec.methods = vec![Method::FddLskrf, Method::Proposed, Method::FddLs];
        spec.feedback = vec![FeedbackMode::Awgn, FeedbackMode::NoiseFree];
        let names: Vec<String> = spec.variants().iter().map(|v| v.to_string()).collect();
        assert_eq!(
            names,
            [
                "proposed",
                "fdd_ls/noise_free",
                "fdd_ls/awgn",
                "fdd_lskrf/noise_free",
                "fdd_lskrf/awgn"
            ]
        );
    }

    #[test]
    fn spec_validation() {
        let mut spec = desk_spec(1, vec![Snr(0.0)]);
        assert!(spec.validate().is_ok());
        spec.feedback.clear();
        assert!(spec.validate().is_err());
        spec.methods = vec![Method::Proposed];
        assert!(spec.validate().is_ok());
        spec.methods.clear();
        assert!(spec.validate().is_err());
        let mut spec = desk_spec(0, vec![Snr(0.0)]);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        spec.mc_runs = Some(1);
        spec.snr_db_grid = Some(vec![]);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_json_defaults_and_overrides() {
        let spec = ExperimentSpec::from_json(
            r#"{"system": {"M": 4, "L": 2, "N": 4, "T": 4, "K": 16, "P": 2},
                "snr_db_grid": [0, 10, "inf"], "mc_runs": 5, "methods": ["proposed", "fdd_ls"]}"#,
        )
        .unwrap();
        assert_eq!(spec.snr_grid(), &[Snr(0.0), Snr(10.0), Snr::NOISELESS]);
        assert_eq!(spec.runs(), 5);
        assert_eq!(spec.feedback, default_feedback());
        assert_eq!(spec.resolved_system().mc_runs, 5);
        assert!(ExperimentSpec::from_json(
            r#"{"system": {"M": 4, "L": 2, "N": 4, "T": 4, "K": 16, "P": 2}, "bogus": 1}"#
        )
        .is_err());
        assert!(ExperimentSpec::from_json(
            r#"{"system": {"M": 4, "L": 2, "N": 4, "T": 4, "K": 16, "P": 2}, "methods": ["tdd"]}"#
        )
        .is_err());
    }

    #[test]
    fn empty_table_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        emit_csv(&ResultTable::default(), &path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            format!("{}\n", CSV_HEADER.join(","))
        );
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let table = ResultTable {
            rows: vec![
                row(Method::Proposed, None, Label::GD, 15.0, 0.1 + 0.2),
                row(
                    Method::FddLs,
                    Some(FeedbackMode::Awgn),
                    Label::CascadeDl,
                    f64::INFINITY,
                    1.234_567_890_123_456_7e-7,
                ),
            ],
        };
        emit_csv(&table, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), table);
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.contains("3.0000000000000004e-1"));
    }

    #[test]
    fn csv_cardinality() {
        let mut rows = Vec::new();
        for method in Method::ALL {
            for label in Label::ALL {
                for i in 0..7 {
                    rows.push(row(method, None, label, 5.0 * i as f64, 0.5));
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        emit_csv(&ResultTable { rows }, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1 + 3 * 7 * 6);
    }

    #[test]
    fn plot_data_in_db_with_skip_notice() {
        let dir = tempfile::tempdir().unwrap();
        let table = ResultTable {
            rows: vec![
                row(Method::FddLs, Some(FeedbackMode::Awgn), Label::CascadeDl, 0.0, 0.1),
                row(Method::Proposed, None, Label::CascadeDl, 0.0, 0.01),
                row(Method::Proposed, None, Label::CascadeUl, 0.0, 1.0),
            ],
        };
        let report = emit_plotdata(&table, dir.path()).unwrap();
        assert_eq!(report.written, vec![dir.path().join("fig2_cascades.dat")]);
        let skipped: Vec<&str> = report.skipped.iter().map(|(f, _)| f.as_str()).collect();
        assert_eq!(skipped, ["fig3_downlink.dat", "fig4_uplink.dat"]);
        let text = fs::read_to_string(&report.written[0]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[1],
            "# snr_db proposed:none:cascade_dl proposed:none:cascade_ul fdd_ls:awgn:cascade_dl"
        );
        let values: Vec<f64> = lines[2].split_whitespace().map(|v| v.parse().unwrap()).collect();
        assert_eq!(values, [0.0, -20.0, 0.0, -10.0]);
    }

    #[test]
    fn db_conversion() {
        assert!((to_db(0.01) + 20.0).abs() < 1e-12);
    }

    #[test]
    fn outputs_land_in_out_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = desk_spec(1, vec![Snr(20.0)]);
        spec.out_dir = dir.path().to_path_buf();
        let out = run_experiment(&spec).unwrap();
        let written = write_outputs(&out).unwrap();
        assert_eq!(written.len(), 6);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_JSON)).unwrap()).unwrap();
        assert_eq!(manifest["master_seed"], 7);
        assert_eq!(manifest["resolved_system"]["mc_runs"], 1);
        let runs = fs::read_to_string(dir.path().join(RUNS_CSV)).unwrap();
        assert_eq!(runs.lines().count(), 1 + 5);
    }
}
