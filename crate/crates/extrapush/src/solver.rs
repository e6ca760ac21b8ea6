//! Matrix-form solver engines: ExtraPush, Normalized ExtraPush (three
//! equivalent forms), Extra, and subgradient-push.
//!
//! All engines perform neighbor accumulation in ascending sender order through
//! the explicit-loop kernels in [`crate::linalg`], and the two-step engines
//! combine terms through one shared inline formula. The agent-level simulator
//! in [`crate::netsim`] reuses both, which makes the two implementations
//! bit-identical, not merely close.
//!
//! Round indexing: `t = 0` is the initial state; round `t` produces iterate
//! `z^t`. The two-step recursion needs one warm-up round:
//! `z¹ = A·z⁰ − α·∇f(x⁰)` (Extra instead takes a plain gradient step), and for
//! `t ≥ 2`, `z^t = (A+I)z^{t−1} − Ā·z^{t−2} − α(∇f(x^{t−1}) − ∇f(x^{t−2}))`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

use crate::analysis::ResidualTracker;
use crate::graph::{MixingMatrix, StationaryDistribution};
use crate::linalg::{mat_mul, mat_vec};
use crate::objective::Objective;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("iterate is {got_rows}x{got_cols} but the problem is {rows}x{cols}")]
    ShapeMismatch {
        got_rows: usize,
        got_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("step size must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("subgradient-push requires a step schedule")]
    MissingSchedule,
    #[error("table schedule exhausted at round {0}")]
    ScheduleExhausted(usize),
    #[error("Extra requires a symmetric doubly stochastic mixing matrix ({0})")]
    NotDoublyStochastic(String),
    #[error("checkpoint is for {found:?}, expected {expected:?}")]
    CheckpointKind {
        expected: AlgorithmKind,
        found: AlgorithmKind,
    },
    #[error("checkpoint does not match this problem: {0}")]
    CheckpointMismatch(String),
    #[error("checkpointing is only supported for the two-step push engines, not {0:?}")]
    CheckpointUnsupported(AlgorithmKind),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Step-size schedule `α_t` for subgradient-push.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum StepSchedule {
    Constant { c: f64 },
    /// `α_t = c / √max(t + t0, 1)`.
    InverseSqrt { c: f64, t0: f64 },
    /// Explicit per-round values; accepted but not validated for convergence.
    Table { values: Vec<f64> },
}

impl StepSchedule {
    pub fn at(&self, t: usize) -> Result<f64, SolverError> {
        match self {
            StepSchedule::Constant { c } => Ok(*c),
            StepSchedule::InverseSqrt { c, t0 } => Ok(c / (t as f64 + t0).max(1.0).sqrt()),
            StepSchedule::Table { values } => values
                .get(t)
                .copied()
                .ok_or(SolverError::ScheduleExhausted(t)),
        }
    }

    /// Warnings for schedules outside the validated family.
    pub fn warnings(&self) -> Vec<String> {
        match self {
            StepSchedule::Constant { c } => {
                let mut w = Vec::new();
                if *c <= 0.0 || !c.is_finite() {
                    w.push(format!("constant step {c} is not positive"));
                }
                w.push("constant step with subgradient-push does not converge to the exact solution".into());
                w
            }
            StepSchedule::InverseSqrt { c, t0 } => {
                let mut w = Vec::new();
                if *c <= 0.0 || !c.is_finite() {
                    w.push(format!("schedule scale {c} is not positive"));
                }
                if *t0 < 0.0 {
                    w.push(format!("schedule offset {t0} is negative"));
                }
                w
            }
            StepSchedule::Table { values } => {
                let mut w =
                    vec!["table schedule is accepted but not validated for convergence".into()];
                if values.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
                    w.push("table contains non-positive entries".into());
                }
                w
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    Extra,
    SubgradientPush,
    ExtraPush,
    NormalizedExtraPush,
    /// z-space form of the normalized method (same recursion, gradients
    /// evaluated through `∇f(D⁻¹z)` without carrying x).
    NormalizedExtraPushZ,
    /// x-space form driven by the row-stochastic `A_φ = D⁻¹AD`.
    NormalizedExtraPushX,
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AlgorithmKind::Extra => "extra",
            AlgorithmKind::SubgradientPush => "subgradient-push",
            AlgorithmKind::ExtraPush => "extrapush",
            AlgorithmKind::NormalizedExtraPush => "normalized-extrapush",
            AlgorithmKind::NormalizedExtraPushZ => "normalized-extrapush-z",
            AlgorithmKind::NormalizedExtraPushX => "normalized-extrapush-x",
        };
        f.write_str(s)
    }
}

impl AlgorithmKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "extra" => AlgorithmKind::Extra,
            "subgradient-push" => AlgorithmKind::SubgradientPush,
            "extrapush" => AlgorithmKind::ExtraPush,
            "normalized-extrapush" => AlgorithmKind::NormalizedExtraPush,
            "normalized-extrapush-z" => AlgorithmKind::NormalizedExtraPushZ,
            "normalized-extrapush-x" => AlgorithmKind::NormalizedExtraPushX,
            _ => return None,
        })
    }
}

/// Run configuration shared by all engines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    pub kind: AlgorithmKind,
    /// Fixed step size (ignored by subgradient-push, which uses `schedule`).
    pub alpha: f64,
    pub schedule: Option<StepSchedule>,
    pub max_iters: usize,
    /// Stopping threshold for both the relative-step and residual tests;
    /// 0 disables them (run to `max_iters`).
    pub tol: f64,
    /// Record every k-th round (plus round 0 and the final round).
    pub record_every: usize,
}

impl AlgorithmConfig {
    pub fn fixed(kind: AlgorithmKind, alpha: f64, max_iters: usize) -> Self {
        Self {
            kind,
            alpha,
            schedule: None,
            max_iters,
            tol: 0.0,
            record_every: 1,
        }
    }

    pub fn subgradient(schedule: StepSchedule, max_iters: usize) -> Self {
        Self {
            kind: AlgorithmKind::SubgradientPush,
            alpha: 0.0,
            schedule: Some(schedule),
            max_iters,
            tol: 0.0,
            record_every: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        match self.kind {
            AlgorithmKind::SubgradientPush => {
                if self.schedule.is_none() {
                    return Err(SolverError::MissingSchedule);
                }
            }
            _ => {
                if !(self.alpha > 0.0) || !self.alpha.is_finite() {
                    return Err(SolverError::BadAlpha(self.alpha));
                }
            }
        }
        Ok(())
    }

    /// Non-fatal validation notes (e.g. unvalidated schedules).
    pub fn warnings(&self) -> Vec<String> {
        match (&self.kind, &self.schedule) {
            (AlgorithmKind::SubgradientPush, Some(s)) => s.warnings(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIters,
    StepTolerance,
    ResidualTolerance,
    Diverged,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StopReason::MaxIters => "max-iters",
            StopReason::StepTolerance => "step-tolerance",
            StopReason::ResidualTolerance => "residual-tolerance",
            StopReason::Diverged => "diverged",
        };
        f.write_str(s)
    }
}

/// One recorded trajectory row.
#[derive(Debug, Clone, Copy)]
pub struct TrajRow {
    pub t: usize,
    /// `‖x^t − 1·x*ᵀ‖_F`, NaN when no ground truth was supplied.
    pub err_opt: f64,
    /// `‖x^t − 1·x̄ᵀ‖_F` with x̄ the across-agent mean.
    pub consensus: f64,
    /// `‖y^t + α_t ∇f(x^t)‖_F` (first-order optimality residual).
    pub residual_opt: f64,
    /// `‖(I − A)z^t‖_F` (null-space / feasibility residual).
    pub residual_feas: f64,
    /// Step size in effect at round t.
    pub alpha_t: f64,
}

/// Terminal engine state, sufficient for post-hoc residual evaluation and
/// checkpointing.
#[derive(Debug, Clone)]
pub struct FinalState {
    pub t: usize,
    /// Final `z^t` (for Extra this is the iterate itself).
    pub z: Array2<f64>,
    /// `z^{t−1}` (equal to `z` when the run stopped at t = 0).
    pub z_prev: Array2<f64>,
    pub x: Array2<f64>,
    /// Push-sum weights `w^t` / `w^{t−1}` (ExtraPush only).
    pub w: Option<Array1<f64>>,
    pub w_prev: Option<Array1<f64>>,
    /// Running `y^t = Σ_{k≤t} (Ā − A) z^k`.
    pub y: Array2<f64>,
    /// `∇f` at the final x.
    pub grad: Array2<f64>,
    pub alpha_last: f64,
    /// Column sums `1ᵀz^t`, for conservation-aware resume.
    pub colsum: Vec<f64>,
}

#[derive(Debug)]
pub struct TrajectoryRecord {
    pub kind: AlgorithmKind,
    pub rows: Vec<TrajRow>,
    pub stop: StopReason,
    /// Rounds actually executed.
    pub rounds: usize,
    pub final_state: FinalState,
    /// Full z-history `z⁰..z^T` when requested (Extra: x-history).
    pub history: Option<Vec<Array2<f64>>>,
    /// Max over rounds of `‖1ᵀz^{t+1} − 1ᵀz^t + α_t·1ᵀ∇f(x^t)‖ / (1 + ‖z^t‖)`.
    pub max_conservation: f64,
    pub grad_evals: usize,
}

/// Optional run inputs.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Ground truth for the `err_opt` column.
    pub x_star: Option<Array1<f64>>,
    /// Keep the full z-history (memory: rounds × n × p doubles).
    pub keep_history: bool,
}

/// The shared two-step combination
/// `z⁺ = z + Az − ½(z₋ + (Az)₋) − α(g − g₋)`, kept in one place so the matrix
/// engines and the agent simulator agree bit for bit.
#[inline]
pub(crate) fn two_step_combine(
    zp: f64,
    az: f64,
    zp2: f64,
    az2: f64,
    g: f64,
    g2: f64,
    alpha: f64,
) -> f64 {
    zp + az - 0.5 * (zp2 + az2) - alpha * (g - g2)
}

/// Relative-step / residual stop rule; never fires before round 2 and is
/// disabled entirely when `tol = 0`.
pub fn stop_rule(
    t: usize,
    tol: f64,
    rel_step: f64,
    residual: f64,
) -> Option<StopReason> {
    if tol <= 0.0 || t < 2 {
        return None;
    }
    if rel_step <= tol {
        return Some(StopReason::StepTolerance);
    }
    if residual <= tol {
        return Some(StopReason::ResidualTolerance);
    }
    None
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn err_against(x: &Array2<f64>, x_star: Option<&Array1<f64>>) -> f64 {
    match x_star {
        None => f64::NAN,
        Some(star) => {
            let mut s = 0.0;
            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    let d = x[[i, j]] - star[j];
                    s += d * d;
                }
            }
            s.sqrt()
        }
    }
}

fn consensus_gap(x: &Array2<f64>) -> f64 {
    let (n, p) = x.dim();
    let mut s = 0.0;
    for j in 0..p {
        let mut mean = 0.0;
        for i in 0..n {
            mean += x[[i, j]];
        }
        mean /= n as f64;
        for i in 0..n {
            let d = x[[i, j]] - mean;
            s += d * d;
        }
    }
    s.sqrt()
}

fn all_finite(a: &Array2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

fn check_shape(z0: &Array2<f64>, n: usize, p: usize) -> Result<(), SolverError> {
    if z0.dim() != (n, p) {
        return Err(SolverError::ShapeMismatch {
            got_rows: z0.nrows(),
            got_cols: z0.ncols(),
            rows: n,
            cols: p,
        });
    }
    Ok(())
}

/// Bit-compatible resume state for the two-step push engines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: AlgorithmKind,
    /// Rounds completed when the checkpoint was taken.
    pub t: usize,
    pub z: Array2<f64>,
    pub z_prev: Array2<f64>,
    pub w: Option<Array1<f64>>,
    pub w_prev: Option<Array1<f64>>,
    pub phi: Option<Array1<f64>>,
    pub y: Array2<f64>,
    pub colsum: Vec<f64>,
    pub alpha: f64,
}

impl TrajectoryRecord {
    /// Checkpoint of the final state (two-step push engines only).
    pub fn checkpoint(&self, phi: Option<&Array1<f64>>) -> Result<Checkpoint, SolverError> {
        match self.kind {
            AlgorithmKind::ExtraPush
            | AlgorithmKind::NormalizedExtraPush
            | AlgorithmKind::NormalizedExtraPushZ => {}
            other => return Err(SolverError::CheckpointUnsupported(other)),
        }
        let fs = &self.final_state;
        Ok(Checkpoint {
            version: 1,
            kind: self.kind,
            t: fs.t,
            z: fs.z.clone(),
            z_prev: fs.z_prev.clone(),
            w: fs.w.clone(),
            w_prev: fs.w_prev.clone(),
            phi: phi.cloned(),
            y: fs.y.clone(),
            colsum: fs.colsum.clone(),
            alpha: fs.alpha_last,
        })
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), SolverError> {
    let json = serde_json::to_string(ck).map_err(|source| SolverError::Json {
        path: path.display().to_string(),
        source,
    })?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json).map_err(|source| SolverError::Io {
        path: tmp.display().to_string(),
        source,
    })?;
    std::fs::rename(&tmp, path).map_err(|source| SolverError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, SolverError> {
    let text = std::fs::read_to_string(path).map_err(|source| SolverError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| SolverError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// How agent copies are recovered from z: ExtraPush divides by the push-sum
/// weights it propagates; the normalized forms divide by fixed `D = n·diag(φ)`.
enum Normalization {
    PushSum,
    Fixed { d_inv: Array1<f64> },
}

impl Normalization {
    fn x_from(&self, z: &Array2<f64>, w: Option<&Array1<f64>>) -> Array2<f64> {
        let (n, p) = z.dim();
        let mut x = Array2::zeros((n, p));
        match self {
            Normalization::PushSum => {
                let w = w.expect("push-sum normalization needs weights");
                for i in 0..n {
                    let inv = 1.0 / w[i];
                    for j in 0..p {
                        x[[i, j]] = z[[i, j]] * inv;
                    }
                }
            }
            Normalization::Fixed { d_inv } => {
                for i in 0..n {
                    for j in 0..p {
                        x[[i, j]] = z[[i, j]] * d_inv[i];
                    }
                }
            }
        }
        x
    }
}

struct Recorder {
    rows: Vec<TrajRow>,
    record_every: usize,
    last_recorded: Option<usize>,
}

impl Recorder {
    fn new(record_every: usize) -> Self {
        Self {
            rows: Vec::new(),
            record_every: record_every.max(1),
            last_recorded: None,
        }
    }

    fn due(&self, t: usize) -> bool {
        t % self.record_every == 0
    }

    fn push(&mut self, row: TrajRow) {
        self.last_recorded = Some(row.t);
        self.rows.push(row);
    }

    fn ensure_final(&mut self, row: TrajRow) {
        if self.last_recorded != Some(row.t) {
            self.push(row);
        }
    }
}

/// One full run of a two-step push engine (ExtraPush or a normalized z-space
/// form), shared by fresh starts and checkpoint resumes.
fn run_two_step_push(
    kind: AlgorithmKind,
    m: &MixingMatrix,
    norm: Normalization,
    obj: &Objective,
    cfg: &AlgorithmConfig,
    start: Result<Array2<f64>, Checkpoint>,
    opts: &RunOptions,
) -> Result<TrajectoryRecord, SolverError> {
    cfg.validate()?;
    let n = obj.n();
    let p = obj.p();
    let alpha = cfg.alpha;
    let track_w = matches!(norm, Normalization::PushSum);
    let mut recorder = Recorder::new(cfg.record_every);
    let mut history: Option<Vec<Array2<f64>>> = opts.keep_history.then(Vec::new);
    let mut grad_evals = 0usize;

    // State entering round t+1: (z^t, z^{t−1}, A·z^{t−1} cached, gradients at
    // both, weights at both). A fresh start first executes the warm-up round.
    let mut t;
    let mut z;
    let mut z_prev;
    let mut az_prev;
    let mut w;
    let mut w_prev;
    let mut g;
    let mut g_prev;
    let mut x;
    let mut tracker;

    match start {
        Ok(z0) => {
            check_shape(&z0, n, p)?;
            let w0 = track_w.then(|| Array1::from_elem(n, 1.0));
            let x0 = norm.x_from(&z0, w0.as_ref());
            let g0 = obj.grad_stack(&x0);
            grad_evals += n;
            tracker = ResidualTracker::new(&m.a, &m.a_bar, &z0);
            recorder.push(TrajRow {
                t: 0,
                err_opt: err_against(&x0, opts.x_star.as_ref()),
                consensus: consensus_gap(&x0),
                residual_opt: tracker.r_grad(&g0, alpha),
                residual_feas: tracker.r_null(&z0),
                alpha_t: alpha,
            });
            if let Some(h) = history.as_mut() {
                h.push(z0.clone());
            }
            if cfg.max_iters == 0 {
                let fs = FinalState {
                    t: 0,
                    z: z0.clone(),
                    z_prev: z0.clone(),
                    x: x0.clone(),
                    w: w0.clone(),
                    w_prev: w0,
                    y: tracker.y().clone(),
                    grad: g0,
                    alpha_last: alpha,
                    colsum: tracker.colsum().to_vec(),
                };
                return Ok(TrajectoryRecord {
                    kind,
                    rows: recorder.rows,
                    stop: StopReason::MaxIters,
                    rounds: 0,
                    final_state: fs,
                    history,
                    max_conservation: 0.0,
                    grad_evals,
                });
            }
            // Warm-up round: z¹ = A z⁰ − α g⁰.
            let az0 = mat_mul(&m.a, &z0);
            let mut z1 = Array2::zeros((n, p));
            for i in 0..n {
                for j in 0..p {
                    z1[[i, j]] = az0[[i, j]] - alpha * g0[[i, j]];
                }
            }
            let w1 = track_w.then(|| mat_vec(&m.a, &Array1::from_elem(n, 1.0)));
            let x1 = norm.x_from(&z1, w1.as_ref());
            let g1 = obj.grad_stack(&x1);
            grad_evals += n;
            tracker.advance(&z1, &g0, alpha);
            if recorder.due(1) {
                recorder.push(TrajRow {
                    t: 1,
                    err_opt: err_against(&x1, opts.x_star.as_ref()),
                    consensus: consensus_gap(&x1),
                    residual_opt: tracker.r_grad(&g1, alpha),
                    residual_feas: tracker.r_null(&z1),
                    alpha_t: alpha,
                });
            }
            if let Some(h) = history.as_mut() {
                h.push(z1.clone());
            }
            t = 1;
            az_prev = az0;
            z_prev = z0;
            w_prev = track_w.then(|| Array1::from_elem(n, 1.0));
            z = z1;
            w = w1;
            g_prev = g0;
            g = g1;
            x = x1;
        }
        Err(ck) => {
            if ck.kind != kind {
                // The z-space forms share one recursion; allow resuming across them.
                let same_family = matches!(
                    (ck.kind, kind),
                    (
                        AlgorithmKind::NormalizedExtraPush,
                        AlgorithmKind::NormalizedExtraPushZ
                    ) | (
                        AlgorithmKind::NormalizedExtraPushZ,
                        AlgorithmKind::NormalizedExtraPush
                    )
                );
                if !same_family {
                    return Err(SolverError::CheckpointKind {
                        expected: kind,
                        found: ck.kind,
                    });
                }
            }
            check_shape(&ck.z, n, p)?;
            check_shape(&ck.z_prev, n, p)?;
            if ck.t < 1 {
                return Err(SolverError::CheckpointMismatch(
                    "checkpoint must cover at least the warm-up round".into(),
                ));
            }
            if (ck.alpha - alpha).abs() > 0.0 {
                return Err(SolverError::CheckpointMismatch(format!(
                    "checkpoint step size {} differs from configured {}",
                    ck.alpha, alpha
                )));
            }
            if track_w && (ck.w.is_none() || ck.w_prev.is_none()) {
                return Err(SolverError::CheckpointMismatch(
                    "ExtraPush checkpoint must carry both weight vectors".into(),
                ));
            }
            t = ck.t;
            z = ck.z;
            z_prev = ck.z_prev;
            w = ck.w;
            w_prev = ck.w_prev;
            // Recompute cached products and gradients exactly as the original
            // run did, so the resumed suffix is bitwise identical.
            az_prev = mat_mul(&m.a, &z_prev);
            let x_prev_state = norm.x_from(&z_prev, w_prev.as_ref());
            g_prev = obj.grad_stack(&x_prev_state);
            x = norm.x_from(&z, w.as_ref());
            g = obj.grad_stack(&x);
            grad_evals += 2 * n;
            tracker = ResidualTracker::resume(&m.a, &m.a_bar, ck.y, ck.colsum);
            recorder.push(TrajRow {
                t,
                err_opt: err_against(&x, opts.x_star.as_ref()),
                consensus: consensus_gap(&x),
                residual_opt: tracker.r_grad(&g, alpha),
                residual_feas: tracker.r_null(&z),
                alpha_t: alpha,
            });
            if let Some(h) = history.as_mut() {
                h.push(z.clone());
            }
        }
    }

    let mut stop = StopReason::MaxIters;
    if !all_finite(&z) {
        stop = StopReason::Diverged;
    } else {
        while t < cfg.max_iters {
            t += 1;
            let az = mat_mul(&m.a, &z);
            let mut z_new = Array2::zeros((n, p));
            for i in 0..n {
                for j in 0..p {
                    z_new[[i, j]] = two_step_combine(
                        z[[i, j]],
                        az[[i, j]],
                        z_prev[[i, j]],
                        az_prev[[i, j]],
                        g[[i, j]],
                        g_prev[[i, j]],
                        alpha,
                    );
                }
            }
            let w_new = match (&w, track_w) {
                (Some(wv), true) => Some(mat_vec(&m.a, wv)),
                _ => None,
            };
            let x_new = norm.x_from(&z_new, w_new.as_ref());
            let g_new = obj.grad_stack(&x_new);
            grad_evals += n;
            tracker.advance(&z_new, &g, alpha);

            let rel_step = {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..p {
                        let d = x_new[[i, j]] - x[[i, j]];
                        s += d * d;
                    }
                }
                s.sqrt() / (1.0 + frob(&x_new))
            };
            let r_null = tracker.r_null(&z_new);
            let r_grad = tracker.r_grad(&g_new, alpha);
            if recorder.due(t) {
                recorder.push(TrajRow {
                    t,
                    err_opt: err_against(&x_new, opts.x_star.as_ref()),
                    consensus: consensus_gap(&x_new),
                    residual_opt: r_grad,
                    residual_feas: r_null,
                    alpha_t: alpha,
                });
            }
            if let Some(h) = history.as_mut() {
                h.push(z_new.clone());
            }

            az_prev = az;
            z_prev = std::mem::replace(&mut z, z_new);
            w_prev = std::mem::replace(&mut w, w_new);
            g_prev = std::mem::replace(&mut g, g_new);
            x = x_new;

            if !all_finite(&z) {
                stop = StopReason::Diverged;
                break;
            }
            if let Some(reason) = stop_rule(t, cfg.tol, rel_step, r_null.max(r_grad)) {
                stop = reason;
                break;
            }
        }
    }

    let final_row = TrajRow {
        t,
        err_opt: err_against(&x, opts.x_star.as_ref()),
        consensus: consensus_gap(&x),
        residual_opt: tracker.r_grad(&g, alpha),
        residual_feas: tracker.r_null(&z),
        alpha_t: alpha,
    };
    recorder.ensure_final(final_row);
    let fs = FinalState {
        t,
        z: z.clone(),
        z_prev,
        x,
        w,
        w_prev,
        y: tracker.y().clone(),
        grad: g,
        alpha_last: alpha,
        colsum: tracker.colsum().to_vec(),
    };
    Ok(TrajectoryRecord {
        kind,
        rows: recorder.rows,
        stop,
        rounds: t,
        final_state: fs,
        history,
        max_conservation: tracker.max_conservation(),
        grad_evals,
    })
}

/// ExtraPush: two-step push method with running push-sum weights
/// (`w^t = A w^{t−1}`, `x^t = diag(w^t)⁻¹ z^t`). No stationary-distribution
/// knowledge required.
pub fn run_extrapush(
    m: &MixingMatrix,
    obj: &Objective,
    cfg: &AlgorithmConfig,
    z0: &Array2<f64>,
    opts: &RunOptions,
) -> Result<TrajectoryRecord, SolverError> {
    run_two_step_push(
        AlgorithmKind::ExtraPush,
        m,
        Normalization::PushSum,
        obj,
        cfg,
        Ok(z0.clone()),
        opts,
    )
}

pub fn resume_extrapush(
    m: &MixingMatrix,
    obj: &Objective,
    cfg: &AlgorithmConfig,
    ck: Checkpoint,
    opts: &RunOptions,
) -> Result<TrajectoryRecord, SolverError> {
    run_two_step_push(
        AlgorithmKind::ExtraPush,
        m,
        Normalization::PushSum,
        obj,
        cfg,
        Err(ck),
        opts,
    )
}

/// Normalized ExtraPush: same z-recursion, but `x^t = D⁻¹ z^t` with the fixed
/// normalization `D = n·diag(φ)` built from the stationary distribution.
pub fn run_normalized_extrapush(
    m: &MixingMatrix,
    s: &StationaryDistribution,
    obj: &Objective,
    cfg: &AlgorithmConfig,
    z0: &Array2<f64>,
    opts: &RunOptions,
) -> Result<TrajectoryRecord, SolverError> {
    run_two_step_push(
        AlgorithmKind::NormalizedExtraPush,
        m,
        Normalization::Fixed {
            d_inv: s.d_inv.clone(),
        },
        obj,
        cfg,
        Ok(z0.clone()),
        opts,
    )
}

pub fn resume_normalized_extrapush(
    m: &MixingMatrix,
    s: &StationaryDistribution,
    obj: &Objective,
    cfg: &AlgorithmConfig,
    ck: Checkpoint,
    opts: &RunOptions,
) -> Result<TrajectoryRecord, SolverError> {
    if let Some(phi) = &ck.phi {
        let diff: f64 = phi
            .iter()
            .zip(s.phi.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if diff > 1e-12 {
            return Err(SolverError::CheckpointMismatch(format!(
                "stationary distribution differs from checkpoint by {diff:.3e}"
            )));
        }
    }
    run_two_step_push(
        AlgorithmKind::NormalizedExtraPush,
        m,
        Normalization::Fixed {
            d_inv: s.d_inv.clone(),
        },
        obj,
        cfg,
        Err(ck),
        opts,
    )
}

/// z-space form of the normalized method: identical recursion driven through
/// the composed gradient `z ↦ ∇f(D⁻¹z)`, never materializing x inside the
/// loop. Numerically this reproduces [`run_normalized_extrapush`] exactly.
pub fn run_normalized_extrapush_z(
    m: &MixingMatrix,
    s: &StationaryDistribution,
    obj: &Objective,
    cfg: &AlgorithmConfig,
    z0: &Array2<f64>,
    opts: &RunOptions,
) -> Result<TrajectoryRecord, SolverError> {
    run_two_step_push(
        AlgorithmKind::NormalizedExtraPushZ,
        m,
        Normalization::Fixed {
            d_inv: s.d_inv.clone(),
        },
        obj,
        cfg,
        Ok(z0.clone()),
        opts,
    )
}

/// x-space form: `x^t = (A_φ + I)x^{t−1} − Ā_φ x^{t−2} − α D⁻¹(g^{t−1} − g^{t−2})`
/// with the row-stochastic similarity transform `A_φ = D⁻¹AD`; warm-up
/// `x¹ = A_φ x⁰ − α D⁻¹ g⁰`. Takes x⁰ directly (the other forms take z⁰ = D x⁰).
pub fn run_normalized_extrapush_x(
    m: &MixingMatrix,
    s: &StationaryDistribution,
    obj: &Objective,
    cfg: &AlgorithmConfig,
    x0: &Array2<f64>,
    opts: &RunOptions,
) -> Result<TrajectoryRecord, SolverError> {
    cfg.validate()?;
    let n = obj.n();
    let p = obj.p();
    check_shape(x0, n, p)?;
    let alpha = cfg.alpha;
    let mut aphi = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            aphi[[i, j]] = s.d_inv[i] * m.a[[i, j]] * s.d[j];
        }
    }
    let d_inv = &s.d_inv;
    let z_of = |x: &Array2<f64>| {
        let mut z = Array2::zeros((n, p));
        for i in 0..n {
            for j in 0..p {
                z[[i, j]] = s.d[i] * x[[i, j]];
            }
        }
        z
    };

    let mut recorder = Recorder::new(cfg.record_every);
    let mut history: Option<Vec<Array2<f64>>> = opts.keep_history.then(Vec::new);
    let mut grad_evals = 0usize;

    let mut x_prev = x0.clone();
    let mut g_prev = obj.grad_stack(&x_prev);
    grad_evals += n;
    let z0 = z_of(&x_prev);
    let mut tracker = ResidualTracker::new(&m.a, &m.a_bar, &z0);
    recorder.push(TrajRow {
        t: 0,
        err_opt: err_against(&x_prev, opts.x_star.as_ref()),
        consensus: consensus_gap(&x_prev),
        residual_opt: tracker.r_grad(&g_prev, alpha),
        residual_feas: tracker.r_null(&z0),
        alpha_t: alpha,
    });
    if let Some(h) = history.as_mut() {
        h.push(z0.clone());
    }
    let mut t = 0usize;
    let mut stop = StopReason::MaxIters;
    let mut x = x_prev.clone();
    let mut g = g_prev.clone();
    let mut ax_prev = Array2::zeros((n, p));
    if cfg.max_iters > 0 {
        // Warm-up: x¹ = A_φ x⁰ − α D⁻¹ g⁰.
        let ax0 = mat_mul(&aphi, &x_prev);
        let mut x1 = Array2::zeros((n, p));
        for i in 0..n {
            for j in 0..p {
                x1[[i, j]] = ax0[[i, j]] - alpha * (d_inv[i] * g_prev[[i, j]]);
            }
        }
        let g1 = obj.grad_stack(&x1);
        grad_evals += n;
        let z1 = z_of(&x1);
        tracker.advance(&z1, &g_prev, alpha);
        if recorder.due(1) {
            recorder.push(TrajRow {
                t: 1,
                err_opt: err_against(&x1, opts.x_star.as_ref()),
                consensus: consensus_gap(&x1),
                residual_opt: tracker.r_grad(&g1, alpha),
                residual_feas: tracker.r_null(&z1),
                alpha_t: alpha,
            });
        }
        if let Some(h) = history.as_mut() {
            h.push(z1.clone());
        }
        t = 1;
        ax_prev = ax0;
        x = x1;
        g = g1;

        while t < cfg.max_iters {
            t += 1;
            let ax = mat_mul(&aphi, &x);
            let mut x_new = Array2::zeros((n, p));
            for i in 0..n {
                for j in 0..p {
                    // Same two-step combination, with the gradient difference
                    // scaled by D⁻¹ row-wise.
                    let gd = d_inv[i] * g[[i, j]];
                    let gd2 = d_inv[i] * g_prev[[i, j]];
                    x_new[[i, j]] = two_step_combine(
                        x[[i, j]],
                        ax[[i, j]],
                        x_prev[[i, j]],
                        ax_prev[[i, j]],
                        gd,
                        gd2,
                        alpha,
                    );
                }
            }
            let g_new = obj.grad_stack(&x_new);
            grad_evals += n;
            let z_new = z_of(&x_new);
            tracker.advance(&z_new, &g, alpha);

            let rel_step = {
                let mut sacc = 0.0;
                for i in 0..n {
                    for j in 0..p {
                        let d = x_new[[i, j]] - x[[i, j]];
                        sacc += d * d;
                    }
                }
                sacc.sqrt() / (1.0 + frob(&x_new))
            };
            let r_null = tracker.r_null(&z_new);
            let r_grad = tracker.r_grad(&g_new, alpha);
            if recorder.due(t) {
                recorder.push(TrajRow {
                    t,
                    err_opt: err_against(&x_new, opts.x_star.as_ref()),
                    consensus: consensus_gap(&x_new),
                    residual_opt: r_grad,
                    residual_feas: r_null,
                    alpha_t: alpha,
                });
            }
            if let Some(h) = history.as_mut() {
                h.push(z_new.clone());
            }

            ax_prev = ax;
            x_prev = std::mem::replace(&mut x, x_new);
            g_prev = std::mem::replace(&mut g, g_new);

            if !all_finite(&x) {
                stop = StopReason::Diverged;
                break;
            }
            if let Some(reason) = stop_rule(t, cfg.tol, rel_step, r_null.max(r_grad)) {
                stop = reason;
                break;
            }
        }
    }
    let _ = ax_prev;

    let z_final = z_of(&x);
    let z_prev_final = z_of(&x_prev);
    let final_row = TrajRow {
        t,
        err_opt: err_against(&x, opts.x_star.as_ref()),
        consensus: consensus_gap(&x),
        residual_opt: tracker.r_grad(&g, alpha),
        residual_feas: tracker.r_null(&z_final),
        alpha_t: alpha,
    };
    recorder.ensure_final(final_row);
    Ok(TrajectoryRecord {
        kind: AlgorithmKind::NormalizedExtraPushX,
        rows: recorder.rows,
        stop,
        rounds: t,
        final_state: FinalState {
            t,
            z: z_final,
            z_prev: z_prev_final,
            x,
            w: None,
            w_prev: None,
            y: tracker.y().clone(),
            grad: g,
            alpha_last: alpha,
            colsum: tracker.colsum().to_vec(),
        },
        history,
        max_conservation: tracker.max_conservation(),
        grad_evals,
    })
}

fn check_doubly_stochastic_symmetric(w: &Array2<f64>) -> Result<(), SolverError> {
    let n = w.nrows();
    if w.ncols() != n {
        return Err(SolverError::NotDoublyStochastic("matrix is not square".into()));
    }
    for i in 0..n {
        for j in 0..n {
            if (w[[i, j]] - w[[j, i]]).abs() > 1e-9 {
                return Err(SolverError::NotDoublyStochastic(format!(
                    "asymmetric at ({i}, {j})"
                )));
            }
        }
    }
    for j in 0..n {
        let col: f64 = (0..n).map(|i| w[[i, j]]).sum();
        if (col - 1.0).abs() > 1e-9 {
            return Err(SolverError::NotDoublyStochastic(format!(
                "column {j} sums to {col}"
            )));
        }
    }
    Ok(())
}

/// Extra: the undirected-network two-step method for symmetric doubly
/// stochastic mixing. Warm-up is a plain gradient step `x¹ = x⁰ − α g⁰`;
/// afterwards `x^t = (I+W)x^{t−1} − W̄ x^{t−2} − α(g^{t−1} − g^{t−2})`.
pub fn run_extra(
    m: &MixingMatrix,
    obj: &Objective,
    cfg: &AlgorithmConfig,
    x0: &Array2<f64>,
    opts: &RunOptions,
) -> Result<TrajectoryRecord, SolverError> {
    cfg.validate()?;
    check_doubly_stochastic_symmetric(&m.a)?;
    let n = obj.n();
    let p = obj.p();
    check_shape(x0, n, p)?;
    let alpha = cfg.alpha;
    let mut recorder = Recorder::new(cfg.record_every);
    let mut history: Option<Vec<Array2<f64>>> = opts.keep_history.then(Vec::new);
    let mut grad_evals = 0usize;

    let mut x_prev = x0.clone();
    let mut g_prev = obj.grad_stack(&x_prev);
    grad_evals += n;
    let mut tracker = ResidualTracker::new(&m.a, &m.a_bar, &x_prev);
    recorder.push(TrajRow {
        t: 0,
        err_opt: err_against(&x_prev, opts.x_star.as_ref()),
        consensus: consensus_gap(&x_prev),
        residual_opt: tracker.r_grad(&g_prev, alpha),
        residual_feas: tracker.r_null(&x_prev),
        alpha_t: alpha,
    });
    if let Some(h) = history.as_mut() {
        h.push(x_prev.clone());
    }
    let mut t = 0usize;
    let mut stop = StopReason::MaxIters;
    let mut x = x_prev.clone();
    let mut g = g_prev.clone();
    if cfg.max_iters > 0 {
        // Warm-up without mixing: x¹ = x⁰ − α g⁰.
        let mut x1 = Array2::zeros((n, p));
        for i in 0..n {
            for j in 0..p {
                x1[[i, j]] = x_prev[[i, j]] - alpha * g_prev[[i, j]];
            }
        }
        let g1 = obj.grad_stack(&x1);
        grad_evals += n;
        tracker.advance(&x1, &g_prev, alpha);
        if recorder.due(1) {
            recorder.push(TrajRow {
                t: 1,
                err_opt: err_against(&x1, opts.x_star.as_ref()),
                consensus: consensus_gap(&x1),
                residual_opt: tracker.r_grad(&g1, alpha),
                residual_feas: tracker.r_null(&x1),
                alpha_t: alpha,
            });
        }
        if let Some(h) = history.as_mut() {
            h.push(x1.clone());
        }
        t = 1;
        // For t = 2 the W̄ term needs W·x⁰; the warm-up did not form it, so
        // compute it here once (this is exactly what the recursion prescribes).
        let mut ax_prev = mat_mul(&m.a, &x_prev);
        let mut x_cur = x1;
        let mut ax_cur: Array2<f64>;
        g = g1;

        while t < cfg.max_iters {
            t += 1;
            ax_cur = mat_mul(&m.a, &x_cur);
            let mut x_new = Array2::zeros((n, p));
            for i in 0..n {
                for j in 0..p {
                    x_new[[i, j]] = two_step_combine(
                        x_cur[[i, j]],
                        ax_cur[[i, j]],
                        x_prev[[i, j]],
                        ax_prev[[i, j]],
                        g[[i, j]],
                        g_prev[[i, j]],
                        alpha,
                    );
                }
            }
            let g_new = obj.grad_stack(&x_new);
            grad_evals += n;
            tracker.advance(&x_new, &g, alpha);

            let rel_step = {
                let mut sacc = 0.0;
                for i in 0..n {
                    for j in 0..p {
                        let d = x_new[[i, j]] - x_cur[[i, j]];
                        sacc += d * d;
                    }
                }
                sacc.sqrt() / (1.0 + frob(&x_new))
            };
            let r_null = tracker.r_null(&x_new);
            let r_grad = tracker.r_grad(&g_new, alpha);
            if recorder.due(t) {
                recorder.push(TrajRow {
                    t,
                    err_opt: err_against(&x_new, opts.x_star.as_ref()),
                    consensus: consensus_gap(&x_new),
                    residual_opt: r_grad,
                    residual_feas: r_null,
                    alpha_t: alpha,
                });
            }
            if let Some(h) = history.as_mut() {
                h.push(x_new.clone());
            }

            ax_prev = ax_cur;
            x_prev = std::mem::replace(&mut x_cur, x_new);
            g_prev = std::mem::replace(&mut g, g_new);

            if !all_finite(&x_cur) {
                stop = StopReason::Diverged;
                break;
            }
            if let Some(reason) = stop_rule(t, cfg.tol, rel_step, r_null.max(r_grad)) {
                stop = reason;
                break;
            }
        }
        x = x_cur;
    }

    let final_row = TrajRow {
        t,
        err_opt: err_against(&x, opts.x_star.as_ref()),
        consensus: consensus_gap(&x),
        residual_opt: tracker.r_grad(&g, alpha),
        residual_feas: tracker.r_null(&x),
        alpha_t: alpha,
    };
    recorder.ensure_final(final_row);
    Ok(TrajectoryRecord {
        kind: AlgorithmKind::Extra,
        rows: recorder.rows,
        stop,
        rounds: t,
        final_state: FinalState {
            t,
            z: x.clone(),
            z_prev: x_prev,
            x,
            w: None,
            w_prev: None,
            y: tracker.y().clone(),
            grad: g,
            alpha_last: alpha,
            colsum: tracker.colsum().to_vec(),
        },
        history,
        max_conservation: tracker.max_conservation(),
        grad_evals,
    })
}

/// Subgradient-push with a diminishing step schedule:
/// `z^{t+1} = A z^t − α_t ∇f(x^t)`, `w^{t+1} = A w^t`, `x = diag(w)⁻¹ z`.
pub fn run_subgradient_push(
    m: &MixingMatrix,
    obj: &Objective,
    cfg: &AlgorithmConfig,
    z0: &Array2<f64>,
    opts: &RunOptions,
) -> Result<TrajectoryRecord, SolverError> {
    cfg.validate()?;
    let schedule = cfg.schedule.as_ref().ok_or(SolverError::MissingSchedule)?;
    let n = obj.n();
    let p = obj.p();
    check_shape(z0, n, p)?;
    let mut recorder = Recorder::new(cfg.record_every);
    let mut history: Option<Vec<Array2<f64>>> = opts.keep_history.then(Vec::new);
    let mut grad_evals = 0usize;

    let mut z = z0.clone();
    let mut w = Array1::from_elem(n, 1.0);
    let norm = Normalization::PushSum;
    let mut x = norm.x_from(&z, Some(&w));
    let mut g = obj.grad_stack(&x);
    grad_evals += n;
    let mut tracker = ResidualTracker::new(&m.a, &m.a_bar, &z);
    let mut alpha_t = schedule.at(0)?;
    recorder.push(TrajRow {
        t: 0,
        err_opt: err_against(&x, opts.x_star.as_ref()),
        consensus: consensus_gap(&x),
        residual_opt: tracker.r_grad(&g, alpha_t),
        residual_feas: tracker.r_null(&z),
        alpha_t,
    });
    if let Some(h) = history.as_mut() {
        h.push(z.clone());
    }
    let mut t = 0usize;
    let mut stop = StopReason::MaxIters;
    while t < cfg.max_iters {
        let az = mat_mul(&m.a, &z);
        let mut z_new = Array2::zeros((n, p));
        for i in 0..n {
            for j in 0..p {
                z_new[[i, j]] = az[[i, j]] - alpha_t * g[[i, j]];
            }
        }
        let w_new = mat_vec(&m.a, &w);
        let x_new = norm.x_from(&z_new, Some(&w_new));
        let g_new = obj.grad_stack(&x_new);
        grad_evals += n;
        tracker.advance(&z_new, &g, alpha_t);
        t += 1;
        let next_alpha = schedule.at(t)?;

        let rel_step = {
            let mut sacc = 0.0;
            for i in 0..n {
                for j in 0..p {
                    let d = x_new[[i, j]] - x[[i, j]];
                    sacc += d * d;
                }
            }
            sacc.sqrt() / (1.0 + frob(&x_new))
        };
        let r_null = tracker.r_null(&z_new);
        let r_grad = tracker.r_grad(&g_new, next_alpha);
        if recorder.due(t) {
            recorder.push(TrajRow {
                t,
                err_opt: err_against(&x_new, opts.x_star.as_ref()),
                consensus: consensus_gap(&x_new),
                residual_opt: r_grad,
                residual_feas: r_null,
                alpha_t: next_alpha,
            });
        }
        if let Some(h) = history.as_mut() {
            h.push(z_new.clone());
        }

        z = z_new;
        w = w_new;
        x = x_new;
        g = g_new;
        alpha_t = next_alpha;

        if !all_finite(&z) {
            stop = StopReason::Diverged;
            break;
        }
        if let Some(reason) = stop_rule(t, cfg.tol, rel_step, r_null.max(r_grad)) {
            stop = reason;
            break;
        }
    }

    let final_row = TrajRow {
        t,
        err_opt: err_against(&x, opts.x_star.as_ref()),
        consensus: consensus_gap(&x),
        residual_opt: tracker.r_grad(&g, alpha_t),
        residual_feas: tracker.r_null(&z),
        alpha_t,
    };
    recorder.ensure_final(final_row);
    let w_prev = w.clone();
    Ok(TrajectoryRecord {
        kind: AlgorithmKind::SubgradientPush,
        rows: recorder.rows,
        stop,
        rounds: t,
        final_state: FinalState {
            t,
            z: z.clone(),
            z_prev: z,
            x,
            w: Some(w),
            w_prev: Some(w_prev),
            y: tracker.y().clone(),
            grad: g,
            alpha_last: alpha_t,
            colsum: tracker.colsum().to_vec(),
        },
        history,
        max_conservation: tracker.max_conservation(),
        grad_evals,
    })
}

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

/// Write the recorded rows as CSV with the fixed header
/// `t,err_opt,consensus,residual_opt,residual_feas,alpha_t`
/// (17 significant digits, atomic replace).
pub fn write_trajectory_csv(path: &Path, rec: &TrajectoryRecord) -> Result<(), SolverError> {
    let mut out = String::from("t,err_opt,consensus,residual_opt,residual_feas,alpha_t\n");
    for r in &rec.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.t,
            fmt_float(r.err_opt),
            fmt_float(r.consensus),
            fmt_float(r.residual_opt),
            fmt_float(r.residual_feas),
            fmt_float(r.alpha_t)
        ));
    }
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, out).map_err(|source| SolverError::Io {
        path: tmp.display().to_string(),
        source,
    })?;
    std::fs::rename(&tmp, path).map_err(|source| SolverError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{five_node_mixing, stationary_default, MixingMatrix};
    use crate::objective::{GenSpec, LeastSquaresData, Objective};
    use ndarray::array;

    fn small_ls(seed: u64) -> (Objective, Array1<f64>) {
        let inst = crate::objective::generate_experiment(&GenSpec::least_squares(5, 3, 6, seed))
            .unwrap();
        (inst.objective, inst.x_star)
    }

    /// Symmetric doubly stochastic circulant on 4 nodes with dyadic weights.
    fn dyadic_circulant() -> MixingMatrix {
        let a = array![
            [0.5, 0.25, 0.0, 0.25],
            [0.25, 0.5, 0.25, 0.0],
            [0.0, 0.25, 0.5, 0.25],
            [0.25, 0.0, 0.25, 0.5],
        ];
        MixingMatrix::from_matrix(a).unwrap()
    }

    #[test]
    fn single_node_extrapush_is_exact_gradient_descent() {
        // f(x) = ½x², α = ½, z⁰ = 1: both recursions give exactly 2⁻ᵗ.
        let obj = Objective::LeastSquares(
            LeastSquaresData::new(vec![array![[1.0]]], vec![array![0.0]]).unwrap(),
        );
        let m = MixingMatrix::from_matrix(array![[1.0]]).unwrap();
        let cfg = AlgorithmConfig::fixed(AlgorithmKind::ExtraPush, 0.5, 100);
        let opts = RunOptions {
            keep_history: true,
            ..Default::default()
        };
        let rec = run_extrapush(&m, &obj, &cfg, &array![[1.0]], &opts).unwrap();
        let hist = rec.history.as_ref().unwrap();
        let mut gd = 1.0_f64;
        for (t, z) in hist.iter().enumerate() {
            let expect = 0.5_f64.powi(t as i32);
            assert_eq!(z[[0, 0]], expect, "round {t}");
            assert_eq!(z[[0, 0]], gd, "round {t} vs explicit gradient descent");
            gd -= 0.5 * gd;
        }
        assert_eq!(rec.rounds, 100);
    }

    #[test]
    fn normalized_equals_extra_on_doubly_stochastic_from_zero_start() {
        let m = dyadic_circulant();
        let s = stationary_default(&m).unwrap();
        // Uniform stationary distribution is exact for doubly stochastic A.
        for i in 0..4 {
            assert_eq!(s.phi[i], 0.25);
            assert_eq!(s.d[i], 1.0);
        }
        let inst =
            crate::objective::generate_experiment(&GenSpec::least_squares(4, 3, 5, 3)).unwrap();
        let cfg = AlgorithmConfig::fixed(AlgorithmKind::NormalizedExtraPush, 0.05, 100);
        let cfg_extra = AlgorithmConfig {
            kind: AlgorithmKind::Extra,
            ..cfg.clone()
        };
        let z0 = Array2::zeros((4, 3));
        let opts = RunOptions {
            keep_history: true,
            ..Default::default()
        };
        let nep = run_normalized_extrapush(&m, &s, &inst.objective, &cfg, &z0, &opts).unwrap();
        let extra = run_extra(&m, &inst.objective, &cfg_extra, &z0, &opts).unwrap();
        let hn = nep.history.as_ref().unwrap();
        let he = extra.history.as_ref().unwrap();
        assert_eq!(hn.len(), he.len());
        for (t, (zn, ze)) in hn.iter().zip(he.iter()).enumerate() {
            // With D = I, z and x coincide; the trajectories are bitwise equal.
            assert_eq!(zn, ze, "round {t}");
        }
    }

    #[test]
    fn three_normalized_forms_agree_on_five_node() {
        let m = five_node_mixing();
        let s = stationary_default(&m).unwrap();
        let (obj, x_star) = small_ls(11);
        let cfg = AlgorithmConfig::fixed(AlgorithmKind::NormalizedExtraPush, 0.05, 800);
        let opts = RunOptions::default();
        let z0 = Array2::zeros((5, 3));
        let main = run_normalized_extrapush(&m, &s, &obj, &cfg, &z0, &opts).unwrap();
        let zf = run_normalized_extrapush_z(&m, &s, &obj, &cfg, &z0, &opts).unwrap();
        // x-form starts from x⁰ = D⁻¹ z⁰ = 0.
        let xf = run_normalized_extrapush_x(&m, &s, &obj, &cfg, &Array2::zeros((5, 3)), &opts)
            .unwrap();
        let xm = &main.final_state.x;
        let xz = &zf.final_state.x;
        let xx = &xf.final_state.x;
        let scale = xm.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for i in 0..5 {
            for j in 0..3 {
                assert!((xm[[i, j]] - xz[[i, j]]).abs() <= 1e-9 * scale);
                assert!((xm[[i, j]] - xx[[i, j]]).abs() <= 1e-9 * scale);
            }
        }
        // Sanity: the run actually approaches the optimum.
        let err = err_against(xm, Some(&x_star));
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn schedule_values_match_definitions() {
        let s = StepSchedule::InverseSqrt { c: 0.8, t0: 0.0 };
        assert_eq!(s.at(0).unwrap(), 0.8);
        assert_eq!(s.at(1).unwrap(), 0.8);
        assert_eq!(s.at(4).unwrap(), 0.4);
        let h = StepSchedule::InverseSqrt { c: 5.0, t0: 100.0 };
        assert_eq!(h.at(0).unwrap(), 0.5);
        let tb = StepSchedule::Table {
            values: vec![0.1, 0.2],
        };
        assert_eq!(tb.at(1).unwrap(), 0.2);
        assert!(matches!(tb.at(2), Err(SolverError::ScheduleExhausted(2))));
        assert!(!tb.warnings().is_empty());
    }

    #[test]
    fn stop_rule_semantics() {
        assert_eq!(stop_rule(1, 1e-6, 0.0, 0.0), None); // never before t = 2
        assert_eq!(stop_rule(5, 0.0, 0.0, 0.0), None); // tol = 0 disables
        assert_eq!(
            stop_rule(2, 1e-6, 1e-9, 1.0),
            Some(StopReason::StepTolerance)
        );
        assert_eq!(
            stop_rule(2, 1e-6, 1.0, 1e-9),
            Some(StopReason::ResidualTolerance)
        );
        assert_eq!(stop_rule(2, 1e-6, 1.0, 1.0), None);
    }

    #[test]
    fn tolerance_stops_early_and_zero_tol_runs_to_max() {
        let m = five_node_mixing();
        let s = stationary_default(&m).unwrap();
        let (obj, _) = small_ls(19);
        let z0 = Array2::zeros((5, 3));
        let mut cfg = AlgorithmConfig::fixed(AlgorithmKind::NormalizedExtraPush, 0.05, 2000);
        cfg.tol = 1e-10;
        let rec =
            run_normalized_extrapush(&m, &s, &obj, &cfg, &z0, &RunOptions::default()).unwrap();
        assert!(rec.rounds < 2000, "stopped at {}", rec.rounds);
        assert!(matches!(
            rec.stop,
            StopReason::StepTolerance | StopReason::ResidualTolerance
        ));
        cfg.tol = 0.0;
        cfg.max_iters = 50;
        let rec2 =
            run_normalized_extrapush(&m, &s, &obj, &cfg, &z0, &RunOptions::default()).unwrap();
        assert_eq!(rec2.rounds, 50);
        assert_eq!(rec2.stop, StopReason::MaxIters);
    }

    #[test]
    fn divergence_is_detected() {
        let m = five_node_mixing();
        let (obj, _) = small_ls(23);
        let z0 = Array2::zeros((5, 3));
        // Step far above 2/L: the two-step recursion blows up fast.
        let cfg = AlgorithmConfig::fixed(AlgorithmKind::ExtraPush, 50.0, 400);
        let rec = run_extrapush(&m, &obj, &cfg, &z0, &RunOptions::default()).unwrap();
        assert_eq!(rec.stop, StopReason::Diverged);
        assert!(rec.rounds < 400);
    }

    #[test]
    fn conservation_holds_on_fixed_step_runs() {
        let m = five_node_mixing();
        let (obj, _) = small_ls(29);
        let z0 = Array2::zeros((5, 3));
        let cfg = AlgorithmConfig::fixed(AlgorithmKind::ExtraPush, 0.05, 300);
        let rec = run_extrapush(&m, &obj, &cfg, &z0, &RunOptions::default()).unwrap();
        assert!(
            rec.max_conservation <= 1e-9,
            "conservation violation {:.3e}",
            rec.max_conservation
        );
    }

    #[test]
    fn record_every_thins_rows_but_keeps_final() {
        let m = five_node_mixing();
        let (obj, _) = small_ls(31);
        let z0 = Array2::zeros((5, 3));
        let mut cfg = AlgorithmConfig::fixed(AlgorithmKind::ExtraPush, 0.05, 37);
        cfg.record_every = 10;
        let rec = run_extrapush(&m, &obj, &cfg, &z0, &RunOptions::default()).unwrap();
        let ts: Vec<usize> = rec.rows.iter().map(|r| r.t).collect();
        assert_eq!(ts, vec![0, 10, 20, 30, 37]);
    }

    #[test]
    fn checkpoint_resume_reproduces_suffix_bitwise() {
        let m = five_node_mixing();
        let s = stationary_default(&m).unwrap();
        let (obj, x_star) = small_ls(37);
        let z0 = Array2::zeros((5, 3));
        let opts = RunOptions {
            x_star: Some(x_star),
            keep_history: true,
        };
        let full_cfg = AlgorithmConfig::fixed(AlgorithmKind::NormalizedExtraPush, 0.05, 60);
        let full = run_normalized_extrapush(&m, &s, &obj, &full_cfg, &z0, &opts).unwrap();

        let part_cfg = AlgorithmConfig::fixed(AlgorithmKind::NormalizedExtraPush, 0.05, 20);
        let part = run_normalized_extrapush(&m, &s, &obj, &part_cfg, &z0, &opts).unwrap();
        let ck = part.checkpoint(Some(&s.phi)).unwrap();

        // File roundtrip, then resume to the same total budget.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&path, &ck).unwrap();
        let ck2 = load_checkpoint(&path).unwrap();
        let resumed =
            resume_normalized_extrapush(&m, &s, &obj, &full_cfg, ck2, &opts).unwrap();

        let fh = full.history.as_ref().unwrap();
        let rh = resumed.history.as_ref().unwrap();
        // Resumed history covers rounds 20..=60.
        assert_eq!(rh.len(), 41);
        for (k, z) in rh.iter().enumerate() {
            assert_eq!(z, &fh[20 + k], "round {}", 20 + k);
        }
        // Recorded rows for the shared rounds are identical too.
        let full_rows: Vec<&TrajRow> = full.rows.iter().filter(|r| r.t >= 20).collect();
        assert_eq!(full_rows.len(), resumed.rows.len());
        for (a, b) in full_rows.iter().zip(resumed.rows.iter()) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.err_opt.to_bits(), b.err_opt.to_bits());
            assert_eq!(a.residual_opt.to_bits(), b.residual_opt.to_bits());
            assert_eq!(a.residual_feas.to_bits(), b.residual_feas.to_bits());
        }
        assert_eq!(
            full.final_state.z, resumed.final_state.z,
            "final iterates must match bitwise"
        );
    }

    #[test]
    fn checkpoint_kind_and_alpha_mismatches_are_rejected() {
        let m = five_node_mixing();
        let s = stationary_default(&m).unwrap();
        let (obj, _) = small_ls(41);
        let z0 = Array2::zeros((5, 3));
        let cfg = AlgorithmConfig::fixed(AlgorithmKind::ExtraPush, 0.05, 10);
        let rec = run_extrapush(&m, &obj, &cfg, &z0, &RunOptions::default()).unwrap();
        let ck = rec.checkpoint(None).unwrap();
        let nep_cfg = AlgorithmConfig::fixed(AlgorithmKind::NormalizedExtraPush, 0.05, 20);
        assert!(matches!(
            resume_normalized_extrapush(&m, &s, &obj, &nep_cfg, ck.clone(), &RunOptions::default()),
            Err(SolverError::CheckpointKind { .. })
        ));
        let mut bad_alpha = AlgorithmConfig::fixed(AlgorithmKind::ExtraPush, 0.07, 20);
        bad_alpha.tol = 0.0;
        assert!(matches!(
            resume_extrapush(&m, &obj, &bad_alpha, ck, &RunOptions::default()),
            Err(SolverError::CheckpointMismatch(_))
        ));
        // Subgradient-push has no checkpoint support.
        let sg_cfg = AlgorithmConfig::subgradient(
            StepSchedule::InverseSqrt { c: 0.8, t0: 0.0 },
            5,
        );
        let sg = run_subgradient_push(&m, &obj, &sg_cfg, &z0, &RunOptions::default()).unwrap();
        assert!(matches!(
            sg.checkpoint(None),
            Err(SolverError::CheckpointUnsupported(_))
        ));
    }

    #[test]
    fn subgradient_push_approaches_consensus_average() {
        // Zero objective: subgradient-push reduces to plain push-sum averaging.
        let m = five_node_mixing();
        let obj = Objective::Zero { n: 5, p: 2 };
        let mut z0 = Array2::zeros((5, 2));
        for i in 0..5 {
            z0[[i, 0]] = i as f64;
            z0[[i, 1]] = 1.0 - i as f64;
        }
        let cfg = AlgorithmConfig::subgradient(
            StepSchedule::InverseSqrt { c: 1.0, t0: 0.0 },
            80,
        );
        let rec = run_subgradient_push(&m, &obj, &cfg, &z0, &RunOptions::default()).unwrap();
        let x = &rec.final_state.x;
        let mean0 = (0..5).map(|i| z0[[i, 0]]).sum::<f64>() / 5.0;
        let mean1 = (0..5).map(|i| z0[[i, 1]]).sum::<f64>() / 5.0;
        for i in 0..5 {
            assert!((x[[i, 0]] - mean0).abs() <= 1e-10, "{}", x[[i, 0]]);
            assert!((x[[i, 1]] - mean1).abs() <= 1e-10);
        }
    }

    #[test]
    fn extra_rejects_directed_mixing() {
        let m = five_node_mixing();
        let (obj, _) = small_ls(43);
        let cfg = AlgorithmConfig::fixed(AlgorithmKind::Extra, 0.05, 10);
        assert!(matches!(
            run_extra(&m, &obj, &cfg, &Array2::zeros((5, 3)), &RunOptions::default()),
            Err(SolverError::NotDoublyStochastic(_))
        ));
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let m = five_node_mixing();
        let (obj, _) = small_ls(47);
        let z0 = Array2::zeros((5, 3));
        let cfg = AlgorithmConfig::fixed(AlgorithmKind::ExtraPush, -0.1, 10);
        assert!(matches!(
            run_extrapush(&m, &obj, &cfg, &z0, &RunOptions::default()),
            Err(SolverError::BadAlpha(_))
        ));
        let mut sg = AlgorithmConfig::fixed(AlgorithmKind::SubgradientPush, 0.1, 10);
        sg.schedule = None;
        assert!(matches!(
            run_subgradient_push(&m, &obj, &sg, &z0, &RunOptions::default()),
            Err(SolverError::MissingSchedule)
        ));
        let bad_shape = Array2::zeros((4, 3));
        let cfg = AlgorithmConfig::fixed(AlgorithmKind::ExtraPush, 0.1, 10);
        assert!(matches!(
            run_extrapush(&m, &obj, &cfg, &bad_shape, &RunOptions::default()),
            Err(SolverError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn trajectory_csv_has_fixed_header_and_parseable_rows() {
        let m = five_node_mixing();
        let (obj, x_star) = small_ls(53);
        let z0 = Array2::zeros((5, 3));
        let cfg = AlgorithmConfig::fixed(AlgorithmKind::ExtraPush, 0.05, 12);
        let opts = RunOptions {
            x_star: Some(x_star),
            keep_history: false,
        };
        let rec = run_extrapush(&m, &obj, &cfg, &z0, &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        write_trajectory_csv(&path, &rec).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,err_opt,consensus,residual_opt,residual_feas,alpha_t"
        );
        let data: Vec<&str> = lines.collect();
        assert_eq!(data.len(), 13);
        // Values round-trip through the printed representation.
        let first = data[1].split(',').collect::<Vec<_>>();
        assert_eq!(first[0], "1");
        let parsed: f64 = first[1].parse().unwrap();
        assert_eq!(parsed.to_bits(), rec.rows[1].err_opt.to_bits());
        // err_opt prints NaN when no ground truth is given.
        let rec2 = run_extrapush(&m, &obj, &cfg, &z0, &RunOptions::default()).unwrap();
        write_trajectory_csv(&path, &rec2).unwrap();
        let text2 = std::fs::read_to_string(&path).unwrap();
        assert!(text2.lines().nth(1).unwrap().split(',').nth(1).unwrap() == "NaN");
    }
}
