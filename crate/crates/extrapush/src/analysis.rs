//! Diagnostics and theory checks: first-order optimality residuals, mass
//! conservation, the metric objects behind the two-step convergence argument,
//! geometric-rate fitting, and the fixed-step-size certificate.
//!
//! The central identity: a run of a two-step push engine drives the pair
//! `(z, y)` with `y^t = Σ_{k≤t} (Ā − A) z^k` toward a stationary pair
//! satisfying `y* + α∇f(x*) = 0`, `z* ∈ null(I − A)`, `x* = D⁻¹z*`. The
//! residual functions below measure each part of that characterization.

use ndarray::{Array1, Array2};
use std::fmt;
use thiserror::Error;

use crate::graph::{MixingMatrix, StationaryDistribution};
use crate::linalg::{mat_mul, min_nonzero, pinv_psd, sym_eigen, transpose, LinalgError};
use crate::objective::Objective;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("need at least {needed} positive samples for a rate fit, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },
    #[error("history of iterates is required for this diagnostic")]
    HistoryRequired,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("not applicable: M = 0 (the disagreement operator vanishes)")]
    DegenerateMixing,
}

/// Streaming per-round diagnostics for a running engine: the y-accumulator,
/// the null-space and gradient residuals, and the mass-conservation check
/// `1ᵀz^{t+1} − 1ᵀz^t = −α_t·1ᵀ∇f(x^t)`.
#[derive(Debug, Clone)]
pub struct ResidualTracker {
    a: Array2<f64>,
    abar_minus_a: Array2<f64>,
    y: Array2<f64>,
    colsum: Vec<f64>,
    prev_z_norm: f64,
    max_conservation: f64,
}

impl ResidualTracker {
    pub fn new(a: &Array2<f64>, a_bar: &Array2<f64>, z0: &Array2<f64>) -> Self {
        let n = a.nrows();
        let mut diff = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                diff[[i, j]] = a_bar[[i, j]] - a[[i, j]];
            }
        }
        let y = mat_mul(&diff, z0);
        let colsum = column_sums(z0);
        let prev_z_norm = frob(z0);
        Self {
            a: a.clone(),
            abar_minus_a: diff,
            y,
            colsum,
            prev_z_norm,
            max_conservation: 0.0,
        }
    }

    /// Rebuild a tracker mid-run from checkpointed accumulators.
    pub fn resume(a: &Array2<f64>, a_bar: &Array2<f64>, y: Array2<f64>, colsum: Vec<f64>) -> Self {
        let n = a.nrows();
        let mut diff = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                diff[[i, j]] = a_bar[[i, j]] - a[[i, j]];
            }
        }
        Self {
            a: a.clone(),
            abar_minus_a: diff,
            y,
            colsum,
            prev_z_norm: f64::NAN,
            max_conservation: 0.0,
        }
    }

    /// Fold in the new iterate produced with gradient `g_used` and step
    /// `alpha_used` (the values that actually entered the update).
    pub fn advance(&mut self, z_new: &Array2<f64>, g_used: &Array2<f64>, alpha_used: f64) {
        let new_colsum = column_sums(z_new);
        let gsum = column_sums(g_used);
        let mut viol = 0.0;
        for c in 0..new_colsum.len() {
            let d = new_colsum[c] - self.colsum[c] + alpha_used * gsum[c];
            viol += d * d;
        }
        let viol = viol.sqrt();
        if self.prev_z_norm.is_finite() {
            let ratio = viol / (1.0 + self.prev_z_norm);
            if ratio > self.max_conservation {
                self.max_conservation = ratio;
            }
        }
        let inc = mat_mul(&self.abar_minus_a, z_new);
        self.y += &inc;
        self.colsum = new_colsum;
        self.prev_z_norm = frob(z_new);
    }

    /// `‖(I − A)z‖_F`.
    pub fn r_null(&self, z: &Array2<f64>) -> f64 {
        let az = mat_mul(&self.a, z);
        let mut s = 0.0;
        for i in 0..z.nrows() {
            for j in 0..z.ncols() {
                let d = z[[i, j]] - az[[i, j]];
                s += d * d;
            }
        }
        s.sqrt()
    }

    /// `‖y + α·g‖_F`.
    pub fn r_grad(&self, g: &Array2<f64>, alpha: f64) -> f64 {
        let mut s = 0.0;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let d = self.y[[i, j]] + alpha * g[[i, j]];
                s += d * d;
            }
        }
        s.sqrt()
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn colsum(&self) -> &[f64] {
        &self.colsum
    }

    pub fn max_conservation(&self) -> f64 {
        self.max_conservation
    }
}

fn column_sums(z: &Array2<f64>) -> Vec<f64> {
    let (n, p) = z.dim();
    let mut out = vec![0.0; p];
    for c in 0..p {
        for i in 0..n {
            out[c] += z[[i, c]];
        }
    }
    out
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// The full first-order optimality residual triple plus the y mass check.
#[derive(Debug, Clone, Copy)]
pub struct ResidualTriple {
    /// `‖(I − A)z‖_F`: z is consensual in the push-sum sense.
    pub r_null: f64,
    /// `‖y + α∇f(x)‖_F`: the accumulated disagreement balances the gradient.
    pub r_grad: f64,
    /// `‖x − D⁻¹z‖_F`: the reported copies are the normalized z.
    pub r_link: f64,
    /// `‖1ᵀy‖₂`: y carries no net mass.
    pub one_t_y: f64,
}

impl ResidualTriple {
    pub fn max(&self) -> f64 {
        self.r_null.max(self.r_grad).max(self.r_link).max(self.one_t_y)
    }
}

/// Evaluate the stationarity characterization at an arbitrary state.
pub fn residual_opt(
    z: &Array2<f64>,
    x: &Array2<f64>,
    y: &Array2<f64>,
    m: &MixingMatrix,
    s: &StationaryDistribution,
    alpha: f64,
    obj: &Objective,
) -> ResidualTriple {
    let az = mat_mul(&m.a, z);
    let mut r_null = 0.0;
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            let d = z[[i, j]] - az[[i, j]];
            r_null += d * d;
        }
    }
    let g = obj.grad_stack(x);
    let mut r_grad = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let d = y[[i, j]] + alpha * g[[i, j]];
            r_grad += d * d;
        }
    }
    let mut r_link = 0.0;
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            let d = x[[i, j]] - s.d_inv[i] * z[[i, j]];
            r_link += d * d;
        }
    }
    let ysum = column_sums(y);
    let one_t_y = ysum.iter().map(|v| v * v).sum::<f64>().sqrt();
    ResidualTriple {
        r_null: r_null.sqrt(),
        r_grad: r_grad.sqrt(),
        r_link: r_link.sqrt(),
        one_t_y,
    }
}

/// The exact stationary triple built from a known minimizer:
/// `z* = n·diag(φ)·(1x*ᵀ)`, `x` stacked copies of `x*`, `y* = −α∇f(x*)`.
#[derive(Debug, Clone)]
pub struct ExactTriple {
    pub z: Array2<f64>,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

pub fn exact_triple(
    x_star: &Array1<f64>,
    s: &StationaryDistribution,
    alpha: f64,
    obj: &Objective,
) -> ExactTriple {
    let n = obj.n();
    let p = obj.p();
    let mut x = Array2::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            x[[i, j]] = x_star[j];
        }
    }
    let mut z = Array2::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            z[[i, j]] = s.d[i] * x[[i, j]];
        }
    }
    let g = obj.grad_stack(&x);
    let mut y = Array2::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            y[[i, j]] = -alpha * g[[i, j]];
        }
    }
    ExactTriple { z, x, y }
}

/// Prefix sums `y^t = Σ_{k≤t} (Ā − A) z^k` over a recorded history.
pub fn accumulate_y(
    history: &[Array2<f64>],
    m: &MixingMatrix,
) -> Result<Vec<Array2<f64>>, AnalysisError> {
    if history.is_empty() {
        return Err(AnalysisError::HistoryRequired);
    }
    let n = m.n();
    let mut diff = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            diff[[i, j]] = m.a_bar[[i, j]] - m.a[[i, j]];
        }
    }
    let mut out = Vec::with_capacity(history.len());
    let mut acc: Option<Array2<f64>> = None;
    for z in history {
        let inc = mat_mul(&diff, z);
        let next = match acc.take() {
            None => inc,
            Some(mut a) => {
                a += &inc;
                a
            }
        };
        out.push(next.clone());
        acc = Some(next);
    }
    Ok(out)
}

/// Prefix sums `u^t = Σ_{k≤t} z^k` (so `y^t = (Ā − A)·u^t`).
pub fn accumulate_u(history: &[Array2<f64>]) -> Result<Vec<Array2<f64>>, AnalysisError> {
    if history.is_empty() {
        return Err(AnalysisError::HistoryRequired);
    }
    let mut out = Vec::with_capacity(history.len());
    let mut acc = history[0].clone();
    out.push(acc.clone());
    for z in &history[1..] {
        acc += z;
        out.push(acc.clone());
    }
    Ok(out)
}

/// Minimum-norm solution of `(Ā − A)·u* = y*` (consistent because y* has zero
/// column sums): `u* = M̃ᵀ(M̃M̃ᵀ)⁺y*` with `M̃ = Ā − A`.
pub fn u_star_from_y_star(
    m: &MixingMatrix,
    y_star: &Array2<f64>,
) -> Result<Array2<f64>, AnalysisError> {
    let n = m.n();
    let mut mt = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            mt[[i, j]] = m.a_bar[[i, j]] - m.a[[i, j]];
        }
    }
    let mmt = mat_mul(&mt, &transpose(&mt));
    let pinv = pinv_psd(&mmt, 1e-10)?;
    Ok(mat_mul(&transpose(&mt), &mat_mul(&pinv, y_star)))
}

/// The matrices behind the two-step convergence metric.
#[derive(Debug, Clone)]
pub struct MetricObjects {
    /// `N = D⁻¹Ā`.
    pub n_mat: Array2<f64>,
    /// `M = D⁻¹(Ā − A) = D⁻¹(I − A)/2`.
    pub m_mat: Array2<f64>,
    /// Block-diagonal `G = [[Nᵀ, 0], [0, M]]` (2n × 2n); the run metric is
    /// `‖v‖²_G = ½⟨v, (G + Gᵀ)v⟩`.
    pub g_mat: Array2<f64>,
    /// Skew block `S = [[0, M], [−Mᵀ, 0]]`.
    pub s_mat: Array2<f64>,
    /// Weighted Laplacian `Λ = D^{1/2}(M + Mᵀ)D^{1/2}`.
    pub laplacian: Array2<f64>,
}

pub fn build_metric_objects(m: &MixingMatrix, s: &StationaryDistribution) -> MetricObjects {
    let n = m.n();
    let mut n_mat = Array2::zeros((n, n));
    let mut m_mat = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            n_mat[[i, j]] = s.d_inv[i] * m.a_bar[[i, j]];
            m_mat[[i, j]] = s.d_inv[i] * (m.a_bar[[i, j]] - m.a[[i, j]]);
        }
    }
    let mut g_mat = Array2::zeros((2 * n, 2 * n));
    let mut s_mat = Array2::zeros((2 * n, 2 * n));
    for i in 0..n {
        for j in 0..n {
            g_mat[[i, j]] = n_mat[[j, i]]; // Nᵀ block
            g_mat[[n + i, n + j]] = m_mat[[i, j]];
            s_mat[[i, n + j]] = m_mat[[i, j]];
            s_mat[[n + i, j]] = -m_mat[[j, i]];
        }
    }
    let mut laplacian = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let sym = m_mat[[i, j]] + m_mat[[j, i]];
            laplacian[[i, j]] = s.d[i].sqrt() * sym * s.d[j].sqrt();
        }
    }
    MetricObjects {
        n_mat,
        m_mat,
        g_mat,
        s_mat,
        laplacian,
    }
}

/// `‖v‖²_G = ½⟨v, (G + Gᵀ)v⟩` for a stacked `2n×p` vector.
pub fn g_norm_sq(g_mat: &Array2<f64>, v: &Array2<f64>) -> f64 {
    let n2 = g_mat.nrows();
    assert_eq!(v.nrows(), n2, "stacked vector must have 2n rows");
    let mut acc = 0.0;
    for c in 0..v.ncols() {
        for i in 0..n2 {
            let mut gv = 0.0;
            for j in 0..n2 {
                gv += (g_mat[[i, j]] + g_mat[[j, i]]) * v[[j, c]];
            }
            acc += 0.5 * v[[i, c]] * gv;
        }
    }
    acc
}

/// Positive-definiteness margin of the metric: `λ_min(N + Nᵀ)`.
#[derive(Debug, Clone, Copy)]
pub struct Assumption4 {
    pub lambda_min: f64,
    pub holds: bool,
}

pub fn check_assumption4(metric: &MetricObjects) -> Result<Assumption4, AnalysisError> {
    let n = metric.n_mat.nrows();
    let mut sym = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            sym[[i, j]] = metric.n_mat[[i, j]] + metric.n_mat[[j, i]];
        }
    }
    let eig = sym_eigen(&sym, false)?;
    let lambda_min = eig.values[0];
    Ok(Assumption4 {
        lambda_min,
        holds: lambda_min > 0.0,
    })
}

/// Smoothness/curvature input for the certificate (from the objective).
#[derive(Debug, Clone, Copy)]
pub struct CertificateInput {
    /// `L_f = maxᵢ` Lipschitz constant of `∇fᵢ`.
    pub l_f: f64,
    /// `S_f = minᵢ` strong-convexity modulus (0 when unavailable).
    pub s_f: f64,
}

/// Optional pinning of the free parameters of the certificate chain.
#[derive(Debug, Clone, Copy, Default)]
pub struct CertificateOverrides {
    pub a: Option<f64>,
    pub eta: Option<f64>,
    pub sigma: Option<f64>,
}

/// Everything the step-size certificate computes, feasible or not.
///
/// The chain is evaluated in order; `first_violation` names the earliest
/// condition that fails, and later quantities are still reported using
/// deterministic fallback parameters so two implementations can be compared
/// constant by constant.
#[derive(Debug, Clone)]
pub struct ConvergenceCertificate {
    pub l_bar: f64,
    pub mu_bar: f64,
    pub sigma_min_d: f64,
    pub sigma_max_d: f64,
    pub lambda_min_n_sym: f64,
    pub lambda_max_n_sym_half: f64,
    pub lambda_max_mmt: f64,
    pub lambda_min_nz_mtm: f64,
    pub lambda_max_nnt: f64,
    pub lambda_max_ntn: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub c7: f64,
    pub c8: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub a: f64,
    pub a_window: (f64, f64),
    pub eta: f64,
    pub eta_window: Option<(f64, f64)>,
    pub sigma: f64,
    pub sigma_window: Option<(f64, f64)>,
    /// Step-size interval endpoints (present whenever the discriminants are
    /// nonnegative, even if the interval is empty).
    pub alpha_window: Option<(f64, f64)>,
    /// Contraction margin bound at the midpoint step, when the chain holds.
    pub delta_bound: Option<f64>,
    pub feasible: bool,
    pub first_violation: Option<String>,
    pub notes: Vec<String>,
}

impl ConvergenceCertificate {
    /// Midpoint of the admissible step interval, when nonempty.
    pub fn alpha_midpoint(&self) -> Option<f64> {
        match (self.feasible, self.alpha_window) {
            (true, Some((lo, hi))) if lo < hi => Some(0.5 * (lo + hi)),
            _ => None,
        }
    }
}

fn lambda_extremes(m: &Array2<f64>) -> Result<(f64, f64), AnalysisError> {
    let e = sym_eigen(m, false)?;
    Ok((e.values[0], e.values[e.values.len() - 1]))
}

/// Evaluate the fixed-step linear-convergence certificate chain.
///
/// Conditions, in order: metric positive definiteness, strong convexity,
/// the `a`-window, the strong-convexity ratio, the `η` window, the `σ`
/// window, the `α` interval, and the final contraction-margin bound.
pub fn certificate(
    metric: &MetricObjects,
    s: &StationaryDistribution,
    input: &CertificateInput,
    overrides: &CertificateOverrides,
) -> Result<ConvergenceCertificate, AnalysisError> {
    let n = metric.n_mat.nrows();
    let mut notes = Vec::new();
    let mut first_violation: Option<String> = None;
    let fail = |fv: &mut Option<String>, msg: String| {
        if fv.is_none() {
            *fv = Some(msg);
        }
    };

    let sigma_min_d = s.d.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let sigma_max_d = s.d.iter().fold(0.0_f64, |m, &v| m.max(v));
    if s.d.iter().all(|&v| (v - 1.0).abs() <= 1e-12) {
        notes.push(
            "D = I (doubly stochastic mixing): normalized constants reduce to the raw ones"
                .to_string(),
        );
    }
    let l_bar = input.l_f / (sigma_min_d * sigma_min_d);
    let mu_bar = input.s_f / (sigma_max_d * sigma_max_d);

    // Spectral building blocks.
    let nt = transpose(&metric.n_mat);
    let mt = transpose(&metric.m_mat);
    let mmt = mat_mul(&metric.m_mat, &mt);
    let mtm = mat_mul(&mt, &metric.m_mat);
    let nnt = mat_mul(&metric.n_mat, &nt);
    let ntn = mat_mul(&nt, &metric.n_mat);
    let mut n_sym = Array2::zeros((n, n));
    let mut m_sym_half = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            n_sym[[i, j]] = metric.n_mat[[i, j]] + metric.n_mat[[j, i]];
            m_sym_half[[i, j]] = 0.5 * (metric.m_mat[[i, j]] + metric.m_mat[[j, i]]);
        }
    }
    let (lambda_min_n_sym, lambda_max_n_sym) = lambda_extremes(&n_sym)?;
    let lambda_max_n_sym_half = 0.5 * lambda_max_n_sym;
    let (_, lambda_max_mmt) = lambda_extremes(&mmt)?;
    let mtm_eig = sym_eigen(&mtm, false)?;
    let lambda_min_nz_mtm =
        min_nonzero(&mtm_eig.values, 1e-10).ok_or(AnalysisError::DegenerateMixing)?;
    let (_, lambda_max_nnt) = lambda_extremes(&nnt)?;
    let (_, lambda_max_ntn) = lambda_extremes(&ntn)?;
    let (_, lambda_max_m_sym_half) = lambda_extremes(&m_sym_half)?;

    let c1 = lambda_max_mmt / lambda_min_nz_mtm;
    let c2 = lambda_max_m_sym_half / lambda_min_nz_mtm;
    let c3 = lambda_max_nnt + 3.0 * c1 * lambda_max_ntn;
    let c7 = lambda_min_n_sym * lambda_min_n_sym / (4.0 * c3);

    // (1) Metric positive definiteness.
    if !(lambda_min_n_sym > 0.0) {
        fail(
            &mut first_violation,
            format!(
                "metric positive definiteness: lambda_min(N + N^T) = {lambda_min_n_sym:.6e} must be > 0"
            ),
        );
    }
    // (2) Strong convexity.
    if !(mu_bar > 0.0) {
        fail(
            &mut first_violation,
            "strong convexity: S_f = 0, the objective family has no uniform curvature"
                .to_string(),
        );
    }

    // (3) Window for the averaging weight a.
    let a_lo = (2.0 - c7) / (2.0 + c7);
    let a_window = (a_lo, 1.0);
    let a = overrides.a.unwrap_or_else(|| {
        let grid = [0.5, 0.7, 0.9];
        grid.iter()
            .copied()
            .find(|&cand| cand > a_lo && cand < 1.0)
            .unwrap_or_else(|| {
                notes.push(format!(
                    "default a grid missed the window ({a_lo:.6}, 1); using the midpoint"
                ));
                0.5 * (a_lo + 1.0)
            })
    });
    if !(a > a_lo && a < 1.0) {
        fail(
            &mut first_violation,
            format!("a window: a = {a:.6} must lie in ({a_lo:.6}, 1)"),
        );
    }
    let c8 = a * (c7 + 2.0) - (2.0 - c7);

    // (4) Strong-convexity ratio.
    let one_minus_a2 = 1.0 - a * a;
    let ratio_rhs =
        ((6.0 * c1 / one_minus_a2).sqrt() + (one_minus_a2 / (6.0 * c1)).sqrt() / c8) * l_bar;
    if !(mu_bar > ratio_rhs) {
        fail(
            &mut first_violation,
            format!(
                "strong-convexity ratio: need mu_bar > {ratio_rhs:.6e}, have {mu_bar:.6e} \
                 (ratio mu_bar/L_bar = {:.3e}, required > {:.3e})",
                mu_bar / l_bar,
                ratio_rhs / l_bar
            ),
        );
    }

    // (5) Window for the dual damping eta.
    let eta_disc = 1.0 - 4.0 * l_bar * l_bar / (c8 * mu_bar * mu_bar);
    let eta_window = if eta_disc >= 0.0 && c8 > 0.0 && mu_bar > 0.0 {
        let root = eta_disc.sqrt();
        let upper_a = mu_bar * (1.0 + root);
        let upper_b = 2.0 * (mu_bar - (6.0 * c1 / one_minus_a2).sqrt() * l_bar);
        Some((mu_bar * (1.0 - root), upper_a.min(upper_b)))
    } else {
        None
    };
    let eta_fallback = if mu_bar > 0.0 { mu_bar } else { l_bar.max(1.0) };
    let eta = overrides.eta.unwrap_or(match eta_window {
        Some((lo, hi)) if lo < hi => 0.5 * (lo + hi),
        _ => eta_fallback,
    });
    match eta_window {
        None => fail(
            &mut first_violation,
            format!("eta window: discriminant 1 − 4L̄²/(c8·mu_bar²) = {eta_disc:.6e} is negative"),
        ),
        Some((lo, hi)) => {
            if !(lo < hi) {
                fail(
                    &mut first_violation,
                    format!("eta window: ({lo:.6e}, {hi:.6e}) is empty"),
                );
            } else if !(eta > lo && eta < hi) {
                fail(
                    &mut first_violation,
                    format!("eta window: eta = {eta:.6e} outside ({lo:.6e}, {hi:.6e})"),
                );
            }
        }
    }

    // Derived constants that depend on eta.
    let gap = mu_bar - 0.5 * eta;
    let delta1 = gap * gap - 6.0 * c1 * l_bar * l_bar;
    let c4 = gap + delta1.max(0.0).sqrt();
    let c5 = l_bar * l_bar / eta;
    let c6 = (2.0 * c4 * c5 + 12.0 * c1 * l_bar * l_bar) / (c4 * c4);

    // (6) Window for the coupling weight sigma.
    let delta3 = lambda_min_n_sym * lambda_min_n_sym - 4.0 * c3 * c6;
    let sigma_window = if delta3 >= 0.0 {
        let root = delta3.sqrt();
        Some((
            (lambda_min_n_sym - root) / (2.0 * c3),
            (lambda_min_n_sym + root) / (2.0 * c3),
        ))
    } else {
        None
    };
    let sigma_fallback = lambda_min_n_sym.max(1e-12) / (2.0 * c3);
    let sigma = overrides.sigma.unwrap_or(match sigma_window {
        Some((lo, hi)) if lo < hi => 0.5 * (lo + hi),
        _ => sigma_fallback,
    });
    match sigma_window {
        None => fail(
            &mut first_violation,
            format!("sigma window: discriminant Delta3 = {delta3:.6e} is negative"),
        ),
        Some((lo, hi)) => {
            if !(sigma > lo && sigma < hi) {
                fail(
                    &mut first_violation,
                    format!("sigma window: sigma = {sigma:.6e} outside ({lo:.6e}, {hi:.6e})"),
                );
            }
        }
    }

    if delta1 < 0.0 {
        fail(
            &mut first_violation,
            format!("alpha interval: discriminant Delta1 = {delta1:.6e} is negative"),
        );
    }
    // (7) The step-size interval.
    let delta2 = l_bar.powi(4) / (4.0 * eta * eta)
        - 3.0 * c1 * l_bar * l_bar * sigma * (c3 * sigma - lambda_min_n_sym);
    if delta2 < 0.0 {
        fail(
            &mut first_violation,
            format!("alpha interval: discriminant Delta2 = {delta2:.6e} is negative"),
        );
    }
    let denom = 3.0 * c1 * l_bar * l_bar * sigma;
    let alpha_window = if delta1 >= 0.0 && delta2 >= 0.0 && denom > 0.0 {
        let lo = (gap - delta1.sqrt()) / denom;
        let hi_a = (gap + delta1.sqrt()) / denom;
        let hi_b = (-l_bar * l_bar / (2.0 * eta) + delta2.sqrt()) / denom;
        Some((lo, hi_a.min(hi_b)))
    } else {
        None
    };
    match alpha_window {
        Some((lo, hi)) if lo < hi && hi > 0.0 => {}
        Some((lo, hi)) => fail(
            &mut first_violation,
            format!("alpha interval: ({lo:.6e}, {hi:.6e}) is empty"),
        ),
        None => fail(
            &mut first_violation,
            "alpha interval: undefined (negative discriminant)".to_string(),
        ),
    }

    // (8) Contraction margin at the midpoint step.
    let delta_bound = match alpha_window {
        Some((lo, hi)) if lo < hi && hi > 0.0 => {
            let alpha = 0.5 * (lo + hi);
            let num1 = -1.0 / sigma + gap * alpha - 1.5 * c1 * l_bar * l_bar * sigma * alpha * alpha;
            let den1 = lambda_max_n_sym_half + 3.0 * c2 * alpha * alpha * l_bar * l_bar;
            let num2 = 0.5 * lambda_min_n_sym
                - 0.5 * c3 * sigma
                - l_bar * l_bar * alpha / (2.0 * eta)
                - 1.5 * c1 * l_bar * l_bar * sigma * alpha * alpha;
            let den2 = 3.0 * c2 * (lambda_max_ntn + alpha * alpha * l_bar * l_bar);
            let bound = (num1 / den1).min(num2 / den2);
            if bound > 0.0 {
                Some(bound)
            } else {
                fail(
                    &mut first_violation,
                    format!("contraction margin: delta bound {bound:.6e} is not positive"),
                );
                None
            }
        }
        _ => None,
    };

    Ok(ConvergenceCertificate {
        l_bar,
        mu_bar,
        sigma_min_d,
        sigma_max_d,
        lambda_min_n_sym,
        lambda_max_n_sym_half,
        lambda_max_mmt,
        lambda_min_nz_mtm,
        lambda_max_nnt,
        lambda_max_ntn,
        c1,
        c2,
        c3,
        c4,
        c5,
        c6,
        c7,
        c8,
        delta1,
        delta2,
        delta3,
        a,
        a_window,
        eta,
        eta_window,
        sigma,
        sigma_window,
        alpha_window,
        delta_bound,
        feasible: first_violation.is_none(),
        first_violation,
        notes,
    })
}

impl fmt::Display for ConvergenceCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fixed-step linear-convergence certificate")?;
        writeln!(f, "  smoothness      L_bar = {:.9e}", self.l_bar)?;
        writeln!(f, "  curvature       mu_bar = {:.9e}", self.mu_bar)?;
        writeln!(
            f,
            "  normalization   sigma_min(D) = {:.9e}, sigma_max(D) = {:.9e}",
            self.sigma_min_d, self.sigma_max_d
        )?;
        writeln!(
            f,
            "  metric margin   lambda_min(N + N^T) = {:.9e}",
            self.lambda_min_n_sym
        )?;
        writeln!(
            f,
            "  constants       c1 = {:.9e}  c2 = {:.9e}  c3 = {:.9e}",
            self.c1, self.c2, self.c3
        )?;
        writeln!(
            f,
            "                  c4 = {:.9e}  c5 = {:.9e}  c6 = {:.9e}",
            self.c4, self.c5, self.c6
        )?;
        writeln!(
            f,
            "                  c7 = {:.9e}  c8 = {:.9e}",
            self.c7, self.c8
        )?;
        writeln!(
            f,
            "  discriminants   Delta1 = {:.9e}  Delta2 = {:.9e}  Delta3 = {:.9e}",
            self.delta1, self.delta2, self.delta3
        )?;
        writeln!(
            f,
            "  a = {:.9}  (window ({:.9}, {:.9}))",
            self.a, self.a_window.0, self.a_window.1
        )?;
        match self.eta_window {
            Some((lo, hi)) => writeln!(f, "  eta = {:.9e}  (window ({lo:.9e}, {hi:.9e}))", self.eta)?,
            None => writeln!(f, "  eta = {:.9e}  (window undefined)", self.eta)?,
        }
        match self.sigma_window {
            Some((lo, hi)) => {
                writeln!(f, "  sigma = {:.9e}  (window ({lo:.9e}, {hi:.9e}))", self.sigma)?
            }
            None => writeln!(f, "  sigma = {:.9e}  (window undefined)", self.sigma)?,
        }
        match self.alpha_window {
            Some((lo, hi)) => writeln!(f, "  alpha interval: ({lo:.9e}, {hi:.9e})")?,
            None => writeln!(f, "  alpha interval: undefined")?,
        }
        match self.delta_bound {
            Some(d) => writeln!(f, "  contraction margin delta <= {d:.9e}")?,
            None => writeln!(f, "  contraction margin: not available")?,
        }
        for note in &self.notes {
            writeln!(f, "  note: {note}")?;
        }
        if self.feasible {
            writeln!(f, "  feasible: yes")?;
        } else {
            writeln!(f, "  feasible: no")?;
            if let Some(v) = &self.first_violation {
                writeln!(f, "  first violated condition: {v}")?;
            }
        }
        Ok(())
    }
}

/// Result of a geometric-rate fit on a positive decaying series.
#[derive(Debug, Clone, Copy)]
pub struct RateFit {
    /// Per-round factor `exp(slope)`, < 1 for decaying series.
    pub rate: f64,
    pub r2: f64,
    pub points: usize,
}

/// Least-squares fit of `log v` against `t`; ignores non-positive values,
/// requires at least 10 usable samples.
pub fn fit_linear_rate(series: &[(usize, f64)]) -> Result<RateFit, AnalysisError> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|(_, v)| *v > 0.0 && v.is_finite())
        .map(|(t, v)| (*t as f64, v.ln()))
        .collect();
    if pts.len() < 10 {
        return Err(AnalysisError::NotEnoughSamples {
            needed: 10,
            got: pts.len(),
        });
    }
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|(t, _)| t).sum::<f64>() / n;
    let mean_y = pts.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut stt = 0.0;
    let mut sty = 0.0;
    for (t, y) in &pts {
        stt += (t - mean_t) * (t - mean_t);
        sty += (t - mean_t) * (y - mean_y);
    }
    let slope = sty / stt;
    let intercept = mean_y - slope * mean_t;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (t, y) in &pts {
        let pred = slope * t + intercept;
        ss_res += (y - pred) * (y - pred);
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(RateFit {
        rate: slope.exp(),
        r2,
        points: pts.len(),
    })
}

/// Outcome of checking `‖v^t‖²_G ≥ (1 + δ)‖v^{t+1}‖²_G` along a history.
#[derive(Debug, Clone, Copy)]
pub struct ContractionReport {
    pub ok: bool,
    pub rounds_checked: usize,
    pub first_violation: Option<usize>,
    /// Minimum of `‖v^t‖²/‖v^{t+1}‖² − 1` over checked rounds.
    pub min_margin: f64,
}

/// Check the G-norm contraction of `v^t = (z^t − z*, u^t − u*)` for rounds
/// `t ≥ 2` along a recorded z-history.
pub fn g_norm_contraction_check(
    z_hist: &[Array2<f64>],
    z_star: &Array2<f64>,
    u_star: &Array2<f64>,
    g_mat: &Array2<f64>,
    delta: f64,
) -> Result<ContractionReport, AnalysisError> {
    if z_hist.len() < 4 {
        return Err(AnalysisError::HistoryRequired);
    }
    let (n, p) = z_hist[0].dim();
    if z_star.dim() != (n, p) || u_star.dim() != (n, p) {
        return Err(AnalysisError::Shape(
            "z* and u* must match the history shape".into(),
        ));
    }
    let u_hist = accumulate_u(z_hist)?;
    let norms: Vec<f64> = z_hist
        .iter()
        .zip(u_hist.iter())
        .map(|(z, u)| {
            let mut v = Array2::zeros((2 * n, p));
            for i in 0..n {
                for c in 0..p {
                    v[[i, c]] = z[[i, c]] - z_star[[i, c]];
                    v[[n + i, c]] = u[[i, c]] - u_star[[i, c]];
                }
            }
            g_norm_sq(g_mat, &v)
        })
        .collect();
    let mut ok = true;
    let mut first_violation = None;
    let mut min_margin = f64::INFINITY;
    let mut rounds_checked = 0;
    for t in 2..norms.len() - 1 {
        rounds_checked += 1;
        let cur = norms[t];
        let next = norms[t + 1];
        if next <= 0.0 {
            // Converged exactly; contraction holds trivially from here on.
            continue;
        }
        let margin = cur / next - 1.0;
        if margin < min_margin {
            min_margin = margin;
        }
        if cur < (1.0 + delta) * next && ok {
            ok = false;
            first_violation = Some(t);
        }
    }
    Ok(ContractionReport {
        ok,
        rounds_checked,
        first_violation,
        min_margin,
    })
}
