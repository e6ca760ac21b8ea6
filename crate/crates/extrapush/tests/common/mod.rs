//! Shared helpers for the integration tests: a second, independently coded
//! route to every quantity the acceptance checks compare.
//!
//! Nothing here calls into the library's numerics. Eigenvalues come from
//! Householder tridiagonalization plus implicit-shift QL (the library uses
//! cyclic Jacobi), stationary vectors from Gaussian elimination (the library
//! uses power iteration), and the step-size certificate chain is transcribed
//! from scratch on plain `Vec<Vec<f64>>` matrices.
#![allow(dead_code)]

use std::collections::BTreeSet;

use extrapush::graph::DirectedGraph;
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Small generic helpers
// ---------------------------------------------------------------------------

pub fn frob2(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Relative difference on the scale `max(1, |a|, |b|)`.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

pub fn ms(t: std::time::Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

// ---------------------------------------------------------------------------
// Symmetric eigenvalues: Householder reduction + implicit-shift QL
// ---------------------------------------------------------------------------

fn hypot_safe(a: f64, b: f64) -> f64 {
    let (aa, ab) = (a.abs(), b.abs());
    if aa > ab {
        let r = ab / aa;
        aa * (1.0 + r * r).sqrt()
    } else if ab > 0.0 {
        let r = aa / ab;
        ab * (1.0 + r * r).sqrt()
    } else {
        0.0
    }
}

/// All eigenvalues of (the symmetric part of) `m`, ascending.
///
/// Classic EISPACK route: reduce to tridiagonal form with Householder
/// reflections, then chase the subdiagonal with implicitly shifted QL sweeps.
pub fn eig_sym_oracle(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "eig_sym_oracle needs a square matrix");
    if n == 0 {
        return Vec::new();
    }
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| 0.5 * (m[[i, j]] + m[[j, i]])).collect())
        .collect();
    let mut d = vec![0.0_f64; n];
    let mut e = vec![0.0_f64; n];

    // Householder reduction (values-only tred2).
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let mut scale = 0.0;
            for k in 0..=l {
                scale += a[i][k].abs();
            }
            if scale == 0.0 {
                e[i] = a[i][l];
            } else {
                for k in 0..=l {
                    a[i][k] /= scale;
                    h += a[i][k] * a[i][k];
                }
                let mut f = a[i][l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i][l] = f - g;
                f = 0.0;
                for j in 0..=l {
                    let mut gj = 0.0;
                    for k in 0..=j {
                        gj += a[j][k] * a[i][k];
                    }
                    for k in (j + 1)..=l {
                        gj += a[k][j] * a[i][k];
                    }
                    e[j] = gj / h;
                    f += e[j] * a[i][j];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let fj = a[i][j];
                    let gj = e[j] - hh * fj;
                    e[j] = gj;
                    for k in 0..=j {
                        let upd = fj * e[k] + gj * a[i][k];
                        a[j][k] -= upd;
                    }
                }
            }
        } else {
            e[i] = a[i][l];
        }
        d[i] = h;
    }
    for (i, di) in d.iter_mut().enumerate() {
        *di = a[i][i];
    }

    // Implicit-shift QL on the tridiagonal (d, e).
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut split = l;
            while split + 1 < n {
                let dd = d[split].abs() + d[split + 1].abs();
                if e[split].abs() <= f64::EPSILON * dd {
                    break;
                }
                split += 1;
            }
            if split == l {
                break;
            }
            iter += 1;
            assert!(iter <= 64, "QL sweep failed to converge");
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = hypot_safe(g, 1.0);
            let shifted = if g >= 0.0 { g + r } else { g - r };
            g = d[split] - d[l] + e[l] / shifted;
            let (mut s, mut c) = (1.0_f64, 1.0_f64);
            let mut p = 0.0;
            let mut underflow = false;
            let mut i2 = split;
            while i2 > l {
                let iu = i2 - 1;
                let f = s * e[iu];
                let b = c * e[iu];
                r = hypot_safe(f, g);
                e[iu + 1] = r;
                if r == 0.0 {
                    d[iu + 1] -= p;
                    e[split] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[iu + 1] - p;
                r = (d[iu] - g) * s + 2.0 * c * b;
                p = s * r;
                d[iu + 1] = g + p;
                g = c * r - b;
                i2 -= 1;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[split] = 0.0;
        }
    }
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    d
}

// ---------------------------------------------------------------------------
// Dense linear solve (partial-pivot Gaussian elimination)
// ---------------------------------------------------------------------------

pub fn gauss_solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| {
            m[i][col]
                .abs()
                .partial_cmp(&m[j][col].abs())
                .expect("no NaNs in pivots")
        })?;
        if m[piv][col].abs() < 1e-14 {
            return None;
        }
        m.swap(col, piv);
        b.swap(col, piv);
        let pivot_row = m[col].clone();
        let pivot_rhs = b[col];
        for row in (col + 1)..n {
            let f = m[row][col] / pivot_row[col];
            if f != 0.0 {
                for k in col..n {
                    m[row][k] -= f * pivot_row[k];
                }
                b[row] -= f * pivot_rhs;
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

/// Stationary vector of a column-stochastic matrix by direct elimination:
/// `(A − I)φ = 0` with the last equation replaced by `Σφ = 1`.
pub fn stationary_oracle(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| a[[i, j]] - if i == j { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut b = vec![0.0; n];
    for v in m[n - 1].iter_mut() {
        *v = 1.0;
    }
    b[n - 1] = 1.0;
    gauss_solve(m, b).expect("irreducible stochastic matrix gives a nonsingular pinned system")
}

// ---------------------------------------------------------------------------
// Random strongly connected digraphs
// ---------------------------------------------------------------------------

/// A random Hamiltonian cycle (guaranteeing strong connectivity) plus up to
/// `extra_edges` additional random non-self arcs.
pub fn random_strongly_connected(
    n: usize,
    extra_edges: usize,
    rng: &mut ChaCha8Rng,
) -> DirectedGraph {
    assert!(n >= 2, "need at least two nodes for a cycle");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut set: BTreeSet<(usize, usize)> = BTreeSet::new();
    for k in 0..n {
        set.insert((order[k], order[(k + 1) % n]));
    }
    let mut added = 0;
    let mut attempts = 0;
    while added < extra_edges && attempts < 60 * extra_edges + 100 {
        attempts += 1;
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i != j && set.insert((i, j)) {
            added += 1;
        }
    }
    let edges: Vec<(usize, usize)> = set.into_iter().collect();
    DirectedGraph::new(n, &edges).expect("a directed cycle is strongly connected")
}

// ---------------------------------------------------------------------------
// Central finite differences
// ---------------------------------------------------------------------------

pub fn central_diff_grad<F: Fn(&Array1<f64>) -> f64>(
    f: F,
    x: &Array1<f64>,
    h: f64,
) -> Array1<f64> {
    let mut g = Array1::zeros(x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        g[k] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

// ---------------------------------------------------------------------------
// Independent transcription of the step-size certificate chain
// ---------------------------------------------------------------------------

type Mat = Vec<Vec<f64>>;

fn vv_from(a: &Array2<f64>) -> Mat {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[[i, j]]).collect())
        .collect()
}

fn vv_to_array(m: &Mat) -> Array2<f64> {
    let n = m.len();
    let p = m[0].len();
    Array2::from_shape_fn((n, p), |(i, j)| m[i][j])
}

fn vv_t(m: &Mat) -> Mat {
    let n = m.len();
    let p = m[0].len();
    (0..p).map(|j| (0..n).map(|i| m[i][j]).collect()).collect()
}

fn vv_mul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let k = b.len();
    let p = b[0].len();
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for l in 0..k {
            let ail = a[i][l];
            if ail != 0.0 {
                for j in 0..p {
                    out[i][j] += ail * b[l][j];
                }
            }
        }
    }
    out
}

fn eigs_vv(m: &Mat) -> Vec<f64> {
    eig_sym_oracle(&vv_to_array(m))
}

fn smallest_nonzero(values: &[f64], rel_tol: f64) -> Option<f64> {
    let top = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cut = rel_tol * top.max(1e-300);
    values
        .iter()
        .copied()
        .filter(|v| v.abs() > cut)
        .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.min(v))))
}

/// Per-agent smoothness/curvature of a least-squares family via the QL
/// eigensolver: `L_f = maxᵢ λ_max(BᵢᵀBᵢ)`, `S_f = minᵢ λ_min`, clamped to 0
/// below `1e-10·L_f`.
pub fn ls_constants_oracle(blocks: &[Array2<f64>]) -> (f64, f64) {
    let mut l_f = 0.0_f64;
    let mut s_f = f64::INFINITY;
    for b in blocks {
        let p = b.ncols();
        let mut gram = Array2::zeros((p, p));
        for i in 0..p {
            for j in 0..p {
                let mut acc = 0.0;
                for k in 0..b.nrows() {
                    acc += b[[k, i]] * b[[k, j]];
                }
                gram[[i, j]] = acc;
            }
        }
        let ev = eig_sym_oracle(&gram);
        l_f = l_f.max(ev[ev.len() - 1].max(0.0));
        s_f = s_f.min(ev[0].max(0.0));
    }
    if s_f <= 1e-10 * l_f {
        s_f = 0.0;
    }
    (l_f, s_f)
}

/// Everything the certificate chain produces, recomputed independently.
#[derive(Debug, Clone)]
pub struct CertOracle {
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
    pub alpha_window: Option<(f64, f64)>,
    pub delta_bound: Option<f64>,
    pub feasible: bool,
    /// Coarse label of the first failed condition, in chain order.
    pub violated: Option<&'static str>,
}

/// Walk the certificate chain from the mixing matrix, a stationary vector,
/// and the objective constants. The same deterministic fallback parameters
/// are used as in the library (grid for `a`, curvature fallback for `η`,
/// half-window fallback for `σ`) so the two routes are comparable
/// number-for-number even on infeasible instances.
pub fn certificate_oracle(a_mat: &Array2<f64>, phi: &[f64], l_f: f64, s_f: f64) -> CertOracle {
    let n = phi.len();
    assert_eq!(a_mat.nrows(), n);
    let d: Vec<f64> = phi.iter().map(|p| n as f64 * p).collect();
    let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let dmax = d.iter().cloned().fold(0.0_f64, f64::max);
    let l_bar = l_f / (dmin * dmin);
    let mu_bar = s_f / (dmax * dmax);

    let a = vv_from(a_mat);
    let mut abar = vec![vec![0.0; n]; n];
    let mut nm = vec![vec![0.0; n]; n];
    let mut mm = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let eye = if i == j { 1.0 } else { 0.0 };
            abar[i][j] = 0.5 * (eye + a[i][j]);
            nm[i][j] = abar[i][j] / d[i];
            mm[i][j] = (abar[i][j] - a[i][j]) / d[i];
        }
    }

    let nt = vv_t(&nm);
    let mt = vv_t(&mm);
    let mut n_sym = vec![vec![0.0; n]; n];
    let mut m_sym_half = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            n_sym[i][j] = nm[i][j] + nm[j][i];
            m_sym_half[i][j] = 0.5 * (mm[i][j] + mm[j][i]);
        }
    }
    let ev_n_sym = eigs_vv(&n_sym);
    let lambda_min_n_sym = ev_n_sym[0];
    let lambda_max_n_sym_half = 0.5 * ev_n_sym[n - 1];
    let ev_mmt = eigs_vv(&vv_mul(&mm, &mt));
    let lambda_max_mmt = ev_mmt[n - 1];
    let ev_mtm = eigs_vv(&vv_mul(&mt, &mm));
    let lambda_min_nz_mtm =
        smallest_nonzero(&ev_mtm, 1e-10).expect("mixing deviation must be nonzero");
    let ev_nnt = eigs_vv(&vv_mul(&nm, &nt));
    let lambda_max_nnt = ev_nnt[n - 1];
    let ev_ntn = eigs_vv(&vv_mul(&nt, &nm));
    let lambda_max_ntn = ev_ntn[n - 1];
    let ev_msh = eigs_vv(&m_sym_half);
    let lambda_max_m_sym_half = ev_msh[n - 1];

    let c1 = lambda_max_mmt / lambda_min_nz_mtm;
    let c2 = lambda_max_m_sym_half / lambda_min_nz_mtm;
    let c3 = lambda_max_nnt + 3.0 * c1 * lambda_max_ntn;
    let c7 = lambda_min_n_sym * lambda_min_n_sym / (4.0 * c3);

    let mut violated: Option<&'static str> = None;
    let flag = |label: &'static str, v: &mut Option<&'static str>| {
        if v.is_none() {
            *v = Some(label);
        }
    };

    if !(lambda_min_n_sym > 0.0) {
        flag("metric", &mut violated);
    }
    if !(mu_bar > 0.0) {
        flag("strong convexity", &mut violated);
    }

    let a_lo = (2.0 - c7) / (2.0 + c7);
    let a_window = (a_lo, 1.0);
    let grid = [0.5, 0.7, 0.9];
    let a_pick = grid
        .iter()
        .copied()
        .find(|&g| g > a_lo && g < 1.0)
        .unwrap_or(0.5 * (a_lo + 1.0));
    if !(a_pick > a_lo && a_pick < 1.0) {
        flag("a window", &mut violated);
    }
    let c8 = a_pick * (c7 + 2.0) - (2.0 - c7);

    let one_minus_a2 = 1.0 - a_pick * a_pick;
    let ratio_rhs =
        ((6.0 * c1 / one_minus_a2).sqrt() + (one_minus_a2 / (6.0 * c1)).sqrt() / c8) * l_bar;
    if !(mu_bar > ratio_rhs) {
        flag("ratio", &mut violated);
    }

    let eta_disc = 1.0 - 4.0 * l_bar * l_bar / (c8 * mu_bar * mu_bar);
    let eta_window = if eta_disc >= 0.0 && c8 > 0.0 && mu_bar > 0.0 {
        let root = eta_disc.sqrt();
        let cap = 2.0 * (mu_bar - (6.0 * c1 / one_minus_a2).sqrt() * l_bar);
        Some((
            mu_bar * (1.0 - root),
            (mu_bar * (1.0 + root)).min(cap),
        ))
    } else {
        None
    };
    let eta = match eta_window {
        Some((lo, hi)) if lo < hi => 0.5 * (lo + hi),
        _ => {
            if mu_bar > 0.0 {
                mu_bar
            } else {
                l_bar.max(1.0)
            }
        }
    };
    match eta_window {
        None => flag("eta window", &mut violated),
        Some((lo, hi)) => {
            if !(lo < hi && eta > lo && eta < hi) {
                flag("eta window", &mut violated);
            }
        }
    }

    let gap = mu_bar - 0.5 * eta;
    let delta1 = gap * gap - 6.0 * c1 * l_bar * l_bar;
    let c4 = gap + delta1.max(0.0).sqrt();
    let c5 = l_bar * l_bar / eta;
    let c6 = (2.0 * c4 * c5 + 12.0 * c1 * l_bar * l_bar) / (c4 * c4);

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
    let sigma = match sigma_window {
        Some((lo, hi)) if lo < hi => 0.5 * (lo + hi),
        _ => lambda_min_n_sym.max(1e-12) / (2.0 * c3),
    };
    match sigma_window {
        None => flag("sigma window", &mut violated),
        Some((lo, hi)) => {
            if !(sigma > lo && sigma < hi) {
                flag("sigma window", &mut violated);
            }
        }
    }

    if delta1 < 0.0 {
        flag("alpha interval", &mut violated);
    }
    let delta2 = l_bar.powi(4) / (4.0 * eta * eta)
        - 3.0 * c1 * l_bar * l_bar * sigma * (c3 * sigma - lambda_min_n_sym);
    if delta2 < 0.0 {
        flag("alpha interval", &mut violated);
    }
    let denom = 3.0 * c1 * l_bar * l_bar * sigma;
    let alpha_window = if delta1 >= 0.0 && delta2 >= 0.0 && denom > 0.0 {
        let lo = (gap - delta1.sqrt()) / denom;
        let hi = ((gap + delta1.sqrt()) / denom)
            .min((-l_bar * l_bar / (2.0 * eta) + delta2.sqrt()) / denom);
        Some((lo, hi))
    } else {
        None
    };
    match alpha_window {
        Some((lo, hi)) if lo < hi && hi > 0.0 => {}
        Some(_) => flag("alpha interval", &mut violated),
        None => flag("alpha interval", &mut violated),
    }

    let delta_bound = match alpha_window {
        Some((lo, hi)) if lo < hi && hi > 0.0 => {
            let alpha = 0.5 * (lo + hi);
            let num1 =
                -1.0 / sigma + gap * alpha - 1.5 * c1 * l_bar * l_bar * sigma * alpha * alpha;
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
                flag("contraction", &mut violated);
                None
            }
        }
        _ => None,
    };

    CertOracle {
        l_bar,
        mu_bar,
        sigma_min_d: dmin,
        sigma_max_d: dmax,
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
        a: a_pick,
        a_window,
        eta,
        eta_window,
        sigma,
        sigma_window,
        alpha_window,
        delta_bound,
        feasible: violated.is_none(),
        violated,
    }
}
