//! Agent objectives: decentralized least squares, Huber regression, consensus
//! averaging, and the zero objective, plus seeded experiment generation with
//! ground truth.
//!
//! Each agent `i` privately holds `fᵢ`; the network minimizes `f = Σᵢ fᵢ`.
//! Stacked iterates are `n×p` matrices whose row `i` is agent `i`'s copy.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::linalg::{
    cholesky, cholesky_solve, mat_t_vec, mat_vec, orthonormal_columns, pinv_psd, sym_eigen,
    transpose, LinalgError,
};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("agent {agent}: data block is {rows}x{cols} but rhs has length {rhs}")]
    BlockShape {
        agent: usize,
        rows: usize,
        cols: usize,
        rhs: usize,
    },
    #[error("agent {agent}: dimension {got} differs from shared dimension {expect}")]
    DimensionMismatch {
        agent: usize,
        got: usize,
        expect: usize,
    },
    #[error("need at least one agent")]
    NoAgents,
    #[error("Huber threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("shaped-spectrum generation needs total rows ≥ dimension (got {rows} < {p})")]
    TooFewRows { rows: usize, p: usize },
    #[error("could not place the experiment after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: usize, reason: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("instance file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("instance file {path}: unsupported version {version}")]
    Version { path: String, version: u32 },
}

/// Per-agent least-squares data: `fᵢ(x) = ½‖Bᵢx − bᵢ‖²`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeastSquaresData {
    pub blocks: Vec<Array2<f64>>,
    pub rhs: Vec<Array1<f64>>,
}

impl LeastSquaresData {
    pub fn new(blocks: Vec<Array2<f64>>, rhs: Vec<Array1<f64>>) -> Result<Self, ObjectiveError> {
        if blocks.is_empty() || blocks.len() != rhs.len() {
            return Err(ObjectiveError::NoAgents);
        }
        let p = blocks[0].ncols();
        for (agent, (b, r)) in blocks.iter().zip(rhs.iter()).enumerate() {
            if b.nrows() != r.len() {
                return Err(ObjectiveError::BlockShape {
                    agent,
                    rows: b.nrows(),
                    cols: b.ncols(),
                    rhs: r.len(),
                });
            }
            if b.ncols() != p {
                return Err(ObjectiveError::DimensionMismatch {
                    agent,
                    got: b.ncols(),
                    expect: p,
                });
            }
        }
        Ok(Self { blocks, rhs })
    }
}

/// Per-agent Huber regression data: `fᵢ(x) = Σₖ H_ξ((Bᵢx − bᵢ)ₖ)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HuberData {
    pub blocks: Vec<Array2<f64>>,
    pub rhs: Vec<Array1<f64>>,
    /// Huber knee ξ: quadratic inside `|a| ≤ ξ`, linear outside.
    pub threshold: f64,
}

impl HuberData {
    pub fn new(
        blocks: Vec<Array2<f64>>,
        rhs: Vec<Array1<f64>>,
        threshold: f64,
    ) -> Result<Self, ObjectiveError> {
        if !(threshold > 0.0) {
            return Err(ObjectiveError::BadThreshold(threshold));
        }
        let ls = LeastSquaresData::new(blocks, rhs)?;
        Ok(Self {
            blocks: ls.blocks,
            rhs: ls.rhs,
            threshold,
        })
    }
}

/// Scalar Huber value and derivative at `a`: `½a²` inside the knee,
/// `ξ(|a| − ξ/2)` outside, derivative `clip(a, −ξ, ξ)`.
pub fn huber_value_grad(a: f64, threshold: f64) -> (f64, f64) {
    if a.abs() <= threshold {
        (0.5 * a * a, a)
    } else {
        (
            threshold * (a.abs() - 0.5 * threshold),
            threshold * a.signum(),
        )
    }
}

/// The objective family shared by all solvers.
#[derive(Debug, Clone)]
pub enum Objective {
    LeastSquares(LeastSquaresData),
    Huber(HuberData),
    /// `fᵢ(x) = ½‖x − cᵢ‖²` with per-agent targets as rows.
    Consensus { targets: Array2<f64> },
    /// `fᵢ ≡ 0`; reduces the two-step methods to pure consensus dynamics.
    Zero { n: usize, p: usize },
}

impl Objective {
    pub fn n(&self) -> usize {
        match self {
            Objective::LeastSquares(d) => d.blocks.len(),
            Objective::Huber(d) => d.blocks.len(),
            Objective::Consensus { targets } => targets.nrows(),
            Objective::Zero { n, .. } => *n,
        }
    }

    pub fn p(&self) -> usize {
        match self {
            Objective::LeastSquares(d) => d.blocks[0].ncols(),
            Objective::Huber(d) => d.blocks[0].ncols(),
            Objective::Consensus { targets } => targets.ncols(),
            Objective::Zero { p, .. } => *p,
        }
    }

    /// `fᵢ` evaluated at one point.
    pub fn value_agent(&self, i: usize, x: &Array1<f64>) -> f64 {
        match self {
            Objective::LeastSquares(d) => {
                let r = residual(&d.blocks[i], x, &d.rhs[i]);
                0.5 * r.iter().map(|v| v * v).sum::<f64>()
            }
            Objective::Huber(d) => {
                let r = residual(&d.blocks[i], x, &d.rhs[i]);
                r.iter().map(|&a| huber_value_grad(a, d.threshold).0).sum()
            }
            Objective::Consensus { targets } => {
                let mut s = 0.0;
                for j in 0..targets.ncols() {
                    let d = x[j] - targets[[i, j]];
                    s += d * d;
                }
                0.5 * s
            }
            Objective::Zero { .. } => 0.0,
        }
    }

    /// `∇fᵢ` at one point.
    pub fn grad_agent(&self, i: usize, x: &Array1<f64>) -> Array1<f64> {
        match self {
            Objective::LeastSquares(d) => {
                let r = residual(&d.blocks[i], x, &d.rhs[i]);
                mat_t_vec(&d.blocks[i], &r)
            }
            Objective::Huber(d) => {
                let mut r = residual(&d.blocks[i], x, &d.rhs[i]);
                for v in r.iter_mut() {
                    *v = v.clamp(-d.threshold, d.threshold);
                }
                mat_t_vec(&d.blocks[i], &r)
            }
            Objective::Consensus { targets } => {
                let mut g = x.clone();
                for j in 0..targets.ncols() {
                    g[j] -= targets[[i, j]];
                }
                g
            }
            Objective::Zero { p, .. } => Array1::zeros(*p),
        }
    }

    /// Row `i` of the result is `∇fᵢ(xᵢ)` for the stacked iterate `x`.
    pub fn grad_stack(&self, x: &Array2<f64>) -> Array2<f64> {
        let n = self.n();
        let p = self.p();
        assert_eq!(x.dim(), (n, p), "stacked iterate must be n×p");
        let mut g = Array2::zeros((n, p));
        for i in 0..n {
            let xi = x.row(i).to_owned();
            let gi = self.grad_agent(i, &xi);
            for j in 0..p {
                g[[i, j]] = gi[j];
            }
        }
        g
    }

    /// Total objective `Σᵢ fᵢ(xᵢ)` on a stacked iterate.
    pub fn value_stack(&self, x: &Array2<f64>) -> f64 {
        (0..self.n())
            .map(|i| self.value_agent(i, &x.row(i).to_owned()))
            .sum()
    }

    /// Total objective with every agent at the same point.
    pub fn value_at(&self, x: &Array1<f64>) -> f64 {
        (0..self.n()).map(|i| self.value_agent(i, x)).sum()
    }
}

fn residual(b: &Array2<f64>, x: &Array1<f64>, rhs: &Array1<f64>) -> Array1<f64> {
    let mut r = mat_vec(b, x);
    for (v, t) in r.iter_mut().zip(rhs.iter()) {
        *v -= t;
    }
    r
}

/// Centralized least-squares solution of the stacked system.
#[derive(Debug, Clone)]
pub struct LsSolution {
    pub x: Array1<f64>,
    /// True when the normal matrix was rank deficient and the minimum-norm
    /// solution was returned instead.
    pub degenerate: bool,
    /// `‖Σ Bᵢᵀ(Bᵢx − bᵢ)‖` at the returned point.
    pub normal_residual: f64,
}

/// Solve `min ½Σ‖Bᵢx − bᵢ‖²` by Cholesky on the normal equations, falling
/// back to the eigendecomposition pseudoinverse when rank deficient.
pub fn ls_exact_solution(d: &LeastSquaresData) -> Result<LsSolution, ObjectiveError> {
    let p = d.blocks[0].ncols();
    let mut s = Array2::zeros((p, p));
    let mut rhs = Array1::zeros(p);
    for (b, y) in d.blocks.iter().zip(d.rhs.iter()) {
        let bt = transpose(b);
        for i in 0..p {
            for j in 0..p {
                let mut acc = 0.0;
                for k in 0..b.nrows() {
                    acc += bt[[i, k]] * b[[k, j]];
                }
                s[[i, j]] += acc;
            }
        }
        let bty = mat_t_vec(b, y);
        for i in 0..p {
            rhs[i] += bty[i];
        }
    }
    let (x, degenerate) = match cholesky(&s) {
        Ok(l) => (cholesky_solve(&l, &rhs), false),
        Err(_) => {
            let pinv = pinv_psd(&s, 1e-12)?;
            (mat_vec(&pinv, &rhs), true)
        }
    };
    let mut grad = mat_vec(&s, &x);
    for (g, r) in grad.iter_mut().zip(rhs.iter()) {
        *g -= r;
    }
    let normal_residual = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(LsSolution {
        x,
        degenerate,
        normal_residual,
    })
}

/// Smoothness and strong-convexity constants of a least-squares family.
#[derive(Debug, Clone)]
pub struct LsConstants {
    /// `L_f = maxᵢ λ_max(BᵢᵀBᵢ)`.
    pub l_f: f64,
    /// `S_f = minᵢ λ_min(BᵢᵀBᵢ)`, clamped to 0 when numerically zero.
    pub s_f: f64,
    /// Per-agent `(λ_max, λ_min)` pairs.
    pub per_agent: Vec<(f64, f64)>,
}

pub fn ls_constants(blocks: &[Array2<f64>]) -> Result<LsConstants, ObjectiveError> {
    let mut per_agent = Vec::with_capacity(blocks.len());
    let mut l_f = 0.0_f64;
    let mut s_f = f64::INFINITY;
    for b in blocks {
        let (rows, cols) = b.dim();
        // Wide blocks (rows < cols) are rank deficient: BᵀB shares its
        // nonzero spectrum with the smaller BBᵀ and λ_min(BᵀB) is exactly
        // zero, so the eigensolve can run on the rows×rows Gram instead.
        let (hi, lo) = if rows < cols {
            let mut g = Array2::zeros((rows, rows));
            for i in 0..rows {
                for j in 0..rows {
                    let mut acc = 0.0;
                    for k in 0..cols {
                        acc += b[[i, k]] * b[[j, k]];
                    }
                    g[[i, j]] = acc;
                }
            }
            let eig = sym_eigen(&g, false)?;
            (eig.values[eig.values.len() - 1].max(0.0), 0.0)
        } else {
            let g = crate::linalg::gram(b);
            let eig = sym_eigen(&g, false)?;
            (
                eig.values[eig.values.len() - 1].max(0.0),
                eig.values[0].max(0.0),
            )
        };
        per_agent.push((hi, lo));
        l_f = l_f.max(hi);
        s_f = s_f.min(lo);
    }
    if s_f <= 1e-10 * l_f {
        s_f = 0.0;
    }
    Ok(LsConstants {
        l_f,
        s_f,
        per_agent,
    })
}

/// What to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    LeastSquares,
    Huber,
    Consensus,
}

/// Parameters for seeded experiment generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub kind: ProblemKind,
    pub n: usize,
    pub p: usize,
    /// Rows of data per agent.
    pub m_per_agent: usize,
    pub seed: u64,
    /// Range of squared singular values of the stacked data matrix.
    pub spectrum: (f64, f64),
    /// Scale of the additive measurement noise.
    pub noise_scale: f64,
    /// Huber knee ξ (Huber only).
    pub threshold: f64,
    /// How deep in the linear zone the initial point starts, in units of ξ
    /// (Huber only). Larger values lengthen the sublinear phase.
    pub zone_depth: f64,
}

impl GenSpec {
    pub fn least_squares(n: usize, p: usize, m_per_agent: usize, seed: u64) -> Self {
        Self {
            kind: ProblemKind::LeastSquares,
            n,
            p,
            m_per_agent,
            seed,
            spectrum: (2.5, 9.0),
            noise_scale: 0.5,
            threshold: 0.0,
            zone_depth: 0.0,
        }
    }

    pub fn huber(n: usize, p: usize, m_per_agent: usize, seed: u64, threshold: f64) -> Self {
        Self {
            kind: ProblemKind::Huber,
            n,
            p,
            m_per_agent,
            seed,
            spectrum: (2.5, 9.0),
            noise_scale: 0.25,
            threshold,
            zone_depth: 50.0,
        }
    }

    pub fn consensus(n: usize, p: usize, seed: u64) -> Self {
        Self {
            kind: ProblemKind::Consensus,
            n,
            p,
            m_per_agent: 0,
            seed,
            spectrum: (0.0, 0.0),
            noise_scale: 0.0,
            threshold: 0.0,
            zone_depth: 0.0,
        }
    }
}

/// A generated experiment: objective, ground truth, and initial point.
#[derive(Debug, Clone)]
pub struct GeneratedInstance {
    pub objective: Objective,
    /// Minimizer of the total objective.
    pub x_star: Array1<f64>,
    /// Stacked `n×p` initial point (all agents identical for Huber placement,
    /// zeros otherwise).
    pub x0: Array2<f64>,
    pub spec: GenSpec,
}

fn normals(rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    (0..count).map(|_| rng.sample(StandardNormal)).collect()
}

/// Stacked data matrix with singular values drawn from the requested range:
/// `B = U·diag(s)·Vᵀ` with orthonormal `U` (M×p) and `V` (p×p),
/// `sⱼ² ~ Uniform[spectrum]`. Keeps every agent block well conditioned in
/// aggregate so fixed-step runs converge at the documented budgets.
fn shaped_matrix(
    rng: &mut ChaCha8Rng,
    rows: usize,
    p: usize,
    spectrum: (f64, f64),
) -> Result<Array2<f64>, ObjectiveError> {
    if rows < p {
        return Err(ObjectiveError::TooFewRows { rows, p });
    }
    let gu = Array2::from_shape_vec((rows, p), normals(rng, rows * p)).unwrap();
    let u = orthonormal_columns(&gu)?;
    let gv = Array2::from_shape_vec((p, p), normals(rng, p * p)).unwrap();
    let v = orthonormal_columns(&gv)?;
    let (lo, hi) = spectrum;
    let s: Vec<f64> = (0..p)
        .map(|_| (lo + (hi - lo) * rng.gen::<f64>()).sqrt())
        .collect();
    let mut us = u;
    for j in 0..p {
        for i in 0..rows {
            us[[i, j]] *= s[j];
        }
    }
    Ok(crate::linalg::mat_mul(&us, &transpose(&v)))
}

fn split_blocks(stacked: &Array2<f64>, rhs: &[f64], n: usize, m: usize) -> (Vec<Array2<f64>>, Vec<Array1<f64>>) {
    let p = stacked.ncols();
    let mut blocks = Vec::with_capacity(n);
    let mut rhs_out = Vec::with_capacity(n);
    for i in 0..n {
        let mut b = Array2::zeros((m, p));
        for r in 0..m {
            for c in 0..p {
                b[[r, c]] = stacked[[i * m + r, c]];
            }
        }
        blocks.push(b);
        rhs_out.push(Array1::from_iter(rhs[i * m..(i + 1) * m].iter().copied()));
    }
    (blocks, rhs_out)
}

/// Generate a seeded experiment with known ground truth.
///
/// Least squares: shaped-spectrum data, `b = B·x_gen + noise`, `x* =` the
/// normal-equation solution, `x⁰ = 0`.
///
/// Huber: same data family with smaller noise so every residual at the
/// least-squares solution is strictly inside the quadratic zone (hence the
/// Huber minimizer equals the least-squares solution), and an initial point
/// placed deep in the linear zone (every residual beyond `zone_depth·ξ`,
/// verified ≥ 1.2ξ) so runs show a sublinear phase before the linear one.
///
/// Consensus: Gaussian targets; `x*` is their mean.
pub fn generate_experiment(spec: &GenSpec) -> Result<GeneratedInstance, ObjectiveError> {
    match spec.kind {
        ProblemKind::Consensus => generate_consensus(spec),
        ProblemKind::LeastSquares => generate_least_squares(spec),
        ProblemKind::Huber => generate_huber(spec),
    }
}

fn generate_consensus(spec: &GenSpec) -> Result<GeneratedInstance, ObjectiveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let targets =
        Array2::from_shape_vec((spec.n, spec.p), normals(&mut rng, spec.n * spec.p)).unwrap();
    let mut x_star = Array1::zeros(spec.p);
    for j in 0..spec.p {
        let mut s = 0.0;
        for i in 0..spec.n {
            s += targets[[i, j]];
        }
        x_star[j] = s / spec.n as f64;
    }
    Ok(GeneratedInstance {
        objective: Objective::Consensus { targets },
        x_star,
        x0: Array2::zeros((spec.n, spec.p)),
        spec: spec.clone(),
    })
}

fn generate_least_squares(spec: &GenSpec) -> Result<GeneratedInstance, ObjectiveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rows = spec.n * spec.m_per_agent;
    let b = shaped_matrix(&mut rng, rows, spec.p, spec.spectrum)?;
    let x_gen = Array1::from(normals(&mut rng, spec.p));
    let noise = normals(&mut rng, rows);
    let mut rhs = mat_vec(&b, &x_gen);
    for (r, e) in rhs.iter_mut().zip(noise.iter()) {
        *r += spec.noise_scale * e;
    }
    let (blocks, rhs_v) = split_blocks(&b, rhs.as_slice().unwrap(), spec.n, spec.m_per_agent);
    let data = LeastSquaresData::new(blocks, rhs_v)?;
    let sol = ls_exact_solution(&data)?;
    Ok(GeneratedInstance {
        objective: Objective::LeastSquares(data),
        x_star: sol.x,
        x0: Array2::zeros((spec.n, spec.p)),
        spec: spec.clone(),
    })
}

fn generate_huber(spec: &GenSpec) -> Result<GeneratedInstance, ObjectiveError> {
    let xi = spec.threshold;
    if !(xi > 0.0) {
        return Err(ObjectiveError::BadThreshold(xi));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rows = spec.n * spec.m_per_agent;
    let b = shaped_matrix(&mut rng, rows, spec.p, spec.spectrum)?;
    let x_gen = Array1::from(normals(&mut rng, spec.p));
    let noise = normals(&mut rng, rows);

    // Shrink noise until every residual at the least-squares solution stays
    // strictly inside the quadratic zone; then the Huber and least-squares
    // minimizers coincide.
    let gram_b = crate::linalg::gram(&b);
    let chol = cholesky(&gram_b)?;
    let mut scale = spec.noise_scale;
    let mut chosen = None;
    for _attempt in 0..8 {
        let mut rhs = mat_vec(&b, &x_gen);
        for (r, e) in rhs.iter_mut().zip(noise.iter()) {
            *r += scale * e;
        }
        let x_ls = cholesky_solve(&chol, &mat_t_vec(&b, &rhs));
        let r_ls = {
            let mut r = mat_vec(&b, &x_ls);
            for (v, t) in r.iter_mut().zip(rhs.iter()) {
                *v -= t;
            }
            r
        };
        let max_abs = r_ls.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if max_abs <= 0.8 * xi {
            chosen = Some((rhs, x_ls));
            break;
        }
        scale *= 0.5;
    }
    let Some((rhs, x_ls)) = chosen else {
        return Err(ObjectiveError::GenerationFailed {
            attempts: 8,
            reason: "residuals at the least-squares solution stayed outside 0.8·ξ".into(),
        });
    };

    // Place x⁰ deep in the linear zone: alternating projection onto col(B)
    // with a sign-following clip away from (−2ξ, 2ξ), then scale so the
    // smallest residual magnitude is zone_depth·ξ.
    let mut x0_vec = None;
    for _attempt in 0..5 {
        let mut v = Array1::from(normals(&mut rng, rows));
        v.mapv_inplace(|x| if x >= 0.0 { 1.0 } else { -1.0 });
        for _ in 0..60 {
            let w = cholesky_solve(&chol, &mat_t_vec(&b, &v));
            let pv = mat_vec(&b, &w);
            for (vi, &pi) in v.iter_mut().zip(pv.iter()) {
                let s = if pi >= 0.0 { 1.0 } else { -1.0 };
                *vi = s * pi.abs().max(2.0 * xi);
            }
        }
        let min_abs = v.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        v.mapv_inplace(|x| x * (spec.zone_depth * xi / min_abs));
        let w = cholesky_solve(&chol, &mat_t_vec(&b, &v));
        let mut cand = x_ls.clone();
        for (c, &wi) in cand.iter_mut().zip(w.iter()) {
            *c += wi;
        }
        let r0 = {
            let mut r = mat_vec(&b, &cand);
            for (vv, t) in r.iter_mut().zip(rhs.iter()) {
                *vv -= t;
            }
            r
        };
        let min_r0 = r0.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        if min_r0 >= 1.2 * xi {
            x0_vec = Some(cand);
            break;
        }
    }
    let Some(x0_vec) = x0_vec else {
        return Err(ObjectiveError::GenerationFailed {
            attempts: 5,
            reason: "could not push every initial residual past 1.2·ξ".into(),
        });
    };

    let (blocks, rhs_v) = split_blocks(&b, rhs.as_slice().unwrap(), spec.n, spec.m_per_agent);
    let data = HuberData::new(blocks, rhs_v, xi)?;
    let mut x0 = Array2::zeros((spec.n, spec.p));
    for i in 0..spec.n {
        for j in 0..spec.p {
            x0[[i, j]] = x0_vec[j];
        }
    }
    Ok(GeneratedInstance {
        objective: Objective::Huber(data),
        x_star: x_ls,
        x0,
        spec: spec.clone(),
    })
}

/// On-disk instance container (JSON). Floating-point values round-trip
/// bitwise through serde_json's shortest-representation printing.
#[derive(Debug, Serialize, Deserialize)]
struct InstanceFile {
    version: u32,
    spec: GenSpec,
    blocks: Option<Vec<Array2<f64>>>,
    rhs: Option<Vec<Array1<f64>>>,
    targets: Option<Array2<f64>>,
    x_star: Array1<f64>,
    x0: Array2<f64>,
}

pub fn save_instance(path: &Path, inst: &GeneratedInstance) -> Result<(), ObjectiveError> {
    let file = match &inst.objective {
        Objective::LeastSquares(d) => InstanceFile {
            version: 1,
            spec: inst.spec.clone(),
            blocks: Some(d.blocks.clone()),
            rhs: Some(d.rhs.clone()),
            targets: None,
            x_star: inst.x_star.clone(),
            x0: inst.x0.clone(),
        },
        Objective::Huber(d) => InstanceFile {
            version: 1,
            spec: inst.spec.clone(),
            blocks: Some(d.blocks.clone()),
            rhs: Some(d.rhs.clone()),
            targets: None,
            x_star: inst.x_star.clone(),
            x0: inst.x0.clone(),
        },
        Objective::Consensus { targets } => InstanceFile {
            version: 1,
            spec: inst.spec.clone(),
            blocks: None,
            rhs: None,
            targets: Some(targets.clone()),
            x_star: inst.x_star.clone(),
            x0: inst.x0.clone(),
        },
        Objective::Zero { .. } => InstanceFile {
            version: 1,
            spec: inst.spec.clone(),
            blocks: None,
            rhs: None,
            targets: None,
            x_star: inst.x_star.clone(),
            x0: inst.x0.clone(),
        },
    };
    let json = serde_json::to_string(&file).map_err(|source| ObjectiveError::Json {
        path: path.display().to_string(),
        source,
    })?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json).map_err(|source| ObjectiveError::Io {
        path: tmp.display().to_string(),
        source,
    })?;
    std::fs::rename(&tmp, path).map_err(|source| ObjectiveError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_instance(path: &Path) -> Result<GeneratedInstance, ObjectiveError> {
    let text = std::fs::read_to_string(path).map_err(|source| ObjectiveError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: InstanceFile =
        serde_json::from_str(&text).map_err(|source| ObjectiveError::Json {
            path: path.display().to_string(),
            source,
        })?;
    if file.version != 1 {
        return Err(ObjectiveError::Version {
            path: path.display().to_string(),
            version: file.version,
        });
    }
    let objective = match file.spec.kind {
        ProblemKind::LeastSquares => Objective::LeastSquares(LeastSquaresData::new(
            file.blocks.unwrap_or_default(),
            file.rhs.unwrap_or_default(),
        )?),
        ProblemKind::Huber => Objective::Huber(HuberData::new(
            file.blocks.unwrap_or_default(),
            file.rhs.unwrap_or_default(),
            file.spec.threshold,
        )?),
        ProblemKind::Consensus => Objective::Consensus {
            targets: file.targets.unwrap_or_default(),
        },
    };
    Ok(GeneratedInstance {
        objective,
        x_star: file.x_star,
        x0: file.x0,
        spec: file.spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Central finite differences, the gradient oracle for these tests.
    fn fd_grad(obj: &Objective, agent: usize, x: &Array1<f64>) -> Array1<f64> {
        let max = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let h = 1e-6 * (1.0 + max);
        let mut g = Array1::zeros(x.len());
        for j in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            g[j] = (obj.value_agent(agent, &xp) - obj.value_agent(agent, &xm)) / (2.0 * h);
        }
        g
    }

    fn assert_grad_matches_fd(obj: &Objective, x: &Array1<f64>) {
        for i in 0..obj.n() {
            let g = obj.grad_agent(i, x);
            let fd = fd_grad(obj, i, x);
            let scale = 1.0 + fd.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            for j in 0..x.len() {
                assert!(
                    (g[j] - fd[j]).abs() <= 1e-6 * scale,
                    "agent {i} coord {j}: {} vs fd {}",
                    g[j],
                    fd[j]
                );
            }
        }
    }

    fn seeded_points(seed: u64, count: usize, p: usize) -> Vec<Array1<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| Array1::from(normals(&mut rng, p)))
            .collect()
    }

    #[test]
    fn ls_gradient_matches_finite_differences() {
        let spec = GenSpec::least_squares(3, 6, 8, 5);
        let inst = generate_experiment(&spec).unwrap();
        for x in seeded_points(100, 10, 6) {
            assert_grad_matches_fd(&inst.objective, &x);
        }
    }

    #[test]
    fn huber_gradient_matches_finite_differences() {
        let spec = GenSpec::huber(3, 4, 6, 7, 1.5);
        let inst = generate_experiment(&spec).unwrap();
        for x in seeded_points(101, 10, 4) {
            assert_grad_matches_fd(&inst.objective, &x);
        }
    }

    #[test]
    fn consensus_gradient_matches_finite_differences() {
        let spec = GenSpec::consensus(4, 5, 9);
        let inst = generate_experiment(&spec).unwrap();
        for x in seeded_points(102, 10, 5) {
            assert_grad_matches_fd(&inst.objective, &x);
        }
    }

    #[test]
    fn huber_knee_is_continuous() {
        let xi = 2.0;
        for delta in [1e-9, 1e-8, 1e-7] {
            let (v_in, g_in) = huber_value_grad(xi - delta, xi);
            let (v_out, g_out) = huber_value_grad(xi + delta, xi);
            assert!((v_in - v_out).abs() <= 1e-6);
            assert!((g_in - g_out).abs() <= 1e-6);
            let (v_in_n, g_in_n) = huber_value_grad(-xi + delta, xi);
            let (v_out_n, g_out_n) = huber_value_grad(-xi - delta, xi);
            assert!((v_in_n - v_out_n).abs() <= 1e-6);
            assert!((g_in_n - g_out_n).abs() <= 1e-6);
        }
        // Exact values at the knee itself.
        let (v, g) = huber_value_grad(2.0, xi);
        assert_eq!(v, 2.0);
        assert_eq!(g, 2.0);
    }

    #[test]
    fn huber_deep_in_quadratic_zone_equals_least_squares() {
        let xi = 100.0;
        let b = vec![array![[1.0, 0.0], [0.0, 2.0]]];
        let rhs = vec![array![1.0, -1.0]];
        let hub = Objective::Huber(HuberData::new(b.clone(), rhs.clone(), xi).unwrap());
        let ls = Objective::LeastSquares(LeastSquaresData::new(b, rhs).unwrap());
        let x = array![0.3, 0.7];
        assert_eq!(hub.value_agent(0, &x), ls.value_agent(0, &x));
        assert_eq!(hub.grad_agent(0, &x), ls.grad_agent(0, &x));
    }

    #[test]
    fn ls_exact_solution_satisfies_normal_equations() {
        let spec = GenSpec::least_squares(3, 6, 8, 13);
        let inst = generate_experiment(&spec).unwrap();
        let Objective::LeastSquares(d) = &inst.objective else {
            unreachable!()
        };
        let sol = ls_exact_solution(d).unwrap();
        assert!(!sol.degenerate);
        assert!(sol.normal_residual <= 1e-9, "{}", sol.normal_residual);
        // Stacked gradient at x* sums to ~0.
        let mut total = Array1::<f64>::zeros(6);
        for i in 0..3 {
            let g = inst.objective.grad_agent(i, &sol.x);
            for j in 0..6 {
                total[j] += g[j];
            }
        }
        assert!(total.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-9);
    }

    #[test]
    fn ls_exact_solution_min_norm_when_rank_deficient() {
        // Second column is zero: x[1] is unconstrained, min-norm picks 0.
        let b = vec![array![[1.0, 0.0], [2.0, 0.0]]];
        let rhs = vec![array![1.0, 2.0]];
        let d = LeastSquaresData::new(b, rhs).unwrap();
        let sol = ls_exact_solution(&d).unwrap();
        assert!(sol.degenerate);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.x[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ls_constants_match_known_spectrum() {
        // B = diag(1, 2): BᵀB has eigenvalues 1 and 4.
        let blocks = vec![array![[1.0, 0.0], [0.0, 2.0]], array![[3.0, 0.0], [0.0, 1.0]]];
        let c = ls_constants(&blocks).unwrap();
        assert_abs_diff_eq!(c.l_f, 9.0, epsilon = 1e-10);
        assert_abs_diff_eq!(c.s_f, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(c.per_agent[0].0, 4.0, epsilon = 1e-10);
        assert_abs_diff_eq!(c.per_agent[0].1, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn ls_constants_flag_no_strong_convexity() {
        // Wide block: rank 1 < p = 2, so S_f clamps to zero.
        let blocks = vec![array![[1.0, 1.0]]];
        let c = ls_constants(&blocks).unwrap();
        assert_eq!(c.s_f, 0.0);
        assert!(c.l_f > 0.0);
    }

    #[test]
    fn generation_is_deterministic_in_seed() {
        let spec = GenSpec::least_squares(2, 4, 6, 77);
        let a = generate_experiment(&spec).unwrap();
        let b = generate_experiment(&spec).unwrap();
        let (Objective::LeastSquares(da), Objective::LeastSquares(db)) =
            (&a.objective, &b.objective)
        else {
            unreachable!()
        };
        assert_eq!(da.blocks[0], db.blocks[0]);
        assert_eq!(da.rhs[1], db.rhs[1]);
        assert_eq!(a.x_star, b.x_star);
        let spec2 = GenSpec::least_squares(2, 4, 6, 78);
        let c = generate_experiment(&spec2).unwrap();
        let Objective::LeastSquares(dc) = &c.objective else {
            unreachable!()
        };
        assert_ne!(da.blocks[0], dc.blocks[0]);
    }

    #[test]
    fn huber_generation_places_zones_correctly() {
        let spec = GenSpec::huber(3, 8, 12, 21, 2.0);
        let inst = generate_experiment(&spec).unwrap();
        let Objective::Huber(d) = &inst.objective else {
            unreachable!()
        };
        let xi = d.threshold;
        let x0 = inst.x0.row(0).to_owned();
        let mut max_at_star = 0.0_f64;
        let mut min_at_x0 = f64::INFINITY;
        for (b, r) in d.blocks.iter().zip(d.rhs.iter()) {
            let rs = residual(b, &inst.x_star, r);
            for v in rs.iter() {
                max_at_star = max_at_star.max(v.abs());
            }
            let r0 = residual(b, &x0, r);
            for v in r0.iter() {
                min_at_x0 = min_at_x0.min(v.abs());
            }
        }
        assert!(max_at_star <= 0.8 * xi, "max at x*: {max_at_star}");
        assert!(min_at_x0 >= 1.2 * xi, "min at x0: {min_at_x0}");
        // Inside the quadratic zone the Huber gradient is the LS gradient, so
        // x* is stationary for the Huber objective too.
        let mut total = Array1::<f64>::zeros(8);
        for i in 0..3 {
            let g = inst.objective.grad_agent(i, &inst.x_star);
            for j in 0..8 {
                total[j] += g[j];
            }
        }
        assert!(total.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-8);
        // All agents share the same initial row.
        for i in 1..3 {
            assert_eq!(inst.x0.row(i), inst.x0.row(0));
        }
    }

    #[test]
    fn consensus_ground_truth_is_target_mean() {
        let spec = GenSpec::consensus(5, 3, 4);
        let inst = generate_experiment(&spec).unwrap();
        let Objective::Consensus { targets } = &inst.objective else {
            unreachable!()
        };
        for j in 0..3 {
            let mean: f64 = (0..5).map(|i| targets[[i, j]]).sum::<f64>() / 5.0;
            assert_abs_diff_eq!(inst.x_star[j], mean, epsilon = 1e-15);
        }
        // Gradient of the sum vanishes at the mean.
        let mut total = Array1::<f64>::zeros(3);
        for i in 0..5 {
            let g = inst.objective.grad_agent(i, &inst.x_star);
            for j in 0..3 {
                total[j] += g[j];
            }
        }
        assert!(total.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-12);
    }

    #[test]
    fn zero_objective_has_zero_gradient() {
        let obj = Objective::Zero { n: 3, p: 2 };
        let x = Array2::from_elem((3, 2), 1.5);
        let g = obj.grad_stack(&x);
        assert!(g.iter().all(|&v| v == 0.0));
        assert_eq!(obj.value_stack(&x), 0.0);
    }

    #[test]
    fn instance_file_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.json");
        let spec = GenSpec::huber(2, 3, 5, 33, 2.0);
        let inst = generate_experiment(&spec).unwrap();
        save_instance(&path, &inst).unwrap();
        let back = load_instance(&path).unwrap();
        let (Objective::Huber(d0), Objective::Huber(d1)) = (&inst.objective, &back.objective)
        else {
            unreachable!()
        };
        assert_eq!(d0.blocks, d1.blocks);
        assert_eq!(d0.rhs, d1.rhs);
        assert_eq!(d0.threshold, d1.threshold);
        assert_eq!(inst.x_star, back.x_star);
        assert_eq!(inst.x0, back.x0);
    }

    #[test]
    fn data_validation_rejects_mismatches() {
        let blocks = vec![array![[1.0, 0.0]], array![[1.0, 0.0, 0.0]]];
        let rhs = vec![array![1.0], array![1.0]];
        assert!(matches!(
            LeastSquaresData::new(blocks, rhs),
            Err(ObjectiveError::DimensionMismatch { agent: 1, .. })
        ));
        let blocks = vec![array![[1.0, 0.0]]];
        let rhs = vec![array![1.0, 2.0]];
        assert!(matches!(
            LeastSquaresData::new(blocks, rhs),
            Err(ObjectiveError::BlockShape { .. })
        ));
        assert!(matches!(
            HuberData::new(vec![array![[1.0]]], vec![array![1.0]], 0.0),
            Err(ObjectiveError::BadThreshold(_))
        ));
    }
}
