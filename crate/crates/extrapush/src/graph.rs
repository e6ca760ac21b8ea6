//! Directed communication graphs, out-degree mixing matrices, and push-sum
//! convergence diagnostics.
//!
//! Every node has an implicit self-loop: a node always "sends to" itself, so
//! out-degrees count the node itself and explicit `i → i` edges are rejected.
//! The mixing matrix built here is column stochastic: column `j` places
//! `1/out_degree(j)` on each out-neighbor of `j` (including `j`).

use ndarray::{Array1, Array2};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

use crate::linalg::{frob_mat, mat_mul, mat_vec};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph must have at least one node")]
    Empty,
    #[error("edge ({from}, {to}) out of range for n = {n}")]
    EdgeOutOfRange { from: usize, to: usize, n: usize },
    #[error("explicit self-loop at node {0}; self-loops are implicit")]
    ExplicitSelfLoop(usize),
    #[error("matrix is not a valid column-stochastic mixing matrix: {}", format_issues(.0))]
    InvalidMatrix(Vec<MatrixIssue>),
    #[error("power iteration did not converge within {max_power} steps (change {change:.3e}); the chain may be periodic or reducible")]
    StationaryNoConvergence { max_power: usize, change: f64 },
    #[error("stationary vector has non-positive entry {value:.3e} at node {node}")]
    NonPositiveStationary { node: usize, value: f64 },
    #[error("stationary residual ‖Aφ − φ‖ = {0:.3e} exceeds 1e-10")]
    StationaryResidual(f64),
    #[error("graph is not strongly connected")]
    NotStronglyConnected,
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

/// A single defect found while validating a candidate mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixIssue {
    NotSquare { rows: usize, cols: usize },
    NonFinite { i: usize, j: usize },
    Negative { i: usize, j: usize, value: f64 },
    ZeroDiagonal { i: usize },
    ColumnSum { col: usize, deviation: f64 },
}

fn format_issues(issues: &[MatrixIssue]) -> String {
    let mut s = String::new();
    for (k, issue) in issues.iter().take(4).enumerate() {
        if k > 0 {
            s.push_str("; ");
        }
        match issue {
            MatrixIssue::NotSquare { rows, cols } => {
                let _ = write!(s, "not square ({rows}x{cols})");
            }
            MatrixIssue::NonFinite { i, j } => {
                let _ = write!(s, "non-finite entry at ({i}, {j})");
            }
            MatrixIssue::Negative { i, j, value } => {
                let _ = write!(s, "negative entry {value:.3e} at ({i}, {j})");
            }
            MatrixIssue::ZeroDiagonal { i } => {
                let _ = write!(s, "zero diagonal at {i} (self-loops required)");
            }
            MatrixIssue::ColumnSum { col, deviation } => {
                let _ = write!(s, "column {col} sum deviates by {deviation:.3e}");
            }
        }
    }
    if issues.len() > 4 {
        let _ = write!(s, "; … {} more", issues.len() - 4);
    }
    s
}

/// Simple digraph on nodes `0..n` with directed edges and implicit self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl DirectedGraph {
    /// Build from an edge list. Edge order and duplicates do not matter.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut set = BTreeSet::new();
        for &(from, to) in edges {
            if from >= n || to >= n {
                return Err(GraphError::EdgeOutOfRange { from, to, n });
            }
            if from == to {
                return Err(GraphError::ExplicitSelfLoop(from));
            }
            set.insert((from, to));
        }
        Ok(Self { n, edges: set })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Directed edges excluding the implicit self-loops, in sorted order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Out-degree including the implicit self-loop.
    pub fn out_degree(&self, i: usize) -> usize {
        1 + self.edges.iter().filter(|&&(from, _)| from == i).count()
    }

    /// Sorted out-neighbors of `i`, including `i` itself.
    pub fn out_neighbors(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .edges
            .iter()
            .filter(|&&(from, _)| from == i)
            .map(|&(_, to)| to)
            .collect();
        v.push(i);
        v.sort_unstable();
        v
    }

    /// Sorted in-neighbors of `i`, including `i` itself.
    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .edges
            .iter()
            .filter(|&&(_, to)| to == i)
            .map(|&(from, _)| from)
            .collect();
        v.push(i);
        v.sort_unstable();
        v
    }

    /// Strong connectivity via forward and reverse reachability from node 0.
    pub fn is_strongly_connected(&self) -> bool {
        let fwd = self.reachable(false);
        let bwd = self.reachable(true);
        fwd.iter().all(|&r| r) && bwd.iter().all(|&r| r)
    }

    fn reachable(&self, reverse: bool) -> Vec<bool> {
        let mut adj = vec![Vec::new(); self.n];
        for &(from, to) in &self.edges {
            if reverse {
                adj[to].push(from);
            } else {
                adj[from].push(to);
            }
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen
    }
}

/// Column-stochastic mixing matrix `A` with its averaged companion `Ā = (I + A)/2`.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    pub a: Array2<f64>,
    pub a_bar: Array2<f64>,
}

impl MixingMatrix {
    /// Out-degree rule: `A[i][j] = 1/out_degree(j)` for each out-neighbor `i`
    /// of `j` (self included).
    pub fn from_graph(g: &DirectedGraph) -> Self {
        let n = g.n();
        let mut a = Array2::zeros((n, n));
        for j in 0..n {
            let w = 1.0 / g.out_degree(j) as f64;
            for i in g.out_neighbors(j) {
                a[[i, j]] = w;
            }
        }
        Self::with_bar(a)
    }

    /// Wrap an externally supplied matrix after validating it.
    pub fn from_matrix(a: Array2<f64>) -> Result<Self, GraphError> {
        let issues = validate_column_stochastic(&a);
        if !issues.is_empty() {
            return Err(GraphError::InvalidMatrix(issues));
        }
        Ok(Self::with_bar(a))
    }

    fn with_bar(a: Array2<f64>) -> Self {
        let n = a.nrows();
        let mut a_bar = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let half = 0.5 * a[[i, j]];
                a_bar[[i, j]] = if i == j { half + 0.5 } else { half };
            }
        }
        Self { a, a_bar }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Digraph implied by the off-diagonal support of `A`.
    pub fn support_graph(&self) -> DirectedGraph {
        let n = self.n();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && self.a[[i, j]] > 0.0 {
                    edges.push((j, i)); // A[i][j] > 0 means j sends to i
                }
            }
        }
        DirectedGraph::new(n, &edges).expect("support edges are in range")
    }
}

/// Validate a candidate column-stochastic mixing matrix; empty result means valid.
///
/// Column sums may deviate from 1 by at most 1e-9.
pub fn validate_column_stochastic(a: &Array2<f64>) -> Vec<MatrixIssue> {
    let (rows, cols) = a.dim();
    if rows != cols {
        return vec![MatrixIssue::NotSquare { rows, cols }];
    }
    let mut issues = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let v = a[[i, j]];
            if !v.is_finite() {
                issues.push(MatrixIssue::NonFinite { i, j });
            } else if v < 0.0 {
                issues.push(MatrixIssue::Negative { i, j, value: v });
            }
        }
    }
    if !issues.is_empty() {
        return issues;
    }
    for i in 0..rows {
        if a[[i, i]] <= 0.0 {
            issues.push(MatrixIssue::ZeroDiagonal { i });
        }
    }
    for j in 0..cols {
        let mut s = 0.0;
        for i in 0..rows {
            s += a[[i, j]];
        }
        let deviation = s - 1.0;
        if deviation.abs() > 1e-9 {
            issues.push(MatrixIssue::ColumnSum { col: j, deviation });
        }
    }
    issues
}

/// Stationary distribution φ of `A` (Aφ = φ, Σφ = 1, φ > 0) together with the
/// normalization `D = n·diag(φ)` used by the normalized method.
#[derive(Debug, Clone)]
pub struct StationaryDistribution {
    pub phi: Array1<f64>,
    /// Diagonal of `D = n·diag(φ)`.
    pub d: Array1<f64>,
    /// Diagonal of `D⁻¹`.
    pub d_inv: Array1<f64>,
}

impl StationaryDistribution {
    pub fn d_matrix(&self) -> Array2<f64> {
        Array2::from_diag(&self.d)
    }
}

/// Power iteration from the uniform vector, renormalized each step, until the
/// successive max-abs change drops to `tol`.
pub fn stationary_distribution(
    m: &MixingMatrix,
    tol: f64,
    max_power: usize,
) -> Result<StationaryDistribution, GraphError> {
    let n = m.n();
    let mut v = Array1::from_elem(n, 1.0 / n as f64);
    let mut change = f64::INFINITY;
    let mut converged = false;
    for _ in 0..max_power {
        let mut next = mat_vec(&m.a, &v);
        let sum: f64 = next.iter().sum();
        next.mapv_inplace(|x| x / sum);
        change = v
            .iter()
            .zip(next.iter())
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        v = next;
        if change <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GraphError::StationaryNoConvergence { max_power, change });
    }
    for (node, &value) in v.iter().enumerate() {
        if value <= 0.0 {
            return Err(GraphError::NonPositiveStationary { node, value });
        }
    }
    let resid = {
        let av = mat_vec(&m.a, &v);
        av.iter()
            .zip(v.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    if resid > 1e-10 {
        return Err(GraphError::StationaryResidual(resid));
    }
    let d = v.mapv(|p| n as f64 * p);
    let d_inv = d.mapv(|x| 1.0 / x);
    Ok(StationaryDistribution { phi: v, d, d_inv })
}

/// Defaults used across the crate for stationary-distribution computation.
pub const STATIONARY_TOL: f64 = 1e-13;
pub const STATIONARY_MAX_POWER: usize = 10_000;

pub fn stationary_default(m: &MixingMatrix) -> Result<StationaryDistribution, GraphError> {
    stationary_distribution(m, STATIONARY_TOL, STATIONARY_MAX_POWER)
}

/// Deviation profile `(t, ‖Aᵗ − φ1ᵀ‖_F)` for `t = 0..=t_max`.
pub fn power_convergence_profile(
    m: &MixingMatrix,
    t_max: usize,
) -> Result<Vec<(usize, f64)>, GraphError> {
    let n = m.n();
    let s = stationary_default(m)?;
    let mut target = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            target[[i, j]] = s.phi[i];
        }
    }
    let mut pow = Array2::eye(n);
    let mut out = Vec::with_capacity(t_max + 1);
    for t in 0..=t_max {
        let mut diff = pow.clone();
        diff -= &target;
        out.push((t, frob_mat(&diff)));
        if t < t_max {
            pow = mat_mul(&m.a, &pow);
        }
    }
    Ok(out)
}

/// Push-sum floor diagnostic: `min` over `t ≤ t_max` and nodes `i` of `(Aᵗ1)ᵢ`.
///
/// Theory guarantees this infimum is at least `n⁻ⁿ` for a strongly connected
/// graph with self-loops.
pub fn xi_diagnostic(m: &MixingMatrix, t_max: usize) -> f64 {
    let n = m.n();
    let mut w = Array1::from_elem(n, 1.0);
    let mut xi = w.iter().copied().fold(f64::INFINITY, f64::min);
    for _ in 1..=t_max {
        w = mat_vec(&m.a, &w);
        xi = w.iter().copied().fold(xi, f64::min);
    }
    xi
}

/// Residuals of `z` against the two equivalent descriptions of `null(I − A)`.
#[derive(Debug, Clone, Copy)]
pub struct NullSpaceCheck {
    /// `‖(I − A)z‖_F`
    pub i_minus_a: f64,
    /// `‖(I − φ1ᵀ)z‖_F`
    pub i_minus_phi_one_t: f64,
}

impl NullSpaceCheck {
    pub fn max(&self) -> f64 {
        self.i_minus_a.max(self.i_minus_phi_one_t)
    }
}

/// Check whether the columns of `z` (n×p stacked) lie in `null(I − A)`, which
/// equals `null(I − φ1ᵀ)`; consensus-in-z means `z = φ·cᵀ` for some `c`.
pub fn null_space_check(
    m: &MixingMatrix,
    s: &StationaryDistribution,
    z: &Array2<f64>,
) -> NullSpaceCheck {
    let az = mat_mul(&m.a, z);
    let mut r1 = 0.0;
    for i in 0..z.nrows() {
        for c in 0..z.ncols() {
            let d = z[[i, c]] - az[[i, c]];
            r1 += d * d;
        }
    }
    let n = z.nrows();
    let mut col_sums = vec![0.0; z.ncols()];
    for c in 0..z.ncols() {
        for i in 0..n {
            col_sums[c] += z[[i, c]];
        }
    }
    let mut r2 = 0.0;
    for i in 0..n {
        for c in 0..z.ncols() {
            let d = z[[i, c]] - s.phi[i] * col_sums[c];
            r2 += d * d;
        }
    }
    NullSpaceCheck {
        i_minus_a: r1.sqrt(),
        i_minus_phi_one_t: r2.sqrt(),
    }
}

/// The 5-node example digraph used throughout: edges (0-indexed)
/// 0→{1,2,4}, 1→{0,3,4}, 2→4, 3→0, 4→{1,2}.
pub fn five_node_graph() -> DirectedGraph {
    DirectedGraph::new(
        5,
        &[
            (0, 1),
            (0, 2),
            (0, 4),
            (1, 0),
            (1, 3),
            (1, 4),
            (2, 4),
            (3, 0),
            (4, 1),
            (4, 2),
        ],
    )
    .expect("preset edges are valid")
}

pub fn five_node_mixing() -> MixingMatrix {
    MixingMatrix::from_graph(&five_node_graph())
}

/// Resolve a preset graph by name: `five-node`, `undirected-ring`, or `single-node`.
pub fn preset_graph(name: &str) -> Option<DirectedGraph> {
    match name {
        "five-node" => Some(five_node_graph()),
        // Bidirectional 4-cycle: every out-degree is 3 (self included), so the
        // mixing matrix is symmetric doubly stochastic.
        "undirected-ring" => Some(
            DirectedGraph::new(
                4,
                &[
                    (0, 1),
                    (1, 0),
                    (1, 2),
                    (2, 1),
                    (2, 3),
                    (3, 2),
                    (3, 0),
                    (0, 3),
                ],
            )
            .expect("static preset is valid"),
        ),
        // One isolated node; the smallest (trivially strongly connected) graph.
        "single-node" => Some(DirectedGraph::new(1, &[]).expect("static preset is valid")),
        _ => None,
    }
}

/// Read an edge-list file: first data line is `n`, then one `i j` pair per
/// line (0-indexed, no explicit self-loops). `#` starts a comment.
pub fn read_graph_file(path: &Path) -> Result<DirectedGraph, GraphError> {
    let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut n: Option<usize> = None;
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse = |tok: &str| -> Result<usize, GraphError> {
            tok.parse().map_err(|_| GraphError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message: format!("expected integer, got {tok:?}"),
            })
        };
        if n.is_none() {
            n = Some(parse(line)?);
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(GraphError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message: "expected exactly two integers `i j`".into(),
            });
        };
        edges.push((parse(a)?, parse(b)?));
    }
    let n = n.ok_or_else(|| GraphError::Parse {
        path: path.display().to_string(),
        line: 0,
        message: "empty file".into(),
    })?;
    DirectedGraph::new(n, &edges)
}

pub fn write_graph_file(path: &Path, g: &DirectedGraph) -> Result<(), GraphError> {
    let mut out = format!("{}\n", g.n());
    for (i, j) in g.edges() {
        let _ = writeln!(out, "{i} {j}");
    }
    std::fs::write(path, out).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read a dense matrix file: one whitespace-separated row per line, square.
pub fn read_matrix_file(path: &Path) -> Result<Array2<f64>, GraphError> {
    let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            row.push(tok.parse().map_err(|_| GraphError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message: format!("expected number, got {tok:?}"),
            })?);
        }
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(GraphError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: "empty file".into(),
        });
    }
    let mut a = Array2::zeros((n, n));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(GraphError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("row has {} entries, expected {n}", row.len()),
            });
        }
        for (j, &v) in row.iter().enumerate() {
            a[[i, j]] = v;
        }
    }
    Ok(a)
}

/// Load and validate a mixing matrix from a dense matrix file.
pub fn load_mixing(path: &Path) -> Result<MixingMatrix, GraphError> {
    MixingMatrix::from_matrix(read_matrix_file(path)?)
}

pub fn write_matrix_file(path: &Path, a: &Array2<f64>) -> Result<(), GraphError> {
    let mut out = String::new();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{:.16e}", a[[i, j]]);
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}
