//! Message-passing simulation of the push engines.
//!
//! Agents exchange weighted shares along the directed edges only; each
//! receiver folds incoming shares in ascending sender order, which makes the
//! simulated run reproduce the matrix engine bit for bit (the matrix product
//! accumulates over senders in the same order, and skipped zero-weight terms
//! cannot change a finite accumulation). The simulator also keeps an audit
//! trail: a count and order-independent content hash of every message, and
//! optionally the messages themselves for locality checking.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::graph::{DirectedGraph, MixingMatrix, StationaryDistribution};
use crate::objective::Objective;
use crate::solver::{two_step_combine, AlgorithmKind};

#[derive(Debug, Error)]
pub enum NetsimError {
    #[error("the agent simulator does not implement {0}")]
    UnsupportedKind(AlgorithmKind),
    #[error("normalized form needs the stationary distribution")]
    MissingStationary,
    #[error("initial state must be {expected_rows}×{expected_cols}, got {got_rows}×{got_cols}")]
    Shape {
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("objective has {obj} agents but the graph has {graph} nodes")]
    AgentMismatch { obj: usize, graph: usize },
}

/// One directed message: `sender` pushes its weighted z-share (and w-share)
/// to `receiver` during `round`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub round: usize,
    pub sender: usize,
    pub receiver: usize,
    pub z: Vec<f64>,
    pub w: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NetsimOptions {
    /// Keep every message for auditing (the count and hash are always kept).
    pub record_messages: bool,
}

/// Outcome of an agent-level run.
#[derive(Debug, Clone)]
pub struct NetsimRecord {
    pub kind: AlgorithmKind,
    pub rounds: usize,
    /// `z^0 … z^rounds`, one stacked matrix per round.
    pub z_history: Vec<Array2<f64>>,
    /// Final normalized iterates.
    pub x: Array2<f64>,
    /// Final push-sum weights (ExtraPush only).
    pub w: Option<Array1<f64>>,
    pub message_count: usize,
    /// FNV-1a hash over every message in transmission order.
    pub message_hash: u64,
    pub messages: Option<Vec<RoundMessage>>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(hash: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *hash ^= b as u64;
        *hash = hash.wrapping_mul(FNV_PRIME);
    }
}

fn hash_message(hash: &mut u64, msg: &RoundMessage) {
    fnv1a(hash, &(msg.round as u64).to_le_bytes());
    fnv1a(hash, &(msg.sender as u64).to_le_bytes());
    fnv1a(hash, &(msg.receiver as u64).to_le_bytes());
    for v in &msg.z {
        fnv1a(hash, &v.to_bits().to_le_bytes());
    }
    fnv1a(hash, &msg.w.to_bits().to_le_bytes());
}

/// Messages per round equal the number of directed edges (self-shares stay
/// local), so a run of `rounds` rounds transmits `rounds · |E|` messages.
pub fn expected_message_count(g: &DirectedGraph, rounds: usize) -> usize {
    rounds * g.edge_count()
}

/// Check that every recorded message travelled along a graph edge.
#[derive(Debug, Clone)]
pub struct LocalityReport {
    pub ok: bool,
    pub checked: usize,
    pub offenders: Vec<(usize, usize)>,
}

pub fn locality_audit(messages: &[RoundMessage], g: &DirectedGraph) -> LocalityReport {
    let edge_set: std::collections::BTreeSet<(usize, usize)> = g.edges().collect();
    let mut offenders = Vec::new();
    for m in messages {
        if m.sender == m.receiver || !edge_set.contains(&(m.sender, m.receiver)) {
            offenders.push((m.sender, m.receiver));
        }
    }
    LocalityReport {
        ok: offenders.is_empty(),
        checked: messages.len(),
        offenders,
    }
}

struct Network<'a> {
    g: &'a DirectedGraph,
    mixing: MixingMatrix,
    out: Vec<Vec<usize>>,
    inn: Vec<Vec<usize>>,
    round: usize,
    message_count: usize,
    message_hash: u64,
    messages: Option<Vec<RoundMessage>>,
}

impl<'a> Network<'a> {
    fn new(g: &'a DirectedGraph, record: bool) -> Self {
        let n = g.n();
        Self {
            g,
            mixing: MixingMatrix::from_graph(g),
            out: (0..n).map(|i| g.out_neighbors(i)).collect(),
            inn: (0..n).map(|i| g.in_neighbors(i)).collect(),
            round: 0,
            message_count: 0,
            message_hash: FNV_OFFSET,
            messages: record.then(Vec::new),
        }
    }

    /// One exchange: every sender splits its mass equally over its
    /// out-neighborhood (self included) and transmits the non-self shares.
    /// Returns the accumulated `A·z` rows and `A·w` entries.
    fn exchange(
        &mut self,
        z: &Array2<f64>,
        w: Option<&Array1<f64>>,
    ) -> (Array2<f64>, Option<Array1<f64>>) {
        self.round += 1;
        let n = self.g.n();
        let p = z.ncols();
        let a = &self.mixing.a;
        // Sender side: the weighted share every out-neighbor of j receives.
        let mut share_z: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut share_w: Vec<f64> = vec![0.0; n];
        for j in 0..n {
            let weight = a[[j, j]]; // 1/out-degree, identical for every receiver
            let mut sz = Vec::with_capacity(p);
            for c in 0..p {
                sz.push(weight * z[[j, c]]);
            }
            if let Some(wv) = w {
                share_w[j] = weight * wv[j];
            }
            for &i in &self.out[j] {
                if i == j {
                    continue;
                }
                let msg = RoundMessage {
                    round: self.round,
                    sender: j,
                    receiver: i,
                    z: sz.clone(),
                    w: share_w[j],
                };
                self.message_count += 1;
                hash_message(&mut self.message_hash, &msg);
                if let Some(log) = self.messages.as_mut() {
                    log.push(msg);
                }
            }
            share_z.push(sz);
        }
        // Receiver side: fold shares in ascending sender order (matches the
        // matrix product's accumulation order over nonzero columns).
        let mut az = Array2::zeros((n, p));
        let mut aw = w.map(|_| Array1::zeros(n));
        for i in 0..n {
            for c in 0..p {
                let mut s = 0.0;
                for &j in &self.inn[i] {
                    s += share_z[j][c];
                }
                az[[i, c]] = s;
            }
            if let Some(awv) = aw.as_mut() {
                let mut s = 0.0;
                for &j in &self.inn[i] {
                    s += share_w[j];
                }
                awv[i] = s;
            }
        }
        (az, aw)
    }
}

fn x_from_push_sum(z: &Array2<f64>, w: &Array1<f64>) -> Array2<f64> {
    let (n, p) = z.dim();
    let mut x = Array2::zeros((n, p));
    for i in 0..n {
        let inv = 1.0 / w[i];
        for j in 0..p {
            x[[i, j]] = z[[i, j]] * inv;
        }
    }
    x
}

fn x_from_fixed(z: &Array2<f64>, d_inv: &Array1<f64>) -> Array2<f64> {
    let (n, p) = z.dim();
    let mut x = Array2::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            x[[i, j]] = z[[i, j]] * d_inv[i];
        }
    }
    x
}

fn grad_rows(obj: &Objective, x: &Array2<f64>) -> Array2<f64> {
    let (n, p) = x.dim();
    let mut g = Array2::zeros((n, p));
    for i in 0..n {
        let xi = x.row(i).to_owned();
        let gi = obj.grad_agent(i, &xi);
        for j in 0..p {
            g[[i, j]] = gi[j];
        }
    }
    g
}

/// Agent-level two-step push run. `kind` selects the normalization:
/// running push-sum weights for ExtraPush, the fixed stationary scaling for
/// the normalized form (which then requires `s`).
pub fn simulate_two_step(
    g: &DirectedGraph,
    kind: AlgorithmKind,
    s: Option<&StationaryDistribution>,
    obj: &Objective,
    alpha: f64,
    z0: &Array2<f64>,
    rounds: usize,
    opts: &NetsimOptions,
) -> Result<NetsimRecord, NetsimError> {
    let n = g.n();
    let p = obj.p();
    if obj.n() != n {
        return Err(NetsimError::AgentMismatch {
            obj: obj.n(),
            graph: n,
        });
    }
    if z0.dim() != (n, p) {
        return Err(NetsimError::Shape {
            expected_rows: n,
            expected_cols: p,
            got_rows: z0.nrows(),
            got_cols: z0.ncols(),
        });
    }
    let d_inv = match kind {
        AlgorithmKind::ExtraPush => None,
        AlgorithmKind::NormalizedExtraPush | AlgorithmKind::NormalizedExtraPushZ => {
            Some(s.ok_or(NetsimError::MissingStationary)?.d_inv.clone())
        }
        other => return Err(NetsimError::UnsupportedKind(other)),
    };
    let track_w = d_inv.is_none();

    let mut net = Network::new(g, opts.record_messages);
    let mut z_history = Vec::with_capacity(rounds + 1);
    z_history.push(z0.clone());

    let mut w = track_w.then(|| Array1::from_elem(n, 1.0));
    let x0 = match (&d_inv, &w) {
        (Some(di), _) => x_from_fixed(z0, di),
        (None, Some(wv)) => x_from_push_sum(z0, wv),
        _ => unreachable!(),
    };
    let mut g_prev = grad_rows(obj, &x0);
    let mut x = x0;

    if rounds == 0 {
        return Ok(NetsimRecord {
            kind,
            rounds: 0,
            z_history,
            x,
            w,
            message_count: net.message_count,
            message_hash: net.message_hash,
            messages: net.messages,
        });
    }

    // Warm-up round: z¹ = A z⁰ − α g⁰, w¹ = A w⁰.
    let (az0, aw0) = net.exchange(z0, w.as_ref());
    let mut z_prev = z0.clone();
    let mut az_prev = az0;
    let mut z = Array2::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            z[[i, j]] = az_prev[[i, j]] - alpha * g_prev[[i, j]];
        }
    }
    let w_prev = w.take();
    w = aw0;
    x = match (&d_inv, &w) {
        (Some(di), _) => x_from_fixed(&z, di),
        (None, Some(wv)) => x_from_push_sum(&z, wv),
        _ => unreachable!(),
    };
    let mut grad = grad_rows(obj, &x);
    z_history.push(z.clone());
    let _ = w_prev;

    for _ in 2..=rounds {
        let (az, aw) = net.exchange(&z, w.as_ref());
        let mut z_new = Array2::zeros((n, p));
        for i in 0..n {
            for j in 0..p {
                z_new[[i, j]] = two_step_combine(
                    z[[i, j]],
                    az[[i, j]],
                    z_prev[[i, j]],
                    az_prev[[i, j]],
                    grad[[i, j]],
                    g_prev[[i, j]],
                    alpha,
                );
            }
        }
        if track_w {
            w = aw;
        }
        let x_new = match (&d_inv, &w) {
            (Some(di), _) => x_from_fixed(&z_new, di),
            (None, Some(wv)) => x_from_push_sum(&z_new, wv),
            _ => unreachable!(),
        };
        let g_new = grad_rows(obj, &x_new);
        z_history.push(z_new.clone());
        az_prev = az;
        z_prev = std::mem::replace(&mut z, z_new);
        g_prev = std::mem::replace(&mut grad, g_new);
        x = x_new;
    }

    Ok(NetsimRecord {
        kind,
        rounds,
        z_history,
        x,
        w,
        message_count: net.message_count,
        message_hash: net.message_hash,
        messages: net.messages,
    })
}

pub fn simulate_extrapush(
    g: &DirectedGraph,
    obj: &Objective,
    alpha: f64,
    z0: &Array2<f64>,
    rounds: usize,
    opts: &NetsimOptions,
) -> Result<NetsimRecord, NetsimError> {
    simulate_two_step(g, AlgorithmKind::ExtraPush, None, obj, alpha, z0, rounds, opts)
}

pub fn simulate_normalized_extrapush(
    g: &DirectedGraph,
    s: &StationaryDistribution,
    obj: &Objective,
    alpha: f64,
    z0: &Array2<f64>,
    rounds: usize,
    opts: &NetsimOptions,
) -> Result<NetsimRecord, NetsimError> {
    simulate_two_step(
        g,
        AlgorithmKind::NormalizedExtraPush,
        Some(s),
        obj,
        alpha,
        z0,
        rounds,
        opts,
    )
}

/// Plain push-sum averaging: `z ← Az`, `w ← Aw`, report the ratios.
#[derive(Debug, Clone)]
pub struct PushSumRecord {
    pub rounds: usize,
    pub ratios: Array2<f64>,
    pub w: Array1<f64>,
    pub message_count: usize,
    pub message_hash: u64,
}

pub fn simulate_push_sum(g: &DirectedGraph, z0: &Array2<f64>, rounds: usize) -> PushSumRecord {
    let mut net = Network::new(g, false);
    let mut z = z0.clone();
    let mut w = Array1::from_elem(g.n(), 1.0);
    for _ in 0..rounds {
        let (az, aw) = net.exchange(&z, Some(&w));
        z = az;
        w = aw.expect("push-sum always tracks weights");
    }
    let ratios = x_from_push_sum(&z, &w);
    PushSumRecord {
        rounds,
        ratios,
        w,
        message_count: net.message_count,
        message_hash: net.message_hash,
    }
}
