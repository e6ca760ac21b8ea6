//! Decentralized consensus optimization over directed graphs.
//!
//! Agents on a strongly connected digraph cooperatively minimize a sum of
//! private objectives `f(x) = Σᵢ fᵢ(x)` using only column-stochastic mixing
//! built from out-degrees (push-sum style communication). The crate provides:
//!
//! - [`graph`]: digraphs, out-degree mixing matrices, stationary distributions,
//!   and push-sum convergence diagnostics;
//! - [`objective`]: least-squares, Huber, and consensus objectives plus seeded
//!   experiment generation with ground truth;
//! - [`solver`]: matrix-form engines for ExtraPush, Normalized ExtraPush (three
//!   equivalent forms), Extra, and subgradient-push, with stop rules,
//!   trajectory recording, and bit-compatible checkpointing;
//! - [`netsim`]: a message-passing agent simulator that reproduces the matrix
//!   engine bit for bit;
//! - [`analysis`]: optimality residuals, conservation tracking, metric objects,
//!   geometric-rate fitting, and a step-size certificate for linear
//!   convergence of the two-step push method;
//! - [`cli`]: the `extrapush` command-line tool (`run`, `certify`,
//!   `graph-info`, `gen`).

pub mod analysis;
pub mod cli;
pub mod graph;
pub mod linalg;
pub mod netsim;
pub mod objective;
pub mod solver;
