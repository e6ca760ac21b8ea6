//! Command-line front end: experiment configs (TOML or built-in presets),
//! algorithm runs with trajectory CSVs and a summary table, certificate
//! reports, graph diagnostics, and instance generation.
//!
//! Determinism contract: the same config and seed produce byte-identical
//! trajectory CSVs; the summary repeats deterministic columns and adds a
//! wall-clock column that naturally varies between invocations.

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2};
use serde::Deserialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

use crate::analysis::{
    build_metric_objects, certificate, check_assumption4, fit_linear_rate, AnalysisError,
    CertificateInput, CertificateOverrides, ResidualTracker,
};
use crate::graph::{
    load_mixing, power_convergence_profile, preset_graph, read_graph_file, stationary_default,
    xi_diagnostic, DirectedGraph, GraphError, MixingMatrix, StationaryDistribution,
};
use crate::netsim::{simulate_two_step, NetsimError, NetsimOptions, NetsimRecord};
use crate::objective::{
    generate_experiment, load_instance, ls_constants, save_instance, GenSpec, GeneratedInstance,
    Objective, ObjectiveError,
};
use crate::solver::{
    run_extra, run_extrapush, run_normalized_extrapush, run_normalized_extrapush_x,
    run_normalized_extrapush_z, run_subgradient_push, write_trajectory_csv, AlgorithmConfig,
    AlgorithmKind, FinalState, RunOptions, SolverError, StepSchedule, StopReason, TrajRow,
    TrajectoryRecord,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Engine {
    /// Dense matrix recursions (supports every algorithm).
    Matrix,
    /// Message-passing agent simulation (two-step push methods only).
    Agents,
}

#[derive(Debug, Parser)]
#[command(
    name = "extrapush",
    version,
    about = "Decentralized consensus optimization over directed graphs: \
             two-step push methods, diagnostics, and step-size certificates"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in experiment preset: ls | huber | consensus.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Override the instance seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `results`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override the iteration budget of every algorithm.
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    /// Override the stopping tolerance (0 runs to the budget).
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Execution engine for the two-step push methods.
    #[arg(long, global = true, value_enum)]
    pub engine: Option<Engine>,
    /// Suppress progress and warning output.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured algorithms; write one trajectory CSV per run plus
    /// `summary.csv`.
    Run,
    /// Print the fixed-step convergence certificate for the configured
    /// problem and graph.
    Certify,
    /// Print graph and mixing-matrix diagnostics.
    GraphInfo {
        /// Horizon for the power-convergence and weight-floor diagnostics.
        #[arg(long, default_value_t = 200)]
        t_max: usize,
    },
    /// Generate a problem instance and save it as JSON.
    Gen {
        /// Destination path for the instance file.
        #[arg(long)]
        path: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// Config file model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    problem: ProblemSection,
    #[serde(default)]
    graph: GraphSection,
    #[serde(default)]
    run: RunSection,
    #[serde(default)]
    algorithms: Vec<AlgorithmSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemSection {
    /// ls | huber | consensus | from-file
    kind: String,
    #[serde(default = "default_n")]
    n: usize,
    #[serde(default = "default_p")]
    p: usize,
    #[serde(default = "default_m")]
    m_per_agent: usize,
    /// Huber knee ξ.
    #[serde(default = "default_threshold")]
    threshold: f64,
    #[serde(default = "default_seed")]
    seed: u64,
    /// Instance JSON for `kind = "from-file"`.
    #[serde(default)]
    file: Option<PathBuf>,
}

fn default_n() -> usize {
    5
}
fn default_p() -> usize {
    256
}
fn default_m() -> usize {
    100
}
fn default_threshold() -> f64 {
    2.0
}
fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GraphSection {
    /// five-node | undirected-ring | single-node
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    edge_file: Option<PathBuf>,
    #[serde(default)]
    matrix_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunSection {
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    record_every: Option<usize>,
    #[serde(default)]
    max_iters: Option<usize>,
    #[serde(default)]
    tol: Option<f64>,
    /// matrix | agents
    #[serde(default)]
    engine: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlgorithmSection {
    /// extrapush | normalized-extrapush | normalized-extrapush-z |
    /// normalized-extrapush-x | extra | subgradient-push
    kind: String,
    #[serde(default)]
    alpha: Option<f64>,
    #[serde(default)]
    schedule: Option<StepSchedule>,
    #[serde(default)]
    max_iters: Option<usize>,
    #[serde(default)]
    tol: Option<f64>,
}

// ---------------------------------------------------------------------------
// Resolved experiment
// ---------------------------------------------------------------------------

struct Experiment {
    graph: Option<DirectedGraph>,
    mixing: MixingMatrix,
    instance: GeneratedInstance,
    algorithms: Vec<AlgorithmConfig>,
    out: PathBuf,
    engine: Engine,
}

impl Experiment {
    fn stationary(&self) -> Result<StationaryDistribution, CliError> {
        Ok(stationary_default(&self.mixing)?)
    }
}

fn builtin_preset(name: &str) -> Result<ConfigFile, CliError> {
    let text = match name {
        "ls" => LS_PRESET,
        "huber" => HUBER_PRESET,
        "consensus" => CONSENSUS_PRESET,
        other => {
            return Err(CliError::Config(format!(
                "unknown preset '{other}' (expected ls, huber, or consensus)"
            )))
        }
    };
    toml::from_str(text).map_err(|e| CliError::Config(format!("builtin preset '{name}': {e}")))
}

const LS_PRESET: &str = r#"
[problem]
kind = "ls"
n = 5
p = 256
m_per_agent = 100
seed = 42

[graph]
preset = "five-node"

[run]
max_iters = 3000

[[algorithms]]
kind = "extrapush"
alpha = 0.1

[[algorithms]]
kind = "extrapush"
alpha = 0.02

[[algorithms]]
kind = "normalized-extrapush"
alpha = 0.1

[[algorithms]]
kind = "normalized-extrapush"
alpha = 0.02

[[algorithms]]
kind = "subgradient-push"
schedule = { type = "inverse-sqrt", c = 0.8, t0 = 0.0 }
"#;

const HUBER_PRESET: &str = r#"
[problem]
kind = "huber"
n = 5
p = 256
m_per_agent = 100
threshold = 2.0
seed = 42

[graph]
preset = "five-node"

[run]
max_iters = 5000

[[algorithms]]
kind = "extrapush"
alpha = 0.1

[[algorithms]]
kind = "extrapush"
alpha = 0.02

[[algorithms]]
kind = "normalized-extrapush"
alpha = 0.1

[[algorithms]]
kind = "normalized-extrapush"
alpha = 0.02

[[algorithms]]
kind = "subgradient-push"
schedule = { type = "inverse-sqrt", c = 5.0, t0 = 100.0 }
"#;

const CONSENSUS_PRESET: &str = r#"
[problem]
kind = "consensus"
n = 1
p = 4
seed = 42

[graph]
preset = "single-node"

[run]
max_iters = 10

[[algorithms]]
kind = "extrapush"
alpha = 1.0
"#;

fn load_config(cli: &Cli) -> Result<ConfigFile, CliError> {
    match (&cli.config, &cli.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.display().to_string(),
                source,
            })?;
            toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
        (None, Some(name)) => builtin_preset(name),
        (None, None) => Err(CliError::Config(
            "provide --config PATH or --preset ls|huber|consensus".into(),
        )),
    }
}

fn resolve_graph(section: &GraphSection) -> Result<(Option<DirectedGraph>, MixingMatrix), CliError> {
    let sources = [
        section.preset.is_some(),
        section.edge_file.is_some(),
        section.matrix_file.is_some(),
    ]
    .iter()
    .filter(|b| **b)
    .count();
    if sources > 1 {
        return Err(CliError::Config(
            "graph section must name exactly one of preset, edge_file, matrix_file".into(),
        ));
    }
    if let Some(path) = &section.matrix_file {
        let m = load_mixing(path)?;
        return Ok((None, m));
    }
    if let Some(path) = &section.edge_file {
        let g = read_graph_file(path)?;
        let m = MixingMatrix::from_graph(&g);
        return Ok((Some(g), m));
    }
    let name = section.preset.as_deref().unwrap_or("five-node");
    let g = preset_graph(name)
        .ok_or_else(|| CliError::Config(format!("unknown graph preset '{name}'")))?;
    let m = MixingMatrix::from_graph(&g);
    Ok((Some(g), m))
}

fn resolve_problem(section: &ProblemSection, n_graph: usize) -> Result<GeneratedInstance, CliError> {
    let inst = match section.kind.as_str() {
        "ls" => generate_experiment(&GenSpec::least_squares(
            section.n,
            section.p,
            section.m_per_agent,
            section.seed,
        ))?,
        "huber" => generate_experiment(&GenSpec::huber(
            section.n,
            section.p,
            section.m_per_agent,
            section.seed,
            section.threshold,
        ))?,
        "consensus" => {
            generate_experiment(&GenSpec::consensus(section.n, section.p, section.seed))?
        }
        "from-file" => {
            let path = section.file.as_ref().ok_or_else(|| {
                CliError::Config("problem.kind = \"from-file\" requires problem.file".into())
            })?;
            load_instance(path)?
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown problem kind '{other}' (expected ls, huber, consensus, from-file)"
            )))
        }
    };
    if inst.objective.n() != n_graph {
        return Err(CliError::Config(format!(
            "problem has {} agents but the graph has {} nodes",
            inst.objective.n(),
            n_graph
        )));
    }
    Ok(inst)
}

fn resolve_algorithms(
    sections: &[AlgorithmSection],
    run: &RunSection,
    cli: &Cli,
    record_every: usize,
) -> Result<Vec<AlgorithmConfig>, CliError> {
    if sections.is_empty() {
        return Err(CliError::Config("at least one [[algorithms]] entry required".into()));
    }
    let mut out = Vec::with_capacity(sections.len());
    for (i, sec) in sections.iter().enumerate() {
        let kind = AlgorithmKind::parse(&sec.kind).ok_or_else(|| {
            CliError::Config(format!("algorithms[{i}]: unknown kind '{}'", sec.kind))
        })?;
        let max_iters = cli
            .max_iters
            .or(sec.max_iters)
            .or(run.max_iters)
            .unwrap_or(1000);
        let tol = cli.tol.or(sec.tol).or(run.tol).unwrap_or(0.0);
        let cfg = if kind == AlgorithmKind::SubgradientPush {
            let schedule = sec.schedule.clone().ok_or_else(|| {
                CliError::Config(format!("algorithms[{i}]: subgradient-push needs a schedule"))
            })?;
            AlgorithmConfig {
                kind,
                alpha: 0.0,
                schedule: Some(schedule),
                max_iters,
                tol,
                record_every,
            }
        } else {
            let alpha = sec.alpha.ok_or_else(|| {
                CliError::Config(format!("algorithms[{i}]: fixed-step method needs alpha"))
            })?;
            AlgorithmConfig {
                kind,
                alpha,
                schedule: sec.schedule.clone(),
                max_iters,
                tol,
                record_every,
            }
        };
        cfg.validate()
            .map_err(|e| CliError::Config(format!("algorithms[{i}]: {e}")))?;
        out.push(cfg);
    }
    Ok(out)
}

fn resolve_experiment(cli: &Cli) -> Result<Experiment, CliError> {
    let mut file = load_config(cli)?;
    if let Some(seed) = cli.seed {
        file.problem.seed = seed;
    }
    let (graph, mixing) = resolve_graph(&file.graph)?;
    let instance = resolve_problem(&file.problem, mixing.n())?;
    let record_every = file.run.record_every.unwrap_or(1).max(1);
    let algorithms = resolve_algorithms(&file.algorithms, &file.run, cli, record_every)?;
    let engine = match (&cli.engine, file.run.engine.as_deref()) {
        (Some(e), _) => *e,
        (None, Some("matrix")) | (None, None) => Engine::Matrix,
        (None, Some("agents")) => Engine::Agents,
        (None, Some(other)) => {
            return Err(CliError::Config(format!(
                "run.engine must be matrix or agents, got '{other}'"
            )))
        }
    };
    let out = cli
        .out
        .clone()
        .or(file.run.out.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    Ok(Experiment {
        graph,
        mixing,
        instance,
        algorithms,
        out,
        engine,
    })
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

struct SummaryRow {
    algorithm: String,
    alpha: f64,
    status: StopReason,
    rounds: usize,
    final_err: f64,
    final_consensus: f64,
    final_residual_opt: f64,
    final_residual_feas: f64,
    fitted_rate: f64,
    fit_r2: f64,
    messages: usize,
    wall_ms: u128,
}

fn csv_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn algorithm_slug(cfg: &AlgorithmConfig) -> String {
    match (&cfg.schedule, cfg.kind) {
        (Some(StepSchedule::InverseSqrt { c, t0 }), AlgorithmKind::SubgradientPush) => {
            format!("{}-c{}-t0{}", cfg.kind, c, t0)
        }
        _ => format!("{}-a{}", cfg.kind, cfg.alpha),
    }
}

/// Scale rows of the shared start `x0` into the z-space start each engine
/// expects, so every algorithm begins at the same normalized iterate x⁰.
fn z0_for(kind: AlgorithmKind, x0: &Array2<f64>, s: Option<&StationaryDistribution>) -> Array2<f64> {
    match kind {
        AlgorithmKind::NormalizedExtraPush | AlgorithmKind::NormalizedExtraPushZ => {
            let s = s.expect("normalized kinds resolved the stationary distribution");
            let mut z = x0.clone();
            for i in 0..z.nrows() {
                for j in 0..z.ncols() {
                    z[[i, j]] = s.d[i] * x0[[i, j]];
                }
            }
            z
        }
        _ => x0.clone(),
    }
}

/// Rebuild the trajectory rows of an agent-level run by replaying the
/// recorded z-history through the same diagnostics the matrix engine uses;
/// the result is bitwise identical to the matrix engine's record.
fn record_from_netsim(
    sim: &NetsimRecord,
    m: &MixingMatrix,
    s: Option<&StationaryDistribution>,
    obj: &Objective,
    alpha: f64,
    opts_x_star: Option<&Array1<f64>>,
    record_every: usize,
) -> TrajectoryRecord {
    let n = obj.n();
    let hist = &sim.z_history;
    let push_sum = sim.w.is_some();
    let mut w = Array1::from_elem(n, 1.0);
    let mut w_prev = w.clone();
    let mut rows: Vec<TrajRow> = Vec::new();
    let mut tracker = ResidualTracker::new(&m.a, &m.a_bar, &hist[0]);
    let mut x_prev;
    let mut g_prev;
    let x_of = |z: &Array2<f64>, w: &Array1<f64>| -> Array2<f64> {
        let mut x = z.clone();
        for i in 0..n {
            let inv = if push_sum {
                1.0 / w[i]
            } else {
                s.expect("fixed normalization needs phi").d_inv[i]
            };
            for j in 0..z.ncols() {
                x[[i, j]] = z[[i, j]] * inv;
            }
        }
        x
    };
    let x0 = x_of(&hist[0], &w);
    let g0 = obj.grad_stack(&x0);
    rows.push(TrajRow {
        t: 0,
        err_opt: err_frob(&x0, opts_x_star),
        consensus: consensus_frob(&x0),
        residual_opt: tracker.r_grad(&g0, alpha),
        residual_feas: tracker.r_null(&hist[0]),
        alpha_t: alpha,
    });
    x_prev = x0;
    g_prev = g0;
    let mut last_recorded = 0usize;
    for (t, z) in hist.iter().enumerate().skip(1) {
        if push_sum {
            let new_w = crate::linalg::mat_vec(&m.a, &w);
            w_prev = std::mem::replace(&mut w, new_w);
        }
        let x = x_of(z, &w);
        let g = obj.grad_stack(&x);
        tracker.advance(z, &g_prev, alpha);
        if t % record_every == 0 || t == hist.len() - 1 {
            rows.push(TrajRow {
                t,
                err_opt: err_frob(&x, opts_x_star),
                consensus: consensus_frob(&x),
                residual_opt: tracker.r_grad(&g, alpha),
                residual_feas: tracker.r_null(z),
                alpha_t: alpha,
            });
            last_recorded = t;
        }
        x_prev = x;
        g_prev = g;
    }
    let _ = last_recorded;
    let t_final = hist.len() - 1;
    let z = hist[t_final].clone();
    let z_prev = hist[t_final.saturating_sub(1)].clone();
    let final_state = FinalState {
        t: t_final,
        z,
        z_prev,
        x: x_prev.clone(),
        w: push_sum.then(|| w.clone()),
        w_prev: push_sum.then(|| w_prev.clone()),
        y: tracker.y().clone(),
        grad: g_prev.clone(),
        alpha_last: alpha,
        colsum: tracker.colsum().to_vec(),
    };
    TrajectoryRecord {
        kind: sim.kind,
        rows,
        stop: StopReason::MaxIters,
        rounds: t_final,
        final_state,
        history: None,
        max_conservation: tracker.max_conservation(),
        grad_evals: (t_final + 1) * n,
    }
}

fn err_frob(x: &Array2<f64>, x_star: Option<&Array1<f64>>) -> f64 {
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

fn consensus_frob(x: &Array2<f64>) -> f64 {
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

fn execute_algorithm(
    exp: &Experiment,
    cfg: &AlgorithmConfig,
    stationary: &mut Option<StationaryDistribution>,
    quiet: bool,
) -> Result<(TrajectoryRecord, String), CliError> {
    let m = &exp.mixing;
    let obj = &exp.instance.objective;
    let x0 = &exp.instance.x0;
    let needs_phi = matches!(
        cfg.kind,
        AlgorithmKind::NormalizedExtraPush
            | AlgorithmKind::NormalizedExtraPushZ
            | AlgorithmKind::NormalizedExtraPushX
    );
    if needs_phi && stationary.is_none() {
        *stationary = Some(stationary_default(m)?);
    }
    let opts = RunOptions {
        x_star: Some(exp.instance.x_star.clone()),
        keep_history: false,
    };
    for w in cfg.warnings() {
        if !quiet {
            eprintln!("warning: {w}");
        }
    }
    let use_agents = exp.engine == Engine::Agents
        && matches!(
            cfg.kind,
            AlgorithmKind::ExtraPush | AlgorithmKind::NormalizedExtraPush
        );
    let engine_tag = if use_agents { " [agents]" } else { "" };
    let rec = if use_agents {
        let g = exp.graph.as_ref().ok_or_else(|| {
            CliError::Config("the agents engine needs an explicit graph (preset or edge file)".into())
        })?;
        let z0 = z0_for(cfg.kind, x0, stationary.as_ref());
        let sim = simulate_two_step(
            g,
            cfg.kind,
            stationary.as_ref(),
            obj,
            cfg.alpha,
            &z0,
            cfg.max_iters,
            &NetsimOptions::default(),
        )?;
        record_from_netsim(
            &sim,
            m,
            stationary.as_ref(),
            obj,
            cfg.alpha,
            opts.x_star.as_ref(),
            cfg.record_every,
        )
    } else {
        match cfg.kind {
            AlgorithmKind::ExtraPush => run_extrapush(m, obj, cfg, x0, &opts)?,
            AlgorithmKind::NormalizedExtraPush => {
                let s = stationary.as_ref().unwrap();
                let z0 = z0_for(cfg.kind, x0, Some(s));
                run_normalized_extrapush(m, s, obj, cfg, &z0, &opts)?
            }
            AlgorithmKind::NormalizedExtraPushZ => {
                let s = stationary.as_ref().unwrap();
                let z0 = z0_for(cfg.kind, x0, Some(s));
                run_normalized_extrapush_z(m, s, obj, cfg, &z0, &opts)?
            }
            AlgorithmKind::NormalizedExtraPushX => {
                let s = stationary.as_ref().unwrap();
                run_normalized_extrapush_x(m, s, obj, cfg, x0, &opts)?
            }
            AlgorithmKind::Extra => run_extra(m, obj, cfg, x0, &opts)?,
            AlgorithmKind::SubgradientPush => run_subgradient_push(m, obj, cfg, x0, &opts)?,
        }
    };
    Ok((rec, engine_tag.to_string()))
}

fn cmd_run(cli: &Cli) -> Result<(), CliError> {
    let exp = resolve_experiment(cli)?;
    std::fs::create_dir_all(&exp.out).map_err(|source| CliError::Io {
        path: exp.out.display().to_string(),
        source,
    })?;
    let mut stationary: Option<StationaryDistribution> = None;
    let mut summary: Vec<SummaryRow> = Vec::new();
    let support_edges = exp
        .graph
        .as_ref()
        .map(|g| g.edge_count())
        .unwrap_or_else(|| exp.mixing.support_graph().edge_count());
    for (idx, cfg) in exp.algorithms.iter().enumerate() {
        let start = Instant::now();
        let (rec, engine_tag) = execute_algorithm(&exp, cfg, &mut stationary, cli.quiet)?;
        let wall_ms = start.elapsed().as_millis();
        let slug = algorithm_slug(cfg);
        let csv_name = format!("{:02}-{}.csv", idx, slug);
        let csv_path = exp.out.join(&csv_name);
        write_trajectory_csv(&csv_path, &rec)?;
        let last = rec.rows.last().expect("runs always record at least one row");
        // Fit over the decaying segment: drop round 0 and everything after the
        // error first sinks to within 10× of its final floor, so a converged
        // run reports its transient rate rather than roundoff noise.
        let knee = if last.err_opt.is_finite() {
            last.err_opt.abs() * 10.0
        } else {
            f64::INFINITY
        };
        let mut window: Vec<(usize, f64)> = Vec::new();
        for r in rec.rows.iter().filter(|r| r.t >= 1) {
            window.push((r.t, r.err_opt));
            if r.err_opt <= knee {
                break;
            }
        }
        if window.len() < 10 {
            let t_last = last.t;
            window = rec
                .rows
                .iter()
                .filter(|r| r.t >= t_last / 2)
                .map(|r| (r.t, r.err_opt))
                .collect();
        }
        let (fitted_rate, fit_r2) = match fit_linear_rate(&window) {
            Ok(f) => (f.rate, f.r2),
            Err(_) => (f64::NAN, f64::NAN),
        };
        let alpha_report = match &cfg.schedule {
            Some(sch) if cfg.kind == AlgorithmKind::SubgradientPush => sch.at(1).unwrap_or(f64::NAN),
            _ => cfg.alpha,
        };
        if !cli.quiet {
            println!(
                "[{idx:02}] {}{engine_tag}: stop={} rounds={} err={:.3e} consensus={:.3e} ({} ms) -> {}",
                slug, rec.stop, rec.rounds, last.err_opt, last.consensus, wall_ms, csv_name
            );
        }
        summary.push(SummaryRow {
            algorithm: format!("{}{}", cfg.kind, engine_tag),
            alpha: alpha_report,
            status: rec.stop,
            rounds: rec.rounds,
            final_err: last.err_opt,
            final_consensus: last.consensus,
            final_residual_opt: last.residual_opt,
            final_residual_feas: last.residual_feas,
            fitted_rate,
            fit_r2,
            messages: support_edges * rec.rounds,
            wall_ms,
        });
    }
    let mut text = String::from(
        "algorithm,alpha,status,rounds,final_err,final_consensus,final_residual_opt,final_residual_feas,fitted_rate,fit_r2,messages,wall_ms\n",
    );
    for row in &summary {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            row.algorithm,
            csv_float(row.alpha),
            row.status,
            row.rounds,
            csv_float(row.final_err),
            csv_float(row.final_consensus),
            csv_float(row.final_residual_opt),
            csv_float(row.final_residual_feas),
            csv_float(row.fitted_rate),
            csv_float(row.fit_r2),
            row.messages,
            row.wall_ms
        );
    }
    let summary_path = exp.out.join("summary.csv");
    write_atomic(&summary_path, &text)?;
    if !cli.quiet {
        println!("summary -> {}", summary_path.display());
    }
    Ok(())
}

fn write_atomic(path: &Path, text: &str) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|source| CliError::Io {
        path: tmp.display().to_string(),
        source,
    })?;
    std::fs::rename(&tmp, path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// certify
// ---------------------------------------------------------------------------

fn cmd_certify(cli: &Cli) -> Result<(), CliError> {
    let exp = resolve_experiment(cli)?;
    let (l_f, s_f) = match &exp.instance.objective {
        Objective::LeastSquares(d) => {
            let c = ls_constants(&d.blocks)?;
            (c.l_f, c.s_f)
        }
        Objective::Consensus { .. } => (1.0, 1.0),
        Objective::Huber(_) => {
            println!("not applicable: S_f unknown/zero (Huber losses have no uniform curvature)");
            return Ok(());
        }
        Objective::Zero { .. } => {
            println!("not applicable: the zero objective has no curvature constants");
            return Ok(());
        }
    };
    let s = exp.stationary()?;
    let metric = build_metric_objects(&exp.mixing, &s);
    let a4 = check_assumption4(&metric)?;
    println!(
        "metric assumption: lambda_min(N + N^T) = {:.9e} ({})",
        a4.lambda_min,
        if a4.holds { "holds" } else { "violated" }
    );
    println!("objective constants: L_f = {l_f:.9e}, S_f = {s_f:.9e}");
    match certificate(
        &metric,
        &s,
        &CertificateInput { l_f, s_f },
        &CertificateOverrides::default(),
    ) {
        Ok(cert) => print!("{cert}"),
        Err(AnalysisError::DegenerateMixing) => {
            println!("not applicable: M = 0");
        }
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// graph-info
// ---------------------------------------------------------------------------

fn cmd_graph_info(cli: &Cli, t_max: usize) -> Result<(), CliError> {
    // graph-info also accepts a bare graph preset name via --preset.
    let (graph, mixing) = if let Some(name) = cli.preset.as_deref() {
        if let Some(g) = preset_graph(name) {
            let m = MixingMatrix::from_graph(&g);
            (Some(g), m)
        } else {
            let file = builtin_preset(name)?;
            resolve_graph(&file.graph)?
        }
    } else {
        let file = load_config(cli)?;
        resolve_graph(&file.graph)?
    };
    let n = mixing.n();
    println!("nodes: {n}");
    match &graph {
        Some(g) => {
            println!("directed edges (no self-loops): {}", g.edge_count());
            let sc = g.is_strongly_connected();
            println!("strongly connected: {}", if sc { "yes" } else { "no" });
            if !sc {
                println!("stationary distribution: omitted (graph not strongly connected)");
                return Ok(());
            }
        }
        None => {
            let support = mixing.support_graph();
            println!("support edges (no self-loops): {}", support.edge_count());
            let sc = support.is_strongly_connected();
            println!("support strongly connected: {}", if sc { "yes" } else { "no" });
            if !sc {
                println!("stationary distribution: omitted (support not strongly connected)");
                return Ok(());
            }
        }
    }
    let s = match stationary_default(&mixing) {
        Ok(s) => s,
        Err(e) => {
            println!("stationary distribution: unavailable ({e})");
            return Ok(());
        }
    };
    let mut phi_line = String::from("phi:");
    for v in s.phi.iter() {
        let _ = write!(phi_line, " {v:.9}");
    }
    println!("{phi_line}");
    let xi = xi_diagnostic(&mixing, t_max);
    println!("weight floor xi over t <= {t_max}: {xi:.9e} (bound n^-n = {:.3e})", (n as f64).powi(-(n as i32)));
    let profile = power_convergence_profile(&mixing, t_max)?;
    let series: Vec<(usize, f64)> = profile
        .iter()
        .filter(|(_, d)| *d > 1e-12)
        .map(|(t, d)| (*t, *d))
        .collect();
    match fit_linear_rate(&series) {
        Ok(fit) => println!(
            "power convergence ‖A^t − phi·1^T‖: rate {:.6} (r² {:.6}, {} points)",
            fit.rate, fit.r2, fit.points
        ),
        Err(_) => println!("power convergence: too few points above the floor to fit"),
    }
    let metric = build_metric_objects(&mixing, &s);
    let a4 = check_assumption4(&metric)?;
    println!(
        "metric assumption lambda_min(N + N^T) = {:.9e} ({})",
        a4.lambda_min,
        if a4.holds { "holds" } else { "violated" }
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(cli: &Cli, path: &Path) -> Result<(), CliError> {
    let file = load_config(cli)?;
    let mut problem = file.problem.clone();
    if let Some(seed) = cli.seed {
        problem.seed = seed;
    }
    if problem.kind == "from-file" {
        return Err(CliError::Config(
            "gen needs a generative problem kind (ls, huber, consensus)".into(),
        ));
    }
    // Instance generation is graph-independent; use the declared dimensions.
    let inst = resolve_problem(&problem, problem.n)?;
    save_instance(path, &inst)?;
    if !cli.quiet {
        let norm: f64 = inst.x_star.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "wrote {} ({} agents, dimension {}, seed {}, ‖x*‖ = {:.6})",
            path.display(),
            inst.objective.n(),
            inst.objective.p(),
            inst.spec.seed,
            norm
        );
    }
    Ok(())
}

/// Entry point used by `main`; returns the process exit code.
pub fn run_cli(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Run => cmd_run(&cli),
        Command::Certify => cmd_certify(&cli),
        Command::GraphInfo { t_max } => cmd_graph_info(&cli, *t_max),
        Command::Gen { path } => {
            let p = path.clone();
            cmd_gen(&cli, &p)
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_presets_parse_and_validate() {
        for name in ["ls", "huber", "consensus"] {
            let file = builtin_preset(name).unwrap();
            assert!(!file.algorithms.is_empty(), "{name} has algorithms");
        }
        assert!(builtin_preset("nope").is_err());
    }

    #[test]
    fn config_parsing_rejects_unknown_fields_and_kinds() {
        let bad: Result<ConfigFile, _> = toml::from_str(
            r#"
[problem]
kind = "ls"
bogus = 3
"#,
        );
        assert!(bad.is_err());
        let cfg: ConfigFile = toml::from_str(
            r#"
[problem]
kind = "ls"
n = 3
p = 4
m_per_agent = 6

[[algorithms]]
kind = "extrapush"
alpha = 0.1
"#,
        )
        .unwrap();
        assert_eq!(cfg.problem.n, 3);
        assert_eq!(cfg.problem.seed, 42);
        let run = RunSection::default();
        let cli = Cli::parse_from(["extrapush", "run", "--preset", "ls"]);
        let algs = resolve_algorithms(&cfg.algorithms, &run, &cli, 1).unwrap();
        assert_eq!(algs.len(), 1);
        assert_eq!(algs[0].max_iters, 1000);
    }

    #[test]
    fn graph_section_resolves_presets_and_rejects_ambiguity() {
        let (g, m) = resolve_graph(&GraphSection {
            preset: Some("five-node".into()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(g.unwrap().n(), 5);
        assert_eq!(m.n(), 5);
        let ambiguous = GraphSection {
            preset: Some("five-node".into()),
            edge_file: Some("x.txt".into()),
            matrix_file: None,
        };
        assert!(resolve_graph(&ambiguous).is_err());
        assert!(resolve_graph(&GraphSection {
            preset: Some("unknown".into()),
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn algorithm_slugs_are_stable() {
        let cfg = AlgorithmConfig::fixed(AlgorithmKind::ExtraPush, 0.1, 10);
        assert_eq!(algorithm_slug(&cfg), "extrapush-a0.1");
        let sp = AlgorithmConfig::subgradient(
            StepSchedule::InverseSqrt { c: 0.8, t0: 0.0 },
            10,
        );
        assert_eq!(algorithm_slug(&sp), "subgradient-push-c0.8-t00");
    }

    #[test]
    fn flag_overrides_take_precedence() {
        let cli = Cli::parse_from([
            "extrapush",
            "run",
            "--preset",
            "consensus",
            "--max-iters",
            "7",
            "--seed",
            "9",
        ]);
        let exp = resolve_experiment(&cli).unwrap();
        assert_eq!(exp.instance.spec.seed, 9);
        assert!(exp.algorithms.iter().all(|a| a.max_iters == 7));
        assert_eq!(exp.mixing.n(), 1);
    }
}
