//! Seeded Monte Carlo harness: turns an experiment config into averaged
//! excess-risk learning curves, one per strategy, under common random
//! numbers.
//!
//! Randomness is organized as counter-mode substreams of one master seed.
//! Stream `(run, sub)` is `ChaCha8` on the master seed with stream id
//! `run << 32 | sub`; per run, sub 0 drives the topology draw, subs
//! `1..=N` are the node sample streams, and sub `N+1` draws the initial
//! iterates. The strategy identity is deliberately absent from the key,
//! so every strategy sees the same data (common random numbers) and
//! degenerate configurations reduce to bit-identical curves. Run id
//! `u32::MAX` is reserved for model setup (synthetic datasets, noise
//! estimation).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::models::{
    estimate_noise_stats, HessianSpectrum, LogisticModel, ModelError, QuadraticModel, RiskModel,
    Sample,
};
use crate::netgraph::{CombinationMatrix, NetError, Topology};
use crate::strategies::{
    centralized_step, consensus_step, diffusion_step, noncoop_step, CentralState, NetworkState,
    StepSchedule, StrategyError, StrategyKind,
};
use crate::theory::{RateParams, TheoryError, TransientParams};

/// Run id reserved for model setup streams; experiment runs must stay below.
pub const MODEL_SETUP_RUN: u32 = u32::MAX;

/// Substream ids within a run.
pub const TOPOLOGY_SUBSTREAM: u32 = 0;
pub const NODE_SUBSTREAM_BASE: u32 = 1;

/// Rows in a synthetic logistic dataset.
pub const DEFAULT_LOGISTIC_SAMPLES: usize = 5000;

/// Draws used to estimate gradient-noise covariance for predictions.
pub const NOISE_ESTIMATION_SAMPLES: usize = 100_000;

/// Growth factor of the default (geometric) recording grid.
pub const RECORD_GRID_RATIO: f64 = 1.25;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("combination matrix for run {run} is not primitive")]
    NonPrimitive { run: u32 },
    #[error("nonfinite excess risk: strategy {strategy}, run {run}, iteration {iteration}")]
    NonFinite { strategy: StrategyKind, run: u32, iteration: u64 },
    #[error("no recorded iterations inside window [{lo}, {hi}]")]
    EmptyWindow { lo: u64, hi: u64 },
    #[error("slope window [{lo}, {hi}] must span at least a decade")]
    WindowTooNarrow { lo: u64, hi: u64 },
    #[error("curve mean is nonpositive inside the window; dB undefined")]
    NonFiniteCurve,
    #[error("curves do not share a recording grid")]
    GridMismatch,
    #[error("strategy {0} is not part of this curve")]
    MissingStrategy(StrategyKind),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}, row {row}: {msg}")]
    DatasetParse { path: PathBuf, row: usize, msg: String },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Quadratic,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombinerKind {
    #[default]
    Metropolis,
    Uniform,
}

/// How node iterates start: at the origin, spherical Gaussian around it,
/// or at the model optimum (no transient; isolates the noise-driven part).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    #[default]
    Zero,
    Gaussian { radius: f64 },
    Optimum,
}

fn default_sigma_v_sq() -> f64 {
    1.0
}

fn default_regularizer() -> f64 {
    1.0
}

fn default_strategies() -> Vec<StrategyKind> {
    StrategyKind::ALL.to_vec()
}

fn default_edge_prob() -> f64 {
    0.3
}

fn default_true() -> bool {
    true
}

/// Full description of one Monte Carlo experiment.
///
/// For the quadratic model the optimum defaults to the unit-norm constant
/// vector `1/sqrt(dim)` with unit feature covariance; `sigma_v_sq` sets
/// the observation noise. For the logistic model a synthetic dataset of
/// [`DEFAULT_LOGISTIC_SAMPLES`] rows is drawn once from the reserved model
/// setup stream; `regularizer` sets its L2 term and `sigma_v_sq` is
/// ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model_kind: ModelKind,
    pub n_nodes: usize,
    pub dim: usize,
    /// Step scale of the schedule `mu / i`.
    pub mu: f64,
    #[serde(default = "default_sigma_v_sq")]
    pub sigma_v_sq: f64,
    #[serde(default = "default_regularizer")]
    pub regularizer: f64,
    pub iterations: u64,
    pub runs: u32,
    pub master_seed: u64,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyKind>,
    #[serde(default)]
    pub combiner: CombinerKind,
    #[serde(default = "default_edge_prob")]
    pub topology_edge_prob: f64,
    /// Fresh topology per run (true) or one shared draw (false).
    #[serde(default = "default_true")]
    pub topology_per_run: bool,
    /// `None`: geometric grid at ratio [`RECORD_GRID_RATIO`].
    /// `Some(s)`: every `s`-th iteration. Both include 1 and the horizon.
    #[serde(default)]
    pub record_stride: Option<u64>,
    #[serde(default)]
    pub init: InitKind,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::InvalidConfig(msg));
        if self.n_nodes == 0 {
            return fail("n_nodes must be >= 1".into());
        }
        if self.n_nodes as u64 >= MODEL_SETUP_RUN as u64 - 1 {
            return fail(format!("n_nodes {} exceeds the stream key space", self.n_nodes));
        }
        if self.dim == 0 {
            return fail("dim must be >= 1".into());
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return fail(format!("mu must be positive and finite, got {}", self.mu));
        }
        if !(self.sigma_v_sq >= 0.0 && self.sigma_v_sq.is_finite()) {
            return fail(format!("sigma_v_sq must be nonnegative, got {}", self.sigma_v_sq));
        }
        if self.model_kind == ModelKind::Logistic
            && !(self.regularizer > 0.0 && self.regularizer.is_finite())
        {
            return fail(format!("regularizer must be positive, got {}", self.regularizer));
        }
        if self.iterations < 2 {
            return fail(format!("iterations must be >= 2, got {}", self.iterations));
        }
        if self.runs == 0 {
            return fail("runs must be >= 1".into());
        }
        if self.runs == MODEL_SETUP_RUN {
            return fail(format!("runs must be below the reserved id {MODEL_SETUP_RUN}"));
        }
        if self.strategies.is_empty() {
            return fail("strategies must be nonempty".into());
        }
        for (a, k) in self.strategies.iter().enumerate() {
            if self.strategies[..a].contains(k) {
                return fail(format!("duplicate strategy {k}"));
            }
        }
        if !(self.topology_edge_prob > 0.0 && self.topology_edge_prob <= 1.0) {
            return fail(format!(
                "topology_edge_prob must lie in (0, 1], got {}",
                self.topology_edge_prob
            ));
        }
        if self.record_stride == Some(0) {
            return fail("record_stride must be >= 1 when given".into());
        }
        if let InitKind::Gaussian { radius } = self.init {
            if !(radius >= 0.0 && radius.is_finite()) {
                return fail(format!("init radius must be nonnegative, got {radius}"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Streams, grid, model

/// ChaCha substream `(run, sub)` of the master seed.
pub fn derive_stream(master_seed: u64, run: u32, sub: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((run as u64) << 32) | sub as u64);
    rng
}

/// Recorded iteration grid: always contains 1 and `iterations`, strictly
/// ascending. With a stride, all its multiples in range; otherwise a
/// geometric ladder.
pub fn record_grid(iterations: u64, stride: Option<u64>) -> Vec<u64> {
    let mut grid = vec![1u64];
    match stride {
        Some(s) => {
            let s = s.max(1);
            let mut i = s;
            while i <= iterations {
                if i > 1 {
                    grid.push(i);
                }
                i += s;
            }
        }
        None => {
            let mut i = 1u64;
            loop {
                let next = (((i as f64) * RECORD_GRID_RATIO).round() as u64).max(i + 1);
                if next > iterations {
                    break;
                }
                grid.push(next);
                i = next;
            }
        }
    }
    if *grid.last().unwrap() != iterations {
        grid.push(iterations);
    }
    grid
}

/// The model an experiment runs against, built once per experiment.
pub enum BuiltModel {
    Quadratic(QuadraticModel),
    Logistic(LogisticModel),
}

impl BuiltModel {
    pub fn spectrum(&self) -> &HessianSpectrum {
        match self {
            BuiltModel::Quadratic(m) => m.spectrum(),
            BuiltModel::Logistic(m) => m.spectrum(),
        }
    }

    pub fn optimum(&self) -> &[f64] {
        match self {
            BuiltModel::Quadratic(m) => m.optimum(),
            BuiltModel::Logistic(m) => m.optimum(),
        }
    }
}

/// Builds the configured model. Deterministic given the config: the
/// logistic dataset comes from the reserved model-setup stream.
pub fn build_model(config: &ExperimentConfig) -> Result<BuiltModel, HarnessError> {
    match config.model_kind {
        ModelKind::Quadratic => {
            let scale = 1.0 / (config.dim as f64).sqrt();
            let w_opt = vec![scale; config.dim];
            Ok(BuiltModel::Quadratic(QuadraticModel::identity_cov(w_opt, config.sigma_v_sq)?))
        }
        ModelKind::Logistic => {
            let mut rng = derive_stream(config.master_seed, MODEL_SETUP_RUN, 0);
            Ok(BuiltModel::Logistic(LogisticModel::synthetic(
                config.dim,
                DEFAULT_LOGISTIC_SAMPLES,
                config.regularizer,
                &mut rng,
            )?))
        }
    }
}

// ---------------------------------------------------------------------------
// Curves

/// Averaged excess-risk trajectory of one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyCurve {
    pub strategy: StrategyKind,
    /// Mean excess risk per recorded iteration.
    pub er_mean: Vec<f64>,
    /// `10 log10` of the mean.
    pub er_db: Vec<f64>,
    /// Standard error of the mean (0 for a single run).
    pub er_stderr: Vec<f64>,
}

/// Recorded output of one Monte Carlo experiment.
#[derive(Debug, Clone)]
pub struct LearningCurve {
    /// Recorded iterations, strictly ascending, ending at the horizon.
    pub iterations: Vec<u64>,
    pub runs: u32,
    /// One curve per configured strategy, in config order.
    pub curves: Vec<StrategyCurve>,
    pub master_seed: u64,
    pub config_sha256: String,
    pub version: String,
    pub common_random_numbers: bool,
}

impl LearningCurve {
    pub fn curve(&self, kind: StrategyKind) -> Result<&StrategyCurve, HarnessError> {
        self.curves
            .iter()
            .find(|c| c.strategy == kind)
            .ok_or(HarnessError::MissingStrategy(kind))
    }
}

/// `10 log10(x)`.
pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Risk of `w` above the model optimum.
pub fn excess_risk<M: RiskModel>(model: &M, w: &[f64]) -> f64 {
    model.excess_risk(w)
}

/// Small-error quadratic approximation of the excess risk from an error
/// vector: `0.5 * sum_m lambda_m (phi_m . err)^2`.
pub fn weighted_er_approx(err: &[f64], spectrum: &HessianSpectrum) -> f64 {
    let proj = spectrum.project(err);
    0.5 * spectrum
        .eigenvalues()
        .iter()
        .zip(&proj)
        .map(|(l, p)| l * p * p)
        .sum::<f64>()
}

/// Mean dB gap `a - b` over recorded iterations inside `window`
/// (inclusive). Both curves must sit on the same `iterations` grid.
pub fn gap_db(
    iterations: &[u64],
    a: &StrategyCurve,
    b: &StrategyCurve,
    window: (u64, u64),
) -> Result<f64, HarnessError> {
    if a.er_db.len() != iterations.len() || b.er_db.len() != iterations.len() {
        return Err(HarnessError::GridMismatch);
    }
    let (lo, hi) = window;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (idx, i) in iterations.iter().enumerate() {
        if *i >= lo && *i <= hi {
            let d = a.er_db[idx] - b.er_db[idx];
            if !d.is_finite() {
                return Err(HarnessError::NonFiniteCurve);
            }
            sum += d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(HarnessError::EmptyWindow { lo, hi });
    }
    Ok(sum / count as f64)
}

/// Least-squares slope of `er_db` against `log10(i)` over the window, in
/// dB per decade. The window must span at least a factor of ten.
pub fn fit_decade_slope(
    iterations: &[u64],
    curve: &StrategyCurve,
    window: (u64, u64),
) -> Result<f64, HarnessError> {
    if curve.er_db.len() != iterations.len() {
        return Err(HarnessError::GridMismatch);
    }
    let (lo, hi) = window;
    if lo == 0 || hi < lo.saturating_mul(10) {
        return Err(HarnessError::WindowTooNarrow { lo, hi });
    }
    let mut pts = Vec::new();
    for (idx, i) in iterations.iter().enumerate() {
        if *i >= lo && *i <= hi {
            let y = curve.er_db[idx];
            if !y.is_finite() {
                return Err(HarnessError::NonFiniteCurve);
            }
            pts.push(((*i as f64).log10(), y));
        }
    }
    if pts.len() < 2 {
        return Err(HarnessError::EmptyWindow { lo, hi });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = pts.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

// ---------------------------------------------------------------------------
// Monte Carlo

fn config_sha256(config: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

fn initial_estimates(config: &ExperimentConfig, run: u32, optimum: &[f64]) -> Vec<f64> {
    let len = config.n_nodes * config.dim;
    match config.init {
        InitKind::Zero => vec![0.0; len],
        InitKind::Gaussian { radius } => {
            let sub = NODE_SUBSTREAM_BASE + config.n_nodes as u32;
            let mut rng = derive_stream(config.master_seed, run, sub);
            (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    radius * z
                })
                .collect()
        }
        InitKind::Optimum => optimum.iter().cycle().take(len).copied().collect(),
    }
}

/// The topology and combination matrix a given run uses. With
/// `topology_per_run` off every run shares the run-0 draw.
pub fn topology_for_run(
    config: &ExperimentConfig,
    run: u32,
) -> Result<(Topology, CombinationMatrix), HarnessError> {
    let key = if config.topology_per_run { run } else { 0 };
    let mut rng = derive_stream(config.master_seed, key, TOPOLOGY_SUBSTREAM);
    let topo = Topology::random_connected(config.n_nodes, config.topology_edge_prob, &mut rng)?;
    let matrix = match config.combiner {
        CombinerKind::Metropolis => CombinationMatrix::metropolis(&topo),
        CombinerKind::Uniform => CombinationMatrix::uniform(&topo),
    };
    if !matrix.is_primitive() {
        return Err(HarnessError::NonPrimitive { run });
    }
    Ok((topo, matrix))
}

fn run_topology(config: &ExperimentConfig, run: u32) -> Result<CombinationMatrix, HarnessError> {
    Ok(topology_for_run(config, run)?.1)
}

fn node_streams(config: &ExperimentConfig, run: u32) -> Vec<ChaCha8Rng> {
    (0..config.n_nodes)
        .map(|k| derive_stream(config.master_seed, run, NODE_SUBSTREAM_BASE + k as u32))
        .collect()
}

fn run_one_strategy<M: RiskModel>(
    config: &ExperimentConfig,
    model: &M,
    matrix: &CombinationMatrix,
    kind: StrategyKind,
    w0: &[f64],
    grid: &[u64],
    run: u32,
) -> Result<Vec<f64>, HarnessError> {
    let schedule = StepSchedule::new(config.mu)?;
    let mut streams = node_streams(config, run);
    let (n, dim) = (config.n_nodes, config.dim);
    let mut out = Vec::with_capacity(grid.len());
    let mut gi = 0usize;
    let mut record = |w_view: &dyn Fn() -> f64, i: u64, gi: &mut usize| -> Result<(), HarnessError> {
        if *gi < grid.len() && grid[*gi] == i {
            let er = w_view();
            if !er.is_finite() {
                return Err(HarnessError::NonFinite { strategy: kind, run, iteration: i });
            }
            out.push(er);
            *gi += 1;
        }
        Ok(())
    };
    match kind {
        StrategyKind::Centralized => {
            let mut w = vec![0.0; dim];
            for k in 0..n {
                for d in 0..dim {
                    w[d] += w0[k * dim + d];
                }
            }
            for v in w.iter_mut() {
                *v /= n as f64;
            }
            let mut state = CentralState::from_estimate(w);
            for i in 1..=config.iterations {
                record(&|| model.excess_risk(state.estimate()), i, &mut gi)?;
                centralized_step(&mut state, model, &schedule, &mut streams)?;
            }
        }
        _ => {
            let mut state = NetworkState::from_estimates(w0.to_vec(), n, dim)?;
            for i in 1..=config.iterations {
                record(
                    &|| {
                        (0..n).map(|k| model.excess_risk(state.estimate(k))).sum::<f64>()
                            / n as f64
                    },
                    i,
                    &mut gi,
                )?;
                match kind {
                    StrategyKind::NonCooperative => {
                        noncoop_step(&mut state, model, &schedule, &mut streams)?
                    }
                    StrategyKind::Consensus => {
                        consensus_step(&mut state, matrix, model, &schedule, &mut streams)?
                    }
                    StrategyKind::Diffusion => {
                        diffusion_step(&mut state, matrix, model, &schedule, &mut streams)?
                    }
                    StrategyKind::Centralized => unreachable!(),
                };
            }
        }
    }
    debug_assert_eq!(out.len(), grid.len());
    Ok(out)
}

fn simulate_run<M: RiskModel>(
    config: &ExperimentConfig,
    model: &M,
    grid: &[u64],
    run: u32,
) -> Result<Vec<Vec<f64>>, HarnessError> {
    let matrix = run_topology(config, run)?;
    let w0 = initial_estimates(config, run, model.optimum());
    config
        .strategies
        .iter()
        .map(|kind| run_one_strategy(config, model, &matrix, *kind, &w0, grid, run))
        .collect()
}

fn collect_runs<M: RiskModel>(
    config: &ExperimentConfig,
    model: &M,
    grid: &[u64],
) -> Result<Vec<Vec<Vec<f64>>>, HarnessError> {
    (0..config.runs)
        .into_par_iter()
        .map(|run| simulate_run(config, model, grid, run))
        .collect()
}

/// Runs the experiment on the global thread pool. Output is a pure
/// function of the config, independent of thread count.
pub fn run_monte_carlo(config: &ExperimentConfig) -> Result<LearningCurve, HarnessError> {
    run_monte_carlo_with_threads(config, None)
}

/// Same, with an explicit worker count (`None`: global pool).
pub fn run_monte_carlo_with_threads(
    config: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<LearningCurve, HarnessError> {
    config.validate()?;
    let model = build_model(config)?;
    let grid = record_grid(config.iterations, config.record_stride);
    let per_run = {
        let work = || match &model {
            BuiltModel::Quadratic(m) => collect_runs(config, m, &grid),
            BuiltModel::Logistic(m) => collect_runs(config, m, &grid),
        };
        match threads {
            Some(t) => rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| HarnessError::ThreadPool(e.to_string()))?
                .install(work),
            None => work(),
        }?
    };
    let runs_f = config.runs as f64;
    let curves = config
        .strategies
        .iter()
        .enumerate()
        .map(|(si, kind)| {
            let mut er_mean = vec![0.0f64; grid.len()];
            let mut er_stderr = vec![0.0f64; grid.len()];
            for gi in 0..grid.len() {
                let mut mean = 0.0;
                for r in &per_run {
                    mean += r[si][gi];
                }
                mean /= runs_f;
                let mut var = 0.0;
                if config.runs > 1 {
                    for r in &per_run {
                        var += (r[si][gi] - mean).powi(2);
                    }
                    var /= runs_f - 1.0;
                }
                er_mean[gi] = mean;
                er_stderr[gi] = (var / runs_f).sqrt();
            }
            let er_db = er_mean.iter().map(|m| to_db(*m)).collect();
            StrategyCurve { strategy: *kind, er_mean, er_db, er_stderr }
        })
        .collect();
    Ok(LearningCurve {
        iterations: grid,
        runs: config.runs,
        curves,
        master_seed: config.master_seed,
        config_sha256: config_sha256(config),
        version: concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION")).to_string(),
        common_random_numbers: true,
    })
}

// ---------------------------------------------------------------------------
// Prediction inputs

/// Everything the closed-form predictors need, extracted from a config:
/// Hessian spectrum, gradient-noise diagonal, Perron norm of the run-0
/// combiner, initial mode energies, and the per-sample Fisher information
/// when the model defines one.
pub struct PredictionInputs {
    pub rate: RateParams,
    pub transient: TransientParams,
    pub noise_trace: f64,
    pub perron_norm_sq: f64,
    pub fisher: Option<nalgebra::DMatrix<f64>>,
}

/// Builds predictor inputs for a config. The combiner spectrum comes from
/// the run-0 topology; with the Metropolis rule (doubly stochastic) the
/// Perron norm is `1/N` for every connected draw, so the choice of run is
/// immaterial there.
pub fn prediction_inputs(config: &ExperimentConfig) -> Result<PredictionInputs, HarnessError> {
    config.validate()?;
    let model = build_model(config)?;
    let spectrum = model.spectrum().clone();
    let (noise_diag, noise_trace) = match &model {
        BuiltModel::Quadratic(m) => {
            let stats = m.noise_stats();
            (stats.projected_diag, stats.trace)
        }
        BuiltModel::Logistic(m) => {
            let mut rng = derive_stream(config.master_seed, MODEL_SETUP_RUN, 1);
            let stats = estimate_noise_stats(m, NOISE_ESTIMATION_SAMPLES, &mut rng)?;
            (stats.projected_diag, stats.trace)
        }
    };
    let matrix = run_topology(config, 0)?;
    let summary = matrix.spectral_summary()?;
    let perron_norm_sq = summary.perron_norm_sq();
    let rate = RateParams::new(
        spectrum.eigenvalues().to_vec(),
        config.mu,
        noise_diag,
        perron_norm_sq,
        config.n_nodes,
    )?;
    // centroid initial error in the eigenbasis: projected optimum offset
    // plus, under Gaussian init, the expected spread through the Perron
    // weights; starting at the optimum leaves no transient at all
    let proj = spectrum.project(model.optimum());
    let energy: Vec<f64> = match config.init {
        InitKind::Zero => proj.iter().map(|p| p * p).collect(),
        InitKind::Gaussian { radius } => {
            let spread = radius * radius * perron_norm_sq;
            proj.iter().map(|p| p * p + spread).collect()
        }
        InitKind::Optimum => vec![0.0; proj.len()],
    };
    let transient = TransientParams::new(energy, spectrum.eigenvalues().to_vec(), config.mu)?;
    let fisher = match &model {
        BuiltModel::Quadratic(m) => m.fisher_information().ok(),
        BuiltModel::Logistic(m) => Some(m.fisher_information()),
    };
    Ok(PredictionInputs { rate, transient, noise_trace, perron_norm_sq, fisher })
}

// ---------------------------------------------------------------------------
// CSV and metadata

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the curve in long form:
/// `iteration,strategy,er_mean,er_db,er_stderr,runs`, strategies in curve
/// order, iterations ascending, floats at 17 significant digits.
pub fn write_curve_csv(curve: &LearningCurve, path: &Path) -> Result<(), HarnessError> {
    let wrap = |source| HarnessError::Io { path: path.to_path_buf(), source };
    let file = std::fs::File::create(path).map_err(wrap)?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "iteration,strategy,er_mean,er_db,er_stderr,runs")?;
        for c in &curve.curves {
            for (gi, i) in curve.iterations.iter().enumerate() {
                writeln!(
                    w,
                    "{i},{},{},{},{},{}",
                    c.strategy.name(),
                    fmt17(c.er_mean[gi]),
                    fmt17(c.er_db[gi]),
                    fmt17(c.er_stderr[gi]),
                    curve.runs
                )?;
            }
        }
        w.flush()
    };
    emit().map_err(wrap)
}

/// Writes the reproducibility sidecar `<csv-path>.meta.json`: config echo,
/// master seed, config hash, package version, and the common-random-numbers
/// flag. Returns the sidecar path.
pub fn write_run_metadata(
    config: &ExperimentConfig,
    curve: &LearningCurve,
    csv_path: &Path,
) -> Result<PathBuf, HarnessError> {
    let mut name = csv_path.as_os_str().to_owned();
    name.push(".meta.json");
    let path = PathBuf::from(name);
    let body = serde_json::json!({
        "common_random_numbers": curve.common_random_numbers,
        "config": config,
        "config_sha256": curve.config_sha256,
        "master_seed": curve.master_seed,
        "version": curve.version,
    });
    let text = serde_json::to_string_pretty(&body).expect("metadata serializes");
    std::fs::write(&path, text).map_err(|source| HarnessError::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Reads a labeled dataset: one sample per row, label first (exactly +1 or
/// -1), features after. A non-numeric first field on the first row is
/// treated as a header and skipped. Feature width must be uniform.
pub fn read_dataset_csv(path: &Path) -> Result<Vec<Sample>, HarnessError> {
    let wrap = |source| HarnessError::Io { path: path.to_path_buf(), source };
    let parse_err = |row: usize, msg: String| HarnessError::DatasetParse {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let file = std::fs::File::open(path).map_err(wrap)?;
    let reader = BufReader::new(file);
    let mut samples: Vec<Sample> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let row = idx + 1;
        let line = line.map_err(wrap)?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let first: Result<f64, _> = fields[0].trim().parse();
        let label = match first {
            Err(_) if samples.is_empty() && width.is_none() => continue, // header
            Err(e) => return Err(parse_err(row, format!("bad label {:?}: {e}", fields[0]))),
            Ok(v) => v,
        };
        if label != 1.0 && label != -1.0 {
            return Err(parse_err(row, format!("label must be exactly +1 or -1, got {label}")));
        }
        let mut features = Vec::with_capacity(fields.len() - 1);
        for f in &fields[1..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|e| parse_err(row, format!("bad feature {f:?}: {e}")))?;
            features.push(v);
        }
        match width {
            None => {
                if features.is_empty() {
                    return Err(parse_err(row, "row has no features".into()));
                }
                width = Some(features.len());
            }
            Some(w) if w != features.len() => {
                return Err(parse_err(
                    row,
                    format!("expected {w} features, got {}", features.len()),
                ));
            }
            _ => {}
        }
        samples.push(Sample { features, label });
    }
    if samples.is_empty() {
        return Err(parse_err(0, "no data rows".into()));
    }
    Ok(samples)
}

/// Writes a dataset in the same layout [`read_dataset_csv`] accepts, with
/// a header row.
pub fn write_dataset_csv(samples: &[Sample], path: &Path) -> Result<(), HarnessError> {
    let wrap = |source| HarnessError::Io { path: path.to_path_buf(), source };
    let file = std::fs::File::create(path).map_err(wrap)?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        let width = samples.first().map(|s| s.features.len()).unwrap_or(0);
        write!(w, "label")?;
        for d in 1..=width {
            write!(w, ",f{d}")?;
        }
        writeln!(w)?;
        for s in samples {
            write!(w, "{}", if s.label > 0.0 { "1" } else { "-1" })?;
            for f in &s.features {
                write!(w, ",{}", fmt17(*f))?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    emit().map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::asymptotic_er_predictor;

    fn base_config() -> ExperimentConfig {
        ExperimentConfig {
            model_kind: ModelKind::Quadratic,
            n_nodes: 3,
            dim: 2,
            mu: 1.5,
            sigma_v_sq: 1.0,
            regularizer: 1.0,
            iterations: 100,
            runs: 4,
            master_seed: 7,
            strategies: StrategyKind::ALL.to_vec(),
            combiner: CombinerKind::Metropolis,
            topology_edge_prob: 0.5,
            topology_per_run: true,
            record_stride: None,
            init: InitKind::Zero,
        }
    }

    #[test]
    fn config_parses_with_defaults_and_rejects_unknown_keys() {
        let json = r#"{
            "model_kind": "quadratic",
            "n_nodes": 5,
            "dim": 2,
            "mu": 1.5,
            "iterations": 100,
            "runs": 10,
            "master_seed": 42
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.sigma_v_sq, 1.0);
        assert_eq!(cfg.strategies, StrategyKind::ALL.to_vec());
        assert_eq!(cfg.combiner, CombinerKind::Metropolis);
        assert_eq!(cfg.record_stride, None);
        assert_eq!(cfg.init, InitKind::Zero);
        assert!(cfg.topology_per_run);
        cfg.validate().unwrap();

        let bad = json.replace("\"master_seed\": 42", "\"master_seed\": 42, \"bogus\": 1");
        assert!(serde_json::from_str::<ExperimentConfig>(&bad).is_err());

        let gauss = json.replace(
            "\"master_seed\": 42",
            "\"master_seed\": 42, \"init\": {\"gaussian\": {\"radius\": 0.5}}",
        );
        let cfg: ExperimentConfig = serde_json::from_str(&gauss).unwrap();
        assert_eq!(cfg.init, InitKind::Gaussian { radius: 0.5 });

        let opt = json.replace("\"master_seed\": 42", "\"master_seed\": 42, \"init\": \"optimum\"");
        let cfg: ExperimentConfig = serde_json::from_str(&opt).unwrap();
        assert_eq!(cfg.init, InitKind::Optimum);
    }

    #[test]
    fn validate_rejects_bad_ranges() {
        let ok = base_config();
        ok.validate().unwrap();
        let selftest = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base_config();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(selftest(&|c| c.n_nodes = 0));
        assert!(selftest(&|c| c.dim = 0));
        assert!(selftest(&|c| c.mu = 0.0));
        assert!(selftest(&|c| c.mu = f64::INFINITY));
        assert!(selftest(&|c| c.sigma_v_sq = -0.5));
        assert!(selftest(&|c| c.iterations = 0));
        assert!(selftest(&|c| c.iterations = 1));
        assert!(selftest(&|c| c.runs = 0));
        assert!(selftest(&|c| c.strategies = vec![]));
        assert!(selftest(&|c| c.strategies =
            vec![StrategyKind::Diffusion, StrategyKind::Diffusion]));
        assert!(selftest(&|c| c.topology_edge_prob = 0.0));
        assert!(selftest(&|c| c.topology_edge_prob = 1.5));
        assert!(selftest(&|c| c.record_stride = Some(0)));
        assert!(selftest(&|c| c.init = InitKind::Gaussian { radius: -1.0 }));
        assert!(selftest(&|c| {
            c.model_kind = ModelKind::Logistic;
            c.regularizer = 0.0;
        }));
    }

    #[test]
    fn derived_streams_are_independent_and_reproducible() {
        use rand::RngCore;
        let mut a = derive_stream(7, 0, 1);
        let mut a2 = derive_stream(7, 0, 1);
        let mut b = derive_stream(7, 0, 2);
        let mut c = derive_stream(7, 1, 1);
        let mut d = derive_stream(8, 0, 1);
        let xs: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        assert_eq!(xs, (0..4).map(|_| a2.next_u64()).collect::<Vec<_>>());
        assert_ne!(xs[0], b.next_u64());
        assert_ne!(xs[0], c.next_u64());
        assert_ne!(xs[0], d.next_u64());
    }

    #[test]
    fn record_grid_shapes() {
        let g = record_grid(10_000, Some(100));
        assert_eq!(g[0], 1);
        assert_eq!(*g.last().unwrap(), 10_000);
        assert_eq!(g.len(), 101);
        assert!(g.contains(&2000) && g.contains(&5000));
        assert!(g.windows(2).all(|w| w[0] < w[1]));

        let g = record_grid(10_000, None);
        assert_eq!(g[0], 1);
        assert_eq!(*g.last().unwrap(), 10_000);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        // geometric: no step grows faster than the ratio (plus integer bump)
        for w in g.windows(2) {
            assert!(w[1] as f64 <= (w[0] as f64 * RECORD_GRID_RATIO).round().max(w[0] as f64 + 1.0));
        }
        assert_eq!(record_grid(1, None), vec![1]);
        assert_eq!(record_grid(2, Some(5)), vec![1, 2]);
    }

    #[test]
    fn first_recorded_point_is_the_exact_initial_excess_risk() {
        // entering step 1 every strategy still sits at w0 = 0, and the
        // default quadratic optimum has unit norm: ER(1) = 1 exactly
        let mut cfg = base_config();
        cfg.iterations = 2;
        cfg.runs = 3;
        let curve = run_monte_carlo(&cfg).unwrap();
        assert_eq!(curve.iterations, vec![1, 2]);
        for c in &curve.curves {
            assert!((c.er_mean[0] - 1.0).abs() < 1e-15, "{}: {}", c.strategy, c.er_mean[0]);
            // identical per-run values; stderr is rounding dust at most
            assert!(c.er_stderr[0] < 1e-15);
            assert!(c.er_db[0].abs() < 1e-12);
        }
    }

    #[test]
    fn starting_at_the_optimum_without_noise_pins_the_curve_at_zero() {
        let mut cfg = base_config();
        cfg.sigma_v_sq = 0.0;
        cfg.strategies = vec![StrategyKind::NonCooperative];
        cfg.iterations = 2;
        cfg.runs = 1;
        cfg.init = InitKind::Optimum;
        let curve = run_monte_carlo(&cfg).unwrap();
        // gradient is exactly zero at the optimum with noiseless labels
        assert_eq!(curve.curves[0].er_mean, vec![0.0, 0.0]);
    }

    #[test]
    fn monte_carlo_is_deterministic_and_thread_invariant() {
        let cfg = base_config();
        let a = run_monte_carlo(&cfg).unwrap();
        let b = run_monte_carlo(&cfg).unwrap();
        let st1 = run_monte_carlo_with_threads(&cfg, Some(1)).unwrap();
        let st3 = run_monte_carlo_with_threads(&cfg, Some(3)).unwrap();
        for (x, y) in [(&a, &b), (&a, &st1), (&a, &st3)] {
            assert_eq!(x.iterations, y.iterations);
            for (ca, cb) in x.curves.iter().zip(&y.curves) {
                assert_eq!(ca, cb);
            }
        }
        assert_eq!(a.config_sha256, b.config_sha256);
    }

    #[test]
    fn single_node_curves_coincide_bitwise_across_strategies() {
        let mut cfg = base_config();
        cfg.n_nodes = 1;
        cfg.iterations = 200;
        cfg.runs = 3;
        let curve = run_monte_carlo(&cfg).unwrap();
        let first = &curve.curves[0];
        for c in &curve.curves[1..] {
            assert_eq!(first.er_mean, c.er_mean, "{} differs", c.strategy);
        }
    }

    #[test]
    fn noncoop_curve_ignores_topology_parameters() {
        // common random numbers key on (run, node) only, and the
        // non-cooperative rule never touches the combiner
        let mut a = base_config();
        a.strategies = vec![StrategyKind::NonCooperative];
        let mut b = a.clone();
        b.topology_edge_prob = 0.9;
        b.combiner = CombinerKind::Uniform;
        let ca = run_monte_carlo(&a).unwrap();
        let cb = run_monte_carlo(&b).unwrap();
        assert_eq!(ca.curves[0].er_mean, cb.curves[0].er_mean);
    }

    #[test]
    fn cooperation_beats_isolation_in_a_small_run() {
        let mut cfg = base_config();
        cfg.n_nodes = 8;
        cfg.runs = 16;
        cfg.iterations = 2000;
        let curve = run_monte_carlo(&cfg).unwrap();
        let nc = curve.curve(StrategyKind::NonCooperative).unwrap();
        let df = curve.curve(StrategyKind::Diffusion).unwrap();
        let last = curve.iterations.len() - 1;
        assert!(df.er_mean[last] < nc.er_mean[last]);
        let gap = gap_db(&curve.iterations, nc, df, (500, 2000)).unwrap();
        assert!(gap > 4.0, "gap {gap} dB");
        let slope = fit_decade_slope(&curve.iterations, df, (100, 2000)).unwrap();
        assert!((-14.0..=-6.0).contains(&slope), "slope {slope}");
    }

    #[test]
    fn gap_and_slope_on_synthetic_curves() {
        let iterations: Vec<u64> = (1..=40).map(|k| k * 25).collect();
        let mk = |scale: f64| {
            let er_mean: Vec<f64> = iterations.iter().map(|i| scale / *i as f64).collect();
            let er_db = er_mean.iter().map(|m| to_db(*m)).collect();
            StrategyCurve {
                strategy: StrategyKind::Diffusion,
                er_stderr: vec![0.0; er_mean.len()],
                er_mean,
                er_db,
            }
        };
        let a = mk(3.6);
        let b = mk(0.18);
        let g = gap_db(&iterations, &a, &b, (100, 1000)).unwrap();
        assert!((g - 13.010299956639813).abs() < 1e-9);
        let s = fit_decade_slope(&iterations, &a, (25, 1000)).unwrap();
        assert!((s + 10.0).abs() < 1e-9);
        // a pure 1/i^2 law reads back as exactly -20 dB per decade
        let er_mean: Vec<f64> = iterations.iter().map(|i| 0.5 / (*i * *i) as f64).collect();
        let sq = StrategyCurve {
            strategy: StrategyKind::Centralized,
            er_db: er_mean.iter().map(|m| to_db(*m)).collect(),
            er_stderr: vec![0.0; er_mean.len()],
            er_mean,
        };
        let s2 = fit_decade_slope(&iterations, &sq, (25, 1000)).unwrap();
        assert!((s2 + 20.0).abs() < 1e-9);
        assert!(matches!(
            gap_db(&iterations, &a, &b, (2000, 3000)),
            Err(HarnessError::EmptyWindow { .. })
        ));
        assert!(matches!(
            fit_decade_slope(&iterations, &a, (200, 1000)),
            Err(HarnessError::WindowTooNarrow { .. })
        ));
        let short = StrategyCurve {
            strategy: StrategyKind::Consensus,
            er_mean: vec![1.0],
            er_db: vec![0.0],
            er_stderr: vec![0.0],
        };
        assert!(matches!(
            gap_db(&iterations, &a, &short, (100, 1000)),
            Err(HarnessError::GridMismatch)
        ));
    }

    #[test]
    fn weighted_er_matches_quadratic_excess_exactly() {
        let cov = nalgebra::DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);
        let model = QuadraticModel::new(vec![0.0, 0.0], 1.0, cov).unwrap();
        // Hessian eigenvalues (1, 4): err (1,1) gives 0.5*(1 + 4) = 2.5
        let err = [1.0, 1.0];
        let approx = weighted_er_approx(&err, model.spectrum());
        assert!((approx - 2.5).abs() < 1e-12);
        for w in [[0.3, -0.4], [2.0, 1.0], [0.0, 0.0]] {
            let direct = model.excess_risk(&w);
            let via_modes = weighted_er_approx(&w, model.spectrum());
            assert!((direct - via_modes).abs() <= 1e-12 * direct.max(1.0));
        }
    }

    #[test]
    fn prediction_inputs_match_the_reference_network() {
        let mut cfg = base_config();
        cfg.n_nodes = 20;
        let inputs = prediction_inputs(&cfg).unwrap();
        assert_eq!(inputs.rate.eigenvalues(), &[2.0, 2.0]);
        for s in inputs.rate.projected_noise() {
            assert!((s - 4.0).abs() < 1e-10);
        }
        // Metropolis is doubly stochastic: Perron norm 1/N
        assert!((inputs.perron_norm_sq - 0.05).abs() < 1e-9);
        assert!((inputs.noise_trace - 8.0).abs() < 1e-10);
        let at_1000 = asymptotic_er_predictor(&inputs.rate, 1000).unwrap();
        assert!((at_1000 - 1.8e-4).abs() < 1e-9);
        // initial mode energies recover the unit-norm optimum
        let fisher = inputs.fisher.expect("quadratic with noise has information");
        assert!((fisher[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn curve_csv_layout_is_stable() {
        let mut cfg = base_config();
        cfg.iterations = 3;
        cfg.runs = 2;
        cfg.strategies = vec![StrategyKind::NonCooperative, StrategyKind::Diffusion];
        let curve = run_monte_carlo(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_curve_csv(&curve, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,strategy,er_mean,er_db,er_stderr,runs");
        assert_eq!(lines.len(), 1 + 2 * curve.iterations.len());
        assert!(lines[1].starts_with("1,noncoop,"));
        assert!(lines[1].ends_with(",2"));
        // floats round-trip at 17 significant digits
        let field: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(field, curve.curves[0].er_mean[0]);
        // byte-identical on rerun
        let path2 = dir.path().join("curve2.csv");
        write_curve_csv(&run_monte_carlo(&cfg).unwrap(), &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        let meta = write_run_metadata(&cfg, &curve, &path).unwrap();
        assert_eq!(meta, dir.path().join("curve.csv.meta.json"));
        let parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&meta).unwrap()).unwrap();
        assert_eq!(parsed["master_seed"], 7);
        assert_eq!(parsed["common_random_numbers"], true);
        assert_eq!(parsed["config"]["n_nodes"], 3);
        assert_eq!(parsed["config_sha256"].as_str().unwrap().len(), 64);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = base_config();
        let mut b = base_config();
        b.master_seed += 1;
        assert_ne!(config_sha256(&a), config_sha256(&b));
        assert_eq!(config_sha256(&a), config_sha256(&a.clone()));
    }

    #[test]
    fn dataset_csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");

        std::fs::write(&path, "label,f1,f2\n1,0.5,-1.25\n-1,2.0,3.5\n+1,0,1e-3\n").unwrap();
        let samples = read_dataset_csv(&path).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].label, 1.0);
        assert_eq!(samples[1].features, vec![2.0, 3.5]);
        assert_eq!(samples[2].label, 1.0);

        // headerless variant
        std::fs::write(&path, "1,0.5\n-1,0.25\n").unwrap();
        assert_eq!(read_dataset_csv(&path).unwrap().len(), 2);

        std::fs::write(&path, "label,f1\n0.5,1.0\n").unwrap();
        let err = read_dataset_csv(&path).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("label"), "{err}");

        std::fs::write(&path, "1,0.5,1.0\n-1,0.25\n").unwrap();
        let err = read_dataset_csv(&path).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("expected 2 features"), "{err}");

        std::fs::write(&path, "label,f1\n").unwrap();
        assert!(read_dataset_csv(&path).is_err());

        let back = vec![
            Sample { features: vec![1.0, 0.125], label: 1.0 },
            Sample { features: vec![-0.75, 2.0], label: -1.0 },
        ];
        write_dataset_csv(&back, &path).unwrap();
        let again = read_dataset_csv(&path).unwrap();
        assert_eq!(back, again);
    }

    #[test]
    fn logistic_monte_carlo_produces_finite_decreasing_curves() {
        let cfg = ExperimentConfig {
            model_kind: ModelKind::Logistic,
            n_nodes: 4,
            dim: 5,
            mu: 1.0,
            sigma_v_sq: 1.0,
            regularizer: 1.0,
            iterations: 400,
            runs: 4,
            master_seed: 11,
            strategies: vec![StrategyKind::NonCooperative, StrategyKind::Diffusion],
            combiner: CombinerKind::Metropolis,
            topology_edge_prob: 0.6,
            topology_per_run: true,
            record_stride: None,
            init: InitKind::Zero,
        };
        let curve = run_monte_carlo(&cfg).unwrap();
        for c in &curve.curves {
            assert!(c.er_mean.iter().all(|v| v.is_finite() && *v >= 0.0));
            let last = *c.er_mean.last().unwrap();
            assert!(last < c.er_mean[0] / 5.0, "{}: {} -> {last}", c.strategy, c.er_mean[0]);
        }
    }
}
