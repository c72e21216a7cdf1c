//! The four learner update rules, all driven by the same diminishing step
//! schedule and per-node sample streams.
//!
//! Per iteration `i` (1-based) with step `mu/i`, each node draws one
//! sample from its own stream:
//!
//! * non-cooperative: each node takes a plain stochastic gradient step;
//! * centralized: a fusion center averages all `N` fresh gradients at its
//!   single iterate;
//! * consensus: combine neighbors' previous iterates, subtract the node's
//!   own gradient evaluated at its previous iterate;
//! * diffusion: gradient step first (adapt), then combine the neighbors'
//!   intermediate iterates.
//!
//! Both networked rules read only previous-phase values: all nodes adapt,
//! then all nodes combine. Node order is ascending everywhere, which pins
//! floating-point results bit for bit.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{RiskModel, Sample};
use crate::netgraph::CombinationMatrix;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("step schedule needs positive finite mu, got {0}")]
    BadStepSize(f64),
    #[error("step index must be >= 1")]
    ZeroIteration,
    #[error("{0}")]
    DimensionMismatch(String),
}

/// Diminishing schedule `mu(i) = mu / i`, `i >= 1`.
#[derive(Debug, Clone, Copy)]
pub struct StepSchedule {
    mu: f64,
}

impl StepSchedule {
    pub fn new(mu: f64) -> Result<Self, StrategyError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(StrategyError::BadStepSize(mu));
        }
        Ok(StepSchedule { mu })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn at(&self, i: u64) -> Result<f64, StrategyError> {
        if i == 0 {
            return Err(StrategyError::ZeroIteration);
        }
        Ok(self.mu / i as f64)
    }
}

/// Which update rule to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "noncoop")]
    NonCooperative,
    #[serde(rename = "centralized")]
    Centralized,
    #[serde(rename = "consensus")]
    Consensus,
    #[serde(rename = "diffusion")]
    Diffusion,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::NonCooperative,
        StrategyKind::Centralized,
        StrategyKind::Consensus,
        StrategyKind::Diffusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::NonCooperative => "noncoop",
            StrategyKind::Centralized => "centralized",
            StrategyKind::Consensus => "consensus",
            StrategyKind::Diffusion => "diffusion",
        }
    }

    pub fn parse(s: &str) -> Option<StrategyKind> {
        StrategyKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Work done by one step, for cost-parity accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepStats {
    /// Stochastic gradient evaluations (one per node per iteration).
    pub gradient_evals: u64,
    /// Multiply-add terms spent combining neighbor iterates.
    pub combine_terms: u64,
}

/// Node-major stacked iterates of a networked learner plus scratch space.
#[derive(Debug, Clone)]
pub struct NetworkState {
    n_nodes: usize,
    dim: usize,
    estimates: Vec<f64>,
    workspace: Vec<f64>,
    iteration: u64,
    sample: Sample,
    gradient: Vec<f64>,
}

impl NetworkState {
    /// All iterates start at the origin.
    pub fn new(n_nodes: usize, dim: usize) -> Self {
        NetworkState {
            n_nodes,
            dim,
            estimates: vec![0.0; n_nodes * dim],
            workspace: vec![0.0; n_nodes * dim],
            iteration: 0,
            sample: Sample::zeros(dim),
            gradient: vec![0.0; dim],
        }
    }

    /// Starts from explicit node-major iterates.
    pub fn from_estimates(
        estimates: Vec<f64>,
        n_nodes: usize,
        dim: usize,
    ) -> Result<Self, StrategyError> {
        if estimates.len() != n_nodes * dim {
            return Err(StrategyError::DimensionMismatch(format!(
                "expected {} values for {n_nodes} nodes of dim {dim}, got {}",
                n_nodes * dim,
                estimates.len()
            )));
        }
        let mut s = NetworkState::new(n_nodes, dim);
        s.estimates = estimates;
        Ok(s)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Completed iterations; the iterates are `w_{k, iteration}`.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn estimate(&self, k: usize) -> &[f64] {
        &self.estimates[k * self.dim..(k + 1) * self.dim]
    }

    pub fn estimates(&self) -> &[f64] {
        &self.estimates
    }

    pub fn set_estimate(&mut self, k: usize, w: &[f64]) {
        self.estimates[k * self.dim..(k + 1) * self.dim].copy_from_slice(w);
    }

    fn check<M: RiskModel>(&self, model: &M, n_streams: usize) -> Result<(), StrategyError> {
        if model.dim() != self.dim {
            return Err(StrategyError::DimensionMismatch(format!(
                "model dim {} vs state dim {}",
                model.dim(),
                self.dim
            )));
        }
        if n_streams != self.n_nodes {
            return Err(StrategyError::DimensionMismatch(format!(
                "{} streams for {} nodes",
                n_streams, self.n_nodes
            )));
        }
        Ok(())
    }

    fn check_matrix(&self, a: &CombinationMatrix) -> Result<(), StrategyError> {
        if a.n_nodes() != self.n_nodes {
            return Err(StrategyError::DimensionMismatch(format!(
                "combination matrix is {}x{0} but the network has {} nodes",
                a.n_nodes(),
                self.n_nodes
            )));
        }
        Ok(())
    }
}

// Shared adapt sweep: dst[k] = src[k] - mu * grad(src[k]; sample_k).
// Identical code path for the non-cooperative and diffusion rules, which
// makes their reduction identity exact.
fn adapt_sweep<M: RiskModel>(
    model: &M,
    mu: f64,
    n_nodes: usize,
    dim: usize,
    src: &[f64],
    dst: &mut [f64],
    sample: &mut Sample,
    gradient: &mut [f64],
    streams: &mut [ChaCha8Rng],
) {
    for k in 0..n_nodes {
        model.draw_sample(&mut streams[k], sample);
        let w = &src[k * dim..(k + 1) * dim];
        model.loss_gradient(w, sample, gradient);
        let out = &mut dst[k * dim..(k + 1) * dim];
        for d in 0..dim {
            out[d] = w[d] - mu * gradient[d];
        }
    }
}

/// One non-cooperative step: every node descends its own stochastic
/// gradient, no communication.
pub fn noncoop_step<M: RiskModel>(
    state: &mut NetworkState,
    model: &M,
    schedule: &StepSchedule,
    streams: &mut [ChaCha8Rng],
) -> Result<StepStats, StrategyError> {
    state.check(model, streams.len())?;
    let i = state.iteration + 1;
    let mu = schedule.at(i)?;
    let (n, dim) = (state.n_nodes, state.dim);
    adapt_sweep(
        model,
        mu,
        n,
        dim,
        &state.estimates,
        &mut state.workspace,
        &mut state.sample,
        &mut state.gradient,
        streams,
    );
    std::mem::swap(&mut state.estimates, &mut state.workspace);
    state.iteration = i;
    Ok(StepStats { gradient_evals: n as u64, combine_terms: 0 })
}

/// One diffusion step: adapt all nodes, then combine the intermediate
/// iterates over the network.
pub fn diffusion_step<M: RiskModel>(
    state: &mut NetworkState,
    a: &CombinationMatrix,
    model: &M,
    schedule: &StepSchedule,
    streams: &mut [ChaCha8Rng],
) -> Result<StepStats, StrategyError> {
    state.check(model, streams.len())?;
    state.check_matrix(a)?;
    let i = state.iteration + 1;
    let mu = schedule.at(i)?;
    let (n, dim) = (state.n_nodes, state.dim);
    adapt_sweep(
        model,
        mu,
        n,
        dim,
        &state.estimates,
        &mut state.workspace,
        &mut state.sample,
        &mut state.gradient,
        streams,
    );
    // all nodes have adapted; combine reads only intermediate values
    let psi = std::mem::take(&mut state.workspace);
    a.combine_into(&psi, dim, &mut state.estimates);
    state.workspace = psi;
    state.iteration = i;
    Ok(StepStats { gradient_evals: n as u64, combine_terms: a.nnz() })
}

/// One consensus step: combine neighbors' previous iterates, subtract the
/// node's own gradient evaluated at its previous iterate.
pub fn consensus_step<M: RiskModel>(
    state: &mut NetworkState,
    a: &CombinationMatrix,
    model: &M,
    schedule: &StepSchedule,
    streams: &mut [ChaCha8Rng],
) -> Result<StepStats, StrategyError> {
    state.check(model, streams.len())?;
    state.check_matrix(a)?;
    let i = state.iteration + 1;
    let mu = schedule.at(i)?;
    let (n, dim) = (state.n_nodes, state.dim);
    a.combine_into(&state.estimates, dim, &mut state.workspace);
    for k in 0..n {
        model.draw_sample(&mut streams[k], &mut state.sample);
        let w_old = &state.estimates[k * dim..(k + 1) * dim];
        model.loss_gradient(w_old, &state.sample, &mut state.gradient);
        let out = &mut state.workspace[k * dim..(k + 1) * dim];
        for d in 0..dim {
            out[d] -= mu * state.gradient[d];
        }
    }
    std::mem::swap(&mut state.estimates, &mut state.workspace);
    state.iteration = i;
    Ok(StepStats { gradient_evals: n as u64, combine_terms: a.nnz() })
}

/// Single iterate of the centralized (fusion center) learner.
#[derive(Debug, Clone)]
pub struct CentralState {
    dim: usize,
    estimate: Vec<f64>,
    iteration: u64,
    sample: Sample,
    gradient: Vec<f64>,
    gradient_sum: Vec<f64>,
}

impl CentralState {
    pub fn new(dim: usize) -> Self {
        CentralState {
            dim,
            estimate: vec![0.0; dim],
            iteration: 0,
            sample: Sample::zeros(dim),
            gradient: vec![0.0; dim],
            gradient_sum: vec![0.0; dim],
        }
    }

    pub fn from_estimate(estimate: Vec<f64>) -> Self {
        let mut s = CentralState::new(estimate.len());
        s.estimate = estimate;
        s
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn estimate(&self) -> &[f64] {
        &self.estimate
    }
}

/// One centralized step: average the `N` fresh stochastic gradients at the
/// shared iterate (nodes visited ascending) and take one scaled step.
pub fn centralized_step<M: RiskModel>(
    state: &mut CentralState,
    model: &M,
    schedule: &StepSchedule,
    streams: &mut [ChaCha8Rng],
) -> Result<StepStats, StrategyError> {
    if model.dim() != state.dim {
        return Err(StrategyError::DimensionMismatch(format!(
            "model dim {} vs state dim {}",
            model.dim(),
            state.dim
        )));
    }
    let n = streams.len();
    if n == 0 {
        return Err(StrategyError::DimensionMismatch("centralized step needs >= 1 stream".into()));
    }
    let i = state.iteration + 1;
    let mu_over_n = schedule.at(i)? / n as f64;
    state.gradient_sum.fill(0.0);
    for stream in streams.iter_mut() {
        model.draw_sample(stream, &mut state.sample);
        model.loss_gradient(&state.estimate, &state.sample, &mut state.gradient);
        for (acc, g) in state.gradient_sum.iter_mut().zip(&state.gradient) {
            *acc += g;
        }
    }
    for (w, g) in state.estimate.iter_mut().zip(&state.gradient_sum) {
        *w -= mu_over_n * g;
    }
    state.iteration = i;
    Ok(StepStats { gradient_evals: n as u64, combine_terms: 0 })
}
