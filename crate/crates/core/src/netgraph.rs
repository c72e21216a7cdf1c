//! Ad-hoc network topologies and the combination matrices built on them.
//!
//! A topology is an undirected connected graph over `N` agents; every
//! neighborhood includes the agent itself. Combination matrices are
//! left-stochastic (columns sum to one) with column `k` supported on the
//! neighborhood of agent `k`.

use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

/// Attempt cap for rejection sampling of connected graphs.
const MAX_TOPOLOGY_ATTEMPTS: usize = 10_000;

/// Power-iteration cap and residual tolerance for the Perron vector.
const PERRON_MAX_ITERS: usize = 100_000;
const PERRON_TOL: f64 = 1e-12;

/// Column sums may deviate from one by at most this much.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("edge probability must lie in (0, 1], got {0}")]
    BadEdgeProb(f64),
    #[error("no connected topology found in {0} attempts")]
    Disconnected(usize),
    #[error("topology needs at least one node")]
    Empty,
    #[error("invalid combination matrix: {0}")]
    BadMatrix(String),
    #[error("Perron iteration did not reach tolerance {tol} in {iters} steps")]
    PerronNotConverged { iters: usize, tol: f64 },
}

/// Undirected connected graph; neighbor lists are sorted and include the
/// node itself.
#[derive(Debug, Clone)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Erdos-Renyi draw conditioned on connectivity: each unordered pair
    /// gets an edge with probability `edge_prob` (pairs visited in fixed
    /// `(k, l > k)` order), retried until connected.
    pub fn random_connected<R: Rng>(
        n: usize,
        edge_prob: f64,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        if n == 0 {
            return Err(NetError::Empty);
        }
        if !(edge_prob > 0.0 && edge_prob <= 1.0) {
            return Err(NetError::BadEdgeProb(edge_prob));
        }
        for _ in 0..MAX_TOPOLOGY_ATTEMPTS {
            let mut neighbors: Vec<Vec<usize>> = (0..n).map(|k| vec![k]).collect();
            for k in 0..n {
                for l in (k + 1)..n {
                    if rng.gen_bool(edge_prob) {
                        neighbors[k].push(l);
                        neighbors[l].push(k);
                    }
                }
            }
            for list in &mut neighbors {
                list.sort_unstable();
            }
            let t = Topology { neighbors };
            if t.is_connected() {
                return Ok(t);
            }
        }
        Err(NetError::Disconnected(MAX_TOPOLOGY_ATTEMPTS))
    }

    /// Builds directly from neighbor sets (self-links added if missing).
    pub fn from_neighbor_lists(mut neighbors: Vec<Vec<usize>>) -> Result<Self, NetError> {
        let n = neighbors.len();
        if n == 0 {
            return Err(NetError::Empty);
        }
        for (k, list) in neighbors.iter_mut().enumerate() {
            if list.iter().any(|l| *l >= n) {
                return Err(NetError::BadMatrix(format!("neighbor index out of range at node {k}")));
            }
            if !list.contains(&k) {
                list.push(k);
            }
            list.sort_unstable();
            list.dedup();
        }
        // enforce symmetry
        for k in 0..n {
            for l in neighbors[k].clone() {
                if !neighbors[l].contains(&k) {
                    neighbors[l].push(k);
                    neighbors[l].sort_unstable();
                }
            }
        }
        Ok(Topology { neighbors })
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    /// Sorted neighborhood of `k`, self included.
    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    /// Neighborhood size of `k`, self included.
    pub fn degree(&self, k: usize) -> usize {
        self.neighbors[k].len()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_nodes();
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(k) = stack.pop() {
            for &l in &self.neighbors[k] {
                if !seen[l] {
                    seen[l] = true;
                    count += 1;
                    stack.push(l);
                }
            }
        }
        count == n
    }
}

/// Spectral description of a combination matrix.
#[derive(Debug, Clone)]
pub struct SpectralSummary {
    /// Perron vector: entrywise positive (for primitive matrices),
    /// normalized to sum one, fixed by the matrix.
    pub perron: Vec<f64>,
    /// Largest magnitude among the non-Perron eigenvalues; 0 for `N == 1`.
    pub second_magnitude: f64,
    /// Connected support with at least one positive self-weight.
    pub is_primitive: bool,
    /// Rows also sum to one (within [`STOCHASTIC_TOL`] per row).
    pub is_doubly_stochastic: bool,
    /// All `N` eigenvalue magnitudes, sorted descending.
    pub eigenvalue_magnitudes: Vec<f64>,
}

impl SpectralSummary {
    /// Squared Euclidean norm of the Perron vector; `1/N` for doubly
    /// stochastic matrices, `1` for an isolated agent.
    pub fn perron_norm_sq(&self) -> f64 {
        self.perron.iter().map(|p| p * p).sum()
    }
}

/// Left-stochastic combination matrix, stored column-major with a sparse
/// per-column view for the combine step.
#[derive(Debug, Clone)]
pub struct CombinationMatrix {
    n: usize,
    weights: Vec<f64>,
    // (source l, weight) pairs per column k, ascending in l
    columns: Vec<Vec<(usize, f64)>>,
}

impl CombinationMatrix {
    /// Metropolis-Hastings weights on a topology: off-diagonal
    /// `min(1/deg(k), 1/deg(l))` for neighbors, diagonal takes the
    /// remainder. Symmetric and doubly stochastic by construction.
    pub fn metropolis(t: &Topology) -> Self {
        let n = t.n_nodes();
        let mut w = vec![0.0; n * n];
        for k in 0..n {
            let mut off = 0.0;
            for &l in t.neighbors(k) {
                if l != k {
                    let v = (1.0 / t.degree(k) as f64).min(1.0 / t.degree(l) as f64);
                    w[l + k * n] = v;
                    off += v;
                }
            }
            w[k + k * n] = 1.0 - off;
        }
        Self::from_dense_unchecked(n, w)
    }

    /// Uniform averaging over each neighborhood: column `k` puts
    /// `1/deg(k)` on every neighbor of `k`, self included.
    pub fn uniform(t: &Topology) -> Self {
        let n = t.n_nodes();
        let mut w = vec![0.0; n * n];
        for k in 0..n {
            let v = 1.0 / t.degree(k) as f64;
            for &l in t.neighbors(k) {
                w[l + k * n] = v;
            }
        }
        Self::from_dense_unchecked(n, w)
    }

    pub fn identity(n: usize) -> Result<Self, NetError> {
        if n == 0 {
            return Err(NetError::Empty);
        }
        let mut w = vec![0.0; n * n];
        for k in 0..n {
            w[k + k * n] = 1.0;
        }
        Ok(Self::from_dense_unchecked(n, w))
    }

    /// Validates and wraps an arbitrary column-major weight matrix:
    /// square, entries nonnegative, every column summing to one within
    /// [`STOCHASTIC_TOL`].
    pub fn from_dense(n: usize, weights: Vec<f64>) -> Result<Self, NetError> {
        if n == 0 {
            return Err(NetError::Empty);
        }
        if weights.len() != n * n {
            return Err(NetError::BadMatrix(format!(
                "expected {} entries for n={n}, got {}",
                n * n,
                weights.len()
            )));
        }
        for (idx, v) in weights.iter().enumerate() {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(NetError::BadMatrix(format!(
                    "entry ({}, {}) is {v}",
                    idx % n,
                    idx / n
                )));
            }
        }
        for k in 0..n {
            let s: f64 = weights[k * n..(k + 1) * n].iter().sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(NetError::BadMatrix(format!("column {k} sums to {s}")));
            }
        }
        Ok(Self::from_dense_unchecked(n, weights))
    }

    fn from_dense_unchecked(n: usize, weights: Vec<f64>) -> Self {
        let columns = (0..n)
            .map(|k| {
                (0..n)
                    .filter_map(|l| {
                        let v = weights[l + k * n];
                        (v != 0.0).then_some((l, v))
                    })
                    .collect()
            })
            .collect();
        CombinationMatrix { n, weights, columns }
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    /// Weight `a_{lk}` that agent `k` places on agent `l`.
    pub fn weight(&self, l: usize, k: usize) -> f64 {
        self.weights[l + k * self.n]
    }

    /// Nonzero `(source, weight)` pairs of column `k`, ascending source.
    pub fn column(&self, k: usize) -> &[(usize, f64)] {
        &self.columns[k]
    }

    /// Number of nonzero weights (multiply-adds per combine sweep).
    pub fn nnz(&self) -> u64 {
        self.columns.iter().map(|c| c.len() as u64).sum()
    }

    /// Blockwise combine of stacked per-node vectors:
    /// `dst[k] = sum_l a_{lk} src[l]`, sources visited in ascending order.
    pub fn combine_into(&self, src: &[f64], dim: usize, dst: &mut [f64]) {
        debug_assert_eq!(src.len(), self.n * dim);
        debug_assert_eq!(dst.len(), self.n * dim);
        for k in 0..self.n {
            let out = &mut dst[k * dim..(k + 1) * dim];
            out.fill(0.0);
            for &(l, a) in &self.columns[k] {
                let s = &src[l * dim..(l + 1) * dim];
                for d in 0..dim {
                    out[d] += a * s[d];
                }
            }
        }
    }

    /// True when the support graph (edges wherever `a_{lk}` or `a_{kl}` is
    /// nonzero) is connected and some self-weight is positive.
    pub fn is_primitive(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let has_self_loop = (0..self.n).any(|k| self.weight(k, k) > 0.0);
        if !has_self_loop {
            return false;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(k) = stack.pop() {
            for l in 0..self.n {
                if !seen[l] && (self.weight(l, k) != 0.0 || self.weight(k, l) != 0.0) {
                    seen[l] = true;
                    count += 1;
                    stack.push(l);
                }
            }
        }
        count == self.n
    }

    /// Fixed vector of the matrix (`A p = p`, entries summing to one),
    /// found by power iteration on the half-lazy matrix `(A + I)/2`, which
    /// shares the fixed vector and is immune to periodic support.
    pub fn perron_vector(&self) -> Result<Vec<f64>, NetError> {
        let n = self.n;
        let mut p = vec![1.0 / n as f64; n];
        let mut ap = vec![0.0; n];
        for _ in 0..PERRON_MAX_ITERS {
            ap.fill(0.0);
            for k in 0..n {
                let pk = p[k];
                for &(l, a) in &self.columns[k] {
                    ap[l] += a * pk;
                }
            }
            let resid = ap
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if resid < PERRON_TOL {
                return Ok(p);
            }
            let mut sum = 0.0;
            for (pk, apk) in p.iter_mut().zip(&ap) {
                *pk = 0.5 * (*pk + apk);
                sum += *pk;
            }
            // column stochasticity preserves the sum; renormalize drift anyway
            for pk in p.iter_mut() {
                *pk /= sum;
            }
        }
        Err(NetError::PerronNotConverged { iters: PERRON_MAX_ITERS, tol: PERRON_TOL })
    }

    /// Perron vector, eigenvalue magnitudes, and structural flags.
    pub fn spectral_summary(&self) -> Result<SpectralSummary, NetError> {
        let n = self.n;
        let perron = self.perron_vector()?;
        let dense = DMatrix::from_column_slice(n, n, &self.weights);
        let eig = dense.complex_eigenvalues();
        let mut mags: Vec<f64> = eig.iter().map(|c| c.norm()).collect();
        mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let second_magnitude = if n == 1 {
            0.0
        } else {
            // drop the single entry accounting for the Perron root
            let root = mags
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    (*a - 1.0).abs().partial_cmp(&(*b - 1.0).abs()).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            mags.iter()
                .enumerate()
                .filter(|(i, _)| *i != root)
                .map(|(_, m)| *m)
                .fold(0.0f64, f64::max)
        };
        let is_doubly_stochastic = (0..n).all(|l| {
            let s: f64 = (0..n).map(|k| self.weight(l, k)).sum();
            (s - 1.0).abs() <= STOCHASTIC_TOL
        });
        Ok(SpectralSummary {
            perron,
            second_magnitude,
            is_primitive: self.is_primitive(),
            is_doubly_stochastic,
            eigenvalue_magnitudes: mags,
        })
    }
}
