//! Risk models the learners optimize: a linear-regression quadratic with
//! Gaussian features and observation noise, and a regularized logistic
//! model over a fixed labeled dataset.
//!
//! Both expose the same surface to the strategies: draw a sample, evaluate
//! the per-sample loss gradient, score a weight vector by excess risk, and
//! describe the risk Hessian at the optimum.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Samples needed before gradient-noise estimation is allowed.
pub const MIN_NOISE_SAMPLES: usize = 1000;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("matrix is not symmetric positive-definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset row {row}: label must be exactly +1 or -1, got {label}")]
    BadLabel { row: usize, label: f64 },
    #[error("dataset row {row}: expected {expected} features, got {got}")]
    RaggedRow { row: usize, expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("optimizer did not reach gradient norm {tol} in {iters} iterations (final {final_norm})")]
    OptimizerFailed { iters: usize, tol: f64, final_norm: f64 },
    #[error("noise estimation needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("Fisher information is undefined for zero observation noise")]
    ZeroNoise,
}

/// One streaming observation: a feature vector and a scalar label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Sample {
    pub fn zeros(dim: usize) -> Self {
        Sample { features: vec![0.0; dim], label: 0.0 }
    }
}

/// Eigendecomposition of the risk Hessian at the optimum: eigenvalues
/// ascending and positive, basis columns orthonormal in matching order.
#[derive(Debug, Clone)]
pub struct HessianSpectrum {
    eigenvalues: Vec<f64>,
    basis: DMatrix<f64>,
}

impl HessianSpectrum {
    pub fn from_matrix(hessian: &DMatrix<f64>) -> Result<Self, ModelError> {
        let n = hessian.nrows();
        if n == 0 || hessian.ncols() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "Hessian must be square and nonempty, got {}x{}",
                hessian.nrows(),
                hessian.ncols()
            )));
        }
        for r in 0..n {
            for c in (r + 1)..n {
                if (hessian[(r, c)] - hessian[(c, r)]).abs() > 1e-10 {
                    return Err(ModelError::NotPositiveDefinite);
                }
            }
        }
        let eig = hessian.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
        let eigenvalues: Vec<f64> = order.iter().map(|&m| eig.eigenvalues[m]).collect();
        if eigenvalues[0] <= 0.0 {
            return Err(ModelError::NotPositiveDefinite);
        }
        let mut basis = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            basis.set_column(dst, &eig.eigenvectors.column(src));
        }
        Ok(HessianSpectrum { eigenvalues, basis })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Eigenvalues ascending; all positive.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues.last().unwrap()
    }

    /// Orthonormal eigenvector columns, same order as [`eigenvalues`].
    ///
    /// [`eigenvalues`]: Self::eigenvalues
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Coordinates of `v` in the eigenbasis.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|m| (0..n).map(|d| self.basis[(d, m)] * v[d]).sum())
            .collect()
    }

    /// Diagonal of `basis^T m basis`.
    pub fn projected_diag(&self, m: &DMatrix<f64>) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|k| {
                let phi = self.basis.column(k);
                (phi.transpose() * m * phi)[(0, 0)]
            })
            .collect()
    }
}

/// Gradient-noise covariance at the optimum.
#[derive(Debug, Clone)]
pub struct NoiseStats {
    /// Covariance matrix of the per-sample gradient at the optimum.
    pub covariance: DMatrix<f64>,
    /// Its trace.
    pub trace: f64,
    /// Its diagonal in the Hessian eigenbasis, entrywise nonnegative.
    pub projected_diag: Vec<f64>,
}

/// Common surface of the two risk models.
pub trait RiskModel: Sync {
    fn dim(&self) -> usize;

    /// Minimizer of the risk.
    fn optimum(&self) -> &[f64];

    /// Draws the next observation from the node's stream into `out`.
    fn draw_sample(&self, rng: &mut ChaCha8Rng, out: &mut Sample);

    /// Per-sample loss gradient at `w` into `out`.
    fn loss_gradient(&self, w: &[f64], sample: &Sample, out: &mut [f64]);

    /// Risk at `w` minus risk at the optimum; nonnegative.
    fn excess_risk(&self, w: &[f64]) -> f64;

    /// Risk Hessian at the optimum.
    fn spectrum(&self) -> &HessianSpectrum;
}

// ---------------------------------------------------------------------------
// Quadratic model

/// Linear regression stream: features `h ~ N(0, feature_cov)`, label
/// `y = h . w_opt + noise`, squared-error loss. The risk is
/// `sigma_v_sq + (w - w_opt)^T feature_cov (w - w_opt)` and the Hessian
/// `2 feature_cov` everywhere.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    dim: usize,
    w_opt: Vec<f64>,
    sigma_v_sq: f64,
    sigma_v: f64,
    feature_cov: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    spectrum: HessianSpectrum,
}

impl QuadraticModel {
    pub fn new(
        w_opt: Vec<f64>,
        sigma_v_sq: f64,
        feature_cov: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        let dim = w_opt.len();
        if dim == 0 {
            return Err(ModelError::DimensionMismatch("optimum must be nonempty".into()));
        }
        if feature_cov.nrows() != dim || feature_cov.ncols() != dim {
            return Err(ModelError::DimensionMismatch(format!(
                "feature covariance is {}x{}, optimum has dim {dim}",
                feature_cov.nrows(),
                feature_cov.ncols()
            )));
        }
        if !(sigma_v_sq >= 0.0 && sigma_v_sq.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "noise variance must be nonnegative, got {sigma_v_sq}"
            )));
        }
        let chol = feature_cov
            .clone()
            .cholesky()
            .ok_or(ModelError::NotPositiveDefinite)?;
        let spectrum = HessianSpectrum::from_matrix(&(2.0 * &feature_cov))?;
        Ok(QuadraticModel {
            dim,
            w_opt,
            sigma_v_sq,
            sigma_v: sigma_v_sq.sqrt(),
            feature_cov,
            chol_l: chol.l(),
            spectrum,
        })
    }

    /// Unit feature covariance.
    pub fn identity_cov(w_opt: Vec<f64>, sigma_v_sq: f64) -> Result<Self, ModelError> {
        let dim = w_opt.len();
        Self::new(w_opt, sigma_v_sq, DMatrix::identity(dim.max(1), dim.max(1)))
    }

    pub fn sigma_v_sq(&self) -> f64 {
        self.sigma_v_sq
    }

    pub fn feature_cov(&self) -> &DMatrix<f64> {
        &self.feature_cov
    }

    /// Full risk `sigma_v_sq + (w - w_opt)^T feature_cov (w - w_opt)`.
    pub fn risk(&self, w: &[f64]) -> f64 {
        self.sigma_v_sq + self.error_quadratic(w)
    }

    fn error_quadratic(&self, w: &[f64]) -> f64 {
        let d = self.dim;
        let mut acc = 0.0;
        for r in 0..d {
            let mut row = 0.0;
            for c in 0..d {
                row += self.feature_cov[(r, c)] * (w[c] - self.w_opt[c]);
            }
            acc += (w[r] - self.w_opt[r]) * row;
        }
        acc
    }

    /// Exact gradient-noise covariance at the optimum:
    /// `4 sigma_v_sq feature_cov`.
    pub fn noise_stats(&self) -> NoiseStats {
        let covariance = 4.0 * self.sigma_v_sq * &self.feature_cov;
        let trace = covariance.trace();
        let projected_diag = self.spectrum.projected_diag(&covariance);
        NoiseStats { covariance, trace, projected_diag }
    }

    /// Per-sample Fisher information under the Gaussian noise model:
    /// `feature_cov / sigma_v_sq`. Undefined for zero noise.
    pub fn fisher_information(&self) -> Result<DMatrix<f64>, ModelError> {
        if self.sigma_v_sq == 0.0 {
            return Err(ModelError::ZeroNoise);
        }
        Ok(&self.feature_cov / self.sigma_v_sq)
    }
}

impl RiskModel for QuadraticModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn optimum(&self) -> &[f64] {
        &self.w_opt
    }

    /// Stream layout per sample: `dim` feature normals in ascending
    /// coordinate order, then one noise normal (drawn even when the noise
    /// variance is zero, so streams stay aligned across configurations).
    fn draw_sample(&self, rng: &mut ChaCha8Rng, out: &mut Sample) {
        let d = self.dim;
        if out.features.len() != d {
            out.features.resize(d, 0.0);
        }
        for z in out.features.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        // in-place lower-triangular transform, descending rows
        for r in (0..d).rev() {
            let mut acc = 0.0;
            for c in 0..=r {
                acc += self.chol_l[(r, c)] * out.features[c];
            }
            out.features[r] = acc;
        }
        let v: f64 = rng.sample(StandardNormal);
        let mut y = 0.0;
        for (h, w) in out.features.iter().zip(&self.w_opt) {
            y += h * w;
        }
        out.label = y + self.sigma_v * v;
    }

    /// `-2 h (y - h . w)`. The prediction accumulates in the same order
    /// as the label in [`RiskModel::draw_sample`], so at `w = w_opt` with
    /// zero noise the residual cancels exactly.
    fn loss_gradient(&self, w: &[f64], sample: &Sample, out: &mut [f64]) {
        let mut pred = 0.0;
        for (h, wd) in sample.features.iter().zip(w) {
            pred += h * wd;
        }
        let resid = sample.label - pred;
        for (o, h) in out.iter_mut().zip(&sample.features) {
            *o = -2.0 * h * resid;
        }
    }

    fn excess_risk(&self, w: &[f64]) -> f64 {
        self.error_quadratic(w)
    }

    fn spectrum(&self) -> &HessianSpectrum {
        &self.spectrum
    }
}

// ---------------------------------------------------------------------------
// Logistic model

fn validate_dataset(dataset: &[Sample]) -> Result<usize, ModelError> {
    let first = dataset.first().ok_or(ModelError::EmptyDataset)?;
    let dim = first.features.len();
    if dim == 0 {
        return Err(ModelError::DimensionMismatch("samples must have features".into()));
    }
    for (row, s) in dataset.iter().enumerate() {
        if s.features.len() != dim {
            return Err(ModelError::RaggedRow { row, expected: dim, got: s.features.len() });
        }
        if s.label != 1.0 && s.label != -1.0 {
            return Err(ModelError::BadLabel { row, label: s.label });
        }
    }
    Ok(dim)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln(1 + e^{-z})` without overflow on either tail.
fn softplus_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `1 / (1 + e^z)` without overflow on either tail.
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

fn logistic_full_gradient(dataset: &[Sample], rho: f64, w: &[f64], out: &mut [f64]) {
    let n = dataset.len() as f64;
    for (o, wd) in out.iter_mut().zip(w) {
        *o = rho * wd;
    }
    for s in dataset {
        let z = s.label * dot(&s.features, w);
        let coeff = s.label * sigmoid_neg(z) / n;
        for (o, h) in out.iter_mut().zip(&s.features) {
            *o -= coeff * h;
        }
    }
}

fn logistic_risk_of(dataset: &[Sample], rho: f64, w: &[f64]) -> f64 {
    // Kahan-compensated sum in dataset index order.
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for s in dataset {
        let z = s.label * dot(&s.features, w);
        let y = softplus_neg(z) - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    0.5 * rho * dot(w, w) + sum / dataset.len() as f64
}

/// Minimizes the regularized logistic empirical risk by gradient descent
/// with Armijo backtracking, from the origin, until the gradient norm
/// drops below `tol`. Returns the minimizer and its risk.
pub fn compute_w_opt_logistic(
    dataset: &[Sample],
    rho: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, f64), ModelError> {
    let dim = validate_dataset(dataset)?;
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(ModelError::InvalidParameter(format!(
            "regularizer must be positive, got {rho}"
        )));
    }
    if !(tol > 0.0) {
        return Err(ModelError::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    let mut w = vec![0.0; dim];
    let mut risk = logistic_risk_of(dataset, rho, &w);
    let mut grad = vec![0.0; dim];
    let mut trial = vec![0.0; dim];
    let mut grad_norm = f64::INFINITY;
    for _ in 0..max_iters {
        logistic_full_gradient(dataset, rho, &w, &mut grad);
        grad_norm = dot(&grad, &grad).sqrt();
        if grad_norm < tol {
            return Ok((w, risk));
        }
        let mut step = 1.0;
        loop {
            for ((t, wd), g) in trial.iter_mut().zip(&w).zip(&grad) {
                *t = wd - step * g;
            }
            let trial_risk = logistic_risk_of(dataset, rho, &trial);
            if trial_risk <= risk - 1e-4 * step * grad_norm * grad_norm {
                w.copy_from_slice(&trial);
                risk = trial_risk;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                return Err(ModelError::OptimizerFailed {
                    iters: max_iters,
                    tol,
                    final_norm: grad_norm,
                });
            }
        }
    }
    Err(ModelError::OptimizerFailed { iters: max_iters, tol, final_norm: grad_norm })
}

/// L2-regularized logistic regression over a fixed dataset with labels in
/// `{-1, +1}`. Sampling draws rows uniformly at random; the reference risk
/// is the full empirical risk, minimized once at construction.
#[derive(Debug, Clone)]
pub struct LogisticModel {
    dim: usize,
    rho: f64,
    dataset: Vec<Sample>,
    w_opt: Vec<f64>,
    w_opt_risk: f64,
    spectrum: HessianSpectrum,
}

impl LogisticModel {
    pub fn from_dataset(dataset: Vec<Sample>, rho: f64) -> Result<Self, ModelError> {
        Self::from_dataset_with(dataset, rho, 1e-8, 10_000)
    }

    pub fn from_dataset_with(
        dataset: Vec<Sample>,
        rho: f64,
        tol: f64,
        max_iters: usize,
    ) -> Result<Self, ModelError> {
        let dim = validate_dataset(&dataset)?;
        let (w_opt, w_opt_risk) = compute_w_opt_logistic(&dataset, rho, tol, max_iters)?;
        let hessian = logistic_hessian(&dataset, rho, &w_opt);
        let spectrum = HessianSpectrum::from_matrix(&hessian)?;
        Ok(LogisticModel { dim, rho, dataset, w_opt, w_opt_risk, spectrum })
    }

    /// Synthetic separable-with-noise dataset: a planted normal direction
    /// `w*`, standard normal features, labels `sign(h . w* + e)` with unit
    /// label noise (ties to +1). Draw order: `w*` first, then per sample
    /// the features (ascending) and the noise.
    pub fn synthetic(
        dim: usize,
        n_samples: usize,
        rho: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        if dim == 0 || n_samples == 0 {
            return Err(ModelError::InvalidParameter(
                "synthetic dataset needs dim >= 1 and n_samples >= 1".into(),
            ));
        }
        let w_star: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut dataset = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let features: Vec<f64> =
                (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let noise: f64 = rng.sample(StandardNormal);
            let label = if dot(&features, &w_star) + noise >= 0.0 { 1.0 } else { -1.0 };
            dataset.push(Sample { features, label });
        }
        Self::from_dataset(dataset, rho)
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn dataset(&self) -> &[Sample] {
        &self.dataset
    }

    pub fn n_samples(&self) -> usize {
        self.dataset.len()
    }

    /// Full empirical risk at `w`, summed in dataset index order.
    pub fn empirical_risk(&self, w: &[f64]) -> f64 {
        logistic_risk_of(&self.dataset, self.rho, w)
    }

    /// Empirical risk Hessian at an arbitrary point.
    pub fn hessian_at(&self, w: &[f64]) -> DMatrix<f64> {
        logistic_hessian(&self.dataset, self.rho, w)
    }

    /// Plug-in per-sample Fisher information: the data term of the
    /// empirical Hessian at the optimum (regularizer excluded).
    pub fn fisher_information(&self) -> DMatrix<f64> {
        self.hessian_at(&self.w_opt) - DMatrix::<f64>::identity(self.dim, self.dim) * self.rho
    }
}

fn logistic_hessian(dataset: &[Sample], rho: f64, w: &[f64]) -> DMatrix<f64> {
    let dim = w.len();
    let mut h = DMatrix::<f64>::identity(dim, dim) * rho;
    let n = dataset.len() as f64;
    for s in dataset {
        let z = s.label * dot(&s.features, w);
        let q = sigmoid_neg(z.abs());
        let coeff = q * (1.0 - q) / n;
        for r in 0..dim {
            let hr = coeff * s.features[r];
            for c in 0..dim {
                h[(r, c)] += hr * s.features[c];
            }
        }
    }
    h
}

impl RiskModel for LogisticModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn optimum(&self) -> &[f64] {
        &self.w_opt
    }

    /// One uniform dataset row per draw.
    fn draw_sample(&self, rng: &mut ChaCha8Rng, out: &mut Sample) {
        let idx = rng.gen_range(0..self.dataset.len());
        let s = &self.dataset[idx];
        if out.features.len() != self.dim {
            out.features.resize(self.dim, 0.0);
        }
        out.features.copy_from_slice(&s.features);
        out.label = s.label;
    }

    /// `rho w - y h / (1 + e^{y h . w})`, branch-stable on both tails.
    fn loss_gradient(&self, w: &[f64], sample: &Sample, out: &mut [f64]) {
        let z = sample.label * dot(&sample.features, w);
        let coeff = sample.label * sigmoid_neg(z);
        for ((o, wd), h) in out.iter_mut().zip(w).zip(&sample.features) {
            *o = self.rho * wd - coeff * h;
        }
    }

    /// Empirical risk above the minimized value, floored at zero (the
    /// reference optimum is itself accurate only to the optimizer
    /// tolerance).
    fn excess_risk(&self, w: &[f64]) -> f64 {
        (self.empirical_risk(w) - self.w_opt_risk).max(0.0)
    }

    fn spectrum(&self) -> &HessianSpectrum {
        &self.spectrum
    }
}

// ---------------------------------------------------------------------------
// Noise estimation

/// Sample covariance of the per-sample loss gradient at the optimum, from
/// `n_samples` fresh draws, with its trace and eigenbasis diagonal.
/// Requires at least [`MIN_NOISE_SAMPLES`] draws.
pub fn estimate_noise_stats<M: RiskModel>(
    model: &M,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NoiseStats, ModelError> {
    if n_samples < MIN_NOISE_SAMPLES {
        return Err(ModelError::TooFewSamples { needed: MIN_NOISE_SAMPLES, got: n_samples });
    }
    let d = model.dim();
    let mut grads = vec![0.0f64; n_samples * d];
    let mut sample = Sample::zeros(d);
    let w = model.optimum().to_vec();
    for t in 0..n_samples {
        model.draw_sample(rng, &mut sample);
        model.loss_gradient(&w, &sample, &mut grads[t * d..(t + 1) * d]);
    }
    let mut mean = vec![0.0f64; d];
    for t in 0..n_samples {
        for (m, g) in mean.iter_mut().zip(&grads[t * d..(t + 1) * d]) {
            *m += g;
        }
    }
    for m in mean.iter_mut() {
        *m /= n_samples as f64;
    }
    let denom = (n_samples - 1) as f64;
    let mut covariance = DMatrix::<f64>::zeros(d, d);
    for t in 0..n_samples {
        let g = &grads[t * d..(t + 1) * d];
        for r in 0..d {
            let cr = g[r] - mean[r];
            for c in 0..d {
                covariance[(r, c)] += cr * (g[c] - mean[c]) / denom;
            }
        }
    }
    let trace = covariance.trace();
    // projected entries as sums of squares, so they stay nonnegative
    let spectrum = model.spectrum();
    let mut projected_diag = vec![0.0f64; d];
    for (m, pd) in projected_diag.iter_mut().enumerate() {
        let mut acc = 0.0;
        for t in 0..n_samples {
            let g = &grads[t * d..(t + 1) * d];
            let mut proj = 0.0;
            for r in 0..d {
                proj += spectrum.basis()[(r, m)] * (g[r] - mean[r]);
            }
            acc += proj * proj;
        }
        *pd = acc / denom;
    }
    Ok(NoiseStats { covariance, trace, projected_diag })
}
