//! Closed-form predictors for the excess-risk decay of diminishing-step
//! stochastic learners, plus the special-function machinery behind them:
//! log-gamma, squared-factor products as gamma ratios, the subcritical
//! series constant, transient decay brackets, a consensus-vs-diffusion
//! tail bracket, and the Cramer-Rao floor on mean-square deviation.
//!
//! Everything here is deterministic f64 arithmetic; the stochastic side
//! lives in the harness.

use nalgebra::DMatrix;
use thiserror::Error;

/// Half-width of the band around `2*lambda*mu == 1` classified as critical.
pub const CRITICAL_BAND: f64 = 1e-12;

/// Iteration cap for the power-sum stop rule in [`series_constant`].
const SERIES_MAX_TERMS: u64 = 3_200_000;

/// Safety factor on the first neglected tail order of [`series_constant`].
/// The true coefficient is O(1) over the admissible range; 11 leaves an
/// order of magnitude of headroom.
const SERIES_TAIL_SAFETY: f64 = 11.0;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("log_gamma requires x > 0, got {0}")]
    GammaPole(f64),
    #[error("series constant diverges unless 0 <= a < 0.5, got {0}")]
    SeriesDivergent(f64),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("transient bounds are valid only for i >= {min_valid}, got {got}")]
    TransientTooEarly { min_valid: u64, got: u64 },
    #[error("information matrix is not symmetric positive-definite")]
    SingularInformation,
}

// Lanczos approximation, g = 607/128, 15 coefficients. Relative error of
// exp(log_gamma) stays below ~1e-14 over the positive axis.
const LANCZOS_G: f64 = 607.0 / 128.0;
const LANCZOS_COEFFS: [f64; 15] = [
    0.99999999999999709182,
    57.156235665862923517,
    -59.597960355475491248,
    14.136097974741747174,
    -0.49191381609762019978,
    0.33994649984811888699e-4,
    0.46523628927048575665e-4,
    -0.98374475304879564677e-4,
    0.15808870322491248884e-3,
    -0.21026444172410488319e-3,
    0.21743961811521264320e-3,
    -0.16431810653676389022e-3,
    0.84418223983852743293e-4,
    -0.26190838401581408670e-4,
    0.36899182659531622704e-5,
];

/// Natural log of the gamma function for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64, TheoryError> {
    if !x.is_finite() || x <= 0.0 {
        return Err(TheoryError::GammaPole(x));
    }
    Ok(log_gamma_pos(x))
}

fn log_gamma_pos(x: f64) -> f64 {
    use std::f64::consts::PI;
    if x < 0.5 {
        // reflection; sin(pi x) > 0 on (0, 0.5)
        return (PI / (PI * x).sin()).ln() - log_gamma_pos(1.0 - x);
    }
    let mut acc = LANCZOS_COEFFS[0];
    for (k, c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += c / (x - 1.0 + k as f64);
    }
    let t = x + LANCZOS_G - 0.5;
    (x - 0.5) * t.ln() - t + 0.5 * (2.0 * PI).ln() + acc.ln()
}

/// Product of `(1 - lm/t)^2` over integer `t` in `(j, i]`; empty when
/// `i == j`. Evaluated through gamma ratios in the log domain when every
/// factor is positive (`j + 1 > lm`), directly otherwise.
pub fn gamma_ratio_product(lm: f64, j: u64, i: u64) -> Result<f64, TheoryError> {
    if !lm.is_finite() || lm < 0.0 {
        return Err(TheoryError::InvalidArgument(format!(
            "gamma_ratio_product requires finite lm >= 0, got {lm}"
        )));
    }
    if i < j {
        return Err(TheoryError::InvalidArgument(format!(
            "gamma_ratio_product requires i >= j, got j={j}, i={i}"
        )));
    }
    if i == j {
        return Ok(1.0);
    }
    let (jf, fi) = (j as f64, i as f64);
    if jf + 1.0 > lm {
        let ln = 2.0
            * (log_gamma_pos(fi + 1.0 - lm) - log_gamma_pos(fi + 1.0) + log_gamma_pos(jf + 1.0)
                - log_gamma_pos(jf + 1.0 - lm));
        Ok(ln.exp())
    } else {
        let mut p = 1.0;
        for t in (j + 1)..=i {
            let f = 1.0 - lm / t as f64;
            p *= f * f;
        }
        Ok(p)
    }
}

/// `sum_{j>=1} (Gamma(j) / Gamma(j + 1 - a))^2` for `0 <= a < 0.5`.
///
/// Partial sums use the term recursion `t_{j+1} = t_j * (j / (j + 1 - a))^2`
/// with compensated summation and a periodic resync through [`log_gamma`];
/// the tail beyond the cutoff is a three-term power-sum expansion of
/// `sum j^{-2(1-a)}` whose first neglected order bounds the error.
pub fn series_constant(a: f64) -> Result<f64, TheoryError> {
    if !a.is_finite() || !(0.0..0.5).contains(&a) {
        return Err(TheoryError::SeriesDivergent(a));
    }
    let b = 1.0 - a;
    // Coefficients of (Gamma(j)/Gamma(j+b))^2 ~ j^{-2b} (1 + c1/j + c2/j^2 + ...)
    let g1 = b * (1.0 - b) / 2.0;
    let g2 = b * (b + 1.0) * (1.0 - b) * (2.0 - 3.0 * b) / 24.0;
    let c1 = 2.0 * g1;
    let c2 = g1 * g1 + 2.0 * g2;
    let mut cutoff: u64 = 200_000;
    loop {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        let mut term = (-2.0 * log_gamma_pos(1.0 + b)).exp();
        for j in 1..=cutoff {
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
            if j % 25_000 == 0 {
                let jn = (j + 1) as f64;
                term = (2.0 * (log_gamma_pos(jn) - log_gamma_pos(jn + b))).exp();
            } else {
                let r = j as f64 / (j as f64 + b);
                term *= r * r;
            }
        }
        // Tail of sum_{j > cutoff} j^sigma for sigma < -1.
        let jf = cutoff as f64;
        let pow_tail = |sigma: f64| -> f64 {
            jf.powf(sigma + 1.0) / (-1.0 - sigma) - jf.powf(sigma) / 2.0
                - sigma * jf.powf(sigma - 1.0) / 12.0
                + sigma * (sigma - 1.0) * (sigma - 2.0) * jf.powf(sigma - 3.0) / 720.0
        };
        let tail = pow_tail(-2.0 * b) + c1 * pow_tail(-2.0 * b - 1.0) + c2 * pow_tail(-2.0 * b - 2.0);
        let total = sum + tail;
        let residual = SERIES_TAIL_SAFETY * pow_tail(-2.0 * b - 3.0).abs();
        if residual < 1e-10 * total || cutoff >= SERIES_MAX_TERMS {
            return Ok(total);
        }
        cutoff *= 2;
    }
}

/// Which decay regime a mode with Hessian eigenvalue `lambda` falls in
/// under step sizes `mu/i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateCase {
    /// `2*lambda*mu > 1`: excess risk decays as `1/i`.
    Supercritical,
    /// `2*lambda*mu == 1` (within [`CRITICAL_BAND`]): decays as `ln(i)/i`.
    Critical,
    /// `2*lambda*mu < 1`: decays as `i^{-2*lambda*mu}`.
    Subcritical,
}

pub fn rate_case(lambda: f64, mu: f64) -> Result<RateCase, TheoryError> {
    if !(lambda > 0.0 && lambda.is_finite() && mu > 0.0 && mu.is_finite()) {
        return Err(TheoryError::InvalidArgument(format!(
            "rate_case requires positive finite lambda and mu, got lambda={lambda}, mu={mu}"
        )));
    }
    let x = 2.0 * lambda * mu;
    if (x - 1.0).abs() <= CRITICAL_BAND {
        Ok(RateCase::Critical)
    } else if x > 1.0 {
        Ok(RateCase::Supercritical)
    } else {
        Ok(RateCase::Subcritical)
    }
}

/// Leading decay factor of one Hessian mode's excess-risk contribution at
/// iteration `i`, by regime: `1/((2*lambda*mu - 1) i)`, `ln(i)/i`, or
/// `C(lambda*mu) * i^{-2*lambda*mu}` with `C` the series constant.
pub fn mode_rate_factor(i: u64, lambda: f64, mu: f64) -> Result<f64, TheoryError> {
    if i == 0 {
        return Err(TheoryError::InvalidArgument(
            "mode_rate_factor requires i >= 1".into(),
        ));
    }
    let fi = i as f64;
    match rate_case(lambda, mu)? {
        RateCase::Supercritical => Ok(1.0 / ((2.0 * lambda * mu - 1.0) * fi)),
        RateCase::Critical => Ok(fi.ln() / fi),
        RateCase::Subcritical => Ok(series_constant(lambda * mu)? * fi.powf(-2.0 * lambda * mu)),
    }
}

/// Inputs of the asymptotic excess-risk predictor for a cooperating
/// network, expressed in the Hessian eigenbasis.
#[derive(Debug, Clone)]
pub struct RateParams {
    eigenvalues: Vec<f64>,
    mu: f64,
    projected_noise: Vec<f64>,
    perron_norm_sq: f64,
    n_nodes: usize,
}

impl RateParams {
    /// `eigenvalues`: Hessian eigenvalues at the optimum (all positive).
    /// `projected_noise`: diagonal of the gradient-noise covariance in the
    /// same eigenbasis (nonnegative). `perron_norm_sq`: squared Euclidean
    /// norm of the combination matrix's Perron vector, in `[1/N, 1]`.
    pub fn new(
        eigenvalues: Vec<f64>,
        mu: f64,
        projected_noise: Vec<f64>,
        perron_norm_sq: f64,
        n_nodes: usize,
    ) -> Result<Self, TheoryError> {
        if eigenvalues.is_empty() || eigenvalues.len() != projected_noise.len() {
            return Err(TheoryError::InvalidArgument(format!(
                "need matching nonempty eigenvalue/noise lists, got {} and {}",
                eigenvalues.len(),
                projected_noise.len()
            )));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(TheoryError::InvalidArgument(format!("mu must be positive, got {mu}")));
        }
        if n_nodes == 0 {
            return Err(TheoryError::InvalidArgument("n_nodes must be >= 1".into()));
        }
        if let Some(l) = eigenvalues.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(TheoryError::InvalidArgument(format!(
                "Hessian eigenvalues must be positive, got {l}"
            )));
        }
        if let Some(s) = projected_noise.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(TheoryError::InvalidArgument(format!(
                "projected noise entries must be nonnegative, got {s}"
            )));
        }
        let lo = 1.0 / n_nodes as f64 - 1e-9;
        if !(perron_norm_sq >= lo && perron_norm_sq <= 1.0 + 1e-9) {
            return Err(TheoryError::InvalidArgument(format!(
                "perron_norm_sq must lie in [1/N, 1], got {perron_norm_sq} with N={n_nodes}"
            )));
        }
        Ok(Self { eigenvalues, mu, projected_noise, perron_norm_sq, n_nodes })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn projected_noise(&self) -> &[f64] {
        &self.projected_noise
    }

    pub fn perron_norm_sq(&self) -> f64 {
        self.perron_norm_sq
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }
}

/// Predicted network-average excess risk at iteration `i`:
/// `(mu^2 / 2) * sum_m lambda_m * rate_m(i) * noise_m * ||p||^2`.
pub fn asymptotic_er_predictor(params: &RateParams, i: u64) -> Result<f64, TheoryError> {
    if i == 0 {
        return Err(TheoryError::InvalidArgument(
            "asymptotic_er_predictor requires i >= 1".into(),
        ));
    }
    let mut sum = 0.0;
    for (l, s) in params.eigenvalues.iter().zip(&params.projected_noise) {
        sum += l * mode_rate_factor(i, *l, params.mu)? * s;
    }
    Ok(0.5 * params.mu * params.mu * params.perron_norm_sq * sum)
}

/// Spectrum-free approximation of the same quantity when every mode is
/// well supercritical: `mu * tr(R_v) * ||p||^2 / (4 i)`.
pub fn large_step_er_approx(
    mu: f64,
    noise_trace: f64,
    perron_norm_sq: f64,
    i: u64,
) -> Result<f64, TheoryError> {
    if !(mu > 0.0 && mu.is_finite()) || !(noise_trace >= 0.0) || !(perron_norm_sq > 0.0) {
        return Err(TheoryError::InvalidArgument(format!(
            "large_step_er_approx got mu={mu}, noise_trace={noise_trace}, perron_norm_sq={perron_norm_sq}"
        )));
    }
    if i == 0 {
        return Err(TheoryError::InvalidArgument("large_step_er_approx requires i >= 1".into()));
    }
    Ok(mu * noise_trace * perron_norm_sq / (4.0 * i as f64))
}

/// Inputs of the deterministic transient bracket: per-mode energy of the
/// centroid's initial error and the matching Hessian eigenvalues.
#[derive(Debug, Clone)]
pub struct TransientParams {
    initial_mode_energy: Vec<f64>,
    eigenvalues: Vec<f64>,
    mu: f64,
}

impl TransientParams {
    pub fn new(
        initial_mode_energy: Vec<f64>,
        eigenvalues: Vec<f64>,
        mu: f64,
    ) -> Result<Self, TheoryError> {
        if initial_mode_energy.is_empty() || initial_mode_energy.len() != eigenvalues.len() {
            return Err(TheoryError::InvalidArgument(format!(
                "need matching nonempty energy/eigenvalue lists, got {} and {}",
                initial_mode_energy.len(),
                eigenvalues.len()
            )));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(TheoryError::InvalidArgument(format!("mu must be positive, got {mu}")));
        }
        if let Some(e) = initial_mode_energy.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
            return Err(TheoryError::InvalidArgument(format!(
                "mode energies must be nonnegative, got {e}"
            )));
        }
        if let Some(l) = eigenvalues.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(TheoryError::InvalidArgument(format!(
                "Hessian eigenvalues must be positive, got {l}"
            )));
        }
        Ok(Self { initial_mode_energy, eigenvalues, mu })
    }

    /// Smallest iteration at which [`transient_bounds`] is valid.
    pub fn min_valid_iteration(&self) -> u64 {
        self.eigenvalues
            .iter()
            .map(|l| {
                let a = l * self.mu;
                let anchor = mode_anchor(a);
                (a.ceil() as u64 + 3).max(anchor + 2)
            })
            .max()
            .unwrap_or(3)
    }
}

// Anchor index for the bracket constants. Shifted one step further out for
// integer a, where the factor at j == a vanishes exactly and would
// degenerate the constants.
fn mode_anchor(a: f64) -> u64 {
    if a >= 1.0 && a.fract() == 0.0 {
        a as u64 + 2
    } else {
        a.ceil() as u64 + 1
    }
}

/// Deterministic two-sided bracket on the transient (noise-free) part of
/// the centroid excess risk at iteration `i`.
///
/// Each mode's product `prod_{j<i} (1 - a/j)^2` is sandwiched between two
/// closed forms that share the exact prefix product up to a small anchor
/// index; both sides decay as `i^{-2a}`. When `a` is an integer the factor
/// at `j == a` is exactly zero; it is skipped and the bracket then covers
/// the product of the remaining nonzero factors.
pub fn transient_bounds(params: &TransientParams, i: u64) -> Result<(f64, f64), TheoryError> {
    let min_valid = params.min_valid_iteration();
    if i < min_valid {
        return Err(TheoryError::TransientTooEarly { min_valid, got: i });
    }
    let fi = i as f64;
    let mut lower = 0.0;
    let mut upper = 0.0;
    for (l, e) in params.eigenvalues.iter().zip(&params.initial_mode_energy) {
        let a = l * params.mu;
        let anchor = mode_anchor(a);
        let c0 = anchor as f64;
        // Exact squared prefix product up to the anchor, zero factors skipped.
        let mut ln_prefix = 0.0;
        for j in 1..=anchor {
            let f = 1.0 - a / j as f64;
            if f != 0.0 {
                ln_prefix += 2.0 * f.abs().ln();
            }
        }
        let lo = (ln_prefix
            + 2.0 * (fi - 1.0) * (-a / (fi - 1.0)).ln_1p()
            + 2.0 * a * (c0 - a).ln()
            - 2.0 * a * (fi - 1.0 - a).ln()
            - 2.0 * c0 * (1.0 - a / c0).ln())
        .exp();
        let up = (ln_prefix
            + 2.0 * fi * (-a / fi).ln_1p()
            + 2.0 * a * (c0 - a + 1.0).ln()
            - 2.0 * a * (fi - a).ln()
            - 2.0 * (c0 + 1.0) * (1.0 - a / (c0 + 1.0)).ln())
        .exp();
        lower += 0.5 * l * lo * e;
        upper += 0.5 * l * up * e;
    }
    Ok((lower, upper))
}

/// Shared asymptote of the diffusion upper and consensus lower tail bounds
/// for one combination-matrix mode with self-weight `d_kk`:
/// `i^{-2} / ln(d_kk^{-2})`, valid for `0 < d_kk < 1` and `2*lambda*mu > 1`.
/// Returned as `(diffusion_upper, consensus_lower)`; the two coincide.
pub fn consensus_mode_bracket(
    d_kk: f64,
    lambda: f64,
    mu: f64,
    i: u64,
) -> Result<(f64, f64), TheoryError> {
    if !(d_kk > 0.0 && d_kk < 1.0) {
        return Err(TheoryError::InvalidArgument(format!(
            "consensus_mode_bracket requires 0 < d_kk < 1, got {d_kk}"
        )));
    }
    if !(lambda > 0.0 && mu > 0.0 && 2.0 * lambda * mu > 1.0) {
        return Err(TheoryError::InvalidArgument(format!(
            "consensus_mode_bracket requires 2*lambda*mu > 1, got lambda={lambda}, mu={mu}"
        )));
    }
    if i == 0 {
        return Err(TheoryError::InvalidArgument("consensus_mode_bracket requires i >= 1".into()));
    }
    let fi = i as f64;
    let pivot = 1.0 / (fi * fi * (-2.0 * d_kk.ln()));
    Ok((pivot, pivot))
}

/// Cramer-Rao floor on the mean-square deviation of any unbiased estimator
/// built from `n_nodes * i` independent samples: `tr(F^-1) / (N i)` where
/// `F` is the per-sample Fisher information.
pub fn cramer_rao_msd(
    fim_sample: &DMatrix<f64>,
    n_nodes: usize,
    i: u64,
) -> Result<f64, TheoryError> {
    if fim_sample.nrows() != fim_sample.ncols() || fim_sample.nrows() == 0 {
        return Err(TheoryError::InvalidArgument(format!(
            "information matrix must be square and nonempty, got {}x{}",
            fim_sample.nrows(),
            fim_sample.ncols()
        )));
    }
    if n_nodes == 0 || i == 0 {
        return Err(TheoryError::InvalidArgument(
            "cramer_rao_msd requires n_nodes >= 1 and i >= 1".into(),
        ));
    }
    let chol = fim_sample
        .clone()
        .cholesky()
        .ok_or(TheoryError::SingularInformation)?;
    let inv = chol.inverse();
    Ok(inv.trace() / (n_nodes as f64 * i as f64))
}

/// Markov tail bound: an excess-risk prediction `er` is exceeded with
/// probability at most `nu` by level `er / nu`.
pub fn high_prob_bound(er_prediction: f64, nu: f64) -> Result<f64, TheoryError> {
    if !(er_prediction >= 0.0 && er_prediction.is_finite()) {
        return Err(TheoryError::InvalidArgument(format!(
            "high_prob_bound requires a nonnegative prediction, got {er_prediction}"
        )));
    }
    if !(nu > 0.0 && nu < 1.0) {
        return Err(TheoryError::InvalidArgument(format!(
            "high_prob_bound requires 0 < nu < 1, got {nu}"
        )));
    }
    Ok(er_prediction / nu)
}
