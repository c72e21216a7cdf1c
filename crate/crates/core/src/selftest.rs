//! Built-in numerical self-checks: special functions against references
//! computed here by independent means, and analytic gradients against
//! central finite differences. The CLI exposes these as a subcommand; the
//! acceptance suite runs them as one criterion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::models::{LogisticModel, QuadraticModel, RiskModel, Sample};
use crate::theory::{gamma_ratio_product, log_gamma, series_constant};

/// Outcome of one check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error, or the failure reason.
    pub detail: String,
}

impl CheckResult {
    fn from_error(name: &'static str, err: f64, tol: f64) -> Self {
        CheckResult {
            name,
            passed: err.is_finite() && err < tol,
            detail: format!("max error {err:.3e} (tolerance {tol:.1e})"),
        }
    }
}

/// Runs every check. All must pass for the build to be trusted.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check_log_gamma(),
        check_gamma_ratio_product(),
        check_series_constant_zero(),
        check_series_constant_reference(),
        check_quadratic_gradient(),
        check_logistic_gradient(),
    ]
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// log-gamma against values derivable in closed form: half-integer
/// reflection and exact factorials summed as logs.
fn check_log_gamma() -> CheckResult {
    let name = "log_gamma spot values";
    let mut worst = 0.0f64;
    let mut check = |x: f64, reference: f64| {
        if let Ok(v) = log_gamma(x) {
            worst = worst.max((v - reference).abs() / reference.abs().max(1.0));
        } else {
            worst = f64::INFINITY;
        }
    };
    check(0.5, 0.5 * std::f64::consts::PI.ln());
    check(1.0, 0.0);
    check(2.0, 0.0);
    check(5.0, 24.0f64.ln());
    // ln(100!) as a plain log sum
    let ln_fact: f64 = (2..=100u64).map(|k| (k as f64).ln()).sum();
    check(101.0, ln_fact);
    // Gamma(1.5) = sqrt(pi)/2
    check(1.5, (std::f64::consts::PI.sqrt() / 2.0).ln());
    CheckResult::from_error(name, worst, 1e-10)
}

/// The ratio-product helper against a directly multiplied reference,
/// exercising the log-gamma branch (`j + 1 > lambda*mu`) on a grid.
fn check_gamma_ratio_product() -> CheckResult {
    let name = "gamma ratio product vs direct multiplication";
    let mut worst = 0.0f64;
    for lm in [0.3f64, 0.7, 1.5, 3.0] {
        let j0 = (lm.floor() as u64).max(1); // ensures j + 1 > lm
        for (j, i) in [(j0, j0 + 1), (j0, j0 + 40), (j0 + 5, j0 + 200), (j0 + 17, j0 + 1000)] {
            let mut direct = 1.0f64;
            for t in (j + 1)..=i {
                let f = 1.0 - lm / t as f64;
                direct *= f * f;
            }
            match gamma_ratio_product(lm, j, i) {
                Ok(v) => {
                    let scale = direct.abs().max(1e-300);
                    worst = worst.max((v - direct).abs() / scale);
                }
                Err(_) => worst = f64::INFINITY,
            }
        }
    }
    CheckResult::from_error(name, worst, 1e-10)
}

fn check_series_constant_zero() -> CheckResult {
    let name = "series constant at zero equals pi^2/6";
    let reference = std::f64::consts::PI * std::f64::consts::PI / 6.0;
    let err = match series_constant(0.0) {
        Ok(v) => (v - reference).abs() / reference,
        Err(_) => f64::INFINITY,
    };
    CheckResult::from_error(name, err, 1e-9)
}

/// A second exponent, summed here by brute force with a generous tail.
fn check_series_constant_reference() -> CheckResult {
    let name = "series constant at 0.25 vs brute-force partial sum";
    // sum_j [Gamma(j)/Gamma(j+0.75)]^2 via term recursion, 4M terms; the
    // neglected tail of this 1/j^1.5 series is ~2/sqrt(J) ~ 1e-3, so only
    // ask for agreement at that level
    let b = 0.75f64;
    let mut term = match log_gamma(1.0 + b) {
        Ok(lg) => (-2.0 * lg).exp(),
        Err(_) => return CheckResult::from_error(name, f64::INFINITY, 1.0),
    };
    let mut sum = 0.0f64;
    let mut j = 1u64;
    while j <= 4_000_000 {
        sum += term;
        let jf = j as f64;
        let r = jf / (jf + b);
        term *= r * r;
        j += 1;
    }
    let err = match series_constant(0.25) {
        Ok(v) => (v - sum).abs() / v,
        Err(_) => f64::INFINITY,
    };
    CheckResult::from_error(name, err, 2e-3)
}

/// Analytic per-sample gradient vs central differences of the per-sample
/// squared error, recomputed here.
fn check_quadratic_gradient() -> CheckResult {
    let name = "quadratic gradient vs finite differences";
    let model = match QuadraticModel::identity_cov(vec![0.6, -0.3, 0.1], 0.5) {
        Ok(m) => m,
        Err(_) => return CheckResult::from_error(name, f64::INFINITY, 1.0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let mut sample = Sample::zeros(3);
    let loss = |w: &[f64], s: &Sample| {
        let pred: f64 = w.iter().zip(&s.features).map(|(a, b)| a * b).sum();
        (s.label - pred) * (s.label - pred)
    };
    let mut worst = 0.0f64;
    for w in [[0.0, 0.0, 0.0], [0.4, -1.2, 0.7], [3.0, 0.1, -0.5]] {
        model.draw_sample(&mut rng, &mut sample);
        let mut grad = vec![0.0; 3];
        model.loss_gradient(&w, &sample, &mut grad);
        worst = worst.max(fd_gradient_error(&w, &grad, |wv| loss(wv, &sample)));
    }
    CheckResult::from_error(name, worst, 1e-6)
}

/// Same for the regularized logistic loss, with its own stable softplus.
fn check_logistic_gradient() -> CheckResult {
    let name = "logistic gradient vs finite differences";
    let mut rng = ChaCha8Rng::seed_from_u64(0x10f1);
    let model = match LogisticModel::synthetic(4, 60, 0.7, &mut rng) {
        Ok(m) => m,
        Err(_) => return CheckResult::from_error(name, f64::INFINITY, 1.0),
    };
    let rho = 0.7;
    let softplus = |x: f64| {
        if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    };
    let loss = |w: &[f64], s: &Sample| {
        let margin: f64 = w.iter().zip(&s.features).map(|(a, b)| a * b).sum::<f64>() * s.label;
        0.5 * rho * w.iter().map(|v| v * v).sum::<f64>() + softplus(-margin)
    };
    let mut sample = Sample::zeros(4);
    let mut worst = 0.0f64;
    for w in [[0.0; 4], [0.3, -0.2, 0.5, 0.9], [-1.1, 0.4, 0.0, 2.0]] {
        model.draw_sample(&mut rng, &mut sample);
        let mut grad = vec![0.0; 4];
        model.loss_gradient(&w, &sample, &mut grad);
        worst = worst.max(fd_gradient_error(&w, &grad, |wv| loss(wv, &sample)));
    }
    CheckResult::from_error(name, worst, 1e-6)
}

/// Max componentwise gap between `grad` and a central difference of `f`,
/// relative to the gradient scale.
fn fd_gradient_error(w: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let scale = grad.iter().map(|g| g.abs()).fold(1.0f64, f64::max);
    let mut worst = 0.0f64;
    let mut probe = w.to_vec();
    for d in 0..w.len() {
        let h = 1e-6 * w[d].abs().max(1.0);
        probe[d] = w[d] + h;
        let up = f(&probe);
        probe[d] = w[d] - h;
        let down = f(&probe);
        probe[d] = w[d];
        worst = worst.max(((up - down) / (2.0 * h) - grad[d]).abs() / scale);
    }
    worst
}
