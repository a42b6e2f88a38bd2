//! Universal power ceilings for fixed-X knockoffs: lower bounds b_k(Σ) on
//! the order statistics of diag(Δ), the explicit constants, and the
//! resulting rejection bounds.

use rayon::prelude::*;
use serde::Serialize;

use crate::covmodel::EigenDecomposition;
use crate::error::{out_of_range, Error, Result};
use crate::special::{normal_cdf, normal_sf};
use crate::whitening::WhiteningMatrix;

/// Default number of leading eigenvectors scanned for b_k on large d.
pub const DEFAULT_TOP_L: usize = 50;

/// b_1 ≤ … ≤ b_d: lower bounds on the k-th smallest Δ_jj of any valid Δ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaLowerBounds {
    pub b: Vec<f64>,
}

impl DeltaLowerBounds {
    pub fn new(b: Vec<f64>) -> Result<Self> {
        if b.is_empty() {
            return Err(out_of_range("b must be non-empty"));
        }
        if b.iter().any(|v| !(*v >= 0.0)) {
            return Err(out_of_range("b entries must be non-negative"));
        }
        if b.windows(2).any(|w| w[1] < w[0]) {
            return Err(out_of_range("b must be non-decreasing"));
        }
        Ok(Self { b })
    }

    /// b_k = λ₁k/d for a unit-diagonal equicorrelated Σ, from its flat
    /// leading eigenvector; needs no d×d matrix.
    pub fn equicorrelated(d: usize, rho: f64) -> Result<Self> {
        if d == 0 || !(rho >= 0.0 && rho < 1.0) {
            return Err(out_of_range("equicorrelated bounds need d >= 1 and rho in [0, 1)"));
        }
        let lambda1 = 1.0 + rho * (d as f64 - 1.0);
        // Only the leading eigenvector is used; each eigenvector alone gives
        // a valid lower bound, so this never overstates b_k.
        Ok(Self { b: (1..=d).map(|k| lambda1 * k as f64 / d as f64).collect() })
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    /// b_k with 1-based k.
    pub fn get(&self, k: usize) -> f64 {
        self.b[k - 1]
    }
}

/// b_k(Σ) = max over ℓ of λ_ℓ times the sum of the k smallest u²_{ℓ,j}.
/// `top_l` restricts ℓ to the leading eigenvectors; `None` uses all d.
pub fn delta_order_lower_bounds(decomp: &EigenDecomposition, top_l: Option<usize>) -> DeltaLowerBounds {
    let d = decomp.dim();
    let l = top_l.unwrap_or(d).clamp(1, d);
    let b = (0..l)
        .into_par_iter()
        .map(|ell| {
            let lambda = decomp.eigenvalues[ell].max(0.0);
            let mut sq: Vec<f64> = decomp.eigenvectors.column(ell).iter().map(|v| v * v).collect();
            sq.sort_by(f64::total_cmp);
            let mut acc = 0.0;
            sq.iter()
                .map(|v| {
                    acc += v;
                    lambda * acc
                })
                .collect::<Vec<f64>>()
        })
        .reduce(
            || vec![0.0; d],
            |a, b| a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect(),
        );
    DeltaLowerBounds { b }
}

/// δ = √α − α, the choice behind the starred constants.
pub fn default_delta(alpha: f64) -> f64 {
    alpha.sqrt() - alpha
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundConstants {
    pub alpha: f64,
    pub delta: f64,
    pub p: f64,
    pub q_delta: f64,
    pub lambda_star: f64,
    pub c_h: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Slope and intercept when the condition uses β_(k).
    pub c1_star_k: f64,
    pub c2_star_k: f64,
    /// Slope and intercept when the condition uses β_(1).
    pub c1_star_1: f64,
    pub c2_star_1: f64,
}

impl BoundConstants {
    pub fn starred(&self, ell: Ell) -> (f64, f64) {
        match ell {
            Ell::K => (self.c1_star_k, self.c2_star_k),
            Ell::One => (self.c1_star_1, self.c2_star_1),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(out_of_range(format!("alpha = {alpha} must lie in (0, 1)")))
    }
}

/// C₁, C₂ from (α, δ), together with C₃(α) and the starred combinations.
pub fn bound_constants(alpha: f64, delta: f64) -> Result<BoundConstants> {
    check_alpha(alpha)?;
    if !(delta > 0.0 && delta < 1.0 - alpha) {
        return Err(out_of_range(format!("delta = {delta} must lie in (0, 1 - alpha)")));
    }
    let p = alpha / (1.0 + alpha);
    let q = (alpha + delta) / (1.0 + alpha + delta);
    let lambda_star = p + (q - p) / 4.0;
    let c_h = -(lambda_star * (q / lambda_star).ln() + (1.0 - lambda_star) * ((1.0 - q) / (1.0 - lambda_star)).ln());
    let c1 = ((4.0 * alpha * (1.0 + alpha + delta) / delta).max(1.0) + 1.0) / (1.0 + alpha);
    let lead = std::f64::consts::E / (4.0 * std::f64::consts::PI.sqrt());
    let c2 = (lead * (1.0 + alpha).sqrt() * q / (p * (1.0 - p)).sqrt()
        * c_h.powf(-1.5)
        * (2.0 * (q - p) / (p * (1.0 - q))).min(1.0)
        + 2.0)
        / (1.0 + alpha);
    let c3 = c3_constant(alpha)?;
    Ok(BoundConstants {
        alpha,
        delta,
        p,
        q_delta: q,
        lambda_star,
        c_h,
        c1,
        c2,
        c3,
        c1_star_k: (2.0 + c3) * c1,
        c2_star_k: c2,
        c1_star_1: (1.0 + c3) * c1,
        c2_star_1: c1 + c2,
    })
}

/// C₃(α) = ∫₀^∞ [Φ(−(2+t)√c/√(2+2t)) + 1 − Φ(t√c/√(2+2t))] dt, c = −½ log α.
pub fn c3_constant(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let rc = (-0.5 * alpha.ln()).sqrt();
    let f = move |t: f64| {
        let s = (2.0 + 2.0 * t).sqrt();
        normal_cdf(-(2.0 + t) * rc / s) + normal_sf(t * rc / s)
    };
    let mut upper = 8.0;
    while f(upper) >= 1e-12 {
        upper *= 2.0;
        if upper > 1e9 {
            return Err(Error::Numerical("C3 integrand does not decay".into()));
        }
    }
    let pieces = 64;
    let width = upper / pieces as f64;
    let mut total = 0.0;
    for i in 0..pieces {
        let (a, b) = (i as f64 * width, (i + 1) as f64 * width);
        let out = quadrature::integrate(f, a, b, 1e-10);
        if !(out.integral.is_finite() && out.error_estimate <= 1e-6) {
            return Err(Error::Numerical("C3 quadrature failed to converge".into()));
        }
        total += out.integral;
    }
    Ok(total)
}

/// Which order statistic enters the finite-sample condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ell {
    /// β_(k) at step k.
    K,
    /// β_(1) throughout; tighter slope.
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Theorem {
    /// Δ may be chosen knowing which coordinates are non-null.
    Main,
    /// Non-null positions are a uniformly random permutation.
    Random,
}

/// Ceiling C₁*k + C₂* on the expected number of rejections.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    /// Smallest k meeting the condition; d + 1 when none does.
    pub k: usize,
    /// +∞ when no k qualifies.
    pub ceiling: f64,
    pub theorem: Theorem,
    pub ell: Ell,
    pub alpha: f64,
    pub sigma2: f64,
    pub pi1: Option<f64>,
    pub c1_star: f64,
    pub c2_star: f64,
}

fn scan_bound(
    beta_sq_desc: &[f64],
    sigma2: f64,
    b: &DeltaLowerBounds,
    alpha: f64,
    ell: Ell,
    index: impl Fn(usize) -> usize,
) -> Result<usize> {
    check_alpha(alpha)?;
    if !(sigma2 > 0.0) {
        return Err(out_of_range("sigma2 must be positive"));
    }
    let d = b.len();
    if beta_sq_desc.len() > d {
        return Err(Error::Dimension(format!("{} squared coefficients for d = {d}", beta_sq_desc.len())));
    }
    if beta_sq_desc.iter().any(|v| !(*v >= 0.0)) || beta_sq_desc.windows(2).any(|w| w[1] > w[0]) {
        return Err(out_of_range("squared coefficients must be non-negative and sorted descending"));
    }
    let limit = -0.5 * alpha.ln();
    let beta_at = |k: usize| beta_sq_desc.get(k - 1).copied().unwrap_or(0.0);
    for k in 1..=d {
        let num = match ell {
            Ell::K => beta_at(k),
            Ell::One => beta_at(1),
        };
        let bk = b.get(index(k));
        let ok = num == 0.0 || (bk > 0.0 && 2.0 * num / (sigma2 * bk) < limit);
        if ok {
            return Ok(k);
        }
    }
    Ok(d + 1)
}

fn report(k: usize, d: usize, theorem: Theorem, ell: Ell, alpha: f64, sigma2: f64, pi1: Option<f64>) -> Result<BoundReport> {
    let consts = bound_constants(alpha, default_delta(alpha))?;
    let (c1_star, c2_star) = consts.starred(ell);
    let ceiling = if k > d { f64::INFINITY } else { c1_star * k as f64 + c2_star };
    Ok(BoundReport { k, ceiling, theorem, ell, alpha, sigma2, pi1, c1_star, c2_star })
}

/// Bound for any knockoff procedure when Δ may depend on the support.
///
/// `beta_sq_desc` holds β²_(1) ≥ β²_(2) ≥ …; missing trailing entries are zero.
pub fn theorem_main_bound(beta_sq_desc: &[f64], sigma2: f64, b: &DeltaLowerBounds, alpha: f64, ell: Ell) -> Result<BoundReport> {
    let k = scan_bound(beta_sq_desc, sigma2, b, alpha, ell, |k| k)?;
    report(k, b.len(), Theorem::Main, ell, alpha, sigma2, None)
}

/// Bound when the non-null positions are random, using b_{⌊k/π₁⌋} capped at d.
pub fn theorem_random_bound(
    beta_sq_desc: &[f64],
    sigma2: f64,
    b: &DeltaLowerBounds,
    alpha: f64,
    pi1: f64,
    ell: Ell,
) -> Result<BoundReport> {
    if !(pi1 > 0.0 && pi1 <= 1.0) {
        return Err(out_of_range(format!("pi1 = {pi1} must lie in (0, 1]")));
    }
    let d = b.len();
    // The relative nudge keeps k/π₁ from landing just below an exact integer.
    let stretch = |k: usize| (((k as f64 / pi1) * (1.0 + 1e-12)).floor() as usize).clamp(1, d);
    let k = scan_bound(beta_sq_desc, sigma2, b, alpha, ell, stretch)?;
    report(k, d, Theorem::Random, ell, alpha, sigma2, Some(pi1))
}

/// 13 log d / ρ + 42, the rounded MCC ceiling at α = 0.05.
pub fn mcc_closed_form(d: usize, rho: f64) -> Result<f64> {
    if d < 2 || !(rho > 0.0 && rho < 1.0) {
        return Err(out_of_range("mcc closed form needs d >= 2 and rho in (0, 1)"));
    }
    Ok(13.0 * (d as f64).ln() / rho + 42.0)
}

/// √(−Δ_jj log α / 2): below this |β_j/σ| the log-odds cannot pass −log α.
pub fn snr_threshold(delta_jj: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(delta_jj > 0.0) {
        return Err(out_of_range("delta_jj must be positive"));
    }
    Ok((-delta_jj * alpha.ln() / 2.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdCount {
    pub threshold: f64,
    pub below: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaDiagnostic {
    pub alpha: f64,
    pub counts: Vec<ThresholdCount>,
    pub snr_thresholds: Vec<f64>,
}

/// Counts of Δ_jj strictly below each threshold, plus per-variable SNR thresholds.
pub fn delta_diagnostic(delta: &WhiteningMatrix, alpha: f64, thresholds: &[f64]) -> Result<DeltaDiagnostic> {
    check_alpha(alpha)?;
    let diag = delta.diag();
    let counts = thresholds
        .iter()
        .map(|&t| ThresholdCount { threshold: t, below: diag.iter().filter(|v| **v < t).count() })
        .collect();
    let snr_thresholds = diag.iter().map(|&v| snr_threshold(v, alpha)).collect::<Result<Vec<f64>>>()?;
    Ok(DeltaDiagnostic { alpha, counts, snr_thresholds })
}
