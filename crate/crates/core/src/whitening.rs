//! Stage 1 of the filter: split β̂ into the whitened estimator β̃ = β̂ + ω
//! and the complement ξ = Σ⁻¹β̂ − Δ⁻¹β̃.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::covmodel::CovarianceMatrix;
use crate::error::{out_of_range, Error, Result};
use crate::linalg;
use crate::rng::normal_vec;

/// Relative eigenvalue cutoff used to decide rank(Δ − Σ).
pub const DEFAULT_RANK_TOL: f64 = 1e-10;
const DOMINANCE_TOL: f64 = 1e-8;

/// Diagonal whitening matrix Δ, stored as its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningMatrix {
    diag: DVector<f64>,
}

impl WhiteningMatrix {
    pub fn new(diag: DVector<f64>) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::Dimension("whitening matrix is empty".into()));
        }
        if let Some(j) = diag.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(out_of_range(format!("delta entry {} = {} must be positive and finite", j + 1, diag[j])));
        }
        Ok(Self { diag })
    }

    pub fn scalar(d: usize, value: f64) -> Result<Self> {
        Self::new(DVector::from_element(d, value))
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    /// Multiplies every entry by `factor` (≥ 1 keeps dominance).
    pub fn inflate(&self, factor: f64) -> Result<Self> {
        Self::new(&self.diag * factor)
    }
}

/// Δ checked against Σ, with the factor M (MMᵀ = Δ − Σ) and A = Σ⁻¹ − Δ⁻¹ cached.
#[derive(Debug, Clone)]
pub struct ValidatedDelta {
    sigma: CovarianceMatrix,
    delta: WhiteningMatrix,
    rank: usize,
    min_eig: f64,
    factor: DMatrix<f64>,
    a_matrix: OnceLock<Arc<DMatrix<f64>>>,
    a_roots: OnceLock<Arc<(DMatrix<f64>, DMatrix<f64>)>>,
}

impl ValidatedDelta {
    pub fn sigma(&self) -> &CovarianceMatrix {
        &self.sigma
    }

    pub fn delta(&self) -> &WhiteningMatrix {
        &self.delta
    }

    pub fn dim(&self) -> usize {
        self.delta.dim()
    }

    /// rank(Δ − Σ).
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Smallest eigenvalue of Δ − Σ.
    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eig
    }

    /// d×r factor M with MMᵀ = Δ − Σ: the symmetric square root restricted
    /// to the range of Δ − Σ.
    pub fn noise_factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// A = Σ⁻¹ − Δ⁻¹. Requires Σ to be invertible.
    pub fn a_matrix(&self) -> Result<Arc<DMatrix<f64>>> {
        if let Some(a) = self.a_matrix.get() {
            return Ok(a.clone());
        }
        let mut a = self.sigma.precision()?.clone();
        for j in 0..self.dim() {
            a[(j, j)] -= 1.0 / self.delta.diag[j];
        }
        Ok(self.a_matrix.get_or_init(|| Arc::new(a)).clone())
    }

    /// (A^{1/2}, A^{-1/2}) by symmetric eigen square root. A singular A
    /// (λ_min ≤ 1e-10·λ_max) is an error rather than a pseudo-inverse.
    pub fn a_roots(&self) -> Result<Arc<(DMatrix<f64>, DMatrix<f64>)>> {
        if let Some(r) = self.a_roots.get() {
            return Ok(r.clone());
        }
        let a = self.a_matrix()?;
        let (vals, vecs) = linalg::sym_eigen_desc(&a)?;
        let (top, bottom) = (vals[0], vals[vals.len() - 1]);
        if !(top > 0.0) || bottom <= 1e-10 * top {
            return Err(Error::SingularA { ratio: if top > 0.0 { bottom / top } else { 0.0 } });
        }
        let half = linalg::spectral_map(&vals, &vecs, f64::sqrt);
        let inv_half = linalg::spectral_map(&vals, &vecs, |x| 1.0 / x.sqrt());
        Ok(self.a_roots.get_or_init(|| Arc::new((half, inv_half))).clone())
    }
}

/// Checks Δ ⪰ Σ and computes rank(Δ − Σ) with the default tolerance.
pub fn validate_delta(sigma: &CovarianceMatrix, delta: &WhiteningMatrix) -> Result<ValidatedDelta> {
    validate_delta_with_tol(sigma, delta, DEFAULT_RANK_TOL)
}

/// As [`validate_delta`]; eigenvalues of Δ − Σ at or below
/// `rank_tol · max(λ₁(Σ), λ₁(Δ − Σ))` are treated as zero.
pub fn validate_delta_with_tol(sigma: &CovarianceMatrix, delta: &WhiteningMatrix, rank_tol: f64) -> Result<ValidatedDelta> {
    let d = sigma.dim();
    if delta.dim() != d {
        return Err(Error::Dimension(format!("delta has {} entries, sigma is {d}x{d}", delta.dim())));
    }
    if !(rank_tol >= 0.0) {
        return Err(out_of_range("rank tolerance must be non-negative"));
    }
    let lambda1 = sigma.eigen()?.leading_eigenvalue();
    let mut gap = -sigma.matrix().clone();
    for j in 0..d {
        gap[(j, j)] += delta.diag[j];
    }
    let (vals, vecs) = linalg::sym_eigen_desc(&gap)?;
    let min_eig = vals[d - 1];
    if min_eig < -DOMINANCE_TOL * lambda1.max(f64::MIN_POSITIVE) {
        return Err(Error::NotDominating { min_eig });
    }
    let cut = rank_tol * lambda1.max(vals[0]);
    let rank = vals.iter().take_while(|v| **v > cut).count();
    let mut factor = DMatrix::zeros(d, rank);
    for c in 0..rank {
        factor.set_column(c, &(vecs.column(c) * vals[c].sqrt()));
    }
    Ok(ValidatedDelta {
        sigma: sigma.clone(),
        delta: delta.clone(),
        rank,
        min_eig,
        factor,
        a_matrix: OnceLock::new(),
        a_roots: OnceLock::new(),
    })
}

/// Δ = λ_max(C)·diag(Σ) where C is the correlation form of Σ; for unit
/// diagonal Σ this is the smallest multiple of I dominating Σ.
pub fn make_equi_delta(sigma: &CovarianceMatrix) -> Result<WhiteningMatrix> {
    let (corr, sd) = sigma.to_correlation()?;
    let lambda = corr.eigen()?.leading_eigenvalue();
    WhiteningMatrix::new(sd.map(|s| lambda * s * s))
}

/// The whitened split (β̃, ξ, ω) with A = Σ⁻¹ − Δ⁻¹.
#[derive(Debug, Clone)]
pub struct WhitenedSplit {
    pub beta_tilde: DVector<f64>,
    pub xi: DVector<f64>,
    pub omega: DVector<f64>,
    pub a_matrix: Arc<DMatrix<f64>>,
}

impl WhitenedSplit {
    /// Builds the split from β̂ and an already drawn ω.
    pub fn from_noise(beta_hat: &DVector<f64>, omega: DVector<f64>, vd: &ValidatedDelta) -> Result<Self> {
        let d = vd.dim();
        if beta_hat.len() != d || omega.len() != d {
            return Err(Error::Dimension(format!("beta_hat/omega length must be {d}")));
        }
        let beta_tilde = beta_hat + &omega;
        let xi = vd.sigma.precision()? * beta_hat - beta_tilde.component_div(vd.delta.diag());
        Ok(Self { beta_tilde, xi, omega, a_matrix: vd.a_matrix()? })
    }

    /// Σ(ξ + Δ⁻¹β̃), which equals β̂ exactly in exact arithmetic.
    pub fn reconstruct(&self, vd: &ValidatedDelta) -> DVector<f64> {
        vd.sigma.matrix() * (&self.xi + self.beta_tilde.component_div(vd.delta.diag()))
    }
}

/// ω ~ N(0, σ²(Δ − Σ)), β̃ = β̂ + ω, ξ = Σ⁻¹β̂ − Δ⁻¹β̃.
pub fn whiten_known_sigma<R: Rng + ?Sized>(
    beta_hat: &DVector<f64>,
    vd: &ValidatedDelta,
    sigma2: f64,
    rng: &mut R,
) -> Result<WhitenedSplit> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(out_of_range(format!("sigma2 = {sigma2} must be positive")));
    }
    let z = normal_vec(rng, vd.rank);
    let omega = &vd.factor * z * sigma2.sqrt();
    WhitenedSplit::from_noise(beta_hat, omega, vd)
}

/// Noise generated from the residual variance instead of a known σ².
#[derive(Debug, Clone)]
pub struct CarvedNoise {
    pub omega: DVector<f64>,
    /// ω* ~ N(0, σ² I_r), with ω = Mω*.
    pub omega_star: DVector<f64>,
    /// Leftover variance estimate; absent when n = d + r.
    pub sigma_tilde_sq: Option<f64>,
    pub rank_r: usize,
    pub v: f64,
}

/// Carves ω out of σ̂² with n − d residual degrees of freedom.
///
/// Draw order: ω′ ~ N(0, I_r) first, then v ~ Beta(r/2, (n−d−r)/2).
pub fn carve_noise<R: Rng + ?Sized>(
    sigma_hat2: f64,
    n: usize,
    d: usize,
    vd: &ValidatedDelta,
    rng: &mut R,
) -> Result<CarvedNoise> {
    if d != vd.dim() {
        return Err(Error::Dimension(format!("d = {d} but delta has {} entries", vd.dim())));
    }
    if !(sigma_hat2 > 0.0 && sigma_hat2.is_finite()) {
        return Err(out_of_range(format!("sigma_hat2 = {sigma_hat2} must be positive")));
    }
    let r = vd.rank;
    if n < d + r || n <= d {
        return Err(Error::InsufficientDof { n, needed: (d + r).max(d + 1) });
    }
    if r == 0 {
        return Ok(CarvedNoise {
            omega: DVector::zeros(d),
            omega_star: DVector::zeros(0),
            sigma_tilde_sq: Some(sigma_hat2),
            rank_r: 0,
            v: 0.0,
        });
    }
    let dof = (n - d) as f64;
    let omega_prime = loop {
        let w = normal_vec(rng, r);
        if w.norm_squared() > 0.0 {
            break w;
        }
    };
    let v = if n == d + r {
        1.0
    } else {
        Beta::new(r as f64 / 2.0, (n - d - r) as f64 / 2.0)
            .map_err(|e| Error::Numerical(format!("beta distribution: {e}")))?
            .sample(rng)
    };
    let scale = (dof * v * sigma_hat2 / omega_prime.norm_squared()).sqrt();
    let omega_star = omega_prime * scale;
    let omega = &vd.factor * &omega_star;
    let sigma_tilde_sq = (n > d + r).then(|| dof * (1.0 - v) * sigma_hat2 / (n - d - r) as f64);
    Ok(CarvedNoise { omega, omega_star, sigma_tilde_sq, rank_r: r, v })
}

/// Whitening with carved noise; returns the split and the carving record.
pub fn whiten_carved<R: Rng + ?Sized>(
    beta_hat: &DVector<f64>,
    vd: &ValidatedDelta,
    sigma_hat2: f64,
    n: usize,
    rng: &mut R,
) -> Result<(WhitenedSplit, CarvedNoise)> {
    let carved = carve_noise(sigma_hat2, n, vd.dim(), vd, rng)?;
    let split = WhitenedSplit::from_noise(beta_hat, carved.omega.clone(), vd)?;
    Ok((split, carved))
}

/// Conditional log-odds η and their location parameters μ.
#[derive(Debug, Clone, PartialEq)]
pub struct LogOddsProfile {
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
}

/// η_j = 2|β̃_j||β_j|/(σ²Δ_jj), μ_j = 2β_j²/(σ²Δ_jj).
pub fn log_odds(beta: &DVector<f64>, beta_tilde: &DVector<f64>, delta: &WhiteningMatrix, sigma2: f64) -> Result<LogOddsProfile> {
    let d = delta.dim();
    if beta.len() != d || beta_tilde.len() != d {
        return Err(Error::Dimension(format!("beta and beta_tilde must have length {d}")));
    }
    if !(sigma2 > 0.0) {
        return Err(out_of_range("sigma2 must be positive"));
    }
    let eta = DVector::from_fn(d, |j, _| 2.0 * beta_tilde[j].abs() * beta[j].abs() / (sigma2 * delta.diag[j]));
    let mu = DVector::from_fn(d, |j, _| 2.0 * beta[j] * beta[j] / (sigma2 * delta.diag[j]));
    Ok(LogOddsProfile { eta, mu })
}
