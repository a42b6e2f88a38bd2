//! Covariance matrices, their eigenstructure, and the scenario generators
//! (equicorrelated, MCC, factor models, random-design Gram inverses).

use std::path::PathBuf;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{out_of_range, Error, Result};
use crate::linalg;

const SYM_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;

/// Symmetric positive semidefinite d×d matrix with a lazily cached
/// eigendecomposition and inverse.
#[derive(Debug)]
pub struct CovarianceMatrix {
    entries: DMatrix<f64>,
    eigen: OnceLock<EigenDecomposition>,
    precision: OnceLock<DMatrix<f64>>,
}

impl Clone for CovarianceMatrix {
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            eigen: self.eigen.clone(),
            precision: self.precision.clone(),
        }
    }
}

/// Eigenvalues sorted descending with orthonormal eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn leading_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn leading_eigenvector(&self) -> DVector<f64> {
        self.eigenvectors.column(0).into_owned()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        linalg::spectral_map(&self.eigenvalues, &self.eigenvectors, |x| x)
    }
}

impl CovarianceMatrix {
    /// Validates symmetry, finiteness and PSD-ness, then symmetrizes exactly.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let d = entries.nrows();
        if d == 0 || entries.ncols() != d {
            return Err(Error::Dimension(format!(
                "covariance must be square and non-empty, got {}x{}",
                d,
                entries.ncols()
            )));
        }
        if let Some(pos) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidCovariance(format!(
                "non-finite entry at ({}, {})",
                pos % d + 1,
                pos / d + 1
            )));
        }
        let scale = linalg::max_abs(&entries);
        let asym = linalg::max_abs_diff(&entries, &entries.transpose());
        if asym > SYM_TOL * scale {
            return Err(Error::InvalidCovariance(format!("not symmetric (max asymmetry {asym:e})")));
        }
        let entries = 0.5 * (&entries + entries.transpose());
        let cov = Self { entries, eigen: OnceLock::new(), precision: OnceLock::new() };
        let eig = cov.eigen()?;
        let top = eig.eigenvalues[0];
        let bottom = eig.eigenvalues[d - 1];
        if bottom < -PSD_TOL * top.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidCovariance(format!("not positive semidefinite (smallest eigenvalue {bottom:e})")));
        }
        Ok(cov)
    }

    /// Like [`CovarianceMatrix::new`] with a known inverse, e.g. Σ = (XᵀX)⁻¹.
    pub fn with_precision(entries: DMatrix<f64>, precision: DMatrix<f64>) -> Result<Self> {
        if precision.shape() != entries.shape() {
            return Err(Error::Dimension("precision shape differs from covariance".into()));
        }
        let cov = Self::new(entries)?;
        let _ = cov.precision.set(0.5 * (&precision + precision.transpose()));
        Ok(cov)
    }

    pub fn identity(d: usize) -> Self {
        Self::new(DMatrix::identity(d, d)).expect("identity is a valid covariance")
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.entries.diagonal()
    }

    pub fn eigen(&self) -> Result<&EigenDecomposition> {
        if let Some(e) = self.eigen.get() {
            return Ok(e);
        }
        let (eigenvalues, eigenvectors) = linalg::sym_eigen_desc(&self.entries)?;
        Ok(self.eigen.get_or_init(|| EigenDecomposition { eigenvalues, eigenvectors }))
    }

    /// Σ⁻¹; fails when Σ is singular.
    pub fn precision(&self) -> Result<&DMatrix<f64>> {
        if let Some(p) = self.precision.get() {
            return Ok(p);
        }
        let inv = linalg::spd_inverse(&self.entries)
            .map_err(|_| Error::InvalidCovariance("covariance is singular; an inverse is required".into()))?;
        Ok(self.precision.get_or_init(|| inv))
    }

    /// Rescales to unit diagonal, returning the correlation matrix and the
    /// standard deviations used.
    pub fn to_correlation(&self) -> Result<(CovarianceMatrix, DVector<f64>)> {
        let sd = self.diagonal().map(f64::sqrt);
        if sd.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidCovariance("zero variance on the diagonal".into()));
        }
        let d = self.dim();
        let corr = DMatrix::from_fn(d, d, |i, j| self.entries[(i, j)] / (sd[i] * sd[j]));
        Ok((CovarianceMatrix::new(corr)?, sd))
    }
}

/// Eigendecomposition with descending eigenvalues and sign-fixed vectors.
pub fn eigendecompose(sigma: &CovarianceMatrix) -> Result<EigenDecomposition> {
    sigma.eigen().cloned()
}

/// Unit-diagonal matrix with constant off-diagonal ρ.
pub fn make_equicorrelated(d: usize, rho: f64) -> Result<CovarianceMatrix> {
    if d == 0 {
        return Err(out_of_range("d must be at least 1"));
    }
    let lower = if d > 1 { -1.0 / (d as f64 - 1.0) } else { -1.0 };
    if !(rho > lower && rho < 1.0) {
        return Err(out_of_range(format!("rho = {rho} must lie in ({lower}, 1) for d = {d}")));
    }
    CovarianceMatrix::new(DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho }))
}

/// Correlation of comparisons to a shared control: ρ = m/(m₀+m).
pub fn mcc_rho(m: u64, m0: u64) -> Result<f64> {
    if m == 0 || m0 == 0 {
        return Err(out_of_range("m and m0 must be at least 1"));
    }
    Ok(m as f64 / (m0 as f64 + m as f64))
}

pub fn make_mcc(d: usize, m: u64, m0: u64) -> Result<CovarianceMatrix> {
    make_equicorrelated(d, mcc_rho(m, m0)?)
}

fn unit_sphere<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    loop {
        let v: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let norm = v.norm();
        if norm > 0.0 {
            return v / norm;
        }
    }
}

fn normalize_unit_diagonal(k: &DMatrix<f64>) -> DMatrix<f64> {
    let d = k.nrows();
    let s = k.diagonal().map(|v| 1.0 / v.sqrt());
    let m = DMatrix::from_fn(d, d, |i, j| k[(i, j)] * s[i] * s[j]);
    0.5 * (&m + m.transpose())
}

/// Factor model K = I + λ Σ u_ℓ u_ℓᵀ normalized to unit diagonal. With
/// `invert`, the factor structure is placed on K⁻¹ instead.
///
/// Returns the sampled factor directions alongside the matrix.
pub fn make_factor_with_loadings<R: Rng + ?Sized>(
    d: usize,
    k: usize,
    lambda: f64,
    invert: bool,
    rng: &mut R,
) -> Result<(CovarianceMatrix, Vec<DVector<f64>>)> {
    if d == 0 || k == 0 {
        return Err(out_of_range("d and k must be at least 1"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(out_of_range(format!("factor strength lambda = {lambda} must be non-negative")));
    }
    let us: Vec<DVector<f64>> = (0..k).map(|_| unit_sphere(rng, d)).collect();
    let mut f = DMatrix::identity(d, d);
    for u in &us {
        f += lambda * u * u.transpose();
    }
    if invert {
        f = linalg::spd_inverse(&f)?;
    }
    Ok((CovarianceMatrix::new(normalize_unit_diagonal(&f))?, us))
}

pub fn make_factor<R: Rng + ?Sized>(d: usize, k: usize, lambda: f64, invert: bool, rng: &mut R) -> Result<CovarianceMatrix> {
    make_factor_with_loadings(d, k, lambda, invert, rng).map(|(c, _)| c)
}

/// Draws X with i.i.d. N(0, K) rows, normalizes its columns, and returns
/// (X, Σ = (XᵀX)⁻¹). A rank-deficient draw is retried once.
pub fn make_design_gram<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    k: &CovarianceMatrix,
    rng: &mut R,
) -> Result<(DMatrix<f64>, CovarianceMatrix)> {
    if k.dim() != d {
        return Err(Error::Dimension(format!("K is {0}x{0} but d = {d}", k.dim())));
    }
    if n < 2 * d {
        return Err(out_of_range(format!("design rows n = {n} must be at least 2d = {}", 2 * d)));
    }
    let eig = k.eigen()?;
    let root = linalg::spectral_map(&eig.eigenvalues, &eig.eigenvectors, |x| x.max(0.0).sqrt());
    for _ in 0..2 {
        let z = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(rng));
        let mut x = z * &root;
        for mut col in x.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        let gram = x.transpose() * &x;
        let gram = 0.5 * (&gram + gram.transpose());
        let (vals, _) = linalg::sym_eigen_desc(&gram)?;
        if vals[d - 1] <= 1e-12 * vals[0] {
            continue;
        }
        let sigma = linalg::spd_inverse(&gram)?;
        return Ok((x, CovarianceMatrix::with_precision(sigma, gram)?));
    }
    Err(Error::RankDeficient("design draw was rank deficient twice".into()))
}

/// F_d(c): fraction of leading-eigenvector entries with |u₁ⱼ| ≤ c/√d.
pub fn leading_eigvec_cdf(decomp: &EigenDecomposition, c: f64) -> f64 {
    let d = decomp.dim();
    let cut = c / (d as f64).sqrt();
    // Absorbs rounding when |u₁ⱼ| equals the cut analytically.
    let slack = 1e-12 * cut.max(1.0 / (d as f64).sqrt());
    let count = decomp.eigenvectors.column(0).iter().filter(|v| v.abs() <= cut + slack).count();
    count as f64 / d as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Equicorrelated,
    Mcc,
    Factor,
    InverseFactor,
    DesignGram,
    Identity,
    UserFile,
}

/// Row covariance K for the design-gram family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DesignBase {
    #[default]
    Identity,
    Equicorrelated,
    InverseEquicorrelated,
    Factor,
    InverseFactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupportKind {
    #[serde(rename = "uniform-random")]
    UniformRandom,
}

/// Non-null placement: uniformly random each replicate, or fixed 1-based indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Support {
    Placement(SupportKind),
    Fixed(Vec<usize>),
}

impl Default for Support {
    fn default() -> Self {
        Support::Placement(SupportKind::UniformRandom)
    }
}

fn default_sigma2() -> f64 {
    1.0
}

/// A simulation scenario as read from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub family: Family,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m0: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<DesignBase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi1: Option<f64>,
    #[serde(default)]
    pub beta0: f64,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub support: Support,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

/// A realized scenario covariance, plus the design matrix for design-gram.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub sigma: CovarianceMatrix,
    pub design: Option<DMatrix<f64>>,
}

impl ScenarioSpec {
    pub fn new(family: Family, d: usize) -> Self {
        Self {
            family,
            d,
            rho: None,
            m: None,
            m0: None,
            k: None,
            lambda: None,
            n: None,
            base: None,
            d1: None,
            pi1: None,
            beta0: 0.0,
            sigma2: 1.0,
            seed: 0,
            support: Support::default(),
            path: None,
        }
    }

    fn need<T: Copy>(v: Option<T>, name: &str, family: Family) -> Result<T> {
        v.ok_or_else(|| out_of_range(format!("family {family:?} requires `{name}`")))
    }

    /// Correlation ρ for the equicorrelated and MCC families.
    pub fn equi_rho(&self) -> Result<Option<f64>> {
        match self.family {
            Family::Equicorrelated => Ok(Some(Self::need(self.rho, "rho", self.family)?)),
            Family::Mcc => match (self.m, self.m0) {
                (Some(m), Some(m0)) => mcc_rho(m, m0).map(Some),
                _ => Ok(Some(Self::need(self.rho, "rho (or m and m0)", self.family)?)),
            },
            _ => Ok(None),
        }
    }

    /// Number of non-nulls implied by `d1`, `pi1` or fixed support.
    pub fn num_nonnull(&self) -> Option<usize> {
        if let Support::Fixed(ix) = &self.support {
            return Some(ix.len());
        }
        self.d1.or_else(|| self.pi1.map(|p| ((p * self.d as f64).round() as usize).max(1)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(out_of_range("d must be at least 1"));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(out_of_range(format!("sigma2 = {} must be positive", self.sigma2)));
        }
        if !self.beta0.is_finite() {
            return Err(out_of_range("beta0 must be finite"));
        }
        if let Some(p) = self.pi1 {
            if !(p > 0.0 && p <= 1.0) {
                return Err(out_of_range(format!("pi1 = {p} must lie in (0, 1]")));
            }
        }
        if let Some(d1) = self.num_nonnull() {
            if d1 > self.d {
                return Err(out_of_range(format!("d1 = {d1} exceeds d = {}", self.d)));
            }
        }
        if let Support::Fixed(ix) = &self.support {
            let mut seen = vec![false; self.d];
            for &i in ix {
                if i == 0 || i > self.d {
                    return Err(out_of_range(format!("support index {i} outside 1..={}", self.d)));
                }
                if std::mem::replace(&mut seen[i - 1], true) {
                    return Err(out_of_range(format!("support index {i} repeated")));
                }
            }
        }
        if let Some(rho) = self.equi_rho()? {
            let lower = if self.d > 1 { -1.0 / (self.d as f64 - 1.0) } else { -1.0 };
            if !(rho > lower && rho < 1.0) {
                return Err(out_of_range(format!("rho = {rho} must lie in ({lower}, 1)")));
            }
        }
        if self.family == Family::DesignGram {
            let n = Self::need(self.n, "n", self.family)?;
            if n < 2 * self.d {
                return Err(out_of_range(format!("n = {n} must be at least 2d = {}", 2 * self.d)));
            }
        }
        Ok(())
    }

    fn base_covariance<R: Rng + ?Sized>(&self, base: DesignBase, rng: &mut R) -> Result<CovarianceMatrix> {
        let d = self.d;
        match base {
            DesignBase::Identity => Ok(CovarianceMatrix::identity(d)),
            DesignBase::Equicorrelated => make_equicorrelated(d, Self::need(self.rho, "rho", self.family)?),
            DesignBase::InverseEquicorrelated => {
                let e = make_equicorrelated(d, Self::need(self.rho, "rho", self.family)?)?;
                CovarianceMatrix::new(e.precision()?.clone())
            }
            DesignBase::Factor | DesignBase::InverseFactor => make_factor(
                d,
                Self::need(self.k, "k", self.family)?,
                Self::need(self.lambda, "lambda", self.family)?,
                base == DesignBase::InverseFactor,
                rng,
            ),
        }
    }

    /// Realizes the covariance (and design). Randomness is drawn in the
    /// order: factor directions, then design rows.
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Scenario> {
        self.validate()?;
        let d = self.d;
        let sigma = match self.family {
            Family::Identity => CovarianceMatrix::identity(d),
            Family::Equicorrelated | Family::Mcc => make_equicorrelated(d, self.equi_rho()?.unwrap_or(0.0))?,
            Family::Factor | Family::InverseFactor => make_factor(
                d,
                Self::need(self.k, "k", self.family)?,
                Self::need(self.lambda, "lambda", self.family)?,
                self.family == Family::InverseFactor,
                rng,
            )?,
            Family::UserFile => {
                let path = self.path.as_ref().ok_or_else(|| out_of_range("family user-file requires `path`"))?;
                let m = crate::io::read_matrix_csv(path)?;
                if m.nrows() != d {
                    return Err(Error::Dimension(format!("matrix in {} is {}x{}, expected d = {d}", path.display(), m.nrows(), m.ncols())));
                }
                CovarianceMatrix::new(m)?
            }
            Family::DesignGram => {
                let k = self.base_covariance(self.base.unwrap_or_default(), rng)?;
                let (x, sigma) = make_design_gram(self.n.unwrap_or(2 * d), d, &k, rng)?;
                return Ok(Scenario { sigma, design: Some(x) });
            }
        };
        Ok(Scenario { sigma, design: None })
    }
}
