//! The three-stage whitening filter: split, explore an ordering from
//! (ξ, |β̃|), then run Selective SeqStep on the sign agreements.

pub mod lasso;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{out_of_range, Error, Result};
use crate::linalg::{self, sign};
use crate::seqstep::{run_seqstep, BinaryPValueSeq, PTilde, SeqStepResult};
use crate::whitening::{
    log_odds, whiten_carved, whiten_known_sigma, CarvedNoise, LogOddsProfile, ValidatedDelta, WhitenedSplit,
    WhiteningMatrix,
};
use crate::covmodel::CovarianceMatrix;

pub use lasso::{lasso_entry_levels, lasso_entry_path, LassoConfig};

/// Testing order (position → hypothesis) and guessed signs ψ by hypothesis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderingDecision {
    pub order: Vec<usize>,
    pub psi: Vec<i8>,
}

impl OrderingDecision {
    pub fn validate(&self) -> Result<()> {
        let d = self.order.len();
        if self.psi.len() != d {
            return Err(Error::Dimension(format!("order has {d} entries, psi has {}", self.psi.len())));
        }
        let mut seen = vec![false; d];
        for &j in &self.order {
            if j >= d || std::mem::replace(&mut seen[j], true) {
                return Err(out_of_range("order is not a permutation"));
            }
        }
        if self.psi.iter().any(|p| *p != 1 && *p != -1) {
            return Err(out_of_range("psi entries must be +1 or -1"));
        }
        Ok(())
    }
}

/// W statistics of a signed-max strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct WStatistics {
    pub w: Vec<f64>,
    /// W*_j = W_j · sgn(β̃_j).
    pub w_star: Vec<f64>,
    pub w_plus: Option<Vec<f64>>,
    pub w_minus: Option<Vec<f64>>,
}

/// Pseudo-regression (X*, X̃*, y*) whose knockoff analysis matches the
/// whitening filter.
#[derive(Debug, Clone)]
pub struct PseudoDesign {
    pub x_star: DMatrix<f64>,
    pub x_knock_star: DMatrix<f64>,
    pub y_star: DVector<f64>,
}

impl PseudoDesign {
    /// [X*, X̃*] as one 2d × 2d design.
    pub fn augmented(&self) -> DMatrix<f64> {
        let (rows, d) = self.x_star.shape();
        let mut m = DMatrix::zeros(rows, 2 * d);
        m.columns_mut(0, d).copy_from(&self.x_star);
        m.columns_mut(d, d).copy_from(&self.x_knock_star);
        m
    }
}

/// Pseudo-regression from carved noise, X* = (Σ^{-1/2}; 0) and
/// y* = (Σ^{-1/2}β̂; ω*). Knockoffs for it come from
/// [`crate::standard_knockoffs::construct_knockoff_matrix`].
#[derive(Debug, Clone)]
pub struct NoisePseudoDesign {
    pub x_star: DMatrix<f64>,
    pub y_star: DVector<f64>,
}

/// Summary of Δ reported with every filter run.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DeltaSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub rank: usize,
}

impl DeltaSummary {
    pub fn of(vd: &ValidatedDelta) -> Self {
        let diag = vd.delta().diag();
        Self { min: diag.min(), max: diag.max(), mean: diag.mean(), rank: vd.rank() }
    }
}

/// Descending η with ties broken by ascending index; ψ = sgn(β) (or +1 on nulls).
pub fn oracle_ordering_from_eta(beta: &DVector<f64>, eta: &DVector<f64>) -> OrderingDecision {
    let mut order: Vec<usize> = (0..eta.len()).collect();
    order.sort_by(|&a, &b| eta[b].total_cmp(&eta[a]));
    let psi = beta.iter().map(|&b| if b < 0.0 { -1 } else { 1 }).collect();
    OrderingDecision { order, psi }
}

/// The knockoff* ordering, which uses the true β.
pub fn oracle_ordering(
    beta: &DVector<f64>,
    split: &WhitenedSplit,
    delta: &WhiteningMatrix,
    sigma2: f64,
) -> Result<OrderingDecision> {
    let profile = log_odds(beta, &split.beta_tilde, delta, sigma2)?;
    Ok(oracle_ordering_from_eta(beta, &profile.eta))
}

/// X* = (A^{1/2}; Δ^{-1/2}), X̃* = (A^{1/2}; −Δ^{-1/2}), y* = (A^{-1/2}ξ; Δ^{-1/2}β̃).
pub fn build_pseudo_design(split: &WhitenedSplit, vd: &ValidatedDelta) -> Result<PseudoDesign> {
    let d = vd.dim();
    if split.beta_tilde.len() != d || split.xi.len() != d {
        return Err(Error::Dimension(format!("split does not match dimension {d}")));
    }
    let roots = vd.a_roots()?;
    let (a_half, a_inv_half) = (&roots.0, &roots.1);
    let inv_sd = vd.delta().diag().map(|v| 1.0 / v.sqrt());
    let mut x_star = DMatrix::zeros(2 * d, d);
    let mut x_knock_star = DMatrix::zeros(2 * d, d);
    x_star.rows_mut(0, d).copy_from(a_half);
    x_knock_star.rows_mut(0, d).copy_from(a_half);
    for j in 0..d {
        x_star[(d + j, j)] = inv_sd[j];
        x_knock_star[(d + j, j)] = -inv_sd[j];
    }
    let mut y_star = DVector::zeros(2 * d);
    y_star.rows_mut(0, d).copy_from(&(a_inv_half * &split.xi));
    y_star.rows_mut(d, d).copy_from(&split.beta_tilde.component_mul(&inv_sd));
    Ok(PseudoDesign { x_star, x_knock_star, y_star })
}

/// Builds (X*, y*) from β̂ and full-rank carved noise ω* (r = d).
pub fn build_noise_pseudo_design(
    beta_hat: &DVector<f64>,
    sigma: &CovarianceMatrix,
    omega_star: &DVector<f64>,
) -> Result<NoisePseudoDesign> {
    let d = sigma.dim();
    if beta_hat.len() != d {
        return Err(Error::Dimension(format!("beta_hat has {} entries, sigma is {d}x{d}", beta_hat.len())));
    }
    if omega_star.len() != d {
        return Err(Error::RankDeficient(format!(
            "noise pseudo-design needs rank(delta - sigma) = d = {d}, got {}",
            omega_star.len()
        )));
    }
    let eig = sigma.eigen()?;
    if !(eig.eigenvalues[d - 1] > 0.0) {
        return Err(Error::InvalidCovariance("sigma must be positive definite".into()));
    }
    let inv_half = linalg::spectral_map(&eig.eigenvalues, &eig.eigenvectors, |x| 1.0 / x.sqrt());
    let mut x_star = DMatrix::zeros(2 * d, d);
    x_star.rows_mut(0, d).copy_from(&inv_half);
    let mut y_star = DVector::zeros(2 * d);
    y_star.rows_mut(0, d).copy_from(&(&inv_half * beta_hat));
    y_star.rows_mut(d, d).copy_from(omega_star);
    Ok(NoisePseudoDesign { x_star, y_star })
}

/// W_j = max(Z_j, Z̃_j)·sgn(Z_j − Z̃_j); order by descending |W| (ties by
/// index, zeros last); ψ_j = sgn(W_j)·sgn(β̃_j), +1 when either is zero.
pub fn signed_max_ordering(z: &[f64], z_tilde: &[f64], beta_tilde: &DVector<f64>) -> Result<(WStatistics, OrderingDecision)> {
    let d = z.len();
    if z_tilde.len() != d || beta_tilde.len() != d {
        return Err(Error::Dimension("Z, Z-tilde and beta_tilde lengths differ".into()));
    }
    let w: Vec<f64> = (0..d).map(|j| z[j].max(z_tilde[j]) * f64::from(sign(z[j] - z_tilde[j]))).collect();
    let w_star: Vec<f64> = (0..d).map(|j| w[j] * f64::from(sign(beta_tilde[j]))).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()));
    let psi = (0..d)
        .map(|j| match sign(w[j]) * sign(beta_tilde[j]) {
            -1 => -1,
            _ => 1,
        })
        .collect();
    Ok((
        WStatistics { w, w_star, w_plus: Some(z.to_vec()), w_minus: Some(z_tilde.to_vec()) },
        OrderingDecision { order, psi },
    ))
}

/// A W⁺-style statistic: entry levels (Z, Z̃) for the original and knockoff
/// columns of a pseudo-design.
pub trait EntryStatistic: Sync {
    fn entry_levels(&self, pd: &PseudoDesign) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl EntryStatistic for LassoConfig {
    fn entry_levels(&self, pd: &PseudoDesign) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = pd.x_star.ncols();
        let mut levels = lasso_entry_levels(&pd.augmented(), &pd.y_star, self)?;
        let tilde = levels.split_off(d);
        Ok((levels, tilde))
    }
}

/// λ-signed-max ordering from lasso entry levels on [X*, X̃*].
pub fn lasso_signed_max_ordering(
    pd: &PseudoDesign,
    beta_tilde: &DVector<f64>,
    cfg: &LassoConfig,
) -> Result<(WStatistics, OrderingDecision)> {
    let (z, zt) = cfg.entry_levels(pd)?;
    signed_max_ordering(&z, &zt, beta_tilde)
}

/// p̃_j = ½ iff sgn(β̃_j) = ψ_j, listed in testing order. β̃_j = 0 gives 1.
pub fn binary_pvalues(ordering: &OrderingDecision, beta_tilde: &DVector<f64>) -> BinaryPValueSeq {
    let entries = ordering
        .order
        .iter()
        .map(|&j| {
            let agree = beta_tilde[j] != 0.0 && sign(beta_tilde[j]) == ordering.psi[j];
            (j, if agree { PTilde::Half } else { PTilde::One })
        })
        .collect();
    BinaryPValueSeq { entries, truth: None }
}

/// How the whitening noise is generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    Known { sigma2: f64 },
    /// Carve from the residual variance σ̂² with n observations.
    Carve { sigma_hat2: f64, n: usize },
}

/// Exploration strategy for stage 2.
#[derive(Clone, Copy)]
pub enum Strategy<'a> {
    /// knockoff*: order by the true log-odds (needs the true β).
    Oracle { beta: &'a DVector<f64> },
    Lasso(LassoConfig),
    /// Any entry-level statistic on the pseudo-design.
    Custom(&'a dyn EntryStatistic),
}

#[derive(Debug, Clone)]
pub struct FilterResult {
    /// Rejected hypotheses, ascending.
    pub rejections: Vec<usize>,
    /// ψ_j for each rejection: the concluded sign of β_j.
    pub directions: Vec<i8>,
    pub seqstep: SeqStepResult,
    pub ordering: OrderingDecision,
    pub pvalues: BinaryPValueSeq,
    pub split: WhitenedSplit,
    pub eta: Option<LogOddsProfile>,
    pub w: Option<WStatistics>,
    pub carved: Option<CarvedNoise>,
    pub diagnostics: DeltaSummary,
}

/// Runs split → ordering → SeqStep. Deterministic given `rng`'s state.
pub fn run_whitening_filter<R: Rng + ?Sized>(
    beta_hat: &DVector<f64>,
    vd: &ValidatedDelta,
    noise: NoiseModel,
    strategy: Strategy<'_>,
    alpha: f64,
    rng: &mut R,
) -> Result<FilterResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(out_of_range(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    let (split, carved, scale) = match noise {
        NoiseModel::Known { sigma2 } => (whiten_known_sigma(beta_hat, vd, sigma2, rng)?, None, sigma2),
        NoiseModel::Carve { sigma_hat2, n } => {
            let (split, carved) = whiten_carved(beta_hat, vd, sigma_hat2, n, rng)?;
            (split, Some(carved), sigma_hat2)
        }
    };
    let (ordering, eta, w) = match strategy {
        Strategy::Oracle { beta } => {
            let profile = log_odds(beta, &split.beta_tilde, vd.delta(), scale)?;
            (oracle_ordering_from_eta(beta, &profile.eta), Some(profile), None)
        }
        Strategy::Lasso(cfg) => {
            let pd = build_pseudo_design(&split, vd)?;
            let (w, ord) = lasso_signed_max_ordering(&pd, &split.beta_tilde, &cfg)?;
            (ord, None, Some(w))
        }
        Strategy::Custom(stat) => {
            let pd = build_pseudo_design(&split, vd)?;
            let (z, zt) = stat.entry_levels(&pd)?;
            let (w, ord) = signed_max_ordering(&z, &zt, &split.beta_tilde)?;
            (ord, None, Some(w))
        }
    };
    let pvalues = binary_pvalues(&ordering, &split.beta_tilde);
    let seqstep = run_seqstep(&pvalues, alpha)?;
    let rejections = seqstep.rejections.clone();
    let directions = rejections.iter().map(|&j| ordering.psi[j]).collect();
    Ok(FilterResult {
        rejections,
        directions,
        seqstep,
        ordering,
        pvalues,
        split,
        eta,
        w,
        carved,
        diagnostics: DeltaSummary::of(vd),
    })
}
