//! Monte Carlo engines: T3-knockoff*, the bounding η-walk, knockoff*
//! rejection histograms, scenario power studies and BH/Bonferroni baselines.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::bounds::{delta_order_lower_bounds, DeltaLowerBounds};
use crate::covmodel::{Scenario, ScenarioSpec, Support};
use crate::error::{out_of_range, Error, Result};
use crate::filter::{
    binary_pvalues, build_pseudo_design, lasso_signed_max_ordering, oracle_ordering_from_eta, LassoConfig,
    OrderingDecision,
};
use crate::linalg;
use crate::rng::{normal_vec, stream, substream};
use crate::seqstep::{run_seqstep, PTilde};
use crate::special::{logistic, normal_sf};
use crate::whitening::{
    log_odds, make_equi_delta, validate_delta, whiten_carved, whiten_known_sigma, ValidatedDelta, WhitenedSplit,
};

/// Factor applied to the equi Δ for lasso runs so that A = Σ⁻¹ − Δ⁻¹ is
/// invertible, as the pseudo-design requires A^{-1/2}.
pub const LASSO_DELTA_INFLATION: f64 = 1.0 + 1e-3;

/// Mean with its Monte Carlo standard error (sample sd / √M).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub mcse: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let m = xs.len() as f64;
        if xs.is_empty() {
            return Self { mean: f64::NAN, mcse: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / m;
        if xs.len() < 2 {
            return Self { mean, mcse: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
        Self { mean, mcse: (var / m).sqrt() }
    }
}

/// Walk with k − 1 forced non-losses followed by i.i.d. steps that lose
/// (p̃ = 1) with probability q.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomWalkSpec {
    pub p: f64,
    pub q: f64,
    pub horizon: usize,
    pub head_zeros: usize,
}

impl RandomWalkSpec {
    /// Walk used for the η bound at level α with slack δ.
    pub fn for_eta_bound(k: usize, d: usize, alpha: f64, delta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(out_of_range(format!("alpha = {alpha} must lie in (0, 1)")));
        }
        if !(delta > 0.0 && alpha + delta < 1.0) {
            return Err(out_of_range(format!("delta = {delta} must lie in (0, 1 - alpha)")));
        }
        if k == 0 || k > d {
            return Err(out_of_range(format!("k = {k} must lie in 1..={d}")));
        }
        Ok(Self {
            p: alpha / (1.0 + alpha),
            q: (alpha + delta) / (1.0 + alpha + delta),
            horizon: d,
            head_zeros: k - 1,
        })
    }

    /// θ* > 0 with (1 − q)e^{θα} + q e^{−θ} = 1, if the walk drifts down.
    fn lundberg(&self, alpha: f64) -> Option<f64> {
        let q = self.q;
        if alpha * (1.0 - q) - q >= 0.0 {
            return None;
        }
        let f = |t: f64| (1.0 - q) * (t * alpha).exp() + q * (-t).exp() - 1.0;
        let mut hi = 1.0;
        while f(hi) <= 0.0 {
            hi *= 2.0;
        }
        // f is convex with f(0) = 0 and f'(0) < 0, so it is negative on (0, θ*).
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

fn walk_rejections<R: Rng + ?Sized>(spec: &RandomWalkSpec, alpha: f64, stop_deficit: f64, rng: &mut R) -> usize {
    let (mut halves, mut ones) = (0usize, 0usize);
    let mut best = 0usize;
    for i in 0..spec.horizon {
        let half = i < spec.head_zeros || rng.random::<f64>() >= spec.q;
        if half {
            halves += 1;
        } else {
            ones += 1;
        }
        if halves > 0 && (1 + ones) as f64 / halves as f64 <= alpha {
            best = halves;
        } else if i >= spec.head_zeros {
            let slack = alpha * halves as f64 - ones as f64 - 1.0;
            let remaining = (spec.horizon - i - 1) as f64;
            // The tolerance keeps walks that can end exactly at FDP-hat = α.
            if slack + alpha * remaining < -1e-9 || -slack > stop_deficit {
                break;
            }
        }
    }
    best
}

/// Probability below which a walk is treated as never returning.
const RETURN_EPS: f64 = 1e-12;

/// Mean knockoff* rejection count of the bounding walk: the first k − 1
/// p̃ are ½, the rest are 1 with probability q_δ = (α+δ)/(1+α+δ).
///
/// A replicate stops early once returning to FDP-hat ≤ α has probability
/// below 1e-12 by the Lundberg bound, or is impossible.
pub fn simulate_eta_walk_bound(k: usize, d: usize, alpha: f64, delta: f64, m: usize, seed: u64) -> Result<Estimate> {
    let spec = RandomWalkSpec::for_eta_bound(k, d, alpha, delta)?;
    if m == 0 {
        return Err(out_of_range("replicates must be at least 1"));
    }
    let stop = spec.lundberg(alpha).map_or(f64::INFINITY, |theta| -RETURN_EPS.ln() / theta);
    let counts: Vec<f64> = (0..m as u64)
        .into_par_iter()
        .map(|rep| walk_rejections(&spec, alpha, stop, &mut substream(seed, rep, stream::WALK)) as f64)
        .collect();
    Ok(Estimate::from_samples(&counts))
}

/// One knockoff* draw: η_j ~ |N(μ_j, 2μ_j)|, p̃_j = ½ with probability
/// logistic(η_j), ordering by descending η (ties by index), then SeqStep.
/// Returns (rejections, true rejections) where `nonnull[j]` marks non-nulls.
fn knockoff_star_draw<R: Rng + ?Sized>(mu: &[f64], nonnull: &[bool], alpha: f64, rng: &mut R) -> (usize, usize) {
    let d = mu.len();
    let mut eta = Vec::with_capacity(d);
    let mut half = Vec::with_capacity(d);
    for &m in mu {
        let e = if m.is_infinite() {
            f64::INFINITY
        } else if m > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            (m + (2.0 * m).sqrt() * z).abs()
        } else {
            0.0
        };
        let u: f64 = rng.random();
        half.push(u < logistic(e));
        eta.push(e);
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eta[b].total_cmp(&eta[a]));
    let (mut halves, mut ones, mut tp) = (0usize, 0usize, 0usize);
    let (mut best_r, mut best_tp) = (0usize, 0usize);
    for &j in &order {
        if half[j] {
            halves += 1;
            tp += usize::from(nonnull[j]);
        } else {
            ones += 1;
        }
        if halves > 0 && (1 + ones) as f64 / halves as f64 <= alpha {
            best_r = halves;
            best_tp = tp;
        }
    }
    (best_r, best_tp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct T3Estimate {
    pub tpr: Estimate,
    pub rejections: Estimate,
    pub replicates: usize,
}

/// T3 estimate together with the distribution of its rejection counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct T3Run {
    pub estimate: T3Estimate,
    pub histogram: Vec<HistogramBin>,
}

/// Pads, sorts and validates squared coefficients to length d.
fn squared_coefficients(beta_sq_desc: &[f64], d: usize) -> Result<Vec<f64>> {
    if beta_sq_desc.len() > d {
        return Err(Error::Dimension(format!("{} coefficients for d = {d}", beta_sq_desc.len())));
    }
    if beta_sq_desc.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(out_of_range("squared coefficients must be finite and non-negative"));
    }
    let mut v = beta_sq_desc.to_vec();
    v.resize(d, 0.0);
    Ok(v)
}

/// Monte Carlo estimate of the best TPR any knockoff method can reach when
/// Δ is fixed before a random permutation of the coefficients is revealed.
///
/// μ_j = 2β_j²/(σ² b_j); b_j = 0 with β_j ≠ 0 gives μ_j = ∞ (p̃ = ½ surely).
pub fn t3_knockoff_star(
    b: &DeltaLowerBounds,
    beta_sq_desc: &[f64],
    sigma2: f64,
    d1: usize,
    alpha: f64,
    m: usize,
    seed: u64,
) -> Result<T3Estimate> {
    t3_knockoff_star_run(b, beta_sq_desc, sigma2, d1, alpha, m, seed).map(|r| r.estimate)
}

/// [`t3_knockoff_star`] keeping the histogram of rejection counts.
pub fn t3_knockoff_star_run(
    b: &DeltaLowerBounds,
    beta_sq_desc: &[f64],
    sigma2: f64,
    d1: usize,
    alpha: f64,
    m: usize,
    seed: u64,
) -> Result<T3Run> {
    let d = b.len();
    if d1 == 0 || d1 > d {
        return Err(out_of_range(format!("d1 = {d1} must lie in 1..={d}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) || !(sigma2 > 0.0) || m == 0 {
        return Err(out_of_range("need alpha in (0, 1), sigma2 > 0 and at least one replicate"));
    }
    let base = squared_coefficients(beta_sq_desc, d)?;
    let draws: Vec<(usize, usize)> = (0..m as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = substream(seed, rep, stream::T3);
            let mut sq = base.clone();
            sq.shuffle(&mut rng);
            let mu = t3_mu(&sq, b, sigma2);
            let nonnull: Vec<bool> = sq.iter().map(|s| *s != 0.0).collect();
            knockoff_star_draw(&mu, &nonnull, alpha, &mut rng)
        })
        .collect();
    let tpp: Vec<f64> = draws.iter().map(|(_, tp)| *tp as f64 / d1 as f64).collect();
    let counts: Vec<usize> = draws.iter().map(|(r, _)| *r).collect();
    let rej: Vec<f64> = counts.iter().map(|r| *r as f64).collect();
    Ok(T3Run {
        estimate: T3Estimate { tpr: Estimate::from_samples(&tpp), rejections: Estimate::from_samples(&rej), replicates: m },
        histogram: histogram_bins(&counts),
    })
}

/// μ_j = 2β_j²/(σ² b_j), with μ = ∞ where β_j ≠ 0 and b_j = 0.
fn t3_mu(sq: &[f64], b: &DeltaLowerBounds, sigma2: f64) -> Vec<f64> {
    sq.iter()
        .zip(&b.b)
        .map(|(&s, &bj)| if s == 0.0 { 0.0 } else if bj > 0.0 { 2.0 * s / (sigma2 * bj) } else { f64::INFINITY })
        .collect()
}

fn histogram_bins(counts: &[usize]) -> Vec<HistogramBin> {
    let top = counts.iter().copied().max().unwrap_or(0);
    let mut tally = vec![0usize; top + 1];
    for &c in counts {
        tally[c] += 1;
    }
    tally
        .iter()
        .enumerate()
        .filter(|(_, n)| **n > 0)
        .map(|(count, n)| HistogramBin { count, frequency: *n as f64 / counts.len() as f64 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    /// Number of rejections.
    pub count: usize,
    /// Fraction of replicates with that many rejections.
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionHistogram {
    pub bins: Vec<HistogramBin>,
    pub mean: Estimate,
    pub replicates: usize,
}

/// Distribution of knockoff* rejection counts for a fixed μ profile.
pub fn simulate_knockoff_star_rejections(mu: &[f64], alpha: f64, m: usize, seed: u64) -> Result<RejectionHistogram> {
    if mu.iter().any(|v| !(*v >= 0.0)) {
        return Err(out_of_range("mu entries must be non-negative"));
    }
    if !(alpha > 0.0 && alpha < 1.0) || m == 0 {
        return Err(out_of_range("need alpha in (0, 1) and at least one replicate"));
    }
    let nonnull: Vec<bool> = mu.iter().map(|v| *v > 0.0).collect();
    let counts: Vec<usize> = (0..m as u64)
        .into_par_iter()
        .map(|rep| knockoff_star_draw(mu, &nonnull, alpha, &mut substream(seed, rep, stream::HISTOGRAM)).0)
        .collect();
    let bins = histogram_bins(&counts);
    let as_f: Vec<f64> = counts.iter().map(|c| *c as f64).collect();
    Ok(RejectionHistogram { bins, mean: Estimate::from_samples(&as_f), replicates: m })
}

fn check_pvals(pvals: &[f64], alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(out_of_range(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    if pvals.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(out_of_range("p-values must lie in [0, 1]"));
    }
    Ok(())
}

/// Benjamini–Hochberg step-up: rejects the i_max smallest p-values with
/// i_max = max{i : p_(i) ≤ iα/d}. Indices are returned ascending.
pub fn bh_procedure(pvals: &[f64], alpha: f64) -> Result<Vec<usize>> {
    check_pvals(pvals, alpha)?;
    let d = pvals.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]));
    let cut = (1..=d).rev().find(|&i| pvals[order[i - 1]] <= i as f64 * alpha / d as f64).unwrap_or(0);
    let mut rej = order[..cut].to_vec();
    rej.sort_unstable();
    Ok(rej)
}

/// {j : p_j ≤ α/d}.
pub fn bonferroni(pvals: &[f64], alpha: f64) -> Result<Vec<usize>> {
    check_pvals(pvals, alpha)?;
    let cut = alpha / pvals.len() as f64;
    Ok((0..pvals.len()).filter(|&j| pvals[j] <= cut).collect())
}

/// Two-sided p-values of t_j = β̂_j/√(σ̂²Σ_jj); `dof = ∞` uses the normal.
pub fn ols_t_pvalues(beta_hat: &DVector<f64>, sigma_diag: &DVector<f64>, sigma_hat2: f64, dof: f64) -> Result<Vec<f64>> {
    if beta_hat.len() != sigma_diag.len() {
        return Err(Error::Dimension("beta_hat and sigma diagonal lengths differ".into()));
    }
    if !(sigma_hat2 > 0.0) || !(dof >= 1.0) {
        return Err(out_of_range("need sigma_hat2 > 0 and dof >= 1"));
    }
    let student = if dof.is_finite() {
        Some(StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Numerical(format!("student t: {e}")))?)
    } else {
        None
    };
    Ok(beta_hat
        .iter()
        .zip(sigma_diag.iter())
        .map(|(&b, &s)| {
            let t = (b / (sigma_hat2 * s).sqrt()).abs();
            let p = match &student {
                Some(dist) => 2.0 * dist.sf(t),
                None => 2.0 * normal_sf(t),
            };
            p.min(1.0)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Score {
    pub r: usize,
    pub v: usize,
    pub fdp: f64,
    /// Undefined when the support is empty.
    pub tpp: Option<f64>,
}

/// FDP = V/max(R, 1) and TPP = (R − V)/d₁.
pub fn fdr_tpr_score(rejections: &[usize], support: &[usize]) -> Score {
    let r = rejections.len();
    let tp = rejections.iter().filter(|j| support.contains(j)).count();
    let v = r - tp;
    Score {
        r,
        v,
        fdp: v as f64 / r.max(1) as f64,
        tpp: (!support.is_empty()).then(|| tp as f64 / support.len() as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Method {
    #[serde(rename = "oracle-knockoff*")]
    OracleKnockoffStar,
    #[serde(rename = "lasso-knockoff")]
    LassoKnockoff,
    #[serde(rename = "t3-knockoff*")]
    T3KnockoffStar,
    #[serde(rename = "bh")]
    Bh,
    #[serde(rename = "bonferroni")]
    Bonferroni,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::OracleKnockoffStar, Method::LassoKnockoff, Method::T3KnockoffStar, Method::Bh, Method::Bonferroni];

    pub fn name(self) -> &'static str {
        match self {
            Method::OracleKnockoffStar => "oracle-knockoff*",
            Method::LassoKnockoff => "lasso-knockoff",
            Method::T3KnockoffStar => "t3-knockoff*",
            Method::Bh => "bh",
            Method::Bonferroni => "bonferroni",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s || m.name().trim_end_matches('*') == s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub scenario: ScenarioSpec,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Defaults to the scenario seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Carve the whitening noise from σ̂² (design-gram only) instead of
    /// using the known σ².
    #[serde(default)]
    pub carve: bool,
    /// Leading eigenvectors used for b_k; `None` scans all.
    #[serde(default)]
    pub top_l: Option<usize>,
}

fn default_replicates() -> usize {
    600
}

fn default_alphas() -> Vec<f64> {
    vec![0.1, 0.2]
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

impl MonteCarloConfig {
    pub fn new(scenario: ScenarioSpec, replicates: usize, alphas: Vec<f64>, methods: Vec<Method>) -> Self {
        Self { scenario, replicates, alphas, methods, seed: None, carve: false, top_l: None }
    }

    /// Master seed: the explicit one, else the scenario's.
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.scenario.seed)
    }

    /// The covariance (and design) realization shared by every replicate.
    pub fn build_scenario(&self) -> Result<Scenario> {
        self.scenario.build(&mut substream(self.seed(), 0, stream::SCENARIO))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: Method,
    pub alpha: f64,
    pub r: usize,
    pub v: usize,
    pub fdp: f64,
    pub tpp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub alpha: f64,
    pub fdr: Estimate,
    pub tpr: Option<Estimate>,
    pub rejections: Estimate,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerSummary {
    pub entries: Vec<MethodSummary>,
}

impl PowerSummary {
    pub fn get(&self, method: Method, alpha: f64) -> Option<&MethodSummary> {
        self.entries.iter().find(|e| e.method == method && e.alpha == alpha)
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub summary: PowerSummary,
    pub records: Vec<ReplicateRecord>,
}

/// Everything fixed across replicates.
struct Prepared {
    d: usize,
    d1: usize,
    sigma2: f64,
    beta0: f64,
    support: Support,
    design: Option<(DMatrix<f64>, usize)>,
    chol: Option<DMatrix<f64>>,
    sigma_matrix: DMatrix<f64>,
    sigma_diag: DVector<f64>,
    oracle_vd: Option<ValidatedDelta>,
    lasso_vd: Option<ValidatedDelta>,
    b: Option<DeltaLowerBounds>,
}

fn prepare(cfg: &MonteCarloConfig) -> Result<Prepared> {
    let spec = &cfg.scenario;
    spec.validate()?;
    if cfg.replicates == 0 {
        return Err(out_of_range("replicates must be at least 1"));
    }
    if cfg.alphas.is_empty() || cfg.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(out_of_range("alphas must be non-empty and lie in (0, 1)"));
    }
    let d1 = spec.num_nonnull().unwrap_or(0);
    let scenario = cfg.build_scenario()?;
    let sigma = scenario.sigma;
    let wants = |m: Method| cfg.methods.contains(&m);
    let equi = if wants(Method::OracleKnockoffStar) || wants(Method::LassoKnockoff) {
        Some(make_equi_delta(&sigma)?)
    } else {
        None
    };
    let oracle_vd = match (&equi, wants(Method::OracleKnockoffStar)) {
        (Some(delta), true) => Some(validate_delta(&sigma, delta)?),
        _ => None,
    };
    let lasso_vd = match (&equi, wants(Method::LassoKnockoff)) {
        (Some(delta), true) => Some(validate_delta(&sigma, &delta.inflate(LASSO_DELTA_INFLATION)?)?),
        _ => None,
    };
    if cfg.carve && scenario.design.is_none() {
        return Err(out_of_range("carving needs a design-gram scenario (residual variance)"));
    }
    let b = if wants(Method::T3KnockoffStar) {
        if d1 == 0 {
            return Err(out_of_range("t3-knockoff* needs at least one non-null"));
        }
        Some(delta_order_lower_bounds(sigma.eigen()?, cfg.top_l))
    } else {
        None
    };
    let chol = match scenario.design {
        Some(_) => None,
        None => Some(
            linalg::cholesky_lower(sigma.matrix())
                .or_else(|_| {
                    let e = sigma.eigen()?;
                    Ok::<_, Error>(linalg::spectral_map(&e.eigenvalues, &e.eigenvectors, |x| x.max(0.0).sqrt()))
                })?,
        ),
    };
    let n = spec.n.unwrap_or(2 * spec.d);
    Ok(Prepared {
        d: spec.d,
        d1,
        sigma2: spec.sigma2,
        beta0: spec.beta0,
        support: spec.support.clone(),
        design: scenario.design.map(|x| (x, n)),
        chol,
        sigma_matrix: sigma.matrix().clone(),
        sigma_diag: sigma.diagonal(),
        oracle_vd,
        lasso_vd,
        b,
    })
}

struct Observation {
    beta: DVector<f64>,
    support: Vec<usize>,
    beta_hat: DVector<f64>,
    /// (σ̂², residual degrees of freedom) when a design is simulated.
    residual: Option<(f64, usize)>,
}

fn observe(p: &Prepared, seed: u64, rep: u64) -> Observation {
    let d = p.d;
    let support: Vec<usize> = match &p.support {
        Support::Fixed(ix) => ix.iter().map(|i| i - 1).collect(),
        Support::Placement(_) => {
            let mut rng = substream(seed, rep, stream::SUPPORT);
            let mut s = rand::seq::index::sample(&mut rng, d, p.d1).into_vec();
            s.sort_unstable();
            s
        }
    };
    let mut beta = DVector::zeros(d);
    for &j in &support {
        beta[j] = p.beta0;
    }
    let sd = p.sigma2.sqrt();
    let mut rng = substream(seed, rep, stream::DATA);
    match (&p.design, &p.chol) {
        (Some((x, n)), _) => {
            let y = x * &beta + normal_vec(&mut rng, *n) * sd;
            let beta_hat = &p.sigma_matrix * (x.transpose() * &y);
            let resid = &y - x * &beta_hat;
            let dof = n - d;
            let sigma_hat2 = if dof > 0 { resid.norm_squared() / dof as f64 } else { f64::NAN };
            Observation { beta, support, beta_hat, residual: Some((sigma_hat2, dof)) }
        }
        (None, Some(l)) => {
            let beta_hat = &beta + l * normal_vec(&mut rng, d) * sd;
            Observation { beta, support, beta_hat, residual: None }
        }
        (None, None) => unreachable!("prepare sets either a design or a factor"),
    }
}

fn split_for(p: &Prepared, vd: &ValidatedDelta, obs: &Observation, carve: bool, seed: u64, rep: u64) -> Result<WhitenedSplit> {
    let mut rng = substream(seed, rep, stream::WHITEN);
    match (carve, obs.residual) {
        (true, Some((s2, _))) => {
            let n = p.design.as_ref().map(|(_, n)| *n).unwrap_or(0);
            whiten_carved(&obs.beta_hat, vd, s2, n, &mut rng).map(|(s, _)| s)
        }
        _ => whiten_known_sigma(&obs.beta_hat, vd, p.sigma2, &mut rng),
    }
}

fn seqstep_records(
    ordering: &OrderingDecision,
    split: &WhitenedSplit,
    obs: &Observation,
    method: Method,
    alphas: &[f64],
    rep: usize,
) -> Result<Vec<ReplicateRecord>> {
    let pv = binary_pvalues(ordering, &split.beta_tilde);
    alphas
        .iter()
        .map(|&alpha| {
            let res = run_seqstep(&pv, alpha)?;
            let s = fdr_tpr_score(&res.rejections, &obs.support);
            Ok(ReplicateRecord { replicate: rep, method, alpha, r: s.r, v: s.v, fdp: s.fdp, tpp: s.tpp })
        })
        .collect()
}

fn t3_records(p: &Prepared, b: &DeltaLowerBounds, alphas: &[f64], seed: u64, rep: usize) -> Vec<ReplicateRecord> {
    let d = p.d;
    let mut out = Vec::with_capacity(alphas.len());
    for (ai, &alpha) in alphas.iter().enumerate() {
        let mut rng = substream(seed, rep as u64, stream::T3 ^ ((ai as u64) << 8));
        let mut sq = vec![0.0; d];
        sq[..p.d1].fill(p.beta0 * p.beta0);
        sq.shuffle(&mut rng);
        let mu = t3_mu(&sq, b, p.sigma2);
        let nonnull: Vec<bool> = sq.iter().map(|s| *s != 0.0).collect();
        let (r, tp) = knockoff_star_draw(&mu, &nonnull, alpha, &mut rng);
        let v = r - tp;
        out.push(ReplicateRecord {
            replicate: rep,
            method: Method::T3KnockoffStar,
            alpha,
            r,
            v,
            fdp: v as f64 / r.max(1) as f64,
            tpp: Some(tp as f64 / p.d1 as f64),
        });
    }
    out
}

fn run_replicate(cfg: &MonteCarloConfig, p: &Prepared, rep: usize) -> Result<Vec<ReplicateRecord>> {
    let seed = cfg.seed();
    let obs = observe(p, seed, rep as u64);
    let mut out = Vec::new();
    for &method in &cfg.methods {
        match method {
            Method::OracleKnockoffStar => {
                let vd = p.oracle_vd.as_ref().expect("prepared");
                let split = split_for(p, vd, &obs, cfg.carve, seed, rep as u64)?;
                let scale = obs.residual.filter(|_| cfg.carve).map_or(p.sigma2, |r| r.0);
                let profile = log_odds(&obs.beta, &split.beta_tilde, vd.delta(), scale)?;
                let ordering = oracle_ordering_from_eta(&obs.beta, &profile.eta);
                out.extend(seqstep_records(&ordering, &split, &obs, method, &cfg.alphas, rep)?);
            }
            Method::LassoKnockoff => {
                let vd = p.lasso_vd.as_ref().expect("prepared");
                let split = split_for(p, vd, &obs, cfg.carve, seed, rep as u64)?;
                let pd = build_pseudo_design(&split, vd)?;
                let (_, ordering) = lasso_signed_max_ordering(&pd, &split.beta_tilde, &LassoConfig::default())?;
                out.extend(seqstep_records(&ordering, &split, &obs, method, &cfg.alphas, rep)?);
            }
            Method::T3KnockoffStar => {
                out.extend(t3_records(p, p.b.as_ref().expect("prepared"), &cfg.alphas, seed, rep));
            }
            Method::Bh | Method::Bonferroni => {
                let pvals = match obs.residual {
                    Some((s2, dof)) => ols_t_pvalues(&obs.beta_hat, &p.sigma_diag, s2, dof as f64)?,
                    None => ols_t_pvalues(&obs.beta_hat, &p.sigma_diag, p.sigma2, f64::INFINITY)?,
                };
                for &alpha in &cfg.alphas {
                    let rej = if method == Method::Bh { bh_procedure(&pvals, alpha)? } else { bonferroni(&pvals, alpha)? };
                    let s = fdr_tpr_score(&rej, &obs.support);
                    out.push(ReplicateRecord { replicate: rep, method, alpha, r: s.r, v: s.v, fdp: s.fdp, tpp: s.tpp });
                }
            }
        }
    }
    Ok(out)
}

/// Runs every method on `replicates` independent draws of the scenario.
///
/// Each replicate draws its support, data and whitening noise from its own
/// substreams; the oracle and lasso methods share the whitening draw.
pub fn run_scenario(cfg: &MonteCarloConfig) -> Result<ScenarioRun> {
    let prepared = prepare(cfg)?;
    let per_rep: Vec<Vec<ReplicateRecord>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| run_replicate(cfg, &prepared, rep))
        .collect::<Result<_>>()?;
    let records: Vec<ReplicateRecord> = per_rep.into_iter().flatten().collect();
    let mut entries = Vec::new();
    for &method in &cfg.methods {
        for &alpha in &cfg.alphas {
            let rows: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == method && r.alpha == alpha).collect();
            let fdp: Vec<f64> = rows.iter().map(|r| r.fdp).collect();
            let rej: Vec<f64> = rows.iter().map(|r| r.r as f64).collect();
            let tpp: Vec<f64> = rows.iter().filter_map(|r| r.tpp).collect();
            entries.push(MethodSummary {
                method,
                alpha,
                fdr: Estimate::from_samples(&fdp),
                tpr: (!tpp.is_empty()).then(|| Estimate::from_samples(&tpp)),
                rejections: Estimate::from_samples(&rej),
                replicates: rows.len(),
            });
        }
    }
    Ok(ScenarioRun { summary: PowerSummary { entries }, records })
}

/// Knockoff* ordering p̃ sequence, exposed for callers building their own loops.
pub fn knockoff_star_pvalues(beta: &DVector<f64>, split: &WhitenedSplit, vd: &ValidatedDelta, sigma2: f64) -> Result<Vec<PTilde>> {
    let profile = log_odds(beta, &split.beta_tilde, vd.delta(), sigma2)?;
    let ord = oracle_ordering_from_eta(beta, &profile.eta);
    Ok(binary_pvalues(&ord, &split.beta_tilde).entries.into_iter().map(|e| e.1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodel::Family;

    fn exact_walk_mean(d: usize, alpha: f64, q: f64) -> f64 {
        let mut total = 0.0;
        for mask in 0u32..(1 << d) {
            let ones = mask.count_ones() as i32;
            let prob = q.powi(ones) * (1.0 - q).powi(d as i32 - ones);
            let seq: Vec<PTilde> = (0..d).map(|i| if mask >> i & 1 == 1 { PTilde::One } else { PTilde::Half }).collect();
            let r = run_seqstep(&crate::seqstep::BinaryPValueSeq::from_ptilde(&seq), alpha).unwrap().rejection_count;
            total += prob * r as f64;
        }
        total
    }

    #[test]
    fn walk_matches_enumeration() {
        let (alpha, d) = (0.3f64, 12);
        let delta = alpha.sqrt() - alpha;
        let q = (alpha + delta) / (1.0 + alpha + delta);
        let exact = exact_walk_mean(d, alpha, q);
        let est = simulate_eta_walk_bound(1, d, alpha, delta, 40_000, 3).unwrap();
        assert!((est.mean - exact).abs() < 3.0 * est.mcse + 1e-9, "{} vs {exact} ± {}", est.mean, est.mcse);
    }

    #[test]
    fn walk_with_large_delta_is_small() {
        let alpha: f64 = 0.1;
        let est = simulate_eta_walk_bound(1, 12, alpha, 1.0 - alpha - 1e-6, 5000, 1).unwrap();
        let exact = exact_walk_mean(12, alpha, (1.0 - 1e-6) / (2.0 - 1e-6));
        assert!(est.mean < 0.5);
        assert!((est.mean - exact).abs() < 3.0 * est.mcse + 1e-6);
    }

    #[test]
    fn lundberg_root() {
        let spec = RandomWalkSpec::for_eta_bound(1, 10, 0.05, 0.05f64.sqrt() - 0.05).unwrap();
        let t = spec.lundberg(0.05).unwrap();
        let f = (1.0 - spec.q) * (t * 0.05).exp() + spec.q * (-t).exp();
        assert!(t > 0.0 && (f - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bh_and_bonferroni_examples() {
        assert!(bh_procedure(&[1.0; 5], 0.1).unwrap().is_empty());
        assert_eq!(bh_procedure(&[0.01, 0.02, 0.9, 1.0], 0.1).unwrap(), vec![0, 1]);
        assert_eq!(bh_procedure(&[0.9, 0.001, 0.5], 0.1).unwrap(), vec![1]);
        assert_eq!(bonferroni(&[0.025, 0.5, 0.03, 0.1], 0.1).unwrap(), vec![0]);
        assert!(bonferroni(&[0.2, 0.3], 0.1).unwrap().is_empty());
        let p = [0.001, 0.2, 0.004, 0.03, 0.5, 0.011];
        let direct: Vec<usize> = (0..6).filter(|&j| p[j] <= 0.05 / 6.0).collect();
        assert_eq!(bonferroni(&p, 0.05).unwrap(), direct);
    }

    #[test]
    fn t_pvalues() {
        let one = DVector::from_element(1, 1.0);
        let p = ols_t_pvalues(&DVector::from_element(1, 0.0), &one, 1.0, f64::INFINITY).unwrap();
        assert_eq!(p[0], 1.0);
        let p = ols_t_pvalues(&DVector::from_element(1, 1.959964), &one, 1.0, f64::INFINITY).unwrap();
        assert!((p[0] - 0.05).abs() < 1e-6);
        let p = ols_t_pvalues(&DVector::from_element(1, 2.228), &one, 1.0, 10.0).unwrap();
        assert!((p[0] - 0.05).abs() < 1e-4, "{}", p[0]);
    }

    #[test]
    fn scoring() {
        let s = fdr_tpr_score(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!((s.fdp, s.tpp), (0.0, Some(1.0)));
        let s = fdr_tpr_score(&[0, 5, 6, 7, 8], &[1, 2]);
        assert_eq!((s.fdp, s.tpp), (1.0, Some(0.0)));
        let s = fdr_tpr_score(&[0, 1, 2, 9], &[0, 1, 2, 3, 4, 5]);
        assert_eq!((s.fdp, s.tpp), (0.25, Some(0.5)));
        assert_eq!(fdr_tpr_score(&[1], &[]).tpp, None);
    }

    #[test]
    fn t3_extremes() {
        let d = 40;
        let b = DeltaLowerBounds::new(vec![1e-300; d]).unwrap();
        let est = t3_knockoff_star(&b, &vec![1e6; d], 1.0, d, 0.1, 200, 1).unwrap();
        assert_eq!(est.tpr.mean, 1.0);
        let b = DeltaLowerBounds::new((1..=d).map(|k| k as f64).collect()).unwrap();
        let est = t3_knockoff_star(&b, &[1e-4], 1.0, 1, 0.05, 500, 1).unwrap();
        assert!(est.tpr.mean < 0.05);
    }

    #[test]
    fn t3_matches_histogram_engine() {
        let d = 300;
        let b = DeltaLowerBounds::new((1..=d).map(|k| 0.5 * k as f64).collect()).unwrap();
        let beta_sq = 2.0 * (d as f64).ln() * 4.0;
        // With d1 = d every permutation gives the same μ profile.
        let t3 = t3_knockoff_star(&b, &vec![beta_sq; d], 1.0, d, 0.1, 3000, 5).unwrap();
        let mu: Vec<f64> = b.b.iter().map(|bj| 2.0 * beta_sq / bj).collect();
        let h = simulate_knockoff_star_rejections(&mu, 0.1, 3000, 6).unwrap();
        let se = (t3.rejections.mcse.powi(2) + h.mean.mcse.powi(2)).sqrt();
        assert!((t3.rejections.mean - h.mean.mean).abs() < 4.0 * se, "{} vs {}", t3.rejections.mean, h.mean.mean);
        let total: f64 = h.bins.iter().map(|b| b.frequency).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let zero = simulate_knockoff_star_rejections(&vec![0.0; 50], 0.1, 500, 1).unwrap();
        assert!(zero.mean.mean < 1.0);
    }

    #[test]
    fn null_scenario_controls_fdr() {
        let mut spec = ScenarioSpec::new(Family::Equicorrelated, 30);
        spec.rho = Some(0.3);
        spec.d1 = Some(0);
        let cfg = MonteCarloConfig {
            scenario: spec,
            replicates: 400,
            alphas: vec![0.2],
            methods: vec![Method::OracleKnockoffStar, Method::Bh, Method::Bonferroni],
            seed: Some(9),
            carve: false,
            top_l: None,
        };
        let run = run_scenario(&cfg).unwrap();
        for e in &run.summary.entries {
            assert!(e.fdr.mean <= 0.2 + 3.0 * e.fdr.mcse, "{:?}", e);
            assert!(e.tpr.is_none());
        }
    }

    #[test]
    fn scenario_is_thread_count_independent() {
        let mut spec = ScenarioSpec::new(Family::Equicorrelated, 12);
        spec.rho = Some(0.2);
        spec.d1 = Some(3);
        spec.beta0 = 4.0;
        let cfg = MonteCarloConfig {
            scenario: spec,
            replicates: 20,
            alphas: vec![0.1, 0.2],
            methods: Method::ALL.to_vec(),
            seed: Some(4),
            carve: false,
            top_l: None,
        };
        let a = run_scenario(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_scenario(&cfg).unwrap());
        assert_eq!(a.records, b.records);
    }
}
