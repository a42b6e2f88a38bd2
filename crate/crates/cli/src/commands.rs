use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use whiteout::bounds::{
    bound_constants, default_delta, delta_diagnostic, delta_order_lower_bounds, theorem_main_bound,
    theorem_random_bound, BoundReport, DeltaLowerBounds, Ell,
};
use whiteout::covmodel::{leading_eigvec_cdf, CovarianceMatrix, Family, ScenarioSpec};
use whiteout::filter::{run_whitening_filter, DeltaSummary, LassoConfig, NoiseModel, Strategy};
use whiteout::io::{read_square_csv, read_vector};
use whiteout::rng::{stream, substream};
use whiteout::seqstep::PTilde;
use whiteout::simulator::{
    run_scenario, simulate_eta_walk_bound, simulate_knockoff_star_rejections, t3_knockoff_star_run, Estimate,
    HistogramBin, MonteCarloConfig, LASSO_DELTA_INFLATION,
};
use whiteout::standard_knockoffs::whitening_to_w;
use whiteout::whitening::{make_equi_delta, validate_delta, WhiteningMatrix};

use crate::output::{alpha_tag, num, Artifacts, CliError, CliResult};
use crate::{BetaArgs, BoundsArgs, CovArgs, DiagnoseArgs, FilterArgs, Global, StrategyArg, T3Args};

/// Δ_jj levels reported by the diagnostics: an SNR of about 3 at α = 0.05,
/// and the Marchenko–Pastur ceiling for i.i.d. designs with n = 2d.
const DELTA_LEVELS: [f64; 2] = [6.0, 11.7];

fn alphas(g: &Global, default: &[f64]) -> Vec<f64> {
    if g.alpha.is_empty() {
        default.to_vec()
    } else {
        g.alpha.clone()
    }
}

fn load_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config { path: path.into(), msg: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config { path: path.into(), msg: e.to_string() })
}

fn scenario(g: &Global) -> CliResult<Option<ScenarioSpec>> {
    g.config.as_deref().map(load_json::<ScenarioSpec>).transpose()
}

fn read_cov(path: &Path) -> CliResult<CovarianceMatrix> {
    Ok(CovarianceMatrix::new(read_square_csv(path)?)?)
}

enum CovSource {
    Matrix(CovarianceMatrix),
    Scenario(ScenarioSpec),
}

fn cov_source(g: &Global, cov: &CovArgs) -> CliResult<CovSource> {
    match (&cov.sigma, scenario(g)?) {
        (Some(path), _) => Ok(CovSource::Matrix(read_cov(path)?)),
        (None, Some(spec)) => {
            spec.validate()?;
            Ok(CovSource::Scenario(spec))
        }
        (None, None) => Err(CliError::Usage("give --sigma <csv> or --config <scenario.json>".into())),
    }
}

fn build_matrix(g: &Global, spec: &ScenarioSpec) -> CliResult<CovarianceMatrix> {
    let seed = g.seed.unwrap_or(spec.seed);
    Ok(spec.build(&mut substream(seed, 0, stream::SCENARIO))?.sigma)
}

/// b_k for a source; equicorrelated scenarios use the closed form so that
/// very large d never materializes Σ.
fn lower_bounds(g: &Global, src: &CovSource, top_l: Option<usize>) -> CliResult<DeltaLowerBounds> {
    match src {
        CovSource::Matrix(sigma) => Ok(delta_order_lower_bounds(sigma.eigen()?, top_l)),
        CovSource::Scenario(spec) => match (spec.family, spec.equi_rho()?) {
            (Family::Equicorrelated | Family::Mcc, Some(rho)) if rho >= 0.0 => {
                Ok(DeltaLowerBounds::equicorrelated(spec.d, rho)?)
            }
            _ => Ok(delta_order_lower_bounds(build_matrix(g, spec)?.eigen()?, top_l)),
        },
    }
}

struct BetaProfile {
    sq_desc: Vec<f64>,
    d1: usize,
    sigma2: f64,
}

fn beta_profile(args: &BetaArgs, spec: Option<&ScenarioSpec>, d: usize) -> CliResult<BetaProfile> {
    let sigma2 = args.sigma2.or(spec.map(|s| s.sigma2)).unwrap_or(1.0);
    if !(sigma2 > 0.0) {
        return Err(CliError::Usage(format!("--sigma2 {sigma2} must be positive")));
    }
    let mut sq_desc = if let Some(path) = &args.beta {
        let beta = read_vector(path)?;
        if beta.len() != d {
            return Err(CliError::Usage(format!("{} has {} entries, expected d = {d}", path.display(), beta.len())));
        }
        beta.iter().map(|b| b * b).filter(|v| *v > 0.0).collect()
    } else {
        let beta0 = args.beta0.or(spec.map(|s| s.beta0)).filter(|b| *b != 0.0);
        let d1 = args.d1.or(spec.and_then(|s| s.num_nonnull()));
        match (beta0, d1) {
            (Some(b), Some(k)) if k >= 1 && k <= d => vec![b * b; k],
            (Some(_), Some(k)) => return Err(CliError::Usage(format!("d1 = {k} must lie in 1..={d}"))),
            _ => return Err(CliError::Usage("give --beta <file>, or --beta0 with --d1 (or a scenario with both)".into())),
        }
    };
    if sq_desc.is_empty() {
        return Err(CliError::Usage("the coefficient profile has no non-null entries".into()));
    }
    sq_desc.sort_by(|a, b| b.total_cmp(a));
    Ok(BetaProfile { d1: sq_desc.len(), sq_desc, sigma2 })
}

pub fn constants(g: &Global) -> CliResult<Artifacts> {
    let rows = alphas(g, &[0.05, 0.1, 0.2])
        .into_iter()
        .map(|a| bound_constants(a, default_delta(a)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut art = Artifacts::new("constants.json", &rows)?;
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|c| {
            [c.alpha, c.delta, c.c1, c.c2, c.c3, c.c1_star_k, c.c2_star_k, c.c1_star_1, c.c2_star_1]
                .iter()
                .map(|v| num(*v))
                .collect()
        })
        .collect();
    art.csv(
        "constants.csv",
        &["alpha", "delta", "c1", "c2", "c3", "c1_star_k", "c2_star_k", "c1_star_1", "c2_star_1"],
        &csv,
    );
    Ok(art)
}

#[derive(Serialize)]
struct WalkSummary {
    k: usize,
    replicates: usize,
    estimate: Estimate,
}

#[derive(Serialize)]
struct BoundsEntry {
    alpha: f64,
    main_k: BoundReport,
    main_one: BoundReport,
    random_k: Option<BoundReport>,
    random_one: Option<BoundReport>,
    walk: Option<WalkSummary>,
}

pub fn bounds(g: &Global, a: &BoundsArgs) -> CliResult<Artifacts> {
    let src = cov_source(g, &a.cov)?;
    let spec = match &src {
        CovSource::Scenario(s) => Some(s),
        CovSource::Matrix(_) => None,
    };
    let pi1 = a.pi1.or(spec.and_then(|s| s.pi1));
    if let Some(p) = pi1 {
        if !(p > 0.0 && p <= 1.0) {
            return Err(CliError::Usage(format!("--pi1 {p} must lie in (0, 1]")));
        }
    }
    let b = lower_bounds(g, &src, a.top_l)?;
    let d = b.len();
    let beta = beta_profile(&a.beta, spec, d)?;
    let seed = g.seed.or(spec.map(|s| s.seed)).unwrap_or(0);
    let mut entries = Vec::new();
    for alpha in alphas(g, &[0.05]) {
        let main_k = theorem_main_bound(&beta.sq_desc, beta.sigma2, &b, alpha, Ell::K)?;
        let main_one = theorem_main_bound(&beta.sq_desc, beta.sigma2, &b, alpha, Ell::One)?;
        let random = |ell| pi1.map(|p| theorem_random_bound(&beta.sq_desc, beta.sigma2, &b, alpha, p, ell)).transpose();
        let walk = if a.walk_replicates > 0 && main_one.k <= d {
            let estimate = simulate_eta_walk_bound(main_one.k, d, alpha, default_delta(alpha), a.walk_replicates, seed)?;
            Some(WalkSummary { k: main_one.k, replicates: a.walk_replicates, estimate })
        } else {
            None
        };
        entries.push(BoundsEntry { alpha, random_k: random(Ell::K)?, random_one: random(Ell::One)?, main_k, main_one, walk });
    }
    let mut art = Artifacts::new(
        "bounds.json",
        json!({ "d": d, "d1": beta.d1, "sigma2": beta.sigma2, "pi1": pi1, "results": entries }),
    )?;
    let rows: Vec<Vec<String>> = b.b.iter().enumerate().map(|(k, v)| vec![(k + 1).to_string(), num(*v)]).collect();
    art.csv("b_k.csv", &["k", "b_k"], &rows);
    Ok(art)
}

pub fn simulate(g: &Global) -> CliResult<Artifacts> {
    let path = g.config.as_deref().ok_or_else(|| CliError::Usage("simulate needs --config <json>".into()))?;
    let mut cfg: MonteCarloConfig = load_json(path)?;
    if !g.alpha.is_empty() {
        cfg.alphas = g.alpha.clone();
    }
    if let Some(seed) = g.seed {
        cfg.seed = Some(seed);
    }
    let run = run_scenario(&cfg)?;
    let mut art = Artifacts::new("summary.json", json!({ "config": cfg, "summary": run.summary }))?;
    let rows: Vec<Vec<String>> = run
        .records
        .iter()
        .map(|r| {
            vec![
                (r.replicate + 1).to_string(),
                r.method.name().to_string(),
                num(r.alpha),
                r.r.to_string(),
                r.v.to_string(),
                num(r.fdp),
                r.tpp.map(num).unwrap_or_default(),
            ]
        })
        .collect();
    art.csv("replicates.csv", &["replicate", "method", "alpha", "R", "V", "FDP", "TPP"], &rows);
    Ok(art)
}

fn histogram_rows(bins: &[HistogramBin]) -> Vec<Vec<String>> {
    bins.iter().map(|b| vec![b.count.to_string(), num(b.frequency)]).collect()
}

pub fn t3(g: &Global, a: &T3Args) -> CliResult<Artifacts> {
    if a.replicates == 0 {
        return Err(CliError::Usage("--replicates must be at least 1".into()));
    }
    let alphas = alphas(g, &[0.1, 0.2]);
    if let Some(path) = &a.mu {
        let mu: Vec<f64> = read_vector(path)?.iter().copied().collect();
        let seed = g.seed.unwrap_or(0);
        let mut results = Vec::new();
        let mut files = Vec::new();
        for &alpha in &alphas {
            let h = simulate_knockoff_star_rejections(&mu, alpha, a.replicates, seed)?;
            files.push((alpha, histogram_rows(&h.bins)));
            results.push(json!({ "alpha": alpha, "rejections": h.mean, "replicates": h.replicates }));
        }
        let mut art = Artifacts::new("t3.json", json!({ "mode": "fixed-mu", "d": mu.len(), "results": results }))?;
        for (alpha, rows) in files {
            art.csv(format!("histogram_{}.csv", alpha_tag(alpha)), &["count", "frequency"], &rows);
        }
        return Ok(art);
    }
    let src = cov_source(g, &a.cov)?;
    let spec = match &src {
        CovSource::Scenario(s) => Some(s),
        CovSource::Matrix(_) => None,
    };
    let b = lower_bounds(g, &src, a.top_l)?;
    let d = b.len();
    let beta = beta_profile(&a.beta, spec, d)?;
    let seed = g.seed.or(spec.map(|s| s.seed)).unwrap_or(0);
    let pi1 = beta.d1 as f64 / d as f64;
    let mut results = Vec::new();
    let mut files = Vec::new();
    for &alpha in &alphas {
        let run = t3_knockoff_star_run(&b, &beta.sq_desc, beta.sigma2, beta.d1, alpha, a.replicates, seed)?;
        let ceiling = theorem_random_bound(&beta.sq_desc, beta.sigma2, &b, alpha, pi1, Ell::K)?;
        files.push((alpha, histogram_rows(&run.histogram)));
        results.push(json!({ "alpha": alpha, "estimate": run.estimate, "ceiling": ceiling }));
    }
    let mut art = Artifacts::new(
        "t3.json",
        json!({ "mode": "t3", "d": d, "d1": beta.d1, "sigma2": beta.sigma2, "results": results }),
    )?;
    for (alpha, rows) in files {
        art.csv(format!("histogram_{}.csv", alpha_tag(alpha)), &["count", "frequency"], &rows);
    }
    Ok(art)
}

enum DeltaSource {
    Equi,
    File(PathBuf),
}

fn parse_delta(s: &str) -> CliResult<DeltaSource> {
    match s {
        "equi" => Ok(DeltaSource::Equi),
        _ => match s.strip_prefix("file:") {
            Some(p) if !p.is_empty() => Ok(DeltaSource::File(PathBuf::from(p))),
            _ => Err(CliError::Usage(format!("--delta must be `equi` or `file:<path>`, got `{s}`"))),
        },
    }
}

fn load_delta(src: &DeltaSource, sigma: &CovarianceMatrix) -> CliResult<WhiteningMatrix> {
    match src {
        DeltaSource::Equi => Ok(make_equi_delta(sigma)?),
        DeltaSource::File(path) => {
            let diag = read_vector(path)?;
            if diag.len() != sigma.dim() {
                return Err(CliError::Usage(format!(
                    "{} has {} entries, expected d = {}",
                    path.display(),
                    diag.len(),
                    sigma.dim()
                )));
            }
            Ok(WhiteningMatrix::new(diag)?)
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Counts of Δ_jj below the reference levels and whether they are scarce.
fn delta_levels(delta: &WhiteningMatrix, alpha: f64) -> CliResult<(Value, bool)> {
    let diag = delta_diagnostic(delta, alpha, &DELTA_LEVELS)?;
    let d = delta.dim();
    let below_ceiling = diag.counts[1].below;
    // Warn when fewer than a tenth of the variables have Δ_jj under 11.7.
    let scarce = (below_ceiling as f64) < 0.1 * d as f64;
    Ok((json!(diag.counts), scarce))
}

pub fn filter(g: &Global, a: &FilterArgs) -> CliResult<Artifacts> {
    let alphas = alphas(g, &[0.1]);
    let delta_src = parse_delta(&a.delta)?;
    let beta_hat = read_vector(&a.beta_hat)?;
    let sigma = read_cov(&a.sigma)?;
    let d = sigma.dim();
    if beta_hat.len() != d {
        return Err(CliError::Usage(format!("beta-hat has {} entries but sigma is {d}x{d}", beta_hat.len())));
    }
    let noise = match (a.sigma2, a.sigma_hat, a.n) {
        (Some(s2), _, _) => NoiseModel::Known { sigma2: s2 },
        (None, Some(s), Some(n)) => NoiseModel::Carve { sigma_hat2: s * s, n },
        _ => return Err(CliError::Usage("give --sigma2, or --sigma-hat with --n".into())),
    };
    let true_beta = match (a.strategy, &a.beta) {
        (StrategyArg::Oracle, Some(path)) => {
            let beta = read_vector(path)?;
            if beta.len() != d {
                return Err(CliError::Usage(format!("beta has {} entries, expected d = {d}", beta.len())));
            }
            Some(beta)
        }
        (StrategyArg::Oracle, None) => return Err(CliError::Usage("--strategy oracle needs --beta <file>".into())),
        (StrategyArg::Lasso, _) => None,
    };
    let mut delta = load_delta(&delta_src, &sigma)?;
    // The pseudo-design needs A = Σ⁻¹ − Δ⁻¹ invertible, which the equi Δ is not.
    let inflation = (a.strategy == StrategyArg::Lasso && matches!(delta_src, DeltaSource::Equi)).then_some(LASSO_DELTA_INFLATION);
    if let Some(f) = inflation {
        delta = delta.inflate(f)?;
    }
    let vd = validate_delta(&sigma, &delta)?;
    let seed = g.seed.unwrap_or(0);

    let mut results = Vec::new();
    let mut files = Vec::new();
    for &alpha in &alphas {
        let strategy = match &true_beta {
            Some(beta) => Strategy::Oracle { beta },
            None => Strategy::Lasso(LassoConfig::default()),
        };
        let mut rng = substream(seed, 0, stream::FILTER);
        let res = run_whitening_filter(&beta_hat, &vd, noise, strategy, alpha, &mut rng)?;
        let bt = &res.split.beta_tilde;
        let (w, w_star) = match &res.w {
            Some(ws) => (ws.w.clone(), ws.w_star.clone()),
            None => {
                let w = whitening_to_w(&res.ordering, bt)?;
                let ws = w.iter().zip(bt.iter()).map(|(w, b)| w * b.signum()).collect();
                (w, ws)
            }
        };
        let rejected: Vec<bool> = (0..d).map(|j| res.rejections.binary_search(&j).is_ok()).collect();
        let ptilde = |j: usize| if whiteout::linalg::sign(bt[j]) == res.ordering.psi[j] { PTilde::Half } else { PTilde::One };
        let filter_rows: Vec<Vec<String>> = res
            .ordering
            .order
            .iter()
            .enumerate()
            .map(|(rank, &j)| {
                vec![
                    (rank + 1).to_string(),
                    (j + 1).to_string(),
                    num(w[j]),
                    num(w_star[j]),
                    res.ordering.psi[j].to_string(),
                    num(ptilde(j).value()),
                    rejected[j].to_string(),
                    res.eta.as_ref().map(|e| num(e.eta[j])).unwrap_or_default(),
                ]
            })
            .collect();
        let seq_rows: Vec<Vec<String>> = res
            .pvalues
            .entries
            .iter()
            .zip(&res.seqstep.fdp_hat_path)
            .enumerate()
            .map(|(rank, ((j, p), f))| {
                vec![(rank + 1).to_string(), (j + 1).to_string(), num(p.value()), num(*f), (rank < res.seqstep.k_hat && rejected[*j]).to_string()]
            })
            .collect();
        files.push((alpha, filter_rows, seq_rows));
        results.push(json!({
            "alpha": alpha,
            "k_hat": res.seqstep.k_hat,
            "rejection_count": res.rejections.len(),
            "rejections": res.rejections.iter().map(|j| j + 1).collect::<Vec<_>>(),
            "directions": res.directions,
            "carved": res.carved.as_ref().map(|c| json!({ "rank": c.rank_r, "v": c.v, "sigma_tilde_sq": c.sigma_tilde_sq })),
        }));
    }
    let (counts, scarce) = delta_levels(vd.delta(), alphas[0])?;
    let mut warnings = Vec::new();
    if scarce {
        warnings.push(format!("fewer than 10% of Delta_jj are below {}; only very strong signals can be rejected", DELTA_LEVELS[1]));
    }
    let summary = json!({
        "d": d,
        "strategy": match a.strategy { StrategyArg::Oracle => "oracle", StrategyArg::Lasso => "lasso" },
        "delta_source": a.delta,
        "delta_inflation": inflation,
        "seed": seed,
        "diagnostics": {
            "delta": DeltaSummary::of(&vd),
            "delta_below": counts,
            "large_delta_warning": scarce,
            "warnings": warnings,
        },
        "results": results,
    });
    let mut art = Artifacts::new("filter.json", summary)?;
    for (alpha, filter_rows, seq_rows) in files {
        let tag = alpha_tag(alpha);
        art.csv(
            format!("filter_{tag}.csv"),
            &["rank", "index", "W", "W_star", "psi", "p_tilde", "rejected", "eta_if_oracle"],
            &filter_rows,
        );
        art.csv(format!("seqstep_{tag}.csv"), &["rank", "hypothesis_index", "p_tilde", "fdp_hat", "rejected"], &seq_rows);
    }
    Ok(art)
}

pub fn diagnose(g: &Global, a: &DiagnoseArgs) -> CliResult<Artifacts> {
    let alphas = alphas(g, &[0.05]);
    let delta_src = parse_delta(&a.delta)?;
    let sigma = match cov_source(g, &a.cov)? {
        CovSource::Matrix(m) => m,
        CovSource::Scenario(spec) => build_matrix(g, &spec)?,
    };
    let d = sigma.dim();
    let delta = load_delta(&delta_src, &sigma)?;
    validate_delta(&sigma, &delta)?;
    let (corr, _) = sigma.to_correlation()?;
    let eig = corr.eigen()?;
    let b = delta_order_lower_bounds(sigma.eigen()?, None);
    let (counts, scarce) = delta_levels(&delta, alphas[0])?;
    let b_below: Vec<Value> = DELTA_LEVELS
        .iter()
        .map(|t| json!({ "threshold": t, "at_most": b.b.iter().filter(|v| **v < *t).count() }))
        .collect();
    let mut per_alpha = Vec::new();
    let mut snr_cols = Vec::new();
    for &alpha in &alphas {
        let diag = delta_diagnostic(&delta, alpha, &DELTA_LEVELS)?;
        let s = &diag.snr_thresholds;
        per_alpha.push(json!({
            "alpha": alpha,
            "snr_threshold_min": s.iter().copied().fold(f64::INFINITY, f64::min),
            "snr_threshold_median": median(s.clone()),
            "snr_threshold_max": s.iter().copied().fold(0.0, f64::max),
        }));
        snr_cols.push(diag.snr_thresholds);
    }
    let cdf: Vec<Value> = [0.5, 1.0, 2.0].iter().map(|c| json!({ "c": c, "fraction": leading_eigvec_cdf(eig, *c) })).collect();
    let lambda1 = eig.leading_eigenvalue();
    let mut warnings = Vec::new();
    if scarce {
        warnings.push(format!(
            "fewer than 10% of Delta_jj are below {}; knockoffs will only reject very strong signals",
            DELTA_LEVELS[1]
        ));
    }
    let summary = json!({
        "d": d,
        "lambda1": lambda1,
        "lambda1_over_d": lambda1 / d as f64,
        "leading_eigvec_cdf": cdf,
        "delta_source": a.delta,
        "delta": {
            "min": delta.diag().min(),
            "median": median(delta.diag().iter().copied().collect()),
            "max": delta.diag().max(),
            "mean": delta.diag().mean(),
        },
        "delta_below": counts,
        "any_valid_delta_below": b_below,
        "b_k_head": b.b.iter().take(10).collect::<Vec<_>>(),
        "snr": per_alpha,
        "verdict": if scarce { "whiteout warning" } else { "knockoffs viable" },
        "warnings": warnings,
    });
    let mut art = Artifacts::new("diagnose.json", summary)?;
    let mut header: Vec<String> = ["index", "sigma_jj", "delta_jj", "b_k"].iter().map(|s| s.to_string()).collect();
    header.extend(alphas.iter().map(|a| format!("snr_threshold_{}", alpha_tag(*a))));
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let sd = sigma.diagonal();
    let rows: Vec<Vec<String>> = (0..d)
        .map(|j| {
            let mut row = vec![(j + 1).to_string(), num(sd[j]), num(delta.diag()[j]), num(b.b[j])];
            row.extend(snr_cols.iter().map(|c| num(c[j])));
            row
        })
        .collect();
    art.csv("diagnose.csv", &header_ref, &rows);
    Ok(art)
}
