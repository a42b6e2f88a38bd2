use whiteout::covmodel::{DesignBase, Family, ScenarioSpec};
use whiteout::simulator::{run_scenario, Method, MonteCarloConfig};

fn config(spec: ScenarioSpec, methods: Vec<Method>, reps: usize, carve: bool) -> MonteCarloConfig {
    MonteCarloConfig { scenario: spec, replicates: reps, alphas: vec![0.1, 0.2], methods, seed: Some(21), carve, top_l: None }
}

#[test]
fn oracle_is_at_least_as_powerful_as_lasso() {
    let mut spec = ScenarioSpec::new(Family::Equicorrelated, 40);
    spec.rho = Some(0.3);
    spec.d1 = Some(8);
    spec.beta0 = 6.0;
    let run = run_scenario(&config(spec, vec![Method::OracleKnockoffStar, Method::LassoKnockoff], 150, false)).unwrap();
    for alpha in [0.1, 0.2] {
        let o = run.summary.get(Method::OracleKnockoffStar, alpha).unwrap().tpr.unwrap();
        let l = run.summary.get(Method::LassoKnockoff, alpha).unwrap().tpr.unwrap();
        assert!(o.mean >= l.mean - 2.0 * (o.mcse.powi(2) + l.mcse.powi(2)).sqrt(), "{o:?} vs {l:?}");
    }
}

#[test]
fn carved_design_run_controls_fdr() {
    let mut spec = ScenarioSpec::new(Family::DesignGram, 30);
    spec.n = Some(90);
    spec.base = Some(DesignBase::Equicorrelated);
    spec.rho = Some(0.3);
    spec.d1 = Some(6);
    spec.beta0 = 3.0;
    let methods = vec![Method::OracleKnockoffStar, Method::Bh, Method::Bonferroni];
    let run = run_scenario(&config(spec, methods, 600, true)).unwrap();
    for e in &run.summary.entries {
        assert!(e.fdr.mean <= e.alpha + 3.0 * e.fdr.mcse, "{e:?}");
        assert_eq!(e.replicates, 600);
    }
    let bh = run.summary.get(Method::Bh, 0.2).unwrap();
    let bonf = run.summary.get(Method::Bonferroni, 0.2).unwrap();
    assert!(bh.rejections.mean >= bonf.rejections.mean);
}

#[test]
fn records_are_identical_across_thread_counts() {
    let mut spec = ScenarioSpec::new(Family::Factor, 30);
    spec.k = Some(2);
    spec.lambda = Some(10.0);
    spec.d1 = Some(5);
    spec.beta0 = 4.0;
    let cfg = config(spec, Method::ALL.to_vec(), 24, false);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run_scenario(&cfg).unwrap());
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| run_scenario(&cfg).unwrap());
    assert_eq!(one.records, four.records);
    assert_eq!(one.summary, four.summary);
}
