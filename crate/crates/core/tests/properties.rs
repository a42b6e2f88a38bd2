use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use whiteout::bounds::{delta_order_lower_bounds, theorem_main_bound, theorem_random_bound, DeltaLowerBounds, Ell};
use whiteout::covmodel::CovarianceMatrix;
use whiteout::filter::{binary_pvalues, oracle_ordering};
use whiteout::rng::seeded;
use whiteout::seqstep::{knockoff_plus_threshold, rejection_count_identity, run_seqstep, BinaryPValueSeq, PTilde};
use whiteout::simulator::{bh_procedure, bonferroni};
use whiteout::standard_knockoffs::w_to_whitening;
use whiteout::whitening::{make_equi_delta, validate_delta, whiten_known_sigma};

fn sigma_from(entries: &[f64], d: usize) -> CovarianceMatrix {
    let b = DMatrix::from_row_slice(d, d, &entries[..d * d]);
    let mut m = &b * b.transpose();
    for j in 0..d {
        m[(j, j)] += 0.1;
    }
    CovarianceMatrix::new(m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bh_dominates_bonferroni(p in prop::collection::vec(0.0f64..=1.0, 1..60), alpha in 0.01f64..0.5) {
        let bh = bh_procedure(&p, alpha).unwrap();
        let bonf = bonferroni(&p, alpha).unwrap();
        prop_assert!(bh.len() >= bonf.len());
        prop_assert!(bonf.iter().all(|j| bh.contains(j)));
    }

    #[test]
    fn rejection_identity_holds(bits in prop::collection::vec(any::<bool>(), 2..80), alpha in 0.02f64..0.6) {
        let seq: Vec<PTilde> = bits.iter().map(|b| if *b { PTilde::Half } else { PTilde::One }).collect();
        let res = run_seqstep(&BinaryPValueSeq::from_ptilde(&seq), alpha).unwrap();
        if res.k_hat > 0 && res.k_hat < seq.len() {
            prop_assert_eq!(res.rejection_count, rejection_count_identity(res.k_hat, seq.len(), alpha).unwrap());
        }
        prop_assert!(res.fdp_hat_path.len() == seq.len());
    }

    #[test]
    fn knockoff_plus_matches_seqstep(
        mags in prop::collection::hash_set(1u32..100_000, 1..40),
        signs in prop::collection::vec((any::<bool>(), any::<bool>()), 40),
        alpha in 0.02f64..0.5,
    ) {
        let mags: Vec<u32> = mags.into_iter().collect();
        let d = mags.len();
        let w: Vec<f64> = (0..d).map(|j| if signs[j].0 { 1.0 } else { -1.0 } * mags[j] as f64).collect();
        let w_star: Vec<f64> = (0..d).map(|j| if signs[j].1 { w[j].abs() } else { -w[j].abs() }).collect();
        // sgn(β̃) = sgn(W)·sgn(W*) is what the coupling produces.
        let beta_tilde = DVector::from_fn(d, |j, _| w[j].signum() * w_star[j].signum());
        let ordering = w_to_whitening(&w, &w_star).unwrap();
        let white = run_seqstep(&binary_pvalues(&ordering, &beta_tilde), alpha).unwrap();
        let knock = knockoff_plus_threshold(&w, alpha).unwrap();
        prop_assert_eq!(white.rejections, knock.rejections);
    }

    #[test]
    fn split_reconstructs_and_orders(entries in prop::collection::vec(-1.0f64..1.0, 36), d in 2usize..=6, seed in any::<u64>()) {
        let sigma = sigma_from(&entries, d);
        let delta = make_equi_delta(&sigma).unwrap();
        let vd = validate_delta(&sigma, &delta).unwrap();
        let mut rng = seeded(seed);
        let beta_hat = DVector::from_fn(d, |j, _| entries[j] * 3.0);
        let split = whiten_known_sigma(&beta_hat, &vd, 1.0, &mut rng).unwrap();
        let back = split.reconstruct(&vd);
        prop_assert!((&back - &beta_hat).amax() <= 1e-8 * beta_hat.amax().max(1.0));

        let beta = DVector::from_fn(d, |j, _| if j % 2 == 0 { 1.0 } else { 0.0 });
        let ord = oracle_ordering(&beta, &split, &delta, 1.0).unwrap();
        let mut sorted = ord.order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..d).collect::<Vec<_>>());
    }

    #[test]
    fn lower_bounds_are_sorted_and_below_equi(entries in prop::collection::vec(-1.0f64..1.0, 49), d in 2usize..=7) {
        let sigma = sigma_from(&entries, d);
        let b = delta_order_lower_bounds(sigma.eigen().unwrap(), None);
        prop_assert!(b.b.windows(2).all(|w| w[0] <= w[1]));
        let mut equi: Vec<f64> = make_equi_delta(&sigma).unwrap().diag().iter().copied().collect();
        equi.sort_by(f64::total_cmp);
        for k in 0..d {
            prop_assert!(equi[k] >= b.b[k] * (1.0 - 1e-9));
        }
    }

    #[test]
    fn random_bound_is_looser_than_main(beta2 in 0.5f64..40.0, d1 in 1usize..20, rho in 0.05f64..0.9) {
        let d = 200;
        let b = DeltaLowerBounds::equicorrelated(d, rho).unwrap();
        let sq = vec![beta2; d1];
        let main = theorem_main_bound(&sq, 1.0, &b, 0.1, Ell::K).unwrap();
        let random = theorem_random_bound(&sq, 1.0, &b, 0.1, d1 as f64 / d as f64, Ell::K).unwrap();
        // Stretching the index only raises b, so the condition is met no later.
        prop_assert!(random.k <= main.k);
    }
}
