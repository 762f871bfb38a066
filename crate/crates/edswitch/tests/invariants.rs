//! Property tests for invariants that hold for every valid model.

use std::collections::BTreeSet;

use edswitch::approx::{inc_smooth_pruned, PruneConfig};
use edswitch::bn::{d_separated, d_separated_by_paths, Dag, Method};
use edswitch::chains::{
    expanded_duration_pmf, negative_binomial_expansion, negative_binomial_pmf, substream, DurationModel, EdChain, Encoding,
    RegimeTransition,
};
use edswitch::edmsm::{cd, dec, inc, EdOptions, MarkovSegments};
use edswitch::hmm::TableEmission;
use edswitch::lgssm::{filter, rts_smooth, LgssmParams};
use edswitch::oracle::{batch_gaussian, enumerate_ed, PathEmission};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

fn weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.05..1.0)).collect()
}

fn random_chain(rng: &mut impl Rng, s_count: usize, d_min: usize, d_max: usize) -> EdChain {
    let rows: Vec<Vec<f64>> = (0..s_count)
        .map(|i| {
            let mut w = weights(rng, s_count);
            w[i] = 0.0;
            let z: f64 = w.iter().sum();
            w.iter().map(|x| x / z).collect()
        })
        .collect();
    let cols: Vec<Vec<f64>> = (0..s_count).map(|j| (0..s_count).map(|i| rows[i][j]).collect()).collect();
    let tilde = weights(rng, s_count);
    let z: f64 = tilde.iter().sum();
    let transition = RegimeTransition::from_rows(tilde.iter().map(|x| x / z).collect(), &cols).unwrap();
    let dur = (0..s_count).map(|_| weights(rng, d_max - d_min + 1)).collect();
    EdChain::new(transition, DurationModel::from_weights(d_min, d_max, dur).unwrap()).unwrap()
}

fn random_emission(rng: &mut impl Rng, t_len: usize, s_count: usize) -> TableEmission {
    TableEmission::from_probs(&(0..t_len).map(|_| weights(rng, s_count)).collect::<Vec<_>>()).unwrap()
}

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hazards_and_pmfs_are_interchangeable(seed in any::<u64>(), s_count in 1usize..4, d_min in 1usize..4, span in 0usize..6) {
        let mut rng = substream(seed, 0);
        let d_max = d_min + span;
        let rows = (0..s_count).map(|_| weights(&mut rng, span + 1)).collect();
        let model = DurationModel::from_weights(d_min, d_max, rows).unwrap();
        let back = model.to_hazard().to_duration().unwrap();
        for s in 0..s_count {
            let total: f64 = (1..=d_max).map(|d| model.rho(s, d)).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for d in 1..=d_max + 1 {
                prop_assert!((model.rho(s, d) - back.rho(s, d)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chained_copies_give_negative_binomial_durations(pi_ii in 0.01f64..0.99, d_min in 1usize..6) {
        let hmm = RegimeTransition::from_rows(vec![1.0, 0.0], &[vec![pi_ii, 1.0 - pi_ii], vec![1.0 - pi_ii, pi_ii]]).unwrap();
        let expanded = negative_binomial_expansion(&hmm, d_min).unwrap();
        let pmf = expanded_duration_pmf(&expanded, 0, d_min, 40);
        for (i, p) in pmf.iter().enumerate() {
            prop_assert!((p - negative_binomial_pmf(pi_ii, d_min, i + 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn encodings_match_enumeration(
        seed in any::<u64>(),
        s_count in 2usize..4,
        d_min in 1usize..3,
        span in 0usize..3,
        t_len in 1usize..7,
        condition_end in any::<bool>(),
    ) {
        let mut rng = substream(seed, 1);
        let chain = random_chain(&mut rng, s_count, d_min, d_min + span);
        let em = random_emission(&mut rng, t_len, s_count);
        let opts = EdOptions::default().condition_end(condition_end);
        let exact = match enumerate_ed(&chain, Encoding::Dec, PathEmission::Markov { em: &em, asi: false }, condition_end) {
            Ok(x) => x,
            Err(_) => return Ok(()),
        };
        prop_assume!(exact.log_evidence.is_finite());
        let d = dec::forward_backward(&em, &chain, opts).unwrap();
        let i = inc::forward_backward(&em, &chain, opts).unwrap();
        let c = cd::forward_backward(&MarkovSegments { em: &em, asi: false }, &chain, opts).unwrap();
        for post in [&d, &i, &c] {
            prop_assert!(max_gap(&post.smoothed_regimes(), &exact.smoothed_regimes) < 1e-9);
            prop_assert!((post.log_likelihood - exact.log_evidence).abs() < 1e-9);
        }
        let d_path = dec::viterbi(&em, &chain, opts).unwrap();
        prop_assert!((d_path.log_joint - exact.map_log_joint).abs() < 1e-9);
        let exact_inc = enumerate_ed(&chain, Encoding::Inc, PathEmission::Markov { em: &em, asi: false }, condition_end).unwrap();
        let i_path = inc::viterbi(&em, &chain, opts).unwrap();
        prop_assert!((i_path.log_joint - exact_inc.map_log_joint).abs() < 1e-9);
    }

    #[test]
    fn an_unbinding_budget_changes_nothing(seed in any::<u64>(), s_count in 1usize..4, t_len in 1usize..30) {
        let mut rng = substream(seed, 2);
        let chain = if s_count == 1 {
            EdChain::new(RegimeTransition::uniform_switching(1).unwrap(), DurationModel::from_weights(1, 6, vec![weights(&mut rng, 6)]).unwrap()).unwrap()
        } else {
            random_chain(&mut rng, s_count, 1, 6)
        };
        let em = random_emission(&mut rng, t_len, s_count);
        let dense = inc::forward_backward(&em, &chain, EdOptions::default()).unwrap();
        let pruned = inc_smooth_pruned(&em, &chain, EdOptions::default(), &PruneConfig::keep_top(6).unwrap()).unwrap();
        prop_assert!(max_gap(&dense.smoothed_regimes(), &pruned.smoothed_regimes()) < 1e-10);
        prop_assert!((dense.log_likelihood - pruned.log_likelihood).abs() < 1e-9);
    }

    #[test]
    fn kalman_recursions_match_the_batch_posterior(
        a in -1.2f64..1.2,
        q in 0.01f64..2.0,
        b in -2.0f64..2.0,
        r in 0.01f64..2.0,
        mu in -3.0f64..3.0,
        p in 0.01f64..4.0,
        obs in prop::collection::vec(-5.0f64..5.0, 1..20),
    ) {
        let params = LgssmParams::scalar(a, q, b, r, mu, p).unwrap();
        let v: Vec<DVector<f64>> = obs.iter().map(|&x| DVector::from_element(1, x)).collect();
        let f = filter(&params, &v).unwrap();
        let s = rts_smooth(&params, &f.filtered).unwrap();
        let batch = batch_gaussian(&params, &v).unwrap();
        prop_assert!((f.log_likelihood() - batch.log_evidence).abs() < 1e-8);
        for (est, (m, c)) in s.iter().zip(batch.means.iter().zip(&batch.covs)) {
            prop_assert!((est.mean[0] - m[0]).abs() < 1e-8 * (1.0 + m[0].abs()));
            prop_assert!((est.cov[(0, 0)] - c[(0, 0)]).abs() < 1e-8 * (1.0 + c[(0, 0)]));
        }
    }

    #[test]
    fn separation_methods_agree(seed in any::<u64>(), n in 2usize..10, p in 0.1f64..0.6) {
        let mut rng = substream(seed, 3);
        let g = Dag::random(n, p, &mut rng);
        let mut role = |_: usize| rng.gen_range(0..4u8);
        let roles: Vec<u8> = (0..n).map(&mut role).collect();
        let pick = |k: u8| roles.iter().enumerate().filter(|(_, &r)| r == k).map(|(i, _)| i).collect::<BTreeSet<_>>();
        let (x, y, z) = (pick(0), pick(1), pick(2));
        prop_assume!(!x.is_empty() && !y.is_empty());
        let a = d_separated(&g, &x, &y, &z, Method::Pathwise).unwrap();
        let b = d_separated(&g, &x, &y, &z, Method::Moralize).unwrap();
        let c = d_separated_by_paths(&g, &x, &y, &z).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(a, c);
    }
}
