use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};

use super::smooth::filter_smooth;
use super::*;
use crate::approx::PruneConfig;
use crate::chains::{DurationModel, EdChain, Encoding, RegimeTransition, SigmaState};
use crate::edmsm::{inc, EdOptions};
use crate::hmm::GaussianEmission;
use crate::lgssm::{self, LgssmParams};
use crate::oracle::enumerate_switching;

const ENCODINGS: [Encoding; 3] = [Encoding::Dec, Encoding::Inc, Encoding::Cd];

fn regimes() -> Vec<LgssmParams> {
    vec![
        LgssmParams::scalar(0.9, 0.1, 1.0, 0.3, 0.0, 1.0).unwrap(),
        LgssmParams::scalar(-0.5, 0.2, 1.0, 0.2, 1.0, 0.5).unwrap(),
    ]
}

fn chain(d_max: usize) -> EdChain {
    let rows = vec![(1..=d_max).map(|d| d as f64).collect(), (1..=d_max).map(|d| 1.0 / d as f64).collect()];
    EdChain::new(
        RegimeTransition::new(vec![0.6, 0.4], DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap(),
        DurationModel::from_weights(1, d_max, rows).unwrap(),
    )
    .unwrap()
}

fn series(t_len: usize) -> Vec<DVector<f64>> {
    (0..t_len).map(|t| DVector::from_element(1, (0.7 * t as f64).sin() + 0.3 * ((t * t) % 5) as f64 - 0.4)).collect()
}

fn single_regime(encoding: Encoding, t_len: usize) -> SlgssmParams {
    let p = LgssmParams::scalar(0.8, 0.2, 1.5, 0.4, 0.3, 2.0).unwrap();
    let ch = EdChain::new(
        RegimeTransition::new(vec![1.0], DMatrix::from_element(1, 1, 1.0)).unwrap(),
        DurationModel::point_mass(1, t_len).unwrap(),
    )
    .unwrap();
    SlgssmParams::from_lgssm(&[p], ch, encoding).unwrap().condition_end(true)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn single_regime_reduces_to_kalman() {
    let t_len = 9;
    let v = series(t_len);
    let p0 = LgssmParams::scalar(0.8, 0.2, 1.5, 0.4, 0.3, 2.0).unwrap();
    let kf = lgssm::filter(&p0, &v).unwrap();
    let ks = lgssm::rts_smooth(&p0, &kf.filtered).unwrap();
    for enc in ENCODINGS {
        for asi in [true, false] {
            let p = single_regime(enc, t_len).asi(asi);
            let (f, s) = filter_smooth(&p, &v).unwrap();
            assert!(close(f.log_likelihood, kf.log_likelihood(), 1e-10), "{enc} asi={asi}");
            for t in 0..t_len {
                let fm = f.steps[t].h_moments().unwrap();
                let sm = s.steps[t].h_moments().unwrap();
                assert!(close(fm.mean[0], kf.filtered[t].mean[0], 1e-10), "{enc} asi={asi} t={t}");
                assert!(close(fm.cov[(0, 0)], kf.filtered[t].cov[(0, 0)], 1e-10));
                assert!(close(sm.mean[0], ks[t].mean[0], 1e-10), "{enc} asi={asi} t={t}");
                assert!(close(sm.cov[(0, 0)], ks[t].cov[(0, 0)], 1e-10));
            }
        }
    }
}

fn check_against_oracle(enc: Encoding, asi: bool, cond: bool, check_smoothed: bool) {
    let v = series(5);
    let regs = regimes();
    let ch = chain(2);
    let exact = enumerate_switching(&ch, enc, &regs, &v, asi, cond).unwrap();
    let p = SlgssmParams::from_lgssm(&regs, ch, enc).unwrap().asi(asi).collapse(Collapse::None).condition_end(cond);
    let f = filter(&p, &v).unwrap();
    assert!(close(f.log_likelihood, exact.log_evidence, 1e-10), "{enc} asi={asi} cond={cond}");
    let s = smooth(&p, &v, &f).unwrap();
    for t in 0..v.len() {
        for (st, m) in &exact.filtered[t] {
            assert!(close(f.weight(t, *st), m.weight, 1e-10), "filtered weight {enc} {st:?} t={t}");
            if m.weight > 1e-12 {
                let b = moments(f.mixture(t, *st)).unwrap();
                assert!(close(b.mean[0], m.mean[0], 1e-9), "filtered mean {enc} asi={asi} {st:?} t={t}");
                assert!(close(b.cov[(0, 0)], m.cov[(0, 0)], 1e-9));
            }
        }
        if check_smoothed {
            for (st, m) in &exact.smoothed[t] {
                assert!(close(s.weight(t, *st), m.weight, 1e-9), "smoothed weight {enc} {st:?} t={t}");
                if m.weight > 1e-12 {
                    let b = moments(s.mixture(t, *st)).unwrap();
                    assert!(close(b.mean[0], m.mean[0], 1e-8), "smoothed mean {enc} {st:?} t={t}");
                    assert!(close(b.cov[(0, 0)], m.cov[(0, 0)], 1e-8));
                }
            }
            let hm = s.steps[t].h_moments().unwrap();
            assert!(close(hm.mean[0], exact.smoothed_mean[t][0], 1e-8));
        }
    }
}

#[test]
fn asi_matches_enumeration() {
    for enc in ENCODINGS {
        for cond in [false, true] {
            check_against_oracle(enc, true, cond, true);
        }
    }
}

#[test]
fn dependent_uncollapsed_filter_matches_enumeration() {
    for enc in ENCODINGS {
        for cond in [false, true] {
            check_against_oracle(enc, false, cond, false);
        }
    }
}

#[test]
fn expectation_correction_regression_bounds() {
    let v = series(5);
    let regs = regimes();
    for enc in ENCODINGS {
        for asi in [true, false] {
            let exact = enumerate_switching(&chain(2), enc, &regs, &v, asi, true).unwrap();
            let p = SlgssmParams::from_lgssm(&regs, chain(2), enc).unwrap().asi(asi).collapse(Collapse::ToOne).condition_end(true);
            let (_, s) = filter_smooth(&p, &v).unwrap();
            let means = s.means().unwrap();
            let rms = (0..v.len()).map(|t| (means[t][0] - exact.smoothed_mean[t][0]).powi(2)).sum::<f64>() / v.len() as f64;
            assert!(rms.sqrt() < 0.05, "{enc} asi={asi}: rms {}", rms.sqrt());
            let sw = s.regimes();
            let worst = (0..v.len())
                .map(|t| {
                    let r1: f64 = exact.smoothed[t].iter().filter(|(k, _)| k.regime() == 1).map(|(_, m)| m.weight).sum();
                    (sw[t][1] - r1).abs()
                })
                .fold(0.0, f64::max);
            // Boundary weights are exact for increasing counts and count-duration states under ASI.
            let bound = if asi && enc != Encoding::Dec { 1e-10 } else { 0.1 };
            assert!(worst < bound, "{enc} asi={asi}: {worst}");
        }
    }
}

#[test]
fn count_duration_factorized_filter_matches_general() {
    let v = series(30);
    for cond in [false, true] {
        let p = SlgssmParams::from_lgssm(&regimes(), chain(6), Encoding::Cd).unwrap().condition_end(cond);
        let a = cd_filter(&p, &v).unwrap();
        let b = filter(&p, &v).unwrap();
        assert!(close(a.log_likelihood, b.log_likelihood, 1e-12));
        for t in 0..v.len() {
            for i in 0..a.space.len() {
                assert!((a.steps[t].weights[i] - b.steps[t].weights[i]).abs() < 1e-12, "t={t} {:?}", a.space.state(i));
                if let (Some(x), Some(y)) = (a.steps[t].conditional(i), b.steps[t].conditional(i)) {
                    assert!((x.mean[0] - y.mean[0]).abs() < 1e-12 && (x.cov[(0, 0)] - y.cov[(0, 0)]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn count_duration_beliefs_depend_on_elapsed_count_only() {
    let v = series(20);
    let p = SlgssmParams::from_lgssm(&regimes(), chain(5), Encoding::Cd).unwrap();
    let f = cd_filter(&p, &v).unwrap();
    let t = 12;
    for s in 0..2 {
        for k in 0..5 {
            let beliefs: Vec<_> = (k + 1..=5).filter_map(|d| f.steps[t].conditional(f.space.index(SigmaState::Cd { s, d, c: d - k }).unwrap())).collect();
            for b in &beliefs[1..] {
                assert_eq!(b, &beliefs[0]);
            }
        }
    }
}

#[test]
fn encodings_agree_under_independence() {
    let v = series(40);
    let mut results = Vec::new();
    for enc in ENCODINGS {
        let p = SlgssmParams::from_lgssm(&regimes(), chain(6), enc).unwrap().condition_end(true);
        results.push(filter_smooth(&p, &v).unwrap());
    }
    let (dec, inc, cd) = (&results[0].1, &results[1].1, &results[2].1);
    for t in 0..v.len() {
        let (rd, ri, rc) = (dec.regimes(), inc.regimes(), cd.regimes());
        for s in 0..2 {
            assert!((rd[t][s] - ri[t][s]).abs() < 1e-8 && (rc[t][s] - ri[t][s]).abs() < 1e-8, "t={t}");
        }
        let (hd, hi, hc) = (dec.steps[t].h_moments().unwrap(), inc.steps[t].h_moments().unwrap(), cd.steps[t].h_moments().unwrap());
        assert!((hd.mean[0] - hi.mean[0]).abs() < 1e-8 && (hc.mean[0] - hi.mean[0]).abs() < 1e-8);
        assert!((hc.cov[(0, 0)] - hi.cov[(0, 0)]).abs() < 1e-8);
        // Increasing count c matches count-duration states with d - c + 1 = c.
        for s in 0..2 {
            for c in 1..=6 {
                let gi = inc.weight(t, SigmaState::Inc { s, c });
                let gc: f64 = (c..=6).map(|d| cd.weight(t, SigmaState::Cd { s, d, c: d - c + 1 })).sum();
                assert!((gi - gc).abs() < 1e-8);
            }
        }
    }
    assert!(close(results[0].0.log_likelihood, results[1].0.log_likelihood, 1e-10));
    assert!(close(results[2].0.log_likelihood, results[1].0.log_likelihood, 1e-10));
}

#[test]
fn component_counts_follow_the_encoding() {
    let cap = 4;
    let v = series(20);
    let count = |post: &SwitchPosterior, s: usize, c: usize, enc: Encoding| -> usize {
        (0..post.len())
            .map(|t| match enc {
                Encoding::Cd => (c..=cap).map(|d| post.mixture(t, SigmaState::Cd { s, d, c: d - c + 1 }).len()).max().unwrap(),
                Encoding::Dec => post.mixture(t, SigmaState::Dec { s, c }).len(),
                Encoding::Inc => post.mixture(t, SigmaState::Inc { s, c }).len(),
            })
            .max()
            .unwrap()
    };
    for enc in ENCODINGS {
        let p = SlgssmParams::from_lgssm(&regimes(), chain(cap), enc).unwrap();
        let (f, s) = filter_smooth(&p, &v).unwrap();
        for c in 1..=cap {
            let (fc, sc) = (count(&f, 0, c, enc), count(&s, 0, c, enc));
            match enc {
                Encoding::Dec => assert_eq!((fc, sc), (cap - c + 1, cap - c + 1), "dec c={c}"),
                Encoding::Inc => assert_eq!((fc, sc), (1, cap - c + 1), "inc c={c}"),
                Encoding::Cd => assert_eq!((fc, sc), (1, 1), "cd"),
            }
        }
    }
}

#[test]
fn increasing_count_beliefs_restart_at_segment_start() {
    let v = series(15);
    let p = SlgssmParams::from_lgssm(&regimes(), chain(5), Encoding::Inc).unwrap();
    let f = inc_filter(&p, &v).unwrap();
    for (t, s, c) in [(10, 0, 3), (7, 1, 5), (4, 1, 1)] {
        let direct = lgssm::filter(&regimes()[s], &v[t + 1 - c..=t]).unwrap();
        let b = moments(f.mixture(t, SigmaState::Inc { s, c })).unwrap();
        assert!((b.mean[0] - direct.filtered[c - 1].mean[0]).abs() < 1e-12);
        assert!((b.cov[(0, 0)] - direct.filtered[c - 1].cov[(0, 0)]).abs() < 1e-12);
    }
}

#[test]
fn observation_free_model_matches_duration_smoother() {
    let v = series(25);
    let r = [0.5, 2.0];
    let regs: Vec<LgssmParams> = r.iter().map(|&x| LgssmParams::scalar(0.7, 0.3, 0.0, x, 0.0, 1.0).unwrap()).collect();
    let p = SlgssmParams::from_lgssm(&regs, chain(5), Encoding::Inc).unwrap().asi(false).condition_end(true);
    let (_, s) = filter_smooth(&p, &v).unwrap();
    let flat: Vec<f64> = v.iter().map(|x| x[0]).collect();
    let sds: Vec<f64> = r.iter().map(|x: &f64| x.sqrt()).collect();
    let em = GaussianEmission { means: &[0.0, 0.0], sds: &sds, v: &flat };
    let ed = inc::forward_backward(&em, &chain(5), EdOptions::default().condition_end(true)).unwrap();
    let (a, b) = (s.regimes(), ed.smoothed_regimes());
    for t in 0..v.len() {
        assert!((a[t][0] - b[t][0]).abs() < 1e-10, "t={t}");
    }
}

#[test]
fn mixture_mean_matches_sampled_posterior() {
    let v = series(5);
    let regs = regimes();
    let exact = enumerate_switching(&chain(2), Encoding::Dec, &regs, &v, true, false).unwrap();
    let p = SlgssmParams::from_lgssm(&regs, chain(2), Encoding::Cd).unwrap().condition_end(false);
    let s = cd_smooth(&p, &v).unwrap();
    let dist = WeightedIndex::new(exact.paths.iter().map(|x| x.1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let t = 2;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let bg = &exact.paths[dist.sample(&mut rng)].2;
            let z: f64 = StandardNormal.sample(&mut rng);
            bg.means[t][0] + bg.covs[t][(0, 0)].sqrt() * z
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let m = s.steps[t].h_moments().unwrap().mean[0];
    assert!((m - mean).abs() < 3.0 * (var / n as f64).sqrt(), "{m} vs {mean}");
}

#[test]
fn collapsed_independent_smoother_stays_near_exact() {
    let v = series(40);
    let exact = cd_smooth(&SlgssmParams::from_lgssm(&regimes(), chain(5), Encoding::Cd).unwrap(), &v).unwrap();
    let em = exact.means().unwrap();
    for enc in ENCODINGS {
        let p = SlgssmParams::from_lgssm(&regimes(), chain(5), enc).unwrap().collapse(Collapse::ToOne);
        let (_, s) = filter_smooth(&p, &v).unwrap();
        let sm = s.means().unwrap();
        let rms = (em.iter().zip(&sm).map(|(a, b)| (a[0] - b[0]).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!(rms < 0.05, "{enc}: {rms}");
    }
}

#[test]
fn full_pruning_budget_is_exact() {
    let v = series(30);
    let p = SlgssmParams::from_lgssm(&regimes(), chain(6), Encoding::Inc).unwrap();
    let pruned = p.clone().prune(Some(PruneConfig::keep_top(6).unwrap()));
    let (a, b) = (filter_smooth(&p, &v).unwrap(), filter_smooth(&pruned, &v).unwrap());
    assert_eq!(a.0.log_likelihood, b.0.log_likelihood);
    for t in 0..v.len() {
        assert_eq!(a.1.steps[t].weights, b.1.steps[t].weights);
    }
}

#[test]
fn rejects_bad_configurations() {
    let v = series(5);
    let p = SlgssmParams::from_lgssm(&regimes(), chain(3), Encoding::Dec).unwrap().collapse(Collapse::ToM(0));
    assert!(filter(&p, &v).is_err());
    let bad: Vec<DVector<f64>> = vec![DVector::zeros(2); 3];
    let p = SlgssmParams::from_lgssm(&regimes(), chain(3), Encoding::Dec).unwrap();
    assert!(filter(&p, &bad).is_err());
    assert!(inc_filter(&p, &v).is_err());
    assert!(SlgssmParams::from_lgssm(&regimes()[..1], chain(3), Encoding::Dec).is_err());
    assert_eq!("to-3".parse::<Collapse>().unwrap(), Collapse::ToM(3));
}
