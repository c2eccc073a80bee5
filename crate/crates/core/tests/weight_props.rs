use std::collections::BTreeMap;

use icipw::baseline::{
    adaptive_trim_criterion, invert_weights, platt_calibrate, trim_adaptive, trim_fixed, trim_grid,
};
use icipw::calibration::{calibrate_binary, calibrate_weights};
use icipw::data::{assign_folds, Dataset, FoldAssignment, ScoreTable};
use icipw::diagnostics::{balance_report, chi2_cal_error_oracle, weight_mse_oracle};
use icipw::estimators::{aipw_ate, ipw_ate, tmle_ate};
use icipw::nuisance::{fit_propensity_crossfit, PotentialOutcomes};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random binary problem; scores are rounded to `grid` steps so that ties
/// occur. Returns `None` when an arm is empty.
fn problem(n: usize, seed: u64, grid: f64) -> Option<(Dataset, ScoreTable)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi1: Vec<f64> = (0..n)
        .map(|_| ((rng.random::<f64>() / grid).round() * grid).clamp(0.0, 1.0))
        .collect();
    let a: Vec<u32> = pi1.iter().map(|&p| u32::from(rng.random::<f64>() < p)).collect();
    if !a.contains(&0) || !a.contains(&1) {
        return None;
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random()]).collect();
    let y = (0..n).map(|_| rng.random()).collect();
    let data = Dataset::from_rows(&rows, a, y).unwrap();
    let scores = ScoreTable::from_treated(assign_folds(n, n.min(5), seed).unwrap(), pi1).unwrap();
    Some((data, scores))
}

fn problem_strategy() -> impl Strategy<Value = (Dataset, ScoreTable)> {
    (4usize..300, any::<u64>(), prop_oneof![Just(1e-9), Just(0.05), Just(0.25)])
        .prop_filter_map("both arms present", |(n, seed, grid)| problem(n, seed, grid))
}

proptest! {
    #[test]
    fn ic_weights_balance_on_every_level_set((data, scores) in problem_strategy(), level in 0u32..2) {
        let w = calibrate_weights(&data, &scores, level, 0.0).unwrap();
        let report = balance_report(&data, &w.alpha, level, Some(&w.truncated)).unwrap();
        prop_assert_eq!(report.rows.iter().map(|r| r.count).sum::<usize>() + report.excluded, data.n());
        prop_assert!(report.rows.iter().all(|r| r.own_arm > 0));
        prop_assert!(report.max_abs_deviation <= 1e-10, "{report:?}");

        // Identity h(alpha) = alpha, restricted to non-truncated rows.
        let n = data.n() as f64;
        let identity: f64 = (0..data.n())
            .filter(|&i| !w.truncated[i])
            .map(|i| {
                let own = f64::from(u8::from(data.treatment()[i] == level));
                w.alpha[i] * (own * w.alpha[i] - 1.0)
            })
            .sum::<f64>() / n;
        let scale = w.alpha.iter().fold(1.0f64, |m, &v| m.max(v * v));
        prop_assert!(identity.abs() <= 1e-10 * scale);
    }

    #[test]
    fn ic_weights_structure((data, scores) in problem_strategy(), min_seg in prop_oneof![Just(0.0), 1.0f64..20.0]) {
        let w = calibrate_weights(&data, &scores, 1, min_seg).unwrap();
        let pi = scores.get(1).unwrap();
        let cal = &w.calibrator;
        for i in 0..data.n() {
            prop_assert!(w.alpha[i].is_finite() && w.alpha[i] >= 1.0);
            let g = cal.propensity(pi[i]);
            if w.truncated[i] {
                prop_assert!((w.alpha[i] * cal.c() - 1.0).abs() <= 1e-15);
            } else {
                prop_assert!((w.alpha[i] * g - 1.0).abs() <= 1e-15);
            }
            if data.treatment()[i] == 1 {
                prop_assert!(!w.truncated[i]);
                prop_assert_eq!(w.alpha[i], cal.untruncated_weight(pi[i]));
            }
        }
        let mut order: Vec<usize> = (0..data.n()).collect();
        order.sort_by(|&i, &j| pi[i].total_cmp(&pi[j]));
        prop_assert!(order.windows(2).all(|p| w.alpha[p[0]] >= w.alpha[p[1]]));
    }

    #[test]
    fn binary_shortcut_equals_two_fits((data, scores) in problem_strategy()) {
        let (w1, w0) = calibrate_binary(&data, &scores, 0.0).unwrap();
        let s1 = calibrate_weights(&data, &scores, 1, 0.0).unwrap();
        let s0 = calibrate_weights(&data, &scores, 0, 0.0).unwrap();
        for i in 0..data.n() {
            prop_assert!((w1.alpha[i] - s1.alpha[i]).abs() <= 1e-12 * s1.alpha[i]);
            prop_assert!((w0.alpha[i] - s0.alpha[i]).abs() <= 1e-12 * s0.alpha[i]);
        }
    }

    #[test]
    fn baseline_weight_invariants((data, scores) in problem_strategy(), c in 0.001f64..0.5) {
        let pi1 = scores.get(1).unwrap();
        if pi1.iter().all(|&p| p > 0.0) {
            prop_assert_eq!(trim_fixed(&scores, 1, 0.0).unwrap(), invert_weights(&scores, 1).unwrap());
        }
        for level in [0, 1] {
            prop_assert!(trim_fixed(&scores, level, c).unwrap().iter().all(|&w| w >= 1.0));
        }
        let t = trim_adaptive(&data, &scores, 0.01).unwrap();
        let pi0 = scores.get(0).unwrap();
        for g in trim_grid(0.01).unwrap() {
            let v = adaptive_trim_criterion(data.treatment(), pi1, pi0, g);
            if v.is_finite() {
                prop_assert!(v >= t.criterion, "grid point {g} beats the chosen {}", t.spec.c);
            }
        }
    }

    #[test]
    fn platt_matches_arm_frequency((data, scores) in problem_strategy()) {
        let pi = scores.get(1).unwrap();
        // The score equation needs a finite MLE, which fails to exist when
        // the score separates the arms, even at a single tied value.
        let arm_range = |level: u32| {
            pi.iter()
                .zip(data.treatment())
                .filter(|(_, &a)| a == level)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&p, _)| (lo.min(p), hi.max(p)))
        };
        let ((lo1, hi1), (lo0, hi0)) = (arm_range(1), arm_range(0));
        prop_assume!(hi0 > lo1 && hi1 > lo0);
        let (model, w) = platt_calibrate(&data, &scores, 1, 1e-8).unwrap();
        let n = data.n() as f64;
        let mean_p = pi.iter().map(|&p| model.predict(p)).sum::<f64>() / n;
        let freq = data.arm_size(1) as f64 / n;
        prop_assert!((mean_p - freq).abs() <= 1e-8, "{mean_p} vs {freq}");
        prop_assert!(w.iter().all(|&v| v >= 1.0 && v.is_finite()));
    }

    #[test]
    fn aipw_noiseless_identity(seed in any::<u64>(), n in 4usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let mu = PotentialOutcomes {
            mu0: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            mu1: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let y: Vec<f64> = (0..n).map(|i| mu.at(i, a[i])).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let data = Dataset::from_rows(&rows, a, y).unwrap();
        let plug_in = (0..n).map(|i| mu.mu1[i] - mu.mu0[i]).sum::<f64>() / n as f64;
        let w1: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1e3)).collect();
        let w0: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1e3)).collect();
        let psi = aipw_ate(&data, &mu, &w1, &w0, None).unwrap().psi;
        prop_assert!((psi - plug_in).abs() <= 1e-12);
        let zero = aipw_ate(&data, &mu, &vec![0.0; n], &vec![0.0; n], None).unwrap();
        prop_assert!((zero.psi - plug_in).abs() <= 1e-12);
        prop_assert_eq!(aipw_ate(&data, &mu, &w1, &w0, None).unwrap().psi, psi);
    }

    #[test]
    fn tmle_score_vanishes((data, scores) in problem_strategy()) {
        let (w1, w0) = calibrate_binary(&data, &scores, 0.0).unwrap();
        let n = data.n();
        let mu = PotentialOutcomes { mu0: vec![0.4; n], mu1: vec![0.6; n] };
        let t = tmle_ate(&data, &mu, &w1.alpha, &w0.alpha).unwrap();
        prop_assert!(t.score.abs() <= 1e-8);
        prop_assert_eq!(tmle_ate(&data, &mu, &w1.alpha, &w0.alpha).unwrap(), t);
        let ipw = ipw_ate(&data, &w1.alpha, &w0.alpha, None).unwrap();
        prop_assert!(ipw.se >= 0.0 && ipw.ci_lower <= ipw.psi && ipw.psi <= ipw.ci_upper);
    }

    #[test]
    fn cal_error_ignores_group_labels(seed in any::<u64>(), n in 2usize..80, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..k).map(|j| 1.0 + j as f64).collect();
        let relabeled: Vec<f64> = (0..k).map(|j| 10.0 + (k - j) as f64 * 0.5).collect();
        let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let alpha: Vec<f64> = groups.iter().map(|&g| values[g]).collect();
        let base = chi2_cal_error_oracle(&alpha, &pi).unwrap();
        // Permuting rows leaves the error unchanged.
        let mut idx: Vec<usize> = (0..n).collect();
        idx.reverse();
        let a2: Vec<f64> = idx.iter().map(|&i| alpha[i]).collect();
        let p2: Vec<f64> = idx.iter().map(|&i| pi[i]).collect();
        prop_assert!((chi2_cal_error_oracle(&a2, &p2).unwrap() - base).abs() <= 1e-12);
        // Relabeling group identities keeps the partition; the plug-in
        // propensities per group are unchanged.
        let gamma = |a: &[f64]| {
            let mut s: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
            for (v, p) in a.iter().zip(&pi) {
                let e = s.entry(v.to_bits()).or_default();
                e.0 += p;
                e.1 += 1.0;
            }
            a.iter().map(|v| { let e = s[&v.to_bits()]; e.0 / e.1 }).collect::<Vec<_>>()
        };
        let alt: Vec<f64> = groups.iter().map(|&g| relabeled[g]).collect();
        prop_assert_eq!(gamma(&alpha), gamma(&alt));
    }

    #[test]
    fn exact_weights_have_zero_oracle_errors(pi in prop::collection::vec(0.01f64..=1.0, 1..50)) {
        let alpha: Vec<f64> = pi.iter().map(|p| 1.0 / p).collect();
        let a = vec![1u32; pi.len()];
        prop_assert_eq!(weight_mse_oracle(&alpha, &pi, &a, 1).unwrap(), 0.0);
        prop_assert!(chi2_cal_error_oracle(&alpha, &pi).unwrap() <= 1e-24);
    }
}

#[test]
fn propensity_scores_are_out_of_fold() {
    let (data, _) = problem(120, 3, 1e-9).unwrap();
    let folds = FoldAssignment::from_labels((0..120).map(|i| i % 4 + 1).collect()).unwrap();
    let base = fit_propensity_crossfit(&data, &folds, 1).unwrap();
    // Flipping labels inside fold 2 must leave fold 2's own scores untouched.
    let flipped: Vec<u32> = (0..120)
        .map(|i| if folds.fold_of()[i] == 2 { 1 - data.treatment()[i] } else { data.treatment()[i] })
        .collect();
    let rows: Vec<Vec<f64>> = (0..120).map(|i| data.row(i).to_vec()).collect();
    let other = Dataset::from_rows(&rows, flipped, data.outcome().to_vec()).unwrap();
    let moved = fit_propensity_crossfit(&other, &folds, 1).unwrap();
    let (p, q) = (base.get(1).unwrap(), moved.get(1).unwrap());
    for i in 0..120 {
        if folds.fold_of()[i] == 2 {
            assert_eq!(p[i], q[i]);
        } else {
            assert_ne!(p[i], q[i]);
        }
    }
}
