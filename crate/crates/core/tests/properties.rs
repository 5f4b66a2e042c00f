use d3s_core::advantage::{normalize_group, population_variance};
use d3s_core::metrics::{ema, pass_at_k};
use d3s_core::policy::{logprob_grad, PolicyParams, Token};
use d3s_core::rng::{stream, Purpose};
use d3s_core::schedule::ScheduleConfig;
use d3s_core::selector::{oracle_max_variance_subset, split_search};
use d3s_core::tasks::{make_modsum_suite, TaskInstance};
use d3s_core::token_filter::{token_budget, top_k_mask};
use d3s_core::trainer::generate_groups;
use proptest::prelude::*;

fn values(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![(-5.0f64..5.0), (0i32..3).prop_map(f64::from)],
        2..=max_len,
    )
}

proptest! {
    #[test]
    fn split_search_matches_enumeration(v in values(12), n_seed in 0usize..100) {
        let n = 2 + n_seed % (v.len() - 1);
        let split = split_search(&v, n).unwrap();
        let (_, best) = oracle_max_variance_subset(&v, n).unwrap();
        prop_assert!((split.variance - best).abs() <= 1e-12);
        prop_assert_eq!(split.chosen.len(), n);
        prop_assert_eq!(split.n_pos + split.n_neg, n);
        let mut idx = split.chosen.clone();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), n);
        let picked: Vec<f64> = split.chosen.iter().map(|&i| v[i]).collect();
        prop_assert!((population_variance(&picked) - split.variance).abs() <= 1e-12);
    }

    /// Some n-subset keeps at least the unbiased variance of the whole set,
    /// since leave-one-out unbiased variances average to the full one.
    #[test]
    fn best_subset_keeps_unbiased_variance(v in values(10), n_seed in 0usize..100) {
        prop_assume!(population_variance(&v) > 1e-6);
        let m = v.len();
        let n = 2 + n_seed % (m - 1);
        let full = population_variance(&v) * m as f64 / (m - 1) as f64;
        let best = split_search(&v, n).unwrap().variance * n as f64 / (n - 1) as f64;
        prop_assert!(best >= full * (1.0 - 1e-9));
    }

    #[test]
    fn normalized_groups_are_standardized(r in prop::collection::vec(0u8..2, 2..64)) {
        let r: Vec<f64> = r.into_iter().map(f64::from).collect();
        let n = normalize_group(&r).unwrap();
        let mean = n.advantages.iter().sum::<f64>() / r.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
        if n.degenerate {
            prop_assert!(n.advantages.iter().all(|&a| a == 0.0));
        } else {
            prop_assert!((population_variance(&n.advantages) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn token_mask_keeps_top_scores(
        scores in prop::collection::vec(prop::collection::vec(0.0f64..3.0, 1..12), 1..6),
        k in 0.01f64..=1.0,
    ) {
        let total: usize = scores.iter().map(Vec::len).sum();
        let mask = top_k_mask(&scores, k).unwrap();
        let want = token_budget(k, total);
        prop_assert_eq!(mask.kept_count, want);
        prop_assert!(want >= 1 && want <= total);
        prop_assert!(want as f64 >= k * total as f64 - 1e-9);
        let kept: Vec<f64> = scores.iter().flatten().zip(mask.masks.iter().flatten())
            .filter(|(_, &b)| b).map(|(&s, _)| s).collect();
        let dropped: Vec<f64> = scores.iter().flatten().zip(mask.masks.iter().flatten())
            .filter(|(_, &b)| !b).map(|(&s, _)| s).collect();
        prop_assert_eq!(kept.len(), want);
        let min_kept = kept.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(dropped.iter().all(|&d| d <= min_kept));
    }

    #[test]
    fn schedule_is_monotone(
        n_init in 1usize..16, dn in 0usize..32,
        k_init in 0.01f64..0.5, dk in 0.0f64..0.5,
        total in 1usize..400,
    ) {
        let s = ScheduleConfig {
            n_init, n_final: n_init + dn, k_init, k_final: (k_init + dk).min(1.0), total_steps: total,
        };
        let mut prev = s.at_progress(0).unwrap();
        prop_assert_eq!(prev, (s.n_init, s.k_init));
        for step in 1..=total {
            let cur = s.at_progress(step).unwrap();
            prop_assert!(cur.0 >= prev.0 && cur.1 >= prev.1);
            prev = cur;
        }
        prop_assert_eq!(prev, (s.n_final, s.k_final));
        prop_assert!(s.at_progress(total + 1).is_err());
    }

    #[test]
    fn logprob_gradient_matches_finite_differences(seed in 0u64..1000, tok in 0u32..6) {
        let mut rng = stream(seed, Purpose::Theory, &[77]);
        let p = PolicyParams::random(6, 2, 8, 2.0, &mut rng).unwrap();
        let history: Vec<Token> = vec![(seed % 6) as Token, tok];
        let g = logprob_grad(&p, &history, tok);
        let ctx = p.context_id(&history);
        prop_assert_eq!(g.context, ctx);
        let h = 1e-6;
        for j in 0..6 {
            let mut plus = p.clone();
            plus.row_mut(ctx)[j] += h;
            let mut minus = p.clone();
            minus.row_mut(ctx)[j] -= h;
            let fd = (plus.logprob_at(ctx, tok) - minus.logprob_at(ctx, tok)) / (2.0 * h);
            prop_assert!((fd - g.values[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn pass_at_k_is_monotone(n in 1usize..40, c_seed in 0usize..100, k_seed in 0usize..100) {
        let c = c_seed % (n + 1);
        let k = 1 + k_seed % n;
        let v = pass_at_k(n, c, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        if k < n {
            prop_assert!(pass_at_k(n, c, k + 1).unwrap() >= v);
        }
        if c < n {
            prop_assert!(pass_at_k(n, c + 1, k).unwrap() >= v);
        }
    }

    #[test]
    fn ema_stays_within_range(x in prop::collection::vec(-10.0f64..10.0, 1..50), alpha in 0.0f64..0.999) {
        let s = ema(&x, alpha).unwrap();
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }
}

#[test]
fn uniform_policy_success_rate_matches_exact_value() {
    // a response succeeds when its last digit equals the target. Under the
    // uniform policy each position is the end token (1/16), a non-digit (5/16)
    // or a digit (10/16); given at least one digit, the last one is uniform.
    let (v, m, max_len) = (16usize, 10usize, 16usize);
    let (p_end, p_other) = (1.0 / v as f64, (v - m - 1) as f64 / v as f64);
    let no_digit: f64 = (0..max_len)
        .map(|j| p_other.powi(j as i32) * p_end)
        .sum::<f64>()
        + p_other.powi(max_len as i32);
    let exact = (1.0 - no_digit) / m as f64;

    let suite = make_modsum_suite(m, v, 200, 0, 9).unwrap();
    let policy = PolicyParams::zeros(v, 2, max_len).unwrap();
    let instances: Vec<&TaskInstance> = suite.train.iter().collect();
    let groups = generate_groups(&policy, &instances, 100, 9, Purpose::EvalRollout, 0).unwrap();
    let rewards: Vec<f64> = groups.iter().flatten().map(|r| r.reward).collect();
    let n = rewards.len() as f64;
    let rate = rewards.iter().sum::<f64>() / n;
    let se = (exact * (1.0 - exact) / n).sqrt();
    assert!(
        (rate - exact).abs() < 3.0 * se,
        "empirical {rate} vs exact {exact} (se {se})"
    );
}
