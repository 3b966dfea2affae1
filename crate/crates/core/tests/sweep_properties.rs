//! Invariants of the evaluation machinery on synthetic records.

use beacon_core::backbone::CostProfile;
use beacon_core::criteria::{decide, percentile_threshold, ScoreKind};
use beacon_core::evalrun::{
    case_counts, criterion_scores, invocation_vs_recoverable, matched_rate_curve, oracle_curve,
    simulate_costs, sweep_scores, EvalRecord,
};
use beacon_core::iqgen::Split;
use beacon_core::tensornet::ProbVector;
use proptest::prelude::*;

fn record_strategy() -> impl Strategy<Value = (Vec<f64>, usize, usize, bool)> {
    (
        prop::collection::vec(0.001f64..10.0, 10),
        0usize..10,
        0usize..10,
        prop::bool::weighted(0.6),
    )
}

fn build(raw: &[(Vec<f64>, usize, usize, bool)]) -> Vec<EvalRecord> {
    raw.iter()
        .enumerate()
        .map(|(i, (w, label, other, fe_right))| {
            let s: f64 = w.iter().sum();
            let p_e = ProbVector::new(w.iter().map(|x| x / s).collect()).unwrap();
            let yhat_f = if *fe_right { *label } else { *other };
            EvalRecord {
                sample_id: i,
                split: Split::Test,
                snr_db: (i as i16 % 21) * 2 - 20,
                label: *label,
                yhat_e: p_e.argmax(),
                p_f: ProbVector::one_hot(10, yhat_f),
                p_e,
                yhat_f,
            }
        })
        .collect()
}

fn profile_strategy() -> impl Strategy<Value = CostProfile> {
    (1u64..1_000_000, 1u64..10_000, 1u64..1_000_000, 1u64..10_000, 0u64..5_000).prop_map(
        |(a, b, c, d, e)| CostProfile {
            macs_prefix: a,
            macs_ee_head: b,
            macs_suffix: c,
            macs_fe_head: d,
            macs_lbap: e,
        },
    )
}

const KINDS: [ScoreKind; 5] = [
    ScoreKind::Entropy,
    ScoreKind::Msp,
    ScoreKind::Margin,
    ScoreKind::Top3,
    ScoreKind::Gini,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sweep_invariants(
        raw in prop::collection::vec(record_strategy(), 1..60),
        val in prop::collection::vec(0.0f64..1.0, 1..60),
        profile in profile_strategy(),
        k in 0usize..5,
    ) {
        let recs = build(&raw);
        let kind = KINDS[k];
        let test = criterion_scores(kind, &recs, None).unwrap();
        let curve = sweep_scores(kind, &val, &test, &recs, &profile).unwrap();
        let n = recs.len();
        let ee = recs.iter().filter(|r| r.yhat_e == r.label).count() as f64 / n as f64;
        let fe = recs.iter().filter(|r| r.yhat_f == r.label).count() as f64 / n as f64;

        let top = curve.at(100.0).unwrap();
        let bottom = curve.at(0.0).unwrap();
        prop_assert_eq!(top.forwarded, 0);
        prop_assert_eq!(top.accuracy, ee);
        prop_assert_eq!(top.avg_macs, profile.exit_cost(false) as f64);
        prop_assert_eq!(bottom.forwarded, n);
        prop_assert_eq!(bottom.accuracy, fe);
        prop_assert_eq!(
            bottom.avg_macs,
            (profile.exit_cost(false) + profile.continuation_cost()) as f64
        );

        // points run q = 0..100; cost never grows as q rises and drops when fewer forward
        for w in curve.points.windows(2) {
            prop_assert!(w[1].forwarded <= w[0].forwarded);
            prop_assert!(w[1].avg_macs <= w[0].avg_macs);
            if w[1].forwarded < w[0].forwarded {
                prop_assert!(w[1].avg_macs < w[0].avg_macs);
            }
        }

        for p in &curve.points {
            let t = percentile_threshold(kind, &val, p.percentile).unwrap();
            let d: Vec<_> = test.iter().map(|&s| decide(s, &t)).collect();
            let costs = simulate_costs(&d, &profile, false);
            let total: u128 = costs.iter().map(|&c| c as u128).sum();
            prop_assert_eq!(p.avg_macs, total as f64 / n as f64);
        }

        let counts: Vec<usize> = curve.points.iter().map(|p| p.forwarded).collect();
        let oracle = oracle_curve(&recs, &profile, &counts).unwrap();
        for (o, p) in oracle.points.iter().zip(&curve.points) {
            prop_assert_eq!(o.forwarded, p.forwarded);
            prop_assert_eq!(o.avg_macs, p.avg_macs);
            prop_assert!(o.accuracy >= p.accuracy);
        }
    }

    #[test]
    fn partition_identities(raw in prop::collection::vec(record_strategy(), 0..80)) {
        let recs = build(&raw);
        let [c11, c01, c00, c10] = case_counts(&recs);
        prop_assert_eq!(c11 + c01 + c00 + c10, recs.len());
        prop_assert_eq!(c11 + c01, recs.iter().filter(|r| r.yhat_f == r.label).count());
        prop_assert_eq!(c11 + c10, recs.iter().filter(|r| r.yhat_e == r.label).count());
    }

    #[test]
    fn matched_rates_forward_exact_counts(
        raw in prop::collection::vec(record_strategy(), 1..60),
        profile in profile_strategy(),
    ) {
        let recs = build(&raw);
        let n = recs.len();
        let scores = criterion_scores(ScoreKind::Entropy, &recs, None).unwrap();
        let rates: Vec<u32> = (1..=20).map(|i| i * 5).collect();
        let c = matched_rate_curve("entropy", &scores, &recs, &profile, false, &rates).unwrap();
        for (p, &r) in c.points.iter().zip(&rates) {
            prop_assert_eq!(p.forwarded, (r as usize * n).div_ceil(100));
        }
        let inv = invocation_vs_recoverable(&scores, &recs, &rates).unwrap();
        let p_recov = case_counts(&recs)[1] as f64 / n as f64;
        let last = inv.last().unwrap();
        prop_assert_eq!(last.forwarded, n);
        prop_assert!((last.recoverable_rate - p_recov).abs() < 1e-12);
    }
}
