use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sidrec::corpus::I2IPair;
use sidrec::evaluation::probe::probe_candidates;
use sidrec::evaluation::{
    bucket_metrics, emit_report, i2i_probe, latency_report, ndcg_at_k, parse_report, recall_at_k, report_json,
    split_metrics, ProbeResult, ProbeSection, RankerSection, ReportSections, RoutingSection, VariantRow,
};
use sidrec::planner::{CostTable, Difficulty, ToolCounts};
use sidrec::ranker::auc;
use sidrec::Error;

fn brute_rank(list: &[usize], gt: usize) -> Option<usize> {
    let mut r = None;
    for (i, &x) in list.iter().enumerate().rev() {
        if x == gt {
            r = Some(i + 1);
        }
    }
    r
}

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn metrics_match_brute_force_on_10k_fuzzed_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let n = rng.random_range(0..30);
        let list: Vec<usize> = (0..n).map(|_| rng.random_range(0..40)).collect();
        let gt = rng.random_range(0..40);
        let k = rng.random_range(1..35);
        let r = brute_rank(&list, gt).filter(|&r| r <= k);
        let want_recall = if r.is_some() { 1.0 } else { 0.0 };
        let want_ndcg = r.map_or(0.0, |r| 1.0 / (r as f64 + 1.0).ln() * 2f64.ln());
        assert_eq!(recall_at_k(&list, gt, k), want_recall);
        assert!((ndcg_at_k(&list, gt, k) - want_ndcg).abs() <= 1e-12);

        let m = rng.random_range(2..40);
        // coarse scores force ties
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0..8) as f64 / 4.0).collect();
        let mut labels: Vec<u8> = (0..m).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        assert!((auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs() <= 1e-12);
    }
}

#[test]
fn ndcg_at_rank_three_is_one_half() {
    for k in 3..20 {
        assert_eq!(ndcg_at_k(&[5, 6, 7, 8], 7, k), 0.5);
    }
    assert_eq!(ndcg_at_k(&[5, 6, 7, 8], 7, 2), 0.0);
}

#[test]
fn metrics_are_monotone_in_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let list: Vec<usize> = (0..20).map(|_| rng.random_range(0..30)).collect();
        let gt = rng.random_range(0..30);
        for k in 1..25 {
            assert!(recall_at_k(&list, gt, k) <= recall_at_k(&list, gt, k + 1));
            assert!(ndcg_at_k(&list, gt, k) <= ndcg_at_k(&list, gt, k + 1));
        }
    }
}

fn mix(fast: usize, slow: usize) -> Vec<ToolCounts> {
    let mut v = vec![
        ToolCounts {
            fast: 1,
            rank: 0,
            slow: 0
        };
        fast
    ];
    v.extend(vec![
        ToolCounts {
            fast: 0,
            rank: 0,
            slow: 1
        };
        slow
    ]);
    v
}

#[test]
fn latency_reconciles_with_the_cost_table() {
    let cost = CostTable::default();
    let r = latency_report(&mix(852, 148), &cost, None);
    assert!((r.mean_seconds - 0.6505).abs() <= 1e-3, "{}", r.mean_seconds);
    assert_eq!(latency_report(&mix(1000, 0), &cost, None).mean_seconds, 0.39);
    assert_eq!(latency_report(&mix(0, 1000), &cost, None).mean_seconds, 2.15);
    let slow = latency_report(&mix(0, 10), &cost, Some(0.39));
    assert!((slow.relative_cost - 2.15 / 0.39).abs() < 1e-12);
}

fn pairs(n: usize, n_items: usize, seed: u64) -> Vec<I2IPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let source = rng.random_range(0..n_items);
            let mut target = rng.random_range(0..n_items);
            while target == source {
                target = rng.random_range(0..n_items);
            }
            I2IPair {
                source,
                target,
                cooccurrence_count: 1,
            }
        })
        .collect()
}

#[test]
fn probe_oracle_and_random_scorers() {
    let ps = pairs(3000, 200, 1);
    // one target per source, so no distractor is also a true target
    let mut seen = std::collections::BTreeSet::new();
    let distinct: Vec<I2IPair> = ps.iter().filter(|p| seen.insert(p.source)).cloned().collect();
    let truth: BTreeMap<usize, usize> = distinct.iter().map(|p| (p.source, p.target)).collect();
    let mut oracle = |src: usize, cands: &[usize]| -> Vec<f64> {
        cands.iter().map(|&c| f64::from(u8::from(truth[&src] == c))).collect()
    };
    assert_eq!(i2i_probe(&distinct, 200, &mut oracle, 9, 5).unwrap().accuracy, 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut random = |_: usize, cands: &[usize]| -> Vec<f64> { cands.iter().map(|_| rng.random::<f64>()).collect() };
    let r = i2i_probe(&ps, 200, &mut random, 9, 5).unwrap();
    assert_eq!(r.trials, 3000);
    assert!((r.accuracy - 0.10).abs() <= 0.03, "{}", r.accuracy);
}

#[test]
fn distractor_sampling_is_seed_reproducible() {
    let ps = pairs(50, 100, 2);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ps.iter()
            .map(|p| probe_candidates(p, 100, 9, &mut rng))
            .collect::<Vec<_>>()
    };
    let a = draw(7);
    assert_eq!(a, draw(7));
    assert_ne!(a, draw(8));
    for (p, c) in ps.iter().zip(&a) {
        assert_eq!(c.len(), 10);
        assert_eq!(c.iter().filter(|&&x| x == p.target).count(), 1);
        assert!(!c.contains(&p.source));
        let mut s = c.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 10);
    }
}

fn sections() -> ReportSections {
    let ranks = [Some(1), None, Some(4), Some(20)];
    let buckets = [Difficulty::Easy, Difficulty::Hard, Difficulty::Medium, Difficulty::Easy];
    let m = split_metrics(&ranks);
    let cost = CostTable::default();
    let latency = latency_report(&mix(3, 1), &cost, None);
    ReportSections {
        retrieval: Some([("valid".to_string(), m.clone()), ("test".to_string(), m.clone())].into()),
        variants: Some(vec![VariantRow {
            variant: "adaptive".into(),
            recall10: m.recall10,
            ndcg10: m.ndcg10,
            relative_cost: 1.0,
        }]),
        buckets: Some(bucket_metrics(&ranks, &buckets)),
        latency: Some(latency.clone()),
        routing: Some(RoutingSection {
            users: 4,
            fast_fraction: 0.75,
            rank_fraction: 0.0,
            slow_fraction: 0.25,
            other_fraction: 0.0,
            invalid_fraction: 0.0,
            oracle_agreement: 0.5,
            confusion: RoutingSection::confusion_rows(&[[1, 0, 0, 0], [1, 0, 0, 0], [1, 0, 1, 0]]),
            mean_latency: latency.mean_seconds,
            mean_reward: 0.4,
            heuristic_threshold: Some(2),
            heuristic_oracle_agreement: 0.5,
            baseline_oracle_agreement: 0.25,
        }),
        ranker: Some(RankerSection { valid_auc: 0.8 }),
        probe: Some(ProbeSection {
            distractors: 9,
            scorers: [(
                "cosine".to_string(),
                ProbeResult {
                    trials: 10,
                    correct: 3,
                    accuracy: 0.3,
                },
            )]
            .into(),
            sid_overlap_level1: 0.3,
            sid_overlap_level12: 0.1,
        }),
    }
}

#[test]
fn report_round_trips_and_requires_every_section() {
    let r = emit_report(sections()).unwrap();
    let json = report_json(&r);
    assert_eq!(parse_report(&json).unwrap(), r);

    let mut s = sections();
    s.probe = None;
    assert!(matches!(emit_report(s), Err(Error::Schema(_))));

    let mut s = sections();
    s.ranker = Some(RankerSection { valid_auc: 1.5 });
    assert!(matches!(emit_report(s), Err(Error::Schema(_))));

    let tampered = json.replacen("\"ndcg10\"", "\"extra\": 1, \"ndcg10\"", 1);
    assert!(parse_report(&tampered).is_err());
}
