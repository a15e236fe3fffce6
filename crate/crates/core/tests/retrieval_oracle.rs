mod common;

use advpatch::evalkit::{attack_success_rate, average_precision, retrieval_metrics, Label, RetrievalProtocol};
use advpatch::embedders::Embedding;
use advpatch::Error;
use proptest::prelude::*;

use common::{brute_force_retrieval, random_retrieval_set};

fn protocol(cross_camera: bool, junk: bool) -> RetrievalProtocol {
    RetrievalProtocol { cross_camera_filter: cross_camera, junk_filter: junk, ..Default::default() }
}

#[test]
fn matches_brute_force_on_random_sets() {
    let mut compared = 0;
    for seed in 0..200u64 {
        let (q, ql, g, gl) = random_retrieval_set(seed);
        for (cc, junk) in [(true, true), (false, false), (true, false)] {
            let expected = brute_force_retrieval(&q, &ql, &g, &gl, cc, junk);
            match retrieval_metrics(&q, &ql, &g, &gl, &protocol(cc, junk)) {
                Ok(m) => {
                    let (map, r1, r10, n) = expected.expect("oracle evaluated no query");
                    assert_eq!(m.num_queries, n, "seed {seed}");
                    assert!((m.map - map).abs() < 1e-9, "seed {seed}: {} vs {map}", m.map);
                    assert!((m.rank1 - r1).abs() < 1e-9, "seed {seed}");
                    assert!((m.rank10 - r10).abs() < 1e-9, "seed {seed}");
                    compared += 1;
                }
                Err(Error::UndefinedQuery(_)) => assert!(expected.is_none(), "seed {seed}"),
                Err(e) => panic!("seed {seed}: {e}"),
            }
        }
    }
    assert!(compared > 400);
}

#[test]
fn average_precision_examples() {
    assert_eq!(average_precision(&[true, false, false]).unwrap(), 1.0);
    assert!((average_precision(&[false, true]).unwrap() - 0.5).abs() < 1e-12);
    // hits at ranks 1 and 3: (1/1 + 2/3) / 2
    assert!((average_precision(&[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(average_precision(&[false, false]).unwrap(), 0.0);
    assert!(matches!(average_precision(&[]), Err(Error::UndefinedQuery(_))));
}

#[test]
fn same_camera_matches_are_ignored() {
    let q = vec![vec![1.0, 0.0]];
    let ql = vec![Label { identity: 3, camera: 1 }];
    let g = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]];
    let gl = vec![
        Label { identity: 3, camera: 1 },
        Label { identity: 5, camera: 2 },
        Label { identity: 3, camera: 2 },
    ];
    let m = retrieval_metrics(&q, &ql, &g, &gl, &RetrievalProtocol::default()).unwrap();
    assert!((m.map - 0.5).abs() < 1e-12);
    assert_eq!(m.rank1, 0.0);
    assert_eq!(m.rank10, 1.0);
}

#[test]
fn asr_counts_strictly_above_threshold() {
    // cosine exactly 0.5: dot 1 over sqrt(2 * 2)
    let t = Embedding::new(vec![1.0, 1.0, 0.0], "t");
    let at = Embedding::new(vec![1.0, 0.0, 1.0], "a");
    let above = Embedding::new(vec![1.0, 0.9, 0.1], "a");
    let asr = attack_success_rate(&[at.clone(), above], &[t.clone(), t.clone()], 0.5).unwrap();
    assert!((asr - 0.5).abs() < 1e-12);
    assert!(attack_success_rate(&[at], &[], 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gallery_permutation_invariance(seed in 0u64..10_000, rot in 0usize..50) {
        let (q, ql, g, gl) = random_retrieval_set(seed);
        let proto = RetrievalProtocol::default();
        let Ok(base) = retrieval_metrics(&q, &ql, &g, &gl, &proto) else { return Ok(()); };
        let k = rot % g.len();
        let mut g2 = g.clone();
        let mut gl2 = gl.clone();
        g2.rotate_left(k);
        gl2.rotate_left(k);
        let m = retrieval_metrics(&q, &ql, &g2, &gl2, &proto).unwrap();
        // continuous random embeddings: ties have probability zero
        prop_assert!((m.map - base.map).abs() < 1e-12);
        prop_assert!((m.rank1 - base.rank1).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_bounded(seed in 0u64..10_000) {
        let (q, ql, g, gl) = random_retrieval_set(seed);
        if let Ok(m) = retrieval_metrics(&q, &ql, &g, &gl, &RetrievalProtocol::default()) {
            prop_assert!((0.0..=1.0).contains(&m.map));
            prop_assert!(m.rank1 <= m.rank10 + 1e-12);
            prop_assert!(m.rank10 <= 1.0);
        }
    }

    #[test]
    fn ap_bounded_and_perfect_when_sorted(rel in proptest::collection::vec(any::<bool>(), 1..40)) {
        let ap = average_precision(&rel).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        let mut sorted = rel.clone();
        sorted.sort_by(|a, b| b.cmp(a));
        let best = average_precision(&sorted).unwrap();
        prop_assert!(best >= ap - 1e-12);
        if rel.contains(&true) {
            prop_assert!((best - 1.0).abs() < 1e-12);
        }
    }
}
