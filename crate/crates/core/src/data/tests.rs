use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn small_config(seed: u64, n: usize) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        n_users: 60,
        n_items: 200,
        n_queries: 40,
        n_impressions: n,
        ..GeneratorConfig::default()
    }
}

#[test]
fn relevance_examples() {
    assert_eq!(ground_truth_relevance("cat1 w1 w2", "cat1 w1 w2"), 1.0);
    assert_eq!(ground_truth_relevance("cat1", "cat1"), 1.0);
    assert_eq!(ground_truth_relevance("cat1 w1", "cat2 w2 w3"), 0.0);
    // Jaccard({w1, w2}, {w1, w3, w2, w4}) = 2 / 4
    assert_eq!(ground_truth_relevance("cat1 w1 w2", "cat1 w1 w3 w2 w4"), 0.75);
    assert_eq!(ground_truth_relevance("cat1", "cat1 w4"), 0.5);
    assert_eq!(ground_truth_relevance("", "cat1 w4"), 0.0);
    assert_eq!(ground_truth_relevance("cat1", ""), 0.0);
}

#[test]
fn rsl_boundaries() {
    let t = &DEFAULT_RSL_THRESHOLDS;
    assert_eq!(assign_rsl(0.0, t).unwrap(), 1);
    assert_eq!(assign_rsl(0.2499, t).unwrap(), 1);
    assert_eq!(assign_rsl(0.25, t).unwrap(), 2);
    assert_eq!(assign_rsl(0.5, t).unwrap(), 3);
    assert_eq!(assign_rsl(0.75, t).unwrap(), 4);
    assert_eq!(assign_rsl(1.0, t).unwrap(), 4);
    for bad in [-0.1, 1.01, f64::NAN] {
        assert!(matches!(assign_rsl(bad, t), Err(Error::Validation(_))));
    }
}

#[test]
fn click_model_examples() {
    let m = ClickModel::default();
    let p = m.probability(0.4, 0.5, 0.5);
    assert!((p - 1.0 / (1.0 + 1f64.exp())).abs() < 1e-15);
    assert!((p - 0.2689).abs() < 1e-4);
    // sensitivity 0 or w_relevance 0 removes the relevance term
    assert_eq!(m.probability(0.0, 0.7, 0.1), m.probability(0.0, 0.7, 0.9));
    let flat = ClickModel {
        w_relevance: 0.0,
        ..m
    };
    assert_eq!(flat.probability(0.9, 0.7, 0.1), flat.probability(0.9, 0.7, 0.9));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, p2) = simulate_click(0.4, 0.5, 0.5, &m, &mut rng);
    assert_eq!(p2, p);
}

#[test]
fn flags_follow_tokens() {
    assert!(category_match("cat1 w1", "Cat1 w9"));
    assert!(!category_match("cat1", "cat2 w1"));
    assert!(!category_match("", "cat2"));
    assert!(contains_query("cat1 w1", "cat1 w2 w1"));
    assert!(!contains_query("cat1 w1", "cat1 w2"));
    assert!(!contains_query("", "cat1 w2"));
}

#[test]
fn corpus_labels_and_flags_are_consistent() {
    let corpus = generate_corpus(&small_config(3, 3000)).unwrap();
    assert_eq!(corpus.samples.len(), 3000);
    assert_eq!(corpus.truth.len(), 3000);
    for (s, t) in corpus.samples.iter().zip(&corpus.truth) {
        let r = ground_truth_relevance(&s.query_text, &s.item_text);
        assert_eq!(r, t.relevance);
        assert_eq!(s.rsl, assign_rsl(r, &DEFAULT_RSL_THRESHOLDS).unwrap());
        assert_eq!(s.category_match, category_match(&s.query_text, &s.item_text));
        assert_eq!(s.contains_query, contains_query(&s.query_text, &s.item_text));
        assert!(s.history.len() <= MAX_HISTORY);
        assert!(s.history.iter().all(|h| !h.query.is_empty() && !h.item_text.is_empty()));
    }
    let levels: Vec<usize> = (1..=4)
        .map(|l| corpus.samples.iter().filter(|s| s.rsl == l).count())
        .collect();
    assert!(levels.iter().all(|&c| c > 0), "{levels:?}");
}

#[test]
fn history_is_most_recent_first_and_capped() {
    let cfg = GeneratorConfig {
        n_users: 3,
        max_history: 5,
        ..small_config(9, 2000)
    };
    let corpus = generate_corpus(&cfg).unwrap();
    // Replay requests: each block of candidates shares one snapshot, then
    // its clicks are prepended in display order.
    let mut expect: Vec<std::collections::VecDeque<HistoryEntry>> = vec![Default::default(); 3];
    for request in corpus.samples.chunks(cfg.candidates_per_request) {
        let user = request[0].user_id as usize;
        for s in request {
            assert_eq!(s.user_id as usize, user);
            assert_eq!(s.history, Vec::from(expect[user].clone()));
        }
        for s in request.iter().filter(|s| s.click) {
            expect[user].push_front(HistoryEntry {
                query: s.query_text.clone(),
                item_text: s.item_text.clone(),
            });
        }
        expect[user].truncate(5);
    }
    assert!(corpus.samples.iter().any(|s| s.history.len() == 5));
}

#[test]
fn click_rate_tracks_relevance_for_sensitive_users() {
    let corpus = generate_corpus(&small_config(5, 20_000)).unwrap();
    let ctr = |level: u8, s_min: f64| {
        let rows: Vec<bool> = corpus
            .samples
            .iter()
            .zip(&corpus.truth)
            .filter(|(s, t)| s.rsl == level && t.sensitivity > s_min)
            .map(|(s, _)| s.click)
            .collect();
        rows.iter().filter(|c| **c).count() as f64 / rows.len() as f64
    };
    assert!(ctr(4, 0.8) > ctr(1, 0.8));
    let by_level: Vec<f64> = (1..=4).map(|l| ctr(l, 0.5)).collect();
    for w in by_level.windows(2) {
        assert!(w[1] >= w[0], "{by_level:?}");
    }
}

#[test]
fn generator_rejects_bad_configs() {
    for cfg in [
        GeneratorConfig { n_impressions: 0, ..GeneratorConfig::default() },
        GeneratorConfig { rsl_thresholds: [0.5, 0.25, 0.75], ..GeneratorConfig::default() },
        GeneratorConfig { rsl_thresholds: [0.0, 0.25, 0.75], ..GeneratorConfig::default() },
        GeneratorConfig { max_history: 51, ..GeneratorConfig::default() },
        GeneratorConfig { rsl_mix: [0.0; 4], ..GeneratorConfig::default() },
    ] {
        assert!(matches!(generate_corpus(&cfg), Err(Error::Validation(_))), "{cfg:?}");
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&small_config(4, 1500)).unwrap();
    let path = dir.path().join("d.tsv");
    write_dataset(&path, &corpus.samples).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), corpus.samples);
    let gt = dir.path().join("g.tsv");
    write_ground_truth(&gt, &corpus.truth).unwrap();
    assert_eq!(read_ground_truth(&gt).unwrap(), corpus.truth);

    let empty = dir.path().join("e.tsv");
    write_dataset(&empty, &[]).unwrap();
    assert_eq!(
        std::fs::read_to_string(&empty).unwrap(),
        format!("{}\n", DATASET_COLUMNS.join("\t"))
    );
    assert!(read_dataset(&empty).unwrap().is_empty());
}

#[test]
fn full_history_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let history: Vec<HistoryEntry> = (0..MAX_HISTORY)
        .map(|k| HistoryEntry {
            query: format!("cat{} w{k}", k % 7),
            item_text: format!("cat{} w{k} w{}", k % 7, k + 1),
        })
        .collect();
    let s = Sample {
        user_id: 7,
        query_text: "cat1 w2".into(),
        item_id: 3,
        item_text: "cat1 w2 w5".into(),
        category_match: true,
        contains_query: true,
        rsl: 3,
        click: false,
        history,
    };
    let path = dir.path().join("h.tsv");
    write_dataset(&path, std::slice::from_ref(&s)).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, vec![s]);
    assert_eq!(back[0].history.len(), 50);
}

#[test]
fn malformed_lines_report_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let header = DATASET_COLUMNS.join("\t");
    let cases = [
        format!("{header}\n1\tq\t2\ti\t0\t0\t3\t1\t\n1\tq\t2\ti\t0\t0\t9\t1\t\n"),
        format!("{header}\n1\tq\t2\ti\t0\t0\t3\t1\t\n1\tq\t2\ti\t0\n"),
        format!("{header}\n1\tq\t2\ti\t0\t0\t3\t1\t\n1\tq\t2\ti\t0\t0\t3\t1\tnocaret\n"),
        format!("{header}\n1\tq\t2\ti\t0\t0\t3\t1\t\n1\tq\t2\ti\t2\t0\t3\t1\t\n"),
    ];
    for (k, text) in cases.iter().enumerate() {
        let path = dir.path().join(format!("bad{k}.tsv"));
        std::fs::write(&path, text).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3, "case {k}"),
            other => panic!("case {k}: {other:?}"),
        }
    }
    let path = dir.path().join("nohdr.tsv");
    std::fs::write(&path, "x\n").unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn writer_rejects_reserved_characters() {
    let dir = tempfile::tempdir().unwrap();
    let s = Sample {
        user_id: 0,
        query_text: "a;b".into(),
        item_id: 0,
        item_text: "c".into(),
        category_match: false,
        contains_query: false,
        rsl: 1,
        click: false,
        history: vec![],
    };
    assert!(matches!(
        write_dataset(dir.path().join("x.tsv"), &[s]),
        Err(Error::Validation(_))
    ));
}

#[test]
fn split_proportions() {
    let [a, b, c] = split_sequential(100_000);
    assert_eq!((a.len(), b.len(), c.len()), (78_000, 11_000, 11_000));
    let [a, b, c] = split_sequential(7);
    assert_eq!(a.len() + b.len() + c.len(), 7);
    assert_eq!((a.end, b.start, b.end, c.start), (5, 5, 5, 5));
}

#[test]
fn features_respect_cardinalities() {
    let corpus = generate_corpus(&small_config(2, 500)).unwrap();
    let schema = FeatureSchema::new(&FeatureConfig {
        user_buckets: 7,
        item_buckets: 11,
        category_buckets: 5,
        term_buckets: 13,
    })
    .unwrap();
    for s in &corpus.samples {
        let f = extract_features(s, &schema);
        assert_eq!(f.fields.len(), schema.len());
        for (ids, spec) in f.fields.iter().zip(&schema.fields) {
            assert!(ids.iter().all(|&i| i < spec.cardinality));
            if !spec.multi_hot {
                assert_eq!(ids.len(), 1);
            }
        }
        assert_eq!(f.fields[4].len(), s.query_text.split(' ').count() - 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_is_deterministic(seed in 0u64..1000) {
        let cfg = small_config(seed, 400);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.tsv");
        let b = dir.path().join("b.tsv");
        write_dataset(&a, &generate_corpus(&cfg).unwrap().samples).unwrap();
        write_dataset(&b, &generate_corpus(&cfg).unwrap().samples).unwrap();
        prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn relevance_is_bounded(q in "cat[0-3]( w[0-9]){0,3}", i in "cat[0-3]( w[0-9]){0,6}") {
        let r = ground_truth_relevance(&q, &i);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(r == 1.0, {
            let mut a: Vec<&str> = q.split(' ').collect();
            let mut b: Vec<&str> = i.split(' ').collect();
            a.sort(); a.dedup(); b.sort(); b.dedup();
            a == b
        });
    }
}
