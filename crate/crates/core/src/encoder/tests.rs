use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{l2_norm, Tensor};
use crate::Error;

fn small() -> TextEncoder {
    TextEncoder::new(EncoderConfig {
        vocab_size: 97,
        raw_dim: 16,
        dim: 8,
        seed: 3,
    })
    .unwrap()
}

const WORDS: [&str; 12] = [
    "red", "blue", "green", "shoe", "phone", "case", "lamp", "desk", "cable", "mug", "sock", "bag",
];

fn phrase(rng: &mut ChaCha8Rng, n: usize) -> Vec<&'static str> {
    let mut out: Vec<&str> = Vec::new();
    while out.len() < n {
        let w = WORDS[rng.random_range(0..WORDS.len())];
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

/// Pairs labelled related iff query and item share a word, balanced.
fn overlap_corpus(seed: u64, n: usize) -> Vec<(String, String, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let (nq, ni) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let q = phrase(&mut rng, nq);
        let i = phrase(&mut rng, ni);
        let related = q.iter().any(|w| i.contains(w));
        let want = out.len() % 2 == 0;
        if related == want {
            out.push((q.join(" "), i.join(" "), related));
        }
    }
    out
}

fn train_cfg(epochs: usize) -> EncoderTrainConfig {
    EncoderTrainConfig {
        epochs,
        batch_size: 16,
        lr: 0.5,
        finetune_lr_factor: 0.1,
        seed: 11,
    }
}

#[test]
fn tokenize_folds_case_and_handles_empty() {
    assert_eq!(tokenize("Mobile Phone", 4096), tokenize("mobile phone", 4096));
    assert!(tokenize("", 4096).is_empty());
    assert!(tokenize("   ", 4096).is_empty());
    let ids = tokenize("a b c", 4096);
    assert_eq!(ids.len(), 3);
    assert!(ids.iter().all(|t| (t.0 as usize) < 4096));
    assert_eq!(ids, tokenize("a b c", 4096));
    assert_eq!(ids[0], TokenId((crate::stable_hash("a") % 4096) as u32));
}

#[test]
fn encodings_are_unit_norm_and_deterministic() {
    let enc = small();
    for text in ["", "red shoe", "a", "Phone CASE blue"] {
        let a = enc.encode_text(text).unwrap();
        assert_eq!(a.len(), 8);
        assert!((l2_norm(&a) - 1.0).abs() < 1e-9);
        assert_eq!(a, enc.encode_text(text).unwrap());
    }
    let p = enc.encode_pair("a", "a").unwrap();
    assert!((l2_norm(&p) - 1.0).abs() < 1e-9);
    assert_eq!(p, enc.encode_pair("a", "a").unwrap());
}

#[test]
fn empty_text_pools_the_cls_row() {
    let enc = small();
    assert_eq!(enc.text_bag(""), vec![enc.cls_id()]);
    assert_eq!(
        enc.encode_text("").unwrap(),
        enc.encode_bags(vec![vec![97]]).unwrap().into_data()
    );
}

#[test]
fn pair_bag_layout() {
    let enc = small();
    let q = enc.tokenize("red shoe");
    let i = enc.tokenize("lamp");
    let bag = enc.pair_bag("red shoe", "lamp");
    let expect = vec![97, q[0].0 as usize, q[1].0 as usize, 98, i[0].0 as usize, 98];
    assert_eq!(bag, expect);
}

#[test]
fn batched_encoding_matches_single() {
    let enc = small();
    let texts = ["red", "blue shoe", "", "desk lamp cable"];
    let batch = enc
        .encode_bags(texts.iter().map(|t| enc.text_bag(t)).collect())
        .unwrap();
    for (r, t) in texts.iter().enumerate() {
        assert_eq!(batch.row(r), enc.encode_text(t).unwrap().as_slice());
    }
}

/// Two-dimensional parameters traced by hand.
fn tiny() -> TextEncoder {
    let mut enc = TextEncoder::new(EncoderConfig {
        vocab_size: 3,
        raw_dim: 2,
        dim: 2,
        seed: 0,
    })
    .unwrap();
    let set = |enc: &mut TextEncoder, name: &str, shape: &[usize], v: &[f64]| {
        let id = enc.store().require(name).unwrap();
        *enc.store_mut().value_mut(id) = Tensor::new(shape.to_vec(), v.to_vec()).unwrap();
    };
    // rows: tokens 0..3, CLS, SEP
    set(&mut enc, "encoder.table", &[5, 2], &[1.0, 0.0, 0.0, 2.0, -1.0, 1.0, 2.0, 2.0, 0.0, -2.0]);
    set(&mut enc, "encoder.mlp.0.w", &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    set(&mut enc, "encoder.mlp.0.b", &[2], &[0.0, 0.0]);
    set(&mut enc, "encoder.mlp.1.w", &[2, 2], &[1.0, 1.0, 1.0, -1.0]);
    set(&mut enc, "encoder.mlp.1.b", &[2], &[0.0, 1.0]);
    set(&mut enc, "encoder.mlp.2.w", &[2, 2], &[2.0, 0.0, 1.0, 1.0]);
    set(&mut enc, "encoder.mlp.2.b", &[2], &[0.0, -1.0]);
    enc
}

/// relu(relu(x W0^T + b0) W1^T + b1) W2^T + b2, then normalised.
fn hand_forward(x: [f64; 2]) -> Vec<f64> {
    let h0 = [x[0].max(0.0), x[1].max(0.0)];
    let h1 = [(h0[0] + h0[1]).max(0.0), (h0[0] - h0[1] + 1.0).max(0.0)];
    let out = [2.0 * h1[0], h1[0] + h1[1] - 1.0];
    let n = (out[0] * out[0] + out[1] * out[1]).sqrt();
    vec![out[0] / n, out[1] / n]
}

#[test]
fn single_token_hand_trace() {
    let enc = tiny();
    let bag = vec![0usize];
    let got = enc.encode_bags(vec![bag]).unwrap().into_data();
    // row 0 = (1, 0): h0 = (1, 0), h1 = (1, 2), out = (2, 2)
    let s = 1.0 / 2f64.sqrt();
    assert!((got[0] - s).abs() < 1e-15 && (got[1] - s).abs() < 1e-15);
    assert_eq!(got, hand_forward([1.0, 0.0]));
}

#[test]
fn pair_hand_trace() {
    let enc = tiny();
    // [CLS, 0, SEP, 1, SEP] pools rows (2,2), (1,0), (0,-2), (0,2), (0,-2)
    let pooled = [3.0 / 5.0, 0.0];
    let got = enc.encode_bags(vec![vec![3, 0, 4, 1, 4]]).unwrap().into_data();
    let expect = hand_forward(pooled);
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() < 1e-15, "{got:?} vs {expect:?}");
    }
}

#[test]
fn pretrain_separates_overlap_toy_set() {
    let train = overlap_corpus(1, 400);
    let held: Vec<(String, String, bool)> = overlap_corpus(2, 200);
    let mut enc = TextEncoder::new(EncoderConfig {
        vocab_size: 97,
        raw_dim: 64,
        dim: 32,
        seed: 3,
    })
    .unwrap();
    let losses = pretrain_encoder(&mut enc, &train, &train_cfg(80)).unwrap();
    let pairs: Vec<(String, String)> = held.iter().map(|(q, i, _)| (q.clone(), i.clone())).collect();
    let logits = relatedness_logits(&enc, &pairs).unwrap();
    let correct = logits
        .iter()
        .zip(&held)
        .filter(|(z, p)| (**z > 0.0) == p.2)
        .count();
    let acc = correct as f64 / held.len() as f64;
    assert!(acc > 0.9, "held-out accuracy {acc}, losses {losses:?}");

    let ma: Vec<f64> = losses[..10]
        .windows(5)
        .map(|w| w.iter().sum::<f64>() / 5.0)
        .collect();
    for w in ma.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "moving average rose: {ma:?}");
    }
}

#[test]
fn pretrain_edge_cases() {
    let mut enc = small();
    let before = enc.clone();
    let data = overlap_corpus(1, 20);
    pretrain_encoder(&mut enc, &data, &train_cfg(0)).unwrap();
    assert_eq!(enc, before);

    let one_class: Vec<_> = data.iter().filter(|p| p.2).cloned().collect();
    assert!(matches!(
        pretrain_encoder(&mut enc, &one_class, &train_cfg(1)),
        Err(Error::Training(_))
    ));
    assert!(matches!(
        pretrain_encoder(&mut enc, &[], &train_cfg(1)),
        Err(Error::Precondition(_))
    ));
}

/// Label is the vocabulary group both words are drawn from.
fn graded_corpus(seed: u64, n: usize) -> Vec<(String, String, u8)> {
    let groups = [["red", "blue", "green"], ["shoe", "sock", "bag"], ["phone", "case", "cable"], ["lamp", "desk", "mug"]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let label = rng.random_range(1..=4u8);
            let g = groups[label as usize - 1];
            let q = g[rng.random_range(0..3)];
            let i = g[rng.random_range(0..3)];
            (q.to_string(), i.to_string(), label)
        })
        .collect()
}

#[test]
fn finetune_beats_uniform_and_reduces_loss() {
    let train = graded_corpus(5, 300);
    let held = graded_corpus(6, 200);
    let mut enc = small();
    let cfg = EncoderTrainConfig {
        finetune_lr_factor: 1.0,
        ..train_cfg(50)
    };
    let losses = finetune_encoder(&mut enc, &train, &cfg).unwrap();
    assert!(losses[49] < losses[0], "{losses:?}");
    let pairs: Vec<(String, String)> = held.iter().map(|(q, i, _)| (q.clone(), i.clone())).collect();
    let pred = predict_relevance_class(&enc, &pairs).unwrap();
    let acc = pred
        .iter()
        .zip(&held)
        .filter(|(p, h)| **p == h.2 as usize)
        .count() as f64
        / held.len() as f64;
    assert!(acc > 0.25, "accuracy {acc}");
}

#[test]
fn finetune_edge_cases() {
    let mut enc = small();
    let before = enc.clone();
    assert!(finetune_encoder(&mut enc, &[], &train_cfg(3)).unwrap().is_empty());
    assert_eq!(enc, before);

    let zero = EncoderTrainConfig {
        finetune_lr_factor: 0.0,
        ..train_cfg(3)
    };
    finetune_encoder(&mut enc, &graded_corpus(1, 40), &zero).unwrap();
    assert_eq!(enc.to_checkpoint().params.snapshot(crate::numerics::LrGroup::Stage1), before.to_checkpoint().params.snapshot(crate::numerics::LrGroup::Stage1));

    for bad in [0u8, 5] {
        let data = vec![("a".to_string(), "b".to_string(), bad)];
        assert!(matches!(
            finetune_encoder(&mut enc, &data, &train_cfg(1)),
            Err(Error::Validation(_))
        ));
    }
}

#[test]
fn checkpoint_round_trip_and_id() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    let enc = small();
    enc.save(&path).unwrap();
    let back = TextEncoder::load(&path).unwrap();
    assert_eq!(back, enc);
    assert_eq!(back.checkpoint_id(), enc.checkpoint_id());
    assert_eq!(enc.checkpoint_id().len(), 16);
    let other = TextEncoder::new(EncoderConfig { seed: 4, ..*enc.config() }).unwrap();
    assert_ne!(other.checkpoint_id(), enc.checkpoint_id());
}

fn corpus_index(enc: &TextEncoder) -> EmbeddingIndex {
    let texts = ["red shoe", "blue phone case", "", "lamp", "red shoe"];
    let pairs = [("red", "red shoe"), ("lamp", "desk lamp"), ("red", "red shoe")];
    build_index(texts, pairs, enc).unwrap()
}

#[test]
fn index_lookup_matches_encoding() {
    let enc = small();
    let index = corpus_index(&enc);
    assert_eq!(index.num_texts(), 4);
    assert_eq!(index.num_pairs(), 2);
    assert_eq!(index.len(), 6);
    assert_eq!(index.dim(), 8);
    assert_eq!(index.checkpoint(), enc.checkpoint_id());
    for t in ["red shoe", "blue phone case", "", "lamp"] {
        assert_eq!(index.lookup_text(t, None).unwrap(), enc.encode_text(t).unwrap());
    }
    assert_eq!(
        index.lookup_pair("lamp", "desk lamp", None).unwrap(),
        enc.encode_pair("lamp", "desk lamp").unwrap()
    );
    assert_eq!(index.misses(), 0);
    index.check_unit_norm(1e-9).unwrap();
}

#[test]
fn index_misses_fall_back_or_fail() {
    let enc = small();
    let index = corpus_index(&enc);
    assert_eq!(index.lookup_text("mug", Some(&enc)).unwrap(), enc.encode_text("mug").unwrap());
    assert_eq!(index.misses(), 1);
    assert_eq!(
        index.lookup_pair("mug", "red mug", Some(&enc)).unwrap(),
        enc.encode_pair("mug", "red mug").unwrap()
    );
    assert_eq!(index.misses(), 2);
    assert!(matches!(index.lookup_text("mug", None), Err(Error::Lookup(_))));
    assert!(matches!(index.lookup_pair("a", "b", None), Err(Error::Lookup(_))));
}

#[test]
fn index_file_round_trip_and_rebuild() {
    let dir = tempfile::tempdir().unwrap();
    let enc = small();
    let a = dir.path().join("a.idx");
    let b = dir.path().join("b.idx");
    corpus_index(&enc).write(&a).unwrap();
    corpus_index(&enc).write(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let back = EmbeddingIndex::read(&a).unwrap();
    assert_eq!(back, corpus_index(&enc));
    assert_eq!(back.get_text(""), Some(enc.encode_text("").unwrap().as_slice()));

    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.starts_with(&format!("dim=8 checkpoint={}\n", enc.checkpoint_id())));
    assert!(text.contains("pair\tred\u{1}red shoe\t"));
}

#[test]
fn index_rejects_bad_files_and_keys() {
    let p = std::path::Path::new("x.idx");
    let err = EmbeddingIndex::parse("dim=2 checkpoint=x\ntext\ta\t1,2,3\n", p).unwrap_err();
    assert!(err.to_string().contains(":2"), "{err}");
    assert!(EmbeddingIndex::parse("dim=2\nblob\ta\t1,2\n", p).is_err());
    assert!(EmbeddingIndex::parse("dim=2\npair\tab\t1,2\n", p).is_err());
    let enc = small();
    assert!(matches!(build_index(["a\tb"], [], &enc), Err(Error::Validation(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn encoding_is_pure_and_unit_norm(text in "[a-zA-Z ]{0,24}", other in "[a-z ]{0,12}") {
        let enc = small();
        let a = enc.encode_text(&text).unwrap();
        prop_assert_eq!(&a, &enc.encode_text(&text).unwrap());
        prop_assert!((l2_norm(&a) - 1.0).abs() < 1e-9);
        let p = enc.encode_pair(&text, &other).unwrap();
        prop_assert_eq!(&p, &enc.encode_pair(&text, &other).unwrap());
        prop_assert!((l2_norm(&p) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn index_round_trip_is_exact(texts in proptest::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,2}", 1..8)) {
        let enc = small();
        let pairs: Vec<(&str, &str)> = texts.windows(2).map(|w| (w[0].as_str(), w[1].as_str())).collect();
        let index = build_index(texts.iter().map(String::as_str), pairs.iter().copied(), &enc).unwrap();
        let back = EmbeddingIndex::parse(&index.to_text(), std::path::Path::new("p")).unwrap();
        prop_assert!(back == index);
        for t in &texts {
            prop_assert_eq!(back.lookup_text(t, None).unwrap(), enc.encode_text(t).unwrap());
        }
    }
}
