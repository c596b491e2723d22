//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails. Run with `cargo test -p prectr-cli --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use prectr::data::{generate_corpus, read_dataset, FeatureConfig, GeneratorConfig, Sample};
use prectr::encoder::{build_index, EmbeddingIndex, EncoderConfig, TextEncoder};
use prectr::evaluation::{auc, auc_brute_force, rela_impr};
use prectr::model::{ModelConfig, ModelInputs, PrectrModel};
use prectr::numerics::{finite_difference_check, uniform_init, LrGroup, Sgd, Tape};
use prectr::training::{
    consistency_regularizer, pretrain_rsl, relevance_cross_entropy, risk_graph, stage2_lr, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{artifact_digests, ok, p, pipeline, read_metrics, train_variant, Pipeline};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Toy {
    samples: Vec<Sample>,
    encoder: TextEncoder,
    index: EmbeddingIndex,
}

fn toy(dim: usize, n: usize, seed: u64) -> Toy {
    let corpus = generate_corpus(&GeneratorConfig {
        seed,
        n_users: 12,
        n_items: 60,
        n_queries: 15,
        n_impressions: n,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let encoder = TextEncoder::new(EncoderConfig {
        vocab_size: 64,
        raw_dim: 8,
        dim,
        seed,
    })
    .unwrap();
    let s = &corpus.samples;
    let texts = s.iter().flat_map(|s| [s.query_text.as_str(), s.item_text.as_str()]);
    let pairs = s.iter().map(|s| (s.query_text.as_str(), s.item_text.as_str()));
    let index = build_index(texts, pairs, &encoder).unwrap();
    Toy {
        samples: corpus.samples,
        encoder,
        index,
    }
}

impl Toy {
    fn inputs(&self, model: &PrectrModel) -> ModelInputs {
        ModelInputs::prepare(&self.samples, model.schema(), &self.index, Some(&self.encoder)).unwrap()
    }
}

fn small_config(dim: usize) -> ModelConfig {
    ModelConfig {
        dim,
        field_dim: 3,
        base_hidden: vec![5],
        rsl_hidden: vec![4],
        incentive_hidden: vec![3],
        features: FeatureConfig {
            user_buckets: 5,
            item_buckets: 7,
            category_buckets: 3,
            term_buckets: 6,
        },
        ..ModelConfig::default()
    }
}

fn randomize(model: &mut PrectrModel, seed: u64, bound: f64) {
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let param = model.store().get(id);
        let t = uniform_init(seed, &param.name, param.value.shape(), bound);
        *model.store_mut().value_mut(id) = t;
    }
}

fn relaimpr_reproduction() -> Check {
    // (measured, base, printed percentage)
    let rows = [
        ("LR AUC", 0.6835, 0.7527, -27.36),
        ("DIN AUC", 0.7546, 0.7527, 0.76),
        ("PRECTR AUC", 0.7548, 0.7527, 0.82),
        ("PRECTR GAUC", 0.6882, 0.6845, 1.99),
    ];
    let mut worst: f64 = 0.0;
    for (name, m, b, printed) in rows {
        let got = rela_impr(m, b).map_err(e2s)?;
        let err = (got - printed).abs();
        ensure(err <= 0.05, format!("{name}: {got:.4}% vs {printed}%"))?;
        worst = worst.max(err);
    }
    Ok(format!("4 rows, max deviation {worst:.4} pp (tolerance 0.05)"))
}

fn gradient_correctness() -> Check {
    let w = toy(8, 200, 6);
    let mut model = PrectrModel::new(small_config(8)).map_err(e2s)?;
    randomize(&mut model, 11, 0.5);
    let inputs = w.inputs(&model);
    let with_history = |r: &usize| !inputs.samples[*r].history.is_empty();
    let mut rows: Vec<usize> = (0..inputs.len()).filter(with_history).take(3).collect();
    rows.extend((0..inputs.len()).filter(|r| !with_history(r)).take(1));
    ensure(rows.len() == 4, "toy corpus lacks a mixed 4-sample batch")?;
    let cfg = TrainConfig::default();
    ensure(cfg.effective_gamma() > 0.0, "regularizer inactive")?;
    let m = model.clone();
    let report = finite_difference_check(model.store_mut(), None, 1e-5, |store, tape| {
        Ok(risk_graph(&m, store, tape, &inputs, &rows, &cfg)?.total)
    })
    .map_err(e2s)?;
    for g in [LrGroup::Base, LrGroup::RslFinetune, LrGroup::Prim] {
        let e = report.per_group.get(&g).ok_or(format!("group {g} not checked"))?;
        ensure(*e < 1e-4, format!("group {g} relative error {e:.3e}"))?;
    }
    Ok(format!(
        "{} coordinates over {} groups, max relative error {:.2e} (tolerance 1e-4)",
        report.coordinates,
        report.per_group.len(),
        report.max_relative_error
    ))
}

fn probability_invariants() -> Check {
    let mut draws = 0usize;
    let mut empty_history = 0usize;
    let mut attention_rows = 0usize;
    for seed in 0..200u64 {
        let w = toy(4, 64, seed % 11);
        let mut model = PrectrModel::new(small_config(4)).map_err(e2s)?;
        let bound = 0.1 + 1.4 * (seed as f64 / 200.0);
        randomize(&mut model, seed, bound);
        let inputs = w.inputs(&model);
        let rows: Vec<usize> = (0..inputs.len()).collect();
        let mut tape = Tape::new();
        let o = model.forward(&mut tape, &inputs, &rows).map_err(e2s)?;
        let t = tape.value(o.rsl.ok_or("no RSL output")?);
        let g = tape.value(o.base);
        for k in 0..rows.len() {
            let sum: f64 = t.row(k).iter().sum();
            ensure((sum - 1.0).abs() < 1e-9, format!("RSL row sums to {sum}"))?;
            ensure(t.row(k).iter().all(|&x| x >= 0.0), "negative RSL probability")?;
            ensure(g.row(k).iter().all(|&x| x > 0.0 && x < 1.0), "Base output outside (0,1)")?;
            let f = tape.value(o.fused).row(k)[0];
            ensure(f > 0.0 && f < 1.0, format!("fused score {f}"))?;
            let tau = tape.value(o.tau).row(k)[0];
            ensure(tau > 0.0 && tau < 2.0, format!("tau {tau}"))?;
            if inputs.samples[k].history.is_empty() {
                ensure(tau == 1.0, format!("tau {tau} on empty history"))?;
                empty_history += 1;
            }
            draws += 1;
        }
        if let Some(a) = o.attention {
            for per_head in tape.attention_weights(a).ok_or("no attention record")? {
                for wts in per_head.iter().filter(|w| !w.is_empty()) {
                    ensure(wts.iter().all(|&x| x >= 0.0), "negative attention weight")?;
                    let s: f64 = wts.iter().sum();
                    ensure((s - 1.0).abs() < 1e-9, format!("attention weights sum to {s}"))?;
                    attention_rows += 1;
                }
            }
        }
    }
    ensure(draws >= 10_000, format!("only {draws} draws"))?;
    ensure(empty_history > 0 && attention_rows > 0, "draws did not cover both history cases")?;
    Ok(format!(
        "{draws} samples over 200 parameter draws ({empty_history} empty histories, {attention_rows} attention rows)"
    ))
}

fn regularizer_exactness() -> Check {
    const SPEC_LITERAL: f64 = 0.4838;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..40);
        let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..8.0)).collect();
        let c: f64 = rng.random_range(-5.0..5.0);
        let scores: Vec<f64> = labels.iter().map(|l| l + c).collect();
        worst = worst.max(consistency_regularizer(&scores, &labels).map_err(e2s)?.abs());
    }
    ensure(worst < 1e-12, format!("shifted labels give {worst:e}"))?;

    // KL(p || uniform) = sum p ln(2p), with p the two-way softmax of (4, 1).
    let p1 = 1.0 / (1.0 + (-3.0f64).exp());
    let p2 = 1.0 - p1;
    let oracle = p1 * (2.0 * p1).ln() + p2 * (2.0 * p2).ln();
    let got = consistency_regularizer(&[0.0, 0.0], &[4.0, 1.0]).map_err(e2s)?;
    ensure(
        (got - oracle).abs() < 1e-4,
        format!("[0,0] vs [4,1] gives {got:.6}, oracle {oracle:.6}"),
    )?;
    Ok(format!(
        "shift invariance max {worst:.1e}; [0,0] vs [4,1] = {got:.6}, oracle {oracle:.6} \
         (the stated 0.4838 is off the oracle by {:.4}, see decisions ledger)",
        (oracle - SPEC_LITERAL).abs()
    ))
}

fn auc_oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tied = 0;
    for k in 0..100 {
        let n = rng.random_range(2..=2000);
        let ties = k % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = rng.random();
                if ties {
                    (x * 20.0).floor() / 20.0
                } else {
                    x
                }
            })
            .collect();
        let mut clicks: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        clicks[0] = true;
        clicks[1] = false;
        let fast = auc(&scores, &clicks).map_err(e2s)?;
        let brute = auc_brute_force(&scores, &clicks).map_err(e2s)?;
        ensure(fast == brute, format!("instance {k}: {fast} vs {brute}"))?;
        tied += ties as usize;
    }
    Ok(format!("100 instances ({tied} with tied scores), all bit-identical"))
}

fn two_stage_isolation() -> Check {
    let w = toy(4, 300, 2);
    let mut model = PrectrModel::new(small_config(4)).map_err(e2s)?;
    let inputs = w.inputs(&model);
    let rows: Vec<usize> = (0..inputs.len()).collect();
    let before = model.clone();
    let cfg = TrainConfig {
        batch_size: 32,
        ..TrainConfig::desk()
    };
    pretrain_rsl(&mut model, &inputs, &rows, &cfg).map_err(e2s)?;
    for g in [LrGroup::Stage1, LrGroup::Base, LrGroup::Prim] {
        ensure(
            model.store().snapshot(g) == before.store().snapshot(g),
            format!("stage 1 changed group {g}"),
        )?;
    }
    ensure(
        model.store().snapshot(LrGroup::RslFinetune) != before.store().snapshot(LrGroup::RslFinetune),
        "stage 1 did not move the RSL module",
    )?;

    let cfg = TrainConfig::default();
    let mcfg = ModelConfig::default();
    let mut model = PrectrModel::new(small_config(4)).map_err(e2s)?;
    let store = model.store_mut();
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        store.value_mut(id).fill(0.0);
        store.grad_mut(id).fill(0.37);
    }
    Sgd::new().step(store, |g| stage2_lr(&cfg, &mcfg, g));
    let step = |g: LrGroup| -> Result<f64, String> {
        let s: Vec<f64> = store.snapshot(g).into_iter().flat_map(|(_, v)| v).collect();
        ensure(s.iter().all(|&x| x == s[0]), format!("uneven steps in group {g}"))?;
        Ok(-s[0])
    };
    let (base, rsl) = (step(LrGroup::Base)?, step(LrGroup::RslFinetune)?);
    let expect = (cfg.lr_rsl_finetune * 0.37) / (cfg.lr_base * 0.37);
    ensure(rsl / base == expect, format!("step ratio {} vs {expect}", rsl / base))?;
    Ok(format!(
        "stage 1 leaves base/prim bit-identical; stage-2 step ratio {:.6} = lr_rsl_finetune/lr_base",
        rsl / base
    ))
}

struct Ablation {
    metrics: BTreeMap<String, BTreeMap<String, f64>>,
}

fn ablation_run(pl: &Pipeline) -> Ablation {
    let base = train_variant(pl, "base_only", &["--base-only", "--no-regularizer"]);
    let fused = train_variant(pl, "fused", &["--no-prim", "--no-regularizer"]);
    let no_prim = train_variant(pl, "no_prim", &["--no-prim"]);
    let full = train_variant(pl, "full", &[]);
    let eval = pl.root.join("eval");
    let test = pl.test();
    let specs: Vec<String> = [("base_only", base), ("fused", fused), ("no_prim", no_prim), ("full", full)]
        .iter()
        .map(|(n, path)| format!("{n}={}", path.display()))
        .collect();
    let mut args = vec!["eval", "--out-dir", p(&eval), "--data", p(&test), "--index", p(&pl.index)];
    for s in &specs {
        args.push("--checkpoint");
        args.push(s);
    }
    print!("{}", ok(&args));
    let metrics = ["base_only", "fused", "no_prim", "full"]
        .iter()
        .map(|n| (n.to_string(), read_metrics(&eval.join(format!("metrics_{n}.tsv")))))
        .collect();
    Ablation { metrics }
}

fn ablation_ordering(a: &Ablation) -> Check {
    let m = |v: &str, k: &str| a.metrics[v][k];
    let gain = m("fused", "auc") - m("base_only", "auc");
    let prim = m("full", "auc") - m("no_prim", "auc");
    let rel = m("full", "relevance_score") - m("base_only", "relevance_score");
    let detail = format!(
        "(a) fused - base-only AUC {gain:+.4} (need >= 0.005); (b) full - no-PRIM AUC {prim:+.4} (need >= 0); \
         (c) full - base-only relevance {rel:+.4} (need > 0)"
    );
    if gain >= 0.005 && prim >= 0.0 && rel > 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pretrain_sanity(pl: &Pipeline) -> Check {
    let w = toy(4, 150, 1);
    let mut model = PrectrModel::new(small_config(4)).map_err(e2s)?;
    for l in model.rsl_layers().to_vec() {
        model.store_mut().value_mut(l.weight).fill(0.0);
        model.store_mut().value_mut(l.bias).fill(0.0);
    }
    let inputs = w.inputs(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..inputs.len());
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..inputs.len())).collect();
        let mut tape = Tape::new();
        let z = model.rsl_logits_with(model.store(), &mut tape, &inputs, &rows).map_err(e2s)?;
        let levels: Vec<u8> = rows.iter().map(|&r| inputs.samples[r].rsl).collect();
        let ce = relevance_cross_entropy(&mut tape, z, &levels).map_err(e2s)?;
        worst = worst.max((tape.scalar(ce) - 4f64.ln()).abs());
    }
    ensure(worst < 1e-9, format!("uniform prediction loss off ln 4 by {worst:e}"))?;

    let index = EmbeddingIndex::read(&pl.index).map_err(e2s)?;
    let train = read_dataset(pl.train()).map_err(e2s)?;
    let held = read_dataset(pl.validation()).map_err(e2s)?;
    let mut model = PrectrModel::new(ModelConfig::default()).map_err(e2s)?;
    let train_in = ModelInputs::prepare(&train, model.schema(), &index, None).map_err(e2s)?;
    let rows: Vec<usize> = (0..train_in.len()).collect();
    pretrain_rsl(&mut model, &train_in, &rows, &TrainConfig::desk()).map_err(e2s)?;
    let held_in = ModelInputs::prepare(&held, model.schema(), &index, None).map_err(e2s)?;
    let predicted = model.predict_rsl(&held_in).map_err(e2s)?;
    let correct = predicted.iter().zip(&held).filter(|(p, s)| **p == s.rsl).count();
    let mut counts = [0usize; 4];
    for s in &held {
        counts[s.rsl as usize - 1] += 1;
    }
    let accuracy = correct as f64 / held.len() as f64;
    let majority = *counts.iter().max().unwrap() as f64 / held.len() as f64;
    let detail = format!(
        "uniform loss within {worst:.1e} of ln 4; held-out accuracy {accuracy:.4} vs majority {majority:.4}"
    );
    if accuracy > majority {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism(pl: &Pipeline) -> Check {
    let root = &pl.root;
    let n = "20000";
    let mut digests = Vec::new();
    for run in ["a", "b"] {
        let data = root.join(format!("det_data_{run}"));
        ok(&["gen-data", "--out-dir", p(&data), "--n-impressions", n]);
        let index_dir = root.join(format!("det_index_{run}"));
        ok(&[
            "encoder",
            "build-index",
            "--out-dir",
            p(&index_dir),
            "--checkpoint",
            p(&pl.encoder),
            "--data",
            p(&data.join("train.tsv")),
            p(&data.join("test.tsv")),
        ]);
        let model_dir = root.join(format!("det_model_{run}"));
        ok(&[
            "train",
            "--out-dir",
            p(&model_dir),
            "--data",
            p(&data.join("train.tsv")),
            "--index",
            p(&index_dir.join("index.tsv")),
            "--set",
            "preset=desk",
            "--set",
            "stage2_epochs=2",
        ]);
        digests.push([data, index_dir, model_dir].map(|d| artifact_digests(&d)));
    }
    let mut files = 0;
    for (k, cmd) in ["gen-data", "build-index", "train"].iter().enumerate() {
        ensure(digests[0][k] == digests[1][k], format!("{cmd} artifacts differ between runs"))?;
        files += digests[0][k].len();
    }
    Ok(format!("{files} artifacts from gen-data, build-index and train byte-identical across two runs"))
}

fn sweep_consistency(root: &Path) -> Check {
    let pl = pipeline(&root.join("sweep"), 20_000);
    let (train, test) = (pl.train(), pl.test());
    let sweep = |param: &str, values: &str| {
        let out = pl.root.join(format!("sweep_{param}"));
        ok(&[
            "sweep", "--out-dir", p(&out), "--param", param, "--values", values, "--train", p(&train),
            "--test", p(&test), "--index", p(&pl.index), "--set", "preset=desk",
        ]);
        let text = fs::read_to_string(out.join("series.tsv")).unwrap();
        text.lines().skip(1).map(|l| l.split('\t').map(|x| x.parse::<f64>().unwrap()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let alpha = sweep("alpha", "1,2,4,6,8");
    let gamma = sweep("gamma", "0,0.1,0.3,0.5,1.0");
    for (name, series, expect) in [
        ("alpha", &alpha, [1.0, 2.0, 4.0, 6.0, 8.0]),
        ("gamma", &gamma, [0.0, 0.1, 0.3, 0.5, 1.0]),
    ] {
        let xs: Vec<f64> = series.iter().map(|r| r[0]).collect();
        ensure(xs == expect, format!("{name} series values {xs:?}"))?;
        ensure(series.iter().all(|r| r.len() == 4), format!("{name} series has ragged rows"))?;
    }
    let no_reg = train_variant(&pl, "no_regularizer", &["--no-regularizer"]);
    let eval = pl.root.join("eval_no_regularizer");
    let spec = format!("no_regularizer={}", no_reg.display());
    ok(&["eval", "--out-dir", p(&eval), "--checkpoint", &spec, "--data", p(&test), "--index", p(&pl.index)]);
    let m = read_metrics(&eval.join("metrics_no_regularizer.tsv"));
    let g0 = &gamma[0];
    ensure(
        g0[1] == m["auc"] && g0[2] == m["gauc"] && g0[3] == m["relevance_score"],
        format!("gamma=0 row {g0:?} vs --no-regularizer {m:?}"),
    )?;
    Ok(format!(
        "5-row alpha and gamma series; gamma=0 equals --no-regularizer exactly (AUC {:.4}, GAUC {:.4}, relevance {:.4})",
        m["auc"], m["gauc"], m["relevance_score"]
    ))
}

fn report(results: &mut Vec<bool>, n: usize, name: &str, start: Instant, check: Check) {
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &check {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {name}: {tag} [{secs:.1}s] {detail}");
    results.push(check.is_ok());
}

fn main() {
    let mut results = Vec::new();
    let t = Instant::now();
    report(&mut results, 1, "RelaImpr reproduction", t, relaimpr_reproduction());
    let t = Instant::now();
    report(&mut results, 2, "gradient correctness", t, gradient_correctness());
    let t = Instant::now();
    report(&mut results, 3, "probability invariants", t, probability_invariants());
    let t = Instant::now();
    report(&mut results, 4, "regularizer exactness", t, regularizer_exactness());
    let t = Instant::now();
    report(&mut results, 5, "AUC oracle equivalence", t, auc_oracle_equivalence());
    let t = Instant::now();
    report(&mut results, 6, "two-stage isolation", t, two_stage_isolation());

    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let pl = pipeline(&dir.path().join("main"), 100_000);
    let ablation = ablation_run(&pl);
    report(&mut results, 7, "directional ablation ordering", t, ablation_ordering(&ablation));
    let t = Instant::now();
    report(&mut results, 8, "pretrain sanity", t, pretrain_sanity(&pl));
    let t = Instant::now();
    report(&mut results, 9, "determinism", t, determinism(&pl));
    let t = Instant::now();
    report(&mut results, 10, "sweep consistency", t, sweep_consistency(dir.path()));

    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
