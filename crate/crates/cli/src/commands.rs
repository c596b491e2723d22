use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use prectr::data::{
    category_match, contains_query, generate_corpus, read_dataset, split_sequential, write_dataset,
    write_ground_truth, HistoryEntry, Sample,
};
use prectr::encoder::{build_index, finetune_encoder, pretrain_encoder, EmbeddingIndex, TextEncoder};
use prectr::evaluation::{run_comparison, score_samples, MetricReport};
use prectr::model::{ModelInputs, PrectrModel};
use prectr::training::train_two_stage;
use prectr::{Error, Result};

use crate::config::RunConfig;
use crate::manifest::{prepare_out_dir, RunManifest};
use crate::{Command, Common, EncoderCommand, VariantFlags};

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, n_impressions } => gen_data(&common, n_impressions),
        Command::Encoder { command } => match command {
            EncoderCommand::Pretrain { common, data } => encoder_pretrain(&common, &data),
            EncoderCommand::Finetune { common, checkpoint, data } => {
                encoder_finetune(&common, &checkpoint, &data)
            }
            EncoderCommand::BuildIndex { common, checkpoint, data } => {
                encoder_build_index(&common, &checkpoint, &data)
            }
        },
        Command::Train { common, data, index, encoder, variant } => {
            train(&common, &data, &index, encoder.as_deref(), variant)
        }
        Command::Eval { common, checkpoints, data, index, encoder } => {
            eval(&common, &checkpoints, &data, &index, encoder.as_deref())
        }
        Command::Sweep { common, param, values, train, test, index, encoder, variant } => sweep(
            &common,
            &param,
            &values,
            &train,
            &test,
            &index,
            encoder.as_deref(),
            variant,
        ),
        Command::Rank {
            common,
            checkpoint,
            index,
            encoder,
            query,
            user_context,
            candidates,
            explain,
        } => rank(
            &common,
            &checkpoint,
            &index,
            encoder.as_deref(),
            &query,
            &user_context,
            &candidates,
            explain,
        ),
    }
}

/// Resolves the config, validates it and prepares the output directory,
/// in that order, so a bad config never touches the filesystem.
fn begin(name: &str, common: &Common, tweak: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<(RunConfig, RunManifest)> {
    let mut cfg = common.resolve()?;
    tweak(&mut cfg)?;
    cfg.validate()?;
    prepare_out_dir(&common.out_dir, common.force)?;
    Ok((cfg, RunManifest::start(name, &common.out_dir)))
}

fn load_samples(m: &mut RunManifest, path: &Path) -> Result<Vec<Sample>> {
    m.input(path)?;
    read_dataset(path)
}

fn load_encoder(m: &mut RunManifest, path: &Path) -> Result<TextEncoder> {
    m.input(path)?;
    TextEncoder::load(path)
}

fn load_index(m: &mut RunManifest, path: &Path, encoder: Option<&TextEncoder>) -> Result<EmbeddingIndex> {
    m.input(path)?;
    let index = EmbeddingIndex::read(path)?;
    if let Some(enc) = encoder {
        if enc.checkpoint_id() != index.checkpoint() {
            return Err(Error::Validation(format!(
                "index was built by encoder {}, but --encoder is {}",
                index.checkpoint(),
                enc.checkpoint_id()
            )));
        }
    }
    Ok(index)
}

fn load_model(m: &mut RunManifest, path: &Path, index: &EmbeddingIndex) -> Result<PrectrModel> {
    m.input(path)?;
    let model = PrectrModel::load(path)?;
    if model.config().dim != index.dim() {
        return Err(Error::Validation(format!(
            "{} expects embeddings of width {}, the index has {}",
            path.display(),
            model.config().dim,
            index.dim()
        )));
    }
    Ok(model)
}

fn gen_data(common: &Common, n_impressions: Option<usize>) -> Result<()> {
    let (cfg, mut m) = begin("gen-data", common, |cfg| {
        if let Some(n) = n_impressions {
            cfg.generator.n_impressions = n;
        }
        Ok(())
    })?;
    let corpus = generate_corpus(&cfg.generator)?;
    write_dataset(m.output("dataset.tsv"), &corpus.samples)?;
    write_ground_truth(m.output("ground_truth.tsv"), &corpus.truth)?;
    let [train, valid, test] = split_sequential(corpus.samples.len());
    for (name, range) in [("train.tsv", train), ("validation.tsv", valid), ("test.tsv", test)] {
        write_dataset(m.output(name), &corpus.samples[range])?;
    }
    println!("wrote {} impressions to {}", corpus.samples.len(), common.out_dir.display());
    m.finish(&cfg)
}

fn loss_lines(losses: &[f64]) -> String {
    let mut out = String::from("epoch\tloss\n");
    for (e, l) in losses.iter().enumerate() {
        writeln!(out, "{}\t{l}", e + 1).unwrap();
    }
    out
}

fn encoder_pretrain(common: &Common, data: &Path) -> Result<()> {
    let (cfg, mut m) = begin("encoder pretrain", common, |_| Ok(()))?;
    let samples = load_samples(&mut m, data)?;
    let pairs: Vec<(String, String, bool)> = samples
        .iter()
        .map(|s| (s.query_text.clone(), s.item_text.clone(), s.click))
        .collect();
    let mut enc = TextEncoder::new(cfg.encoder)?;
    let losses = pretrain_encoder(&mut enc, &pairs, &cfg.encoder_train)?;
    enc.save(m.output("encoder.ckpt"))?;
    m.write_text("encoder_loss.tsv", &loss_lines(&losses))?;
    println!("encoder {} pretrained on {} pairs", enc.checkpoint_id(), pairs.len());
    m.finish(&cfg)
}

fn encoder_finetune(common: &Common, checkpoint: &Path, data: &Path) -> Result<()> {
    let (cfg, mut m) = begin("encoder finetune", common, |_| Ok(()))?;
    let mut enc = load_encoder(&mut m, checkpoint)?;
    let samples = load_samples(&mut m, data)?;
    let labeled: Vec<(String, String, u8)> = samples
        .iter()
        .map(|s| (s.query_text.clone(), s.item_text.clone(), s.rsl))
        .collect();
    let losses = finetune_encoder(&mut enc, &labeled, &cfg.encoder_train)?;
    enc.save(m.output("encoder.ckpt"))?;
    m.write_text("encoder_loss.tsv", &loss_lines(&losses))?;
    println!("encoder {} fine-tuned on {} pairs", enc.checkpoint_id(), labeled.len());
    m.finish(&cfg)
}

fn encoder_build_index(common: &Common, checkpoint: &Path, data: &[std::path::PathBuf]) -> Result<()> {
    let (cfg, mut m) = begin("encoder build-index", common, |_| Ok(()))?;
    let enc = load_encoder(&mut m, checkpoint)?;
    let mut samples = Vec::new();
    for path in data {
        samples.extend(load_samples(&mut m, path)?);
    }
    let texts = samples.iter().flat_map(|s| {
        [s.query_text.as_str(), s.item_text.as_str()]
            .into_iter()
            .chain(s.history.iter().flat_map(|h| [h.query.as_str(), h.item_text.as_str()]))
    });
    let pairs = samples.iter().flat_map(|s| {
        std::iter::once((s.query_text.as_str(), s.item_text.as_str()))
            .chain(s.history.iter().map(|h| (h.query.as_str(), h.item_text.as_str())))
    });
    let index = build_index(texts, pairs, &enc)?;
    index.write(m.output("index.tsv"))?;
    println!(
        "indexed {} texts and {} pairs with encoder {}",
        index.num_texts(),
        index.num_pairs(),
        index.checkpoint()
    );
    m.finish(&cfg)
}

/// Trains one model from `cfg` and returns it with its log text.
fn fit(cfg: &RunConfig, samples: &[Sample], index: &EmbeddingIndex, encoder: Option<&TextEncoder>) -> Result<(PrectrModel, String)> {
    if cfg.model.dim != index.dim() {
        return Err(Error::Validation(format!(
            "config dim {} does not match the index width {}",
            cfg.model.dim,
            index.dim()
        )));
    }
    let mut model = PrectrModel::new(cfg.model.clone())?;
    let inputs = ModelInputs::prepare(samples, model.schema(), index, encoder)?;
    let rows: Vec<usize> = (0..inputs.len()).collect();
    let log = train_two_stage(&mut model, &inputs, &rows, &cfg.train)?;
    Ok((model, log.to_text()))
}

fn train(common: &Common, data: &Path, index: &Path, encoder: Option<&Path>, variant: VariantFlags) -> Result<()> {
    let (cfg, mut m) = begin("train", common, |cfg| variant.apply(cfg))?;
    let enc = encoder.map(|p| load_encoder(&mut m, p)).transpose()?;
    let index = load_index(&mut m, index, enc.as_ref())?;
    let samples = load_samples(&mut m, data)?;
    let (model, log) = fit(&cfg, &samples, &index, enc.as_ref())?;
    model.save(m.output("model.ckpt"))?;
    m.write_text("training.log", &log)?;
    println!("trained on {} impressions", samples.len());
    m.finish(&cfg)
}

fn eval(common: &Common, checkpoints: &[String], data: &Path, index: &Path, encoder: Option<&Path>) -> Result<()> {
    let (cfg, mut m) = begin("eval", common, |_| Ok(()))?;
    let enc = encoder.map(|p| load_encoder(&mut m, p)).transpose()?;
    let index = load_index(&mut m, index, enc.as_ref())?;
    let mut variants = Vec::with_capacity(checkpoints.len());
    for spec in checkpoints {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("--checkpoint expects name=path, got `{spec}`")))?;
        if name.is_empty() || name.contains(['\t', '/', '\n']) {
            return Err(Error::Validation(format!("invalid variant name `{name}`")));
        }
        if variants.iter().any(|(n, _)| n == name) {
            return Err(Error::Validation(format!("variant `{name}` given twice")));
        }
        variants.push((name.to_string(), load_model(&mut m, Path::new(path), &index)?));
    }
    let samples = load_samples(&mut m, data)?;
    let table = run_comparison(&variants, &samples, &index, enc.as_ref())?;
    print!("{table}");
    m.write_text("comparison.tsv", &table.to_string())?;
    for row in &table.rows {
        m.write_text(&format!("metrics_{}.tsv", row.name), &row.report.to_metric_lines())?;
    }
    m.finish(&cfg)
}

pub fn parse_sweep_values(values: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Validation(format!("sweep value `{v}` is not a number")))
        })
        .collect::<Result<_>>()?;
    if vals.len() < 2 {
        return Err(Error::Validation("a sweep needs at least two values".into()));
    }
    if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation("sweep values must be finite and >= 0".into()));
    }
    if vals.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Validation("sweep values must be non-decreasing".into()));
    }
    Ok(vals)
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    common: &Common,
    param: &str,
    values: &str,
    train: &Path,
    test: &Path,
    index: &Path,
    encoder: Option<&Path>,
    variant: VariantFlags,
) -> Result<()> {
    let vals = parse_sweep_values(values)?;
    let (cfg, mut m) = begin("sweep", common, |cfg| {
        variant.apply(cfg)?;
        cfg.train.beta = 1.0;
        Ok(())
    })?;
    let enc = encoder.map(|p| load_encoder(&mut m, p)).transpose()?;
    let index = load_index(&mut m, index, enc.as_ref())?;
    let train_samples = load_samples(&mut m, train)?;
    let test_samples = load_samples(&mut m, test)?;
    let mut series = String::from("value\tauc\tgauc\trelevance_score\n");
    for (k, &v) in vals.iter().enumerate() {
        let mut point = cfg.clone();
        point.set(param, &v.to_string())?;
        point.validate()?;
        let (model, log) = fit(&point, &train_samples, &index, enc.as_ref())?;
        let imps = score_samples(&model, &test_samples, &index, enc.as_ref())?;
        let report = MetricReport::compute(&imps, &index, enc.as_ref())?;
        let dir = format!("{k:02}_{param}_{v}");
        fs::create_dir_all(common.out_dir.join(&dir))?;
        model.save(m.output(&format!("{dir}/model.ckpt")))?;
        m.write_text(&format!("{dir}/training.log"), &log)?;
        m.write_text(&format!("{dir}/metrics.tsv"), &report.to_metric_lines())?;
        m.write_text(&format!("{dir}/{}", crate::manifest::RESOLVED_FILE), &point.to_text())?;
        writeln!(series, "{v}\t{}\t{}\t{}", report.auc, report.gauc, report.relevance_score).unwrap();
        println!("{param}={v}\tauc {:.4}\tgauc {:.4}\trelevance {:.4}", report.auc, report.gauc, report.relevance_score);
    }
    m.write_text("series.tsv", &series)?;
    m.finish(&cfg)
}

fn read_user_context(path: &Path) -> Result<(u32, Vec<HistoryEntry>)> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| bad(1, "empty user-context file".into()))?;
    let (user, n) = head
        .split_once('\t')
        .ok_or_else(|| bad(1, "expected `user_id<TAB>n`".into()))?;
    let user: u32 = user.parse().map_err(|_| bad(1, format!("bad user id `{user}`")))?;
    let n: usize = n.parse().map_err(|_| bad(1, format!("bad history length `{n}`")))?;
    let mut history = Vec::with_capacity(n);
    for (k, line) in lines.enumerate() {
        let (q, i) = line
            .split_once('\t')
            .ok_or_else(|| bad(k + 2, "expected `query<TAB>item_text`".into()))?;
        history.push(HistoryEntry {
            query: q.to_string(),
            item_text: i.to_string(),
        });
    }
    if history.len() != n {
        return Err(bad(1, format!("header promises {n} history lines, found {}", history.len())));
    }
    Ok((user, history))
}

fn read_candidates(path: &Path) -> Result<Vec<(u32, String)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("item_id\titem_text") {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected header `item_id<TAB>item_text`".into(),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(k, line)| {
            let parsed = line
                .split_once('\t')
                .and_then(|(id, t)| Some((id.parse().ok()?, t.to_string())));
            parsed.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: k + 2,
                message: format!("expected `item_id<TAB>item_text`, got `{line}`"),
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn rank(
    common: &Common,
    checkpoint: &Path,
    index: &Path,
    encoder: Option<&Path>,
    query: &str,
    user_context: &Path,
    candidates: &Path,
    explain: bool,
) -> Result<()> {
    let (cfg, mut m) = begin("rank", common, |_| Ok(()))?;
    let enc = encoder.map(|p| load_encoder(&mut m, p)).transpose()?;
    let index = load_index(&mut m, index, enc.as_ref())?;
    let model = load_model(&mut m, checkpoint, &index)?;
    m.input(user_context)?;
    m.input(candidates)?;
    let (user_id, history) = read_user_context(user_context)?;
    let cands = read_candidates(candidates)?;
    if cands.is_empty() {
        return Err(Error::Validation("no candidates to rank".into()));
    }
    // The relevance level is a training label only; it never enters scoring.
    let samples: Vec<Sample> = cands
        .iter()
        .map(|(item_id, text)| Sample {
            user_id,
            query_text: query.to_string(),
            item_id: *item_id,
            item_text: text.clone(),
            category_match: category_match(query, text),
            contains_query: contains_query(query, text),
            rsl: 1,
            click: false,
            history: history.clone(),
        })
        .collect();
    let inputs = ModelInputs::prepare(&samples, model.schema(), &index, enc.as_ref())?;
    let rows: Vec<usize> = (0..inputs.len()).collect();
    let breakdowns = model.score_breakdowns(&inputs, &rows)?;
    let mut order: Vec<usize> = rows;
    order.sort_by(|&a, &b| {
        breakdowns[b]
            .final_score
            .total_cmp(&breakdowns[a].final_score)
            .then(cands[a].0.cmp(&cands[b].0))
    });
    let mut table = String::from("rank\titem_id\tfinal\tfused\ttau\trsl\tbase\n");
    for (r, &k) in order.iter().enumerate() {
        let b = &breakdowns[k];
        writeln!(table, "{}\t{}\t{b}", r + 1, cands[k].0).unwrap();
        if explain {
            println!("{}\t{b}", cands[k].0);
        } else {
            println!("{}\t{:.8}", cands[k].0, b.final_score);
        }
    }
    m.write_text("ranking.tsv", &table)?;
    m.finish(&cfg)
}
