//! `key=value` run configuration.
//!
//! Sources are applied in order: the `preset` (if any source names one),
//! then the config file, then `--set` pairs, then dedicated flags. The
//! fully resolved configuration is echoed as `config.resolved` in every
//! output directory and can be fed back with `--config`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use prectr::data::GeneratorConfig;
use prectr::encoder::{EncoderConfig, EncoderTrainConfig};
use prectr::model::ModelConfig;
use prectr::training::{Grouping, TrainConfig};
use prectr::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// The published settings: batch 4096, learning rates 1e-4 / 1e-5.
    Paper,
    /// Larger rates and smaller batches for a 100k-impression corpus.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Validation(format!("unknown preset `{s}`, expected `paper` or `desk`"))),
        }
    }
}

impl Preset {
    fn as_str(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub encoder_train: EncoderTrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::with_preset(Preset::Paper)
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Validation(format!("`{key}` has invalid value `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x)).collect()
}

fn parse_array<const N: usize, T: FromStr + Copy + Default>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = parse_list(key, v)?;
    if items.len() != N {
        return Err(Error::Validation(format!(
            "`{key}` needs {N} comma-separated values, got {}",
            items.len()
        )));
    }
    let mut out = [T::default(); N];
    out.copy_from_slice(&items);
    Ok(out)
}

fn parse_range(key: &str, v: &str) -> Result<(usize, usize)> {
    let [a, b] = parse_array::<2, usize>(key, v)?;
    Ok((a, b))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn with_preset(preset: Preset) -> Self {
        let train = match preset {
            Preset::Paper => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        };
        RunConfig {
            preset,
            generator: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            encoder_train: EncoderTrainConfig::default(),
            model: ModelConfig::default(),
            train,
        }
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let g = &self.generator;
        let m = &self.model;
        let t = &self.train;
        let e = &self.encoder_train;
        vec![
            ("preset", self.preset.as_str().to_string()),
            ("seed", g.seed.to_string()),
            ("n_users", g.n_users.to_string()),
            ("n_items", g.n_items.to_string()),
            ("n_queries", g.n_queries.to_string()),
            ("n_impressions", g.n_impressions.to_string()),
            ("n_categories", g.n_categories.to_string()),
            ("descriptor_stride", g.descriptor_stride.to_string()),
            ("descriptor_window", g.descriptor_window.to_string()),
            ("item_descriptors", join(&[g.item_descriptors.0, g.item_descriptors.1])),
            ("query_descriptors", join(&[g.query_descriptors.0, g.query_descriptors.1])),
            ("candidates_per_request", g.candidates_per_request.to_string()),
            ("rsl_mix", join(&g.rsl_mix)),
            ("w_quality", g.click.w_quality.to_string()),
            ("w_relevance", g.click.w_relevance.to_string()),
            ("click_bias", g.click.bias.to_string()),
            ("rsl_thresholds", join(&g.rsl_thresholds)),
            ("sensitivity_alpha", g.sensitivity_alpha.to_string()),
            ("sensitivity_beta", g.sensitivity_beta.to_string()),
            (
                "preferred_categories",
                join(&[g.preferred_categories.0, g.preferred_categories.1]),
            ),
            ("preference_prob", g.preference_prob.to_string()),
            ("max_history", g.max_history.to_string()),
            ("vocab_size", self.encoder.vocab_size.to_string()),
            ("raw_dim", self.encoder.raw_dim.to_string()),
            ("dim", self.encoder.dim.to_string()),
            ("encoder_epochs", e.epochs.to_string()),
            ("encoder_batch_size", e.batch_size.to_string()),
            ("encoder_lr", e.lr.to_string()),
            ("finetune_lr_factor", e.finetune_lr_factor.to_string()),
            ("field_dim", m.field_dim.to_string()),
            ("base_hidden", join(&m.base_hidden)),
            ("rsl_hidden", join(&m.rsl_hidden)),
            ("incentive_hidden", join(&m.incentive_hidden)),
            ("heads", m.heads.to_string()),
            ("base_uses_relevance_embedding", m.base_uses_relevance_embedding.to_string()),
            ("user_buckets", m.features.user_buckets.to_string()),
            ("item_buckets", m.features.item_buckets.to_string()),
            ("category_buckets", m.features.category_buckets.to_string()),
            ("term_buckets", m.features.term_buckets.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr_stage1", t.lr_stage1.to_string()),
            ("lr_base", t.lr_base.to_string()),
            ("lr_rsl_finetune", t.lr_rsl_finetune.to_string()),
            ("lr_prim", t.lr_prim.to_string()),
            ("alpha", t.alpha.to_string()),
            ("beta", t.beta.to_string()),
            ("gamma", t.gamma.to_string()),
            ("stage1_epochs", t.stage1_epochs.to_string()),
            ("stage2_epochs", t.stage2_epochs.to_string()),
            ("grouping", t.grouping.as_str().to_string()),
            ("momentum", t.momentum.to_string()),
            ("two_stage", t.two_stage.to_string()),
            ("regularizer", t.use_regularizer.to_string()),
            ("prim", m.use_prim.to_string()),
            ("base_only", m.base_only.to_string()),
            ("wide", m.wide.to_string()),
        ]
    }

    /// Sets one key. `preset` resets the training settings to that preset.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let g = &mut self.generator;
        let m = &mut self.model;
        let t = &mut self.train;
        let e = &mut self.encoder_train;
        match key {
            "preset" => {
                let p: Preset = v.trim().parse()?;
                self.preset = p;
                // A preset replaces hyperparameters, not the variant switches.
                let t = &self.train;
                self.train = TrainConfig {
                    two_stage: t.two_stage,
                    use_regularizer: t.use_regularizer,
                    seed: t.seed,
                    ..RunConfig::with_preset(p).train
                };
            }
            "seed" => {
                let s: u64 = parse(key, v)?;
                g.seed = s;
                self.encoder.seed = s;
                e.seed = s;
                m.seed = s;
                t.seed = s;
            }
            "n_users" => g.n_users = parse(key, v)?,
            "n_items" => g.n_items = parse(key, v)?,
            "n_queries" => g.n_queries = parse(key, v)?,
            "n_impressions" => g.n_impressions = parse(key, v)?,
            "n_categories" => g.n_categories = parse(key, v)?,
            "descriptor_stride" => g.descriptor_stride = parse(key, v)?,
            "descriptor_window" => g.descriptor_window = parse(key, v)?,
            "item_descriptors" => g.item_descriptors = parse_range(key, v)?,
            "query_descriptors" => g.query_descriptors = parse_range(key, v)?,
            "candidates_per_request" => g.candidates_per_request = parse(key, v)?,
            "rsl_mix" => g.rsl_mix = parse_array(key, v)?,
            "w_quality" => g.click.w_quality = parse(key, v)?,
            "w_relevance" => g.click.w_relevance = parse(key, v)?,
            "click_bias" => g.click.bias = parse(key, v)?,
            "rsl_thresholds" => g.rsl_thresholds = parse_array(key, v)?,
            "sensitivity_alpha" => g.sensitivity_alpha = parse(key, v)?,
            "sensitivity_beta" => g.sensitivity_beta = parse(key, v)?,
            "preferred_categories" => g.preferred_categories = parse_range(key, v)?,
            "preference_prob" => g.preference_prob = parse(key, v)?,
            "max_history" => g.max_history = parse(key, v)?,
            "vocab_size" => self.encoder.vocab_size = parse(key, v)?,
            "raw_dim" => self.encoder.raw_dim = parse(key, v)?,
            "dim" => {
                let d = parse(key, v)?;
                self.encoder.dim = d;
                m.dim = d;
            }
            "encoder_epochs" => e.epochs = parse(key, v)?,
            "encoder_batch_size" => e.batch_size = parse(key, v)?,
            "encoder_lr" => e.lr = parse(key, v)?,
            "finetune_lr_factor" => e.finetune_lr_factor = parse(key, v)?,
            "field_dim" => m.field_dim = parse(key, v)?,
            "base_hidden" => m.base_hidden = parse_list(key, v)?,
            "rsl_hidden" => m.rsl_hidden = parse_list(key, v)?,
            "incentive_hidden" => m.incentive_hidden = parse_list(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "base_uses_relevance_embedding" => m.base_uses_relevance_embedding = parse(key, v)?,
            "user_buckets" => m.features.user_buckets = parse(key, v)?,
            "item_buckets" => m.features.item_buckets = parse(key, v)?,
            "category_buckets" => m.features.category_buckets = parse(key, v)?,
            "term_buckets" => m.features.term_buckets = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr_stage1" => t.lr_stage1 = parse(key, v)?,
            "lr_base" => t.lr_base = parse(key, v)?,
            "lr_rsl_finetune" => t.lr_rsl_finetune = parse(key, v)?,
            "lr_prim" => t.lr_prim = parse(key, v)?,
            "alpha" => t.alpha = parse(key, v)?,
            "beta" => t.beta = parse(key, v)?,
            "gamma" => t.gamma = parse(key, v)?,
            "stage1_epochs" => t.stage1_epochs = parse(key, v)?,
            "stage2_epochs" => t.stage2_epochs = parse(key, v)?,
            "grouping" => t.grouping = v.trim().parse::<Grouping>()?,
            "momentum" => t.momentum = parse(key, v)?,
            "two_stage" => t.two_stage = parse(key, v)?,
            "regularizer" => t.use_regularizer = parse(key, v)?,
            "prim" => m.use_prim = parse(key, v)?,
            "base_only" => m.base_only = parse(key, v)?,
            "wide" => m.wide = parse(key, v)?,
            _ => return Err(Error::Validation(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `pairs` in order, except that a `preset` key is applied
    /// first so explicit values always win over the preset.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        if let Some((_, p)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            self.set("preset", p)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Checks every section and the cross-section constraints.
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.encoder.dim != self.model.dim {
            return Err(Error::Validation("encoder and model dims differ".into()));
        }
        let t = &self.train;
        if self.model.base_only && (!self.model.use_prim || !t.two_stage) {
            return Err(Error::Validation(
                "--base-only cannot be combined with --no-prim or --no-two-stage; it has neither module".into(),
            ));
        }
        let e = &self.encoder_train;
        if e.batch_size == 0 || !(e.lr > 0.0) || !(e.finetune_lr_factor > 0.0) {
            return Err(Error::Validation(
                "encoder_batch_size, encoder_lr and finetune_lr_factor must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The `config.resolved` text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// errors carry the line number.
pub fn parse_config_text(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(p) => &line[..p],
            None => line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected `key=value`, got `{line}`"),
            });
        };
        let k = k.trim();
        if RunConfig::default().entries().iter().all(|(name, _)| *name != k) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("unknown config key `{k}`"),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dependency(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text, path)
}

/// Splits a `--set key=value` argument.
pub fn parse_set(arg: &str) -> Result<(String, String)> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Validation(format!("--set expects key=value, got `{arg}`")))
}
