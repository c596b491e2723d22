//! Synthetic search-impression corpus.
//!
//! Texts follow one shape: the first word is a category token and the
//! remaining words are descriptors. Ground-truth relevance, item quality and
//! user sensitivity drive a logistic click model; the model-visible record
//! carries only the derived flags, the graded relevance level and the click.

mod features;
mod generator;
mod io;

pub use features::{extract_features, FeatureConfig, FeatureSchema, FeatureVector, FieldSpec};
pub use generator::{generate_corpus, Corpus, GeneratorConfig};
pub use io::{
    read_dataset, read_ground_truth, split_sequential, write_dataset, write_ground_truth,
    DATASET_COLUMNS, GROUND_TRUTH_COLUMNS,
};

use std::collections::BTreeSet;

use rand::Rng;

use crate::encoder::words;
use crate::error::{Error, Result};
use crate::numerics::sigmoid;

/// Longest click history kept per user.
pub const MAX_HISTORY: usize = 50;

/// Lower-inclusive boundaries between the four relevance levels.
pub const DEFAULT_RSL_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

/// One earlier (query, clicked item) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryEntry {
    pub query: String,
    pub item_text: String,
}

/// One impression as the model sees it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub user_id: u32,
    pub query_text: String,
    pub item_id: u32,
    pub item_text: String,
    pub category_match: bool,
    pub contains_query: bool,
    /// Graded relevance level in `1..=4`.
    pub rsl: u8,
    pub click: bool,
    /// Most recent first, at most [`MAX_HISTORY`] entries.
    pub history: Vec<HistoryEntry>,
}

/// Generator-only quantities, kept out of the model-visible dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub relevance: f64,
    pub quality: f64,
    pub sensitivity: f64,
    pub true_click_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClickModel {
    pub w_quality: f64,
    pub w_relevance: f64,
    pub bias: f64,
}

impl Default for ClickModel {
    fn default() -> Self {
        ClickModel {
            w_quality: 3.0,
            w_relevance: 3.0,
            bias: -1.0,
        }
    }
}

impl ClickModel {
    /// `sigmoid(w_q (q - 0.5) + w_r s (r - 0.5) + bias)`.
    pub fn probability(&self, sensitivity: f64, quality: f64, relevance: f64) -> f64 {
        sigmoid(
            self.w_quality * (quality - 0.5)
                + self.w_relevance * sensitivity * (relevance - 0.5)
                + self.bias,
        )
    }
}

/// Draws a click and returns it with its probability.
pub fn simulate_click(
    sensitivity: f64,
    quality: f64,
    relevance: f64,
    model: &ClickModel,
    rng: &mut impl Rng,
) -> (bool, f64) {
    let p = model.probability(sensitivity, quality, relevance);
    (rng.random::<f64>() < p, p)
}

fn split_text(text: &str) -> Option<(String, BTreeSet<String>)> {
    let mut w = words(text).into_iter();
    let category = w.next()?;
    Some((category, w.collect()))
}

/// `0.5 [same category] + 0.5 Jaccard(descriptors)`, with two empty
/// descriptor sets counting as identical. Empty text scores 0.
pub fn ground_truth_relevance(query: &str, item: &str) -> f64 {
    let (Some((qc, qd)), Some((ic, id))) = (split_text(query), split_text(item)) else {
        return 0.0;
    };
    let category = if qc == ic { 0.5 } else { 0.0 };
    let union = qd.union(&id).count();
    let jaccard = if union == 0 {
        1.0
    } else {
        qd.intersection(&id).count() as f64 / union as f64
    };
    category + 0.5 * jaccard
}

/// Both texts are non-empty and their category tokens are equal.
pub fn category_match(query: &str, item: &str) -> bool {
    match (words(query).first(), words(item).first()) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}

/// Every query word appears among the item words. An empty query contains nothing.
pub fn contains_query(query: &str, item: &str) -> bool {
    let q = words(query);
    let i: BTreeSet<String> = words(item).into_iter().collect();
    !q.is_empty() && q.iter().all(|w| i.contains(w))
}

/// Maps relevance in `[0, 1]` to a level in `1..=4` using lower-inclusive thresholds.
pub fn assign_rsl(relevance: f64, thresholds: &[f64; 3]) -> Result<u8> {
    if !(0.0..=1.0).contains(&relevance) {
        return Err(Error::Validation(format!(
            "relevance {relevance} is outside [0, 1]"
        )));
    }
    Ok(1 + thresholds.iter().filter(|&&t| relevance >= t).count() as u8)
}

#[cfg(test)]
mod tests;
