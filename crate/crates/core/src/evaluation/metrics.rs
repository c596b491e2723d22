use std::collections::BTreeMap;

use crate::encoder::{EmbeddingIndex, TextEncoder};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm};

/// Number of top-ranked items per query that enter the relevance score.
pub const RELEVANCE_TOP_K: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredImpression {
    pub user_id: u32,
    pub query_text: String,
    pub item_id: u32,
    pub item_text: String,
    pub score: f64,
    pub click: bool,
}

fn check_scores(scores: &[f64], clicks: &[bool]) -> Result<()> {
    if scores.len() != clicks.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} labels",
            scores.len(),
            clicks.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Validation(format!("non-finite score {s}")));
    }
    Ok(())
}

fn class_counts(clicks: &[bool]) -> Result<(u64, u64)> {
    let pos = clicks.iter().filter(|&&c| c).count() as u64;
    let neg = clicks.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Sort-based, `O(n log n)`.
///
/// The numerator is accumulated as an exact integer count of half-wins,
/// so the result equals [`auc_brute_force`] bit for bit.
pub fn auc(scores: &[f64], clicks: &[bool]) -> Result<f64> {
    check_scores(scores, clicks)?;
    let (pos, neg) = class_counts(clicks)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut half_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if clicks[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        half_wins += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(half_wins as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// The pairwise definition, `O(P * N)`.
pub fn auc_brute_force(scores: &[f64], clicks: &[bool]) -> Result<f64> {
    check_scores(scores, clicks)?;
    let (pos, neg) = class_counts(clicks)?;
    let mut half_wins: u128 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if !clicks[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if clicks[j] {
                continue;
            }
            if si > sj {
                half_wins += 2;
            } else if si == sj {
                half_wins += 1;
            }
        }
    }
    Ok(half_wins as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Per-user AUC and impression count for users with both classes.
pub fn per_user_auc(impressions: &[ScoredImpression]) -> Result<BTreeMap<u32, (f64, usize)>> {
    let mut users: BTreeMap<u32, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for imp in impressions {
        let e = users.entry(imp.user_id).or_default();
        e.0.push(imp.score);
        e.1.push(imp.click);
    }
    let mut out = BTreeMap::new();
    for (user, (s, c)) in users {
        match auc(&s, &c) {
            Ok(a) => {
                out.insert(user, (a, s.len()));
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Impression-weighted mean of per-user AUC over users with both classes.
pub fn gauc(impressions: &[ScoredImpression]) -> Result<f64> {
    gauc_from(&per_user_auc(impressions)?)
}

fn gauc_from(per_user: &BTreeMap<u32, (f64, usize)>) -> Result<f64> {
    if per_user.is_empty() {
        return Err(Error::UndefinedMetric("no user has both clicks and non-clicks".into()));
    }
    // a * c / c is not always a in floating point.
    if per_user.len() == 1 {
        return Ok(per_user.values().next().unwrap().0);
    }
    let (num, den) = per_user
        .values()
        .fold((0.0, 0usize), |(n, d), &(a, c)| (n + a * c as f64, d + c));
    Ok(num / den as f64)
}

/// Relative improvement over a base model, in percent:
/// `((measured - 0.5) / (base - 0.5) - 1) * 100`.
pub fn rela_impr(measured: f64, base: f64) -> Result<f64> {
    if base == 0.5 {
        return Err(Error::Division("RelaImpr is undefined for a base AUC of 0.5".into()));
    }
    Ok(((measured - 0.5) / (base - 0.5) - 1.0) * 100.0)
}

/// One query's embedding and the embeddings of its items in ranked order.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedQuery {
    pub query: Vec<f64>,
    pub items: Vec<Vec<f64>>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = l2_norm(a) * l2_norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

/// Mean query-item cosine over the top [`RELEVANCE_TOP_K`] items of each
/// list. Lists shorter than that contribute all their items, and the
/// denominator counts the items actually used.
pub fn relevance_score(rankings: &[RankedQuery]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in rankings {
        for item in r.items.iter().take(RELEVANCE_TOP_K) {
            if item.len() != r.query.len() {
                return Err(Error::Dimension(format!(
                    "item embedding of width {} for a query of width {}",
                    item.len(),
                    r.query.len()
                )));
            }
            sum += cosine(&r.query, item);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("relevance score of an empty ranking set".into()));
    }
    Ok(sum / count as f64)
}

/// Groups impressions by (user, query), ranks each group by descending
/// score with ties broken by ascending item id, and resolves the top
/// [`RELEVANCE_TOP_K`] texts through the index.
pub fn rank_queries(
    impressions: &[ScoredImpression],
    index: &EmbeddingIndex,
    encoder: Option<&TextEncoder>,
) -> Result<Vec<RankedQuery>> {
    let mut groups: BTreeMap<(u32, &str), Vec<&ScoredImpression>> = BTreeMap::new();
    for imp in impressions {
        groups.entry((imp.user_id, imp.query_text.as_str())).or_default().push(imp);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((_, query), mut list) in groups {
        list.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
        let items = list
            .iter()
            .take(RELEVANCE_TOP_K)
            .map(|imp| index.lookup_text(&imp.item_text, encoder))
            .collect::<Result<_>>()?;
        out.push(RankedQuery {
            query: index.lookup_text(query, encoder)?,
            items,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub auc: f64,
    pub gauc: f64,
    pub relevance_score: f64,
    pub n_impressions: usize,
    /// user id -> (AUC, impressions), users with both classes only.
    pub per_user: BTreeMap<u32, (f64, usize)>,
}

impl MetricReport {
    pub fn compute(
        impressions: &[ScoredImpression],
        index: &EmbeddingIndex,
        encoder: Option<&TextEncoder>,
    ) -> Result<Self> {
        let scores: Vec<f64> = impressions.iter().map(|i| i.score).collect();
        let clicks: Vec<bool> = impressions.iter().map(|i| i.click).collect();
        let per_user = per_user_auc(impressions)?;
        Ok(MetricReport {
            auc: auc(&scores, &clicks)?,
            gauc: gauc_from(&per_user)?,
            relevance_score: relevance_score(&rank_queries(impressions, index, encoder)?)?,
            n_impressions: impressions.len(),
            per_user,
        })
    }

    /// `metric\tvalue` lines.
    pub fn to_metric_lines(&self) -> String {
        format!(
            "auc\t{}\ngauc\t{}\nrelevance_score\t{}\nn_impressions\t{}\nn_gauc_users\t{}\n",
            self.auc,
            self.gauc,
            self.relevance_score,
            self.n_impressions,
            self.per_user.len()
        )
    }
}
