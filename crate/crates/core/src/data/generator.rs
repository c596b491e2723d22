use std::collections::VecDeque;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use super::{
    assign_rsl, simulate_click, ClickModel, GroundTruth, HistoryEntry, Sample,
    DEFAULT_RSL_THRESHOLDS, MAX_HISTORY,
};
use crate::error::{Error, Result};

/// Corpus shape and click-model settings. Every field is part of the
/// determinism contract: the same config yields the same corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_queries: usize,
    pub n_impressions: usize,
    pub n_categories: usize,
    /// Offset between neighbouring categories' descriptor windows.
    pub descriptor_stride: usize,
    /// Descriptors available to each category; windows overlap when this exceeds the stride.
    pub descriptor_window: usize,
    pub item_descriptors: (usize, usize),
    pub query_descriptors: (usize, usize),
    /// Impressions shown per (user, query) request.
    pub candidates_per_request: usize,
    /// Target share of candidates at each relevance level.
    pub rsl_mix: [f64; 4],
    pub click: ClickModel,
    pub rsl_thresholds: [f64; 3],
    pub sensitivity_alpha: f64,
    pub sensitivity_beta: f64,
    pub preferred_categories: (usize, usize),
    /// Chance a request's query comes from one of the user's preferred categories.
    pub preference_prob: f64,
    pub max_history: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 42,
            n_users: 1000,
            n_items: 2000,
            n_queries: 400,
            n_impressions: 100_000,
            n_categories: 16,
            descriptor_stride: 5,
            descriptor_window: 10,
            item_descriptors: (3, 8),
            query_descriptors: (0, 3),
            candidates_per_request: 20,
            rsl_mix: [0.2, 0.2, 0.3, 0.3],
            click: ClickModel::default(),
            rsl_thresholds: DEFAULT_RSL_THRESHOLDS,
            sensitivity_alpha: 2.0,
            sensitivity_beta: 2.0,
            preferred_categories: (2, 3),
            preference_prob: 0.8,
            max_history: MAX_HISTORY,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        for (name, v) in [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_queries", self.n_queries),
            ("n_impressions", self.n_impressions),
            ("n_categories", self.n_categories),
            ("descriptor_stride", self.descriptor_stride),
            ("candidates_per_request", self.candidates_per_request),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        let (lo, hi) = self.item_descriptors;
        if lo == 0 || lo > hi || hi > self.descriptor_window {
            return bad(format!(
                "item_descriptors {lo}..={hi} must be non-empty and fit in descriptor_window {}",
                self.descriptor_window
            ));
        }
        if self.descriptor_window > self.descriptor_stride * self.n_categories {
            return bad("descriptor_window exceeds the descriptor vocabulary".into());
        }
        if self.query_descriptors.0 > self.query_descriptors.1 {
            return bad("query_descriptors range is empty".into());
        }
        let (plo, phi) = self.preferred_categories;
        if plo == 0 || plo > phi || phi > self.n_categories {
            return bad(format!("preferred_categories {plo}..={phi} is invalid"));
        }
        let t = self.rsl_thresholds;
        if !(0.0 < t[0] && t[0] < t[1] && t[1] < t[2] && t[2] < 1.0) {
            return bad(format!("rsl_thresholds {t:?} must be strictly increasing in (0, 1)"));
        }
        if self.rsl_mix.iter().any(|&m| !(m >= 0.0)) || self.rsl_mix.iter().sum::<f64>() <= 0.0 {
            return bad(format!("rsl_mix {:?} must be non-negative with a positive sum", self.rsl_mix));
        }
        if !(self.sensitivity_alpha > 0.0 && self.sensitivity_beta > 0.0) {
            return bad("sensitivity Beta parameters must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.preference_prob) {
            return bad("preference_prob must be in [0, 1]".into());
        }
        if self.max_history == 0 || self.max_history > MAX_HISTORY {
            return bad(format!("max_history must be in 1..={MAX_HISTORY}"));
        }
        let c = self.click;
        if ![c.w_quality, c.w_relevance, c.bias].iter().all(|v| v.is_finite()) {
            return bad("click model coefficients must be finite".into());
        }
        Ok(())
    }
}

/// Generated impressions with their row-aligned ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub truth: Vec<GroundTruth>,
}

struct Text {
    category: usize,
    /// Sorted, distinct.
    descriptors: Vec<usize>,
    text: String,
}

fn render(category: usize, descriptors: &[usize]) -> String {
    let mut s = format!("cat{category}");
    for d in descriptors {
        s.push_str(&format!(" w{d}"));
    }
    s
}

/// Same arithmetic as [`super::ground_truth_relevance`] on parsed texts.
fn relevance(q: &Text, i: &Text) -> f64 {
    let category = if q.category == i.category { 0.5 } else { 0.0 };
    let inter = q.descriptors.iter().filter(|d| i.descriptors.binary_search(d).is_ok()).count();
    let union = q.descriptors.len() + i.descriptors.len() - inter;
    let jaccard = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    category + 0.5 * jaccard
}

/// Levels to try for a target level, nearest first, lower level first on ties.
fn fallback_order(level: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by_key(|&l| (l.abs_diff(level), l));
    order
}

pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_desc = cfg.descriptor_stride * cfg.n_categories;
    let beta = Beta::new(cfg.sensitivity_alpha, cfg.sensitivity_beta)
        .map_err(|e| Error::Validation(format!("sensitivity distribution: {e}")))?;

    let mut sensitivity = Vec::with_capacity(cfg.n_users);
    let mut preferred = Vec::with_capacity(cfg.n_users);
    let categories: Vec<usize> = (0..cfg.n_categories).collect();
    for _ in 0..cfg.n_users {
        sensitivity.push(beta.sample(&mut rng));
        let k = rng.random_range(cfg.preferred_categories.0..=cfg.preferred_categories.1);
        preferred.push(categories.choose_multiple(&mut rng, k).copied().collect::<Vec<_>>());
    }

    let mut items = Vec::with_capacity(cfg.n_items);
    let mut quality = Vec::with_capacity(cfg.n_items);
    for _ in 0..cfg.n_items {
        let category = rng.random_range(0..cfg.n_categories);
        let window: Vec<usize> = (0..cfg.descriptor_window)
            .map(|k| (category * cfg.descriptor_stride + k) % n_desc)
            .collect();
        let k = rng.random_range(cfg.item_descriptors.0..=cfg.item_descriptors.1);
        let mut descriptors: Vec<usize> = window.choose_multiple(&mut rng, k).copied().collect();
        descriptors.sort_unstable();
        quality.push(rng.random::<f64>());
        let text = render(category, &descriptors);
        items.push(Text {
            category,
            descriptors,
            text,
        });
    }

    let mut queries = Vec::with_capacity(cfg.n_queries);
    for _ in 0..cfg.n_queries {
        let seed_item = &items[rng.random_range(0..items.len())];
        let hi = cfg.query_descriptors.1.min(seed_item.descriptors.len());
        let lo = cfg.query_descriptors.0.min(hi);
        let k = rng.random_range(lo..=hi);
        let mut descriptors: Vec<usize> = seed_item
            .descriptors
            .choose_multiple(&mut rng, k)
            .copied()
            .collect();
        descriptors.sort_unstable();
        let text = render(seed_item.category, &descriptors);
        queries.push(Text {
            category: seed_item.category,
            descriptors,
            text,
        });
    }
    let mut queries_by_category = vec![Vec::new(); cfg.n_categories];
    for (q, t) in queries.iter().enumerate() {
        queries_by_category[t.category].push(q);
    }

    // Per-query candidate pools by relevance level.
    let mut pools: Vec<[Vec<usize>; 4]> = Vec::with_capacity(queries.len());
    let mut relevance_of: Vec<Vec<f64>> = Vec::with_capacity(queries.len());
    for q in &queries {
        let mut pool: [Vec<usize>; 4] = Default::default();
        let mut rel = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let r = relevance(q, item);
            pool[assign_rsl(r, &cfg.rsl_thresholds)? as usize - 1].push(i);
            rel.push(r);
        }
        pools.push(pool);
        relevance_of.push(rel);
    }

    let mix_total: f64 = cfg.rsl_mix.iter().sum();
    let mut histories: Vec<VecDeque<HistoryEntry>> = vec![VecDeque::new(); cfg.n_users];
    let mut samples = Vec::with_capacity(cfg.n_impressions);
    let mut truth = Vec::with_capacity(cfg.n_impressions);
    while samples.len() < cfg.n_impressions {
        let user = rng.random_range(0..cfg.n_users);
        let own = &queries_by_category[*preferred[user].choose(&mut rng).expect("non-empty")];
        let query = if rng.random::<f64>() < cfg.preference_prob && !own.is_empty() {
            own[rng.random_range(0..own.len())]
        } else {
            rng.random_range(0..queries.len())
        };
        let want = cfg.candidates_per_request.min(cfg.n_impressions - samples.len());
        let mut chosen: Vec<usize> = Vec::with_capacity(want);
        let mut attempts = 0;
        while chosen.len() < want && attempts < want * 20 {
            attempts += 1;
            let mut u = rng.random::<f64>() * mix_total;
            let mut level = 3;
            for (l, &m) in cfg.rsl_mix.iter().enumerate() {
                if u < m {
                    level = l;
                    break;
                }
                u -= m;
            }
            let pool = fallback_order(level)
                .into_iter()
                .map(|l| &pools[query][l])
                .find(|p| !p.is_empty())
                .expect("every item lands in some level");
            let item = pool[rng.random_range(0..pool.len())];
            if !chosen.contains(&item) {
                chosen.push(item);
            }
        }
        let history: Vec<HistoryEntry> = histories[user].iter().cloned().collect();
        let qt = &queries[query];
        let mut clicked = Vec::new();
        for &item in &chosen {
            let it = &items[item];
            let r = relevance_of[query][item];
            let (click, p) = simulate_click(sensitivity[user], quality[item], r, &cfg.click, &mut rng);
            let contains = qt.category == it.category
                && qt.descriptors.iter().all(|d| it.descriptors.binary_search(d).is_ok());
            samples.push(Sample {
                user_id: user as u32,
                query_text: qt.text.clone(),
                item_id: item as u32,
                item_text: it.text.clone(),
                category_match: qt.category == it.category,
                contains_query: contains,
                rsl: assign_rsl(r, &cfg.rsl_thresholds)?,
                click,
                history: history.clone(),
            });
            truth.push(GroundTruth {
                relevance: r,
                quality: quality[item],
                sensitivity: sensitivity[user],
                true_click_prob: p,
            });
            if click {
                clicked.push(item);
            }
        }
        let h = &mut histories[user];
        for item in clicked {
            h.push_front(HistoryEntry {
                query: qt.text.clone(),
                item_text: items[item].text.clone(),
            });
        }
        h.truncate(cfg.max_history);
    }
    Ok(Corpus { samples, truth })
}
