//! Ranking metrics and the variant comparison table.
//!
//! ```
//! use prectr::evaluation::{auc, rela_impr};
//!
//! let a = auc(&[0.9, 0.4, 0.4, 0.1], &[true, true, false, false]).unwrap();
//! assert_eq!(a, 0.875);
//! let pct = rela_impr(0.7546, 0.7527).unwrap();
//! assert!((pct - 0.75).abs() < 0.01);
//! ```

mod comparison;
mod metrics;

pub use comparison::{run_comparison, score_samples, ComparisonRow, ComparisonTable};
pub use metrics::{
    auc, auc_brute_force, gauc, per_user_auc, rank_queries, rela_impr, relevance_score, MetricReport,
    RankedQuery, ScoredImpression, RELEVANCE_TOP_K,
};
