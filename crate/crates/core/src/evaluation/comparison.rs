use std::fmt;

use super::metrics::{rela_impr, MetricReport, ScoredImpression};
use crate::data::Sample;
use crate::encoder::{EmbeddingIndex, TextEncoder};
use crate::error::{Error, Result};
use crate::model::{ModelInputs, PrectrModel};

/// Final scores of `model` on `samples`, paired with the fields the
/// metrics need.
pub fn score_samples(
    model: &PrectrModel,
    samples: &[Sample],
    index: &EmbeddingIndex,
    encoder: Option<&TextEncoder>,
) -> Result<Vec<ScoredImpression>> {
    let inputs = ModelInputs::prepare(samples, model.schema(), index, encoder)?;
    let scores = model.predict(&inputs)?;
    Ok(samples
        .iter()
        .zip(scores)
        .map(|(s, score)| ScoredImpression {
            user_id: s.user_id,
            query_text: s.query_text.clone(),
            item_id: s.item_id,
            item_text: s.item_text.clone(),
            score,
            click: s.click,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub report: MetricReport,
    /// Relative AUC improvement over the first row, in percent. `None`
    /// when the first row's AUC is exactly 0.5.
    pub rela_impr_auc: Option<f64>,
    pub rela_impr_gauc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub const HEADER: &'static str = "variant\tauc\trela_impr_auc\tgauc\trela_impr_gauc\trelevance_score";
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:+.2}%"))
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::HEADER)?;
        for r in &self.rows {
            writeln!(
                f,
                "{}\t{:.4}\t{}\t{:.4}\t{}\t{:.4}",
                r.name,
                r.report.auc,
                pct(r.rela_impr_auc),
                r.report.gauc,
                pct(r.rela_impr_gauc),
                r.report.relevance_score
            )?;
        }
        Ok(())
    }
}

fn relative(measured: f64, base: f64) -> Result<Option<f64>> {
    match rela_impr(measured, base) {
        Ok(v) => Ok(Some(v)),
        Err(Error::Division(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores `samples` with every variant (in parallel) and tabulates the
/// metrics, with RelaImpr measured against the first variant.
pub fn run_comparison(
    variants: &[(String, PrectrModel)],
    samples: &[Sample],
    index: &EmbeddingIndex,
    encoder: Option<&TextEncoder>,
) -> Result<ComparisonTable> {
    if variants.is_empty() {
        return Err(Error::Validation("no variants to compare".into()));
    }
    let reports: Vec<Result<MetricReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = variants
            .iter()
            .map(|(_, model)| {
                scope.spawn(move || {
                    let imps = score_samples(model, samples, index, encoder)?;
                    MetricReport::compute(&imps, index, encoder)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    });
    let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    let (base_auc, base_gauc) = (reports[0].auc, reports[0].gauc);
    let rows = variants
        .iter()
        .zip(reports)
        .map(|((name, _), report)| {
            Ok(ComparisonRow {
                name: name.clone(),
                rela_impr_auc: relative(report.auc, base_auc)?,
                rela_impr_gauc: relative(report.gauc, base_gauc)?,
                report,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ComparisonTable { rows })
}
