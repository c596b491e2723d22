use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use super::{GroundTruth, HistoryEntry, Sample, MAX_HISTORY};
use crate::error::{Error, Result};

pub const DATASET_COLUMNS: [&str; 9] = [
    "user_id",
    "query_text",
    "item_id",
    "item_text",
    "category_match",
    "contains_query",
    "rsl",
    "click",
    "history",
];

pub const GROUND_TRUTH_COLUMNS: [&str; 5] =
    ["row", "relevance", "quality", "sensitivity", "true_click_prob"];

fn check_text(text: &str, what: &str) -> Result<()> {
    if text.contains(['\t', '\n', '\r', ';', '^']) {
        return Err(Error::Validation(format!(
            "{what} {text:?} contains a tab, newline, semicolon or caret"
        )));
    }
    Ok(())
}

fn flag(b: bool) -> u8 {
    b as u8
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", DATASET_COLUMNS.join("\t"))?;
    for s in samples {
        check_text(&s.query_text, "query")?;
        check_text(&s.item_text, "item text")?;
        let mut history = String::new();
        for (k, h) in s.history.iter().enumerate() {
            check_text(&h.query, "history query")?;
            check_text(&h.item_text, "history item")?;
            if k > 0 {
                history.push(';');
            }
            history.push_str(&h.query);
            history.push('^');
            history.push_str(&h.item_text);
        }
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.user_id,
            s.query_text,
            s.item_id,
            s.item_text,
            flag(s.category_match),
            flag(s.contains_query),
            s.rsl,
            flag(s.click),
            history
        )?;
    }
    w.flush()?;
    Ok(())
}

fn parse_flag(v: &str, path: &Path, line: usize, col: &str) -> Result<bool> {
    match v {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::parse(path, line, format!("{col} must be 0 or 1, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, path: &Path, line: usize, col: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::parse(path, line, format!("bad {col} `{v}`: {e}")))
}

fn check_header(header: Option<std::io::Result<String>>, expect: &[&str], path: &Path) -> Result<()> {
    let header = header.transpose()?.unwrap_or_default();
    if header != expect.join("\t") {
        return Err(Error::parse(path, 1, format!("expected header `{}`", expect.join("\\t"))));
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let mut lines = BufReader::new(File::open(path)?).lines();
    check_header(lines.next(), &DATASET_COLUMNS, path)?;
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let n = k + 2;
        let line = line?;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != DATASET_COLUMNS.len() {
            return Err(Error::parse(
                path,
                n,
                format!("expected {} columns, found {}", DATASET_COLUMNS.len(), f.len()),
            ));
        }
        for (text, col) in [(f[1], "query_text"), (f[3], "item_text")] {
            if text.contains([';', '^']) {
                return Err(Error::parse(path, n, format!("{col} contains a semicolon or caret")));
            }
        }
        let rsl: u8 = parse_num(f[6], path, n, "rsl")?;
        if !(1..=4).contains(&rsl) {
            return Err(Error::parse(path, n, format!("rsl {rsl} is outside 1..=4")));
        }
        let mut history = Vec::new();
        if !f[8].is_empty() {
            for entry in f[8].split(';') {
                let Some((q, i)) = entry.split_once('^') else {
                    return Err(Error::parse(path, n, format!("history entry `{entry}` lacks `^`")));
                };
                if q.is_empty() || i.is_empty() || i.contains('^') {
                    return Err(Error::parse(path, n, format!("malformed history entry `{entry}`")));
                }
                history.push(HistoryEntry {
                    query: q.to_string(),
                    item_text: i.to_string(),
                });
            }
        }
        if history.len() > MAX_HISTORY {
            return Err(Error::parse(
                path,
                n,
                format!("history has {} entries, limit is {MAX_HISTORY}", history.len()),
            ));
        }
        out.push(Sample {
            user_id: parse_num(f[0], path, n, "user_id")?,
            query_text: f[1].to_string(),
            item_id: parse_num(f[2], path, n, "item_id")?,
            item_text: f[3].to_string(),
            category_match: parse_flag(f[4], path, n, "category_match")?,
            contains_query: parse_flag(f[5], path, n, "contains_query")?,
            rsl,
            click: parse_flag(f[7], path, n, "click")?,
            history,
        });
    }
    Ok(out)
}

/// Sidecar rows keyed by dataset row number (0-based, header excluded).
/// Floats use the shortest exact representation.
pub fn write_ground_truth(path: impl AsRef<Path>, truth: &[GroundTruth]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", GROUND_TRUTH_COLUMNS.join("\t"))?;
    for (row, t) in truth.iter().enumerate() {
        writeln!(
            w,
            "{row}\t{}\t{}\t{}\t{}",
            t.relevance, t.quality, t.sensitivity, t.true_click_prob
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>> {
    let path = path.as_ref();
    let mut lines = BufReader::new(File::open(path)?).lines();
    check_header(lines.next(), &GROUND_TRUTH_COLUMNS, path)?;
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let n = k + 2;
        let line = line?;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != GROUND_TRUTH_COLUMNS.len() {
            return Err(Error::parse(path, n, format!("expected 5 columns, found {}", f.len())));
        }
        let row: usize = parse_num(f[0], path, n, "row")?;
        if row != k {
            return Err(Error::parse(path, n, format!("row {row} out of sequence, expected {k}")));
        }
        out.push(GroundTruth {
            relevance: parse_num(f[1], path, n, "relevance")?,
            quality: parse_num(f[2], path, n, "quality")?,
            sensitivity: parse_num(f[3], path, n, "sensitivity")?,
            true_click_prob: parse_num(f[4], path, n, "true_click_prob")?,
        });
    }
    Ok(out)
}

/// Sequential train / validation / test ranges in 78 / 11 / 11 proportion.
/// The test slice absorbs rounding.
pub fn split_sequential(n: usize) -> [Range<usize>; 3] {
    let train = n * 78 / 100;
    let valid = n * 11 / 100;
    [0..train, train..train + valid, train + valid..n]
}
