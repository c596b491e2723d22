//! Text container for named parameters.
//!
//! ```text
//! prectr-checkpoint 1
//! meta<TAB>key<TAB>value            (zero or more)
//! param<TAB>name<TAB>group<TAB>d1xd2...
//! v1 v2 v3 ...                      (one line, 17 significant digits)
//! ```
//!
//! Values are written with 17 significant digits, so a save/load round
//! trip is exact at `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::params::{LrGroup, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "prectr-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta\t{k}\t{v}");
        }
        for (_, p) in self.params.iter() {
            let shape = p
                .value
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            let _ = writeln!(out, "param\t{}\t{}\t{shape}", p.name, p.group);
            let values: Vec<String> = p.value.data().iter().map(|&v| format_f64(v)).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == CHECKPOINT_MAGIC => {}
            Some((n, l)) => {
                return Err(Error::parse(path, n, format!("expected `{CHECKPOINT_MAGIC}`, found `{l}`")))
            }
            None => return Err(Error::parse(path, 1, "empty checkpoint")),
        }
        let mut ck = Checkpoint::default();
        while let Some((n, line)) = lines.next() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["meta", k, v] => {
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                ["param", name, group, shape] => {
                    let group: LrGroup = group
                        .parse()
                        .map_err(|e: Error| Error::parse(path, n, e.to_string()))?;
                    let shape = shape
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::parse(path, n, format!("bad shape: {e}")))?;
                    let (vn, vline) = lines
                        .next()
                        .ok_or_else(|| Error::parse(path, n + 1, "missing value line"))?;
                    let data = vline
                        .split(' ')
                        .map(|v| v.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::parse(path, vn, format!("bad value: {e}")))?;
                    let value = Tensor::new(shape, data)
                        .map_err(|e| Error::parse(path, vn, e.to_string()))?;
                    ck.params
                        .add(name, group, value)
                        .map_err(|e| Error::parse(path, n, e.to_string()))?;
                }
                _ => return Err(Error::parse(path, n, format!("unrecognised line `{line}`"))),
            }
        }
        Ok(ck)
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    fs::write(path, ck.to_text())?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    Checkpoint::parse(&text, path)
}
