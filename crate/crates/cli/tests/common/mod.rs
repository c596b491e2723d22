#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prectr_cli::manifest::{sha256_file, MANIFEST_FILE};

pub fn prectr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prectr"))
        .args(args)
        .output()
        .expect("failed to launch prectr")
}

/// Runs `prectr` and panics with its stderr unless it exits 0.
pub fn ok(args: &[&str]) -> String {
    let out = prectr(args);
    assert!(
        out.status.success(),
        "prectr {} failed with {:?}:\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// `metric<TAB>value` file as a map.
pub fn read_metrics(path: &Path) -> BTreeMap<String, f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('\t').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

/// Digest of every artifact in `dir` except the manifest, which records
/// a wall-clock time.
pub fn artifact_digests(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if path.is_file() && name != MANIFEST_FILE {
            out.insert(name, sha256_file(&path).unwrap());
        }
    }
    out
}

/// Paths of a full pipeline run: corpus, encoder and index.
pub struct Pipeline {
    pub root: PathBuf,
    pub data: PathBuf,
    pub encoder: PathBuf,
    pub index: PathBuf,
}

impl Pipeline {
    pub fn train(&self) -> PathBuf {
        self.data.join("train.tsv")
    }

    pub fn validation(&self) -> PathBuf {
        self.data.join("validation.tsv")
    }

    pub fn test(&self) -> PathBuf {
        self.data.join("test.tsv")
    }
}

/// gen-data, encoder pretrain and finetune on the train split, and an
/// index over all three splits.
pub fn pipeline(root: &Path, n_impressions: usize) -> Pipeline {
    let data = root.join("data");
    let n = n_impressions.to_string();
    ok(&["gen-data", "--out-dir", p(&data), "--n-impressions", &n]);
    let train = data.join("train.tsv");
    let pre = root.join("encoder_pre");
    ok(&["encoder", "pretrain", "--out-dir", p(&pre), "--data", p(&train)]);
    let fine = root.join("encoder");
    let pre_ckpt = pre.join("encoder.ckpt");
    ok(&[
        "encoder", "finetune", "--out-dir", p(&fine), "--checkpoint", p(&pre_ckpt), "--data", p(&train),
    ]);
    let index = root.join("index");
    let encoder = fine.join("encoder.ckpt");
    ok(&[
        "encoder",
        "build-index",
        "--out-dir",
        p(&index),
        "--checkpoint",
        p(&encoder),
        "--data",
        p(&train),
        p(&data.join("validation.tsv")),
        p(&data.join("test.tsv")),
    ]);
    Pipeline {
        root: root.to_path_buf(),
        data,
        encoder,
        index: index.join("index.tsv"),
    }
}

/// Trains into `root/<name>` with the desk preset plus `flags`.
pub fn train_variant(pl: &Pipeline, name: &str, flags: &[&str]) -> PathBuf {
    let out = pl.root.join(name);
    let train = pl.train();
    let mut args = vec![
        "train",
        "--out-dir",
        p(&out),
        "--data",
        p(&train),
        "--index",
        p(&pl.index),
        "--set",
        "preset=desk",
    ];
    args.extend_from_slice(flags);
    ok(&args);
    out.join("model.ckpt")
}
