use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use prectr::{Error, Result};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RESOLVED_FILE: &str = "config.resolved";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Dependency(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Refuses a non-empty directory unless `force` is set, then creates it.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::Validation(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// One command's record: what it read, what it wrote and how long it took.
pub struct RunManifest {
    command: String,
    started_unix: u64,
    clock: Instant,
    out_dir: PathBuf,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<String>,
}

impl RunManifest {
    pub fn start(command: &str, out_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            clock: Instant::now(),
            out_dir: out_dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records an input file and its digest. Missing inputs are dependency errors.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(Error::Dependency(format!("{} does not exist", path.display())));
        }
        let digest = sha256_file(path)?;
        self.inputs.push((path.to_path_buf(), digest));
        Ok(())
    }

    /// Path of an output file, recorded for the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.out_dir.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.output(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, text)?;
        Ok(())
    }

    /// Writes `config.resolved` and the manifest itself.
    pub fn finish(mut self, config: &RunConfig) -> Result<()> {
        self.write_text(RESOLVED_FILE, &config.to_text())?;
        let mut out = String::new();
        writeln!(out, "command\t{}", self.command).unwrap();
        writeln!(out, "started_unix\t{}", self.started_unix).unwrap();
        writeln!(out, "duration_secs\t{:.3}", self.clock.elapsed().as_secs_f64()).unwrap();
        for (path, digest) in &self.inputs {
            writeln!(out, "input\t{}\t{digest}", path.display()).unwrap();
        }
        for name in &self.outputs {
            let digest = sha256_file(&self.out_dir.join(name))?;
            writeln!(out, "output\t{name}\t{digest}").unwrap();
        }
        for (k, v) in config.entries() {
            writeln!(out, "config\t{k}={v}").unwrap();
        }
        fs::write(self.out_dir.join(MANIFEST_FILE), out)?;
        Ok(())
    }
}
