//! Run directories and their manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::svg;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "NRDM_OUT_ROOT";
pub const MANIFEST: &str = "manifest.json";

/// An output directory being filled by one command.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    started: DateTime<Utc>,
    files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    started: String,
    finished: String,
    config: &'a C,
    files: Vec<FileEntry>,
}

pub fn out_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunDir {
    /// Creates `<root>/<command>-<timestamp>-seed<seed>`, adding a numeric
    /// suffix when that name is taken.
    pub fn create(root: &Path, command: &str, seed: u64) -> Result<RunDir> {
        let started = Utc::now();
        fs::create_dir_all(root).with_context(|| format!("cannot create output root {}", root.display()))?;
        let stem = format!("{command}-{}-seed{seed}", started.format("%Y%m%dT%H%M%S"));
        let mut k = 0;
        let path = loop {
            let name = if k == 0 { stem.clone() } else { format!("{stem}-{k}") };
            let p = root.join(name);
            match fs::create_dir(&p) {
                Ok(()) => break p,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => k += 1,
                Err(e) => return Err(e).with_context(|| format!("cannot create run directory {}", p.display())),
            }
        };
        Ok(RunDir {
            path,
            command: command.to_string(),
            started,
            files: Vec::new(),
        })
    }

    /// A nested directory for one run of a sweep.
    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let p = self.path.join(name);
        fs::create_dir_all(&p).with_context(|| format!("cannot create {}", p.display()))?;
        Ok(p)
    }

    /// Writes `rel` (relative to the run directory) and records it.
    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path.join(rel.as_ref());
        fs::write(&p, bytes).with_context(|| format!("cannot write {}", p.display()))?;
        self.files.push(rel.as_ref().to_path_buf());
        Ok(())
    }

    /// Records a file some other routine already wrote.
    pub fn track(&mut self, rel: impl AsRef<Path>) {
        self.files.push(rel.as_ref().to_path_buf());
    }

    /// Writes a CSV table and, when one is defined for it, its plot.
    pub fn write_csv(&mut self, rel: impl AsRef<Path>, text: &str) -> Result<()> {
        let rel = rel.as_ref();
        self.write(rel, text)?;
        let name = rel.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(spec) = svg::plot_for(name) {
            let header = text.lines().next().unwrap_or_default();
            let has = |c: &str| header.split(',').any(|h| h == c);
            if has(spec.x) && spec.y.iter().all(|c| has(c)) {
                let plot = svg::render(text, &spec)?;
                self.write(rel.with_file_name(svg::svg_name(name)), plot)?;
            }
        }
        Ok(())
    }

    /// Hashes every recorded file and writes the manifest via a temporary
    /// file and a rename, so a manifest exists only for finished runs.
    pub fn finish(mut self, seed: u64, config: &impl Serialize) -> Result<PathBuf> {
        self.files.sort();
        self.files.dedup();
        let files = self
            .files
            .iter()
            .map(|rel| {
                let bytes = fs::read(self.path.join(rel)).with_context(|| format!("cannot read {}", rel.display()))?;
                Ok(FileEntry {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    bytes: bytes.len() as u64,
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            started: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            config,
            files,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let tmp = self.path.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, text).with_context(|| format!("cannot write {}", tmp.display()))?;
        fs::rename(&tmp, self.path.join(MANIFEST)).context("cannot finalize manifest")?;
        Ok(self.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directories_never_collide() {
        let root = tempfile::tempdir().unwrap();
        let a = RunDir::create(root.path(), "train", 4).unwrap();
        let b = RunDir::create(root.path(), "train", 4).unwrap();
        assert_ne!(a.path, b.path);
        assert!(a.path.file_name().unwrap().to_str().unwrap().ends_with("seed4") || b.path.to_str().unwrap().ends_with("-1"));
    }

    #[test]
    fn manifest_hashes_match_files() {
        let root = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(root.path(), "x", 0).unwrap();
        run.write_csv("train_log.csv", "step,loss,score_term\n0,1,1\n").unwrap();
        let dir = run.finish(0, &serde_json::json!({"a": 1})).unwrap();
        let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(MANIFEST)).unwrap()).unwrap();
        let files = m["files"].as_array().unwrap();
        assert_eq!(files.len(), 2);
        for f in files {
            let bytes = fs::read(dir.join(f["path"].as_str().unwrap())).unwrap();
            assert_eq!(f["sha256"].as_str().unwrap(), sha256_hex(&bytes));
        }
        assert!(!dir.join("manifest.json.tmp").exists());
    }
}
