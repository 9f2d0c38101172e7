//! On-disk layout of a run, the run lock, failure markers and per-stage
//! file manifests.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vb_core::Error;
use walkdir::WalkDir;

use crate::config::RunConfig;

pub const LOCK_FILE: &str = ".vbiopsy.lock";
pub const FAILED_FILE: &str = "FAILED";
pub const PRODUCED_FILE: &str = "produced.json";
pub const CONFIG_ECHO: &str = "config.toml";

/// Paths of every stage directory under one output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn manifest(&self) -> PathBuf {
        self.stage("phantom").join("manifest.json")
    }

    pub fn preprocess_index(&self) -> PathBuf {
        self.stage("preprocess").join("index.json")
    }

    pub fn localize_index(&self) -> PathBuf {
        self.stage("localize").join("index.json")
    }

    pub fn folds(&self) -> PathBuf {
        self.stage("train").join("folds.json")
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.stage("train").join(format!("fold_{fold}"))
    }

    pub fn checkpoint(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("checkpoint.vbck")
    }

    /// Creates (or empties) a stage directory and writes the config echo.
    pub fn fresh_stage(&self, name: &str, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
        let dir = self.stage(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_text(&dir.join(CONFIG_ECHO), &cfg.to_toml())?;
        Ok(dir)
    }
}

/// Fails with the command that produces `path` when it is absent.
pub fn require(path: &Path, command: &'static str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            command,
        }
        .into())
    }
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Exclusive claim on an output root, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let path = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => bail!(
                "{} is locked by another run; remove {} if no run is active",
                root.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn clear_failed(root: &Path) -> anyhow::Result<()> {
    match fs::remove_file(root.join(FAILED_FILE)) {
        Err(e) if e.kind() != ErrorKind::NotFound => Err(e).context("removing FAILED marker"),
        _ => Ok(()),
    }
}

pub fn mark_failed(root: &Path, command: &str, err: &anyhow::Error) {
    let text = format!("command: {command}\nerror: {err:#}\n");
    if let Err(e) = fs::write(root.join(FAILED_FILE), text) {
        log::error!("could not write FAILED marker: {e}");
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProducedFile {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes every file of a stage directory, sorted by relative path, and
/// writes the list to `produced.json`.
pub fn write_produced(dir: &Path) -> anyhow::Result<Vec<ProducedFile>> {
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", dir.display()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under its root");
        if rel == Path::new(PRODUCED_FILE) {
            continue;
        }
        let bytes = fs::read(entry.path()).with_context(|| format!("reading {}", entry.path().display()))?;
        files.push(ProducedFile {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(&bytes),
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    write_json(&dir.join(PRODUCED_FILE), &files)?;
    Ok(files)
}
