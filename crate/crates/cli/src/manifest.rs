//! Output directories and the run manifest written into each of them.

use std::ffi::OsString;
use std::fmt::{Debug, Display};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize, Serializer};

use crate::{CmdResult, Failure};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Every option after defaults were applied.
    pub options: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    /// Arguments that reproduce the run, minus `--out`.
    pub argv: Vec<String>,
    /// Files written by the run, relative to the output directory.
    pub files: Vec<String>,
}

pub fn display<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

pub fn display_all<T: Display, S: Serializer>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| x.to_string()))
}

pub fn debug<T: Debug, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(&format_args!("{v:?}"))
}

/// `args` with any `--out DIR` / `--out=DIR` removed.
pub fn strip_out(args: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.iter().map(|a| a.to_string_lossy().into_owned());
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
        } else if !a.starts_with("--out=") {
            out.push(a);
        }
    }
    out
}

/// An output directory collecting the files one command writes.
pub struct RunDir {
    pub dir: PathBuf,
    files: Vec<String>,
}

pub fn io_fail(path: &Path, e: impl Display) -> Failure {
    Failure::io(format!("{}: {e}", path.display()))
}

impl RunDir {
    pub fn create(out: &Option<PathBuf>, subcommand: &str) -> CmdResult<Self> {
        let dir = out.clone().unwrap_or_else(|| Path::new("runs").join(subcommand));
        fs::create_dir_all(&dir).map_err(|e| io_fail(&dir, e))?;
        Ok(RunDir { dir, files: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Record a file some other writer created inside the directory.
    pub fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.dir).unwrap_or(path);
        self.files.push(rel.to_string_lossy().replace('\\', "/"));
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> CmdResult<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_fail(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| io_fail(&path, e))?;
        self.record(&path);
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> CmdResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::io(e.to_string()))?;
        self.write(name, text + "\n")
    }

    /// Write `manifest.json` for a finished run.
    pub fn finish(mut self, subcommand: &str, options: &impl Serialize, seed: Option<u64>, args: &[OsString]) -> CmdResult {
        let manifest = RunManifest {
            subcommand: subcommand.into(),
            options: serde_json::to_value(options).map_err(|e| Failure::io(e.to_string()))?,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            argv: strip_out(args),
            files: std::mem::take(&mut self.files),
        };
        self.write_json(MANIFEST_FILE, &manifest)?;
        Ok(())
    }
}

pub fn read(path: &Path) -> CmdResult<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_fail(path, format!("invalid run manifest: {e}")))
}
