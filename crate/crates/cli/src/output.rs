//! Artifact files. Each file gets a `<file>.meta.json` sidecar holding the
//! artifact version, command, config hash and a SHA-256 of the file itself.
//! Nothing run-dependent (times, paths, hostnames) is written, so identical
//! configs give byte-identical directories.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use bellnet_core::grid::GridFunction;
use bellnet_core::net::OperatorBlock;
use bellnet_core::ARTIFACT_VERSION;

#[derive(Serialize)]
struct Meta<'a> {
    artifact_version: &'a str,
    command: &'a str,
    config_hash: &'a str,
    file: &'a str,
    sha256: String,
}

pub struct Artifacts {
    dir: PathBuf,
    command: String,
    config_hash: String,
    written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn create(dir: &Path, command: &str, config_hash: String) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), command: command.into(), config_hash, written: vec![] })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn finish(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let bytes = std::fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
        let meta = Meta {
            artifact_version: ARTIFACT_VERSION,
            command: &self.command,
            config_hash: &self.config_hash,
            file: name,
            sha256: hex::encode(Sha256::digest(&bytes)),
        };
        let mut side = path.as_os_str().to_owned();
        side.push(".meta.json");
        std::fs::write(&side, serde_json::to_string_pretty(&meta)? + "\n")?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn target(&self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(path)
    }

    /// Writes a file through `body` (CSV writers take any `Write`).
    pub fn file(&mut self, name: &str, body: impl FnOnce(std::fs::File) -> bellnet_core::Result<()>) -> Result<PathBuf> {
        let path = self.target(name)?;
        body(std::fs::File::create(&path)?).with_context(|| format!("writing {}", path.display()))?;
        self.finish(name)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.target(name)?;
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
        self.finish(name)
    }

    /// Grid function as CSV plus its grid metadata file.
    pub fn grid(&mut self, name: &str, q: &GridFunction) -> Result<PathBuf> {
        let path = self.target(name)?;
        q.save(&path).with_context(|| format!("writing {}", path.display()))?;
        self.finish(name)
    }

    pub fn block(&mut self, name: &str, block: &OperatorBlock) -> Result<PathBuf> {
        let path = self.target(name)?;
        block.save(&path).with_context(|| format!("writing {}", path.display()))?;
        self.finish(name)
    }
}
