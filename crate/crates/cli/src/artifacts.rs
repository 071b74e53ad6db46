//! Stage output directories: written under a temporary name, hashed into a
//! manifest, then renamed into place so a failed stage leaves nothing behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file this stage wrote, keyed by relative path.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f
            .read(&mut buf)
            .with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Regular files under `dir`, recursively, as sorted relative paths.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn rel_key(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Tracks input hashes for a stage; keys are paths relative to `base` when
/// the file lives under it.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    base: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl Inputs {
    pub fn new(base: &Path) -> Self {
        Inputs {
            base: base.to_path_buf(),
            hashes: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, path: &Path) -> Result<()> {
        if !path.is_file() {
            bail!("missing input {}", path.display());
        }
        let key = path
            .strip_prefix(&self.base)
            .map(rel_key)
            .unwrap_or_else(|_| rel_key(path));
        self.hashes.insert(key, sha256_file(path)?);
        Ok(())
    }

    pub fn add_dir(&mut self, dir: &Path) -> Result<()> {
        for rel in list_files(dir)? {
            self.add(&dir.join(rel))?;
        }
        Ok(())
    }
}

/// An output directory under construction.
pub struct StageDir {
    stage: String,
    target: PathBuf,
    tmp: PathBuf,
    finished: bool,
}

impl StageDir {
    pub fn create(stage: &str, target: &Path) -> Result<Self> {
        let parent = target.parent().unwrap_or(Path::new("."));
        let name = target
            .file_name()
            .context("stage directory has no name")?
            .to_string_lossy();
        let tmp = parent.join(format!(".{name}.tmp"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).with_context(|| format!("clearing {}", tmp.display()))?;
        }
        fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(StageDir {
            stage: stage.to_string(),
            target: target.to_path_buf(),
            tmp,
            finished: false,
        })
    }

    /// Where files should be written until [`StageDir::finish`].
    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.tmp.join(rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_json(&self, rel: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text)
    }

    /// Hash outputs, write the manifest and move the directory into place.
    pub fn finish(mut self, config_hash: &str, seed: u64, inputs: Inputs) -> Result<StageManifest> {
        let mut outputs = BTreeMap::new();
        for rel in list_files(&self.tmp)? {
            outputs.insert(rel_key(&rel), sha256_file(&self.tmp.join(&rel))?);
        }
        let manifest = StageManifest {
            stage: self.stage.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            seed,
            inputs: inputs.hashes,
            outputs,
        };
        self.write_json(MANIFEST, &manifest)?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.tmp, &self.target)
            .with_context(|| format!("moving {} to {}", self.tmp.display(), self.target.display()))?;
        self.finished = true;
        Ok(manifest)
    }
}

impl Drop for StageDir {
    fn drop(&mut self) {
        if !self.finished {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

pub fn read_manifest(dir: &Path) -> Result<StageManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
