//! Content-addressed run directories and per-run artifacts.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ewc_core::train::{config_hash, content_hash};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// `--out-root`, else the manifest's directory, else `$EWCFT_OUT`, else
/// `./ewcft-runs`.
pub fn output_root(flag: Option<&Path>, manifest: Option<&Path>) -> PathBuf {
    flag.or(manifest)
        .map(Path::to_path_buf)
        .or_else(|| env::var_os("EWCFT_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("ewcft-runs"))
}

/// Hash of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(content_hash(&bytes))
}

/// Writes through a temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", path.display()))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

#[derive(Serialize, Deserialize)]
struct Artifact<T> {
    config_hash: String,
    value: T,
}

/// `<root>/<command>-<hash of config>`, holding `config.json` and the
/// command's artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path, command: &str, config: &impl Serialize) -> Result<Self> {
        let value = serde_json::to_value(config)?;
        let path = root.join(format!("{command}-{}", config_hash(&value)?));
        fs::create_dir_all(&path).with_context(|| format!("cannot create run directory {}", path.display()))?;
        let cfg_path = path.join("config.json");
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        if cfg_path.exists() {
            if fs::read_to_string(&cfg_path)? != text {
                bail!("{} belongs to a different configuration", cfg_path.display());
            }
            info!("resuming in {}", path.display());
        } else {
            write_atomic(&cfg_path, text.as_bytes())?;
            info!("run directory {}", path.display());
        }
        Ok(Self { path })
    }

    pub fn file(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.path.join(rel)
    }

    /// The artifact at `rel` when it was written for `hash`; otherwise
    /// computes, stores and returns it. An artifact written for another hash
    /// is an error rather than silently replaced.
    pub fn cached<T, F>(&self, rel: &str, hash: &str, compute: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        let path = self.file(rel);
        if path.exists() {
            let a: Artifact<T> = read_json(&path)?;
            if a.config_hash != hash {
                bail!(
                    "{} was written for config {}, this run expects {}; remove it to recompute",
                    path.display(),
                    a.config_hash,
                    hash
                );
            }
            info!("reusing {}", path.display());
            return Ok(a.value);
        }
        let value = compute()?;
        write_json(
            &path,
            &Artifact {
                config_hash: hash.to_string(),
                value: &value,
            },
        )?;
        Ok(value)
    }
}
