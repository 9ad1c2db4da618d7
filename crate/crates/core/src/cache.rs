//! Content-addressed cache for generated datasets and trained checkpoints.
//!
//! The root is `$SAVOS_LAB_CACHE`, falling back to `<tmp>/savos-lab-cache`. Entries are
//! keyed by a hash of everything that determines them, so a stale entry is never reused.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::synthgen::io::{read_dataset, read_dataset_manifest, write_dataset};
use crate::synthgen::{generate_dataset, GenConfig, VideoSample};

pub const CACHE_ENV: &str = "SAVOS_LAB_CACHE";

pub fn cache_root() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("savos-lab-cache"))
}

/// First 16 hex digits of the SHA-256 of the JSON form of `key`.
pub fn key_of<K: Serialize>(key: &K) -> Result<String> {
    let json = serde_json::to_vec(key)?;
    Ok(hex::encode(Sha256::digest(&json))[..16].to_string())
}

#[derive(Serialize)]
struct DatasetKey<'a> {
    config: &'a GenConfig,
    base_seed: u64,
    count: usize,
    format: u32,
}

pub fn dataset_dir(root: &Path, cfg: &GenConfig, base_seed: u64, count: usize) -> Result<PathBuf> {
    let key = key_of(&DatasetKey {
        config: cfg,
        base_seed,
        count,
        format: crate::synthgen::FORMAT_VERSION,
    })?;
    Ok(root.join("datasets").join(key))
}

/// Reads the dataset from the cache, generating and storing it on a miss.
pub fn cached_dataset(
    root: &Path,
    cfg: &GenConfig,
    base_seed: u64,
    count: usize,
) -> Result<Vec<VideoSample>> {
    let dir = dataset_dir(root, cfg, base_seed, count)?;
    if let Ok(m) = read_dataset_manifest(&dir) {
        if m.base_seed == base_seed
            && m.videos.len() == count
            && &m.config.clone().with_seed(cfg.seed) == cfg
        {
            return read_dataset(&dir);
        }
    }
    let videos = generate_dataset(cfg, base_seed, count)?;
    let tmp = dir.with_extension(format!("tmp{}", std::process::id()));
    let _ = fs::remove_dir_all(&tmp);
    write_dataset(&videos, base_seed, cfg, &tmp)?;
    let _ = fs::remove_dir_all(&dir);
    fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
    Ok(videos)
}

/// Loads the checkpoint stored under `key`, or runs `make` and stores its result.
pub fn cached_checkpoint<K: Serialize>(
    root: &Path,
    key: &K,
    make: impl FnOnce() -> Result<Checkpoint>,
) -> Result<(Checkpoint, bool)> {
    let path = root
        .join("checkpoints")
        .join(format!("{}.safetensors", key_of(key)?));
    if path.exists() {
        if let Ok(ck) = Checkpoint::load(&path) {
            return Ok((ck, true));
        }
    }
    let ck = make()?;
    ck.save(&path)?;
    Ok((ck, false))
}
