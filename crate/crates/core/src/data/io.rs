//! Dataset files.
//!
//! A dataset directory holds `manifest.json` and `episodes.jsonl`. Each
//! episode line is `{"obs": [[..]], "act": [[..]], "rew": [..], "meta":
//! {"env", "quality", "seed"}}`; reward-to-go is recomputed on load.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetManifest, Episode, EpisodeMeta};
use crate::envs::hex;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPISODES_FILE: &str = "episodes.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    obs: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    rew: Vec<f64>,
    meta: EpisodeMeta,
}

fn encode_episodes(episodes: &[Episode]) -> String {
    let mut out = String::new();
    for e in episodes {
        let r = Record {
            obs: e.observations.clone(),
            act: e.actions.clone(),
            rew: e.rewards.clone(),
            meta: e.meta.clone(),
        };
        let line = serde_json::to_string(&r).expect("episode serializes");
        writeln!(out, "{line}").expect("string write");
    }
    out
}

/// Writes the episode file and manifest into `dir`, returning the manifest
/// with the episode file hash filled in.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let body = encode_episodes(&ds.episodes);
    let mut manifest = ds.manifest.clone();
    manifest.episodes = ds.episodes.len();
    manifest.episodes_file = EPISODES_FILE.to_string();
    manifest.episodes_sha256 = hex(&Sha256::digest(body.as_bytes()));
    let ep_path = dir.join(EPISODES_FILE);
    std::fs::write(&ep_path, body).map_err(|e| Error::io(&ep_path, e))?;
    let m_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&m_path, json + "\n").map_err(|e| Error::io(&m_path, e))?;
    Ok(manifest)
}

/// Parses episode lines. `path` is used in error messages.
pub fn parse_episodes(text: &str, path: &Path) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
        let obs_dim = r.obs.first().map_or(0, Vec::len);
        if r.obs.iter().any(|o| o.len() != obs_dim) {
            return Err(perr("observations have differing lengths".into()));
        }
        let ep = Episode::new(r.obs, r.act, r.rew, r.meta).map_err(|e| perr(e.to_string()))?;
        out.push(ep);
    }
    Ok(out)
}

/// Reads a dataset from its directory or its manifest path, checking the
/// episode file against the manifest hash and count.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let (dir, m_path): (PathBuf, PathBuf) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let text = std::fs::read_to_string(&m_path).map_err(|e| Error::io(&m_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: m_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{}: schema version {} is not supported (expected {SCHEMA_VERSION})",
            m_path.display(),
            manifest.schema_version
        )));
    }
    let ep_path = dir.join(&manifest.episodes_file);
    let body = std::fs::read_to_string(&ep_path).map_err(|e| Error::io(&ep_path, e))?;
    let digest = hex(&Sha256::digest(body.as_bytes()));
    if digest != manifest.episodes_sha256 {
        return Err(Error::Config(format!(
            "{}: content hash {digest} does not match the manifest ({})",
            ep_path.display(),
            manifest.episodes_sha256
        )));
    }
    let episodes = parse_episodes(&body, &ep_path)?;
    if episodes.len() != manifest.episodes {
        return Err(Error::Config(format!(
            "{}: {} episodes, manifest says {}",
            ep_path.display(),
            episodes.len(),
            manifest.episodes
        )));
    }
    Ok(Dataset { manifest, episodes })
}
