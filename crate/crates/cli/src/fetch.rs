//! Dataset download with checksum verification.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const DEFAULT_BASE_URL: &str = "http://www.princeton.edu/~jzthree/datasets/ICML2014/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// Pinned digest. When absent the digest of the first download is
    /// recorded next to the file and enforced on later runs.
    #[serde(default)]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub base_url: String,
    pub files: Vec<ManifestEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            base_url: DEFAULT_BASE_URL.to_string(),
            files: ["cullpdb+profile_6133_filtered.npy.gz", "cb513+profile_split1.npy.gz"]
                .into_iter()
                .map(|name| ManifestEntry {
                    name: name.to_string(),
                    sha256: None,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchStatus {
    AlreadyPresent,
    Downloaded,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

fn expected_digest(entry: &ManifestEntry, dest: &Path) -> CliResult<Option<String>> {
    if let Some(h) = &entry.sha256 {
        return Ok(Some(h.to_lowercase()));
    }
    let side = sidecar(dest);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| CliError::io(format!("reading {}", side.display()), e))?;
        return Ok(text.split_whitespace().next().map(str::to_lowercase));
    }
    Ok(None)
}

fn download(url: &str) -> CliResult<Vec<u8>> {
    let fail = |message: String| CliError::Fetch {
        url: url.to_string(),
        message,
        hint: format!(
            "Download the file manually from {url} and place it in the data directory, then re-run fetch to verify it."
        ),
    };
    if let Some(path) = url.strip_prefix("file://") {
        return fs::read(path).map_err(|e| fail(e.to_string()));
    }
    let resp = reqwest::blocking::get(url).map_err(|e| fail(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(fail(format!("HTTP status {}", resp.status())));
    }
    Ok(resp.bytes().map_err(|e| fail(e.to_string()))?.to_vec())
}

/// Ensures `entry` is present in `out_dir` with the expected digest.
pub fn fetch_entry(base_url: &str, entry: &ManifestEntry, out_dir: &Path) -> CliResult<FetchStatus> {
    let dest = out_dir.join(&entry.name);
    let expected = expected_digest(entry, &dest)?;
    let check = |bytes: &[u8]| -> CliResult<String> {
        let actual = sha256_hex(bytes);
        match &expected {
            Some(e) if *e != actual => Err(CliError::Integrity {
                name: entry.name.clone(),
                expected: e.clone(),
                actual,
            }),
            _ => Ok(actual),
        }
    };
    if dest.exists() {
        let bytes = fs::read(&dest).map_err(|e| CliError::io(format!("reading {}", dest.display()), e))?;
        let actual = check(&bytes)?;
        if expected.is_none() {
            fs::write(sidecar(&dest), format!("{actual}  {}\n", entry.name))
                .map_err(|e| CliError::io("writing digest", e))?;
        }
        return Ok(FetchStatus::AlreadyPresent);
    }
    let url = format!("{}{}", base_url, entry.name);
    log::info!("downloading {url}");
    let bytes = download(&url)?;
    let actual = check(&bytes)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(format!("creating {}", out_dir.display()), e))?;
    let tmp = out_dir.join(format!(".{}.partial", entry.name));
    fs::write(&tmp, &bytes).map_err(|e| CliError::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, &dest).map_err(|e| CliError::io(format!("moving into {}", dest.display()), e))?;
    if expected.is_none() {
        log::warn!("{} has no pinned digest; recording {actual}", entry.name);
        fs::write(sidecar(&dest), format!("{actual}  {}\n", entry.name)).map_err(|e| CliError::io("writing digest", e))?;
    }
    Ok(FetchStatus::Downloaded)
}

pub fn fetch_all(manifest: &Manifest, out_dir: &Path) -> CliResult<Vec<(String, FetchStatus)>> {
    let base = if manifest.base_url.ends_with('/') {
        manifest.base_url.clone()
    } else {
        format!("{}/", manifest.base_url)
    };
    manifest
        .files
        .iter()
        .map(|e| fetch_entry(&base, e, out_dir).map(|s| (e.name.clone(), s)))
        .collect()
}
