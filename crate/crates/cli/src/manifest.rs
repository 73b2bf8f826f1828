//! Run manifests, appended one JSON object per line to `runs.jsonl` in the
//! command's output directory.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_LOG: &str = "runs.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub settings: BTreeMap<String, String>,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub inputs: Vec<PathBuf>,
    /// Hash over the content of every input file, see [`content_hash`].
    pub input_hash: String,
    pub output_dir: PathBuf,
    pub exit_code: i32,
}

impl RunManifest {
    pub fn append(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir)?;
        let mut f = OpenOptions::new().create(true).append(true).open(self.output_dir.join(MANIFEST_LOG))?;
        writeln!(f, "{}", serde_json::to_string(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
pub fn read_manifests(dir: &Path) -> Result<Vec<RunManifest>> {
    let text = fs::read_to_string(dir.join(MANIFEST_LOG))?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Git blob id computed with SHA-256: `H("blob {len}\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

fn collect(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            if p.file_name().is_some_and(|n| n != MANIFEST_LOG) {
                collect(&p, out)?;
            }
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Tree-style hash over the inputs: one `"{blob}  {path}\n"` line per file,
/// directories walked in sorted order. Missing paths contribute nothing.
pub fn content_hash(inputs: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for input in inputs {
        let mut files = Vec::new();
        collect(input, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(input).ok().filter(|r| !r.as_os_str().is_empty()).unwrap_or(&f);
            h.update(format!("{}  {}\n", blob_hash(&fs::read(&f)?), rel.display()));
        }
    }
    Ok(hex::encode(h.finalize()))
}
