//! Binary checkpoints: a magic tag, a JSON header, then raw little-endian
//! `f64` payloads in header order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainLogRow};
use crate::error::{Error, Result};
use crate::nas::Genotype;

const MAGIC: &[u8; 8] = b"MEFNASCK";
const VERSION: u32 = 1;

/// Named arrays of one state group (network weights, critic weights, an
/// optimizer's moments).
pub type Group = Vec<(String, ArrayD<f64>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub total_steps: usize,
    pub config: TrainConfig,
    pub genotype: Genotype,
    pub log: Vec<TrainLogRow>,
    pub groups: Vec<(String, Group)>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: usize,
    total_steps: usize,
    config: TrainConfig,
    genotype: Genotype,
    log: Vec<TrainLogRow>,
    tensors: Vec<Entry>,
}

fn ckpt_err(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Option<&Group> {
        self.groups.iter().find(|(g, _)| g == name).map(|(_, v)| v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tensors = self
            .groups
            .iter()
            .flat_map(|(g, vs)| vs.iter().map(move |(n, a)| Entry { group: g.clone(), name: n.clone(), shape: a.shape().to_vec() }))
            .collect();
        let header = Header {
            step: self.step,
            total_steps: self.total_steps,
            config: self.config.clone(),
            genotype: self.genotype.clone(),
            log: self.log.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| ckpt_err(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let file = fs::File::create(&tmp).map_err(|e| ckpt_err(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for (_, vs) in &self.groups {
                for (_, a) in vs {
                    for v in a.iter() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            w.flush()
        };
        write(&mut w).map_err(|e| ckpt_err(&tmp, e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| ckpt_err(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| ckpt_err(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(ckpt_err(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(ckpt_err(path, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| ckpt_err(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| ckpt_err(path, e))?;
        let mut payload = bytes[20 + hlen..].chunks_exact(8);
        let mut groups: Vec<(String, Group)> = Vec::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data: Vec<f64> = payload
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.len() != n {
                return Err(ckpt_err(path, format!("truncated payload at `{}`", e.name)));
            }
            let a = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|err| ckpt_err(path, err))?;
            match groups.last_mut() {
                Some((g, vs)) if *g == e.group => vs.push((e.name, a)),
                _ => groups.push((e.group, vec![(e.name, a)])),
            }
        }
        if payload.next().is_some() {
            return Err(ckpt_err(path, "trailing bytes after payload"));
        }
        Ok(Checkpoint {
            step: header.step,
            total_steps: header.total_steps,
            config: header.config,
            genotype: header.genotype,
            log: header.log,
            groups,
        })
    }
}

pub fn checkpoint_path(dir: impl AsRef<Path>, step: usize) -> PathBuf {
    dir.as_ref().join("ckpt").join(format!("{step}.bin"))
}

/// The checkpoint with the highest step in `dir/ckpt`, or `path` itself when
/// it names a file.
pub fn latest_checkpoint(path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    let dir = path.join("ckpt");
    let entries = fs::read_dir(&dir).map_err(|e| ckpt_err(&dir, e))?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            let step: usize = p.file_stem()?.to_str()?.parse().ok()?;
            (p.extension()? == "bin").then_some((step, p))
        })
        .max_by_key(|(s, _)| *s)
        .map(|(_, p)| p)
        .ok_or_else(|| ckpt_err(&dir, "no checkpoints found"))
}
