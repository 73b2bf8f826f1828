use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LatencyTable;
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::ops::OpName;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeBlock {
    pub module: String,
    pub slot: usize,
    pub op: String,
}

impl GenotypeBlock {
    pub fn tag(&self) -> String {
        block_tag(&self.module, self.slot)
    }
}

pub fn block_tag(module: &str, slot: usize) -> String {
    format!("{module}.slot{slot}")
}

/// A discretized architecture: one operator per search block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub blocks: Vec<GenotypeBlock>,
    pub base_channels: usize,
    pub eta: f64,
    pub seed: u64,
    pub estimated_latency_ms: f64,
    pub parameter_count: usize,
    /// Structure of the network the blocks belong to.
    #[serde(default)]
    pub network: Option<NetConfig>,
}

impl Genotype {
    /// Every block of `cfg` set to the member of its candidate set matching
    /// `family` (e.g. `"DC-5"` selects DC-5 for relighting, RDC-5 for detail
    /// repletion and DeC-5 for alignment). Metadata is left at zero.
    pub fn uniform(cfg: &NetConfig, family: &str) -> Result<Self> {
        let base: OpName = family.parse()?;
        let blocks = cfg
            .layout()
            .into_iter()
            .map(|b| {
                let op = b
                    .candidates
                    .iter()
                    .find(|c| {
                        let n: OpName = c.parse().expect("candidate names are valid");
                        n.kernel == base.kernel && n.dilation == base.dilation
                    })
                    .or_else(|| b.candidates.iter().find(|c| c.ends_with(&format!("-{}", base.kernel))))
                    .unwrap_or(&b.candidates[0]);
                GenotypeBlock { module: b.module, slot: b.slot, op: op.to_string() }
            })
            .collect();
        Ok(Genotype {
            blocks,
            base_channels: cfg.base_channels,
            eta: 0.0,
            seed: 0,
            estimated_latency_ms: 0.0,
            parameter_count: 0,
            network: Some(cfg.clone()),
        })
    }

    pub fn choices(&self) -> HashMap<String, String> {
        self.blocks.iter().map(|b| (b.tag(), b.op.clone())).collect()
    }

    pub fn ops(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.op.as_str()).collect()
    }

    /// `Σ_blocks LAT(op)` from `table`.
    pub fn latency(&self, table: &LatencyTable) -> Result<f64> {
        self.blocks.iter().map(|b| table.get(&b.op)).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidParameter(format!("cannot read genotype {}: {e}", path.display())))?;
        let g: Genotype = serde_json::from_str(&text)?;
        for b in &g.blocks {
            b.op.parse::<OpName>()?;
        }
        Ok(g)
    }
}
