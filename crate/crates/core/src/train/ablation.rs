use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::nas::{run_search, Genotype, LatencyTable, SearchConfig};
use crate::net::NetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    SrsmCascade,
    Dasm,
    Losses,
    SearchSpace,
    Eta,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] =
        [AblationKind::SrsmCascade, AblationKind::Dasm, AblationKind::Losses, AblationKind::SearchSpace, AblationKind::Eta];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::SrsmCascade => "srsm_cascade",
            AblationKind::Dasm => "dasm",
            AblationKind::Losses => "losses",
            AblationKind::SearchSpace => "search_space",
            AblationKind::Eta => "eta",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown ablation `{s}`")))
    }
}

/// Shared settings for every variant of an ablation.
#[derive(Debug, Clone)]
pub struct AblationBudget {
    /// Structure the variants are derived from.
    pub net: NetConfig,
    /// Operator family of the fixed networks (see [`Genotype::uniform`]).
    pub family: String,
    pub train: TrainConfig,
    /// Used by the `eta` ablation and the searched `search_space` row.
    pub search: SearchConfig,
    pub table: Option<LatencyTable>,
    /// Operator families of the `search_space` ablation.
    pub families: Vec<String>,
    /// Trade-offs of the `eta` ablation.
    pub etas: Vec<f64>,
}

impl Default for AblationBudget {
    fn default() -> Self {
        AblationBudget {
            net: NetConfig::default(),
            family: "C-3".into(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            table: None,
            families: ["C-3", "DC-3", "C-5", "DC-5", "C-7", "DC-7"].map(String::from).to_vec(),
            etas: vec![0.0, 0.5, 1.0, 5.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    pub parameter_count: usize,
    pub estimated_latency_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,psnr,ssim,parameter_count,estimated_latency_ms\n");
        for r in &self.rows {
            let lat = r.estimated_latency_ms.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(s, "{},{},{},{},{}", r.variant, r.psnr, r.ssim, r.parameter_count, lat);
        }
        s
    }
}

fn score(variant: String, g: &Genotype, dataset: &Dataset, cfg: &TrainConfig, table: Option<&LatencyTable>) -> Result<AblationRow> {
    let trainer = train(g, dataset, cfg, None)?;
    let report = evaluate(&trainer.net, dataset)?;
    let estimated_latency_ms = table.map(|t| g.latency(t)).transpose().ok().flatten();
    Ok(AblationRow {
        variant,
        psnr: report.mean_psnr,
        ssim: report.mean_ssim,
        parameter_count: trainer.net.num_params(),
        estimated_latency_ms,
    })
}

fn searched(dataset: &Dataset, budget: &AblationBudget, eta: f64) -> Result<Genotype> {
    let table = budget
        .table
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("searched variants need a latency table".into()))?;
    let cfg = SearchConfig { eta, ..budget.search.clone() };
    Ok(run_search(dataset, &budget.net, &cfg, table)?.genotype)
}

/// Variant names of `kind` in report order.
pub fn ablation_variants(kind: AblationKind, budget: &AblationBudget) -> Vec<String> {
    match kind {
        AblationKind::SrsmCascade => ["w/o", "cascade-1", "cascade-2", "cascade-3"].map(String::from).to_vec(),
        AblationKind::Dasm => ["w/o", "before-relighting", "after-relighting"].map(String::from).to_vec(),
        AblationKind::Losses => ["Int", "Int+Gra", "Int+Dis", "Total"].map(String::from).to_vec(),
        AblationKind::SearchSpace => {
            let mut v = budget.families.clone();
            if budget.table.is_some() {
                v.push("searched".into());
            }
            v
        }
        AblationKind::Eta => budget.etas.iter().map(|e| format!("eta={e}")).collect(),
    }
}

fn unknown(kind: AblationKind, variant: &str) -> Error {
    Error::InvalidParameter(format!("`{variant}` is not a {kind} variant"))
}

/// Trains and scores one named variant of `kind`.
pub fn run_ablation_variant(kind: AblationKind, variant: &str, dataset: &Dataset, budget: &AblationBudget) -> Result<AblationRow> {
    let table = budget.table.as_ref();
    let uniform = |net: &NetConfig| Genotype::uniform(net, &budget.family);
    let name = variant.to_string();
    match kind {
        AblationKind::SrsmCascade => {
            let k = match variant {
                "w/o" => 0,
                v => v.strip_prefix("cascade-").and_then(|k| k.parse().ok()).filter(|k| (1..=3).contains(k)).ok_or_else(|| unknown(kind, v))?,
            };
            let mut net = budget.net.clone();
            net.srsm.cascade_count = k;
            score(name, &uniform(&net)?, dataset, &budget.train, table)
        }
        AblationKind::Dasm => {
            let (enabled, before) = match variant {
                "w/o" => (false, false),
                "before-relighting" => (true, true),
                "after-relighting" => (true, false),
                v => return Err(unknown(kind, v)),
            };
            let mut net = budget.net.clone();
            net.dasm.enabled = enabled;
            net.dasm.before_relighting = before;
            score(name, &uniform(&net)?, dataset, &budget.train, table)
        }
        AblationKind::Losses => {
            let w = budget.train.loss;
            let (b1, b2) = match variant {
                "Int" => (0.0, 0.0),
                "Int+Gra" => (w.beta1, 0.0),
                "Int+Dis" => (0.0, w.beta2),
                "Total" => (w.beta1, w.beta2),
                v => return Err(unknown(kind, v)),
            };
            let cfg = TrainConfig { loss: LossWeights { beta1: b1, beta2: b2, ..w }, ..budget.train.clone() };
            score(name, &uniform(&budget.net)?, dataset, &cfg, table)
        }
        AblationKind::SearchSpace if variant == "searched" => {
            let g = searched(dataset, budget, budget.search.eta)?;
            score(name, &g, dataset, &budget.train, table)
        }
        AblationKind::SearchSpace => score(name, &Genotype::uniform(&budget.net, variant)?, dataset, &budget.train, table),
        AblationKind::Eta => {
            let eta: f64 = variant.strip_prefix("eta=").and_then(|e| e.parse().ok()).ok_or_else(|| unknown(kind, variant))?;
            let g = searched(dataset, budget, eta)?;
            score(name, &g, dataset, &budget.train, table)
        }
    }
}

/// Trains every variant of `kind` under the same budget and seed and scores
/// each on `dataset` at full resolution.
pub fn run_ablation(kind: AblationKind, dataset: &Dataset, budget: &AblationBudget) -> Result<AblationReport> {
    if kind == AblationKind::Eta && budget.table.is_none() {
        return Err(Error::InvalidParameter("the eta ablation needs a latency table".into()));
    }
    let rows = ablation_variants(kind, budget)
        .iter()
        .map(|v| run_ablation_variant(kind, v, dataset, budget))
        .collect::<Result<_>>()?;
    Ok(AblationReport { kind, rows })
}
