use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{alpha_entropy, latency_regularizer, Genotype, GenotypeBlock, LatencyTable};
use crate::data::{derive_seed, AugmentConfig, Dataset, ExposurePair};
use crate::error::{Error, Result};
use crate::loss::intensity_loss;
use crate::net::{FusionNet, NetConfig};
use crate::ops::{Block, SearchCell};
use crate::optim::{Adam, CosineSchedule, Sgd};
use crate::tensor::backward;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Latency trade-off.
    pub eta: f64,
    pub pretrain_epochs: usize,
    pub search_epochs: usize,
    /// Initial step of the cosine-decayed momentum descent on weights.
    pub weight_lr: f64,
    pub weight_momentum: f64,
    /// Adaptive-moment step on architecture logits.
    pub arch_lr: f64,
    pub batch_size: usize,
    /// Square training crop; `None` uses whole images.
    pub patch: Option<usize>,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            eta: 0.5,
            pretrain_epochs: 10,
            search_epochs: 300,
            weight_lr: 3e-4,
            weight_momentum: 0.9,
            arch_lr: 1e-4,
            batch_size: 4,
            patch: Some(128),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParameter(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        Ok(())
    }

    fn augment(&self) -> AugmentConfig {
        AugmentConfig { patch: self.patch, ..AugmentConfig::default() }
    }
}

/// Optimizer state carried across search steps.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub step: usize,
    pub arch_opt: Adam,
    pub weight_opt: Sgd,
    pub schedule: CosineSchedule,
}

impl SearchState {
    pub fn new(cfg: &SearchConfig, total_weight_steps: usize) -> Self {
        SearchState {
            step: 0,
            arch_opt: Adam::default(),
            weight_opt: Sgd::new(cfg.weight_momentum),
            schedule: CosineSchedule::new(cfg.weight_lr, 0.0, total_weight_steps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss_train: f64,
    pub loss_val: f64,
    pub latency_reg: f64,
}

fn alpha_dump(net: &FusionNet) -> String {
    let mut s = String::from("{");
    for (i, c) in net.cells().iter().enumerate() {
        let sep = if i == 0 { "" } else { ", " };
        let _ = write!(s, "{sep}\"{}\": {:?}", c.tag, c.alpha.logits.value().iter().collect::<Vec<_>>());
    }
    s.push('}');
    s
}

fn diverged(net: &FusionNet, step: usize, what: &str, value: f64) -> Error {
    Error::SearchDiverged { step, state: format!("{what} = {value}; alpha = {}", alpha_dump(net)) }
}

/// One descent step of the network weights on `ℓ_Int`.
pub fn weight_step(net: &FusionNet, batch: &ExposurePair, state: &mut SearchState) -> Result<f64> {
    let y = net.forward_pair(batch)?;
    let loss = intensity_loss(&y, &batch.gt.to_tensor())?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(diverged(net, state.step, "training loss", value));
    }
    let grads = backward(&loss)?;
    let lr = state.schedule.at(state.step);
    state.weight_opt.step(&net.weight_vars(), &grads, lr);
    Ok(value)
}

/// First-order alternation: an architecture step on
/// `ℓ_Int(val) + η·R(α)` followed by a weight step on `ℓ_Int(train)`.
pub fn search_step(
    net: &FusionNet,
    batch_train: &ExposurePair,
    batch_val: &ExposurePair,
    cfg: &SearchConfig,
    table: &LatencyTable,
    state: &mut SearchState,
) -> Result<StepReport> {
    let cells = net.cells();
    let y = net.forward_pair(batch_val)?;
    let loss_val = intensity_loss(&y, &batch_val.gt.to_tensor())?;
    let reg = latency_regularizer(&cells, table)?;
    let objective = if cfg.eta > 0.0 { loss_val.add(&reg.scale(cfg.eta)) } else { loss_val.clone() };
    let (lv, r) = (loss_val.item(), reg.item());
    if !objective.item().is_finite() {
        return Err(diverged(net, state.step, "validation objective", objective.item()));
    }
    let grads = backward(&objective)?;
    state.arch_opt.step(&net.arch_vars(), &grads, cfg.arch_lr);
    if cells.iter().any(|c| !c.alpha.logits.value().iter().all(|v| v.is_finite())) {
        return Err(diverged(net, state.step, "architecture logits", f64::NAN));
    }
    let lt = weight_step(net, batch_train, state)?;
    state.step += 1;
    Ok(StepReport { loss_train: lt, loss_val: lv, latency_reg: r })
}

/// Index of the selected candidate: the largest weight, ties broken by lower
/// latency and then by name.
pub fn choose(cell: &SearchCell, table: &LatencyTable) -> Result<usize> {
    let probs = cell.probs();
    let p = probs.data();
    let names = cell.names();
    let lat: Vec<f64> = names.iter().map(|n| table.get(n)).collect::<Result<_>>()?;
    let mut best = 0;
    for i in 1..p.len() {
        let better = p[i] > p[best]
            || (p[i] == p[best] && (lat[i] < lat[best] || (lat[i] == lat[best] && names[i] < names[best])));
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// Discretizes a super-network. Fixed blocks keep their operator.
pub fn discretize(net: &FusionNet, table: &LatencyTable, eta: f64, seed: u64) -> Result<Genotype> {
    let layout = net.config.layout();
    let mut blocks = Vec::with_capacity(layout.len());
    for (slot, block) in layout.iter().zip(net.blocks()) {
        let op = match block {
            Block::Mixed(cell) => cell.candidates[choose(cell, table)?].name(),
            Block::Fixed { op, .. } => op.name(),
        };
        blocks.push(GenotypeBlock { module: slot.module.clone(), slot: slot.slot, op });
    }
    let mut g = Genotype {
        blocks,
        base_channels: net.config.base_channels,
        eta,
        seed,
        estimated_latency_ms: 0.0,
        parameter_count: 0,
        network: Some(net.config.clone()),
    };
    g.estimated_latency_ms = g.latency(table)?;
    g.parameter_count = FusionNet::from_genotype(&g, 0)?.num_params();
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchLogRow {
    pub epoch: usize,
    pub loss_val: f64,
    pub latency_reg: f64,
    pub alpha_entropy: f64,
}

pub fn search_log_csv(rows: &[SearchLogRow]) -> String {
    let mut s = String::from("epoch,loss_val,latency_reg,alpha_entropy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.loss_val, r.latency_reg, r.alpha_entropy);
    }
    s
}

pub fn write_search_log(rows: &[SearchLogRow], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, search_log_csv(rows))?;
    Ok(())
}

pub struct SearchOutcome {
    pub genotype: Genotype,
    pub log: Vec<SearchLogRow>,
    pub supernet: FusionNet,
}

/// Pretrains the super-network weights, alternates search steps and
/// discretizes. The dataset is split into interleaved search-train and
/// validation halves.
pub fn run_search(dataset: &Dataset, net_cfg: &NetConfig, cfg: &SearchConfig, table: &LatencyTable) -> Result<SearchOutcome> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(Error::InvalidParameter(format!("search needs at least 2 samples, got {}", dataset.len())));
    }
    let net = FusionNet::supernet(net_cfg, cfg.seed)?;
    for cell in net.cells() {
        for n in cell.names() {
            table.get(&n)?;
        }
    }
    let (train, val) = dataset.split_even_odd();
    let per_epoch = train.len().div_ceil(cfg.batch_size).max(1);
    let total = per_epoch * (cfg.pretrain_epochs + cfg.search_epochs);
    let mut state = SearchState::new(cfg, total);
    let aug = cfg.augment();
    let (train_seed, val_seed) = (derive_seed(cfg.seed, 1), derive_seed(cfg.seed, 2));

    for _ in 0..cfg.pretrain_epochs * per_epoch {
        let b = train.sample_batch(cfg.batch_size, &aug, train_seed, state.step as u64)?;
        weight_step(&net, &b, &mut state)?;
        state.step += 1;
    }
    let mut log = Vec::with_capacity(cfg.search_epochs);
    for epoch in 0..cfg.search_epochs {
        let mut loss_val = 0.0;
        for _ in 0..per_epoch {
            let bt = train.sample_batch(cfg.batch_size, &aug, train_seed, state.step as u64)?;
            let bv = val.sample_batch(cfg.batch_size, &aug, val_seed, state.step as u64)?;
            loss_val += search_step(&net, &bt, &bv, cfg, table, &mut state)?.loss_val;
        }
        let cells = net.cells();
        log.push(SearchLogRow {
            epoch,
            loss_val: loss_val / per_epoch as f64,
            latency_reg: latency_regularizer(&cells, table)?.item(),
            alpha_entropy: alpha_entropy(&cells),
        });
    }
    let genotype = discretize(&net, table, cfg.eta, cfg.seed)?;
    Ok(SearchOutcome { genotype, log, supernet: net })
}
