//! Final-network training, evaluation and ablation drivers.

mod ablation;
mod checkpoint;
mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{ablation_variants, run_ablation, run_ablation_variant, AblationBudget, AblationKind, AblationReport, AblationRow};
pub use checkpoint::{checkpoint_path, latest_checkpoint, Checkpoint, Group};
pub use metrics::{mse, psnr, ssim, PSNR_CAP, SSIM_WINDOW};

use crate::data::{derive_seed, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::loss::{discriminator_loss, sample_u, total_loss, Critic, Discriminator, LossWeights};
use crate::nas::Genotype;
use crate::net::FusionNet;
use crate::optim::{clip_grad_norm, Adam, CosineSchedule};
use crate::param::ParamStore;
use crate::tensor::backward;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` with an absolute step budget.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Square training crop; `None` trains on whole frames.
    pub patch: Option<usize>,
    /// Random flips and quarter turns.
    pub augment: bool,
    pub lr: f64,
    pub lr_final: f64,
    /// Linear ramp to `lr` before the cosine decay begins.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling for the generator and the critic.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Marks runs on misaligned pairs; recorded with the checkpoint.
    pub misaligned: bool,
    pub loss: LossWeights,
    /// Width of the first critic layer.
    pub disc_channels: usize,
    /// Steps between checkpoints; 0 saves only the final state.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            max_steps: None,
            batch_size: 4,
            patch: Some(128),
            augment: true,
            lr: 1e-4,
            lr_final: 1e-10,
            warmup_steps: 0,
            grad_clip: None,
            seed: 0,
            misaligned: false,
            loss: LossWeights::default(),
            disc_channels: 64,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::InvalidParameter("max_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        if let Some(p) = self.patch {
            if p == 0 || p % 4 != 0 {
                return Err(Error::InvalidParameter(format!("patch {p} is not a positive multiple of 4")));
            }
        }
        if !(self.lr > 0.0 && self.lr_final >= 0.0) {
            return Err(Error::InvalidParameter("learning rates must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidParameter("grad_clip must be positive".into()));
        }
        if self.loss.beta2 > 0.0 && self.disc_channels == 0 {
            return Err(Error::InvalidParameter("adversarial training needs disc_channels > 0".into()));
        }
        self.loss.validate()
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.max_steps.unwrap_or(self.epochs * dataset_len.div_ceil(self.batch_size).max(1))
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig { patch: self.patch, hflip: self.augment, vflip: self.augment, rotate: self.augment }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub l_int: f64,
    pub l_gra: f64,
    pub l_dis: f64,
    pub l_total: f64,
    pub d_loss: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,l_int,l_gra,l_dis,l_total,d_loss";

/// The training log as CSV, preceded by one `#` line of run settings.
pub fn train_log_csv(cfg: &TrainConfig, rows: &[TrainLogRow]) -> String {
    let patch = cfg.patch.map_or("full".to_string(), |p| p.to_string());
    let mut s = format!(
        "# batch_size={} patch={} lr={} seed={} misaligned={}\n{TRAIN_LOG_HEADER}\n",
        cfg.batch_size, patch, cfg.lr, cfg.seed, cfg.misaligned
    );
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.l_int, r.l_gra, r.l_dis, r.l_total, r.d_loss);
    }
    s
}

const NET: &str = "net";
const DISC: &str = "disc";
const GEN_OPT: &str = "gen_opt";
const DISC_OPT: &str = "disc_opt";

/// Owns a discretized network, its optional critic and both optimizers.
/// Every random draw of a step derives from `(seed, step)`, so a restored
/// trainer continues exactly like an uninterrupted one.
pub struct Trainer {
    pub config: TrainConfig,
    pub genotype: Genotype,
    pub net: FusionNet,
    disc: Option<Discriminator>,
    disc_store: ParamStore,
    gen_opt: Adam,
    disc_opt: Adam,
    schedule: CosineSchedule,
    pub step: usize,
    pub total_steps: usize,
    pub log: Vec<TrainLogRow>,
}

impl Trainer {
    pub fn new(genotype: &Genotype, cfg: &TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let net = FusionNet::from_genotype(genotype, derive_seed(cfg.seed, 10))?;
        let disc_store = ParamStore::new(derive_seed(cfg.seed, 13));
        let disc = (cfg.loss.beta2 > 0.0).then(|| Discriminator::new(&disc_store.root().sub("disc"), cfg.disc_channels));
        Ok(Trainer {
            config: cfg.clone(),
            genotype: genotype.clone(),
            net,
            disc,
            disc_store,
            gen_opt: Adam::default(),
            disc_opt: Adam::default(),
            schedule: CosineSchedule::new(cfg.lr, cfg.lr_final, total_steps.saturating_sub(cfg.warmup_steps)),
            step: 0,
            total_steps,
            log: Vec::new(),
        })
    }

    pub fn discriminator(&self) -> Option<&Discriminator> {
        self.disc.as_ref()
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        let w = self.config.warmup_steps;
        if step < w {
            self.config.lr * (step + 1) as f64 / w as f64
        } else {
            self.schedule.at(step - w)
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    fn diverged(&self, detail: String) -> Error {
        Error::TrainingDiverged { step: self.step, detail }
    }

    /// One generator step with a simultaneous critic step.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<TrainLogRow> {
        let cfg = &self.config;
        let batch =
            dataset.sample_batch(cfg.batch_size, &cfg.augment_config(), derive_seed(cfg.seed, 11), self.step as u64)?;
        let y = self.net.forward_pair(&batch)?;
        let gt = batch.gt.to_tensor();
        let critic = self.disc.as_ref().map(|d| d as &dyn Critic);
        let obj = total_loss(&y, &gt, critic, &cfg.loss)?;
        let r = obj.report;
        if ![r.l_int, r.l_gra, r.l_dis, r.l_total].iter().all(|v| v.is_finite()) {
            return Err(self.diverged(format!("non-finite generator loss {r:?}")));
        }
        let mut grads = backward(&obj.total)?;
        let lr = self.learning_rate(self.step);

        let mut d_loss = 0.0;
        if let Some(d) = &self.disc {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, 12), self.step as u64));
            let u = sample_u(y.shape()[0], &mut rng);
            let dl = match discriminator_loss(d, &y, &gt, cfg.loss.gp_weight, &u) {
                Err(Error::GpDivergence) => return Err(self.diverged("gradient penalty is not finite".into())),
                other => other?,
            };
            d_loss = dl.item();
            if !d_loss.is_finite() {
                return Err(self.diverged(format!("non-finite critic loss {d_loss}")));
            }
            let mut dg = backward(&dl)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&d.vars(), &mut dg, c);
            }
            self.disc_opt.step(&d.vars(), &dg, lr);
        }
        let vars = self.net.weight_vars();
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&vars, &mut grads, c);
        }
        self.gen_opt.step(&vars, &grads, lr);

        let row = TrainLogRow { step: self.step, l_int: r.l_int, l_gra: r.l_gra, l_dis: r.l_dis, l_total: r.l_total, d_loss };
        self.log.push(row);
        self.step += 1;
        Ok(row)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut groups = vec![(NET.to_string(), self.net.weights.snapshot())];
        if self.disc.is_some() {
            groups.push((DISC.to_string(), self.disc_store.snapshot()));
        }
        groups.push((GEN_OPT.to_string(), self.gen_opt.state()));
        groups.push((DISC_OPT.to_string(), self.disc_opt.state()));
        Checkpoint {
            step: self.step,
            total_steps: self.total_steps,
            config: self.config.clone(),
            genotype: self.genotype.clone(),
            log: self.log.clone(),
            groups,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(&ck.genotype, &ck.config, ck.total_steps)?;
        let group = |name: &str| ck.group(name).ok_or_else(|| Error::Checkpoint(format!("missing `{name}` state")));
        t.net.weights.load(group(NET)?)?;
        if t.disc.is_some() {
            t.disc_store.load(group(DISC)?)?;
        }
        t.gen_opt.load_state(group(GEN_OPT)?);
        t.disc_opt.load_state(group(DISC_OPT)?);
        t.step = ck.step;
        t.log = ck.log.clone();
        Ok(t)
    }

    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        Trainer::from_checkpoint(&Checkpoint::load(latest_checkpoint(path)?)?)
    }

    /// Writes `ckpt/{step}.bin`, `genotype.json` and `train_log.csv` under
    /// `dir`; returns the checkpoint path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let ckpt = checkpoint_path(dir, self.step);
        self.checkpoint().save(&ckpt)?;
        let io = |e: Error| Error::Checkpoint(format!("{}: {e}", dir.display()));
        self.genotype.save(dir.join("genotype.json")).map_err(io)?;
        fs::write(dir.join("train_log.csv"), train_log_csv(&self.config, &self.log)).map_err(|e| io(e.into()))?;
        Ok(ckpt)
    }

    /// Trains until the step budget is exhausted, checkpointing into `out`.
    pub fn run(&mut self, dataset: &Dataset, out: Option<&Path>) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::InvalidParameter("training dataset is empty".into()));
        }
        while !self.is_done() {
            let row = self.train_step(dataset)?;
            if row.step % 50 == 0 {
                log::info!("step {} l_total {:.5} d_loss {:.5}", row.step, row.l_total, row.d_loss);
            }
            let every = self.config.checkpoint_every;
            if let Some(dir) = out {
                if every > 0 && self.step % every == 0 && !self.is_done() {
                    self.save(dir)?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(dir)?;
        }
        Ok(())
    }
}

/// Instantiates `genotype`, trains it on `dataset` and returns the trainer
/// holding the final state.
pub fn train(genotype: &Genotype, dataset: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<Trainer> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("training dataset is empty".into()));
    }
    let mut t = Trainer::new(genotype, cfg, cfg.total_steps(dataset.len()))?;
    t.run(dataset, out)?;
    Ok(t)
}

/// The fusion network stored in a checkpoint file or in the newest
/// checkpoint of a training directory.
pub fn load_model(path: impl AsRef<Path>) -> Result<FusionNet> {
    let ck = Checkpoint::load(latest_checkpoint(path)?)?;
    let net = FusionNet::from_genotype(&ck.genotype, 0)?;
    net.weights.load(ck.group(NET).ok_or_else(|| Error::Checkpoint("missing `net` state".into()))?)?;
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        EvalReport { rows, mean_psnr, mean_ssim }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.image, r.psnr, r.ssim);
        }
        s
    }

    pub fn summary_json(&self) -> Result<String> {
        let v = serde_json::json!({ "images": self.rows.len(), "mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim });
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }

    /// Writes `eval.csv` and `eval_summary.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.csv"), self.to_csv())?;
        fs::write(dir.join("eval_summary.json"), self.summary_json()?)?;
        Ok(())
    }
}

/// Fuses every pair of `dataset` at full resolution and scores it against
/// its reference.
pub fn evaluate(net: &FusionNet, dataset: &Dataset) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(dataset.len());
    for (i, pair) in dataset.pairs.iter().enumerate() {
        let y = net.fuse(pair)?;
        let image = dataset.entries.get(i).map_or_else(|| format!("{i:04}"), |e| e.id.clone());
        rows.push(EvalRow { image, psnr: psnr(&y, &pair.gt)?, ssim: ssim(&y, &pair.gt)? });
    }
    Ok(EvalReport::from_rows(rows))
}
