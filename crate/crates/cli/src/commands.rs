use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mefnas::data::{load_image, save_png, Dataset, ExposurePair, SynthConfig, WarpLimits, MANIFEST_FILE};
use mefnas::loss::LossWeights;
use mefnas::nas::{build_latency_table, run_search, write_search_log, Genotype, LatencyTable, SearchConfig, TimingProtocol};
use mefnas::net::NetConfig;
use mefnas::ops::ALL_OPERATORS;
use mefnas::train::{evaluate, load_model, psnr, run_ablation, ssim, AblationBudget, AblationKind, TrainConfig, Trainer};

use crate::config::Settings;
use crate::manifest::{blob_hash, content_hash, RunManifest};
use crate::{AblateArgs, BenchArgs, Cli, Command, EvalArgs, FuseArgs, NetArgs, SearchArgs, SearchOpts, SynthArgs, TrainArgs, TrainOpts};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_BENCH: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Maps a failure onto the stable exit-code contract.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    use mefnas::Error as E;
    match e.chain().find_map(|c| c.downcast_ref::<E>()) {
        Some(E::Unbenchmarkable { .. }) => EXIT_BENCH,
        Some(E::TrainingDiverged { .. } | E::SearchDiverged { .. } | E::GpDivergence) => EXIT_DIVERGED,
        _ => EXIT_INPUT,
    }
}

struct Ctx {
    s: Settings,
    seed: u64,
    inputs: Vec<PathBuf>,
    input_hashes: Vec<String>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        Ok(PathBuf::from(self.s.require::<String>(key, flag.map(|p| p.display().to_string()))?))
    }

    fn opt_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        Ok(self.s.opt::<String>(key, flag.map(|p| p.display().to_string()))?.map(PathBuf::from))
    }

    /// Records an existing input; hashed now so later writes to the same
    /// place do not change the manifest.
    fn input(&mut self, p: &Path) -> Result<()> {
        if !p.exists() {
            bail!("missing input: {}", p.display());
        }
        self.input_hashes.push(content_hash(&[p.to_path_buf()])?);
        self.inputs.push(p.to_path_buf());
        Ok(())
    }

    fn output(&mut self, dir: &Path) {
        self.out = Some(dir.to_path_buf());
    }
}

fn now() -> String {
    chrono::Local::now().to_rfc3339()
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Bench(_) => "bench",
        Command::Search(_) => "search",
        Command::Train(_) => "train",
        Command::Fuse(_) => "fuse",
        Command::Eval(_) => "eval",
        Command::Ablate(_) => "ablate",
    }
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let started_at = now();
    let name = command_name(&cli.command);
    let mut s = Settings::load(cli.config.as_deref())?;
    let seed = s.get("seed", cli.seed, 0)?;
    let mut ctx = Ctx { s, seed, inputs: Vec::new(), input_hashes: Vec::new(), out: None };
    let result = match cli.command {
        Command::Synth(a) => synth(&mut ctx, a),
        Command::Bench(a) => bench(&mut ctx, a),
        Command::Search(a) => search(&mut ctx, a),
        Command::Train(a) => train(&mut ctx, a),
        Command::Fuse(a) => fuse(&mut ctx, a),
        Command::Eval(a) => eval(&mut ctx, a),
        Command::Ablate(a) => ablate(&mut ctx, a),
    };
    if let Some(output_dir) = ctx.out.take() {
        let m = RunManifest {
            command: name.into(),
            argv,
            config_path: ctx.s.path.clone(),
            settings: ctx.s.resolved.clone(),
            seed,
            started_at,
            finished_at: now(),
            inputs: ctx.inputs.clone(),
            input_hash: blob_hash(ctx.input_hashes.join("\n").as_bytes()),
            output_dir,
            exit_code: result.as_ref().map_or_else(exit_code, |_| 0),
        };
        if let Err(e) = m.append() {
            log::warn!("could not write run manifest to {}: {e:#}", m.output_dir.display());
        }
    }
    result
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn synth(ctx: &mut Ctx, a: SynthArgs) -> Result<()> {
    let out = ctx.path("out", a.out)?;
    let s = &mut ctx.s;
    let count = s.get("count", a.count, 16)?;
    let size = s.get("size", a.size, 64)?;
    let height = s.get("height", a.height, size)?;
    let width = s.get("width", a.width, size)?;
    let misaligned = s.get("misaligned", a.misaligned, false)?;
    let d = SynthConfig::default();
    let w = WarpLimits::default();
    let cfg = SynthConfig {
        under_exposure: s.get("under", a.under, d.under_exposure)?,
        over_exposure: s.get("over", a.over, d.over_exposure)?,
        gamma: s.get("gamma", a.gamma, d.gamma)?,
        noise_sigma: s.get("noise", a.noise, d.noise_sigma)?,
        seed: ctx.seed,
        warp: WarpLimits {
            max_translation: s.get("max_translation", a.max_translation, w.max_translation)?,
            max_rotation: s.get("max_rotation", a.max_rotation, w.max_rotation)?,
            max_scale_delta: s.get("max_scale_delta", a.max_scale_delta, w.max_scale_delta)?,
        },
    };
    cfg.validate()?;
    ctx.output(&out);
    let ds = Dataset::synthetic(count, height, width, &cfg, misaligned, ctx.seed)?;
    ds.save(&out).with_context(|| format!("writing dataset to {}", out.display()))?;
    log::info!("wrote {count} pairs of {height}x{width} to {}", out.display());
    Ok(())
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|e| anyhow!("shape `{s}`: {e}"))?;
    match v[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => bail!("shape `{s}` must be three positive integers C,H,W"),
    }
}

fn machine_is_busy() -> bool {
    let load = fs::read_to_string("/proc/loadavg").ok().and_then(|t| t.split_whitespace().next()?.parse::<f64>().ok());
    load.is_none_or(|l| l > 0.5)
}

fn bench(ctx: &mut Ctx, a: BenchArgs) -> Result<()> {
    let out = ctx.path("out", a.out)?;
    let s = &mut ctx.s;
    let ops = s.get("ops", a.ops, "all".into())?;
    let shape = parse_shape(&s.get("shape", a.shape, "16,64,64".into())?)?;
    let d = TimingProtocol::default();
    let protocol = TimingProtocol { warmup_runs: s.get("warmup", a.warmup, d.warmup_runs)?, timed_runs: s.get("runs", a.runs, d.timed_runs)?, ..d };
    let names: Vec<&str> = if ops == "all" { ALL_OPERATORS.to_vec() } else { ops.split(',').map(str::trim).collect() };
    if machine_is_busy() {
        log::warn!("the machine does not look idle; latency measurements may be noisy");
    }
    ctx.output(&parent_dir(&out));
    let table = build_latency_table(&names, shape, &protocol)?;
    table.save(&out)?;
    for (op, ms) in &table.entries {
        println!("{op}\t{ms:.4}");
    }
    Ok(())
}

fn net_config(s: &mut Settings, a: NetArgs) -> Result<NetConfig> {
    let d = NetConfig::default();
    let mut net = NetConfig::with_channels(s.get("channels", a.channels, d.base_channels)?);
    net.srsm.cascade_count = s.get("cascade", a.cascade, d.srsm.cascade_count)?;
    if s.get("misaligned", a.misaligned, false)? {
        net = net.misaligned();
    }
    net.validate()?;
    Ok(net)
}

fn search_config(s: &mut Settings, a: SearchOpts, seed: u64) -> Result<SearchConfig> {
    let d = SearchConfig::default();
    let patch = s.get("search_patch", a.search_patch, d.patch.unwrap_or(0))?;
    let cfg = SearchConfig {
        eta: s.get("eta", a.eta, d.eta)?,
        pretrain_epochs: s.get("pretrain_epochs", a.pretrain_epochs, d.pretrain_epochs)?,
        search_epochs: s.get("search_epochs", a.search_epochs, d.search_epochs)?,
        weight_lr: s.get("weight_lr", a.weight_lr, d.weight_lr)?,
        arch_lr: s.get("arch_lr", a.arch_lr, d.arch_lr)?,
        batch_size: s.get("search_batch_size", a.search_batch_size, d.batch_size)?,
        patch: (patch > 0).then_some(patch),
        seed,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(s: &mut Settings, a: TrainOpts, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let patch = s.get("patch", a.patch, d.patch.unwrap_or(0))?;
    let clip = s.get("grad_clip", a.grad_clip, d.grad_clip.unwrap_or(0.0))?;
    let cfg = TrainConfig {
        epochs: s.get("epochs", a.epochs, d.epochs)?,
        max_steps: s.opt("max_steps", a.max_steps)?,
        batch_size: s.get("batch_size", a.batch_size, d.batch_size)?,
        patch: (patch > 0).then_some(patch),
        augment: s.get("augment", a.augment, d.augment)?,
        lr: s.get("lr", a.lr, d.lr)?,
        lr_final: s.get("lr_final", a.lr_final, d.lr_final)?,
        warmup_steps: s.get("warmup_steps", a.warmup_steps, d.warmup_steps)?,
        grad_clip: (clip > 0.0).then_some(clip),
        seed,
        misaligned: false,
        loss: LossWeights {
            beta1: s.get("beta1", a.beta1, d.loss.beta1)?,
            beta2: s.get("beta2", a.beta2, d.loss.beta2)?,
            gp_weight: s.get("gp_weight", a.gp_weight, d.loss.gp_weight)?,
        },
        disc_channels: s.get("disc_channels", a.disc_channels, d.disc_channels)?,
        checkpoint_every: s.get("checkpoint_every", a.checkpoint_every, d.checkpoint_every)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(ctx: &mut Ctx, flag: Option<PathBuf>) -> Result<Dataset> {
    let dir = ctx.path("data", flag)?;
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.is_file() {
        bail!("missing input: {}", manifest.display());
    }
    ctx.input(&dir)?;
    Ok(Dataset::load(&dir)?)
}

fn load_table(ctx: &mut Ctx, flag: Option<PathBuf>, required: bool) -> Result<Option<LatencyTable>> {
    let path = if required { Some(ctx.path("table", flag)?) } else { ctx.opt_path("table", flag)? };
    let Some(path) = path else { return Ok(None) };
    ctx.input(&path)?;
    Ok(Some(LatencyTable::load(&path)?))
}

fn search(ctx: &mut Ctx, a: SearchArgs) -> Result<()> {
    let out = ctx.path("out", a.out)?;
    let ds = load_dataset(ctx, a.data)?;
    let table = load_table(ctx, a.table, true)?.expect("required");
    let net = net_config(&mut ctx.s, a.net)?;
    let cfg = search_config(&mut ctx.s, a.search, ctx.seed)?;
    ctx.output(&out);
    fs::create_dir_all(&out)?;
    let outcome = run_search(&ds, &net, &cfg, &table)?;
    outcome.genotype.save(out.join("genotype.json"))?;
    write_search_log(&outcome.log, out.join("search_log.csv"))?;
    println!("{}", outcome.genotype.to_json()?);
    Ok(())
}

fn train(ctx: &mut Ctx, a: TrainArgs) -> Result<()> {
    let out = ctx.path("out", a.out)?;
    let ds = load_dataset(ctx, a.data)?;
    let mut trainer = if a.resume {
        ctx.input(&out.join("ckpt"))?;
        Trainer::resume(&out)?
    } else {
        let path = ctx.path("genotype", a.genotype)?;
        ctx.input(&path)?;
        let g = Genotype::load(&path)?;
        let mut cfg = train_config(&mut ctx.s, a.train, ctx.seed)?;
        cfg.misaligned = g.network.as_ref().is_some_and(|n| n.dasm.enabled);
        Trainer::new(&g, &cfg, cfg.total_steps(ds.len()))?
    };
    ctx.output(&out);
    trainer.run(&ds, Some(&out))?;
    let report = evaluate(&trainer.net, &ds)?;
    println!("{}", report.summary_json()?);
    Ok(())
}

fn fuse(ctx: &mut Ctx, a: FuseArgs) -> Result<()> {
    let (under, over) = (ctx.path("under", a.under)?, ctx.path("over", a.over)?);
    let ckpt = ctx.path("ckpt", a.ckpt)?;
    let out = ctx.path("out", a.out)?;
    for p in [&under, &over, &ckpt] {
        ctx.input(p)?;
    }
    let net = load_model(&ckpt)?;
    let u = load_image(&under)?;
    let o = load_image(&over)?;
    let pair = ExposurePair::new(u.clone(), o, u, None)?;
    ctx.output(&parent_dir(&out));
    save_png(&net.fuse(&pair)?, &out)?;
    Ok(())
}

fn eval(ctx: &mut Ctx, a: EvalArgs) -> Result<()> {
    let out = ctx.opt_path("out", a.out)?;
    if let Some(image) = ctx.opt_path("image", a.image)? {
        let reference = ctx.path("reference", a.reference)?;
        ctx.input(&image)?;
        ctx.input(&reference)?;
        let (y, gt) = (load_image(&image)?, load_image(&reference)?);
        let summary = serde_json::json!({ "image": image, "psnr": psnr(&y, &gt)?, "ssim": ssim(&y, &gt)? });
        let dir = out.unwrap_or_else(|| parent_dir(&image));
        ctx.output(&dir);
        println!("{summary}");
        return Ok(());
    }
    let ckpt = ctx.path("ckpt", a.ckpt)?;
    ctx.input(&ckpt)?;
    let ds = load_dataset(ctx, a.data)?;
    let net = load_model(&ckpt)?;
    let dir = out.unwrap_or_else(|| if ckpt.is_dir() { ckpt.clone() } else { parent_dir(&ckpt) });
    ctx.output(&dir);
    let report = evaluate(&net, &ds)?;
    report.save(&dir)?;
    println!("{}", report.summary_json()?);
    Ok(())
}

fn ablate(ctx: &mut Ctx, a: AblateArgs) -> Result<()> {
    let kind: AblationKind = ctx.s.require::<String>("kind", a.kind)?.parse()?;
    let out = ctx.path("out", a.out)?;
    let ds = load_dataset(ctx, a.data)?;
    let table = load_table(ctx, a.table, false)?;
    let d = AblationBudget::default();
    let budget = AblationBudget {
        net: net_config(&mut ctx.s, a.net)?,
        family: ctx.s.get("family", a.family, d.family.clone())?,
        train: train_config(&mut ctx.s, a.train, ctx.seed)?,
        search: search_config(&mut ctx.s, a.search, ctx.seed)?,
        table,
        ..d
    };
    ctx.output(&out);
    fs::create_dir_all(&out)?;
    let report = run_ablation(kind, &ds, &budget)?;
    let csv = report.to_csv();
    fs::write(out.join(format!("ablation_{kind}.csv")), &csv)?;
    fs::write(out.join(format!("ablation_{kind}.json")), serde_json::to_string_pretty(&report)? + "\n")?;
    print!("{csv}");
    Ok(())
}
