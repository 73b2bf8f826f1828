//! Acceptance suite. Runs every criterion in sequence and prints one
//! `PASS`/`FAIL` line each; exits non-zero when any criterion fails.
//!
//! `cargo test -p mefnas-cli --test acceptance -- 3 9` runs a subset.

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use mefnas::data::{Dataset, ImageTensor, SynthConfig, WarpLimits};
use mefnas::loss::{
    discriminator_loss, generator_loss, gradient_loss, intensity_loss, sobel, total_loss, Critic,
    Discriminator, LossWeights,
};
use mefnas::nas::{
    build_latency_table, discretize, latency_regularizer, run_search, Genotype, LatencyTable, SearchConfig, TimingProtocol,
};
use mefnas::net::{FusionNet, NetConfig};
use mefnas::ops::{Activation, SearchCell, ALL_OPERATORS, SRSM_CANDIDATES};
use mefnas::param::{ParamStore, Var};
use mefnas::tensor::{backward, grad, no_grad, ConvParams, Tensor};
use mefnas::train::{
    ablation_variants, checkpoint_path, evaluate, load_model, psnr, run_ablation_variant, ssim, train, AblationBudget,
    AblationKind, Checkpoint, TrainConfig,
};
use ndarray::{Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Desk training recipe shared by the probe and the ablations: full-batch
/// Adam with a short warmup and global-norm clipping.
fn desk_train(steps: usize, batch: usize, loss: LossWeights) -> TrainConfig {
    TrainConfig {
        max_steps: Some(steps),
        batch_size: batch,
        patch: None,
        augment: false,
        lr: 2e-2,
        lr_final: 1e-10,
        warmup_steps: 50,
        grad_clip: Some(0.1),
        loss,
        disc_channels: 8,
        ..TrainConfig::default()
    }
}

// 1 ------------------------------------------------------------------------

/// Direct `same`-padded cross-correlation, no bias.
fn dense_conv_oracle(x: &ArrayD<f64>, w: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut y = ArrayD::zeros(IxDyn(&[n, cout, h, wd]));
    for b in 0..n {
        for o in 0..cout {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let (yi, xj) = (i as isize + u as isize - pad, j as isize + v as isize - pad);
                                if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < wd {
                                    acc += w[[o, c, u, v]] * x[[b, c, yi as usize, xj as usize]];
                                }
                            }
                        }
                    }
                    y[[b, o, i, j]] = acc;
                }
            }
        }
    }
    y
}

fn criterion_1() -> Outcome {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for draw in 0..20 {
        let k = [3, 5, 7][draw % 3];
        let (cin, cout) = (1 + draw % 3, 1 + (draw / 3) % 3);
        let x = random(&[1, cin, 16, 16], -1.0, 1.0, &mut r);
        let w = random(&[cout, cin, k, k], -1.0, 1.0, &mut r);
        let off = Tensor::zeros(&[1, 2 * k * k, 16, 16]);
        let y = Tensor::constant(x.clone()).deform_conv2d(&off, &Tensor::constant(w.clone()), ConvParams::same(k, 1));
        let oracle = dense_conv_oracle(&x, &w);
        let diff = (y.value() - &oracle).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        worst = worst.max(diff);
    }
    ensure!(worst < 1e-5, "max abs diff {worst:e} >= 1e-5");
    Ok(format!("20 draws, max abs diff {worst:.1e}"))
}

// 2 ------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-3;
/// Relative errors are taken against `max(|fd|, |analytic|, FD_FLOOR)`.
const FD_FLOOR: f64 = 1e-6;

fn check_var(name: &str, var: &Var, picks: &[usize], analytic: &[f64], loss: &dyn Fn() -> f64) -> Result<f64, String> {
    let base = var.value();
    let mut worst: f64 = 0.0;
    for (&i, &an) in picks.iter().zip(analytic) {
        let eval = |d: f64| {
            let mut v = base.clone();
            v.as_slice_mut().unwrap()[i] += d;
            var.set(v);
            loss()
        };
        let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        var.set(base.clone());
        let e = rel_err(fd, an, FD_FLOOR);
        ensure!(e < FD_TOL, "{name}[{i}]: finite difference {fd:e} vs analytic {an:e}");
        worst = worst.max(e);
    }
    Ok(worst)
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let mut report = Vec::new();

    // Relaxed cell output with respect to the logits.
    let store = ParamStore::new(2);
    let ops = ["C-1", "C-3", "DC-3", "C-5"];
    let cell = SearchCell::simple(0, "b", &ops, 2, 2, &store.root().sub("b"), &store.root(), Activation::Linear).unwrap();
    cell.alpha.logits.set(random(&[4], -1.0, 1.0, &mut r));
    let x = Tensor::constant(random(&[1, 2, 6, 6], -1.0, 1.0, &mut r));
    let probe = Tensor::constant(random(&[1, 2, 6, 6], -1.0, 1.0, &mut r));
    let loss = || cell.relax_forward(&x).unwrap().mul(&probe).sum_all();
    let g = backward(&loss()).unwrap().get(&cell.alpha.logits.tensor()).unwrap().to_vec();
    let e = check_var("alpha", &cell.alpha.logits, &[0, 1, 2, 3], &g, &|| loss().item())?;
    report.push(format!("alpha {e:.0e}"));

    // Deformable offsets with respect to the intensity loss.
    let xs = Tensor::constant(random(&[1, 2, 8, 8], 0.0, 1.0, &mut r));
    let w = Tensor::constant(random(&[2, 2, 3, 3], -0.5, 0.5, &mut r));
    let gt = Tensor::constant(random(&[1, 2, 8, 8], 0.0, 1.0, &mut r));
    // Keep samples away from integer positions, where bilinear weights kink.
    let off_var = Var::new("offsets", random(&[1, 18, 8, 8], 0.1, 0.9, &mut r));
    let loss = || intensity_loss(&xs.deform_conv2d(&off_var.tensor(), &w, ConvParams::same(3, 1)), &gt).unwrap();
    let l = loss();
    let g = grad(&l, &[&off_var.tensor()], false).unwrap().remove(0).to_vec();
    let picks: Vec<usize> = (0..10).map(|_| r.random_range(0..off_var.numel())).collect();
    let an: Vec<f64> = picks.iter().map(|&i| g[i]).collect();
    let e = check_var("offsets", &off_var, &picks, &an, &|| loss().item())?;
    report.push(format!("offsets {e:.0e}"));

    // Ten random weights in each sub-module of a small misaligned network.
    let mut cfg = NetConfig::with_channels(2).misaligned();
    cfg.srsm.cascade_count = 1;
    let net = FusionNet::from_genotype(&Genotype::uniform(&cfg, "C-3").unwrap(), 3).unwrap();
    for v in net.weight_vars() {
        let noise = random(&v.shape(), -0.2, 0.2, &mut r);
        v.update(|a| *a += &noise);
    }
    let data = Dataset::synthetic(1, 16, 16, &SynthConfig::default(), true, 4).unwrap();
    let pair = &data.pairs[0];
    let gt = pair.gt.to_tensor();
    let loss = || intensity_loss(&net.forward_pair(pair).unwrap(), &gt).unwrap();
    let critic = Discriminator::new(&ParamStore::new(5).root(), 2);
    let disc_loss = || generator_loss(&critic, &gt).unwrap();
    let modules: [(&str, &[&str], Vec<Var>, &dyn Fn() -> Tensor); 4] = [
        ("srsm", &["srsm_u", "srsm_o"], net.weight_vars(), &loss),
        ("dasm", &["dasm"], net.weight_vars(), &loss),
        ("drm", &["drm"], net.weight_vars(), &loss),
        ("critic", &[""], critic.vars(), &disc_loss),
    ];
    for (label, prefixes, vars, f) in modules {
        let vars: Vec<Var> = vars.into_iter().filter(|v| prefixes.iter().any(|p| v.name().starts_with(p))).collect();
        ensure!(!vars.is_empty(), "no weights found for {label}");
        let grads = backward(&f()).unwrap();
        // Read every analytic value first: setting a weight replaces its leaf.
        let picks: Vec<(&Var, usize, f64)> = (0..10)
            .map(|_| {
                let v = &vars[r.random_range(0..vars.len())];
                let i = r.random_range(0..v.numel());
                (v, i, grads.get(&v.tensor()).map_or(0.0, |g| g.data()[i]))
            })
            .collect();
        let mut worst: f64 = 0.0;
        for (v, i, an) in picks {
            worst = worst.max(check_var(v.name(), v, &[i], &[an], &|| f().item())?);
        }
        report.push(format!("{label} {worst:.0e}"));
    }
    Ok(format!("max relative error: {}", report.join(", ")))
}

// 3 ------------------------------------------------------------------------

fn one_hot(cell: &SearchCell, i: usize) {
    let mut l = ArrayD::zeros(IxDyn(&[cell.candidates.len()]));
    l[[i]] = 1e3;
    cell.alpha.logits.set(l);
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let store = ParamStore::new(3);
    let cell = SearchCell::simple(0, "b", &SRSM_CANDIDATES, 3, 3, &store.root().sub("b"), &store.root(), Activation::default())
        .unwrap();
    let x = Tensor::constant(random(&[2, 3, 10, 10], -1.0, 1.0, &mut r));
    let mut op_diff: f64 = 0.0;
    for i in 0..cell.candidates.len() {
        one_hot(&cell, i);
        let relaxed = cell.relax_forward(&x).unwrap();
        let direct = cell.candidates[i].forward(&x).unwrap();
        op_diff = op_diff.max((relaxed.value() - direct.value()).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
    }
    ensure!(op_diff < 1e-6, "one-hot cell differs from its operator by {op_diff:e}");

    let table = LatencyTable::from_entries(ALL_OPERATORS.iter().enumerate().map(|(i, n)| (*n, 1.0 + i as f64)));
    let mut net_diff: f64 = 0.0;
    for (k, misaligned) in [false, true].into_iter().enumerate() {
        let mut cfg = NetConfig::with_channels(3);
        if misaligned {
            cfg = cfg.misaligned();
        }
        let sup = FusionNet::supernet(&cfg, 7 + k as u64).unwrap();
        for cell in sup.cells() {
            one_hot(cell, r.random_range(0..cell.candidates.len()));
        }
        let g = discretize(&sup, &table, 0.0, 0).unwrap();
        let disc = FusionNet::from_genotype(&g, 99).unwrap();
        ensure!(disc.weights.copy_matching(&sup.weights) == disc.weights.len(), "weights of the discretized net not all shared");
        let data = Dataset::synthetic(2, 16, 16, &SynthConfig::default(), misaligned, 5).unwrap();
        let pair = data.full_batch().unwrap();
        let (a, b) = (sup.fuse(&pair).unwrap(), disc.fuse(&pair).unwrap());
        net_diff = net_diff.max((a.array() - b.array()).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
    }
    ensure!(net_diff < 1e-5, "one-hot super-net differs from the discretized net by {net_diff:e}");
    Ok(format!("operator diff {op_diff:.1e}, network diff {net_diff:.1e}"))
}

// 4 ------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let store = ParamStore::new(0);
    let cells: Vec<SearchCell> = (0..2)
        .map(|i| {
            let tag = format!("b{i}");
            SearchCell::simple(i, &tag, &["C-1", "C-3"], 2, 2, &store.root().sub(&tag), &store.root(), Activation::Linear).unwrap()
        })
        .collect();
    let refs: Vec<&SearchCell> = cells.iter().collect();
    let table = LatencyTable::from_entries([("C-1", 1.0), ("C-3", 3.0)]);
    let r = latency_regularizer(&refs, &table).unwrap().item();
    ensure!(r == 4.0, "two-block example gives {r} ms, expected 4");

    let mut gen = rng(4);
    let table = LatencyTable::from_entries(ALL_OPERATORS.iter().map(|n| (*n, gen.random_range(0.1..5.0))));
    let net = FusionNet::supernet(&NetConfig::with_channels(2).misaligned(), 0).unwrap();
    for cell in net.cells() {
        one_hot(cell, gen.random_range(0..cell.candidates.len()));
    }
    let g = discretize(&net, &table, 0.0, 0).unwrap();
    let reg = latency_regularizer(&net.cells(), &table).unwrap().item();
    ensure!((g.estimated_latency_ms - reg).abs() < 1e-9, "genotype {} ms vs regularizer {reg} ms", g.estimated_latency_ms);
    Ok(format!("example = {r} ms; genotype {:.6} ms = regularizer {reg:.6} ms", g.estimated_latency_ms))
}

// 5 ------------------------------------------------------------------------

/// Benchmark input of the measured table. Larger than the search networks so
/// the cheapest operators still run long enough to time.
const TABLE_SHAPE: (usize, usize, usize) = (8, 32, 32);
const SEARCH_CHANNELS: usize = 4;

fn measured_table() -> &'static LatencyTable {
    static TABLE: OnceLock<LatencyTable> = OnceLock::new();
    TABLE.get_or_init(|| build_latency_table(&ALL_OPERATORS, TABLE_SHAPE, &TimingProtocol::default()).unwrap())
}

fn criterion_5() -> Outcome {
    let table = measured_table();
    let data = Dataset::synthetic(16, 32, 32, &SynthConfig::default(), false, 50).unwrap();
    let net = NetConfig::with_channels(SEARCH_CHANNELS);
    let search = |eta: f64, seed: u64| {
        let cfg = SearchConfig { eta, pretrain_epochs: 2, search_epochs: 20, patch: None, seed, ..SearchConfig::default() };
        run_search(&data, &net, &cfg, table).unwrap().genotype
    };
    let mut means = Vec::new();
    for eta in [0.0, 0.5, 1.0] {
        let lats: Vec<f64> = (0..3).map(|s| search(eta, s).estimated_latency_ms).collect();
        means.push(lats.iter().sum::<f64>() / 3.0);
    }
    let trend = means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" >= ");
    ensure!(means.windows(2).all(|w| w[1] <= w[0]), "mean latency not non-increasing over eta 0, 0.5, 1: {means:?}");

    let g = search(1e6, 0);
    let layout = net.layout();
    for (slot, block) in layout.iter().zip(&g.blocks) {
        let fastest = slot.candidates.iter().min_by(|a, b| table.get(a).unwrap().total_cmp(&table.get(b).unwrap())).unwrap();
        ensure!(&block.op == fastest, "eta=1e6 picked {} at {}, fastest is {fastest}", block.op, block.tag());
    }
    Ok(format!("mean ms {trend}; eta=1e6 all-fastest"))
}

// 6 ------------------------------------------------------------------------

fn psnr_of(a: &Path, b: &Path) -> f64 {
    psnr(&mefnas::data::load_image(a).unwrap(), &mefnas::data::load_image(b).unwrap()).unwrap()
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let clean = SynthConfig { noise_sigma: 0.0, ..SynthConfig::default() };
    Dataset::synthetic(8, 64, 64, &clean, false, 60).unwrap().save(&data_dir).unwrap();
    // Train on the stored 8-bit frames so the CLI sees the same inputs.
    let data = Dataset::load(&data_dir).unwrap();
    let run = dir.path().join("run");
    let mut net = NetConfig::with_channels(8);
    net.srsm.cascade_count = 1;
    let g = Genotype::uniform(&net, "C-3").unwrap();
    let t = train(&g, &data, &desk_train(500, 8, LossWeights::intensity_only()), Some(&run)).unwrap();
    let train_psnr = evaluate(&t.net, &data).unwrap().mean_psnr;

    let y = dir.path().join("fused.png");
    let status = Command::new(env!("CARGO_BIN_EXE_mefnas"))
        .arg("fuse")
        .args(["--under", data_dir.join("under_0000.png").to_str().unwrap()])
        .args(["--over", data_dir.join("over_0000.png").to_str().unwrap()])
        .args(["--ckpt", run.to_str().unwrap(), "--out", y.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    ensure!(status.success(), "mefnas fuse failed: {status}");
    let fused = psnr_of(&y, &data_dir.join("gt_0000.png"));
    ensure!(train_psnr >= 30.0 && fused >= 30.0, "train PSNR {train_psnr:.2} dB, fused pair {fused:.2} dB (need >= 30)");
    Ok(format!("train PSNR {train_psnr:.2} dB after 500 steps; CLI-fused pair {fused:.2} dB"))
}

// 7, 8 -----------------------------------------------------------------------

fn ablation_rows(kind: AblationKind, data: &Dataset, budget: &AblationBudget, variants: &[&str]) -> Vec<(String, f64)> {
    assert!(variants.iter().all(|v| ablation_variants(kind, budget).iter().any(|a| a == v)));
    variants.iter().map(|v| (v.to_string(), run_ablation_variant(kind, v, data, budget).unwrap().psnr)).collect()
}

fn criterion_7() -> Outcome {
    let data = Dataset::synthetic(16, 64, 64, &SynthConfig::default(), false, 70).unwrap();
    let budget = AblationBudget { net: NetConfig::with_channels(8), train: desk_train(500, 8, LossWeights::default()), ..Default::default() };
    let rows = ablation_rows(AblationKind::SrsmCascade, &data, &budget, &["w/o", "cascade-2"]);
    let (without, cascade) = (rows[0].1, rows[1].1);
    let detail = format!("w/o {without:.2} dB, cascade-2 {cascade:.2} dB, gain {:+.2} dB", cascade - without);
    ensure!(cascade >= without + 1.0, "{detail} (need >= +1.00)");
    Ok(detail)
}

fn criterion_8() -> Outcome {
    let mut synth = SynthConfig::default();
    synth.warp = WarpLimits::translation_only(8.0);
    let data = Dataset::synthetic(16, 64, 64, &synth, true, 80).unwrap();
    let mut net = NetConfig::with_channels(8);
    net.srsm.cascade_count = 1;
    let budget = AblationBudget { net, train: desk_train(500, 8, LossWeights::intensity_only()), ..Default::default() };
    let rows = ablation_rows(AblationKind::Dasm, &data, &budget, &["w/o", "after-relighting"]);
    let (without, with) = (rows[0].1, rows[1].1);
    let detail = format!("w/o {without:.2} dB, with alignment {with:.2} dB, gain {:+.2} dB", with - without);
    ensure!(with >= without + 0.5, "{detail} (need >= +0.50)");
    Ok(detail)
}

// 9 ------------------------------------------------------------------------

fn image(b: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> Tensor {
    Tensor::constant(Array4::from_shape_fn((b, 3, h, w), |(n, c, i, j)| f(n, c, i, j)).into_dyn())
}

/// `D(x) = mean(x)` per sample.
struct MeanProbe;

impl Critic for MeanProbe {
    fn score(&self, x: &Tensor) -> mefnas::Result<Tensor> {
        let per = x.numel() / x.shape()[0];
        Ok(x.sum_per_item().scale(1.0 / per as f64))
    }

    fn vars(&self) -> Vec<Var> {
        Vec::new()
    }
}

fn criterion_9() -> Outcome {
    let mut r = rng(9);
    let (h, w) = (16, 16);
    let gt = Tensor::constant(random(&[2, 3, h, w], 0.1, 0.9, &mut r));
    let shifted = gt.add_scalar(0.1);
    ensure!(intensity_loss(&gt, &gt).unwrap().item() == 0.0, "l_int(x, x) != 0");
    let li = intensity_loss(&shifted, &gt).unwrap().item();
    ensure!((li - 0.3).abs() < 1e-12, "constant 0.1 offset gives l_int {li}, expected 0.3");
    ensure!(gradient_loss(&gt, &gt).unwrap().item() == 0.0, "l_gra(x, x) != 0");
    let lg = gradient_loss(&shifted, &gt).unwrap().item();
    ensure!(lg.abs() < 1e-12, "constant offset gives l_gra {lg}");
    let a = 0.03;
    let ramp = image(1, h, w, |_, _, _, j| a * j as f64);
    let gx = sobel(&ramp);
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let v = gx.value()[[0, 0, 0, i, j]];
            ensure!((v.abs() - 8.0 * a).abs() < 1e-12, "ramp Gx at ({i},{j}) = {v}, expected 8a = {}", 8.0 * a);
        }
    }

    let u = vec![0.3, 0.8];
    let y = Tensor::constant(random(&[2, 3, h, w], 0.1, 0.9, &mut r));
    let zero = Discriminator::new(&ParamStore::new(1).root(), 4);
    for v in zero.vars() {
        v.set(ArrayD::zeros(IxDyn(&v.shape())));
    }
    let (gen, disc) = (generator_loss(&zero, &y).unwrap(), discriminator_loss(&zero, &y, &gt, 10.0, &u).unwrap());
    ensure!(gen.item() == 0.0 && disc.item() == 10.0, "zero critic: gen {} disc {} (expected 0, 10)", gen.item(), disc.item());

    let n = (3 * h * w) as f64;
    let closed = (1.0 / n.sqrt() - 1.0).powi(2);
    let d = discriminator_loss(&MeanProbe, &y, &gt, 10.0, &u).unwrap().item();
    let gap = MeanProbe.score(&y).unwrap().mean_all().item() - MeanProbe.score(&gt).unwrap().mean_all().item();
    ensure!((d - gap - 10.0 * closed).abs() < 1e-6, "linear probe penalty {} vs closed form {}", (d - gap) / 10.0, closed);
    let same = discriminator_loss(&MeanProbe, &gt, &gt, 10.0, &u).unwrap().item();
    ensure!((same - 10.0 * closed).abs() < 1e-12, "y = gt leaves a Wasserstein gap: {same}");

    let intensity = total_loss(&y, &gt, None, &LossWeights::intensity_only()).unwrap();
    ensure!(intensity.report.l_total == intensity.report.l_int, "beta = 0 total differs from l_int");
    let identical = total_loss(&gt, &gt, Some(&zero), &LossWeights::default()).unwrap();
    ensure!(identical.report.l_total == 0.0, "y = gt with a zero critic gives {}", identical.report.l_total);
    let critic = Discriminator::new(&ParamStore::new(2).root(), 4);
    let full = total_loss(&y, &gt, Some(&critic), &LossWeights::default()).unwrap().report;
    let rebuilt = full.l_int + 0.75 * full.l_gra + 0.05 * full.l_dis;
    ensure!((full.l_total - rebuilt).abs() < 1e-12, "report {} vs reconstruction {rebuilt}", full.l_total);
    Ok(format!("trivial examples exact; linear-probe penalty {closed:.9} matched; reconstruction error {:.0e}", (full.l_total - rebuilt).abs()))
}

// 10 -----------------------------------------------------------------------

fn img(t: Tensor) -> ImageTensor {
    ImageTensor::from_tensor(&t).unwrap()
}

fn criterion_10() -> Outcome {
    let mut r = rng(10);
    let gt = img(Tensor::constant(random(&[1, 3, 32, 32], 0.2, 0.8, &mut r)));
    let checks = [
        ("psnr(x, x)", psnr(&gt, &gt).unwrap(), 100.0),
        ("psnr error 0.1", psnr(&img(gt.to_tensor().add_scalar(0.1)), &gt).unwrap(), 20.0),
        ("psnr error 0.01", psnr(&img(gt.to_tensor().add_scalar(-0.01)), &gt).unwrap(), 40.0),
        ("ssim(x, x)", ssim(&gt, &gt).unwrap(), 1.0),
        ("ssim constants", ssim(&ImageTensor::filled(1, 16, 16, 0.4).unwrap(), &ImageTensor::filled(1, 16, 16, 0.4).unwrap()).unwrap(), 1.0),
    ];
    for (name, got, want) in checks {
        ensure!((got - want).abs() < 1e-9, "{name} = {got}, expected {want}");
    }
    let inverted = ssim(&img(gt.to_tensor().neg().add_scalar(1.0)), &gt).unwrap();
    ensure!(inverted < 1.0, "ssim(1 - x, x) = {inverted}");
    let mut last = f64::INFINITY;
    let mut trail = Vec::new();
    for amp in [0.01, 0.05, 0.1] {
        let noise = random(&[1, 3, 32, 32], -amp, amp, &mut rng(11));
        let p = psnr(&img(gt.to_tensor().add(&Tensor::constant(noise))), &gt).unwrap();
        ensure!(p < last, "psnr not decreasing at amplitude {amp}: {p} after {last}");
        trail.push(format!("{p:.2}"));
        last = p;
    }
    Ok(format!("examples exact; noise 0.01/0.05/0.1 -> {} dB", trail.join("/")))
}

// 11 -----------------------------------------------------------------------

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "runs.jsonl")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut synth_dirs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("synth{k}"));
        let ok = Command::new(env!("CARGO_BIN_EXE_mefnas"))
            .args(["synth", "--count", "4", "--size", "32", "--misaligned", "true", "--seed", "11", "--out", out.to_str().unwrap()])
            .env("RUST_LOG", "warn")
            .status()
            .unwrap()
            .success();
        ensure!(ok, "mefnas synth failed");
        synth_dirs.push(dir_bytes(&out));
    }
    ensure!(synth_dirs[0] == synth_dirs[1], "two synth runs differ");

    let data = Dataset::load(dir.path().join("synth0")).unwrap();
    let mut net = NetConfig::with_channels(2);
    net.srsm.cascade_count = 1;
    let table = LatencyTable::from_entries(ALL_OPERATORS.iter().enumerate().map(|(i, n)| (*n, 1.0 + i as f64)));
    let cfg = SearchConfig { pretrain_epochs: 1, search_epochs: 2, batch_size: 2, patch: Some(16), seed: 11, ..SearchConfig::default() };
    let (a, b) = (run_search(&data, &net, &cfg, &table).unwrap(), run_search(&data, &net, &cfg, &table).unwrap());
    ensure!(a.genotype == b.genotype && a.log == b.log, "search is not reproducible");

    let tc = TrainConfig { max_steps: Some(3), batch_size: 2, patch: Some(16), disc_channels: 2, lr: 1e-3, seed: 11, ..TrainConfig::default() };
    let run = dir.path().join("run");
    let t1 = train(&a.genotype, &data, &tc, Some(&run)).unwrap();
    let t2 = train(&a.genotype, &data, &tc, None).unwrap();
    ensure!(t1.log == t2.log && t1.net.weights.snapshot() == t2.net.weights.snapshot(), "training is not reproducible");

    let stored = Checkpoint::load(checkpoint_path(&run, 3)).unwrap();
    ensure!(stored == t1.checkpoint(), "checkpoint round trip changed the state");
    let loaded = load_model(&run).unwrap();
    for pair in &data.pairs {
        ensure!(loaded.fuse(pair).unwrap() == t1.net.fuse(pair).unwrap(), "reloaded model fuses differently");
    }
    Ok("synth bytes, search, training and checkpoint round trip all identical".into())
}

// 12 -----------------------------------------------------------------------

fn criterion_12() -> Outcome {
    let build = || build_latency_table(&ALL_OPERATORS, TABLE_SHAPE, &TimingProtocol::default()).unwrap();
    let (first, second) = (&build(), build());
    let mut worst = ("", 0.0f64);
    for op in ALL_OPERATORS {
        let (a, b) = (first.get(op).unwrap(), second.get(op).unwrap());
        let mean = 0.5 * (a + b);
        // Sample standard deviation of the two builds.
        let cov = (a - b).abs() / 2f64.sqrt() / mean;
        if cov > worst.1 {
            worst = (op, cov);
        }
    }
    ensure!(worst.1 < 0.10, "CoV of {} is {:.1}%", worst.0, 100.0 * worst.1);
    let (c1, c7) = (first.get("C-1").unwrap(), first.get("C-7").unwrap());
    ensure!(c7 > c1, "C-7 {c7} ms is not slower than C-1 {c1} ms");
    Ok(format!("worst CoV {:.1}% ({}); C-1 {c1:.4} ms < C-7 {c7:.4} ms", 100.0 * worst.1, worst.0))
}

// --------------------------------------------------------------------------

const CRITERIA: [(u32, &str, fn() -> Outcome); 12] = [
    (1, "zero-offset deformable conv vs dense oracle", criterion_1),
    (2, "gradient checks", criterion_2),
    (3, "relaxation identities", criterion_3),
    (4, "latency regularizer", criterion_4),
    (5, "eta trend", criterion_5),
    (6, "overfit probe", criterion_6),
    (7, "SRSM ablation trend", criterion_7),
    (8, "DASM ablation trend", criterion_8),
    (9, "loss identities", criterion_9),
    (10, "metric correctness", criterion_10),
    (11, "determinism", criterion_11),
    (12, "latency benchmark stability", criterion_12),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        for (n, name, _) in CRITERIA {
            println!("criterion {n}: {name}: test");
        }
        return;
    }
    let picked: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    // A name filter meant for other test targets selects nothing here.
    if picked.is_empty() && !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    no_grad(|| ());
    let mut err = std::io::stderr();
    let mut failed = Vec::new();
    for (n, name, check) in CRITERIA {
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let _ = writeln!(err, "criterion {n:>2} [{tag}] {name}: {detail} ({secs:.1}s)");
        if outcome.is_err() {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        let _ = writeln!(err, "acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
