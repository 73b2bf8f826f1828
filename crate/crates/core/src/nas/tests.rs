use ndarray::{arr1, ArrayD, IxDyn};

use super::*;
use crate::data::{AugmentConfig, Dataset, SynthConfig};
use crate::error::Error;
use crate::net::{FusionNet, NetConfig};
use crate::ops::{Activation, SearchCell, ALL_OPERATORS};
use crate::param::ParamStore;
use crate::tensor::backward;

fn ranked_table() -> LatencyTable {
    LatencyTable::from_entries(ALL_OPERATORS.iter().enumerate().map(|(i, n)| (*n, 0.5 + 0.25 * i as f64)))
}

fn two_cells(store: &ParamStore) -> Vec<SearchCell> {
    (0..2)
        .map(|i| {
            let tag = format!("b{i}");
            SearchCell::simple(i, &tag, &["C-1", "C-3"], 2, 2, &store.root().sub(&tag), &store.root(), Activation::Linear)
                .unwrap()
        })
        .collect()
}

fn one_three() -> LatencyTable {
    LatencyTable::from_entries([("C-1", 1.0), ("C-3", 3.0)])
}

fn tiny_net() -> NetConfig {
    let mut cfg = NetConfig::with_channels(2);
    cfg.srsm.cascade_count = 1;
    cfg
}

fn tiny_search(eta: f64, seed: u64) -> SearchConfig {
    SearchConfig { eta, pretrain_epochs: 1, search_epochs: 2, batch_size: 2, patch: Some(8), seed, ..SearchConfig::default() }
}

fn tiny_data() -> Dataset {
    Dataset::synthetic(4, 8, 8, &SynthConfig::default(), false, 5).unwrap()
}

#[test]
fn two_block_example_is_four_ms() {
    let store = ParamStore::new(0);
    let cells = two_cells(&store);
    let refs: Vec<&SearchCell> = cells.iter().collect();
    assert_eq!(latency_regularizer(&refs, &one_three()).unwrap().item(), 4.0);
}

#[test]
fn one_hot_sums_chosen_latencies() {
    let store = ParamStore::new(0);
    let cells = two_cells(&store);
    cells[0].alpha.logits.set(arr1(&[1e4, 0.0]).into_dyn());
    cells[1].alpha.logits.set(arr1(&[0.0, 1e4]).into_dyn());
    let refs: Vec<&SearchCell> = cells.iter().collect();
    assert_eq!(latency_regularizer(&refs, &one_three()).unwrap().item(), 4.0);
    cells[1].alpha.logits.set(arr1(&[1e4, 0.0]).into_dyn());
    assert_eq!(latency_regularizer(&refs, &one_three()).unwrap().item(), 2.0);
}

#[test]
fn regularizer_is_bounded_by_extreme_choices() {
    let store = ParamStore::new(0);
    let cells = two_cells(&store);
    let refs: Vec<&SearchCell> = cells.iter().collect();
    for k in 0..20 {
        for (j, c) in cells.iter().enumerate() {
            let a = (k as f64 * 0.7 + j as f64).sin() * 6.0;
            c.alpha.logits.set(arr1(&[a, -a * 0.3]).into_dyn());
        }
        let r = latency_regularizer(&refs, &one_three()).unwrap().item();
        assert!((2.0..=6.0).contains(&r), "{r}");
    }
}

#[test]
fn regularizer_gradient_matches_finite_differences() {
    let store = ParamStore::new(0);
    let ops = ["C-1", "C-3", "C-5", "DC-3"];
    let table = LatencyTable::from_entries([("C-1", 0.3), ("C-3", 1.1), ("C-5", 2.9), ("DC-3", 1.4)]);
    let cell = SearchCell::simple(0, "b", &ops, 2, 2, &store.root().sub("b"), &store.root(), Activation::Linear).unwrap();
    cell.alpha.logits.set(arr1(&[0.2, -0.5, 0.9, 0.1]).into_dyn());
    let eval = || latency_regularizer(&[&cell], &table).unwrap();
    let r = eval();
    let grads = backward(&r).unwrap();
    let g = grads.get(&cell.alpha.logits.tensor()).unwrap().to_vec();
    let h = 1e-5;
    for i in 0..ops.len() {
        let base = cell.alpha.logits.value();
        let mut plus = base.clone();
        plus[[i]] += h;
        cell.alpha.logits.set(plus);
        let fp = eval().item();
        let mut minus = base.clone();
        minus[[i]] -= h;
        cell.alpha.logits.set(minus);
        let fm = eval().item();
        cell.alpha.logits.set(base);
        let fd = (fp - fm) / (2.0 * h);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
        assert!(rel < 1e-6, "logit {i}: fd {fd} vs {g:?}");
    }
}

#[test]
fn missing_entry_is_a_lookup_miss() {
    let store = ParamStore::new(0);
    let cells = two_cells(&store);
    let table = LatencyTable::from_entries([("C-1", 1.0)]);
    let err = latency_regularizer(&[&cells[0]], &table).unwrap_err();
    assert!(matches!(err, Error::LatencyLookupMiss(ref n) if n == "C-3"));
}

#[test]
fn argmax_and_tie_breaks() {
    let store = ParamStore::new(0);
    let ops = ["C-1", "C-3", "C-5"];
    let cell = SearchCell::simple(0, "b", &ops, 2, 2, &store.root().sub("b"), &store.root(), Activation::Linear).unwrap();
    let table = LatencyTable::from_entries([("C-1", 5.0), ("C-3", 2.0), ("C-5", 1.0)]);
    cell.alpha.logits.set(arr1(&[0.1f64.ln(), 0.7f64.ln(), 0.2f64.ln()]).into_dyn());
    assert_eq!(choose(&cell, &table).unwrap(), 1);

    cell.alpha.logits.set(arr1(&[0.0, 1.0, 1.0]).into_dyn());
    assert_eq!(choose(&cell, &table).unwrap(), 2);
    let flat = LatencyTable::from_entries([("C-1", 1.0), ("C-3", 1.0), ("C-5", 1.0)]);
    assert_eq!(choose(&cell, &flat).unwrap(), 1);
}

#[test]
fn genotype_latency_equals_one_hot_regularizer() {
    let cfg = tiny_net();
    let net = FusionNet::supernet(&cfg, 3).unwrap();
    for (i, cell) in net.cells().iter().enumerate() {
        let mut l = ArrayD::zeros(IxDyn(&[cell.candidates.len()]));
        l[[(3 * i + 2) % cell.candidates.len()]] = 1e4;
        cell.alpha.logits.set(l);
    }
    let table = ranked_table();
    let g = discretize(&net, &table, 0.5, 3).unwrap();
    let r = latency_regularizer(&net.cells(), &table).unwrap().item();
    assert!((g.estimated_latency_ms - r).abs() < 1e-12);
    assert_eq!(g.estimated_latency_ms, g.latency(&table).unwrap());
    assert_eq!(g.blocks.len(), net.cells().len());
}

#[test]
fn genotype_json_roundtrip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("genotype.json");
    let g = discretize(&FusionNet::supernet(&tiny_net(), 0).unwrap(), &ranked_table(), 0.0, 0).unwrap();
    g.save(&path).unwrap();
    assert_eq!(Genotype::load(&path).unwrap(), g);
    let text = std::fs::read_to_string(&path).unwrap().replacen(&g.blocks[0].op, "C-4", 1);
    std::fs::write(&path, text).unwrap();
    assert!(matches!(Genotype::load(&path), Err(Error::UnknownOperator(_))));
}

#[test]
fn latency_table_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.json");
    let t = build_latency_table(&["C-1", "RC-3"], (2, 8, 8), &TimingProtocol { warmup_runs: 1, timed_runs: 3, ..Default::default() })
        .unwrap();
    assert!(t.entries.values().all(|&v| v > 0.0));
    t.save(&path).unwrap();
    assert_eq!(LatencyTable::load(&path).unwrap(), t);
    let bad = build_latency_table(&["C-2"], (2, 8, 8), &TimingProtocol::default());
    assert!(matches!(bad, Err(Error::Unbenchmarkable { .. })));
}

fn run_steps(net: &FusionNet, cfg: &SearchConfig, table: &LatencyTable, steps: usize) {
    let data = tiny_data();
    let (train, val) = data.split_even_odd();
    let aug = AugmentConfig::none();
    let mut state = SearchState::new(cfg, steps);
    for s in 0..steps as u64 {
        let bt = train.sample_batch(2, &aug, 1, s).unwrap();
        let bv = val.sample_batch(2, &aug, 2, s).unwrap();
        search_step(net, &bt, &bv, cfg, table, &mut state).unwrap();
        for c in net.cells() {
            let p = c.probs();
            assert!(p.all_finite());
            assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn dominant_eta_selects_fastest_operators() {
    let cfg = tiny_search(1e6, 0);
    let table = ranked_table();
    let net = FusionNet::supernet(&tiny_net(), 0).unwrap();
    run_steps(&net, &cfg, &table, 50);
    for cell in net.cells() {
        let lat: Vec<f64> = cell.names().iter().map(|n| table.get(n).unwrap()).collect();
        let fastest = (0..lat.len()).min_by(|&a, &b| lat[a].total_cmp(&lat[b])).unwrap();
        assert_eq!(choose(cell, &table).unwrap(), fastest, "{}", cell.tag);
    }
}

#[test]
fn zero_eta_ignores_the_table() {
    let cfg = tiny_search(0.0, 0);
    let nets: Vec<FusionNet> = (0..2).map(|_| FusionNet::supernet(&tiny_net(), 0).unwrap()).collect();
    run_steps(&nets[0], &cfg, &ranked_table(), 4);
    let reversed = LatencyTable::from_entries(ALL_OPERATORS.iter().enumerate().map(|(i, n)| (*n, 100.0 - i as f64)));
    run_steps(&nets[1], &cfg, &reversed, 4);
    for (a, b) in nets[0].cells().iter().zip(nets[1].cells()) {
        assert_eq!(a.alpha.logits.value(), b.alpha.logits.value());
    }
}

#[test]
fn run_search_is_deterministic() {
    let data = tiny_data();
    let table = ranked_table();
    let a = run_search(&data, &tiny_net(), &tiny_search(0.5, 7), &table).unwrap();
    let b = run_search(&data, &tiny_net(), &tiny_search(0.5, 7), &table).unwrap();
    assert_eq!(a.genotype, b.genotype);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 2);
    let csv = search_log_csv(&a.log);
    assert!(csv.starts_with("epoch,loss_val,latency_reg,alpha_entropy\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn run_search_preconditions() {
    let table = ranked_table();
    let one = tiny_data().subset(&[0]);
    assert!(run_search(&one, &tiny_net(), &tiny_search(0.5, 0), &table).is_err());
    let partial = LatencyTable::from_entries([("C-1", 1.0)]);
    assert!(matches!(run_search(&tiny_data(), &tiny_net(), &tiny_search(0.5, 0), &partial), Err(Error::LatencyLookupMiss(_))));
    assert!(tiny_search(-1.0, 0).validate().is_err());
}

#[test]
fn non_finite_loss_reports_divergence() {
    let net = FusionNet::supernet(&tiny_net(), 0).unwrap();
    let v = &net.weight_vars()[0];
    v.set(ArrayD::from_elem(IxDyn(&v.shape()), f64::NAN));
    let data = tiny_data();
    let b = data.full_batch().unwrap();
    let mut state = SearchState::new(&tiny_search(0.5, 0), 1);
    let err = search_step(&net, &b, &b, &tiny_search(0.5, 0), &ranked_table(), &mut state).unwrap_err();
    match err {
        Error::SearchDiverged { state, .. } => assert!(state.contains("alpha")),
        e => panic!("unexpected {e}"),
    }
}
