use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{Activation, Operator, OperatorSpec, SearchCell};
use crate::param::ParamStore;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingProtocol {
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub reducer: String,
}

impl Default for TimingProtocol {
    fn default() -> Self {
        TimingProtocol { warmup_runs: 10, timed_runs: 30, reducer: "median".into() }
    }
}

/// Measured forward latency per operator, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub device_label: String,
    /// `(C, H, W)` of the benchmark input.
    pub reference_shape: (usize, usize, usize),
    pub protocol: TimingProtocol,
    pub entries: BTreeMap<String, f64>,
}

impl LatencyTable {
    /// A table with given entries and placeholder metadata.
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        LatencyTable {
            device_label: "manual".into(),
            reference_shape: (0, 0, 0),
            protocol: TimingProtocol::default(),
            entries: entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        self.entries.get(name).copied().ok_or_else(|| Error::LatencyLookupMiss(name.to_string()))
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut t = self.clone();
        t.entries.values_mut().for_each(|v| *v *= k);
        t
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((k, v)) = self.entries.iter().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!("latency of `{k}` must be positive, got {v}")));
        }
        Ok(())
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
            .map_err(|e| Error::InvalidParameter(format!("cannot read latency table {}: {e}", path.display())))?;
        let t: LatencyTable = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }
}

pub fn device_label() -> String {
    format!("cpu-{}-{}-1thread", std::env::consts::ARCH, std::env::consts::OS)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

struct Bench {
    name: String,
    op: Operator,
    x: Tensor,
}

impl Bench {
    fn new(name: &str, shape: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = shape;
        let unbench = |reason: String| Error::Unbenchmarkable { name: name.to_string(), reason };
        let spec = OperatorSpec::new(name, c, c).map_err(|e| unbench(e.to_string()))?;
        let store = ParamStore::new(0);
        let op = Operator::new(spec, &store.root(), Activation::default()).map_err(|e| unbench(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[1, c, h, w]), data).map_err(|e| unbench(e.to_string()))?);
        Ok(Bench { name: name.to_string(), op, x })
    }

    /// One forward pass in milliseconds.
    fn run(&self) -> Result<f64> {
        let t0 = Instant::now();
        std::hint::black_box(
            self.op.forward(&self.x).map_err(|e| Error::Unbenchmarkable { name: self.name.clone(), reason: e.to_string() })?,
        );
        Ok(t0.elapsed().as_secs_f64() * 1e3)
    }
}

fn check_protocol(name: &str, protocol: &TimingProtocol) -> Result<()> {
    let unbench = |reason: String| Error::Unbenchmarkable { name: name.to_string(), reason };
    if protocol.timed_runs == 0 {
        return Err(unbench("timed_runs must be positive".into()));
    }
    if !["median", "mean", "min"].contains(&protocol.reducer.as_str()) {
        return Err(unbench(format!("unknown reducer `{}`", protocol.reducer)));
    }
    Ok(())
}

fn reduce(times: Vec<f64>, reducer: &str) -> f64 {
    let ms = match reducer {
        "median" => median(times),
        "mean" => times.iter().sum::<f64>() / times.len() as f64,
        _ => times.iter().copied().fold(f64::INFINITY, f64::min),
    };
    ms.max(1e-6)
}

/// Times one operator's forward pass (no graph recorded) at `shape`.
pub fn benchmark_operator(name: &str, shape: (usize, usize, usize), protocol: &TimingProtocol) -> Result<f64> {
    check_protocol(name, protocol)?;
    let bench = Bench::new(name, shape)?;
    no_grad(|| {
        for _ in 0..protocol.warmup_runs {
            bench.run()?;
        }
        let times = (0..protocol.timed_runs).map(|_| bench.run()).collect::<Result<Vec<_>>>()?;
        Ok(reduce(times, &protocol.reducer))
    })
}

/// Timed runs per operator in one round of [`build_latency_table`].
const ROUND_RUNS: usize = 3;

/// Benchmarks every named operator at `reference_shape` = `(C, H, W)`.
///
/// After the warm-up runs, the timed runs are taken in short rounds that go
/// over all operators in turn, each round re-warming the operator with one
/// discarded run. An operator's samples then span the whole build, so a slow
/// stretch of the host shifts every entry a little instead of a few a lot.
pub fn build_latency_table(ops: &[&str], reference_shape: (usize, usize, usize), protocol: &TimingProtocol) -> Result<LatencyTable> {
    let benches = ops
        .iter()
        .map(|name| {
            check_protocol(name, protocol)?;
            Bench::new(name, reference_shape)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut times = vec![Vec::with_capacity(protocol.timed_runs); benches.len()];
    no_grad(|| -> Result<()> {
        for b in &benches {
            for _ in 0..protocol.warmup_runs {
                b.run()?;
            }
        }
        while times[0].len() < protocol.timed_runs {
            for (b, t) in benches.iter().zip(&mut times) {
                b.run()?;
                for _ in 0..ROUND_RUNS.min(protocol.timed_runs - t.len()) {
                    t.push(b.run()?);
                }
            }
        }
        Ok(())
    })?;
    let entries = benches.iter().zip(times).map(|(b, t)| (b.name.clone(), reduce(t, &protocol.reducer))).collect();
    Ok(LatencyTable { device_label: device_label(), reference_shape, protocol: protocol.clone(), entries })
}

/// `R(α) = Σ_blocks Σ_O softmax(α)_O · LAT(O)`, differentiable in every α.
pub fn latency_regularizer(cells: &[&SearchCell], table: &LatencyTable) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for cell in cells {
        let lat: Vec<f64> = cell.names().iter().map(|n| table.get(n)).collect::<Result<_>>()?;
        let term = cell.probs().dot(&Tensor::from_vec(&[lat.len()], lat));
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term),
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// Mean Shannon entropy (nats) of the cells' operator distributions.
pub fn alpha_entropy(cells: &[&SearchCell]) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    let h: f64 = cells
        .iter()
        .map(|c| c.probs().data().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
        .sum();
    h / cells.len() as f64
}
