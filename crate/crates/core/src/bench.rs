//! Wall-clock timing of [`run_uniap`](crate::run_uniap) with a per-layer
//! breakdown and a cross-worker determinism check.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::mask_json_string;
use crate::pooling::{run_uniap_traced, UniapConfig};
use crate::tensor::FeatureMap;
use crate::with_workers;

/// Seconds per image reported for the reference GPU implementation.
pub const PAPER_SECONDS_PER_IMAGE: f64 = 0.045;

#[derive(Clone, Debug, Serialize)]
pub struct LayerTiming {
    pub tau: f64,
    pub median_s: f64,
    pub instance_nodes: usize,
    pub semantic_nodes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub repeats: usize,
    pub workers: usize,
    pub median_s: f64,
    pub min_s: f64,
    pub single_worker_median_s: f64,
    pub speedup: f64,
    pub per_layer: Vec<LayerTiming>,
    /// Pyramids from `workers` and from one worker serialize to the same
    /// bytes, features included.
    pub identical_outputs: bool,
    pub available_parallelism: usize,
    pub paper_reference_s: f64,
}

struct Series {
    totals: Vec<Duration>,
    layers: Vec<Vec<Duration>>,
    nodes: Vec<(usize, usize)>,
    output: String,
}

fn median(v: &mut [Duration]) -> f64 {
    v.sort_unstable();
    let n = v.len();
    let mid = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    };
    mid.as_secs_f64()
}

fn series(fm: &FeatureMap, cfg: &UniapConfig, repeats: usize, workers: usize) -> Result<Series> {
    with_workers(workers, || {
        let mut s = Series {
            totals: Vec::with_capacity(repeats),
            layers: vec![Vec::with_capacity(repeats); cfg.thresholds.len()],
            nodes: Vec::new(),
            output: String::new(),
        };
        for _ in 0..repeats {
            let start = Instant::now();
            let (pyramid, trace) = run_uniap_traced(fm, cfg)?;
            s.totals.push(start.elapsed());
            for (k, layer) in trace.iter().enumerate() {
                s.layers[k].push(layer.elapsed);
            }
            s.nodes = trace
                .iter()
                .map(|l| (l.instance.num_nodes(), l.semantic.num_nodes()))
                .collect();
            let out = mask_json_string(&pyramid, true)?;
            if s.output.is_empty() {
                s.output = out;
            } else if s.output != out {
                return Err(Error::InvalidParams(
                    "repeated runs produced different pyramids".into(),
                ));
            }
        }
        Ok(s)
    })
}

/// Times `repeats` runs with `workers` threads and, for the speedup and the
/// determinism check, the same number of single-threaded runs.
pub fn bench_run(fm: &FeatureMap, cfg: &UniapConfig, repeats: usize, workers: usize) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::InvalidParams(format!("repeats: {repeats} < 3")));
    }
    let workers = workers.max(1);
    let mut main = series(fm, cfg, repeats, workers)?;
    let (single_median, single_output) = if workers == 1 {
        (median(&mut main.totals.clone()), main.output.clone())
    } else {
        let mut one = series(fm, cfg, repeats, 1)?;
        (median(&mut one.totals), one.output)
    };
    let median_s = median(&mut main.totals);
    let per_layer = cfg
        .thresholds
        .iter()
        .zip(main.layers.iter_mut())
        .zip(&main.nodes)
        .map(|((&tau, times), &(instance_nodes, semantic_nodes))| LayerTiming {
            tau,
            median_s: median(times),
            instance_nodes,
            semantic_nodes,
        })
        .collect();
    Ok(BenchReport {
        height: fm.height(),
        width: fm.width(),
        dim: fm.dim(),
        repeats,
        workers,
        median_s,
        min_s: main.totals.iter().min().unwrap().as_secs_f64(),
        single_worker_median_s: single_median,
        speedup: single_median / median_s,
        per_layer,
        identical_outputs: main.output == single_output,
        available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        paper_reference_s: PAPER_SECONDS_PER_IMAGE,
    })
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "grid {}x{} d={}  repeats={}  workers={} (cores available: {})",
            self.height, self.width, self.dim, self.repeats, self.workers, self.available_parallelism
        )?;
        writeln!(
            f,
            "median {:.4}s  min {:.4}s  1-worker median {:.4}s  speedup {:.2}x",
            self.median_s, self.min_s, self.single_worker_median_s, self.speedup
        )?;
        for l in &self.per_layer {
            writeln!(
                f,
                "  tau {:.2}: {:.4}s  instance nodes {}  semantic nodes {}",
                l.tau, l.median_s, l.instance_nodes, l.semantic_nodes
            )?;
        }
        writeln!(f, "outputs identical across worker counts: {}", self.identical_outputs)?;
        write!(
            f,
            "reference: {:.3}s per image on the original GPU setup (hardware-dependent, not comparable)",
            self.paper_reference_s
        )
    }
}
