// Time pooling on synthetic maps at two sizes, with a per-layer breakdown.
//
//     cargo run --release --example benchmark [workers]

use uniap::bench::{bench_run, BenchReport};
use uniap::synth::synth_generate;
use uniap::UniapConfig;

/// Benchmarks one square `side×side×dim` map.
pub fn run_example(side: usize, dim: usize, regions: usize, workers: usize) -> uniap::Result<BenchReport> {
    let (fm, _) = synth_generate(side, side, dim, regions, 0.05, 42)?;
    let report = bench_run(&fm, &UniapConfig::default(), 5, workers)?;
    println!("{report}\n");
    Ok(report)
}

fn main() -> uniap::Result<()> {
    let workers = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(8);
    run_example(32, 64, 6, workers)?;
    run_example(64, 768, 12, workers)?;
    Ok(())
}
