// Compare the feature/spatial weightings on planted regions whose
// boundaries carry noise shared along each region pair, optionally mixed
// with the neighbouring region's prototype.
//
//     cargo run --release --example weight_ablation [band] [noise] [mix]

use uniap::eval::eval_iou;
use uniap::synth::{synth_generate_with, SynthParams};
use uniap::{run_uniap, UniapConfig};

/// Mean best IoU per weighting, averaged over a fixed set of seeds.
pub fn run_example(band: usize, noise: f64, mix: f64) -> uniap::Result<Vec<(f64, f64, f64)>> {
    println!("boundary band {band}, shared noise {noise}, prototype mix {mix}");
    let seeds = [42u64, 0, 1, 2, 3, 4];
    let mut rows = Vec::new();
    for (omega_f, omega_s) in [(0.6, 0.4), (1.0, 0.0), (0.0, 1.0)] {
        let cfg = UniapConfig {
            omega_f,
            omega_s,
            ..UniapConfig::default()
        };
        let mut scores = Vec::new();
        for seed in seeds {
            let params = SynthParams::new(32, 32, 64, 6, 0.05, seed)
                .with_boundary(band, noise)
                .with_boundary_mix(mix);
            let (fm, truth) = synth_generate_with(&params)?;
            scores.push(eval_iou(&run_uniap(&fm, &cfg)?, &truth)?.mean_best_iou);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let per_seed: Vec<String> = scores.iter().map(|s| format!("{s:.3}")).collect();
        println!(
            "omega_f {omega_f:.1} omega_s {omega_s:.1}: mean best IoU {mean:.4}  per seed {}",
            per_seed.join(" ")
        );
        rows.push((omega_f, omega_s, mean));
    }
    Ok(rows)
}

fn main() -> uniap::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let band = args.first().map_or(1, |&b| b as usize);
    let noise = args.get(1).copied().unwrap_or(1.0);
    let mix = args.get(2).copied().unwrap_or(0.0);
    run_example(band, noise, mix).map(|_| ())
}
