//! Acceptance gate. Runs every check sequentially (timings are only
//! meaningful without other tests competing for cores), prints one
//! PASS/FAIL line per check and exits non-zero if any check failed.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uniap::bench::bench_run;
use uniap::ccl::{connected_components, label_propagation_components, union_find_oracle};
use uniap::eval::eval_iou;
use uniap::graph::{init_grid_graph, Edge};
use uniap::io::{read_mask_json, read_mask_list};
use uniap::maskops::{is_four_connected, mask_dice};
use uniap::pooling::{edge_similarities, run_uniap_traced, SCORE_SLACK};
use uniap::querysd::{hungarian_max, querysd_grad, querysd_loss};
use uniap::synth::{synth_generate, synth_generate_with, SynthParams};
use uniap::{run_uniap, with_workers, FeatureMap, QueryRow, QuerySdConfig, TokenMask, UniapConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let pass = out.pass && in_time;
    println!(
        "{} [{id}] {name}: {} ({:.2}s, limit {:.0}s{})",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        limit.as_secs_f64(),
        if in_time { "" } else { ", over time" }
    );
    pass
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_uniap")
}

fn run_cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(bin()).args(args).output().expect("failed to spawn uniap");
    assert!(
        out.status.success(),
        "uniap {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn planted_region_recovery() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (fmap, truth, pred) = (
        dir.path().join("f.fmap"),
        dir.path().join("truth.json"),
        dir.path().join("pred.json"),
    );
    run_cli(&[
        "synth", "--h", "32", "--w", "32", "--d", "64", "--regions", "6", "--noise", "0.05",
        "--seed", "42", "--out", path_str(&fmap), "--truth", path_str(&truth),
    ]);
    run_cli(&["segment", "--features", path_str(&fmap), "--out", path_str(&pred)]);
    let out = run_cli(&["eval", "--pred", path_str(&pred), "--truth", path_str(&truth)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let mean = report["mean_best_iou"].as_f64().unwrap();
    let per: Vec<f64> = report["per_truth"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["best_iou"].as_f64().unwrap())
        .collect();
    let min = per.iter().copied().fold(f64::INFINITY, f64::min);
    // the report must agree with scoring the files in-process
    let again = eval_iou(
        &read_mask_json(&pred).unwrap(),
        &read_mask_list(&truth).unwrap().masks.into_iter().map(|m| m.1).collect::<Vec<_>>(),
    )
    .unwrap();
    Outcome {
        pass: per.len() == 6 && mean >= 0.95 && min >= 0.90 && again.mean_best_iou == mean,
        detail: format!("{} regions, mean best IoU {mean:.4} (>= 0.95), worst {min:.4} (>= 0.90)", per.len()),
    }
}

/// Spatially smooth random map: gaussian tokens averaged with their
/// neighbours a few times.
fn smooth_random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    let mut v: Vec<f64> = (0..h * w * d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    for _ in 0..rng.random_range(0..4) {
        let prev = v.clone();
        for r in 0..h {
            for c in 0..w {
                let mut n = 1.0;
                let mut acc: Vec<f64> = prev[(r * w + c) * d..(r * w + c + 1) * d].to_vec();
                for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        let q = rr as usize * w + cc as usize;
                        for (a, b) in acc.iter_mut().zip(&prev[q * d..(q + 1) * d]) {
                            *a += b;
                        }
                        n += 1.0;
                    }
                }
                for (k, a) in acc.iter().enumerate() {
                    v[(r * w + c) * d + k] = a / n;
                }
            }
        }
    }
    let data = v
        .chunks_exact(d)
        .flat_map(|row| {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter().map(move |x| (x / n) as f32).collect::<Vec<_>>()
        })
        .collect();
    FeatureMap::new(h, w, d, data).unwrap()
}

fn hierarchy_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = Vec::new();
    let mut masks_checked = 0usize;
    let mut scores_checked = 0usize;
    for case in 0..100 {
        let (h, w) = (rng.random_range(4..=24), rng.random_range(4..=24));
        let d = if rng.random_bool(0.5) { 8 } else { 32 };
        let fm = if case % 2 == 0 {
            let regions = rng.random_range(1..=d.min(h * w).min(8));
            let params = SynthParams::new(h, w, d, regions, rng.random_range(0.0..1.5), rng.random())
                .with_boundary(rng.random_range(0..3), rng.random_range(0.0..1.0));
            synth_generate_with(&params).unwrap().0
        } else {
            smooth_random_map(&mut rng, h, w, d)
        };
        let cfg = UniapConfig {
            phi: rng.random_range(1..=5),
            ..UniapConfig::default()
        };
        let (pyramid, trace) = run_uniap_traced(&fm, &cfg).unwrap();
        let mut fail = |what: String| violations.push(format!("case {case} ({h}x{w}x{d}): {what}"));

        let mut scored = vec![init_grid_graph(&fm).unwrap()];
        for (t, layer) in trace.iter().enumerate() {
            if !layer.instance.is_partition() {
                fail(format!("layer {t} instance masks are not a partition"));
            }
            if !layer.semantic.is_partition() {
                fail(format!("layer {t} semantic masks are not a partition"));
            }
            let coarser = layer.instance.masks();
            let finer = if t == 0 { None } else { Some(trace[t - 1].instance.masks()) };
            for m in finer.into_iter().flatten() {
                let containing = coarser.iter().filter(|c| c.intersection_area(m) > 0).count();
                if containing != 1 || coarser.iter().all(|c| c.intersection_area(m) != m.area()) {
                    fail(format!("layer {t}: a layer {} mask is split", t - 1));
                }
            }
            scored.push(layer.instance.clone());
            scored.push(layer.semantic.clone());
        }
        for g in &scored {
            for s in edge_similarities(g, &fm, &cfg).unwrap() {
                scores_checked += 1;
                if !(-1.0 - SCORE_SLACK..=1.0 + SCORE_SLACK).contains(&s) {
                    fail(format!("edge score {s} out of range"));
                }
            }
        }
        for (t, level) in pyramid.levels.iter().enumerate() {
            for m in &level.instance {
                masks_checked += 1;
                if !is_four_connected(&m.mask, h, w) {
                    fail(format!("level {t} instance mask is not 4-connected"));
                }
                if !trace[t].instance.masks().contains(&m.mask) {
                    fail(format!("level {t} emitted mask is not a live supernode"));
                }
            }
        }
    }
    Outcome {
        pass: violations.is_empty(),
        detail: format!(
            "100 maps, {masks_checked} instance masks, {scores_checked} edge scores, {} violations{}",
            violations.len(),
            violations.first().map_or(String::new(), |v| format!(", first: {v}"))
        ),
    }
}

fn random_graph(rng: &mut ChaCha8Rng) -> (usize, Vec<Edge>) {
    let n = rng.random_range(1..=512);
    let density = rng.random_range(0.0..2.5);
    let m = (density * n as f64) as usize;
    let edges = (0..m)
        .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
        .filter(|(a, b)| a != b)
        .collect();
    (n, edges)
}

fn component_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..500 {
        let (n, edges) = random_graph(&mut rng);
        let oracle = union_find_oracle(n, &edges).unwrap();
        for workers in [1, 2, 8] {
            let (parallel, dispatched) = with_workers(workers, || {
                (
                    label_propagation_components(n, &edges).unwrap(),
                    connected_components(n, &edges).unwrap(),
                )
            });
            if parallel != oracle || dispatched != oracle {
                mismatches += 1;
            }
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("500 graphs x workers {{1, 2, 8}}, {mismatches} partitions differ from union-find"),
    }
}

/// Exhaustive maximum over partial injections of students into teachers,
/// summed in student order.
fn brute_force_best(scores: &[Vec<f64>]) -> f64 {
    fn go(s: &[Vec<f64>], row: usize, used: &mut [bool], skips: usize, acc: f64, best: &mut f64) {
        if row == s.len() {
            *best = best.max(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(s, row + 1, used, skips, acc + s[row][c], best);
                used[c] = false;
            }
        }
        if skips > 0 {
            go(s, row + 1, used, skips - 1, acc, best);
        }
    }
    let (rows, cols) = (scores.len(), scores[0].len());
    let mut best = f64::NEG_INFINITY;
    go(scores, 0, &mut vec![false; cols], rows.saturating_sub(cols), 0.0, &mut best);
    best
}

fn random_masks(rng: &mut ChaCha8Rng, count: usize, len: usize) -> Vec<TokenMask> {
    (0..count)
        .map(|_| {
            let p = rng.random_range(0.05..0.6);
            TokenMask::from_bools(&(0..len).map(|_| rng.random_bool(p)).collect::<Vec<_>>())
        })
        .collect()
}

fn matching_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let small = rng.random_range(1..=7);
        let large = rng.random_range(small..=small + 2);
        let (s, t) = if rng.random_bool(0.5) { (small, large) } else { (large, small) };
        let len = rng.random_range(4..=64);
        let (students, teachers) = (random_masks(&mut rng, s, len), random_masks(&mut rng, t, len));
        let scores: Vec<Vec<f64>> = students
            .iter()
            .map(|a| teachers.iter().map(|b| mask_dice(a, b).unwrap()).collect())
            .collect();
        let got = hungarian_max(&scores).unwrap().total_dice;
        let want = brute_force_best(&scores);
        if got != want {
            mismatches += 1;
            worst = worst.max((got - want).abs());
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("200 Dice matrices, {mismatches} totals differ from exhaustive search (max gap {worst:e})"),
    }
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = QuerySdConfig::default();
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut additivity = 0.0f64;
    for case in 0..100 {
        let k = if case % 2 == 0 { 8 } else { 512 };
        let pairs_n = rng.random_range(1..=10);
        let (ns, nt) = (pairs_n + rng.random_range(0..3), pairs_n + rng.random_range(0..3));
        let scale = rng.random_range(0.5..2.0);
        let mut rows = |n: usize| -> Vec<QueryRow> {
            (0..n)
                .map(|_| {
                    QueryRow::from(
                        (0..k)
                            .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
                            .collect::<Vec<_>>(),
                    )
                })
                .collect()
        };
        let (teacher, mut student) = (rows(nt), rows(ns));
        let mut s_idx: Vec<usize> = (0..ns).collect();
        let mut t_idx: Vec<usize> = (0..nt).collect();
        s_idx.sort_by_key(|_| rng.random::<u32>());
        t_idx.sort_by_key(|_| rng.random::<u32>());
        let pairs: Vec<(usize, usize)> = s_idx.into_iter().zip(t_idx).take(pairs_n).collect();

        let grad = querysd_grad(&teacher, &student, &pairs, &cfg).unwrap();
        // the loss is a sum of pair terms; a student's logits only enter its
        // own term, so that term alone is differenced (less cancellation)
        let total = querysd_loss(&teacher, &student, &pairs, &cfg).unwrap();
        let parts: f64 = pairs
            .iter()
            .map(|p| querysd_loss(&teacher, &student, &[*p], &cfg).unwrap())
            .sum();
        additivity = additivity.max((total - parts).abs() / total.abs().max(1.0));
        for &(s, t) in &pairs {
            for j in 0..k {
                let x = student[s].logits[j];
                student[s].logits[j] = x + h;
                let up = querysd_loss(&teacher, &student, &[(s, t)], &cfg).unwrap();
                student[s].logits[j] = x - h;
                let down = querysd_loss(&teacher, &student, &[(s, t)], &cfg).unwrap();
                student[s].logits[j] = x;
                let fd = (up - down) / (2.0 * h);
                let a = grad[s][j];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    Outcome {
        pass: worst <= 1e-4 && additivity <= 1e-12,
        detail: format!(
            "100 instances, max relative error {worst:.2e} (<= 1e-4, floor 1e-6), pair additivity {additivity:.1e}"
        ),
    }
}

fn runtime_targets() -> Outcome {
    let cfg = UniapConfig::default();
    let (large, _) = synth_generate(64, 64, 768, 10, 0.05, 3).unwrap();
    let big = bench_run(&large, &cfg, 5, 8).unwrap();
    let (small, _) = synth_generate(32, 32, 64, 6, 0.05, 42).unwrap();
    let little = bench_run(&small, &cfg, 5, 1).unwrap();
    let ok_big = big.median_s <= 2.0;
    let ok_speedup = big.speedup >= 2.0;
    let ok_small = little.median_s <= 0.25;
    Outcome {
        pass: ok_big && ok_speedup && ok_small && big.identical_outputs,
        detail: format!(
            "64x64x768 median {:.3}s with 8 workers (<= 2s: {}), speedup {:.2}x over 1 worker (>= 2x: {}), \
             32x32x64 median {:.4}s single worker (<= 0.25s: {}), {} core(s) available, reference {:.3}s/image",
            big.median_s,
            ok_big,
            big.speedup,
            ok_speedup,
            little.median_s,
            ok_small,
            big.available_parallelism,
            big.paper_reference_s
        ),
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut runs = 0;
    for (name, extra) in [("clean", vec![]), ("noisy", vec!["--boundary-band", "2", "--boundary-noise", "0.8"])] {
        let fmap = dir.path().join(format!("{name}.fmap"));
        let truth = dir.path().join(format!("{name}.truth.json"));
        let noise = if name == "clean" { "0.05" } else { "0.9" };
        let mut args = vec![
            "synth", "--h", "32", "--w", "40", "--d", "64", "--regions", "6", "--noise", noise, "--seed", "42",
            "--out", path_str(&fmap), "--truth", path_str(&truth),
        ];
        args.extend(extra);
        run_cli(&args);
        let mut reference: Option<Vec<u8>> = None;
        let variants: [Option<&str>; 6] = [None, None, None, Some("1"), Some("4"), Some("8")];
        for (i, workers) in variants.iter().enumerate() {
            let out = dir.path().join(format!("{name}.{i}.json"));
            let mut args = vec!["segment", "--features", path_str(&fmap), "--out", path_str(&out), "--with-features"];
            if let Some(w) = workers {
                args.extend(["--workers", w]);
            }
            run_cli(&args);
            runs += 1;
            let bytes = std::fs::read(&out).unwrap();
            match &reference {
                None => reference = Some(bytes),
                Some(r) => identical &= *r == bytes,
            }
        }
    }
    Outcome {
        pass: identical,
        detail: format!("{runs} segment runs (3 repeats, workers 1/4/8, two inputs), byte-identical: {identical}"),
    }
}

fn ablation_direction() -> Outcome {
    let params = |seed| SynthParams::new(32, 32, 64, 6, 0.05, seed).with_boundary(1, 1.0);
    let score = |seed, omega_f: f64, omega_s: f64| {
        let cfg = UniapConfig {
            omega_f,
            omega_s,
            ..UniapConfig::default()
        };
        let (fm, truth) = synth_generate_with(&params(seed)).unwrap();
        eval_iou(&run_uniap(&fm, &cfg).unwrap(), &truth).unwrap().mean_best_iou
    };
    let (default, feature_only) = (score(42, 0.6, 0.4), score(42, 1.0, 0.0));
    // supplementary: the same comparison averaged over more seeds
    let seeds = [0u64, 1, 2, 3, 4];
    let avg = |f: f64, s: f64| seeds.iter().map(|&k| score(k, f, s)).sum::<f64>() / seeds.len() as f64;
    Outcome {
        pass: default >= feature_only,
        detail: format!(
            "boundary-contaminated synthetic: (0.6, 0.4) mean best IoU {default:.4} vs (1.0, 0.0) {feature_only:.4}; \
             over seeds 0-4: {:.4} vs {:.4}",
            avg(0.6, 0.4),
            avg(1.0, 0.0)
        ),
    }
}

fn main() {
    let results = [
        check(1, "planted-region recovery", Duration::from_secs(5), planted_region_recovery),
        check(2, "hierarchy invariants", Duration::from_secs(60), hierarchy_suite),
        check(3, "component labeling oracle", Duration::from_secs(10), component_oracle),
        check(4, "matching oracle", Duration::from_secs(5), matching_oracle),
        check(5, "gradient check", Duration::from_secs(30), gradient_check),
        check(6, "runtime targets", Duration::from_secs(120), runtime_targets),
        check(7, "determinism", Duration::from_secs(120), determinism),
        check(8, "weighting ablation direction", Duration::from_secs(120), ablation_direction),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
