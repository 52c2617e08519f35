//! The `uniap` command-line tool.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::bench::bench_run;
use crate::error::{Error, Result};
use crate::eval::eval_iou;
use crate::graph::TokenMask;
use crate::io::{self, Config, MaskList};
use crate::maskops::CropBox;
use crate::pooling::{run_uniap, MaskKind, MaskPyramid};
use crate::querysd::{cropped_match_by_kind, querysd_loss, QueryRow};
use crate::synth::{synth_generate_with, SynthParams};
use crate::with_workers;

#[derive(Debug, Parser)]
#[command(name = "uniap", version, about = "Agglomerative pooling of token feature maps into pseudo-masks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pool a feature map into a multi-level mask pyramid.
    Segment {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write one PGM label map per level and kind into this directory.
        #[arg(long)]
        render: Option<PathBuf>,
        /// Store each mask's feature vector in the JSON.
        #[arg(long)]
        with_features: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Generate a planted-region feature map and its ground truth.
    Synth {
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        regions: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Contaminate tokens this close to a region boundary.
        #[arg(long, default_value_t = 0)]
        boundary_band: usize,
        /// Norm of the noise shared along each boundary.
        #[arg(long, default_value_t = 0.0)]
        boundary_noise: f64,
        /// Weight of the neighbouring region's prototype on boundary tokens.
        #[arg(long, default_value_t = 0.0)]
        boundary_mix: f64,
    },
    /// Best-match IoU of a pyramid against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Time pooling and check determinism across worker counts.
    Bench {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Match student masks to cropped teacher masks and report the loss.
    Match {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Local view on the teacher grid: row0,col0,rows,cols.
        #[arg(long = "box")]
        crop: CropBox,
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Logits file of the `match` subcommand: one row per teacher pyramid mask
/// (in file order, instance before semantic within a level) and one per
/// student mask.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogitsFile {
    teacher: Vec<QueryRow>,
    student: Vec<QueryRow>,
}

fn config_or_default(path: Option<&Path>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), io::load_config)
}

fn maybe_with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        Some(n) => with_workers(n, f),
        None => f(),
    }
}

fn render_pyramid(p: &MaskPyramid, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, level) in p.levels.iter().enumerate() {
        for (kind, masks) in [("instance", &level.instance), ("semantic", &level.semantic)] {
            let masks: Vec<TokenMask> = masks.iter().map(|m| m.mask.clone()).collect();
            let path = dir.join(format!("level{t}_{kind}.pgm"));
            io::render_labelmap_pgm(&masks, p.height, p.width, path)?;
        }
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::MalformedJson(e.to_string()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::MalformedJson(format!("{}: {e}", path.display())))
}

/// Executes one command, returning what it prints on success.
pub fn execute(cmd: &Command) -> Result<String> {
    match cmd {
        Command::Segment {
            features,
            config,
            out,
            render,
            with_features,
            workers,
        } => {
            let cfg = config_or_default(config.as_deref())?;
            let fm = io::read_fmap(features)?;
            let pyramid = maybe_with_workers(*workers, || run_uniap(&fm, &cfg.uniap))?;
            io::write_mask_json(&pyramid, out, *with_features)?;
            if let Some(dir) = render {
                render_pyramid(&pyramid, dir)?;
            }
            Ok(format!(
                "{} masks over {} levels written to {}",
                pyramid.num_masks(),
                pyramid.levels.len(),
                out.display()
            ))
        }
        Command::Synth {
            h,
            w,
            d,
            regions,
            noise,
            seed,
            out,
            truth,
            boundary_band,
            boundary_noise,
            boundary_mix,
        } => {
            let params = SynthParams::new(*h, *w, *d, *regions, *noise, *seed)
                .with_boundary(*boundary_band, *boundary_noise)
                .with_boundary_mix(*boundary_mix);
            let (fm, masks) = synth_generate_with(&params)?;
            io::write_fmap(&fm, out)?;
            let list = MaskList {
                height: *h,
                width: *w,
                masks: masks.into_iter().map(|m| (MaskKind::Instance, m)).collect(),
            };
            io::write_mask_list(&list, truth)?;
            Ok(format!("{h}x{w}x{d} map with {regions} regions written to {}", out.display()))
        }
        Command::Eval { pred, truth } => {
            let pyramid = io::read_mask_json(pred)?;
            let list = io::read_mask_list(truth)?;
            if (list.height, list.width) != (pyramid.height, pyramid.width) {
                return Err(Error::GridMismatch(format!(
                    "truth grid {}x{}, prediction grid {}x{}",
                    list.height, list.width, pyramid.height, pyramid.width
                )));
            }
            let masks: Vec<TokenMask> = list.masks.into_iter().map(|(_, m)| m).collect();
            to_json(&eval_iou(&pyramid, &masks)?)
        }
        Command::Bench {
            features,
            config,
            repeats,
            workers,
        } => {
            let cfg = config_or_default(config.as_deref())?;
            let fm = io::read_fmap(features)?;
            Ok(bench_run(&fm, &cfg.uniap, *repeats, *workers)?.to_string())
        }
        Command::Match {
            student,
            teacher,
            crop,
            logits,
            config,
        } => {
            let cfg = config_or_default(config.as_deref())?;
            let students = io::read_mask_list(student)?;
            let pyramid = io::read_mask_json(teacher)?;
            if (students.height, students.width) != (crop.rows, crop.cols) {
                return Err(Error::GridMismatch(format!(
                    "student grid {}x{} differs from box {}x{}",
                    students.height, students.width, crop.rows, crop.cols
                )));
            }
            let logits: LogitsFile = read_json(logits)?;
            let teachers: Vec<_> = pyramid.iter_masks().cloned().collect();
            for (rows, masks) in [
                (logits.teacher.len(), teachers.len()),
                (logits.student.len(), students.masks.len()),
            ] {
                if rows != masks {
                    return Err(Error::DimensionMismatch {
                        expected: masks,
                        got: rows,
                    });
                }
            }
            let result = cropped_match_by_kind(&students.masks, &teachers, pyramid.height, pyramid.width, crop)?;
            let loss = querysd_loss(&logits.teacher, &logits.student, &result.pairs, &cfg.querysd)?;
            to_json(&serde_json::json!({ "match": result, "loss": loss }))
        }
    }
}

/// Parses `args` and runs the command. Output goes to stdout, errors to
/// stderr; the return value is the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(out) => {
            println!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_subcommands() {
        let parse = |s: &str| Cli::try_parse_from(s.split_whitespace()).map(|c| c.command);
        assert!(matches!(
            parse("uniap segment --features f --out o --render r"),
            Ok(Command::Segment { render: Some(_), .. })
        ));
        assert!(parse("uniap synth --h 4 --w 4 --d 8 --regions 2 --out a --truth b").is_ok());
        assert!(parse("uniap eval --pred p --truth t").is_ok());
        assert!(parse("uniap bench --features f --repeats 3 --workers 2").is_ok());
        let m = parse("uniap match --student s --teacher t --box 1,2,3,4 --logits q").unwrap();
        assert!(matches!(m, Command::Match { crop, .. } if crop == CropBox::new(1, 2, 3, 4)));
        assert!(parse("uniap match --student s --teacher t --box 1,2 --logits q").is_err());
        assert!(parse("uniap frobnicate").is_err());
    }

    #[test]
    fn errors_give_nonzero_exit() {
        assert_eq!(main_with(["uniap", "eval", "--pred", "/nonexistent/p", "--truth", "/nonexistent/t"]), 1);
        assert_eq!(main_with(["uniap", "nope"]), 2);
    }
}
