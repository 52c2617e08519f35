//! Planted-region feature maps with exact ground truth.
//!
//! The grid is cut into axis-aligned rectangles by repeatedly splitting the
//! largest one; every region gets its own standard-basis prototype and every
//! token is `L2N(prototype + noise)`. `noise_std` is the expected norm of
//! the noise vector, so per coordinate the deviation is `noise_std / √d`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::TokenMask;
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub regions: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Tokens within this Manhattan distance of another region are
    /// contaminated. 0 disables contamination.
    pub boundary_band: usize,
    /// Expected norm of the noise vector shared by every contaminated token
    /// along the same pair of regions.
    pub boundary_noise: f64,
    /// Weight of the neighbouring region's prototype added to contaminated
    /// tokens.
    pub boundary_mix: f64,
}

impl SynthParams {
    pub fn new(height: usize, width: usize, dim: usize, regions: usize, noise_std: f64, seed: u64) -> Self {
        Self {
            height,
            width,
            dim,
            regions,
            noise_std,
            seed,
            boundary_band: 0,
            boundary_noise: 0.0,
            boundary_mix: 0.0,
        }
    }

    /// Correlated noise of expected norm `noise` on tokens within `band` of
    /// a region boundary.
    pub fn with_boundary(mut self, band: usize, noise: f64) -> Self {
        self.boundary_band = band;
        self.boundary_noise = noise;
        self
    }

    pub fn with_boundary_mix(mut self, mix: f64) -> Self {
        self.boundary_mix = mix;
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.height == 0 || self.width == 0 || self.dim == 0 {
            return bad(format!(
                "grid {}x{}x{} has a zero extent",
                self.height, self.width, self.dim
            ));
        }
        if self.regions == 0 || self.regions > self.height * self.width {
            return bad(format!(
                "regions: {} not in 1..={}",
                self.regions,
                self.height * self.width
            ));
        }
        if self.dim < self.regions {
            return bad(format!("dim {} < regions {}", self.dim, self.regions));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise: {} must be >= 0", self.noise_std));
        }
        for (name, v) in [("boundary noise", self.boundary_noise), ("boundary mix", self.boundary_mix)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name}: {v} must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    row0: usize,
    col0: usize,
    rows: usize,
    cols: usize,
}

impl Rect {
    fn area(&self) -> usize {
        self.rows * self.cols
    }
}

fn split_regions(p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<Rect> {
    let mut rects = vec![Rect {
        row0: 0,
        col0: 0,
        rows: p.height,
        cols: p.width,
    }];
    while rects.len() < p.regions {
        // largest first, earliest on ties
        let (k, _) = rects
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.area().cmp(&b.1.area()).then(b.0.cmp(&a.0)))
            .unwrap();
        let r = rects[k];
        let horizontal = match r.rows.cmp(&r.cols) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => rng.random_bool(0.5),
        };
        let len = if horizontal { r.rows } else { r.cols };
        // cut in the middle half so no sliver regions appear
        let lo = (len / 4).max(1);
        let hi = (len - len / 4).min(len - 1).max(lo);
        let cut = rng.random_range(lo..=hi);
        let (a, b) = if horizontal {
            (
                Rect { rows: cut, ..r },
                Rect {
                    row0: r.row0 + cut,
                    rows: r.rows - cut,
                    ..r
                },
            )
        } else {
            (
                Rect { cols: cut, ..r },
                Rect {
                    col0: r.col0 + cut,
                    cols: r.cols - cut,
                    ..r
                },
            )
        };
        rects[k] = a;
        rects.push(b);
    }
    rects.sort_by_key(|r| (r.row0, r.col0));
    rects
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Feature map and ground-truth region masks (ordered by top-left corner).
pub fn synth_generate_with(p: &SynthParams) -> Result<(FeatureMap, Vec<TokenMask>)> {
    p.validate()?;
    let (h, w, d) = (p.height, p.width, p.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let rects = split_regions(p, &mut rng);
    let mut axes: Vec<usize> = (0..d).collect();
    axes.shuffle(&mut rng);
    let prototype: Vec<usize> = axes[..p.regions].to_vec();

    let mut label = vec![0usize; h * w];
    let mut truth = Vec::with_capacity(rects.len());
    for (k, r) in rects.iter().enumerate() {
        let mut m = TokenMask::empty(h * w);
        for row in r.row0..r.row0 + r.rows {
            for col in r.col0..r.col0 + r.cols {
                label[row * w + col] = k;
                m.insert(row * w + col);
            }
        }
        truth.push(m);
    }

    let neighbour = boundary_neighbours(&label, h, w, p.boundary_band);
    // one shared vector per unordered region pair
    let shared: Vec<Vec<f64>> = if p.boundary_band > 0 {
        (0..p.regions * p.regions)
            .map(|_| gaussian_vec(&mut rng, d, 1.0 / (d as f64).sqrt()))
            .collect()
    } else {
        Vec::new()
    };

    let per_coord = p.noise_std / (d as f64).sqrt();
    let mut data = Vec::with_capacity(h * w * d);
    for t in 0..h * w {
        let mut v = gaussian_vec(&mut rng, d, per_coord);
        v[prototype[label[t]]] += 1.0;
        if let Some(nb) = neighbour[t] {
            v[prototype[nb]] += p.boundary_mix;
            let (a, b) = (label[t].min(nb), label[t].max(nb));
            for (x, c) in v.iter_mut().zip(&shared[a * p.regions + b]) {
                *x += p.boundary_noise * c;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| (x / n) as f32));
    }
    Ok((FeatureMap::new(h, w, d, data)?, truth))
}

/// Region of the nearest foreign token within `band` (Manhattan), scanning
/// distances outward and neighbours in row-major order.
fn boundary_neighbours(label: &[usize], h: usize, w: usize, band: usize) -> Vec<Option<usize>> {
    (0..h * w)
        .map(|t| {
            if band == 0 {
                return None;
            }
            let (r, c) = ((t / w) as isize, (t % w) as isize);
            for dist in 1..=band as isize {
                for dr in -dist..=dist {
                    let rem = dist - dr.abs();
                    for dc in [-rem, rem] {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        let q = rr as usize * w + cc as usize;
                        if label[q] != label[t] {
                            return Some(label[q]);
                        }
                    }
                }
            }
            None
        })
        .collect()
}

pub fn synth_generate(
    height: usize,
    width: usize,
    dim: usize,
    regions: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(FeatureMap, Vec<TokenMask>)> {
    synth_generate_with(&SynthParams::new(height, width, dim, regions, noise_std, seed))
}
