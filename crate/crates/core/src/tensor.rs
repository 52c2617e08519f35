//! Dense numeric primitives over the token feature map.
//!
//! The token affinity matrix `A = F Fᵀ` is only ever touched through affinity
//! profiles: the profile of a mask is `(Σ_{p∈mask} F[p]) · Fᵀ`, which is the
//! same row combination of `A` without forming it. Storage is `f32`; every
//! reduction accumulates in `f64`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::TokenMask;

/// Rows whose norm falls below this are treated as all-zero tokens.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Tolerance on row norms for a map to count as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// `H·W` rows of `d` features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl FeatureMap {
    /// Wraps raw data. The `normalized` flag is derived from the row norms.
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::InvalidParams(format!(
                "feature map shape {height}x{width}x{dim} has a zero extent"
            )));
        }
        let expected = height * width * dim;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "non-finite feature value at flat index {i}"
            )));
        }
        let normalized = data
            .chunks_exact(dim)
            .all(|row| (norm(row) - 1.0).abs() <= UNIT_NORM_TOL);
        Ok(Self {
            height,
            width,
            dim,
            data,
            normalized,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn row(&self, p: usize) -> &[f32] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn l2_normalize_rows(&self) -> Result<FeatureMap> {
        l2_normalize_rows(self)
    }
}

/// One aggregate feature's inner products against every token.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityProfile {
    pub values: Vec<f64>,
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x as f64 * *y as f64;
    }
    reduce8(acc) + tail
}

#[inline]
pub(crate) fn dot_mixed(a: &[f64], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l] as f64;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y as f64;
    }
    reduce8(acc) + tail
}

#[inline]
fn reduce8(acc: [f64; 8]) -> f64 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// Sum of `|a[p] - b[p]|`, eight-lane accumulation.
#[inline]
pub(crate) fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += (x[l] - y[l]).abs();
        }
    }
    let mut tail = 0f64;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += (x - y).abs();
    }
    reduce8(acc) + tail
}

pub(crate) fn norm(row: &[f32]) -> f64 {
    dot(row, row).sqrt()
}

pub fn l2_normalize_rows(fm: &FeatureMap) -> Result<FeatureMap> {
    let mut data = Vec::with_capacity(fm.data.len());
    for (p, row) in fm.rows().enumerate() {
        let n = norm(row);
        if n < MIN_ROW_NORM {
            return Err(Error::DegenerateFeature { row: p, norm: n });
        }
        data.extend(row.iter().map(|&v| (v as f64 / n) as f32));
    }
    Ok(FeatureMap {
        height: fm.height,
        width: fm.width,
        dim: fm.dim,
        data,
        normalized: true,
    })
}

/// Normalizes an `f64` vector into an `f32` unit row.
pub(crate) fn l2_normalize_vec(v: &[f64], row: usize) -> Result<Vec<f32>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < MIN_ROW_NORM {
        return Err(Error::DegenerateFeature { row, norm: n });
    }
    Ok(v.iter().map(|&x| (x / n) as f32).collect())
}

/// Numerically stable `softmax(values / temperature)`.
pub fn row_softmax(values: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidTemperature(temperature));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|w| *w /= z);
    Ok(out)
}

/// Sum of the feature rows selected by `mask`.
pub(crate) fn mask_sum_feature(fm: &FeatureMap, mask: &TokenMask) -> Vec<f64> {
    let mut acc = vec![0f64; fm.dim];
    for p in mask.iter() {
        for (a, &v) in acc.iter_mut().zip(fm.row(p)) {
            *a += v as f64;
        }
    }
    acc
}

/// Arithmetic mean of the rows selected by `mask` (not re-normalized).
pub fn mean_mask_feature(fm: &FeatureMap, mask: &TokenMask) -> Result<Vec<f64>> {
    if mask.len() != fm.tokens() {
        return Err(Error::LengthMismatch {
            left: mask.len(),
            right: fm.tokens(),
        });
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask("mean of an empty mask"));
    }
    let area = mask.area() as f64;
    let mut mean = mask_sum_feature(fm, mask);
    mean.iter_mut().for_each(|v| *v /= area);
    Ok(mean)
}

/// Inner product of `aggregate` with every token feature.
pub fn affinity_profile(fm: &FeatureMap, aggregate: &[f64]) -> Result<AffinityProfile> {
    if aggregate.len() != fm.dim {
        return Err(Error::DimensionMismatch {
            expected: fm.dim,
            got: aggregate.len(),
        });
    }
    Ok(AffinityProfile {
        values: fm.rows().map(|row| dot_mixed(aggregate, row)).collect(),
    })
}

/// Softmax-weighted token average, then L2-normalized:
/// `L2N(softmax(scale · profile / σ) F)`. With a mean profile and
/// `scale = area` this is the mask-sum profile `Mᵢ A`.
///
/// Tokens whose unnormalized weight is below `1e-18` of the peak are
/// skipped; their contribution is under `f64` resolution.
pub(crate) fn pooled_feature(
    fm: &FeatureMap,
    profile: &[f64],
    scale: f64,
    sigma: f64,
    node: usize,
) -> Result<Vec<f32>> {
    const MIN_LOG_WEIGHT: f64 = -41.4; // ln(1e-18)
    let max = profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = vec![0f64; fm.dim];
    let mut z = 0f64;
    for (p, &x) in profile.iter().enumerate() {
        let logit = scale * (x - max) / sigma;
        if logit < MIN_LOG_WEIGHT {
            continue;
        }
        let w = logit.exp();
        z += w;
        for (a, &v) in acc.iter_mut().zip(fm.row(p)) {
            *a += w * v as f64;
        }
    }
    acc.iter_mut().for_each(|a| *a /= z);
    l2_normalize_vec(&acc, node)
}

const AFFINITY_BLOCK: usize = 128;

/// Rows of `A = F Fᵀ`, one shared slice per token. Computed blockwise over
/// the upper triangle and mirrored, so the result is exactly symmetric.
/// The block layout is fixed, so output does not depend on the worker count.
pub(crate) fn affinity_rows(fm: &FeatureMap) -> Vec<Arc<[f64]>> {
    let n = fm.tokens();
    let d = fm.dim;
    let f64_data: Vec<f64> = fm.data.iter().map(|&v| v as f64).collect();
    let nb = n.div_ceil(AFFINITY_BLOCK);
    let pairs: Vec<(usize, usize)> = (0..nb)
        .flat_map(|bi| (bi..nb).map(move |bj| (bi, bj)))
        .collect();
    let span = |b: usize| {
        let start = b * AFFINITY_BLOCK;
        (start, (start + AFFINITY_BLOCK).min(n) - start)
    };
    let blocks: Vec<Vec<f64>> = pairs
        .par_iter()
        .map(|&(bi, bj)| {
            let (r0, m) = span(bi);
            let (c0, k) = span(bj);
            let mut out = vec![0f64; m * k];
            // SAFETY: pointers cover `m×d`, `d×k` (transposed view of `k×d`)
            // and `m×k` row-major buffers matching the given strides.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    d,
                    k,
                    1.0,
                    f64_data.as_ptr().add(r0 * d),
                    d as isize,
                    1,
                    f64_data.as_ptr().add(c0 * d),
                    1,
                    d as isize,
                    0.0,
                    out.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            out
        })
        .collect();
    // start of block row `bi` within the upper-triangle pair list
    let offsets: Vec<usize> = (0..nb)
        .scan(0, |acc, bi| {
            let start = *acc;
            *acc += nb - bi;
            Some(start)
        })
        .collect();
    (0..n)
        .into_par_iter()
        .map(|p| {
            let bi = p / AFFINITY_BLOCK;
            let local = p - bi * AFFINITY_BLOCK;
            let mut row = Vec::with_capacity(n);
            for bj in 0..nb {
                let (_, k) = span(bj);
                if bi <= bj {
                    let blk = &blocks[offsets[bi] + (bj - bi)];
                    row.extend_from_slice(&blk[local * k..(local + 1) * k]);
                } else {
                    let blk = &blocks[offsets[bj] + (bi - bj)];
                    let (_, kk) = span(bi);
                    row.extend((0..k).map(|r| blk[r * kk + local]));
                }
            }
            Arc::from(row)
        })
        .collect()
}
