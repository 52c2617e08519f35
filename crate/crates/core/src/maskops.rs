//! Mask arithmetic: overlap scores, cropping to a local view, 4-connectivity
//! and row-major run-length encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TokenMask;

/// Token-grid rectangle of a local view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl CropBox {
    pub fn new(row0: usize, col0: usize, rows: usize, cols: usize) -> Self {
        Self {
            row0,
            col0,
            rows,
            cols,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, height, width)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.rows == 0
            || self.cols == 0
            || self.row0 + self.rows > height
            || self.col0 + self.cols > width
        {
            return Err(Error::BoxOutOfRange {
                row0: self.row0,
                col0: self.col0,
                rows: self.rows,
                cols: self.cols,
                height,
                width,
            });
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }
}

impl std::str::FromStr for CropBox {
    type Err = Error;

    /// Parses `row0,col0,rows,cols`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidParams(format!("crop box {s:?}: {e}")))?;
        match parts[..] {
            [row0, col0, rows, cols] => Ok(Self::new(row0, col0, rows, cols)),
            _ => Err(Error::InvalidParams(format!(
                "crop box {s:?}: expected row0,col0,rows,cols"
            ))),
        }
    }
}

/// Row-major run lengths, starting with the run of zeros (possibly 0).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<usize>,
}

fn check_lengths(a: &TokenMask, b: &TokenMask) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// `|a∩b| / |a∪b|`; two empty masks score 1.
pub fn mask_iou(a: &TokenMask, b: &TokenMask) -> Result<f64> {
    check_lengths(a, b)?;
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// `2|a∩b| / (|a|+|b|)`; two empty masks score 1.
pub fn mask_dice(a: &TokenMask, b: &TokenMask) -> Result<f64> {
    check_lengths(a, b)?;
    let total = a.area() + b.area();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * a.intersection_area(b) as f64 / total as f64
    })
}

/// Restriction of `m` (over a `height×width` grid) to `bx`, re-indexed to a
/// `rows×cols` grid. `None` when nothing of the mask lies inside the box.
pub fn crop_mask(
    m: &TokenMask,
    height: usize,
    width: usize,
    bx: &CropBox,
) -> Result<Option<TokenMask>> {
    if m.len() != height * width {
        return Err(Error::LengthMismatch {
            left: m.len(),
            right: height * width,
        });
    }
    bx.validate(height, width)?;
    let mut out = TokenMask::empty(bx.tokens());
    for r in 0..bx.rows {
        let src = (bx.row0 + r) * width + bx.col0;
        for c in 0..bx.cols {
            if m.contains(src + c) {
                out.insert(r * bx.cols + c);
            }
        }
    }
    Ok((!out.is_empty()).then_some(out))
}

/// Flood-fill check that the set tokens form one 4-connected region.
/// Empty masks are not connected.
pub fn is_four_connected(m: &TokenMask, height: usize, width: usize) -> bool {
    let Some(start) = m.iter().next() else {
        return false;
    };
    let mut seen = TokenMask::empty(m.len());
    seen.insert(start);
    let mut stack = vec![start];
    while let Some(p) = stack.pop() {
        let (r, c) = (p / width, p % width);
        let mut visit = |q: usize| {
            if m.contains(q) && !seen.contains(q) {
                seen.insert(q);
                stack.push(q);
            }
        };
        if c > 0 {
            visit(p - 1);
        }
        if c + 1 < width {
            visit(p + 1);
        }
        if r > 0 {
            visit(p - width);
        }
        if r + 1 < height {
            visit(p + width);
        }
    }
    seen.area() == m.area()
}

pub fn rle_encode(m: &TokenMask, height: usize, width: usize) -> Result<RleMask> {
    if m.len() != height * width {
        return Err(Error::LengthMismatch {
            left: m.len(),
            right: height * width,
        });
    }
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0;
    for p in 0..m.len() {
        let bit = m.contains(p);
        if bit != current {
            counts.push(run);
            current = bit;
            run = 0;
        }
        run += 1;
    }
    counts.push(run);
    Ok(RleMask {
        height,
        width,
        counts,
    })
}

pub fn rle_decode(r: &RleMask) -> Result<TokenMask> {
    let total = r.height * r.width;
    let sum: usize = r.counts.iter().sum();
    if sum != total {
        return Err(Error::MalformedRle(format!(
            "counts sum to {sum}, grid has {total} tokens"
        )));
    }
    if r.counts.iter().skip(1).any(|&c| c == 0) {
        return Err(Error::MalformedRle(
            "zero-length run after the leading count".into(),
        ));
    }
    let mut m = TokenMask::empty(total);
    let mut p = 0;
    for (k, &c) in r.counts.iter().enumerate() {
        if k % 2 == 1 {
            for q in p..p + c {
                m.insert(q);
            }
        }
        p += c;
    }
    Ok(m)
}
