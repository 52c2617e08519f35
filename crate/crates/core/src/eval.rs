//! Best-match IoU of a pyramid against ground-truth masks.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::TokenMask;
use crate::maskops::mask_iou;
use crate::pooling::{MaskKind, MaskPyramid};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruthScore {
    pub best_iou: f64,
    /// Pyramid level of the best mask; `None` when nothing overlaps.
    pub level: Option<usize>,
    pub kind: Option<MaskKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_truth: Vec<TruthScore>,
    pub mean_best_iou: f64,
    pub min_best_iou: f64,
}

/// For every truth mask, the highest IoU over all pyramid masks of any
/// level and kind. Ties keep the earliest mask.
pub fn eval_iou(predicted: &MaskPyramid, truth: &[TokenMask]) -> Result<EvalReport> {
    let tokens = predicted.height * predicted.width;
    if let Some(t) = truth.iter().find(|t| t.len() != tokens) {
        return Err(Error::GridMismatch(format!(
            "truth mask has {} tokens, pyramid grid is {}x{}",
            t.len(),
            predicted.height,
            predicted.width
        )));
    }
    let mut per_truth = Vec::with_capacity(truth.len());
    for t in truth {
        let mut best = TruthScore {
            best_iou: 0.0,
            level: None,
            kind: None,
        };
        for (l, level) in predicted.levels.iter().enumerate() {
            for m in level.instance.iter().chain(&level.semantic) {
                if m.mask.len() != tokens {
                    return Err(Error::GridMismatch(format!(
                        "pyramid mask has {} tokens, grid has {tokens}",
                        m.mask.len()
                    )));
                }
                let iou = mask_iou(&m.mask, t)?;
                if iou > best.best_iou {
                    best = TruthScore {
                        best_iou: iou,
                        level: Some(l),
                        kind: Some(m.kind),
                    };
                }
            }
        }
        per_truth.push(best);
    }
    let n = per_truth.len().max(1) as f64;
    let mean_best_iou = per_truth.iter().map(|s| s.best_iou).sum::<f64>() / n;
    let min_best_iou = per_truth
        .iter()
        .map(|s| s.best_iou)
        .fold(f64::INFINITY, f64::min);
    Ok(EvalReport {
        per_truth,
        mean_best_iou,
        min_best_iou: if min_best_iou.is_finite() { min_best_iou } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::{PseudoMask, PyramidLevel};

    fn pyramid(masks: Vec<Vec<TokenMask>>) -> MaskPyramid {
        MaskPyramid {
            height: 2,
            width: 4,
            levels: masks
                .into_iter()
                .enumerate()
                .map(|(l, ms)| PyramidLevel {
                    tau: 0.8 - 0.1 * l as f64,
                    instance: ms
                        .into_iter()
                        .map(|mask| PseudoMask {
                            mask,
                            feature: vec![],
                            level: l,
                            kind: MaskKind::Instance,
                        })
                        .collect(),
                    semantic: vec![],
                })
                .collect(),
        }
    }

    fn m(idx: &[usize]) -> TokenMask {
        TokenMask::from_indices(8, idx.iter().copied()).unwrap()
    }

    #[test]
    fn exact_truth_scores_one() {
        let truth = vec![m(&[0, 1, 4, 5]), m(&[2, 3, 6, 7])];
        let p = pyramid(vec![vec![m(&[0, 1]), truth[1].clone()], vec![truth[0].clone()]]);
        let r = eval_iou(&p, &truth).unwrap();
        assert_eq!(r.per_truth[0].best_iou, 1.0);
        assert_eq!(r.per_truth[0].level, Some(1));
        assert_eq!(r.per_truth[1].level, Some(0));
        assert_eq!(r.mean_best_iou, 1.0);
    }

    #[test]
    fn empty_pyramid_scores_zero() {
        let truth = vec![m(&[0]), m(&[1, 2])];
        let r = eval_iou(&pyramid(vec![vec![], vec![]]), &truth).unwrap();
        assert!(r.per_truth.iter().all(|s| s.best_iou == 0.0 && s.level.is_none()));
        assert_eq!(r.mean_best_iou, 0.0);
    }

    #[test]
    fn partial_overlap_and_mismatch() {
        let truth = vec![m(&[0, 1, 2, 3])];
        let r = eval_iou(&pyramid(vec![vec![m(&[0, 1])]]), &truth).unwrap();
        assert_eq!(r.mean_best_iou, 0.5);
        assert!(matches!(
            eval_iou(&pyramid(vec![]), &[TokenMask::full(9)]),
            Err(Error::GridMismatch(_))
        ));
    }
}
