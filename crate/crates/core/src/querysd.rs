//! Query-wise self-distillation: cropped Dice matching between teacher
//! pseudo-masks and student masks, and the matched-pair cross-entropy loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TokenMask;
use crate::maskops::{crop_mask, mask_dice, CropBox};
use crate::pooling::{MaskKind, PseudoMask};

/// `ln(1e-12)`: floor applied to student log-probabilities.
pub const LOG_FLOOR: f64 = -27.631021115928547;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuerySdConfig {
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub num_local_views: usize,
}

impl Default for QuerySdConfig {
    fn default() -> Self {
        Self {
            teacher_temp: 0.04,
            student_temp: 0.1,
            num_local_views: 2,
        }
    }
}

impl QuerySdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("teacher_temp", self.teacher_temp),
            ("student_temp", self.student_temp),
        ] {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::InvalidConfig(format!("{name}: {t} must be > 0")));
            }
        }
        if self.num_local_views < 1 {
            return Err(Error::InvalidConfig("num_local_views: must be >= 1".into()));
        }
        Ok(())
    }
}

/// Projection-head output for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryRow {
    pub logits: Vec<f64>,
}

impl From<Vec<f64>> for QueryRow {
    fn from(logits: Vec<f64>) -> Self {
        Self { logits }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(student, teacher)` pairs sorted by student index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_students: Vec<usize>,
    pub unmatched_teachers: Vec<usize>,
    pub total_dice: f64,
}

/// Crops teacher masks (over a `height×width` grid) to the student's view.
/// Masks with no token inside the box are dropped; survivors keep their
/// original index.
pub fn crop_and_filter_teacher(
    teacher: &[PseudoMask],
    height: usize,
    width: usize,
    bx: &CropBox,
) -> Result<Vec<(TokenMask, usize)>> {
    bx.validate(height, width)?;
    let mut out = Vec::new();
    for (idx, t) in teacher.iter().enumerate() {
        if let Some(cropped) = crop_mask(&t.mask, height, width, bx)? {
            out.push((cropped, idx));
        }
    }
    Ok(out)
}

/// Entry `(s, t)` is the Dice score of `student[s]` against `teacher[t]`.
pub fn dice_cost_matrix(student: &[TokenMask], teacher: &[TokenMask]) -> Result<Vec<Vec<f64>>> {
    student
        .iter()
        .map(|s| teacher.iter().map(|t| mask_dice(s, t)).collect())
        .collect()
}

/// Maximum-total matching of `min(rows, cols)` pairs. Among optimal
/// matchings the lexicographically smallest pair list is returned.
pub fn hungarian_max(scores: &[Vec<f64>]) -> Result<MatchResult> {
    let rows = scores.len();
    let cols = scores.first().map_or(0, Vec::len);
    for r in scores {
        if r.len() != cols {
            return Err(Error::LengthMismatch {
                left: r.len(),
                right: cols,
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite score".into()));
        }
    }
    if rows == 0 || cols == 0 {
        return Ok(MatchResult {
            unmatched_students: (0..rows).collect(),
            unmatched_teachers: (0..cols).collect(),
            ..MatchResult::default()
        });
    }
    let n = rows.max(cols);
    // padded square cost matrix; dummy rows/cols cost nothing
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -scores[i][j]
        } else {
            0.0
        }
    };
    let (mut row_to_col, u, v) = min_cost_assignment(n, &cost);
    let scale = scores
        .iter()
        .flatten()
        .fold(1.0f64, |m, &s| m.max(s.abs()));
    let eps = 1e-9 * scale * n as f64;
    let tight = |i: usize, j: usize| (cost(i, j) - u[i] - v[j]).abs() <= eps;
    lexicographic_refine(n, &mut row_to_col, &tight);

    let mut pairs = Vec::new();
    let mut unmatched_students = Vec::new();
    let mut teacher_used = vec![false; cols];
    for (s, &t) in row_to_col.iter().enumerate().take(rows) {
        if t < cols {
            pairs.push((s, t));
            teacher_used[t] = true;
        } else {
            unmatched_students.push(s);
        }
    }
    let total_dice = pairs.iter().map(|&(s, t)| scores[s][t]).sum();
    Ok(MatchResult {
        pairs,
        unmatched_students,
        unmatched_teachers: (0..cols).filter(|&t| !teacher_used[t]).collect(),
        total_dice,
    })
}

/// Shortest-augmenting-path Hungarian method on an `n×n` cost matrix.
/// Returns the row→column assignment and dual potentials with
/// `cost(i, j) − u[i] − v[j] ≥ 0`, tight on the assignment.
fn min_cost_assignment(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based internally; index 0 is the virtual root column
    let mut u = vec![0f64; n + 1];
    let mut v = vec![0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Every perfect matching inside the tight (zero reduced cost) subgraph is
/// optimal. Walk rows in order and move each to the smallest tight column
/// reachable by an alternating cycle through later rows.
fn lexicographic_refine(n: usize, row_to_col: &mut [usize], tight: &dyn Fn(usize, usize) -> bool) {
    let mut col_to_row = vec![0; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = r;
    }
    for i in 0..n {
        for c in 0..row_to_col[i] {
            let r = col_to_row[c];
            if r < i || !tight(i, c) {
                continue;
            }
            // alternating path from r back to the column i gives up
            let target = row_to_col[i];
            if let Some(path) = alternating_path(n, i, r, c, target, row_to_col, col_to_row.as_slice(), tight) {
                row_to_col[i] = c;
                col_to_row[c] = i;
                for (row, col) in path {
                    row_to_col[row] = col;
                    col_to_row[col] = row;
                }
                break;
            }
        }
    }
}

/// BFS over rows `> fixed` for reassignments that free `taken` for row
/// `fixed` and land some row on `target`. Returns the `(row, new column)`
/// moves.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    n: usize,
    fixed: usize,
    start: usize,
    taken: usize,
    target: usize,
    row_to_col: &[usize],
    col_to_row: &[usize],
    tight: &dyn Fn(usize, usize) -> bool,
) -> Option<Vec<(usize, usize)>> {
    let mut came_from: Vec<Option<(usize, usize)>> = vec![None; n]; // col -> (row, prev col)
    let mut seen_col = vec![false; n];
    seen_col[taken] = true;
    let mut queue = std::collections::VecDeque::from([(start, taken)]);
    while let Some((row, via)) = queue.pop_front() {
        for col in 0..n {
            if seen_col[col] || col == row_to_col[row] || !tight(row, col) {
                continue;
            }
            seen_col[col] = true;
            came_from[col] = Some((row, via));
            if col == target {
                let mut moves = Vec::new();
                let mut cur = col;
                while let Some((r, prev)) = came_from[cur] {
                    moves.push((r, cur));
                    if prev == taken {
                        break;
                    }
                    cur = prev;
                }
                return Some(moves);
            }
            let next = col_to_row[col];
            if next > fixed {
                queue.push_back((next, col));
            }
        }
    }
    None
}

/// Crop the teacher masks to `bx`, drop the ones outside it and match the
/// rest against student masks on the box grid. Teacher indices in the
/// result refer to the uncropped list.
pub fn cropped_match(
    student: &[TokenMask],
    teacher: &[PseudoMask],
    height: usize,
    width: usize,
    bx: &CropBox,
) -> Result<MatchResult> {
    let kept = crop_and_filter_teacher(teacher, height, width, bx)?;
    let (masks, original): (Vec<TokenMask>, Vec<usize>) = kept.into_iter().unzip();
    let scores = dice_cost_matrix(student, &masks)?;
    let mut result = if masks.is_empty() {
        MatchResult {
            unmatched_students: (0..student.len()).collect(),
            ..MatchResult::default()
        }
    } else {
        hungarian_max(&scores)?
    };
    for (_, t) in result.pairs.iter_mut() {
        *t = original[*t];
    }
    let matched: Vec<usize> = result.pairs.iter().map(|p| p.1).collect();
    result.unmatched_teachers = (0..teacher.len()).filter(|t| !matched.contains(t)).collect();
    Ok(result)
}

/// Matches instance and semantic queries separately and merges the results.
/// Indices refer to the combined input lists.
pub fn match_by_kind(
    student: &[(MaskKind, TokenMask)],
    teacher: &[(MaskKind, TokenMask)],
) -> Result<MatchResult> {
    let mut out = MatchResult::default();
    for kind in [MaskKind::Instance, MaskKind::Semantic] {
        let s_idx: Vec<usize> = (0..student.len()).filter(|&i| student[i].0 == kind).collect();
        let t_idx: Vec<usize> = (0..teacher.len()).filter(|&i| teacher[i].0 == kind).collect();
        let s: Vec<TokenMask> = s_idx.iter().map(|&i| student[i].1.clone()).collect();
        let t: Vec<TokenMask> = t_idx.iter().map(|&i| teacher[i].1.clone()).collect();
        let r = hungarian_max(&dice_cost_matrix(&s, &t)?)?;
        out.pairs
            .extend(r.pairs.iter().map(|&(a, b)| (s_idx[a], t_idx[b])));
        out.unmatched_students
            .extend(r.unmatched_students.iter().map(|&a| s_idx[a]));
        out.unmatched_teachers
            .extend(r.unmatched_teachers.iter().map(|&b| t_idx[b]));
        out.total_dice += r.total_dice;
    }
    out.pairs.sort_unstable();
    out.unmatched_students.sort_unstable();
    out.unmatched_teachers.sort_unstable();
    Ok(out)
}

/// [`cropped_match`] with instance and semantic queries matched separately.
pub fn cropped_match_by_kind(
    student: &[(MaskKind, TokenMask)],
    teacher: &[PseudoMask],
    height: usize,
    width: usize,
    bx: &CropBox,
) -> Result<MatchResult> {
    let kept = crop_and_filter_teacher(teacher, height, width, bx)?;
    let cropped: Vec<(MaskKind, TokenMask)> = kept
        .iter()
        .map(|(m, idx)| (teacher[*idx].kind, m.clone()))
        .collect();
    let mut result = match_by_kind(student, &cropped)?;
    for (_, t) in result.pairs.iter_mut() {
        *t = kept[*t].1;
    }
    let matched: Vec<usize> = result.pairs.iter().map(|p| p.1).collect();
    result.unmatched_teachers = (0..teacher.len()).filter(|t| !matched.contains(t)).collect();
    Ok(result)
}

fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|&z| (z - max) / temperature).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|s| s - lse).collect()
}

fn check_pairs(
    teacher: &[QueryRow],
    student: &[QueryRow],
    pairs: &[(usize, usize)],
    cfg: &QuerySdConfig,
) -> Result<usize> {
    for t in [cfg.teacher_temp, cfg.student_temp] {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidTemperature(t));
        }
    }
    let k = teacher
        .first()
        .or(student.first())
        .map_or(0, |r| r.logits.len());
    for r in teacher.iter().chain(student) {
        if r.logits.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: r.logits.len(),
            });
        }
    }
    let mut s_seen = vec![false; student.len()];
    let mut t_seen = vec![false; teacher.len()];
    for &(s, t) in pairs {
        if s >= student.len() {
            return Err(Error::IndexOutOfRange {
                index: s,
                len: student.len(),
            });
        }
        if t >= teacher.len() {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: teacher.len(),
            });
        }
        if std::mem::replace(&mut s_seen[s], true) || std::mem::replace(&mut t_seen[t], true) {
            return Err(Error::InvalidParams(format!("pair ({s}, {t}) reuses a query")));
        }
    }
    Ok(k)
}

/// Sum over matched `(student, teacher)` pairs of the cross-entropy
/// `−Σ_k p_t(k) · log p_s(k)`, with `log p_s` floored at `ln 1e-12`.
pub fn querysd_loss(
    teacher: &[QueryRow],
    student: &[QueryRow],
    pairs: &[(usize, usize)],
    cfg: &QuerySdConfig,
) -> Result<f64> {
    check_pairs(teacher, student, pairs, cfg)?;
    Ok(pairs
        .iter()
        .map(|&(s, t)| {
            let log_ps = log_softmax(&student[s].logits, cfg.student_temp);
            let log_pt = log_softmax(&teacher[t].logits, cfg.teacher_temp);
            -log_pt
                .iter()
                .zip(&log_ps)
                .map(|(lt, ls)| lt.exp() * ls.max(LOG_FLOOR))
                .sum::<f64>()
        })
        .sum())
}

/// Gradient of [`querysd_loss`] with respect to the student logits; one row
/// per student query, zero for unmatched ones. Away from the log floor this
/// is `(p_s − p_t) / student_temp`.
pub fn querysd_grad(
    teacher: &[QueryRow],
    student: &[QueryRow],
    pairs: &[(usize, usize)],
    cfg: &QuerySdConfig,
) -> Result<Vec<Vec<f64>>> {
    let k = check_pairs(teacher, student, pairs, cfg)?;
    let mut grad = vec![vec![0f64; k]; student.len()];
    for &(s, t) in pairs {
        let log_ps = log_softmax(&student[s].logits, cfg.student_temp);
        let pt: Vec<f64> = log_softmax(&teacher[t].logits, cfg.teacher_temp)
            .into_iter()
            .map(f64::exp)
            .collect();
        // floored entries are constant in the loss
        let live_mass: f64 = pt
            .iter()
            .zip(&log_ps)
            .filter(|(_, &ls)| ls >= LOG_FLOOR)
            .map(|(p, _)| p)
            .sum();
        for (j, g) in grad[s].iter_mut().enumerate() {
            let live = if log_ps[j] >= LOG_FLOOR { pt[j] } else { 0.0 };
            *g = (log_ps[j].exp() * live_mass - live) / cfg.student_temp;
        }
    }
    Ok(grad)
}

/// Inputs of one local view.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub student: Vec<QueryRow>,
    pub pairs: Vec<(usize, usize)>,
}

/// Loss summed over `cfg.num_local_views` views against one teacher.
pub fn querysd_loss_views(
    teacher: &[QueryRow],
    views: &[ViewBatch],
    cfg: &QuerySdConfig,
) -> Result<f64> {
    cfg.validate()?;
    if views.len() != cfg.num_local_views {
        return Err(Error::InvalidParams(format!(
            "{} views given, config expects {}",
            views.len(),
            cfg.num_local_views
        )));
    }
    views
        .iter()
        .map(|v| querysd_loss(teacher, &v.student, &v.pairs, cfg))
        .sum()
}
