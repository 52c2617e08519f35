//! Universal agglomerative pooling.
//!
//! Each layer runs two fixpoint coarsenings at the same threshold: an
//! instance pass over the sparse adjacency (regions stay 4-connected) and a
//! semantic pass over a fully connected copy of the instance result
//! (disconnected regions may merge). The instance graph feeds the next,
//! lower threshold.
//!
//! Edge score: `ω_f·(Vᵢ·Vⱼ) + ω_s·(1 − |aᵢ − aⱼ|₁ / HW)`, where `aᵢ` is the
//! mean affinity profile of node `i`'s mask. Supernode features are
//! `L2N(softmax(Mᵢ A / σ) F)`, recomputed after every merge.
//!
//! The coarsening engine keeps one mean profile per node. A merged node's
//! profile is the area-weighted mean of its children's, so the affinity
//! rows are formed once for the initial grid and never again.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccl::connected_components;
use crate::error::{Error, Result};
use crate::graph::{apply_assignment, make_fully_connected, Assignment, Edge, Graph, TokenMask};
use crate::maskops::mask_iou;
use crate::tensor::{
    affinity_profile, affinity_rows, dot, l1_distance, mask_sum_feature, mean_mask_feature,
    pooled_feature, FeatureMap,
};

/// Scores may exceed `[-1, 1]` by accumulated rounding up to this much.
pub const SCORE_SLACK: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniapConfig {
    /// Strictly decreasing merge thresholds, one pyramid level each.
    pub thresholds: Vec<f64>,
    /// Softmax temperature of the feature update.
    pub sigma: f64,
    pub omega_f: f64,
    pub omega_s: f64,
    /// Minimum mask area (tokens) for a mask to be emitted.
    pub phi: usize,
    /// Masks with IoU above this against an earlier kept mask are dropped.
    pub dedup_iou: f64,
    /// The spatial term is only used once the graph has been coarsened this
    /// many times; before that the score is the feature cosine alone.
    pub spatial_from_level: usize,
}

impl Default for UniapConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.8, 0.7, 0.6, 0.5, 0.4],
            sigma: 0.07,
            omega_f: 0.6,
            omega_s: 0.4,
            phi: 5,
            dedup_iou: 0.9,
            spatial_from_level: 0,
        }
    }
}

impl UniapConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.thresholds.is_empty() {
            return bad("thresholds: at least one threshold required".into());
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > -1.0 && **t < 1.0)) {
            return bad(format!("thresholds: {t} outside (-1, 1)"));
        }
        if let Some(w) = self.thresholds.windows(2).find(|w| w[1] >= w[0]) {
            return bad(format!(
                "thresholds: not strictly decreasing ({} then {})",
                w[0], w[1]
            ));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma: {} must be > 0", self.sigma));
        }
        if !(self.omega_f >= 0.0 && self.omega_s >= 0.0) {
            return bad("omega_f, omega_s: weights must be >= 0".into());
        }
        if (self.omega_f + self.omega_s - 1.0).abs() > 1e-9 {
            return bad(format!(
                "omega_f + omega_s: {} + {} != 1",
                self.omega_f, self.omega_s
            ));
        }
        if self.phi < 1 {
            return bad("phi: must be >= 1".into());
        }
        if !(self.dedup_iou > 0.0 && self.dedup_iou <= 1.0) {
            return bad(format!("dedup_iou: {} outside (0, 1]", self.dedup_iou));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Instance,
    Semantic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoMask {
    pub mask: TokenMask,
    /// Unit-norm supernode feature (the teacher query for this mask).
    pub feature: Vec<f32>,
    pub level: usize,
    pub kind: MaskKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub tau: f64,
    pub instance: Vec<PseudoMask>,
    pub semantic: Vec<PseudoMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    pub height: usize,
    pub width: usize,
    pub levels: Vec<PyramidLevel>,
}

impl MaskPyramid {
    pub fn iter_masks(&self) -> impl Iterator<Item = &PseudoMask> {
        self.levels
            .iter()
            .flat_map(|l| l.instance.iter().chain(&l.semantic))
    }

    pub fn num_masks(&self) -> usize {
        self.iter_masks().count()
    }
}

/// Live graphs of one layer, before area gating and dedup.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub tau: f64,
    pub instance: Graph,
    pub semantic: Graph,
    pub elapsed: Duration,
}

/// Coarsening state: a graph plus per-node mean affinity profiles and a
/// flag telling whether the node's feature is already the pooled one.
#[derive(Clone)]
struct State {
    graph: Graph,
    profiles: Vec<Option<Arc<[f64]>>>,
    pooled: Vec<bool>,
}

impl State {
    fn new(graph: Graph) -> Result<Self> {
        graph.features()?;
        let n = graph.num_nodes();
        Ok(Self {
            graph,
            profiles: vec![None; n],
            pooled: vec![false; n],
        })
    }

    fn ensure_profiles(&mut self, fm: &FeatureMap) -> Result<()> {
        if self.profiles.iter().all(Option::is_some) {
            return Ok(());
        }
        let all_singletons = self.graph.masks().iter().all(|m| m.area() == 1);
        if all_singletons && self.profiles.iter().all(Option::is_none) {
            let rows = affinity_rows(fm);
            self.profiles = self
                .graph
                .masks()
                .iter()
                .map(|m| Some(Arc::clone(&rows[m.iter().next().unwrap()])))
                .collect();
            return Ok(());
        }
        let masks = self.graph.masks();
        let filled: Vec<Option<Arc<[f64]>>> = self
            .profiles
            .par_iter()
            .zip(masks.par_iter())
            .map(|(p, m)| match p {
                Some(p) => Ok(Some(Arc::clone(p))),
                None => direct_mean_profile(fm, m).map(Some),
            })
            .collect::<Result<_>>()?;
        self.profiles = filled;
        Ok(())
    }

    fn spatial_active(&self, cfg: &UniapConfig) -> bool {
        cfg.omega_s > 0.0 && self.graph.level() >= cfg.spatial_from_level
    }

    /// Edges whose score reaches `tau`. Scores that provably cannot reach it
    /// are abandoned early; every other edge gets the exact score.
    fn marked_edges(&mut self, fm: &FeatureMap, tau: f64, cfg: &UniapConfig) -> Result<Vec<Edge>> {
        let spatial = self.spatial_active(cfg);
        if spatial {
            self.ensure_profiles(fm)?;
        }
        let g = &self.graph;
        let feats = g.features()?;
        let d = g.dim();
        let hw = g.token_count() as f64;
        let profiles = &self.profiles;
        let marks: Vec<bool> = g
            .edges()
            .par_iter()
            .map(|&(i, j)| {
                let sf = dot(&feats[i * d..(i + 1) * d], &feats[j * d..(j + 1) * d]);
                if !spatial {
                    return combine(sf, None, cfg) >= tau;
                }
                // |aᵢ − aⱼ|₁ above this budget cannot reach tau
                let need = (tau - cfg.omega_f * sf) / cfg.omega_s;
                let budget = hw * (1.0 - need) + 1e-9 * hw;
                let (pi, pj) = (
                    profiles[i].as_deref().unwrap(),
                    profiles[j].as_deref().unwrap(),
                );
                match l1_distance_bounded(pi, pj, budget) {
                    None => false,
                    Some(l1) => combine(sf, Some(1.0 - l1 / hw), cfg) >= tau,
                }
            })
            .collect();
        Ok(g.edges()
            .iter()
            .zip(marks)
            .filter_map(|(&e, m)| m.then_some(e))
            .collect())
    }

    /// Exact scores of every edge.
    #[cfg(test)]
    fn scores(&mut self, fm: &FeatureMap, cfg: &UniapConfig) -> Result<Vec<f64>> {
        let spatial = self.spatial_active(cfg);
        if spatial {
            self.ensure_profiles(fm)?;
        }
        let g = &self.graph;
        let feats = g.features()?;
        let d = g.dim();
        let hw = g.token_count() as f64;
        let profiles = &self.profiles;
        Ok(g.edges()
            .par_iter()
            .map(|&(i, j)| {
                let sf = dot(&feats[i * d..(i + 1) * d], &feats[j * d..(j + 1) * d]);
                let ss = spatial.then(|| {
                    let l1 = l1_distance(
                        profiles[i].as_deref().unwrap(),
                        profiles[j].as_deref().unwrap(),
                    );
                    1.0 - l1 / hw
                });
                combine(sf, ss, cfg)
            })
            .collect())
    }

    fn merge(&self, a: &Assignment, fm: &FeatureMap, sigma: f64) -> Result<State> {
        let graph = apply_assignment(&self.graph, a)?;
        let members = a.members();
        let old_masks = self.graph.masks();
        let old_feats = self.graph.features()?;
        let d = self.graph.dim();
        let have_profiles = self.profiles.iter().all(Option::is_some);
        let nodes: Vec<(Arc<[f64]>, Vec<f32>)> = members
            .par_iter()
            .zip(graph.masks().par_iter())
            .enumerate()
            .map(|(k, (children, mask))| {
                let profile: Arc<[f64]> = match (children.as_slice(), have_profiles) {
                    ([only], _) if self.profiles[*only].is_some() => {
                        Arc::clone(self.profiles[*only].as_ref().unwrap())
                    }
                    (_, true) => {
                        let total = mask.area() as f64;
                        let mut acc = vec![0f64; graph.token_count()];
                        for &c in children {
                            let w = old_masks[c].area() as f64;
                            let p = self.profiles[c].as_deref().unwrap();
                            for (a, &v) in acc.iter_mut().zip(p) {
                                *a += w * v;
                            }
                        }
                        acc.iter_mut().for_each(|a| *a /= total);
                        Arc::from(acc)
                    }
                    _ => direct_mean_profile(fm, mask)?,
                };
                let feature = match children.as_slice() {
                    [only] if self.pooled[*only] => old_feats[only * d..(only + 1) * d].to_vec(),
                    _ => pooled_feature(fm, &profile, mask.area() as f64, sigma, k)?,
                };
                Ok((profile, feature))
            })
            .collect::<Result<_>>()?;
        let n = nodes.len();
        let mut profiles = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n * d);
        for (p, f) in nodes {
            profiles.push(Some(p));
            features.extend_from_slice(&f);
        }
        Ok(State {
            graph: graph.with_features(features)?,
            profiles,
            pooled: vec![true; n],
        })
    }

    /// Gives every node its pooled feature.
    fn finalize(&mut self, fm: &FeatureMap, sigma: f64) -> Result<()> {
        if self.pooled.iter().all(|&p| p) {
            return Ok(());
        }
        self.ensure_profiles(fm)?;
        let d = self.graph.dim();
        let feats = self.graph.features()?;
        let rows: Vec<Vec<f32>> = (0..self.graph.num_nodes())
            .into_par_iter()
            .map(|k| {
                if self.pooled[k] {
                    Ok(feats[k * d..(k + 1) * d].to_vec())
                } else {
                    let area = self.graph.masks()[k].area() as f64;
                    pooled_feature(fm, self.profiles[k].as_deref().unwrap(), area, sigma, k)
                }
            })
            .collect::<Result<_>>()?;
        self.graph = self.graph.clone().with_features(rows.concat())?;
        self.pooled.iter_mut().for_each(|p| *p = true);
        Ok(())
    }

    fn coarsen(mut self, fm: &FeatureMap, tau: f64, cfg: &UniapConfig) -> Result<State> {
        loop {
            let marked = self.marked_edges(fm, tau, cfg)?;
            if marked.is_empty() {
                return Ok(self);
            }
            let a = connected_components(self.graph.num_nodes(), &marked)?;
            self = self.merge(&a, fm, cfg.sigma)?;
        }
    }

    fn fully_connected(&self) -> State {
        State {
            graph: make_fully_connected(&self.graph),
            profiles: self.profiles.clone(),
            pooled: self.pooled.clone(),
        }
    }
}

#[inline]
fn combine(sf: f64, ss: Option<f64>, cfg: &UniapConfig) -> f64 {
    match ss {
        Some(ss) => cfg.omega_f * sf + cfg.omega_s * ss,
        None => sf,
    }
}

/// Same value as [`l1_distance`], or `None` once the running sum exceeds
/// `bound`.
fn l1_distance_bounded(a: &[f64], b: &[f64], bound: f64) -> Option<f64> {
    const STRIDE: usize = 512;
    if bound < 0.0 {
        return None;
    }
    let full = a.len() / 8 * 8;
    let mut acc = [0f64; 8];
    let mut start = 0;
    while start < full {
        let end = (start + STRIDE).min(full);
        for c in (start..end).step_by(8) {
            for l in 0..8 {
                acc[l] += (a[c + l] - b[c + l]).abs();
            }
        }
        // partial sums are monotone, so this never rejects a passing edge
        if acc.iter().sum::<f64>() > bound {
            return None;
        }
        start = end;
    }
    let mut tail = 0f64;
    for p in full..a.len() {
        tail += (a[p] - b[p]).abs();
    }
    let total = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
        + tail;
    (total <= bound).then_some(total)
}

fn direct_mean_profile(fm: &FeatureMap, mask: &TokenMask) -> Result<Arc<[f64]>> {
    let mean = mean_mask_feature(fm, mask)?;
    Ok(Arc::from(affinity_profile(fm, &mean)?.values))
}

fn check_inputs(g: &Graph, fm: &FeatureMap) -> Result<()> {
    if !fm.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if fm.tokens() != g.token_count() {
        return Err(Error::DimensionMismatch {
            expected: g.token_count(),
            got: fm.tokens(),
        });
    }
    if fm.dim() != g.dim() {
        return Err(Error::DimensionMismatch {
            expected: g.dim(),
            got: fm.dim(),
        });
    }
    g.features()?;
    Ok(())
}

/// Score of every edge of `g`, in edge order. Profiles are computed directly
/// from each node's mean token feature.
pub fn edge_similarities(g: &Graph, fm: &FeatureMap, cfg: &UniapConfig) -> Result<Vec<f64>> {
    check_inputs(g, fm)?;
    let spatial = cfg.omega_s > 0.0 && g.level() >= cfg.spatial_from_level;
    let profiles: Vec<Vec<f64>> = if spatial {
        g.masks()
            .par_iter()
            .map(|m| Ok(affinity_profile(fm, &mean_mask_feature(fm, m)?)?.values))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let hw = g.token_count() as f64;
    g.edges()
        .par_iter()
        .map(|&(i, j)| {
            let sf = dot(g.feature(i)?, g.feature(j)?);
            let ss = spatial.then(|| 1.0 - l1_distance(&profiles[i], &profiles[j]) / hw);
            Ok(combine(sf, ss, cfg))
        })
        .collect()
}

/// Recomputes every node feature as `L2N(softmax(Mᵢ A / σ) F)`.
pub fn update_features(g: &Graph, fm: &FeatureMap, sigma: f64) -> Result<Graph> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidTemperature(sigma));
    }
    if fm.tokens() != g.token_count() {
        return Err(Error::DimensionMismatch {
            expected: g.token_count(),
            got: fm.tokens(),
        });
    }
    let rows: Vec<Vec<f32>> = g
        .masks()
        .par_iter()
        .enumerate()
        .map(|(k, m)| {
            if m.is_empty() {
                return Err(Error::EmptyMask("node without tokens"));
            }
            let sum = mask_sum_feature(fm, m);
            let profile = affinity_profile(fm, &sum)?;
            pooled_feature(fm, &profile.values, 1.0, sigma, k)
        })
        .collect::<Result<_>>()?;
    g.clone().with_features(rows.concat())
}

/// Score, mark, label and merge at a fixed threshold until no edge reaches
/// `tau`. A graph with no qualifying edge is returned unchanged.
pub fn coarsen_to_fixpoint(
    g: &Graph,
    fm: &FeatureMap,
    tau: f64,
    cfg: &UniapConfig,
) -> Result<Graph> {
    check_inputs(g, fm)?;
    Ok(State::new(g.clone())?.coarsen(fm, tau, cfg)?.graph)
}

/// One layer: instance pooling on `g`, then semantic pooling on a fully
/// connected copy of the result. Returns the instance graph (input to the
/// next layer) and the semantic nodes.
pub fn pool_layer(
    g: &Graph,
    fm: &FeatureMap,
    tau: f64,
    cfg: &UniapConfig,
) -> Result<(Graph, Vec<(TokenMask, Vec<f32>)>)> {
    check_inputs(g, fm)?;
    let (instance, semantic) = pool_state(State::new(g.clone())?, fm, tau, cfg)?;
    let d = semantic.graph.dim();
    let (masks, feats) = semantic.graph.into_parts();
    let feats = feats.ok_or(Error::MissingFeatures(0))?;
    let nodes = masks
        .into_iter()
        .zip(feats.chunks_exact(d).map(<[f32]>::to_vec))
        .collect();
    Ok((instance.graph, nodes))
}

fn pool_state(
    state: State,
    fm: &FeatureMap,
    tau: f64,
    cfg: &UniapConfig,
) -> Result<(State, State)> {
    let mut instance = state.coarsen(fm, tau, cfg)?;
    instance.finalize(fm, cfg.sigma)?;
    let mut semantic = instance.fully_connected().coarsen(fm, tau, cfg)?;
    semantic.finalize(fm, cfg.sigma)?;
    Ok((instance, semantic))
}

/// Multi-granular instance and semantic pseudo-masks for one feature map.
pub fn run_uniap(fm: &FeatureMap, cfg: &UniapConfig) -> Result<MaskPyramid> {
    run_uniap_traced(fm, cfg).map(|(p, _)| p)
}

/// [`run_uniap`] that also returns each layer's live graphs.
pub fn run_uniap_traced(
    fm: &FeatureMap,
    cfg: &UniapConfig,
) -> Result<(MaskPyramid, Vec<LayerTrace>)> {
    cfg.validate()?;
    let mut state = State::new(crate::graph::init_grid_graph(fm)?)?;
    let mut levels = Vec::with_capacity(cfg.thresholds.len());
    let mut trace = Vec::with_capacity(cfg.thresholds.len());
    for (t, &tau) in cfg.thresholds.iter().enumerate() {
        let start = Instant::now();
        let (instance, semantic) = pool_state(state, fm, tau, cfg)?;
        levels.push(PyramidLevel {
            tau,
            instance: emit(&instance.graph, t, MaskKind::Instance, cfg.phi)?,
            semantic: emit(&semantic.graph, t, MaskKind::Semantic, cfg.phi)?,
        });
        trace.push(LayerTrace {
            tau,
            instance: instance.graph.clone(),
            semantic: semantic.graph,
            elapsed: start.elapsed(),
        });
        state = instance;
    }
    let pyramid = MaskPyramid {
        height: fm.height(),
        width: fm.width(),
        levels,
    };
    Ok((dedup_pyramid(pyramid, cfg.dedup_iou)?, trace))
}

fn emit(g: &Graph, level: usize, kind: MaskKind, phi: usize) -> Result<Vec<PseudoMask>> {
    g.masks()
        .iter()
        .enumerate()
        .filter(|(_, m)| m.area() >= phi)
        .map(|(k, m)| {
            Ok(PseudoMask {
                mask: m.clone(),
                feature: g.feature(k)?.to_vec(),
                level,
                kind,
            })
        })
        .collect()
}

fn dedup_pyramid(mut p: MaskPyramid, dedup_iou: f64) -> Result<MaskPyramid> {
    let all: Vec<PseudoMask> = p
        .levels
        .iter_mut()
        .flat_map(|l| l.instance.drain(..).chain(l.semantic.drain(..)))
        .collect();
    for m in dedup_masks(all, dedup_iou)? {
        let level = &mut p.levels[m.level];
        match m.kind {
            MaskKind::Instance => level.instance.push(m),
            MaskKind::Semantic => level.semantic.push(m),
        }
    }
    Ok(p)
}

/// Greedy near-duplicate pruning in `(level, index)` order: a mask is
/// dropped when its IoU with an already kept mask of the same kind exceeds
/// `dedup_iou`.
pub fn dedup_masks(mut masks: Vec<PseudoMask>, dedup_iou: f64) -> Result<Vec<PseudoMask>> {
    if !(dedup_iou > 0.0 && dedup_iou <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "dedup_iou: {dedup_iou} outside (0, 1]"
        )));
    }
    // stable: equal levels keep their input order
    masks.sort_by_key(|m| m.level);
    let mut kept: Vec<PseudoMask> = Vec::with_capacity(masks.len());
    for m in masks {
        let mut duplicate = false;
        for k in kept.iter().filter(|k| k.kind == m.kind) {
            let (a, b) = (k.mask.area() as f64, m.mask.area() as f64);
            // IoU is at most the area ratio
            if a.min(b) / a.max(b) <= dedup_iou {
                continue;
            }
            if mask_iou(&k.mask, &m.mask)? > dedup_iou {
                duplicate = true;
                break;
            }
        }
        if !duplicate {
            kept.push(m);
        }
    }
    Ok(kept)
}

#[cfg(test)]
pub(crate) fn engine_scores(g: &Graph, fm: &FeatureMap, cfg: &UniapConfig) -> Result<Vec<f64>> {
    State::new(g.clone())?.scores(fm, cfg)
}

#[cfg(test)]
pub(crate) fn engine_marks(
    g: &Graph,
    fm: &FeatureMap,
    tau: f64,
    cfg: &UniapConfig,
) -> Result<Vec<Edge>> {
    State::new(g.clone())?.marked_edges(fm, tau, cfg)
}
