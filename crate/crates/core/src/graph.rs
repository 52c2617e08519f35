//! Coarsening-state graph: token masks, supernode features and sparse
//! undirected adjacency.
//!
//! A [`Graph`] is an immutable value. Coarsening produces a new graph through
//! [`apply_assignment`], which pools masks and adjacency; feature rows are
//! filled in afterwards by the pooling stage.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Undirected edge stored as `(i, j)` with `i < j`.
pub type Edge = (usize, usize);

/// Bitset over the `H·W` token grid with a cached population count.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TokenMask {
    len: usize,
    words: Vec<u64>,
    area: usize,
}

impl TokenMask {
    pub fn empty(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
            area: 0,
        }
    }

    pub fn full(len: usize) -> Self {
        let mut mask = Self::empty(len);
        for p in 0..len {
            mask.insert(p);
        }
        mask
    }

    pub fn singleton(len: usize, index: usize) -> Self {
        let mut mask = Self::empty(len);
        mask.insert(index);
        mask
    }

    pub fn from_indices<I>(len: usize, indices: I) -> Result<Self>
    where
        I: IntoIterator<Item = usize>,
    {
        let mut mask = Self::empty(len);
        for p in indices {
            if p >= len {
                return Err(Error::IndexOutOfRange { index: p, len });
            }
            mask.insert(p);
        }
        Ok(mask)
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut mask = Self::empty(bits.len());
        for (p, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            mask.insert(p);
        }
        mask
    }

    /// Sets token `p`. Panics if `p` is outside the grid.
    pub fn insert(&mut self, p: usize) {
        assert!(p < self.len, "token {p} outside mask of length {}", self.len);
        let (w, b) = (p / 64, p % 64);
        if self.words[w] & (1 << b) == 0 {
            self.words[w] |= 1 << b;
            self.area += 1;
        }
    }

    #[inline]
    pub fn contains(&self, p: usize) -> bool {
        p < self.len && self.words[p / 64] & (1 << (p % 64)) != 0
    }

    /// Number of tokens in the grid this mask is defined over.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn area(&self) -> usize {
        self.area
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Set token indices in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(w * 64 + b)
            })
        })
    }

    pub fn union_with(&mut self, other: &TokenMask) {
        assert_eq!(self.len, other.len, "mask length mismatch");
        let mut area = 0;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
            area += a.count_ones() as usize;
        }
        self.area = area;
    }

    pub fn intersection_area(&self, other: &TokenMask) -> usize {
        assert_eq!(self.len, other.len, "mask length mismatch");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn is_disjoint(&self, other: &TokenMask) -> bool {
        self.intersection_area(other) == 0
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|p| self.contains(p)).collect()
    }
}

impl fmt::Debug for TokenMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenMask")
            .field("len", &self.len)
            .field("tokens", &self.iter().collect::<Vec<_>>())
            .finish()
    }
}

/// Node-to-supernode map. Equivalent to a binary assignment matrix with
/// exactly one set entry per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    map: Vec<usize>,
    num_supernodes: usize,
}

impl Assignment {
    /// Validates that `map` is surjective onto `0..num_supernodes`.
    pub fn new(map: Vec<usize>, num_supernodes: usize) -> Result<Self> {
        let mut hit = vec![false; num_supernodes];
        for (node, &k) in map.iter().enumerate() {
            if k >= num_supernodes {
                return Err(Error::InvalidAssignment(format!(
                    "node {node} maps to {k}, only {num_supernodes} supernodes"
                )));
            }
            hit[k] = true;
        }
        if let Some(k) = hit.iter().position(|&h| !h) {
            return Err(Error::InvalidAssignment(format!(
                "supernode {k} has no members"
            )));
        }
        Ok(Self {
            map,
            num_supernodes,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).collect(),
            num_supernodes: n,
        }
    }

    /// Renumbers arbitrary labels so that supernodes are ordered by their
    /// smallest member index.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut renumber = std::collections::HashMap::new();
        let map = labels
            .iter()
            .map(|&l| {
                let next = renumber.len();
                *renumber.entry(l).or_insert(next)
            })
            .collect();
        Self {
            map,
            num_supernodes: renumber.len(),
        }
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn num_nodes(&self) -> usize {
        self.map.len()
    }

    pub fn num_supernodes(&self) -> usize {
        self.num_supernodes
    }

    pub fn is_identity(&self) -> bool {
        self.num_supernodes == self.map.len()
            && self.map.iter().enumerate().all(|(i, &k)| i == k)
    }

    /// Members of each supernode, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_supernodes];
        for (node, &k) in self.map.iter().enumerate() {
            groups[k].push(node);
        }
        groups
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Assignment) -> Result<Assignment> {
        if next.map.len() != self.num_supernodes {
            return Err(Error::InvalidAssignment(format!(
                "cannot compose: {} supernodes feed a map over {} nodes",
                self.num_supernodes,
                next.map.len()
            )));
        }
        Assignment::new(
            self.map.iter().map(|&k| next.map[k]).collect(),
            next.num_supernodes,
        )
    }
}

/// Graph at one coarsening step.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    level: usize,
    height: usize,
    width: usize,
    dim: usize,
    masks: Vec<TokenMask>,
    edges: Vec<Edge>,
    features: Option<Vec<f32>>,
}

impl Graph {
    /// Builds a graph from raw parts, checking the partition and edge
    /// invariants. Feature rows, when given, must be `num_nodes × dim`.
    pub fn from_parts(
        height: usize,
        width: usize,
        dim: usize,
        level: usize,
        masks: Vec<TokenMask>,
        mut edges: Vec<Edge>,
        features: Option<Vec<f32>>,
    ) -> Result<Self> {
        let tokens = height * width;
        let n = masks.len();
        let mut cover = TokenMask::empty(tokens);
        for m in &masks {
            if m.len() != tokens {
                return Err(Error::LengthMismatch {
                    left: m.len(),
                    right: tokens,
                });
            }
            if m.is_empty() {
                return Err(Error::EmptyMask("graph node without tokens"));
            }
            if !cover.is_disjoint(m) {
                return Err(Error::InvalidAssignment("node masks overlap".into()));
            }
            cover.union_with(m);
        }
        if cover.area() != tokens {
            return Err(Error::InvalidAssignment(format!(
                "masks cover {} of {tokens} tokens",
                cover.area()
            )));
        }
        for e in edges.iter_mut() {
            let (i, j) = *e;
            if i == j {
                return Err(Error::SelfLoop(i));
            }
            for x in [i, j] {
                if x >= n {
                    return Err(Error::IndexOutOfRange { index: x, len: n });
                }
            }
            *e = (i.min(j), i.max(j));
        }
        edges.sort_unstable();
        edges.dedup();
        if let Some(f) = &features {
            if f.len() != n * dim {
                return Err(Error::DimensionMismatch {
                    expected: n * dim,
                    got: f.len(),
                });
            }
        }
        Ok(Self {
            level,
            height,
            width,
            dim,
            masks,
            edges,
            features,
        })
    }

    pub fn level(&self) -> usize {
        self.level
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

    pub fn token_count(&self) -> usize {
        self.height * self.width
    }

    pub fn num_nodes(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[TokenMask] {
        &self.masks
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn has_features(&self) -> bool {
        self.features.is_some()
    }

    pub fn features(&self) -> Result<&[f32]> {
        self.features
            .as_deref()
            .ok_or(Error::MissingFeatures(self.level))
    }

    pub fn feature(&self, node: usize) -> Result<&[f32]> {
        let d = self.dim;
        Ok(&self.features()?[node * d..(node + 1) * d])
    }

    pub fn with_features(mut self, features: Vec<f32>) -> Result<Self> {
        let expected = self.num_nodes() * self.dim;
        if features.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: features.len(),
            });
        }
        self.features = Some(features);
        Ok(self)
    }

    pub(crate) fn into_parts(self) -> (Vec<TokenMask>, Option<Vec<f32>>) {
        (self.masks, self.features)
    }

    /// True when the masks are pairwise disjoint and cover every token.
    pub fn is_partition(&self) -> bool {
        let mut cover = TokenMask::empty(self.token_count());
        for m in &self.masks {
            if m.is_empty() || !cover.is_disjoint(m) {
                return false;
            }
            cover.union_with(m);
        }
        cover.area() == self.token_count()
    }
}

/// One node per token in row-major order with 4-neighbourhood edges.
pub fn init_grid_graph(fm: &FeatureMap) -> Result<Graph> {
    if !fm.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let (h, w) = (fm.height(), fm.width());
    let n = h * w;
    let masks = (0..n).map(|p| TokenMask::singleton(n, p)).collect();
    let mut edges = Vec::with_capacity(h * w.saturating_sub(1) + w * h.saturating_sub(1));
    for p in 0..n {
        let (r, c) = (p / w, p % w);
        if c + 1 < w {
            edges.push((p, p + 1));
        }
        if r + 1 < h {
            edges.push((p, p + w));
        }
    }
    Ok(Graph {
        level: 0,
        height: h,
        width: w,
        dim: fm.dim(),
        masks,
        edges,
        features: Some(fm.data().to_vec()),
    })
}

/// Same nodes with an edge between every pair.
pub fn make_fully_connected(g: &Graph) -> Graph {
    let n = g.num_nodes();
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((i, j));
        }
    }
    Graph {
        edges,
        ..g.clone()
    }
}

/// Pools masks and adjacency through `a`. Supernode masks are unions of
/// their children; two supernodes are adjacent iff some pair of their
/// children was. Feature rows are dropped.
pub fn apply_assignment(g: &Graph, a: &Assignment) -> Result<Graph> {
    if a.num_nodes() != g.num_nodes() {
        return Err(Error::InvalidAssignment(format!(
            "map covers {} nodes, graph has {}",
            a.num_nodes(),
            g.num_nodes()
        )));
    }
    let a = Assignment::new(a.map.clone(), a.num_supernodes)?;
    let mut masks = vec![TokenMask::empty(g.token_count()); a.num_supernodes];
    for (node, &k) in a.map.iter().enumerate() {
        masks[k].union_with(&g.masks[node]);
    }
    let mut edges: Vec<Edge> = g
        .edges
        .iter()
        .filter_map(|&(i, j)| {
            let (k, l) = (a.map[i], a.map[j]);
            (k != l).then(|| (k.min(l), k.max(l)))
        })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    Ok(Graph {
        level: g.level + 1,
        height: g.height,
        width: g.width,
        dim: g.dim,
        masks,
        edges,
        features: None,
    })
}
