//! Connected-component labeling over the marked-edge subgraph.
//!
//! The parallel path is min-label propagation with pointer jumping: each
//! round every node takes the smallest label among itself and its
//! neighbours, then labels are shortcut `label[i] = label[label[i]]` until
//! stable. Every round is a pure map over nodes, so the fixpoint (each node
//! labelled by its component's smallest index) is independent of how rayon
//! splits the work.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Assignment, Edge};

/// Below this node count the sequential union-find is faster.
pub const PARALLEL_THRESHOLD: usize = 1024;

/// Disjoint-set forest with path compression and union by rank.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    /// Returns `true` when two distinct sets were merged.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return false;
        }
        if self.rank[a] < self.rank[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        if self.rank[a] == self.rank[b] {
            self.rank[a] = self.rank[a].saturating_add(1);
        }
        true
    }
}

fn validate(num_nodes: usize, edges: &[Edge]) -> Result<()> {
    for &(i, j) in edges {
        for x in [i, j] {
            if x >= num_nodes {
                return Err(Error::IndexOutOfRange {
                    index: x,
                    len: num_nodes,
                });
            }
        }
        if i == j {
            return Err(Error::SelfLoop(i));
        }
    }
    Ok(())
}

/// Sequential reference labeling.
pub fn union_find_oracle(num_nodes: usize, marked_edges: &[Edge]) -> Result<Assignment> {
    validate(num_nodes, marked_edges)?;
    let mut uf = UnionFind::new(num_nodes);
    for &(i, j) in marked_edges {
        uf.union(i, j);
    }
    let labels: Vec<usize> = (0..num_nodes).map(|i| uf.find(i)).collect();
    Ok(Assignment::from_labels(&labels))
}

/// Data-parallel min-label propagation, regardless of graph size.
pub fn label_propagation_components(num_nodes: usize, marked_edges: &[Edge]) -> Result<Assignment> {
    validate(num_nodes, marked_edges)?;
    let (offsets, neighbours) = csr(num_nodes, marked_edges);
    let mut labels: Vec<usize> = (0..num_nodes).collect();
    loop {
        let mut next: Vec<usize> = (0..num_nodes)
            .into_par_iter()
            .map(|i| {
                neighbours[offsets[i]..offsets[i + 1]]
                    .iter()
                    .fold(labels[i], |m, &j| m.min(labels[j]))
            })
            .collect();
        loop {
            let jumped: Vec<usize> = next.par_iter().map(|&l| next[l]).collect();
            if jumped == next {
                break;
            }
            next = jumped;
        }
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(Assignment::from_labels(&labels))
}

/// Two nodes share a supernode iff they are joined by marked edges.
/// Supernodes are numbered by their smallest member, ascending.
pub fn connected_components(num_nodes: usize, marked_edges: &[Edge]) -> Result<Assignment> {
    if num_nodes < PARALLEL_THRESHOLD {
        union_find_oracle(num_nodes, marked_edges)
    } else {
        label_propagation_components(num_nodes, marked_edges)
    }
}

fn csr(n: usize, edges: &[Edge]) -> (Vec<usize>, Vec<usize>) {
    let mut degree = vec![0usize; n + 1];
    for &(i, j) in edges {
        degree[i + 1] += 1;
        degree[j + 1] += 1;
    }
    for k in 0..n {
        degree[k + 1] += degree[k];
    }
    let offsets = degree;
    let mut fill = offsets.clone();
    let mut neighbours = vec![0; offsets[n]];
    for &(i, j) in edges {
        neighbours[fill[i]] = j;
        fill[i] += 1;
        neighbours[fill[j]] = i;
        fill[j] += 1;
    }
    (offsets, neighbours)
}
