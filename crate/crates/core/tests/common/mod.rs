#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use absalign_core::{AbstractionDag, NodeSpec};
use proptest::prelude::*;

/// A raw graph kept next to the built DAG so oracles never touch its indices.
#[derive(Clone, Debug)]
pub struct RawGraph {
    pub ids: Vec<String>,
    /// (child, parent) positions into `ids`.
    pub edges: Vec<(usize, usize)>,
}

impl RawGraph {
    pub fn build(&self) -> AbstractionDag {
        AbstractionDag::build(
            self.ids.iter().map(|id| NodeSpec::new(id.clone())).collect(),
            self.edges
                .iter()
                .map(|&(c, p)| (self.ids[c].clone(), self.ids[p].clone()))
                .collect(),
        )
        .expect("generated graph is acyclic")
    }

    pub fn children(&self, n: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.1 == n).map(|e| e.0).collect()
    }

    pub fn parents(&self, n: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.0 == n).map(|e| e.1).collect()
    }

    /// Strict descendants by depth-first search over the edge list.
    pub fn descendants(&self, n: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = self.children(n);
        while let Some(c) = stack.pop() {
            if seen.insert(c) {
                stack.extend(self.children(c));
            }
        }
        seen
    }

    pub fn ancestors(&self, n: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = self.parents(n);
        while let Some(p) = stack.pop() {
            if seen.insert(p) {
                stack.extend(self.parents(p));
            }
        }
        seen
    }

    /// 1 + breadth-first distance down to the nearest leaf.
    pub fn level(&self, n: usize) -> u32 {
        let mut queue = VecDeque::from([(n, 1u32)]);
        let mut seen = BTreeSet::from([n]);
        while let Some((x, d)) = queue.pop_front() {
            let kids = self.children(x);
            if kids.is_empty() {
                return d;
            }
            for k in kids {
                if seen.insert(k) {
                    queue.push_back((k, d + 1));
                }
            }
        }
        unreachable!("every finite DAG bottoms out in a leaf")
    }

    pub fn is_tree(&self) -> bool {
        (0..self.ids.len()).all(|n| self.parents(n).len() <= 1)
    }
}

/// Node ids are a shuffled labelling, so id order differs from topological order.
fn labelled(n: usize, perm: Vec<usize>, edges: Vec<(usize, usize)>) -> RawGraph {
    let ids = (0..n).map(|i| format!("n{:02}", perm[i])).collect();
    RawGraph { ids, edges }
}

/// Random DAG with up to `max_nodes` nodes. Edges run from lower to higher
/// hidden rank, which keeps the graph acyclic.
pub fn arb_dag(max_nodes: usize) -> impl Strategy<Value = RawGraph> {
    (1..=max_nodes).prop_flat_map(|n| {
        let pairs = n * (n - 1) / 2;
        (
            proptest::collection::vec(proptest::bool::weighted(0.2), pairs),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
            .prop_map(move |(bits, perm)| {
                let mut edges = Vec::new();
                let mut k = 0;
                for c in 0..n {
                    for p in (c + 1)..n {
                        if bits[k] {
                            edges.push((c, p));
                        }
                        k += 1;
                    }
                }
                labelled(n, perm, edges)
            })
    })
}

/// Random forest: each node gets at most one parent of higher rank.
pub fn arb_tree(max_nodes: usize) -> impl Strategy<Value = RawGraph> {
    (1..=max_nodes).prop_flat_map(|n| {
        (
            proptest::collection::vec((any::<bool>(), any::<u32>()), n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
            .prop_map(move |(choices, perm)| {
                let mut edges = Vec::new();
                for (c, &(attach, r)) in choices.iter().enumerate() {
                    let above = n - c - 1;
                    if above > 0 && (attach || c == 0) {
                        edges.push((c, c + 1 + r as usize % above));
                    }
                }
                labelled(n, perm, edges)
            })
    })
}

/// Sparse evidence over raw node positions; values are multiples of 1/1024.
pub fn arb_evidence(n: usize) -> impl Strategy<Value = Vec<(usize, f64)>> {
    proptest::collection::btree_map(0..n, 1u32..=1024, 0..=n.min(8))
        .prop_map(|m| m.into_iter().map(|(k, v)| (k, v as f64 / 1024.0)).collect())
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Entropy of already normalized weights, written out independently.
pub fn entropy_bits(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.log2()
        })
        .sum()
}
