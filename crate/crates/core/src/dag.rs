//! The human-abstraction DAG: concepts connected by child→parent edges.
//!
//! Nodes are stored in lexicographic `NodeId` order, so a smaller [`NodeIx`]
//! always means a smaller id. Every argmax in the crate breaks ties by
//! picking the smallest index, which makes results independent of input
//! order.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DagError;

/// Identifier of a concept. Compared byte-wise.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Result<Self, DagError> {
        let id = id.into();
        if id.is_empty() {
            return Err(DagError::EmptyNodeId);
        }
        Ok(NodeId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

/// Dense index of a node inside one [`AbstractionDag`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeIx(pub u32);

impl NodeIx {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Input description of one node, as produced by the hierarchy parsers.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    pub name: Option<String>,
    /// Only meaningful for coding hierarchies where inner nodes may be labels.
    pub codable: Option<bool>,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>) -> Self {
        NodeSpec {
            id: id.into(),
            name: None,
            codable: None,
        }
    }

    pub fn named(id: impl Into<String>, name: impl Into<String>) -> Self {
        NodeSpec {
            id: id.into(),
            name: Some(name.into()),
            codable: None,
        }
    }
}

#[derive(Clone, Debug)]
struct NodeData {
    id: NodeId,
    name: String,
    codable: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ancestors,
    Descendants,
}

/// Immutable, validated concept DAG with levels and closure indices.
#[derive(Clone, Debug)]
pub struct AbstractionDag {
    nodes: Vec<NodeData>,
    index: HashMap<NodeId, NodeIx>,
    parents: Vec<Vec<NodeIx>>,
    children: Vec<Vec<NodeIx>>,
    levels: Vec<u32>,
    // sorted, deduplicated transitive closures (excluding self)
    ancestors: Vec<Vec<NodeIx>>,
    descendants: Vec<Vec<NodeIx>>,
    // children before parents
    topo: Vec<NodeIx>,
    topo_rank: Vec<u32>,
    by_level: BTreeMap<u32, Vec<NodeIx>>,
}

impl AbstractionDag {
    /// Validates nodes and child→parent edges and computes levels.
    ///
    /// Multiple roots are kept as they are. Duplicate edges are collapsed.
    pub fn build(nodes: Vec<NodeSpec>, edges: Vec<(String, String)>) -> Result<Self, DagError> {
        if nodes.is_empty() {
            return Err(DagError::Empty);
        }
        let mut data = Vec::with_capacity(nodes.len());
        for spec in nodes {
            let id = NodeId::new(spec.id)?;
            let name = spec.name.unwrap_or_else(|| id.as_str().to_string());
            data.push(NodeData {
                id,
                name,
                codable: spec.codable,
            });
        }
        data.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in data.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(DagError::DuplicateNode(pair[0].id.to_string()));
            }
        }
        let index: HashMap<NodeId, NodeIx> = data
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), NodeIx(i as u32)))
            .collect();

        let n = data.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for (child, parent) in &edges {
            let c = *index
                .get(child.as_str())
                .ok_or_else(|| DagError::UnknownNode(child.clone()))?;
            let p = *index
                .get(parent.as_str())
                .ok_or_else(|| DagError::UnknownNode(parent.clone()))?;
            parents[c.idx()].push(p);
            children[p.idx()].push(c);
        }
        for list in parents.iter_mut().chain(children.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }

        let topo = topological_order(&parents, &children)
            .map_err(|cycle| DagError::CycleDetected(cycle.iter().map(|ix| data[ix.idx()].id.to_string()).collect()))?;

        // multi-source BFS upward from every leaf
        let mut levels = vec![0u32; n];
        let mut queue = VecDeque::new();
        for (i, ch) in children.iter().enumerate() {
            if ch.is_empty() {
                levels[i] = 1;
                queue.push_back(NodeIx(i as u32));
            }
        }
        while let Some(node) = queue.pop_front() {
            let next = levels[node.idx()] + 1;
            for &p in &parents[node.idx()] {
                if levels[p.idx()] == 0 {
                    levels[p.idx()] = next;
                    queue.push_back(p);
                }
            }
        }
        debug_assert!(levels.iter().all(|&l| l > 0));

        let mut ancestors: Vec<Vec<NodeIx>> = vec![Vec::new(); n];
        for &node in topo.iter().rev() {
            let mut acc: Vec<NodeIx> = Vec::new();
            for &p in &parents[node.idx()] {
                acc.push(p);
                acc.extend_from_slice(&ancestors[p.idx()]);
            }
            acc.sort_unstable();
            acc.dedup();
            ancestors[node.idx()] = acc;
        }
        let mut descendants: Vec<Vec<NodeIx>> = vec![Vec::new(); n];
        for (i, anc) in ancestors.iter().enumerate() {
            for &a in anc {
                descendants[a.idx()].push(NodeIx(i as u32));
            }
        }

        let mut by_level: BTreeMap<u32, Vec<NodeIx>> = BTreeMap::new();
        for (i, &l) in levels.iter().enumerate() {
            by_level.entry(l).or_default().push(NodeIx(i as u32));
        }

        let mut topo_rank = vec![0u32; n];
        for (rank, &ix) in topo.iter().enumerate() {
            topo_rank[ix.idx()] = rank as u32;
        }

        Ok(AbstractionDag {
            nodes: data,
            index,
            parents,
            children,
            levels,
            ancestors,
            descendants,
            topo,
            topo_rank,
            by_level,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ix(&self, id: &str) -> Result<NodeIx, DagError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| DagError::UnknownNode(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Option<NodeIx> {
        self.index.get(id).copied()
    }

    pub fn id(&self, ix: NodeIx) -> &NodeId {
        &self.nodes[ix.idx()].id
    }

    pub fn name(&self, ix: NodeIx) -> &str {
        &self.nodes[ix.idx()].name
    }

    pub fn codable(&self, ix: NodeIx) -> Option<bool> {
        self.nodes[ix.idx()].codable
    }

    pub fn node_ixs(&self) -> impl ExactSizeIterator<Item = NodeIx> {
        (0..self.nodes.len() as u32).map(NodeIx)
    }

    pub fn parents(&self, ix: NodeIx) -> &[NodeIx] {
        &self.parents[ix.idx()]
    }

    pub fn children(&self, ix: NodeIx) -> &[NodeIx] {
        &self.children[ix.idx()]
    }

    pub fn roots(&self) -> Vec<NodeIx> {
        self.node_ixs().filter(|ix| self.parents[ix.idx()].is_empty()).collect()
    }

    pub fn leaves(&self) -> Vec<NodeIx> {
        self.node_ixs().filter(|ix| self.children[ix.idx()].is_empty()).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.parents.iter().map(Vec::len).sum()
    }

    /// Level of a node by index: 1 for leaves, else 1 + distance to the nearest leaf.
    #[inline]
    pub fn level(&self, ix: NodeIx) -> u32 {
        self.levels[ix.idx()]
    }

    pub fn level_of(&self, id: &str) -> Result<u32, DagError> {
        Ok(self.level(self.ix(id)?))
    }

    /// Distinct level values, ascending.
    pub fn levels(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_level.keys().copied()
    }

    pub fn level_count(&self) -> usize {
        self.by_level.len()
    }

    pub fn max_level(&self) -> u32 {
        self.by_level.keys().next_back().copied().unwrap_or(1)
    }

    pub fn has_level(&self, level: u32) -> bool {
        self.by_level.contains_key(&level)
    }

    /// Nodes at `level`, sorted by id.
    pub fn nodes_at_level(&self, level: u32) -> Result<&[NodeIx], DagError> {
        self.by_level
            .get(&level)
            .map(Vec::as_slice)
            .ok_or(DagError::UnknownLevel(level))
    }

    /// Sorted transitive ancestors, excluding the node itself.
    pub fn ancestors(&self, ix: NodeIx) -> &[NodeIx] {
        &self.ancestors[ix.idx()]
    }

    /// Sorted transitive descendants, excluding the node itself.
    pub fn descendants(&self, ix: NodeIx) -> &[NodeIx] {
        &self.descendants[ix.idx()]
    }

    pub fn is_ancestor(&self, ancestor: NodeIx, of: NodeIx) -> bool {
        self.ancestors[of.idx()].binary_search(&ancestor).is_ok()
    }

    /// True when one node is an ancestor of the other.
    pub fn are_related(&self, a: NodeIx, b: NodeIx) -> bool {
        self.is_ancestor(a, b) || self.is_ancestor(b, a)
    }

    pub fn relatives(&self, id: &str, direction: Direction) -> Result<Vec<NodeIx>, DagError> {
        let ix = self.ix(id)?;
        Ok(match direction {
            Direction::Ancestors => self.ancestors(ix).to_vec(),
            Direction::Descendants => self.descendants(ix).to_vec(),
        })
    }

    /// Topological order with every child before all of its parents.
    pub fn topological_order(&self) -> &[NodeIx] {
        &self.topo
    }

    /// Position of a node in [`Self::topological_order`].
    #[inline]
    pub fn topo_rank(&self, ix: NodeIx) -> u32 {
        self.topo_rank[ix.idx()]
    }

    /// Whether processing nodes level by level visits children before parents.
    pub fn levels_are_topological(&self) -> bool {
        self.node_ixs()
            .all(|ix| self.parents(ix).iter().all(|&p| self.level(p) > self.level(ix)))
    }

    /// The node itself or its ancestors whose level equals `level`.
    pub fn ancestor_at_level(&self, ix: NodeIx, level: u32) -> Result<Vec<NodeIx>, DagError> {
        if !self.has_level(level) {
            return Err(DagError::UnknownLevel(level));
        }
        let own = self.level(ix);
        if level < own {
            return Err(DagError::LevelBelowNode {
                node: self.id(ix).to_string(),
                node_level: own,
                level,
            });
        }
        if level == own {
            return Ok(vec![ix]);
        }
        Ok(self
            .ancestors(ix)
            .iter()
            .copied()
            .filter(|&a| self.level(a) == level)
            .collect())
    }

    pub fn resolve_selector(&self, sel: &SubgraphSelector) -> Result<Vec<NodeIx>, DagError> {
        let set = match sel {
            SubgraphSelector::Single(a) => vec![self.ix(a.as_str())?],
            SubgraphSelector::WithDescendants(a) => {
                let ix = self.ix(a.as_str())?;
                with_self(ix, self.descendants(ix))
            }
            SubgraphSelector::AncestorsOnly(a) => self.ancestors(self.ix(a.as_str())?).to_vec(),
            SubgraphSelector::AncestorsDescendantsSelf(a) => {
                let ix = self.ix(a.as_str())?;
                let mut set = with_self(ix, self.descendants(ix));
                set.extend_from_slice(self.ancestors(ix));
                set.sort_unstable();
                set
            }
            SubgraphSelector::LevelSlice(level) => self.nodes_at_level(*level)?.to_vec(),
            SubgraphSelector::AllNodes => self.node_ixs().collect(),
        };
        if set.is_empty() {
            return Err(DagError::EmptySelection(sel.to_string()));
        }
        Ok(set)
    }

    /// Serializable description of the graph (the JSON hierarchy format).
    pub fn to_hierarchy(&self) -> HierarchyDoc {
        HierarchyDoc {
            nodes: self
                .node_ixs()
                .map(|ix| HierarchyNode {
                    id: self.id(ix).to_string(),
                    name: Some(self.name(ix).to_string()),
                    parents: self.parents(ix).iter().map(|&p| self.id(p).to_string()).collect(),
                    codable: self.codable(ix),
                })
                .collect(),
        }
    }

    /// Per-node summary including levels, used by the API and `validate`.
    pub fn describe(&self) -> DagDescription {
        DagDescription {
            node_count: self.len(),
            edge_count: self.edge_count(),
            level_count: self.level_count(),
            nodes: self
                .node_ixs()
                .map(|ix| NodeDescription {
                    id: self.id(ix).to_string(),
                    name: self.name(ix).to_string(),
                    level: self.level(ix),
                    parents: self.parents(ix).iter().map(|&p| self.id(p).to_string()).collect(),
                    children: self.children(ix).iter().map(|&c| self.id(c).to_string()).collect(),
                    codable: self.codable(ix),
                })
                .collect(),
            roots: self.roots().iter().map(|&r| self.id(r).to_string()).collect(),
            levels: self
                .by_level
                .iter()
                .map(|(&l, nodes)| (l.to_string(), nodes.len()))
                .collect(),
        }
    }
}

fn with_self(ix: NodeIx, rest: &[NodeIx]) -> Vec<NodeIx> {
    let mut set = Vec::with_capacity(rest.len() + 1);
    set.push(ix);
    set.extend_from_slice(rest);
    set.sort_unstable();
    set
}

/// Kahn's algorithm from the leaves up. On failure returns one cycle.
fn topological_order(parents: &[Vec<NodeIx>], children: &[Vec<NodeIx>]) -> Result<Vec<NodeIx>, Vec<NodeIx>> {
    let n = parents.len();
    let mut pending: Vec<usize> = children.iter().map(Vec::len).collect();
    let mut queue: VecDeque<NodeIx> = (0..n)
        .filter(|&i| pending[i] == 0)
        .map(|i| NodeIx(i as u32))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(node) = queue.pop_front() {
        order.push(node);
        for &p in &parents[node.idx()] {
            pending[p.idx()] -= 1;
            if pending[p.idx()] == 0 {
                queue.push_back(p);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Every unprocessed node has an unprocessed child, so walking children
    // among them must revisit a node.
    let stuck: Vec<bool> = pending.iter().map(|&c| c > 0).collect();
    let start = stuck.iter().position(|&s| s).expect("unprocessed node");
    let mut seen_at = vec![usize::MAX; n];
    let mut path = Vec::new();
    let mut cur = NodeIx(start as u32);
    loop {
        if seen_at[cur.idx()] != usize::MAX {
            let mut cycle: Vec<NodeIx> = path[seen_at[cur.idx()]..].to_vec();
            cycle.reverse(); // report child→parent direction
            return Err(cycle);
        }
        seen_at[cur.idx()] = path.len();
        path.push(cur);
        cur = *children[cur.idx()]
            .iter()
            .find(|c| stuck[c.idx()])
            .expect("stuck node has a stuck child");
    }
}

/// Declarative description of a node set.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SubgraphSelector {
    Single(NodeId),
    WithDescendants(NodeId),
    AncestorsOnly(NodeId),
    AncestorsDescendantsSelf(NodeId),
    LevelSlice(u32),
    AllNodes,
}

impl SubgraphSelector {
    pub fn anchor(&self) -> Option<&NodeId> {
        match self {
            SubgraphSelector::Single(a)
            | SubgraphSelector::WithDescendants(a)
            | SubgraphSelector::AncestorsOnly(a)
            | SubgraphSelector::AncestorsDescendantsSelf(a) => Some(a),
            SubgraphSelector::LevelSlice(_) | SubgraphSelector::AllNodes => None,
        }
    }

    /// Same kind of selector with a different anchor. Anchorless kinds are returned unchanged.
    pub fn with_anchor(&self, anchor: NodeId) -> SubgraphSelector {
        match self {
            SubgraphSelector::Single(_) => SubgraphSelector::Single(anchor),
            SubgraphSelector::WithDescendants(_) => SubgraphSelector::WithDescendants(anchor),
            SubgraphSelector::AncestorsOnly(_) => SubgraphSelector::AncestorsOnly(anchor),
            SubgraphSelector::AncestorsDescendantsSelf(_) => SubgraphSelector::AncestorsDescendantsSelf(anchor),
            other => other.clone(),
        }
    }
}

impl fmt::Display for SubgraphSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubgraphSelector::Single(a) => write!(f, "node:{a}"),
            SubgraphSelector::WithDescendants(a) => write!(f, "down:{a}"),
            SubgraphSelector::AncestorsOnly(a) => write!(f, "up:{a}"),
            SubgraphSelector::AncestorsDescendantsSelf(a) => write!(f, "updown:{a}"),
            SubgraphSelector::LevelSlice(l) => write!(f, "level:{l}"),
            SubgraphSelector::AllNodes => f.write_str("all"),
        }
    }
}

impl FromStr for SubgraphSelector {
    type Err = DagError;

    /// `node:ID`, `down:ID`, `up:ID`, `updown:ID`, `level:L` or `all`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(SubgraphSelector::AllNodes);
        }
        let bad = || DagError::BadSelector(s.to_string());
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let anchor = || NodeId::new(arg).map_err(|_| bad());
        Ok(match kind {
            "node" => SubgraphSelector::Single(anchor()?),
            "down" => SubgraphSelector::WithDescendants(anchor()?),
            "up" => SubgraphSelector::AncestorsOnly(anchor()?),
            "updown" => SubgraphSelector::AncestorsDescendantsSelf(anchor()?),
            "level" => SubgraphSelector::LevelSlice(arg.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        })
    }
}

/// JSON hierarchy document: `{"nodes":[{"id":..,"name":..,"parents":[..]}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyDoc {
    pub nodes: Vec<HierarchyNode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyNode {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub parents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codable: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DagDescription {
    pub node_count: usize,
    pub edge_count: usize,
    pub level_count: usize,
    pub levels: BTreeMap<String, usize>,
    pub roots: Vec<String>,
    pub nodes: Vec<NodeDescription>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeDescription {
    pub id: String,
    pub name: String,
    pub level: u32,
    pub parents: Vec<String>,
    pub children: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codable: Option<bool>,
}
