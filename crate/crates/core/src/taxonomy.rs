//! Uniform-depth class tree: nodes, root-to-leaf paths, base/novel splits and merging.
//!
//! Text format (one node per line, tab separated, `#` starts a comment line):
//!
//! ```text
//! # hiclpl taxonomy v1
//! # id  parent  level  count  name
//! 0     -       0      -      Aves
//! 1     0       1      -      Anseriformes
//! 2     1       2      40     Anatidae
//! ```
//!
//! * `id` values must be exactly `0..n` (any line order).
//! * `parent` is `-` for the single root and a node id otherwise.
//! * `count` is the number of training instances; leaves carry it, internal
//!   nodes may give `-` or the aggregated subtree count (a mismatch is an error).
//! * `name` is the rest of the line; sibling names must be unique so every
//!   node is identified by its name path.
//!
//! Children are ordered by ascending id, which fixes classifier output indices.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const HEADER: &str = "# hiclpl taxonomy v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaxonNode {
    pub id: NodeId,
    pub name: String,
    pub level: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Training instances in the node's subtree.
    pub instance_count: u64,
}

impl TaxonNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Position of `child` among this node's children (its classifier output index).
    pub fn child_index(&self, child: NodeId) -> Option<usize> {
        self.children.iter().position(|&c| c == child)
    }
}

/// Root-to-leaf node sequence of length `depth + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LeafPath(pub Vec<NodeId>);

impl LeafPath {
    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    pub fn leaf(&self) -> NodeId {
        *self.0.last().expect("non-empty path")
    }

    pub fn at(&self, level: usize) -> NodeId {
        self.0[level]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.0.contains(&node)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_leaf_ids: BTreeSet<NodeId>,
    pub novel_leaf_ids: BTreeSet<NodeId>,
}

/// One node as listed in a taxonomy document, before validation.
#[derive(Clone, Debug)]
pub struct NodeSpec {
    pub id: usize,
    pub parent: Option<usize>,
    pub level: usize,
    pub count: Option<u64>,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    nodes: Vec<TaxonNode>,
    depth: usize,
    root: NodeId,
}

impl Taxonomy {
    /// Validates a node list and builds the tree.
    pub fn from_specs(specs: Vec<NodeSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::MalformedTaxonomy("no nodes".into()));
        }
        let n = specs.len();
        let mut slots: Vec<Option<NodeSpec>> = vec![None; n];
        for spec in specs {
            if spec.id >= n {
                return Err(Error::MalformedTaxonomy(format!(
                    "node id {} out of range: ids must be 0..{}",
                    spec.id, n
                )));
            }
            let id = spec.id;
            if slots[id].replace(spec).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        let specs: Vec<NodeSpec> = slots.into_iter().map(|s| s.expect("dense ids")).collect();

        let roots: Vec<usize> = specs.iter().filter(|s| s.parent.is_none()).map(|s| s.id).collect();
        if roots.len() != 1 {
            return Err(Error::MalformedTaxonomy(format!("expected exactly one root, found {}", roots.len())));
        }
        let root = roots[0];
        if specs[root].level != 0 {
            return Err(Error::MalformedTaxonomy("root must have level 0".into()));
        }

        let mut nodes: Vec<TaxonNode> = specs
            .iter()
            .map(|s| TaxonNode {
                id: NodeId(s.id),
                name: s.name.clone(),
                level: s.level,
                parent: s.parent.map(NodeId),
                children: Vec::new(),
                instance_count: 0,
            })
            .collect();
        for s in &specs {
            if let Some(p) = s.parent {
                let parent = specs.get(p).ok_or_else(|| {
                    Error::MalformedTaxonomy(format!("node {} has unknown parent {}", s.id, p))
                })?;
                if s.level != parent.level + 1 {
                    return Err(Error::MalformedTaxonomy(format!(
                        "node {} has level {} but its parent {} has level {}",
                        s.id, s.level, p, parent.level
                    )));
                }
                // ids ascend, so pushing in id order keeps children sorted
                nodes[p].children.push(NodeId(s.id));
            }
        }
        // Levels strictly increase along parent links, so the graph is a tree rooted at `root`.
        let depth = nodes.iter().map(|n| n.level).max().unwrap_or(0);
        let mut taxonomy = Taxonomy { nodes, depth, root: NodeId(root) };
        if taxonomy.nodes.len() == 1 {
            return Err(Error::MalformedTaxonomy("taxonomy has no leaves".into()));
        }
        taxonomy.check_shape()?;

        let leaf_counts: BTreeMap<NodeId, u64> = specs
            .iter()
            .filter(|s| taxonomy.nodes[s.id].is_leaf())
            .map(|s| (NodeId(s.id), s.count.unwrap_or(0)))
            .collect();
        taxonomy.set_leaf_counts(&leaf_counts);
        for s in &specs {
            if let Some(c) = s.count {
                let agg = taxonomy.nodes[s.id].instance_count;
                if c != agg {
                    return Err(Error::MalformedTaxonomy(format!(
                        "node {} lists count {} but its subtree holds {}",
                        s.id, c, agg
                    )));
                }
            }
        }
        Ok(taxonomy)
    }

    fn check_shape(&self) -> Result<()> {
        for node in &self.nodes {
            if node.is_leaf() && node.level != self.depth && !self.is_empty() {
                return Err(Error::NonUniformDepth {
                    node: node.id.0,
                    name: node.name.clone(),
                    level: node.level,
                    depth: self.depth,
                });
            }
            let mut seen = BTreeSet::new();
            for &c in &node.children {
                if !seen.insert(self.nodes[c.0].name.as_str()) {
                    return Err(Error::NamePathConflict(format!(
                        "duplicate child name {:?} under node {}",
                        self.nodes[c.0].name, node.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// A root with no descendants; the identity element for [`Taxonomy::merge`].
    pub fn empty(root_name: &str, depth: usize) -> Self {
        Taxonomy {
            nodes: vec![TaxonNode {
                id: NodeId(0),
                name: root_name.to_string(),
                level: 0,
                parent: None,
                children: Vec::new(),
                instance_count: 0,
            }],
            depth,
            root: NodeId(0),
        }
    }

    /// Parses the tab-separated text format.
    pub fn parse(document: &str) -> Result<Self> {
        let mut specs = Vec::new();
        for (lineno, raw) in document.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::MalformedTaxonomy(format!("line {}: {}", lineno + 1, what));
            let mut fields = line.splitn(5, '\t');
            let mut next = |what: &str| fields.next().map(str::trim).ok_or_else(|| bad(&format!("missing {what}")));
            let id = next("id")?.parse::<usize>().map_err(|_| bad("bad id"))?;
            let parent = match next("parent")? {
                "-" => None,
                p => Some(p.parse::<usize>().map_err(|_| bad("bad parent"))?),
            };
            let level = next("level")?.parse::<usize>().map_err(|_| bad("bad level"))?;
            let count = match next("count")? {
                "-" => None,
                c => Some(c.parse::<u64>().map_err(|_| bad("bad count"))?),
            };
            let name = next("name")?.to_string();
            if name.is_empty() {
                return Err(bad("empty name"));
            }
            specs.push(NodeSpec { id, parent, level, count, name });
        }
        Self::from_specs(specs)
    }

    /// Serializes to the text format; [`Taxonomy::parse`] reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push_str("\n# id\tparent\tlevel\tcount\tname\n");
        for n in &self.nodes {
            let parent = n.parent.map_or_else(|| "-".to_string(), |p| p.0.to_string());
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", n.id, parent, n.level, n.instance_count, n.name));
        }
        out
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True for a root-only taxonomy.
    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn nodes(&self) -> &[TaxonNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&TaxonNode> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id))
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes.get(id.0).is_some_and(|n| n.is_leaf() && !self.is_empty())
    }

    /// Leaf ids in ascending order.
    pub fn leaves(&self) -> Vec<NodeId> {
        if self.is_empty() {
            return Vec::new();
        }
        self.nodes.iter().filter(|n| n.is_leaf()).map(|n| n.id).collect()
    }

    /// Internal (classifier-owning) node ids in ascending order.
    pub fn internal_nodes(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| !n.is_leaf()).map(|n| n.id).collect()
    }

    pub fn nodes_at_level(&self, level: usize) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.level == level).map(|n| n.id).collect()
    }

    pub fn path_of(&self, leaf: NodeId) -> Result<LeafPath> {
        let node = self.node(leaf)?;
        if !self.is_leaf(leaf) {
            return Err(Error::NotALeaf(node.id));
        }
        let mut path = Vec::with_capacity(self.depth + 1);
        let mut cur = Some(leaf);
        while let Some(id) = cur {
            path.push(id);
            cur = self.nodes[id.0].parent;
        }
        path.reverse();
        Ok(LeafPath(path))
    }

    /// One path per leaf, in ascending leaf-id order.
    pub fn enumerate_paths(&self) -> Vec<LeafPath> {
        self.leaves().into_iter().map(|l| self.path_of(l).expect("leaf")).collect()
    }

    pub fn subtree_leaves(&self, id: NodeId) -> Result<Vec<NodeId>> {
        self.node(id)?;
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n.0];
            if node.is_leaf() {
                if self.is_leaf(n) {
                    out.push(n);
                }
            } else {
                stack.extend(node.children.iter().rev());
            }
        }
        out.sort();
        Ok(out)
    }

    /// Sorts the root's children by descending instance count (ties: ascending id);
    /// leaves under the first `top_k` become base classes, the rest novel.
    pub fn split_base_novel(&self, top_k: usize) -> Result<SplitSpec> {
        let root = &self.nodes[self.root.0];
        let children = root.children.len();
        if top_k == 0 || top_k >= children {
            return Err(Error::TopKOutOfRange { top_k, children });
        }
        let mut order = root.children.clone();
        order.sort_by(|a, b| {
            self.nodes[b.0]
                .instance_count
                .cmp(&self.nodes[a.0].instance_count)
                .then(a.cmp(b))
        });
        let mut split = SplitSpec::default();
        for (rank, &child) in order.iter().enumerate() {
            let target = if rank < top_k { &mut split.base_leaf_ids } else { &mut split.novel_leaf_ids };
            target.extend(self.subtree_leaves(child)?);
        }
        Ok(split)
    }

    /// Keeps the given leaves and their ancestors, renumbering ids densely in
    /// the original id order. An empty leaf set yields [`Taxonomy::empty`].
    pub fn restrict(&self, leaves: &BTreeSet<NodeId>) -> Result<Self> {
        let mut keep = BTreeSet::new();
        for &leaf in leaves {
            keep.extend(self.path_of(leaf)?.0);
        }
        if keep.is_empty() {
            return Ok(Taxonomy::empty(&self.nodes[self.root.0].name, self.depth));
        }
        let remap: HashMap<NodeId, usize> = keep.iter().enumerate().map(|(i, &old)| (old, i)).collect();
        let specs = keep
            .iter()
            .map(|&old| {
                let n = &self.nodes[old.0];
                NodeSpec {
                    id: remap[&old],
                    parent: n.parent.map(|p| remap[&p]),
                    level: n.level,
                    count: if n.is_leaf() { Some(n.instance_count) } else { None },
                    name: n.name.clone(),
                }
            })
            .collect();
        Self::from_specs(specs)
    }

    /// Union of two taxonomies, matching nodes by name path. Nodes of `self`
    /// keep their ids; nodes only in `other` are appended with fresh ids, so
    /// every existing child list only grows at its end.
    pub fn merge(&self, other: &Taxonomy) -> Result<Self> {
        let root_name = &self.nodes[self.root.0].name;
        let other_root = &other.nodes[other.root.0].name;
        if root_name != other_root {
            return Err(Error::NamePathConflict(format!("roots differ: {root_name:?} vs {other_root:?}")));
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        if self.is_empty() {
            if self.depth != other.depth {
                return Err(Error::DepthMismatch(self.depth, other.depth));
            }
            return Ok(other.clone());
        }
        if self.depth != other.depth {
            return Err(Error::DepthMismatch(self.depth, other.depth));
        }

        let mut merged = self.clone();
        let mut index: HashMap<Vec<String>, NodeId> =
            merged.nodes.iter().map(|n| (merged.name_path(n.id), n.id)).collect();
        let mut order: Vec<&TaxonNode> = other.nodes.iter().collect();
        order.sort_by_key(|n| (n.level, n.id));
        for n in order {
            let path = other.name_path(n.id);
            if let Some(&existing) = index.get(&path) {
                let e = &merged.nodes[existing.0];
                if e.level != n.level {
                    return Err(Error::NamePathConflict(path.join("/")));
                }
                continue;
            }
            let parent_path = &path[..path.len() - 1];
            let parent = index[parent_path];
            if merged.nodes[parent.0].level + 1 != n.level {
                return Err(Error::NamePathConflict(path.join("/")));
            }
            let id = NodeId(merged.nodes.len());
            merged.nodes.push(TaxonNode {
                id,
                name: n.name.clone(),
                level: n.level,
                parent: Some(parent),
                children: Vec::new(),
                instance_count: if n.level == other.depth { n.instance_count } else { 0 },
            });
            merged.nodes[parent.0].children.push(id);
            index.insert(path, id);
        }
        let counts: BTreeMap<NodeId, u64> =
            merged.leaves().into_iter().map(|l| (l, merged.nodes[l.0].instance_count)).collect();
        merged.set_leaf_counts(&counts);
        merged.check_shape()?;
        Ok(merged)
    }

    /// Names from the root down to `id`.
    pub fn name_path(&self, id: NodeId) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = Some(id);
        while let Some(n) = cur {
            out.push(self.nodes[n.0].name.clone());
            cur = self.nodes[n.0].parent;
        }
        out.reverse();
        out
    }

    pub fn find_by_name_path<S: AsRef<str>>(&self, path: &[S]) -> Option<NodeId> {
        let (first, rest) = path.split_first()?;
        let mut cur = self.root;
        if self.nodes[cur.0].name != first.as_ref() {
            return None;
        }
        for name in rest {
            cur = *self.nodes[cur.0].children.iter().find(|c| self.nodes[c.0].name == name.as_ref())?;
        }
        Some(cur)
    }

    /// Translates a node of `from` into `self` by name path.
    pub fn translate(&self, from: &Taxonomy, id: NodeId) -> Result<NodeId> {
        let path = from.name_path(id);
        self.find_by_name_path(&path).ok_or_else(|| Error::LabelNotInTaxonomy(path.join("/")))
    }

    pub fn ancestor_at(&self, id: NodeId, level: usize) -> Result<NodeId> {
        let mut cur = self.node(id)?;
        if level > cur.level {
            return Err(Error::InvalidParameter(format!("node {} sits above level {}", id, level)));
        }
        while cur.level > level {
            cur = &self.nodes[cur.parent.expect("non-root").0];
        }
        Ok(cur.id)
    }

    /// Replaces leaf instance counts and re-aggregates internal nodes bottom-up.
    /// Leaves missing from `counts` get zero.
    pub fn set_leaf_counts(&mut self, counts: &BTreeMap<NodeId, u64>) {
        for n in &mut self.nodes {
            n.instance_count = 0;
        }
        let mut by_level: Vec<usize> = (0..self.nodes.len()).collect();
        by_level.sort_by_key(|&i| std::cmp::Reverse(self.nodes[i].level));
        for i in by_level {
            let own = if self.nodes[i].is_leaf() { counts.get(&NodeId(i)).copied().unwrap_or(0) } else { 0 };
            let total = own + self.nodes[i].children.iter().map(|c| self.nodes[c.0].instance_count).sum::<u64>();
            self.nodes[i].instance_count = total;
        }
    }

    pub fn with_leaf_counts(&self, counts: &BTreeMap<NodeId, u64>) -> Self {
        let mut t = self.clone();
        t.set_leaf_counts(counts);
        t
    }

    /// Root directly above every leaf (depth 1). Leaf `i` of the result
    /// (id `i + 1`) stands for `self.leaves()[i]` and is named by its full name path.
    pub fn flatten(&self) -> Self {
        let leaves = self.leaves();
        let mut nodes = vec![TaxonNode {
            id: NodeId(0),
            name: self.nodes[self.root.0].name.clone(),
            level: 0,
            parent: None,
            children: (1..=leaves.len()).map(NodeId).collect(),
            instance_count: self.nodes[self.root.0].instance_count,
        }];
        for (i, &leaf) in leaves.iter().enumerate() {
            nodes.push(TaxonNode {
                id: NodeId(i + 1),
                name: self.name_path(leaf)[1..].join("/"),
                level: 1,
                parent: Some(NodeId(0)),
                children: Vec::new(),
                instance_count: self.nodes[leaf.0].instance_count,
            });
        }
        Taxonomy { nodes, depth: 1, root: NodeId(0) }
    }

    /// SHA-256 over the name-path structure (ids, parents, names; not counts).
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("depth={}\n", self.depth));
        for n in &self.nodes {
            let parent = n.parent.map_or(-1i64, |p| p.0 as i64);
            hasher.update(format!("{}\t{}\t{}\n", n.id, parent, self.name_path(n.id).join("\u{1f}")));
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses a taxonomy document.
pub fn load_taxonomy(document: &str) -> Result<Taxonomy> {
    Taxonomy::parse(document)
}

/// Complete tree with the given fan-out per level (`fanout[j]` children for
/// each level-`j` node). Names are `n<level>_<index>`; leaves carry `leaf_count`.
pub fn balanced(fanout: &[usize], leaf_count: u64) -> Taxonomy {
    let mut specs = vec![NodeSpec { id: 0, parent: None, level: 0, count: None, name: "root".into() }];
    let mut frontier = vec![0usize];
    for (level, &f) in fanout.iter().enumerate() {
        let mut next = Vec::new();
        for &p in &frontier {
            for _ in 0..f {
                let id = specs.len();
                let leaf = level + 1 == fanout.len();
                specs.push(NodeSpec {
                    id,
                    parent: Some(p),
                    level: level + 1,
                    count: leaf.then_some(leaf_count),
                    name: format!("n{}_{}", level + 1, id),
                });
                next.push(id);
            }
        }
        frontier = next;
    }
    Taxonomy::from_specs(specs).expect("balanced tree is valid")
}
