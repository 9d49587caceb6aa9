//! Draft trees: static topologies, candidate selection from the parallel draft
//! distributions, and the tree attention mask used to score every candidate
//! path in one target forward.
//!
//! A topology node `(parent, depth, rank)` stands for the rank-th candidate
//! drawn for `parent` from the depth-`depth` draft distribution. Parallel
//! drafting makes those distributions independent of the path, so every node
//! at a given depth draws from the same distribution.

use std::fmt::Write as _;

use crate::dist::{Rng, TokenDistribution, TokenId};
use crate::error::{Error, Result};
use crate::model::AttentionSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopoNode {
    /// `None` for children of the root.
    pub parent: Option<usize>,
    /// 1 for children of the root.
    pub depth: usize,
    pub rank: usize,
}

/// A static tree shape, declared before decoding.
///
/// Invariants: parents precede children, `depth(child) = depth(parent) + 1`,
/// and the ranks under each parent are exactly `0..m`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TreeTopology {
    nodes: Vec<TopoNode>,
}

impl TreeTopology {
    pub fn new(nodes: Vec<TopoNode>) -> Result<Self> {
        let mut ranks: Vec<Vec<usize>> = vec![Vec::new(); nodes.len() + 1];
        for (i, node) in nodes.iter().enumerate() {
            let expected_depth = match node.parent {
                None => 1,
                Some(p) if p < i => nodes[p].depth + 1,
                Some(p) => {
                    return Err(Error::Topology(format!(
                        "node {i} lists parent {p}, which does not precede it"
                    )))
                }
            };
            if node.depth != expected_depth {
                return Err(Error::Topology(format!(
                    "node {i} has depth {}, expected {expected_depth}",
                    node.depth
                )));
            }
            let slot = node.parent.map_or(0, |p| p + 1);
            if ranks[slot].contains(&node.rank) {
                return Err(Error::Topology(format!(
                    "node {i} repeats rank {} under the same parent",
                    node.rank
                )));
            }
            ranks[slot].push(node.rank);
        }
        for (slot, r) in ranks.iter_mut().enumerate() {
            r.sort_unstable();
            if r.iter().enumerate().any(|(i, &x)| i != x) {
                return Err(Error::Topology(format!(
                    "ranks under {} are {r:?}, expected 0..{}",
                    if slot == 0 { "root".to_string() } else { format!("node {}", slot - 1) },
                    r.len()
                )));
            }
        }
        Ok(Self { nodes })
    }

    /// No nodes: every round samples one token from the target.
    pub fn empty() -> Self {
        Self::default()
    }

    /// One rank-0 node per depth.
    pub fn chain(depth: usize) -> Self {
        let nodes = (0..depth)
            .map(|d| TopoNode {
                parent: d.checked_sub(1),
                depth: d + 1,
                rank: 0,
            })
            .collect();
        Self { nodes }
    }

    /// Tree with `branching[d]` nodes at depth `d + 1`: the extra candidates
    /// hang off the rank-0 node one level up, so only the most likely path is
    /// extended.
    pub fn rank_zero_spine(branching: &[usize]) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut spine: Option<usize> = None;
        for (d, &width) in branching.iter().enumerate() {
            if width == 0 {
                break;
            }
            let first = nodes.len();
            for rank in 0..width {
                nodes.push(TopoNode {
                    parent: spine,
                    depth: d + 1,
                    rank,
                });
            }
            spine = Some(first);
        }
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[TopoNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Node count per depth, starting at depth 1.
    pub fn depth_profile(&self) -> Vec<usize> {
        let mut profile = vec![0; self.max_depth()];
        for n in &self.nodes {
            profile[n.depth - 1] += 1;
        }
        profile
    }

    /// One `parent depth rank` line per node; `parent` is `root` or a node index.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            match n.parent {
                None => {
                    let _ = writeln!(s, "root {} {}", n.depth, n.rank);
                }
                Some(p) => {
                    let _ = writeln!(s, "{p} {} {}", n.depth, n.rank);
                }
            }
        }
        s
    }

    /// Parses [`to_text`](Self::to_text) output; blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::Parse(format!(
                    "topology line {}: expected `parent depth rank`, got {raw:?}",
                    lineno + 1
                )));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("topology line {}: bad number {s:?}", lineno + 1)))
            };
            let parent = if fields[0] == "root" { None } else { Some(num(fields[0])?) };
            nodes.push(TopoNode {
                parent,
                depth: num(fields[1])?,
                rank: num(fields[2])?,
            });
        }
        Self::new(nodes)
    }
}

/// Branch counts per depth of [`default_topology`], before truncation.
pub const DEFAULT_BRANCHING: [usize; 5] = [4, 2, 2, 1, 1];

/// The fixed tree used when a configuration names none: depth profile
/// `[4, 2, 2, 1, 1]` truncated to `K + 1` levels, extra candidates attached to
/// the rank-0 spine. `K = 4` gives 10 nodes.
pub fn default_topology(k: usize) -> Result<TreeTopology> {
    if k == 0 {
        return Err(Error::InvalidInput("default topology needs K >= 1".into()));
    }
    let depth = (k + 1).min(DEFAULT_BRANCHING.len());
    TreeTopology::rank_zero_spine(&DEFAULT_BRANCHING[..depth])
}

/// How candidate tokens are chosen for the tree, which also fixes the
/// proposal distribution each candidate is verified against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CandidateMode {
    /// Children of a node are drawn one after another without replacement
    /// from their depth's draft distribution, in rank order.
    #[default]
    Sampled,
    /// Children are the top-ranked tokens of their depth's draft
    /// distribution; each is verified as a point-mass proposal.
    TopK,
}

impl std::str::FromStr for CandidateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(Self::Sampled),
            "topk" | "top-k" => Ok(Self::TopK),
            other => Err(Error::Parse(format!(
                "candidate mode {other:?}, expected `sampled` or `topk`"
            ))),
        }
    }
}

impl std::fmt::Display for CandidateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sampled => "sampled",
            Self::TopK => "topk",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftNode {
    pub token: TokenId,
    pub parent: Option<usize>,
    pub depth: usize,
    /// Position among its siblings (draw order, or rank for top-k).
    pub rank: usize,
    /// Index into [`DraftTree::dists`] of the distribution it was drawn from.
    pub source: usize,
    /// Draft probability of `token` under that distribution.
    pub draft_prob: f64,
}

/// Candidate tokens plus the draft distributions they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree {
    nodes: Vec<DraftNode>,
    children: Vec<Vec<usize>>,
    dists: Vec<TokenDistribution>,
    mode: CandidateMode,
}

impl DraftTree {
    /// Assembles a tree from nodes listed parents-first.
    pub fn from_nodes(nodes: Vec<DraftNode>, dists: Vec<TokenDistribution>, mode: CandidateMode) -> Result<Self> {
        let mut children = vec![Vec::new(); nodes.len() + 1];
        for (i, n) in nodes.iter().enumerate() {
            if let Some(p) = n.parent {
                if p >= i {
                    return Err(Error::Topology(format!("node {i} precedes its parent {p}")));
                }
            }
            if n.source >= dists.len() {
                return Err(Error::Topology(format!("node {i} names missing distribution {}", n.source)));
            }
            let slot = n.parent.map_or(0, |p| p + 1);
            if children[slot].iter().any(|&c: &usize| nodes[c].token == n.token) {
                return Err(Error::Topology(format!("node {i} duplicates a sibling token")));
            }
            children[slot].push(i);
        }
        for list in children.iter_mut() {
            list.sort_by_key(|&c| nodes[c].rank);
        }
        Ok(Self {
            nodes,
            children,
            dists,
            mode,
        })
    }

    pub fn nodes(&self) -> &[DraftNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dists(&self) -> &[TokenDistribution] {
        &self.dists
    }

    pub fn mode(&self) -> CandidateMode {
        self.mode
    }

    /// Children of `node` (`None` = root) in verification order.
    pub fn children(&self, node: Option<usize>) -> &[usize] {
        &self.children[node.map_or(0, |n| n + 1)]
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.nodes.iter().map(|n| n.token).collect()
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.parent).collect()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Tokens from the root down to and including `node`.
    pub fn path_tokens(&self, node: usize) -> Vec<TokenId> {
        let mut path = Vec::with_capacity(self.nodes[node].depth);
        let mut at = Some(node);
        while let Some(i) = at {
            path.push(self.nodes[i].token);
            at = self.nodes[i].parent;
        }
        path.reverse();
        path
    }

    /// Proposal distribution `child` was drawn from, given that its earlier
    /// siblings `excluded` were drawn (and rejected) first.
    pub fn proposal(&self, child: usize, excluded: &[TokenId]) -> Result<TokenDistribution> {
        let node = &self.nodes[child];
        let q = &self.dists[node.source];
        match self.mode {
            CandidateMode::TopK => TokenDistribution::one_hot(q.len(), node.token),
            CandidateMode::Sampled => {
                if excluded.is_empty() {
                    return Ok(q.clone());
                }
                let mut w = q.to_vec();
                for &x in excluded {
                    w[x] = 0.0;
                }
                TokenDistribution::from_weights(w)
            }
        }
    }
}

fn check_depth(dists: &[TokenDistribution], topo: &TreeTopology) -> Result<()> {
    if topo.max_depth() > dists.len() {
        return Err(Error::Topology(format!(
            "topology depth {} exceeds the {} draft distributions",
            topo.max_depth(),
            dists.len()
        )));
    }
    Ok(())
}

/// Top-k tree: each node's token is the rank-th most likely token of its
/// depth's distribution (lowest id on ties). Nodes whose rank exceeds the
/// vocabulary are dropped together with their subtrees.
pub fn build_draft_tree(dists: &[TokenDistribution], topo: &TreeTopology) -> Result<DraftTree> {
    check_depth(dists, topo)?;
    let ranked: Vec<Vec<TokenId>> = dists.iter().map(|d| d.ranked()).collect();
    let mut mapped: Vec<Option<usize>> = vec![None; topo.len()];
    let mut nodes = Vec::with_capacity(topo.len());
    for (i, n) in topo.nodes().iter().enumerate() {
        let source = n.depth - 1;
        let parent = match n.parent {
            None => None,
            Some(p) => match mapped[p] {
                Some(t) => Some(t),
                None => continue,
            },
        };
        let Some(&token) = ranked[source].get(n.rank) else {
            continue;
        };
        mapped[i] = Some(nodes.len());
        nodes.push(DraftNode {
            token,
            parent,
            depth: n.depth,
            rank: n.rank,
            source,
            draft_prob: dists[source][token],
        });
    }
    DraftTree::from_nodes(nodes, dists.to_vec(), CandidateMode::TopK)
}

/// Sampled tree: the children of every node are drawn without replacement
/// from their depth's distribution, one uniform per draw, in rank order. A
/// child that cannot be drawn because its siblings exhausted the support is
/// dropped along with its subtree.
pub fn sample_draft_tree(dists: &[TokenDistribution], topo: &TreeTopology, rng: &mut Rng) -> Result<DraftTree> {
    check_depth(dists, topo)?;
    // Topology nodes grouped by parent slot, in rank order.
    let mut by_parent: Vec<Vec<usize>> = vec![Vec::new(); topo.len() + 1];
    for (i, n) in topo.nodes().iter().enumerate() {
        by_parent[n.parent.map_or(0, |p| p + 1)].push(i);
    }
    for list in by_parent.iter_mut() {
        list.sort_by_key(|&i| topo.nodes()[i].rank);
    }
    let mut mapped: Vec<Option<usize>> = vec![None; topo.len()];
    let mut nodes: Vec<DraftNode> = Vec::with_capacity(topo.len());
    // Visit parents in topology order so tree indices stay parents-first.
    let mut pending = vec![None];
    pending.extend(topo.nodes().iter().enumerate().map(|(i, _)| Some(i)));
    for parent in pending {
        let kids = &by_parent[parent.map_or(0, |p| p + 1)];
        if kids.is_empty() {
            continue;
        }
        let parent_tree = match parent {
            None => None,
            Some(p) => match mapped[p] {
                Some(t) => Some(t),
                None => continue,
            },
        };
        let source = topo.nodes()[kids[0]].depth - 1;
        let q = &dists[source];
        let mut weights = q.to_vec();
        for &kid in kids {
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                break;
            }
            let token = draw(&weights, total, rng);
            weights[token] = 0.0;
            mapped[kid] = Some(nodes.len());
            let n = topo.nodes()[kid];
            nodes.push(DraftNode {
                token,
                parent: parent_tree,
                depth: n.depth,
                rank: n.rank,
                source,
                draft_prob: q[token],
            });
        }
    }
    // Parents were visited in topology order, but children of a later parent
    // may have been pushed before an earlier parent's subtree finished; the
    // parent index is always smaller, which is all `from_nodes` needs.
    DraftTree::from_nodes(nodes, dists.to_vec(), CandidateMode::Sampled)
}

fn draw(weights: &[f64], total: f64, rng: &mut Rng) -> TokenId {
    let u = rng.uniform() * total;
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cum += w;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

/// Flattened prefix-plus-tree layout for one target forward.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeAttention {
    /// Tree node index for each flattened slot after the prefix.
    pub order: Vec<usize>,
    pub prefix_len: usize,
    pub attn: AttentionSpec,
}

/// Attention over `prefix ‖ tree`: the prefix is causal, a node sees the whole
/// prefix plus its ancestors and itself, and sits at position
/// `prefix_len + depth - 1`.
pub fn tree_attention(tree: &DraftTree, prefix_len: usize) -> Result<TreeAttention> {
    let m = tree.len();
    let n = prefix_len + m;
    let mut mask = vec![false; n * n];
    for i in 0..prefix_len {
        for j in 0..=i {
            mask[i * n + j] = true;
        }
    }
    let block = ancestor_mask(&tree.parents());
    let mut positions: Vec<usize> = (0..prefix_len).collect();
    for (i, node) in tree.nodes().iter().enumerate() {
        let row = prefix_len + i;
        for j in 0..prefix_len {
            mask[row * n + j] = true;
        }
        for j in 0..m {
            mask[row * n + prefix_len + j] = block[i * m + j];
        }
        positions.push(prefix_len + node.depth - 1);
    }
    Ok(TreeAttention {
        order: (0..m).collect(),
        prefix_len,
        attn: AttentionSpec::new(mask, positions)?,
    })
}

/// `mask[i * m + j]` is true when `j` is `i` or one of its ancestors.
pub fn ancestor_mask(parents: &[Option<usize>]) -> Vec<bool> {
    let m = parents.len();
    let mut mask = vec![false; m * m];
    for i in 0..m {
        mask[i * m + i] = true;
        if let Some(p) = parents[i] {
            // Parents precede children, so row p is already complete.
            for j in 0..p + 1 {
                if mask[p * m + j] {
                    mask[i * m + j] = true;
                }
            }
        }
    }
    mask
}

/// Depth of each node (1 for children of the root).
pub fn depths(parents: &[Option<usize>]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(parents.len());
    for p in parents {
        let d = p.map_or(1, |p| out[p] + 1);
        out.push(d);
    }
    out
}
