//! Coordinate arithmetic and the binary-tree view of an N-dimensional hypercube.
//!
//! An N-bit coordinate doubles as a leaf index in a full binary tree of height
//! N: bit 1 (the most significant of the N bits) decides the split of the root
//! into the 0- and 1-subnetwork, bit i decides the split at tree level i-1.
//! A level-d subtree is the aligned block of 2^(N-d) coordinates sharing a
//! d-bit prefix.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A node identifier. Node ids are stable for the lifetime of a run; the
/// coordinate a node sits at changes as the network transforms.
pub type NodeId = u32;

/// An N-bit hypercube coordinate (also: position on the line of leaves).
pub type Coord = u32;

/// Reference to a level-d subtree: all coordinates sharing the first `level`
/// bits given by `prefix`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtreeRef {
    pub level: u8,
    pub prefix: Coord,
}

impl SubtreeRef {
    /// The subtree containing `coord` at `level`.
    pub fn containing(dim: u8, level: u8, coord: Coord) -> Self {
        debug_assert!(level <= dim);
        SubtreeRef { level, prefix: coord >> (dim - level) as u32 }
    }

    /// First coordinate of the block.
    pub fn start(&self, dim: u8) -> Coord {
        self.prefix << (dim - self.level) as u32
    }

    /// Number of leaves in the block: 2^(N-d).
    pub fn len(&self, dim: u8) -> usize {
        1usize << (dim - self.level)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Inclusive coordinate range covered by the block.
    pub fn range(&self, dim: u8) -> (Coord, Coord) {
        let s = self.start(dim);
        (s, s + (self.len(dim) as Coord - 1))
    }

    pub fn contains(&self, dim: u8, coord: Coord) -> bool {
        coord >> (dim - self.level) as u32 == self.prefix
    }

    /// The sibling block under the same level-(d-1) parent, i.e. the level-d
    /// complementary subtree of any coordinate inside `self`.
    pub fn sibling(&self) -> SubtreeRef {
        debug_assert!(self.level >= 1);
        SubtreeRef { level: self.level, prefix: self.prefix ^ 1 }
    }
}

/// The placement bijection node-id <-> coordinate plus the fixed dimension N.
///
/// This is the single mutable object transformations rewrite.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkState {
    dim: u8,
    coord_of: Vec<Coord>,
    node_at: Vec<NodeId>,
}

impl NetworkState {
    /// Identity placement: node i sits at coordinate i.
    pub fn new(dim: u8) -> Self {
        assert!((1..=30).contains(&dim), "dimension out of range");
        let n = 1usize << dim;
        NetworkState {
            dim,
            coord_of: (0..n as Coord).collect(),
            node_at: (0..n as NodeId).collect(),
        }
    }

    pub fn dim(&self) -> u8 {
        self.dim
    }

    /// Total number of nodes, 2^N.
    pub fn len(&self) -> usize {
        self.node_at.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coord_of(&self, node: NodeId) -> Coord {
        self.coord_of[node as usize]
    }

    pub fn node_at(&self, coord: Coord) -> NodeId {
        self.node_at[coord as usize]
    }

    /// Exchange the occupants of two coordinates.
    pub fn swap_coords(&mut self, a: Coord, b: Coord) {
        if a == b {
            return;
        }
        let na = self.node_at[a as usize];
        let nb = self.node_at[b as usize];
        self.node_at[a as usize] = nb;
        self.node_at[b as usize] = na;
        self.coord_of[na as usize] = b;
        self.coord_of[nb as usize] = a;
    }

    /// Apply a partial permutation given as (node, new coordinate) pairs.
    /// The set of vacated coordinates must equal the set of filled ones;
    /// this is checked in debug builds and by the bijection audit in tests.
    pub fn apply_moves(&mut self, moves: &[(NodeId, Coord)]) {
        for &(node, target) in moves {
            self.coord_of[node as usize] = target;
        }
        for &(node, target) in moves {
            self.node_at[target as usize] = node;
        }
        debug_assert!(self.is_bijection());
    }

    /// True iff every coordinate is occupied by exactly one node.
    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.len()];
        for &c in &self.coord_of {
            let i = c as usize;
            if i >= self.len() || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        (0..self.len()).all(|c| self.coord_of[self.node_at[c] as usize] as usize == c)
    }

    fn check_node(&self, node: NodeId) -> Result<()> {
        if (node as usize) < self.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(node, self.len()))
        }
    }
}

/// Number of differing bits; equals the shortest-path hop count between the
/// nodes placed at `a` and `b`.
pub fn hamming_distance(dim_a: u8, a: Coord, dim_b: u8, b: Coord) -> Result<u32> {
    if dim_a != dim_b {
        return Err(Error::DimensionMismatch(dim_a, dim_b));
    }
    Ok((a ^ b).count_ones())
}

/// Length of the longest common coordinate prefix of `a` and `b` over N bits.
pub fn lca_level(dim: u8, a: Coord, b: Coord) -> u8 {
    let x = a ^ b;
    if x == 0 {
        dim
    } else {
        // Highest differing bit, counted from the most significant of the N.
        (dim as u32 - 1 - (31 - x.leading_zeros())) as u8
    }
}

/// Tree distance N - L_lca(u, v). Undefined for u == v in the model.
pub fn tree_distance(net: &NetworkState, u: NodeId, v: NodeId) -> Result<u32> {
    if u == v {
        return Err(Error::SameNode);
    }
    net.check_node(u)?;
    net.check_node(v)?;
    let l = lca_level(net.dim(), net.coord_of(u), net.coord_of(v));
    Ok(net.dim() as u32 - l as u32)
}

/// Tree distance between two raw coordinates (must differ).
pub fn tree_distance_coords(dim: u8, a: Coord, b: Coord) -> u32 {
    debug_assert_ne!(a, b);
    dim as u32 - lca_level(dim, a, b) as u32
}

/// Standard bit-fixing route from u to v: differing bits are fixed in
/// ascending bit index (bit 1 = most significant). Returns the full list of
/// visited coordinates, source and destination included.
pub fn route(net: &NetworkState, u: NodeId, v: NodeId) -> Result<Vec<Coord>> {
    if u == v {
        return Err(Error::SameNode);
    }
    net.check_node(u)?;
    net.check_node(v)?;
    let (src, dst) = (net.coord_of(u), net.coord_of(v));
    let mut path = Vec::with_capacity((src ^ dst).count_ones() as usize + 1);
    let mut cur = src;
    path.push(cur);
    for i in 1..=net.dim() {
        let mask = 1u32 << (net.dim() - i) as u32;
        if (cur ^ dst) & mask != 0 {
            cur ^= mask;
            path.push(cur);
        }
    }
    Ok(path)
}

/// The set of node ids currently placed inside the subtree.
pub fn subtree_members(net: &NetworkState, s: SubtreeRef) -> Vec<NodeId> {
    let (lo, hi) = s.range(net.dim());
    (lo..=hi).map(|c| net.node_at(c)).collect()
}

/// Sum of binomial coefficients C(N, 1) + ... + C(N, k): the number of nodes
/// within hop distance k of any fixed node. Sanity oracle for the
/// lower-bound construction.
pub fn count_within_distance(dim: u32, k: u32) -> u64 {
    assert!(k <= dim);
    let mut total = 0u64;
    let mut binom = 1u64; // C(dim, 0)
    for i in 1..=k as u64 {
        binom = binom * (dim as u64 - i + 1) / i;
        total += binom;
    }
    total
}
