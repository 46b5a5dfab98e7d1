//! Per-node, per-level algorithm state: group membership, timestamps,
//! counters, relative-group ranges, plus the Invariant I checker.
//!
//! Groups at level d partition every level-d subtree into contiguous
//! coordinate blocks. A d-relative pair is a level-(d+1) group that was split
//! across the two halves of a level-d subtree; the registry holds at most one
//! such pair per subtree (Invariant I), and every node of the subtree carries
//! the pair's ranges in its relative-range variables.

use crate::coord::{Coord, NetworkState, NodeId, SubtreeRef};
use crate::error::{Error, Result};
use crate::workset::ceil_log2;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};

/// Timestamp infinity sentinel (initial value at the leaf level).
pub const INF: u64 = u64::MAX;

/// State a node keeps for one level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelVars {
    /// Group id G^x_d. Meaningful for d < N.
    pub group: u64,
    /// T-timestamp T^x_d.
    pub t: u64,
    /// K-timestamp K^x_d.
    pub k: u64,
    /// Counter C^x_d.
    pub counter: u64,
    /// Next-T-timestamp nextT^x_d.
    pub next_t: u64,
    /// Group range start S^x_d (a coordinate).
    pub gstart: Coord,
    /// Group range end E^x_d.
    pub gend: Coord,
    /// Range of the d-relative fragment in this node's own half s^x_{d+1}.
    pub rel_own: Option<(Coord, Coord)>,
    /// Range of the partner fragment in the complementary half ~s^x_{d+1}.
    pub rel_other: Option<(Coord, Coord)>,
}

/// One registered d-relative pair: two level-(d+1) groups split across the
/// halves of a level-d subtree. `frag0` lies in the 0-half (lower
/// coordinates), `frag1` in the 1-half.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairEntry {
    pub frag0: (Coord, Coord),
    pub frag1: (Coord, Coord),
    pub id0: u64,
    pub id1: u64,
}

/// A violation reported by the Invariant I checker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub level: u8,
    pub prefix: Coord,
    pub group_ids: Vec<u64>,
}

/// Contiguous view of one node's group at one level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupView {
    pub level: u8,
    pub start: Coord,
    pub end: Coord,
    /// Range of the registered relative partner group, when this group is a
    /// fragment of a pair.
    pub relative: Option<(Coord, Coord)>,
}

impl GroupView {
    pub fn len(&self) -> u64 {
        (self.end - self.start + 1) as u64
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Relative distance of a k-relative group with n nodes: k - ceil(log2 n).
pub fn relative_distance(level: u32, n: u64) -> i64 {
    assert!(n >= 1);
    level as i64 - ceil_log2(n) as i64
}

/// Bookkeeping counters exposed for diagnostics and tests.
#[derive(Debug, Clone, Copy, Default, Serialize, serde::Deserialize)]
pub struct StateCounters {
    /// Groups torn into non-sibling or >2 pieces (no pair registered).
    pub tears: u64,
    /// Pair registrations.
    pub registrations: u64,
    /// Registry entries dissolved (conflict, wandering fragments, lost ids).
    pub dissolutions: u64,
    /// Fragments re-merged after landing adjacent in one subtree.
    pub fusions: u64,
    /// T1 updates where the monotonicity clamp actually lowered nextT.
    pub t_clamps: u64,
    /// Inter-group transformations whose g()-condition was false.
    pub g_condition_misses: u64,
}

/// The full per-node, per-level state table plus the canonical pair registry.
#[derive(Debug, Clone)]
pub struct StateTable {
    dim: u8,
    /// (node * (dim + 1) + level) -> vars; level dim holds the T/K sentinels.
    vars: Vec<LevelVars>,
    /// (level d, prefix of the level-d subtree) -> registered pair.
    pairs: BTreeMap<(u8, Coord), PairEntry>,
    next_group_id: u64,
    /// (node, level) cells currently carrying relative-range values.
    rel_written: Vec<(NodeId, u8)>,
    pub counters: StateCounters,
}

/// Outcome of one reconciliation pass, used for cost accounting.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReconcileReport {
    pub registry_events: u64,
    /// Sum of subtree sizes touched by registry broadcasts.
    pub registry_messages: u64,
}

impl StateTable {
    /// Initial state: every node is a singleton group at every level with its
    /// own id; T and K are 0 below the leaf level and infinity at it.
    pub fn new(net: &NetworkState) -> Self {
        let dim = net.dim();
        let n = net.len();
        let mut vars = Vec::with_capacity(n * (dim as usize + 1));
        for node in 0..n as NodeId {
            let coord = net.coord_of(node);
            for level in 0..=dim {
                let leaf = level == dim;
                vars.push(LevelVars {
                    group: node as u64,
                    t: if leaf { INF } else { 0 },
                    k: if leaf { INF } else { 0 },
                    counter: 0,
                    next_t: 0,
                    gstart: coord,
                    gend: coord,
                    rel_own: None,
                    rel_other: None,
                });
            }
        }
        StateTable {
            dim,
            vars,
            pairs: BTreeMap::new(),
            next_group_id: n as u64,
            rel_written: Vec::new(),
            counters: StateCounters::default(),
        }
    }

    pub fn dim(&self) -> u8 {
        self.dim
    }

    fn idx(&self, node: NodeId, level: u8) -> usize {
        node as usize * (self.dim as usize + 1) + level as usize
    }

    pub fn var(&self, node: NodeId, level: u8) -> &LevelVars {
        &self.vars[self.idx(node, level)]
    }

    pub fn var_mut(&mut self, node: NodeId, level: u8) -> &mut LevelVars {
        let i = self.idx(node, level);
        &mut self.vars[i]
    }

    pub fn fresh_group_id(&mut self) -> u64 {
        let id = self.next_group_id;
        self.next_group_id += 1;
        id
    }

    pub fn pairs(&self) -> &BTreeMap<(u8, Coord), PairEntry> {
        &self.pairs
    }

    /// Lowest level d such that a d-relative pair is registered in s^x_d;
    /// the dimension N when none exists.
    pub fn lowest_pair_level(&self, net: &NetworkState, x: NodeId) -> u8 {
        let coord = net.coord_of(x);
        for d in 0..self.dim {
            let prefix = coord >> (self.dim - d) as u32;
            if self.pairs.contains_key(&(d, prefix)) {
                return d;
            }
        }
        self.dim
    }

    /// The registered pair of the level-d subtree containing `coord`, if any.
    pub fn pair_at(&self, level: u8, coord: Coord) -> Option<&PairEntry> {
        let prefix = coord >> (self.dim - level) as u32;
        self.pairs.get(&(level, prefix))
    }

    // ------------------------------------------------------------------
    // Reconciliation: recompute group partitions from carried ids after a
    // permutation, register/dissolve pairs, refresh denormalized fields.
    // ------------------------------------------------------------------

    /// Rebuild every level's group partition from the ids nodes carry.
    ///
    /// A group whose members landed in exactly two runs inside sibling
    /// subtrees becomes a registered pair at the parent level; any other
    /// multi-run outcome is a tear (largest run keeps the id, the rest get
    /// fresh ids). Pairs that moved wholesale are re-keyed; fragments of an
    /// existing pair that land adjacent inside one subtree are re-merged and
    /// the entry cleared. Fusion changes the partition, so the pass iterates
    /// to a fixpoint.
    pub fn reconcile(&mut self, net: &NetworkState) -> ReconcileReport {
        let mut report = ReconcileReport::default();
        loop {
            let fused = self.reconcile_once(net, &mut report);
            if !fused {
                break;
            }
        }
        self.normalize_group_values(net);
        self.refresh_rel_fields(net);
        report
    }

    /// Settle shared group values. Every group's T becomes the minimum its
    /// members can support (shared within the group and never above any
    /// member's T one level finer, cascading fine to coarse), and members of
    /// a level-(e+1) group agree on K at level e (per-node shell shifts can
    /// leave stragglers behind, so the group settles on the minimum).
    /// Also used directly after timestamp updates that can lower a finer
    /// level's T below an already-settled coarser one.
    pub(crate) fn normalize_group_values(&mut self, net: &NetworkState) {
        let dim = self.dim;
        let n = net.len() as Coord;
        for level in (0..dim).rev() {
            let mut c = 0u32;
            while c < n {
                let node = net.node_at(c);
                let (gs, ge) = (self.var(node, level).gstart, self.var(node, level).gend);
                let mut t_min = u64::MAX;
                let mut k_min = u64::MAX;
                for cc in gs..=ge {
                    let m = net.node_at(cc);
                    t_min = t_min.min(self.var(m, level).t).min(self.var(m, level + 1).t);
                    if level >= 1 {
                        k_min = k_min.min(self.var(m, level - 1).k);
                    }
                }
                for cc in gs..=ge {
                    let m = net.node_at(cc);
                    self.var_mut(m, level).t = t_min;
                    if level >= 1 {
                        self.var_mut(m, level - 1).k = k_min;
                    }
                }
                c = ge + 1;
            }
        }
    }

    fn reconcile_once(&mut self, net: &NetworkState, report: &mut ReconcileReport) -> bool {
        let n = net.len();
        let dim = self.dim;

        // Per-level scan: runs of equal ids within subtree blocks.
        // run = (id, start, end)
        let mut runs_per_level: Vec<Vec<(u64, Coord, Coord)>> = Vec::with_capacity(dim as usize);
        for d in 0..dim {
            let block = 1usize << (dim - d);
            let mut runs: Vec<(u64, Coord, Coord)> = Vec::new();
            for c in 0..n as Coord {
                let id = self.var(net.node_at(c), d).group;
                let boundary = (c as usize) % block == 0;
                match runs.last_mut() {
                    Some(last) if !boundary && last.0 == id && last.2 + 1 == c => last.2 = c,
                    _ => runs.push((id, c, c)),
                }
            }
            runs_per_level.push(runs);
        }

        // Split handling + fresh ids, level by level.
        let mut split_events: Vec<(u8, Vec<(u64, Coord, Coord)>)> = Vec::new();
        for d in 0..dim {
            let runs = &mut runs_per_level[d as usize];
            let mut order: Vec<usize> = (0..runs.len()).collect();
            order.sort_unstable_by_key(|&i| (runs[i].0, runs[i].1));
            let mut i = 0;
            while i < order.len() {
                let mut j = i + 1;
                while j < order.len() && runs[order[j]].0 == runs[order[i]].0 {
                    j += 1;
                }
                if j - i > 1 {
                    let run_idxs = &order[i..j];
                    // Keeper: largest run, ties to the leftmost.
                    let keeper = *run_idxs
                        .iter()
                        .max_by_key(|&&k| {
                            ((runs[k].2 - runs[k].1) as u64, std::cmp::Reverse(runs[k].1))
                        })
                        .unwrap();
                    let mut pieces = Vec::with_capacity(j - i);
                    for &k in run_idxs {
                        if k != keeper {
                            runs[k].0 = self.next_group_id;
                            self.next_group_id += 1;
                        }
                        pieces.push(runs[k]);
                    }
                    split_events.push((d, pieces));
                }
                i = j;
            }
        }

        // Write back group ids and ranges for every node at every level.
        for d in 0..dim {
            for &(id, start, end) in &runs_per_level[d as usize] {
                for c in start..=end {
                    let node = net.node_at(c);
                    let v = self.var_mut(node, d);
                    v.group = id;
                    v.gstart = start;
                    v.gend = end;
                }
            }
        }

        let mut extent: Vec<HashMap<u64, (Coord, Coord)>> = Vec::with_capacity(dim as usize);
        for d in 0..dim {
            let mut m = HashMap::new();
            for &(id, s, e) in &runs_per_level[d as usize] {
                m.insert(id, (s, e));
            }
            extent.push(m);
        }

        // Registry pass 1: revalidate, re-key, fuse or dissolve old entries.
        let mut fused_any = false;
        let mut kept: BTreeMap<(u8, Coord), PairEntry> = BTreeMap::new();
        let old_entries: Vec<((u8, Coord), PairEntry)> =
            std::mem::take(&mut self.pairs).into_iter().collect();
        for ((d, old_parent), entry) in old_entries {
            let frag_level = d + 1;
            let e0 = extent[frag_level as usize].get(&entry.id0).copied();
            let e1 = extent[frag_level as usize].get(&entry.id1).copied();
            let (f0, f1) = match (e0, e1) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    self.counters.dissolutions += 1;
                    report.registry_events += 1;
                    report.registry_messages += 1u64 << (dim - d);
                    continue;
                }
            };
            let shift = (dim - frag_level) as u32;
            let (p0, p1) = (f0.0 >> shift, f1.0 >> shift);
            let aligned = p0 == (f0.1 >> shift) && p1 == (f1.1 >> shift);
            let sibling = aligned && (p0 >> 1) == (p1 >> 1) && p0 != p1;
            if sibling {
                let new_parent = p0 >> 1;
                let (frag0, id0, frag1, id1) = if p0 & 1 == 0 {
                    (f0, entry.id0, f1, entry.id1)
                } else {
                    (f1, entry.id1, f0, entry.id0)
                };
                let candidate = PairEntry { frag0, frag1, id0, id1 };
                match kept.entry((d, new_parent)) {
                    std::collections::btree_map::Entry::Vacant(slot) => {
                        slot.insert(candidate);
                        if new_parent != old_parent {
                            report.registry_events += 1;
                            report.registry_messages += 1u64 << (dim - d);
                        }
                    }
                    std::collections::btree_map::Entry::Occupied(_) => {
                        // Two pairs claiming one subtree; keep the first,
                        // dissolve the newcomer.
                        self.counters.dissolutions += 1;
                        report.registry_events += 1;
                        report.registry_messages += 1u64 << (dim - d);
                    }
                }
                continue;
            }
            // Fragments ended adjacent inside one level-(d+1) subtree: fuse.
            let adjacent = f0.1 + 1 == f1.0 || f1.1 + 1 == f0.0;
            let combined = (f0.0.min(f1.0), f0.1.max(f1.1));
            let same_subtree = (combined.0 >> shift) == (combined.1 >> shift);
            report.registry_events += 1;
            report.registry_messages += 1u64 << (dim - d);
            if adjacent && same_subtree {
                self.fuse_fragments(net, frag_level, entry.id0, f0, entry.id1, f1);
                self.counters.fusions += 1;
                fused_any = true;
            } else {
                self.counters.dissolutions += 1;
            }
        }
        self.pairs = kept;

        // Registry pass 2: register fresh sibling splits.
        for (level, pieces) in split_events {
            if level == 0 {
                self.counters.tears += 1;
                continue;
            }
            let d = level - 1;
            let shift = (dim - level) as u32;
            let sibling_pair = pieces.len() == 2 && {
                let (a, b) = (&pieces[0], &pieces[1]);
                let (pa, pb) = (a.1 >> shift, b.1 >> shift);
                pa == (a.2 >> shift) && pb == (b.2 >> shift) && (pa >> 1) == (pb >> 1) && pa != pb
            };
            if !sibling_pair {
                self.counters.tears += 1;
                continue;
            }
            let (a, b) = (pieces[0], pieces[1]);
            let (lo, hi) = if (a.1 >> shift) & 1 == 0 { (a, b) } else { (b, a) };
            let parent = (lo.1 >> shift) >> 1;
            if self.pairs.remove(&(d, parent)).is_some() {
                // Invariant I would be violated; the older entry dissolves.
                self.counters.dissolutions += 1;
                report.registry_events += 1;
                report.registry_messages += 1u64 << (dim - d);
            }
            self.pairs.insert(
                (d, parent),
                PairEntry { frag0: (lo.1, lo.2), frag1: (hi.1, hi.2), id0: lo.0, id1: hi.0 },
            );
            self.counters.registrations += 1;
            report.registry_events += 1;
            report.registry_messages += 1u64 << (dim - d);
        }

        fused_any
    }

    /// Merge two former pair fragments that landed adjacent inside one
    /// subtree back into a single group at the fragment level. The smaller
    /// fragment's members also adopt the keeper's group chain at every
    /// coarser level, which keeps the per-level partitions laminar.
    fn fuse_fragments(
        &mut self,
        net: &NetworkState,
        level: u8,
        id0: u64,
        f0: (Coord, Coord),
        id1: u64,
        f1: (Coord, Coord),
    ) {
        let (len0, len1) = (f0.1 - f0.0 + 1, f1.1 - f1.0 + 1);
        let (keep_id, keep_range, other_range) =
            if len0 > len1 || (len0 == len1 && f0.0 < f1.0) {
                (id0, f0, f1)
            } else {
                (id1, f1, f0)
            };
        let combined = (f0.0.min(f1.0), f0.1.max(f1.1));
        // Host chain from the keeper's first member.
        let host_node = net.node_at(keep_range.0);
        let host: Vec<LevelVars> =
            (0..level).map(|e| self.var(host_node, e).clone()).collect();
        for c in other_range.0..=other_range.1 {
            let node = net.node_at(c);
            for e in 0..level {
                let hv = &host[e as usize];
                if self.var(node, e).group == hv.group {
                    continue;
                }
                let (hg, ht, hc, hn) = (hv.group, hv.t, hv.counter, hv.next_t);
                let hk = if e >= 1 { Some(self.var(host_node, e - 1).k) } else { None };
                let v = self.var_mut(node, e);
                v.group = hg;
                v.t = ht;
                v.counter = hc;
                v.next_t = hn;
                if let Some(hk) = hk {
                    self.var_mut(node, e - 1).k = hk;
                }
            }
        }
        // Fused values at the fragment level itself.
        let mut min_t = INF;
        let mut min_k = INF;
        let mut max_c = 0u64;
        let mut min_next = INF;
        for c in combined.0..=combined.1 {
            let node = net.node_at(c);
            let v = self.var(node, level);
            min_t = min_t.min(v.t);
            max_c = max_c.max(v.counter);
            min_next = min_next.min(v.next_t);
            if level > 0 {
                min_k = min_k.min(self.var(node, level - 1).k);
            }
        }
        for c in combined.0..=combined.1 {
            let node = net.node_at(c);
            let v = self.var_mut(node, level);
            v.group = keep_id;
            v.gstart = combined.0;
            v.gend = combined.1;
            v.t = min_t;
            v.counter = max_c;
            v.next_t = min_next;
            if level > 0 {
                self.var_mut(node, level - 1).k = min_k;
            }
        }
    }

    /// Rewrite the denormalized per-node relative-range variables from the
    /// registry (the per-level broadcast the distributed protocol performs).
    /// Only nodes written last time plus the current entries' subtrees are
    /// touched.
    fn refresh_rel_fields(&mut self, net: &NetworkState) {
        let dim = self.dim;
        let stale = std::mem::take(&mut self.rel_written);
        for (node, d) in stale {
            let v = self.var_mut(node, d);
            v.rel_own = None;
            v.rel_other = None;
        }
        let entries: Vec<((u8, Coord), PairEntry)> =
            self.pairs.iter().map(|(k, v)| (*k, *v)).collect();
        for ((d, parent), entry) in entries {
            let subtree = SubtreeRef { level: d, prefix: parent };
            let (lo, hi) = subtree.range(dim);
            let half = 1u32 << (dim - d - 1);
            for c in lo..=hi {
                let node = net.node_at(c);
                let own_is_zero_half = c - lo < half;
                let v = self.var_mut(node, d);
                if own_is_zero_half {
                    v.rel_own = Some(entry.frag0);
                    v.rel_other = Some(entry.frag1);
                } else {
                    v.rel_own = Some(entry.frag1);
                    v.rel_other = Some(entry.frag0);
                }
                self.rel_written.push((node, d));
            }
        }
    }

    // ------------------------------------------------------------------
    // Checkers
    // ------------------------------------------------------------------

    /// Full structural audit: bijection, contiguity, shared group values,
    /// registry consistency, relative-range duality, T monotonicity.
    /// Returns human-readable problems; empty means consistent.
    pub fn check_consistency(&self, net: &NetworkState) -> Vec<String> {
        let mut problems = Vec::new();
        let dim = self.dim;
        let n = net.len();
        if !net.is_bijection() {
            problems.push("placement is not a bijection".to_string());
            return problems;
        }
        for d in 0..dim {
            let block = 1u32 << (dim - d);
            let mut seen: HashMap<u64, (Coord, Coord)> = HashMap::new();
            let mut c = 0u32;
            while c < n as Coord {
                let node = net.node_at(c);
                let v = self.var(node, d);
                let (s, e) = (v.gstart, v.gend);
                if s > c || e < c || e < s {
                    problems.push(format!("node {node} level {d}: range ({s},{e}) excludes coord {c}"));
                    c += 1;
                    continue;
                }
                if s / block != e / block {
                    problems.push(format!("level {d} group {} crosses a subtree boundary", v.group));
                }
                if let Some(prev) = seen.insert(v.group, (s, e)) {
                    if prev != (s, e) {
                        problems.push(format!("level {d} group id {} appears with two ranges", v.group));
                    } else {
                        problems.push(format!("level {d} group id {} occupies two separate runs", v.group));
                    }
                }
                let mut min_t = u64::MAX;
                let mut max_t = 0;
                let mut min_k = u64::MAX;
                let mut max_k = 0;
                for cc in s..=e {
                    let m = net.node_at(cc);
                    let mv = self.var(m, d);
                    if mv.group != v.group || mv.gstart != s || mv.gend != e {
                        problems.push(format!(
                            "level {d} group {}: member at {cc} disagrees on id or range",
                            v.group
                        ));
                    }
                    min_t = min_t.min(mv.t);
                    max_t = max_t.max(mv.t);
                    if d > 0 {
                        let kk = self.var(m, d - 1).k;
                        min_k = min_k.min(kk);
                        max_k = max_k.max(kk);
                    }
                }
                if min_t != max_t {
                    problems.push(format!("level {d} group {}: members disagree on T", v.group));
                }
                if d > 0 && min_k != max_k {
                    problems.push(format!("level {d} group {}: members disagree on K at level {}", v.group, d - 1));
                }
                c = e + 1;
            }
        }
        // Registry entries must match the partitions.
        for (&(d, parent), entry) in &self.pairs {
            let frag_level = d + 1;
            let shift = (dim - frag_level) as u32;
            for (frag, id, want_half) in
                [(entry.frag0, entry.id0, 0u32), (entry.frag1, entry.id1, 1u32)]
            {
                let node = net.node_at(frag.0);
                let v = self.var(node, frag_level);
                if v.group != id || (v.gstart, v.gend) != frag {
                    problems.push(format!("pair at level {d} prefix {parent}: fragment mismatch"));
                }
                if (frag.0 >> shift) != ((parent << 1) | want_half) {
                    problems.push(format!("pair at level {d} prefix {parent}: fragment in wrong half"));
                }
            }
        }
        // Duality, T monotonicity, and laminar nesting of the partitions.
        for node in 0..n as NodeId {
            for d in 0..dim {
                let v = self.var(node, d);
                if v.rel_own.is_some() != v.rel_other.is_some() {
                    problems.push(format!("node {node} level {d}: relative-range duality broken"));
                }
                if self.var(node, d).t > self.var(node, d + 1).t {
                    problems.push(format!("node {node}: T at level {d} exceeds T at level {}", d + 1));
                }
                if d + 1 < dim {
                    let inner = self.var(node, d + 1);
                    if inner.gstart < v.gstart || inner.gend > v.gend {
                        problems.push(format!(
                            "node {node}: level {} group not nested in level {d} group",
                            d + 1
                        ));
                    }
                }
            }
        }
        problems
    }

    /// Invariant I: every level-d subtree holds at most one d-relative pair.
    ///
    /// Evaluated from the per-node relative-range variables, so it also
    /// catches desynchronized state. Each violation names the level, the
    /// subtree prefix, and the offending level-(d+1) group ids.
    pub fn invariant_i_check(&self, net: &NetworkState) -> Vec<Violation> {
        let dim = self.dim;
        let mut violations = Vec::new();
        for d in 0..dim.saturating_sub(1) {
            for prefix in 0..(1u32 << d) {
                let subtree = SubtreeRef { level: d, prefix };
                let (lo, hi) = subtree.range(dim);
                let half = 1u32 << (dim - d - 1);
                let mut descriptors: Vec<(Coord, Coord, Coord, Coord)> = Vec::new();
                for c in lo..=hi {
                    let node = net.node_at(c);
                    let v = self.var(node, d);
                    let (own, other) = match (v.rel_own, v.rel_other) {
                        (Some(a), Some(b)) => (a, b),
                        _ => continue,
                    };
                    let normalized = if c - lo < half {
                        (own.0, own.1, other.0, other.1)
                    } else {
                        (other.0, other.1, own.0, own.1)
                    };
                    if !descriptors.contains(&normalized) {
                        descriptors.push(normalized);
                    }
                }
                if descriptors.len() > 1 {
                    let mut ids = Vec::new();
                    for dsc in &descriptors {
                        ids.push(self.var(net.node_at(dsc.0), d + 1).group);
                        ids.push(self.var(net.node_at(dsc.2), d + 1).group);
                    }
                    ids.sort_unstable();
                    ids.dedup();
                    violations.push(Violation { level: d, prefix, group_ids: ids });
                }
            }
        }
        violations
    }
}

/// Contiguous view of node x's group at level d.
///
/// Errors with state corruption when members disagree on the range.
pub fn group_view(states: &StateTable, net: &NetworkState, x: NodeId, d: u8) -> Result<GroupView> {
    if d >= states.dim() {
        return Err(Error::InvalidConfig(format!("level {d} out of range")));
    }
    let v = states.var(x, d);
    let (start, end, id) = (v.gstart, v.gend, v.group);
    for c in start..=end {
        let m = net.node_at(c);
        let mv = states.var(m, d);
        if mv.group != id || mv.gstart != start || mv.gend != end {
            return Err(Error::StateCorruption(format!(
                "group {id} at level {d}: member at coordinate {c} disagrees"
            )));
        }
    }
    let relative = if d > 0 {
        states.pair_at(d - 1, net.coord_of(x)).and_then(|entry| {
            if entry.id0 == id {
                Some(entry.frag1)
            } else if entry.id1 == id {
                Some(entry.frag0)
            } else {
                None
            }
        })
    } else {
        None
    };
    Ok(GroupView { level: d, start, end, relative })
}

// ----------------------------------------------------------------------
// Snapshot export
// ----------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct LevelSnapshot {
    pub level: u8,
    pub group: u64,
    pub t: u64,
    pub k: u64,
    pub counter: u64,
    pub next_t: u64,
    pub gstart: Coord,
    pub gend: Coord,
    pub rel_own: Option<(Coord, Coord)>,
    pub rel_other: Option<(Coord, Coord)>,
}

#[derive(Debug, Serialize)]
pub struct NodeSnapshot {
    pub node: NodeId,
    pub coord: Coord,
    pub levels: Vec<LevelSnapshot>,
}

/// Per-node, per-level state dump consumed by the invariant checker CLI.
pub fn snapshot(states: &StateTable, net: &NetworkState) -> Vec<NodeSnapshot> {
    (0..net.len() as NodeId)
        .map(|node| NodeSnapshot {
            node,
            coord: net.coord_of(node),
            levels: (0..=states.dim())
                .map(|level| {
                    let v = states.var(node, level);
                    LevelSnapshot {
                        level,
                        group: v.group,
                        t: v.t,
                        k: v.k,
                        counter: v.counter,
                        next_t: v.next_t,
                        gstart: v.gstart,
                        gend: v.gend,
                        rel_own: v.rel_own,
                        rel_other: v.rel_other,
                    }
                })
                .collect(),
        })
        .collect()
}

pub fn snapshot_json(states: &StateTable, net: &NetworkState) -> Result<String> {
    Ok(serde_json::to_string_pretty(&snapshot(states, net))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_state_is_clean() {
        let net = NetworkState::new(4);
        let states = StateTable::new(&net);
        assert!(states.check_consistency(&net).is_empty());
        assert!(states.invariant_i_check(&net).is_empty());
        for node in 0..16 {
            assert_eq!(states.var(node, 4).t, INF);
            assert_eq!(states.var(node, 4).k, INF);
            assert_eq!(states.var(node, 2).t, 0);
        }
    }

    #[test]
    fn singleton_group_view() {
        let net = NetworkState::new(3);
        let states = StateTable::new(&net);
        let g = group_view(&states, &net, 5, 2).unwrap();
        assert_eq!((g.start, g.end), (5, 5));
        assert_eq!(g.len(), 1);
        assert_eq!(g.relative, None);
    }

    #[test]
    fn relative_distance_examples() {
        assert_eq!(relative_distance(3, 8), 0);
        assert_eq!(relative_distance(4, 2), 3);
        assert_eq!(relative_distance(5, 3), 3);
    }

    #[test]
    fn hand_built_double_pair_is_a_violation() {
        let net = NetworkState::new(3);
        let mut states = StateTable::new(&net);
        // Two distinct 0-relative pair descriptors inside the root subtree.
        for node in 0..4u32 {
            let v = states.var_mut(node, 0);
            v.rel_own = Some((0, 0));
            v.rel_other = Some((4, 4));
        }
        for node in 4..8u32 {
            let v = states.var_mut(node, 0);
            v.rel_own = Some((5, 5));
            v.rel_other = Some((1, 1));
        }
        let violations = states.invariant_i_check(&net);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].level, 0);
    }

    #[test]
    fn reconcile_registers_a_sibling_split() {
        // Build a two-node group (laminar: same group at levels 0..=2), then
        // teleport one member into the sibling subtree; reconcile must
        // register the pair.
        let mut net = NetworkState::new(3);
        let mut states = StateTable::new(&net);
        let gid = states.var(0, 2).group;
        for node in [0u32, 1u32] {
            for level in 0..3 {
                let v = states.var_mut(node, level);
                v.group = gid;
                v.gstart = 0;
                v.gend = 1;
            }
        }
        states.reconcile(&net);
        assert!(states.check_consistency(&net).is_empty());
        // Node at coordinate 1 moves to coordinate 2 (the sibling level-2
        // subtree inside the same level-1 subtree).
        net.swap_coords(1, 2);
        states.reconcile(&net);
        assert!(states.check_consistency(&net).is_empty());
        assert_eq!(states.pairs().len(), 1);
        let (&(d, prefix), entry) = states.pairs().iter().next().unwrap();
        assert_eq!(d, 1);
        assert_eq!(prefix, 0);
        assert_eq!(entry.frag0, (0, 0));
        assert_eq!(entry.frag1, (2, 2));
        assert!(states.invariant_i_check(&net).is_empty());
        // Moving it back re-merges the fragments and clears the entry.
        net.swap_coords(1, 2);
        states.reconcile(&net);
        assert!(states.pairs().is_empty());
        assert_eq!(states.counters.fusions, 1);
        assert!(states.check_consistency(&net).is_empty());
    }

    #[test]
    fn snapshot_serializes() {
        let net = NetworkState::new(2);
        let states = StateTable::new(&net);
        let text = snapshot_json(&states, &net).unwrap();
        assert!(text.contains("\"levels\""));
    }
}
