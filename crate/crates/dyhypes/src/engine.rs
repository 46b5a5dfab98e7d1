//! The three-phase transformation: subtree leap, inter-group transformation,
//! intra-group transformation, with the timestamp rules and round/message
//! accounting.
//!
//! Every phase computes a permutation of coordinates inside the communicants'
//! smallest common subtree, applies it, and lets the state table reconcile
//! group partitions and the pair registry from the ids nodes carry. K
//! timestamps follow a node's shell relative to the transformation anchor;
//! T timestamps advance only when enough fresh nodes have entered a subtree
//! (rule T1), and both communicants stamp their size-2 subtree at the end
//! (rule T3).

use crate::coord::{
    lca_level, tree_distance, tree_distance_coords, Coord, NetworkState, NodeId, SubtreeRef,
};
use crate::error::{Error, Result};
use crate::state::{StateTable, INF};
use crate::workset::{ceil_log2, ws_number, CommGraph};
use rand::Rng;
use serde::Serialize;
use std::collections::{HashMap, HashSet};

/// Which transformation phase produced a plan. `Swap` is the single-server
/// algorithm's per-level exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Leap,
    Inter,
    Intra,
    Swap,
}

/// One phase's applied permutation plus its accounted cost. The scope and
/// anchor let the audit synthesize a concrete round-by-round schedule.
#[derive(Debug, Clone, Serialize)]
pub struct TransformPlan {
    pub phase: Phase,
    /// (node, old coordinate, new coordinate)
    pub moves: Vec<(NodeId, Coord, Coord)>,
    pub rounds: u64,
    pub messages: u64,
    pub scope_level: u8,
    pub anchor: Coord,
}

impl TransformPlan {
    fn empty(phase: Phase, anchor: Coord) -> Self {
        TransformPlan { phase, moves: Vec::new(), rounds: 0, messages: 0, scope_level: 0, anchor }
    }

    pub fn is_noop(&self) -> bool {
        self.moves.is_empty() && self.messages == 0
    }
}

/// Post-placement report of one intra-group transformation, used by the
/// K-order property checks: for every repositioned node, the shell it landed
/// in (relative to the stayer) and the K value it carries there.
#[derive(Debug, Clone, Default)]
pub struct IntraReport {
    pub alpha: u8,
    pub placed: Vec<(u8, u64)>,
}

/// Everything a served request produced.
#[derive(Debug, Clone)]
pub struct RequestOutcome {
    pub t: u64,
    pub u: NodeId,
    pub v: NodeId,
    pub hops: u32,
    pub rounds: u64,
    pub messages: u64,
    pub ws: u64,
    pub log_ws: u32,
    pub invariant_ok: bool,
    pub plans: Vec<TransformPlan>,
    pub intra: Option<IntraReport>,
}

/// Which per-request audits to run while serving.
#[derive(Debug, Clone, Copy, Default)]
pub struct ServeOptions {
    /// Run the full structural audit (contiguity, shared values, Invariant I)
    /// after the request instead of only the cheap bijection check.
    pub deep_checks: bool,
    /// Additionally audit bijection and group structure after every phase.
    pub phase_checks: bool,
}

/// Level of the smallest common subtree of u and v: N - tree distance.
pub fn alpha(net: &NetworkState, u: NodeId, v: NodeId) -> Result<u8> {
    let td = tree_distance(net, u, v)?;
    Ok(net.dim() - td as u8)
}

/// Highest level e such that x's group at level e is not a strict subset of
/// any of x's groups at levels below e.
fn g_level(states: &StateTable, x: NodeId) -> u8 {
    let dim = states.dim();
    let mut best = 0u8;
    for e in 0..dim {
        let ge = (states.var(x, e).gstart, states.var(x, e).gend);
        let strict_subset = (0..e).any(|c| {
            let gc = (states.var(x, c).gstart, states.var(x, c).gend);
            gc != ge && gc.0 <= ge.0 && ge.1 <= gc.1
        });
        if !strict_subset {
            best = e;
        }
    }
    best
}

/// Exact L-th largest of `values`, with the round/message cost of the
/// distributed approximate selection over a dummy-padded power-of-two tree:
/// ceil(log2 n) rounds and one message per (padded) participant.
pub fn approx_lth_largest(values: &[u64], l: usize) -> Result<(u64, u64, u64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    assert!(l >= 1 && l <= values.len(), "selection rank out of range");
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let rounds = ceil_log2(values.len() as u64) as u64;
    let padded = 1u64 << ceil_log2(values.len() as u64);
    Ok((sorted[l - 1], rounds, padded))
}

/// Shell index of coordinate `c` relative to anchor coordinate `a`:
/// the d such that c lies in ~s^a_d, or N for the anchor itself.
fn shell(dim: u8, a: Coord, c: Coord) -> u8 {
    if a == c {
        dim
    } else {
        lca_level(dim, a, c) + 1
    }
}

/// Apply a permutation and shift K timestamps for nodes whose shell relative
/// to the anchor changed (rule T2, applied in both directions; storage is
/// capped at level N-1 so the leaf-level sentinel stays infinite).
fn apply_permutation(
    net: &mut NetworkState,
    states: &mut StateTable,
    anchor: NodeId,
    targets: &[(NodeId, Coord)],
) -> Vec<(NodeId, Coord, Coord)> {
    let dim = net.dim();
    let anchor_old = net.coord_of(anchor);
    let mut moves = Vec::new();
    for &(node, target) in targets {
        let old = net.coord_of(node);
        if old != target {
            moves.push((node, old, target));
        }
    }
    let applied: Vec<(NodeId, Coord)> = moves.iter().map(|&(n, _, tgt)| (n, tgt)).collect();
    net.apply_moves(&applied);
    let anchor_new = net.coord_of(anchor);
    for &(node, old, new) in &moves {
        if node == anchor {
            continue;
        }
        let src = shell(dim, anchor_old, old).min(dim - 1);
        let dst = shell(dim, anchor_new, new).min(dim - 1);
        if src != dst {
            let k_val = states.var(node, src).k;
            states.var_mut(node, src).k = 0;
            states.var_mut(node, dst).k = k_val;
        }
    }
    moves
}

/// Subtree leap: when the communicants' common subtree sits below every
/// registered relative pair on both sides, v's subtree at the lowest such
/// pair level swaps with u's complementary subtree, making the two sides
/// complements of each other. No-op when the precondition fails or the
/// subtrees already complement.
pub fn subtree_leap(
    net: &mut NetworkState,
    states: &mut StateTable,
    u: NodeId,
    v: NodeId,
) -> Result<TransformPlan> {
    let dim = net.dim();
    let a = alpha(net, u, v)?;
    let plan_anchor = net.coord_of(u);
    let l_u = states.lowest_pair_level(net, u);
    let l_v = states.lowest_pair_level(net, v);
    let m = l_u.min(l_v);
    if a >= m {
        return Ok(TransformPlan::empty(Phase::Leap, plan_anchor));
    }
    let sv = SubtreeRef::containing(dim, m, net.coord_of(v));
    let target = SubtreeRef::containing(dim, m, net.coord_of(u)).sibling();
    if sv == target {
        return Ok(TransformPlan::empty(Phase::Leap, plan_anchor));
    }
    let (sv_lo, _) = sv.range(dim);
    let (tg_lo, _) = target.range(dim);
    let block = sv.len(dim) as Coord;
    let mut targets = Vec::with_capacity(2 * block as usize);
    for off in 0..block {
        targets.push((net.node_at(sv_lo + off), tg_lo + off));
        targets.push((net.node_at(tg_lo + off), sv_lo + off));
    }
    let moves = apply_permutation(net, states, u, &targets);
    let report = states.reconcile(net);
    let sim_rounds = (dim - a) as u64;
    let rounds = sim_rounds + 1 + u64::from(report.registry_events > 0);
    let messages = (1u64 << (dim - a)) + moves.len() as u64 + report.registry_messages;
    Ok(TransformPlan {
        phase: Phase::Leap,
        moves,
        rounds,
        messages,
        scope_level: a,
        anchor: net.coord_of(u),
    })
}

/// Capture of one communicant's per-level ids and timestamps before a
/// transformation.
struct Stack {
    id: Vec<u64>,
    t: Vec<u64>,
    k: Vec<u64>,
    counter: Vec<u64>,
    next_t: Vec<u64>,
}

fn capture_stack(states: &StateTable, x: NodeId) -> Stack {
    let dim = states.dim();
    let mut s = Stack {
        id: Vec::with_capacity(dim as usize + 1),
        t: Vec::with_capacity(dim as usize + 1),
        k: Vec::with_capacity(dim as usize + 1),
        counter: Vec::with_capacity(dim as usize + 1),
        next_t: Vec::with_capacity(dim as usize + 1),
    };
    for level in 0..=dim {
        let v = states.var(x, level);
        s.id.push(v.group);
        s.t.push(v.t);
        s.k.push(v.k);
        s.counter.push(v.counter);
        s.next_t.push(v.next_t);
    }
    s
}

/// Absorb the submissive members into the dominant side's groups: at every
/// level up to `alpha` where the two sides' ids differ, the given nodes adopt
/// the dominant stack's id and timestamps. Adopting (rather than inventing
/// ids) keeps the per-level partitions laminar and leaves the host group's
/// own values untouched.
fn absorb_into_host(
    states: &mut StateTable,
    members: &[NodeId],
    alpha: u8,
    host: &Stack,
    guest: &Stack,
) {
    for &x in members {
        for e in 0..=alpha {
            let ei = e as usize;
            if host.id[ei] == guest.id[ei] {
                continue;
            }
            let v = states.var_mut(x, e);
            v.group = host.id[ei];
            v.t = host.t[ei];
            v.counter = host.counter[ei];
            v.next_t = host.next_t[ei];
            if e >= 1 {
                states.var_mut(x, e - 1).k = host.k[ei - 1];
            }
        }
    }
}

/// Inter-group transformation at the common level: the submissive group
/// moves next to the dominant one and they merge. A registered pair on the
/// dominant side either rejoins its partner across the boundary (when the
/// submissive group covers it) or is shielded by a randomly chosen filler
/// region that is displaced instead.
pub fn inter_group_transform<R: Rng>(
    net: &mut NetworkState,
    states: &mut StateTable,
    u: NodeId,
    v: NodeId,
    rng: &mut R,
) -> Result<TransformPlan> {
    let dim = net.dim();
    let a = alpha(net, u, v)?;
    let anchor_coord = net.coord_of(u);
    let gu = states.var(u, a).group;
    let gv = states.var(v, a).group;
    if gu == gv {
        return Ok(TransformPlan::empty(Phase::Inter, anchor_coord));
    }
    if g_level(states, u) <= a && g_level(states, v) <= a {
        states.counters.g_condition_misses += 1;
    }
    let ru = (states.var(u, a).gstart, states.var(u, a).gend);
    let rv = (states.var(v, a).gstart, states.var(v, a).gend);
    let (size_u, size_v) = (ru.1 - ru.0 + 1, rv.1 - rv.0 + 1);
    let (p_comm, q_comm, rd, rs) =
        if size_u >= size_v { (u, v, ru, rv) } else { (v, u, rv, ru) };
    let host_stack = capture_stack(states, p_comm);
    let guest_stack = capture_stack(states, q_comm);

    let w = SubtreeRef::containing(dim, a, net.coord_of(u));
    let (w_lo, w_hi) = w.range(dim);
    let half = 1u32 << (dim - a - 1);
    let mid = w_lo + half;

    // Already adjacent: merge ids without movement.
    if rd.1 + 1 == rs.0 || rs.1 + 1 == rd.0 {
        let guests: Vec<NodeId> = (rs.0..=rs.1).map(|c| net.node_at(c)).collect();
        absorb_into_host(states, &guests, a, &host_stack, &guest_stack);
        let report = states.reconcile(net);
        let range = (rd.0.min(rs.0), rd.1.max(rs.1));
        return Ok(TransformPlan {
            phase: Phase::Inter,
            moves: Vec::new(),
            rounds: 1 + u64::from(report.registry_events > 0),
            messages: (range.1 - range.0 + 1) as u64 + report.registry_messages,
            scope_level: a,
            anchor: net.coord_of(p_comm),
        });
    }

    let hp_is_zero = net.coord_of(p_comm) < mid;
    let contained =
        |inner: (Coord, Coord), outer: (Coord, Coord)| outer.0 <= inner.0 && inner.1 <= outer.1;

    // Pair fragments at this level, skipped when they already sit inside one
    // of the merging groups (they ride along and reconcile afterwards).
    let pair = states.pair_at(a, w_lo).copied();
    let mut c_p: Option<(Coord, Coord)> = None;
    let mut c_q: Option<(Coord, Coord)> = None;
    if let Some(entry) = pair {
        for frag in [entry.frag0, entry.frag1] {
            if contained(frag, rd) || contained(frag, rs) {
                continue;
            }
            if (frag.0 < mid) == hp_is_zero {
                c_p = Some(frag);
            } else {
                c_q = Some(frag);
            }
        }
    }

    let d_nodes: Vec<NodeId> = (rd.0..=rd.1).map(|c| net.node_at(c)).collect();
    let s_nodes: Vec<NodeId> = (rs.0..=rs.1).map(|c| net.node_at(c)).collect();
    let cp_coords: Vec<Coord> = c_p.map(|r| (r.0..=r.1).collect()).unwrap_or_default();
    let cq_coords: Vec<Coord> = c_q.map(|r| (r.0..=r.1).collect()).unwrap_or_default();

    let (hp_lo, hp_hi) = if hp_is_zero { (w_lo, mid - 1) } else { (mid, w_hi) };
    let in_range = |c: Coord, r: (Coord, Coord)| c >= r.0 && c <= r.1;
    let is_participant = |c: Coord| {
        in_range(c, rd)
            || in_range(c, rs)
            || c_p.map_or(false, |r| in_range(c, r))
            || c_q.map_or(false, |r| in_range(c, r))
    };
    let (hq_lo, hq_hi) = if hp_is_zero { (mid, w_hi) } else { (w_lo, mid - 1) };
    let others_p: Vec<Coord> = (hp_lo..=hp_hi).filter(|&c| !is_participant(c)).collect();
    let others_q: Vec<Coord> = (hq_lo..=hq_hi).filter(|&c| !is_participant(c)).collect();

    let m_len = (d_nodes.len() + s_nodes.len()) as u32;
    let q_keep = m_len.saturating_sub(half);
    let p_part = m_len - q_keep;
    let d_in_p = (rd.0..=rd.1).filter(|&c| c >= hp_lo && c <= hp_hi).count() as u32;
    let s_in_p = (rs.0..=rs.1).filter(|&c| c >= hp_lo && c <= hp_hi).count() as u32;
    let enter = (p_part - d_in_p - s_in_p) as usize;
    let fig5 = !cp_coords.is_empty() && s_nodes.len() < cp_coords.len();

    // Choose which non-participants leave the dominant half to make room.
    let inner_first = |coords: &mut Vec<Coord>| {
        if hp_is_zero {
            coords.sort_unstable_by(|x, y| y.cmp(x));
        } else {
            coords.sort_unstable();
        }
    };
    let mut exiled_others: Vec<Coord> = Vec::new();
    let mut exiled_cp: Vec<Coord> = Vec::new();
    let mut need = enter;
    if need > 0 {
        if fig5 {
            // Random contiguous filler region avoiding the dominant group and
            // the registered fragment.
            let loose_set: HashSet<Coord> = others_p.iter().copied().collect();
            let starts: Vec<Coord> = others_p
                .iter()
                .copied()
                .filter(|&s| {
                    s + need as Coord - 1 <= hp_hi
                        && (s..s + need as Coord).all(|c| loose_set.contains(&c))
                })
                .collect();
            if !starts.is_empty() {
                let start = starts[rng.gen_range(0..starts.len())];
                exiled_others.extend(start..start + need as Coord);
                need = 0;
            } else {
                // Fallback: loose nodes nearest the dominant block.
                let mut by_dist = others_p.clone();
                by_dist.sort_unstable_by_key(|&c| {
                    (c as i64 - rd.0 as i64).abs().min((c as i64 - rd.1 as i64).abs())
                });
                exiled_others.extend(by_dist.into_iter().take(need));
                need -= exiled_others.len().min(need);
            }
        } else {
            let mut cp_inner = cp_coords.clone();
            inner_first(&mut cp_inner);
            exiled_cp.extend(cp_inner.into_iter().take(need));
            need -= exiled_cp.len();
            if need > 0 {
                let mut others_inner = others_p.clone();
                inner_first(&mut others_inner);
                exiled_others.extend(others_inner.into_iter().take(need));
                need -= exiled_others.len().min(need);
            }
        }
        if need > 0 {
            // Loose space exhausted: the fragment itself is cut into.
            let mut cp_rest: Vec<Coord> =
                cp_coords.iter().copied().filter(|c| !exiled_cp.contains(c)).collect();
            inner_first(&mut cp_rest);
            exiled_cp.extend(cp_rest.into_iter().take(need));
        }
    }
    let exiled_set: HashSet<Coord> =
        exiled_others.iter().chain(exiled_cp.iter()).copied().collect();

    // Target sequence for the whole subtree. Sizes balance so the merged
    // block lands with its overflow just across the mid, and an exiled
    // fragment lands adjacent to its partner.
    let kept_others_p: Vec<Coord> =
        others_p.iter().copied().filter(|c| !exiled_set.contains(c)).collect();
    let kept_cp: Vec<Coord> =
        cp_coords.iter().copied().filter(|c| !exiled_set.contains(c)).collect();
    let mut exiled_sorted_others = exiled_others.clone();
    exiled_sorted_others.sort_unstable();
    let mut exiled_sorted_cp = exiled_cp.clone();
    exiled_sorted_cp.sort_unstable();

    let mut layout: Vec<NodeId> = Vec::with_capacity((w_hi - w_lo + 1) as usize);
    {
        let push_coords = |layout: &mut Vec<NodeId>, coords: &[Coord]| {
            layout.extend(coords.iter().map(|&c| net.node_at(c)));
        };
        if hp_is_zero {
            push_coords(&mut layout, &kept_others_p);
            push_coords(&mut layout, &kept_cp);
            layout.extend(d_nodes.iter().copied());
            layout.extend(s_nodes.iter().copied());
            push_coords(&mut layout, &exiled_sorted_others);
            push_coords(&mut layout, &exiled_sorted_cp);
            push_coords(&mut layout, &cq_coords);
            push_coords(&mut layout, &others_q);
        } else {
            push_coords(&mut layout, &others_q);
            push_coords(&mut layout, &cq_coords);
            push_coords(&mut layout, &exiled_sorted_cp);
            push_coords(&mut layout, &exiled_sorted_others);
            layout.extend(s_nodes.iter().copied());
            layout.extend(d_nodes.iter().copied());
            push_coords(&mut layout, &kept_cp);
            push_coords(&mut layout, &kept_others_p);
        }
    }
    debug_assert_eq!(layout.len() as u32, w_hi - w_lo + 1);

    let targets: Vec<(NodeId, Coord)> =
        layout.iter().enumerate().map(|(i, &node)| (node, w_lo + i as Coord)).collect();
    let moves = apply_permutation(net, states, p_comm, &targets);

    // The merged block must be contiguous at its new position.
    if cfg!(debug_assertions) {
        let mut new_lo = Coord::MAX;
        let mut new_hi = 0;
        for &x in d_nodes.iter().chain(s_nodes.iter()) {
            let c = net.coord_of(x);
            new_lo = new_lo.min(c);
            new_hi = new_hi.max(c);
        }
        debug_assert_eq!(new_hi - new_lo + 1, m_len);
    }
    absorb_into_host(states, &s_nodes, a, &host_stack, &guest_stack);
    let report = states.reconcile(net);

    let sim_rounds = (dim - a) as u64;
    let rounds = sim_rounds + 1 + u64::from(report.registry_events > 0);
    let messages = (1u64 << (dim - a)) + moves.len() as u64 + report.registry_messages;
    Ok(TransformPlan {
        phase: Phase::Inter,
        moves,
        rounds,
        messages,
        scope_level: a,
        anchor: net.coord_of(p_comm),
    })
}

/// Selection for one region during the intra-group transformation.
struct ShellSelection {
    region: SubtreeRef,
    members: Vec<NodeId>,
    /// Whether a contiguous footprint must be carved at the region's inner
    /// edge (false when the whole region was taken or members stay put).
    carve: bool,
}

/// Close a candidate set over whole groups at `unit_level` and over
/// registered pairs with both fragments inside the region.
fn close_selection(
    states: &StateTable,
    net: &NetworkState,
    region: (Coord, Coord),
    unit_level: u8,
    selected: &mut Vec<Coord>,
) {
    let mut changed = true;
    while changed {
        changed = false;
        let mut set: HashSet<Coord> = selected.iter().copied().collect();
        let snapshot: Vec<Coord> = selected.clone();
        for c in snapshot {
            let node = net.node_at(c);
            let v = states.var(node, unit_level);
            for cc in v.gstart..=v.gend {
                if cc >= region.0 && cc <= region.1 && set.insert(cc) {
                    selected.push(cc);
                    changed = true;
                }
            }
        }
        for (_, entry) in states.pairs() {
            let f0_in = entry.frag0.0 >= region.0 && entry.frag0.1 <= region.1;
            let f1_in = entry.frag1.0 >= region.0 && entry.frag1.1 <= region.1;
            if !(f0_in && f1_in) {
                continue;
            }
            let f0_sel = (entry.frag0.0..=entry.frag0.1).any(|c| set.contains(&c));
            let f1_sel = (entry.frag1.0..=entry.frag1.1).any(|c| set.contains(&c));
            if f0_sel || f1_sel {
                for r in [entry.frag0, entry.frag1] {
                    for cc in r.0..=r.1 {
                        if set.insert(cc) {
                            selected.push(cc);
                            changed = true;
                        }
                    }
                }
            }
        }
    }
    selected.sort_unstable();
    selected.dedup();
}

/// Pick the repositioning set for one shell: everything when the count
/// covers the region, otherwise all relative-pair fragments inside it plus a
/// random contiguous filler closed over whole groups.
fn select_in_region<R: Rng>(
    states: &StateTable,
    net: &NetworkState,
    region: SubtreeRef,
    unit_level: u8,
    count: u64,
    rng: &mut R,
) -> (Vec<Coord>, bool) {
    let dim = net.dim();
    let (lo, hi) = region.range(dim);
    let region_size = (hi - lo + 1) as u64;
    if count >= region_size {
        return ((lo..=hi).collect(), true);
    }
    let mut selected: Vec<Coord> = Vec::new();
    // Fragments of pairs at levels below the region level whose range lies
    // inside the region.
    for (&(d, _), entry) in states.pairs() {
        if d >= region.level {
            continue;
        }
        for frag in [entry.frag0, entry.frag1] {
            if frag.0 >= lo && frag.1 <= hi {
                selected.extend(frag.0..=frag.1);
            }
        }
    }
    close_selection(states, net, (lo, hi), unit_level, &mut selected);
    let have = selected.len() as u64;
    if have < count {
        let need = (count - have) as Coord;
        let set: HashSet<Coord> = selected.iter().copied().collect();
        let loose: Vec<Coord> = (lo..=hi).filter(|c| !set.contains(c)).collect();
        if !loose.is_empty() {
            let start = loose[rng.gen_range(0..loose.len())];
            let run_end = (start.saturating_add(need - 1)).min(hi);
            selected.extend((start..=run_end).filter(|c| !set.contains(c)));
            close_selection(states, net, (lo, hi), unit_level, &mut selected);
        }
    }
    (selected, false)
}

/// Intra-group transformation: reposition timestamp-selected nodes from the
/// stayer's complementary subtrees plus the mover's group, ranked by K so
/// the mover lands in the stayer's size-2 subtree. Applies timestamp rules
/// T1 and T2.
pub fn intra_group_transform<R: Rng>(
    net: &mut NetworkState,
    states: &mut StateTable,
    u: NodeId,
    v: NodeId,
    rng: &mut R,
) -> Result<(TransformPlan, IntraReport)> {
    let dim = net.dim();
    let td = tree_distance(net, u, v)?;
    let anchor_coord = net.coord_of(u);
    if td == 1 {
        return Ok((TransformPlan::empty(Phase::Intra, anchor_coord), IntraReport::default()));
    }
    let a = dim - td as u8;

    // Dominance by level-(alpha+1) group size; ties to u's side.
    let ru = (states.var(u, a + 1).gstart, states.var(u, a + 1).gend);
    let rv = (states.var(v, a + 1).gstart, states.var(v, a + 1).gend);
    let (p, q) = if ru.1 - ru.0 >= rv.1 - rv.0 { (u, v) } else { (v, u) };

    let sp = capture_stack(states, p);
    let sq = capture_stack(states, q);
    let p_coord = net.coord_of(p);

    // Counts: submissive-group members with K at the common level at least
    // the stayer's T at each level; the mover itself counts as infinite.
    let q_group = (states.var(q, a + 1).gstart, states.var(q, a + 1).gend);
    let mut count_p = vec![0u64; dim as usize + 1];
    for c in q_group.0..=q_group.1 {
        let x = net.node_at(c);
        let k = if x == q { INF } else { states.var(x, a).k };
        for i in (a + 1)..=(dim - 1) {
            if k >= sp.t[i as usize] {
                count_p[i as usize] += 1;
            }
        }
    }

    // Selection per shell.
    let mut selections: Vec<ShellSelection> = Vec::new();
    for i in (a + 1)..=(dim - 1) {
        let t_above = sp.t[i as usize + 1];
        let t_here = sp.t[i as usize];
        if t_above > 0 {
            let region = SubtreeRef::containing(dim, i + 1, p_coord).sibling();
            let unit_level = (i + 1).min(dim - 1);
            let (coords, whole) =
                select_in_region(states, net, region, unit_level, count_p[i as usize], rng);
            if !coords.is_empty() {
                selections.push(ShellSelection {
                    region,
                    members: coords.iter().map(|&c| net.node_at(c)).collect(),
                    carve: !whole,
                });
            }
        } else if t_here > 0 {
            // Only reachable if T monotonicity were broken upstream: select
            // from the level-i subtree minus the stayer's level-(i+1) group,
            // repositioned in place.
            let region = SubtreeRef::containing(dim, i, p_coord);
            let (lo, hi) = region.range(dim);
            let own = (states.var(p, i + 1).gstart, states.var(p, i + 1).gend);
            let candidates: Vec<Coord> =
                (lo..=hi).filter(|&c| c < own.0 || c > own.1).collect();
            let avail = candidates.len() as u64;
            let mut selected: Vec<Coord> = if count_p[i as usize] >= avail {
                candidates
            } else {
                let mut sel: Vec<Coord> = Vec::new();
                for (&(d, _), entry) in states.pairs() {
                    if d >= i {
                        continue;
                    }
                    for frag in [entry.frag0, entry.frag1] {
                        if frag.0 >= lo && frag.1 <= hi && candidates.contains(&frag.0) {
                            sel.extend(frag.0..=frag.1);
                        }
                    }
                }
                let have = sel.len() as u64;
                if have < count_p[i as usize] {
                    let taken: HashSet<Coord> = sel.iter().copied().collect();
                    let loose: Vec<Coord> =
                        candidates.iter().copied().filter(|c| !taken.contains(c)).collect();
                    if !loose.is_empty() {
                        let start_idx = rng.gen_range(0..loose.len());
                        let need = (count_p[i as usize] - have) as usize;
                        sel.extend(loose.into_iter().skip(start_idx).take(need));
                    }
                }
                sel
            };
            selected.sort_unstable();
            selected.dedup();
            if !selected.is_empty() {
                selections.push(ShellSelection {
                    region,
                    members: selected.iter().map(|&c| net.node_at(c)).collect(),
                    carve: false,
                });
            }
        }
    }

    // The mover's whole level-(alpha+1) group repositions.
    let q_members: Vec<NodeId> = (q_group.0..=q_group.1).map(|c| net.node_at(c)).collect();

    // Capture pair bonds as node ids before anything moves; registry ranges
    // go stale the moment the relayout is applied.
    let pre_member_set: HashSet<NodeId> = selections
        .iter()
        .flat_map(|s| s.members.iter().copied())
        .chain(q_members.iter().copied())
        .collect();
    let pair_bonds: Vec<(NodeId, NodeId)> = states
        .pairs()
        .iter()
        .filter_map(|(_, entry)| {
            let f0: Vec<NodeId> =
                (entry.frag0.0..=entry.frag0.1).map(|c| net.node_at(c)).collect();
            let f1: Vec<NodeId> =
                (entry.frag1.0..=entry.frag1.1).map(|c| net.node_at(c)).collect();
            if f0.iter().all(|x| pre_member_set.contains(x))
                && f1.iter().all(|x| pre_member_set.contains(x))
            {
                Some((f0[0], f1[0]))
            } else {
                None
            }
        })
        .collect();

    // Carve contiguous footprints at each shell's inner edge (the side
    // adjacent to the stayer's own subtree) and pack non-members outward.
    let mut relayout_targets: Vec<(NodeId, Coord)> = Vec::new();
    let mut footprints: Vec<Coord> = Vec::new();
    for sel in &selections {
        if !sel.carve {
            footprints.extend(sel.members.iter().map(|&x| net.coord_of(x)));
            continue;
        }
        let (lo, hi) = sel.region.range(dim);
        let region_is_left = hi < p_coord;
        let member_set: HashSet<NodeId> = sel.members.iter().copied().collect();
        let mut members = sel.members.clone();
        members.sort_unstable_by_key(|&x| net.coord_of(x));
        let non_members: Vec<NodeId> =
            (lo..=hi).map(|c| net.node_at(c)).filter(|x| !member_set.contains(x)).collect();
        let seq: Vec<NodeId> = if region_is_left {
            // Inner edge is the high end.
            non_members.iter().chain(members.iter()).copied().collect()
        } else {
            members.iter().chain(non_members.iter()).copied().collect()
        };
        for (i, &x) in seq.iter().enumerate() {
            relayout_targets.push((x, lo + i as Coord));
        }
        if region_is_left {
            footprints.extend(hi + 1 - members.len() as Coord..=hi);
        } else {
            footprints.extend(lo..lo + members.len() as Coord);
        }
    }
    footprints.extend(q_group.0..=q_group.1);
    apply_permutation(net, states, p, &relayout_targets);

    // Keys: K at the level of each node's smallest common subtree with the
    // nearest communicant, read in the intermediate network.
    let all_members: Vec<NodeId> = selections
        .iter()
        .flat_map(|s| s.members.iter().copied())
        .chain(q_members.iter().copied())
        .collect();
    let q_coord_now = net.coord_of(q);
    let p_coord_now = net.coord_of(p);
    let keys: HashMap<NodeId, u64> = all_members
        .iter()
        .map(|&x| {
            let c = net.coord_of(x);
            let dp =
                if c == p_coord_now { 0 } else { tree_distance_coords(dim, p_coord_now, c) };
            let dq =
                if c == q_coord_now { 0 } else { tree_distance_coords(dim, q_coord_now, c) };
            let j = (dim as u32 - dp.min(dq)) as u8;
            (x, states.var(x, j.min(dim)).k)
        })
        .collect();

    // Units: whole groups at their region level, bonded through registered
    // pairs wholly inside the repositioned set; members of one unit receive
    // consecutive ranks.
    let mut index_of: HashMap<NodeId, usize> = HashMap::new();
    for (i, &x) in all_members.iter().enumerate() {
        index_of.insert(x, i);
    }
    let mut parent: Vec<usize> = (0..all_members.len()).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let r = find(parent, parent[x]);
            parent[x] = r;
            r
        } else {
            x
        }
    }
    fn union(parent: &mut Vec<usize>, x: usize, y: usize) {
        let (rx, ry) = (find(parent, x), find(parent, y));
        if rx != ry {
            parent[rx.max(ry)] = rx.min(ry);
        }
    }
    for sel in &selections {
        let level = sel.region.level.clamp(a + 1, dim - 1);
        for w in sel.members.windows(2) {
            if states.var(w[0], level).group == states.var(w[1], level).group {
                union(&mut parent, index_of[&w[0]], index_of[&w[1]]);
            }
        }
    }
    for w in q_members.windows(2) {
        union(&mut parent, index_of[&w[0]], index_of[&w[1]]);
    }
    for (x, y) in pair_bonds {
        union(&mut parent, index_of[&x], index_of[&y]);
    }
    let mut unit_map: HashMap<usize, Vec<NodeId>> = HashMap::new();
    for (i, &x) in all_members.iter().enumerate() {
        unit_map.entry(find(&mut parent, i)).or_default().push(x);
    }
    let mut units: Vec<Vec<NodeId>> = unit_map.into_values().collect();
    for unit in &mut units {
        unit.sort_by(|&x, &y| {
            u64::from(x != q)
                .cmp(&u64::from(y != q))
                .then(keys[&y].cmp(&keys[&x]))
                .then(net.coord_of(x).cmp(&net.coord_of(y)))
        });
    }
    units.sort_by(|ua, ub| {
        let ka = ua.iter().map(|x| keys[x]).max().unwrap_or(0);
        let kb = ub.iter().map(|x| keys[x]).max().unwrap_or(0);
        kb.cmp(&ka).then_with(|| {
            let ca = ua.iter().map(|&x| net.coord_of(x)).min().unwrap();
            let cb = ub.iter().map(|&x| net.coord_of(x)).min().unwrap();
            ca.cmp(&cb)
        })
    });

    // Slots ordered by tree distance from the stayer, ties by coordinate
    // (the rank order); units fill them in sequence.
    footprints.sort_unstable();
    footprints.dedup();
    footprints.sort_by_key(|&c| (tree_distance_coords(dim, p_coord_now, c), c));
    debug_assert_eq!(footprints.len(), all_members.len());
    let mut assign_targets: Vec<(NodeId, Coord)> = Vec::new();
    let mut slot_iter = footprints.iter();
    for unit in &units {
        for &x in unit {
            let &slot = slot_iter.next().expect("one slot per repositioned node");
            assign_targets.push((x, slot));
        }
    }
    let mut moves = apply_permutation(net, states, p, &assign_targets);
    let report = states.reconcile(net);

    // T1: bucket the repositioned nodes by the sorted T-list of both
    // communicants; where a bucket straddles a subtree boundary, compute the
    // selection timestamp and advance T on a tripped counter.
    let mut t_list: Vec<u64> = Vec::new();
    for i in (a + 1)..=dim {
        t_list.push(sp.t[i as usize]);
        t_list.push(sq.t[i as usize]);
    }
    t_list.sort_unstable_by(|x, y| y.cmp(x));
    let mut buckets: HashMap<usize, Vec<NodeId>> = HashMap::new();
    for &x in &all_members {
        if let Some(b) = t_list.iter().position(|&t| keys[&x] >= t) {
            buckets.entry(b).or_default().push(x);
        }
    }
    let mut bucket_ids: Vec<usize> = buckets.keys().copied().collect();
    bucket_ids.sort_unstable();
    let p_coord_final = net.coord_of(p);
    let mut sel_rounds = 0u64;
    let mut sel_messages = 0u64;
    for d in ((a + 1)..=(dim - 1)).rev() {
        let sub = SubtreeRef::containing(dim, d, p_coord_final);
        let outer = SubtreeRef::containing(dim, d - 1, p_coord_final);
        for &b in &bucket_ids {
            let members = &buckets[&b];
            let k_cnt = members
                .iter()
                .filter(|&&x| sub.contains(dim, net.coord_of(x)))
                .count() as u64;
            let straddles = k_cnt > 0
                && members.iter().any(|&x| {
                    let c = net.coord_of(x);
                    outer.contains(dim, c) && !sub.contains(dim, c)
                });
            if !straddles {
                continue;
            }
            let bucket_keys: Vec<u64> = members.iter().map(|x| keys[x]).collect();
            let pow = 1u64 << ceil_log2(bucket_keys.len() as u64);
            let l_raw = (k_cnt.div_ceil(dim as u64) + 1) * pow / dim as u64;
            let l = l_raw.clamp(1, bucket_keys.len() as u64) as usize;
            let (next_t, r, m) = approx_lth_largest(&bucket_keys, l)?;
            sel_rounds = sel_rounds.max(r);
            sel_messages += m;
            let (lo, hi) = sub.range(dim);
            let threshold = 1u64 << (dim - d - 1);
            // Walk whole level-d groups so shared T stays shared: the trip
            // uses the group's most advanced counter and the monotonicity
            // clamp uses the group's lowest T one level finer.
            let mut c = lo;
            while c <= hi {
                let first = net.node_at(c);
                let (gs, ge) = (states.var(first, d).gstart, states.var(first, d).gend);
                let mut counter_max = 0u64;
                let mut t_above_min = u64::MAX;
                for cc in gs..=ge {
                    let node = net.node_at(cc);
                    counter_max = counter_max.max(states.var(node, d).counter);
                    t_above_min = t_above_min.min(states.var(node, d + 1).t);
                }
                let tripped = counter_max + k_cnt >= threshold;
                let new_t = next_t.min(t_above_min);
                if tripped && new_t < next_t {
                    states.counters.t_clamps += 1;
                }
                let counter_new = (counter_max + k_cnt) % threshold;
                for cc in gs..=ge {
                    let lv = states.var_mut(net.node_at(cc), d);
                    lv.next_t = next_t;
                    if tripped {
                        lv.t = new_t;
                    }
                    lv.counter = counter_new;
                }
                c = ge + 1;
            }
        }
    }

    // T1 may have lowered a fine level's T below an older coarse value;
    // settle the chain before anyone reads it.
    states.normalize_group_values(net);

    // K-order report from the final placement.
    let mut placed = Vec::with_capacity(all_members.len());
    for &x in &all_members {
        let s = shell(dim, p_coord_final, net.coord_of(x));
        placed.push((s, states.var(x, s.min(dim - 1)).k));
    }

    moves.sort_unstable_by_key(|&(n, _, _)| n);
    let sim_rounds = (dim - a) as u64;
    let rounds = 2 * sim_rounds + sel_rounds + 1 + u64::from(report.registry_events > 0);
    let messages =
        (1u64 << (dim - a)) + moves.len() as u64 + sel_messages + report.registry_messages;
    Ok((
        TransformPlan {
            phase: Phase::Intra,
            moves,
            rounds,
            messages,
            scope_level: a,
            anchor: p_coord_final,
        },
        IntraReport { alpha: a, placed },
    ))
}

/// Serve one communication request: route, transform in up to three phases,
/// stamp the communicants (rule T3), and bond them as a size-2 group.
#[allow(clippy::too_many_arguments)]
pub fn serve_request<R: Rng>(
    net: &mut NetworkState,
    states: &mut StateTable,
    graph: &mut CommGraph,
    rng: &mut R,
    t: u64,
    u: NodeId,
    v: NodeId,
    opts: ServeOptions,
) -> Result<RequestOutcome> {
    if u == v {
        return Err(Error::SameNode);
    }
    let dim = net.dim();
    let hops = (net.coord_of(u) ^ net.coord_of(v)).count_ones();
    let a0 = alpha(net, u, v)?;
    let wsq = ws_number(graph, net, t, u, v)?;
    let log_ws = ceil_log2(wsq.number);
    graph.record(t, u, v)?;

    let l_u = states.lowest_pair_level(net, u);
    let l_v = states.lowest_pair_level(net, v);
    let beta = l_u.min(l_v).min(a0 + 1);

    let mut plans = Vec::with_capacity(3);
    let mut intra_report = None;
    let mut phases_ok = true;
    let mut phase_audit = |net: &NetworkState, states: &StateTable, ok: &mut bool| {
        if opts.phase_checks {
            let problems = states.check_consistency(net);
            if !problems.is_empty() {
                eprintln!("PHASE-AUDIT t={t} u={u} v={v}: {problems:?}");
            }
            *ok &= net.is_bijection() && problems.is_empty();
        }
    };

    plans.push(subtree_leap(net, states, u, v)?);
    phase_audit(net, states, &mut phases_ok);
    plans.push(inter_group_transform(net, states, u, v, rng)?);
    phase_audit(net, states, &mut phases_ok);
    if tree_distance(net, u, v)? > 1 {
        let (plan, report) = intra_group_transform(net, states, u, v, rng)?;
        plans.push(plan);
        intra_report = Some(report);
        phase_audit(net, states, &mut phases_ok);
    }

    let post_td = tree_distance(net, u, v)?;
    assert_eq!(post_td, 1, "self-adjustment postcondition");

    // Bond: at every level where the communicants' groups still differ, v's
    // group joins u's (they are adjacent, so the union is contiguous).
    let host = capture_stack(states, u);
    let mut bonded = false;
    for e in 0..dim {
        let gv = states.var(v, e);
        if gv.group == host.id[e as usize] {
            continue;
        }
        let (gs, ge) = (gv.gstart, gv.gend);
        for c in gs..=ge {
            let x = net.node_at(c);
            let lv = states.var_mut(x, e);
            lv.group = host.id[e as usize];
            lv.t = host.t[e as usize];
            lv.counter = host.counter[e as usize];
            lv.next_t = host.next_t[e as usize];
            if e >= 1 {
                states.var_mut(x, e - 1).k = host.k[e as usize - 1];
            }
        }
        bonded = true;
    }
    if bonded {
        states.reconcile(net);
    }
    // T3: both communicants stamp their size-2 subtree with the request time.
    for x in [u, v] {
        let lv = states.var_mut(x, dim - 1);
        lv.t = t;
        lv.k = t;
    }

    let did_work = plans.iter().any(|p| !p.is_noop());
    let bc_rounds = if did_work { (dim - beta) as u64 + 2 * (dim - a0) as u64 } else { 0 };
    let bc_messages = if did_work {
        if beta <= a0 {
            1u64 << (dim - beta)
        } else {
            1u64 << (dim - a0)
        }
    } else {
        0
    };
    let rounds = bc_rounds + plans.iter().map(|p| p.rounds).sum::<u64>();
    let messages = bc_messages + plans.iter().map(|p| p.messages).sum::<u64>();

    let invariant_ok = phases_ok
        && if opts.deep_checks {
            net.is_bijection()
                && states.invariant_i_check(net).is_empty()
                && states.check_consistency(net).is_empty()
        } else {
            net.is_bijection()
        };

    Ok(RequestOutcome {
        t,
        u,
        v,
        hops,
        rounds,
        messages,
        ws: wsq.number,
        log_ws,
        invariant_ok,
        plans,
        intra: intra_report,
    })
}
