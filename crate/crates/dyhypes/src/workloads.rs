//! Request-sequence generators: uniform, repeating, skewed, and the
//! adversarial construction that substitutes far partners whenever the
//! current placement serves a pair too well.

use crate::coord::{NetworkState, NodeId};
use crate::error::{Error, Result};
use crate::workset::{ceil_log2, ws_number, CommGraph, TraceRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// m i.i.d. uniform ordered pairs with u != v, times 1..=m.
pub fn gen_uniform(n: usize, m: usize, seed: u64) -> Vec<TraceRecord> {
    assert!(n >= 2);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (1..=m as u64)
        .map(|t| {
            let u = rng.gen_range(0..n as NodeId);
            let mut v = rng.gen_range(0..n as NodeId);
            while v == u {
                v = rng.gen_range(0..n as NodeId);
            }
            TraceRecord { t, u, v }
        })
        .collect()
}

/// The pattern concatenated `repeats` times, timestamps renumbered from 1.
pub fn gen_repeating(pattern: &[(NodeId, NodeId)], repeats: usize) -> Vec<TraceRecord> {
    assert!(!pattern.is_empty());
    let mut out = Vec::with_capacity(pattern.len() * repeats);
    let mut t = 0u64;
    for _ in 0..repeats {
        for &(u, v) in pattern {
            t += 1;
            out.push(TraceRecord { t, u, v });
        }
    }
    out
}

/// Zipf sampler over ranks 1..=n with exponent s, via an explicit CDF.
#[derive(Debug, Clone)]
pub struct ZipfCdf {
    cdf: Vec<f64>,
}

impl ZipfCdf {
    pub fn new(n: usize, s: f64) -> Self {
        assert!(n >= 1 && s > 0.0);
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for rank in 1..=n {
            acc += 1.0 / (rank as f64).powf(s);
            cdf.push(acc);
        }
        let total = *cdf.last().unwrap();
        for w in &mut cdf {
            *w /= total;
        }
        ZipfCdf { cdf }
    }

    /// Probability mass of a given 1-based rank.
    pub fn mass(&self, rank: usize) -> f64 {
        let hi = self.cdf[rank - 1];
        let lo = if rank >= 2 { self.cdf[rank - 2] } else { 0.0 };
        hi - lo
    }

    /// Draw a 1-based rank.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let x: f64 = rng.gen();
        self.cdf.partition_point(|&c| c < x) + 1
    }
}

/// Skewed workload: the source is uniform; the destination's rank is drawn
/// Zipf(s) over a per-source random permutation of the other nodes.
pub fn gen_zipf(n: usize, m: usize, s: f64, seed: u64) -> Vec<TraceRecord> {
    assert!(n >= 2 && s > 0.0);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let zipf = ZipfCdf::new(n - 1, s);
    // Fixed per-source partner orderings for the whole trace.
    let partners: Vec<Vec<NodeId>> = (0..n as NodeId)
        .map(|u| {
            let mut others: Vec<NodeId> = (0..n as NodeId).filter(|&x| x != u).collect();
            let mut perm_rng =
                ChaCha12Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15u64.wrapping_mul(u as u64 + 1));
            others.shuffle(&mut perm_rng);
            others
        })
        .collect();
    (1..=m as u64)
        .map(|t| {
            let u = rng.gen_range(0..n as NodeId);
            let rank = zipf.sample(&mut rng);
            let v = partners[u as usize][rank - 1];
            TraceRecord { t, u, v }
        })
        .collect()
}

/// Adversarial working-set generator, driven inside a run: it keeps the base
/// pair only when the current placement already routes it no better than the
/// working-set bound scaled by c * loglog n, and otherwise substitutes a far
/// partner that meets the bound.
#[derive(Debug, Clone)]
pub struct AdversarialGen {
    /// The hidden constant in the substitution threshold.
    pub c_factor: f64,
    rng: ChaCha12Rng,
}

impl AdversarialGen {
    pub fn new(c_factor: f64, seed: u64) -> Self {
        AdversarialGen { c_factor, rng: ChaCha12Rng::seed_from_u64(seed) }
    }

    fn threshold(&self, dim: u8, ws: u64) -> f64 {
        let loglog = (dim as f64).log2().max(1.0);
        ceil_log2(ws) as f64 / (self.c_factor * loglog)
    }

    /// Produce the request for time `t` against the live network and graph.
    pub fn next(
        &mut self,
        net: &NetworkState,
        graph: &mut CommGraph,
        t: u64,
    ) -> Result<TraceRecord> {
        let n = net.len();
        let dim = net.dim();
        let u = self.rng.gen_range(0..n as NodeId);
        let mut v = self.rng.gen_range(0..n as NodeId);
        while v == u {
            v = self.rng.gen_range(0..n as NodeId);
        }
        let base_ws = ws_number(graph, net, t, u, v)?.number;
        let routing = (net.coord_of(u) ^ net.coord_of(v)).count_ones() as f64 - 1.0;
        if routing >= self.threshold(dim, base_ws) {
            return Ok(TraceRecord { t, u, v });
        }
        // Substitute: any partner whose routing distance meets its own
        // working-set bound qualifies.
        let mut qualifying = Vec::new();
        for cand in 0..n as NodeId {
            if cand == u {
                continue;
            }
            let ws = ws_number(graph, net, t, u, cand)?.number;
            let d = (net.coord_of(u) ^ net.coord_of(cand)).count_ones() as f64 - 1.0;
            if d >= self.threshold(dim, ws) {
                qualifying.push(cand);
            }
        }
        if qualifying.is_empty() {
            return Err(Error::NoWitness(u));
        }
        let v_far = qualifying[self.rng.gen_range(0..qualifying.len())];
        Ok(TraceRecord { t, u, v: v_far })
    }
}

/// Validity check shared by the generator tests: u != v everywhere and times
/// strictly increasing.
pub fn trace_is_valid(trace: &[TraceRecord]) -> bool {
    trace.iter().all(|r| r.u != r.v)
        && trace.windows(2).all(|w| w[0].t < w[1].t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coord::tree_distance;
    use std::collections::HashMap;

    #[test]
    fn uniform_two_nodes_is_the_single_pair() {
        let trace = gen_uniform(2, 20, 7);
        assert!(trace_is_valid(&trace));
        for r in &trace {
            assert_eq!(r.u.min(r.v), 0);
            assert_eq!(r.u.max(r.v), 1);
        }
    }

    #[test]
    fn uniform_is_deterministic_and_roughly_flat() {
        let a = gen_uniform(16, 4000, 99);
        let b = gen_uniform(16, 4000, 99);
        assert_eq!(a, b);
        let mut counts: HashMap<(NodeId, NodeId), u64> = HashMap::new();
        for r in &a {
            *counts.entry((r.u, r.v)).or_default() += 1;
        }
        // Chi-square against the uniform expectation over 16*15 ordered pairs.
        let expected = 4000.0 / 240.0;
        let chi2: f64 = (0..16)
            .flat_map(|u| (0..16).map(move |v| (u, v)))
            .filter(|&(u, v)| u != v)
            .map(|(u, v)| {
                let o = *counts.get(&(u, v)).unwrap_or(&0) as f64;
                (o - expected) * (o - expected) / expected
            })
            .sum();
        // 239 degrees of freedom; far tails only.
        assert!(chi2 < 320.0, "chi2 = {chi2}");
    }

    #[test]
    fn repeating_pattern_concatenates() {
        let trace = gen_repeating(&[(0, 1), (2, 3)], 3);
        assert_eq!(trace.len(), 6);
        assert!(trace_is_valid(&trace));
        assert_eq!((trace[4].u, trace[4].v), (0, 1));
    }

    #[test]
    fn repeating_single_pair_keeps_ws_at_two() {
        let net = NetworkState::new(3);
        let trace = gen_repeating(&[(0, 1)], 10);
        let mut graph = CommGraph::new(8);
        for r in &trace {
            let q = ws_number(&mut graph, &net, r.t, r.u, r.v).unwrap();
            if r.t > 1 {
                assert_eq!(q.number, 2);
            }
            graph.record(r.t, r.u, r.v).unwrap();
        }
    }

    #[test]
    fn zipf_top_partner_mass_matches_analytic() {
        let n = 64;
        let m = 60_000;
        let s = 1.2;
        let trace = gen_zipf(n, m, s, 5);
        assert!(trace_is_valid(&trace));
        assert_eq!(trace, gen_zipf(n, m, s, 5));
        // Frequency of each source's rank-1 partner vs the analytic mass.
        let zipf = ZipfCdf::new(n - 1, s);
        let mut top_hits = 0u64;
        let mut per_source: HashMap<NodeId, HashMap<NodeId, u64>> = HashMap::new();
        for r in &trace {
            *per_source.entry(r.u).or_default().entry(r.v).or_default() += 1;
        }
        let mut total = 0u64;
        for (_, partners) in &per_source {
            let source_total: u64 = partners.values().sum();
            let max = partners.values().max().copied().unwrap_or(0);
            top_hits += max;
            total += source_total;
        }
        let observed = top_hits as f64 / total as f64;
        let expected = zipf.mass(1);
        assert!((observed - expected).abs() < 0.05, "observed {observed} expected {expected}");
    }

    #[test]
    fn adversarial_first_substitution_picks_a_far_node() {
        let net = NetworkState::new(3);
        let mut graph = CommGraph::new(8);
        let mut gen = AdversarialGen::new(1.0, 3);
        // Fresh singleton start: every base pair already has routing distance
        // below/above threshold depending on draw, but a request always comes
        // back valid and with nonnegative routing distance.
        let rec = gen.next(&net, &mut graph, 1).unwrap();
        assert_ne!(rec.u, rec.v);
        let d = tree_distance(&net, rec.u, rec.v).unwrap();
        assert!(d >= 1);
    }
}
