//! Run driver: request loop, per-request cost accounting, invariant audits,
//! metrics aggregation, and the round-level communication audit.
//!
//! A run is fully determined by its configuration and seed. Per-request cost
//! is routing hops plus transformation rounds; the summary also carries the
//! working-set bound of the executed trace so ratio checks can be recomputed
//! from the metrics file alone.

use crate::coord::{Coord, NetworkState, NodeId};
use crate::engine::{self, Phase, RequestOutcome, ServeOptions, TransformPlan};
use crate::error::{Error, Result};
use crate::single_server::serve_request_ss;
use crate::state::{StateCounters, StateTable};
use crate::workloads::{gen_repeating, gen_uniform, gen_zipf, AdversarialGen};
use crate::workset::{CommGraph, TraceRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

/// Which algorithm a run drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algo {
    Dyhypes,
    SingleServer,
}

impl FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dyhypes" => Ok(Algo::Dyhypes),
            "ss" | "dyhypes_s" => Ok(Algo::SingleServer),
            other => Err(Error::InvalidConfig(format!("unknown algorithm '{other}'"))),
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algo::Dyhypes => write!(f, "dyhypes"),
            Algo::SingleServer => write!(f, "ss"),
        }
    }
}

/// Workload selector. String form: `uniform`, `zipf:<s>`, `repeating:<k>`,
/// `adversarial[:<c>]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Workload {
    Uniform,
    Zipf { s: f64 },
    /// A random pattern of k pairs, cycled to fill the request budget.
    Repeating { k: usize },
    Adversarial { c: f64 },
    /// An explicit externally supplied trace.
    Trace(Vec<TraceRecord>),
}

impl FromStr for Workload {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.splitn(2, ':');
        let head = parts.next().unwrap_or_default();
        let tail = parts.next();
        match head {
            "uniform" => Ok(Workload::Uniform),
            "zipf" => {
                let s: f64 = tail
                    .unwrap_or("1.0")
                    .parse()
                    .map_err(|_| Error::InvalidConfig("zipf exponent".into()))?;
                Ok(Workload::Zipf { s })
            }
            "repeating" => {
                let k: usize = tail
                    .unwrap_or("4")
                    .parse()
                    .map_err(|_| Error::InvalidConfig("repeating pattern size".into()))?;
                Ok(Workload::Repeating { k })
            }
            "adversarial" => {
                let c: f64 = tail
                    .unwrap_or("1.0")
                    .parse()
                    .map_err(|_| Error::InvalidConfig("adversarial constant".into()))?;
                Ok(Workload::Adversarial { c })
            }
            other => Err(Error::InvalidConfig(format!("unknown workload '{other}'"))),
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Workload::Uniform => write!(f, "uniform"),
            Workload::Zipf { s } => write!(f, "zipf:{s}"),
            Workload::Repeating { k } => write!(f, "repeating:{k}"),
            Workload::Adversarial { c } => write!(f, "adversarial:{c}"),
            Workload::Trace(t) => write!(f, "trace[{}]", t.len()),
        }
    }
}

/// Full description of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dim: u8,
    pub algo: Algo,
    pub workload: Workload,
    pub m: usize,
    pub seed: u64,
    /// Run the deep structural audits after every request.
    pub deep_checks: bool,
    /// Keep per-request plan dumps for differential testing and the audit.
    pub dump_plans: bool,
    /// Fixed server node for the single-server algorithm.
    pub server: NodeId,
}

impl RunConfig {
    pub fn new(dim: u8, algo: Algo, workload: Workload, m: usize, seed: u64) -> Self {
        RunConfig {
            dim,
            algo,
            workload,
            m,
            seed,
            deep_checks: false,
            dump_plans: false,
            server: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=20).contains(&self.dim) {
            return Err(Error::InvalidConfig(format!("dimension {} out of [2,20]", self.dim)));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        if self.server as usize >= 1usize << self.dim {
            return Err(Error::InvalidConfig("server id out of range".into()));
        }
        if let Workload::Trace(t) = &self.workload {
            if t.is_empty() {
                return Err(Error::InvalidConfig("empty trace".into()));
            }
        }
        Ok(())
    }
}

/// Per-request record. `cost = hops + rounds` matches the model's
/// per-request charge of routing distance plus transformation plus one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub t: u64,
    pub u: NodeId,
    pub v: NodeId,
    pub hops: u32,
    pub rounds: u64,
    pub messages: u64,
    pub ws: u64,
    pub log_ws: u32,
    pub cost: u64,
    pub invariant_ok: bool,
    /// Level of the smallest common subtree before the transformation; not
    /// part of the CSV contract but needed by the message-complexity fit.
    pub alpha: u8,
}

impl RequestMetrics {
    fn from_outcome(out: &RequestOutcome, alpha: u8) -> Self {
        RequestMetrics {
            t: out.t,
            u: out.u,
            v: out.v,
            hops: out.hops,
            rounds: out.rounds,
            messages: out.messages,
            ws: out.ws,
            log_ws: out.log_ws,
            cost: out.hops as u64 + out.rounds,
            invariant_ok: out.invariant_ok,
            alpha,
        }
    }
}

/// Aggregates over one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub dim: u8,
    pub algo: Algo,
    pub workload: String,
    pub m: usize,
    pub seed: u64,
    pub total_cost: u64,
    pub total_hops: u64,
    pub total_rounds: u64,
    pub total_messages: u64,
    pub max_cost: u64,
    pub ws_bound: u64,
    /// total_cost / (ws_bound + m)
    pub cost_ratio: f64,
    /// total_hops / (ws_bound + m)
    pub hops_ratio: f64,
    /// Sum of 2^(N - alpha_i), the depth weight the message fit divides by.
    pub depth_weight: u64,
    pub invariant_failures: u64,
    pub state_counters: StateCounters,
}

/// One run's full output.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: Vec<RequestMetrics>,
    pub summary: RunSummary,
    pub plans: Vec<(u64, Vec<TransformPlan>)>,
}

/// Execute a run. Deterministic: identical (config, seed) produce identical
/// metrics and summaries.
pub fn run(config: &RunConfig) -> Result<RunResult> {
    run_with_state(config).map(|(result, _, _)| result)
}

/// Execute a run and also hand back the final placement and state table
/// (for snapshot export and state-level assertions in tests).
pub fn run_with_state(config: &RunConfig) -> Result<(RunResult, NetworkState, StateTable)> {
    config.validate()?;
    let mut net = NetworkState::new(config.dim);
    let mut states = StateTable::new(&net);
    let mut graph = CommGraph::new(net.len());
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let n = net.len();

    // Pre-generated traces use an independent stream so engine randomness
    // does not perturb the workload.
    let trace_seed = config.seed ^ 0xD1CE_5EED_0000_0001;
    let pregenerated: Option<Vec<TraceRecord>> = match &config.workload {
        Workload::Uniform => Some(gen_uniform(n, config.m, trace_seed)),
        Workload::Zipf { s } => Some(gen_zipf(n, config.m, *s, trace_seed)),
        Workload::Repeating { k } => {
            let mut pat_rng = ChaCha12Rng::seed_from_u64(trace_seed);
            let pattern: Vec<(NodeId, NodeId)> = (0..*k)
                .map(|_| {
                    let u = pat_rng.gen_range(0..n as NodeId);
                    let mut v = pat_rng.gen_range(0..n as NodeId);
                    while v == u {
                        v = pat_rng.gen_range(0..n as NodeId);
                    }
                    (u, v)
                })
                .collect();
            let repeats = config.m.div_ceil(pattern.len());
            let mut t = gen_repeating(&pattern, repeats);
            t.truncate(config.m);
            Some(t)
        }
        Workload::Adversarial { .. } => None,
        Workload::Trace(t) => {
            let mut t = t.clone();
            t.truncate(config.m);
            Some(t)
        }
    };
    let mut adversary = match &config.workload {
        Workload::Adversarial { c } => Some(AdversarialGen::new(*c, trace_seed)),
        _ => None,
    };

    // Single-server runs address every request at the fixed server.
    let mut metrics = Vec::with_capacity(config.m);
    let mut plans = Vec::new();
    let mut ws_bound = 0u64;
    let mut depth_weight = 0u64;
    let mut invariant_failures = 0u64;
    let opts = ServeOptions { deep_checks: config.deep_checks, ..Default::default() };

    for i in 0..config.m {
        let t = (i + 1) as u64;
        let (u, v) = match (&pregenerated, &mut adversary) {
            (Some(trace), _) => {
                let rec = trace[i];
                (rec.u, rec.v)
            }
            (None, Some(adv)) => {
                let rec = adv.next(&net, &mut graph, t)?;
                (rec.u, rec.v)
            }
            _ => unreachable!("workload provides requests"),
        };
        let (u, v) = match config.algo {
            Algo::SingleServer => {
                // All traffic terminates at the server.
                let client = if u == config.server { v } else { u };
                (config.server, client)
            }
            Algo::Dyhypes => (u, v),
        };
        let a0 = engine::alpha(&net, u, v)?;
        let outcome = match config.algo {
            Algo::Dyhypes => {
                engine::serve_request(&mut net, &mut states, &mut graph, &mut rng, t, u, v, opts)?
            }
            Algo::SingleServer => serve_request_ss(&mut net, &mut graph, &mut rng, t, u, v)?,
        };
        ws_bound += outcome.log_ws as u64;
        depth_weight += 1u64 << (config.dim - a0);
        if !outcome.invariant_ok {
            invariant_failures += 1;
        }
        if config.dump_plans {
            plans.push((t, outcome.plans.clone()));
        }
        metrics.push(RequestMetrics::from_outcome(&outcome, a0));
    }

    let total_cost: u64 = metrics.iter().map(|m| m.cost).sum();
    let total_hops: u64 = metrics.iter().map(|m| m.hops as u64).sum();
    let total_rounds: u64 = metrics.iter().map(|m| m.rounds).sum();
    let total_messages: u64 = metrics.iter().map(|m| m.messages).sum();
    let max_cost = metrics.iter().map(|m| m.cost).max().unwrap_or(0);
    let denom = (ws_bound + config.m as u64) as f64;
    let summary = RunSummary {
        dim: config.dim,
        algo: config.algo,
        workload: config.workload.to_string(),
        m: config.m,
        seed: config.seed,
        total_cost,
        total_hops,
        total_rounds,
        total_messages,
        max_cost,
        ws_bound,
        cost_ratio: total_cost as f64 / denom,
        hops_ratio: total_hops as f64 / denom,
        depth_weight,
        invariant_failures,
        state_counters: states.counters,
    };
    Ok((RunResult { metrics, summary, plans }, net, states))
}

/// Render metrics in the fixed CSV column order.
pub fn metrics_to_csv(metrics: &[RequestMetrics]) -> String {
    let mut out = String::from("t,u,v,hops,rounds,messages,ws,log_ws,cost,invariant_ok\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            m.t, m.u, m.v, m.hops, m.rounds, m.messages, m.ws, m.log_ws, m.cost, m.invariant_ok
        ));
    }
    out
}

// ----------------------------------------------------------------------
// Communication audit
// ----------------------------------------------------------------------

/// A message in a synthesized round schedule.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScheduledMessage {
    pub round: u64,
    pub from: Coord,
    pub to: Coord,
    /// Payload size in machine words of O(log n) bits each.
    pub words: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditViolation {
    pub round: u64,
    pub from: Coord,
    pub to: Coord,
    pub reason: String,
}

/// Expand a plan into a concrete schedule: a pipelined binomial-tree
/// broadcast from the anchor over the scope subtree, then the moves as
/// one-round link acquisitions between old and new coordinates.
pub fn synthesize_schedule(dim: u8, plan: &TransformPlan) -> Vec<ScheduledMessage> {
    let mut schedule = Vec::new();
    let scope = plan.scope_level.min(dim);
    let height = (dim - scope) as u32;
    let block = 1u32 << height;
    let base = (plan.anchor >> height) << height;
    // Broadcast: at round r every informed node sends across bit (scope + r).
    let mut round = 0u64;
    if !plan.moves.is_empty() || plan.phase == Phase::Swap {
        for r in 1..=height {
            round = r as u64;
            let stride = 1u32 << (height - r);
            let mut c = base;
            while c < base + block {
                let informed = c;
                let peer = informed ^ stride;
                schedule.push(ScheduledMessage { round, from: informed, to: peer, words: 2 });
                c += 2 * stride;
            }
        }
    }
    // Moves: each relocated node contacts its target coordinate once.
    if !plan.moves.is_empty() {
        round += 1;
        for &(_, old, new) in &plan.moves {
            schedule.push(ScheduledMessage { round, from: old, to: new, words: 2 });
        }
    }
    schedule
}

/// Check a plan stream against the communication model: at most one message
/// per directed link per round, and no message wider than `max_words` words.
pub fn congest_audit(
    dim: u8,
    plans: &[(u64, Vec<TransformPlan>)],
    max_words: u32,
) -> Vec<AuditViolation> {
    let mut violations = Vec::new();
    for (_, request_plans) in plans {
        let mut round_base = 0u64;
        for plan in request_plans {
            let schedule = synthesize_schedule(dim, plan);
            violations.extend(audit_schedule(&schedule, round_base, max_words));
            round_base += schedule.iter().map(|m| m.round).max().unwrap_or(0);
        }
    }
    violations
}

/// Audit one explicit schedule (also used directly on hand-built schedules).
pub fn audit_schedule(
    schedule: &[ScheduledMessage],
    round_offset: u64,
    max_words: u32,
) -> Vec<AuditViolation> {
    let mut violations = Vec::new();
    let mut seen: HashMap<(u64, Coord, Coord), u32> = HashMap::new();
    for msg in schedule {
        let key = (round_offset + msg.round, msg.from, msg.to);
        let count = seen.entry(key).or_insert(0);
        *count += 1;
        if *count == 2 {
            violations.push(AuditViolation {
                round: key.0,
                from: msg.from,
                to: msg.to,
                reason: "more than one message on a link in one round".into(),
            });
        }
        if msg.words > max_words {
            violations.push(AuditViolation {
                round: key.0,
                from: msg.from,
                to: msg.to,
                reason: format!("message of {} words exceeds budget {}", msg.words, max_words),
            });
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::new(1, Algo::Dyhypes, Workload::Uniform, 10, 0);
        assert!(cfg.validate().is_err());
        cfg.dim = 4;
        assert!(cfg.validate().is_ok());
        cfg.m = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn workload_parsing() {
        assert_eq!(Workload::from_str("uniform").unwrap(), Workload::Uniform);
        assert_eq!(Workload::from_str("zipf:1.2").unwrap(), Workload::Zipf { s: 1.2 });
        assert_eq!(Workload::from_str("repeating:8").unwrap(), Workload::Repeating { k: 8 });
        assert!(Workload::from_str("nope").is_err());
        assert_eq!("ss".parse::<Algo>().unwrap(), Algo::SingleServer);
    }

    #[test]
    fn single_adjacent_request_costs_one() {
        // One request between an adjacent pair: hops 1, no transformation.
        let cfg = RunConfig::new(
            3,
            Algo::Dyhypes,
            Workload::Trace(vec![TraceRecord { t: 1, u: 0, v: 1 }]),
            1,
            7,
        );
        let result = run(&cfg).unwrap();
        assert_eq!(result.summary.total_cost, result.metrics[0].hops as u64 + result.metrics[0].rounds);
        assert_eq!(result.metrics[0].hops, 1);
    }

    #[test]
    fn runs_are_deterministic() {
        for algo in [Algo::Dyhypes, Algo::SingleServer] {
            let mut cfg = RunConfig::new(4, algo, Workload::Uniform, 300, 123);
            cfg.deep_checks = true;
            let a = run(&cfg).unwrap();
            let b = run(&cfg).unwrap();
            assert_eq!(metrics_to_csv(&a.metrics), metrics_to_csv(&b.metrics));
            assert_eq!(
                serde_json::to_string(&a.summary).unwrap(),
                serde_json::to_string(&b.summary).unwrap()
            );
        }
    }

    #[test]
    fn accounting_is_recomputable_from_metrics() {
        let cfg = RunConfig::new(5, Algo::Dyhypes, Workload::Zipf { s: 1.2 }, 400, 11);
        let result = run(&cfg).unwrap();
        let cost: u64 = result.metrics.iter().map(|m| m.hops as u64 + m.rounds).sum();
        assert_eq!(cost, result.summary.total_cost);
        let ws: u64 = result.metrics.iter().map(|m| m.log_ws as u64).sum();
        assert_eq!(ws, result.summary.ws_bound);
    }

    #[test]
    fn audit_catches_hand_built_collision() {
        let schedule = vec![
            ScheduledMessage { round: 1, from: 0, to: 1, words: 1 },
            ScheduledMessage { round: 1, from: 0, to: 1, words: 1 },
        ];
        let violations = audit_schedule(&schedule, 0, 4);
        assert_eq!(violations.len(), 1);
        let empty: Vec<(u64, Vec<TransformPlan>)> = Vec::new();
        assert!(congest_audit(4, &empty, 4).is_empty());
    }

    #[test]
    fn audit_passes_real_plans() {
        let mut cfg = RunConfig::new(4, Algo::Dyhypes, Workload::Uniform, 200, 3);
        cfg.dump_plans = true;
        let result = run(&cfg).unwrap();
        let violations = congest_audit(4, &result.plans, 4);
        assert!(violations.is_empty(), "{violations:?}");
        let mut cfg_ss = RunConfig::new(4, Algo::SingleServer, Workload::Uniform, 200, 3);
        cfg_ss.dump_plans = true;
        let result_ss = run(&cfg_ss).unwrap();
        assert!(congest_audit(4, &result_ss.plans, 4).is_empty());
    }
}
